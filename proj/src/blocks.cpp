#include "tars/blocks.hpp"

#include <algorithm>
#include <numeric>

#include "tars/geometry.hpp"

namespace tars::blocks {

void Linear::init(ParamStore& params, std::mt19937_64& rng) const {
  params.add_uniform(weight_name(), in, out, in, rng);
  if (bias) params.add_uniform(bias_name(), 1, out, in, rng);
}

Var Linear::operator()(Graph& g, const ParamStore& params, Var x) const {
  if (x.cols() != in) {
    throw ShapeError(name + ": expected " + std::to_string(in) + " input channels, got " +
                     std::to_string(x.cols()));
  }
  Var y = ad::matmul(x, g.param(params, weight_name()));
  if (bias) y = ad::add(y, g.param(params, bias_name()));
  return y;
}

std::vector<Linear> Mlp::layers() const {
  if (widths.size() < 2) throw ShapeError(name + ": an MLP needs at least input and output widths");
  std::vector<Linear> out;
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
    out.push_back({name + "." + std::to_string(i), widths[i], widths[i + 1], true});
  }
  return out;
}

void Mlp::init(ParamStore& params, std::mt19937_64& rng) const {
  for (const auto& l : layers()) l.init(params, rng);
}

Var Mlp::operator()(Graph& g, const ParamStore& params, Var x) const {
  const auto ls = layers();
  for (std::size_t i = 0; i < ls.size(); ++i) {
    x = ls[i](g, params, x);
    if (i + 1 < ls.size()) x = ad::leaky_relu(x, kLeakySlope);
  }
  return x;
}

void Attention::init(ParamStore& params, std::mt19937_64& rng) const {
  if (spec.heads != 1) throw ShapeError(name + ": only single-head attention is supported");
  query_map().init(params, rng);
  key_map().init(params, rng);
  value_map().init(params, rng);
  if (spec.positional_encoding) pe_mlp().init(params, rng);
}

std::vector<int> uniform_offsets(int groups, int k) {
  std::vector<int> off(static_cast<std::size_t>(groups) + 1);
  for (int i = 0; i <= groups; ++i) off[i] = i * k;
  return off;
}

Var Attention::operator()(Graph& g, const ParamStore& params, Var query, Var keys, Var values,
                          std::span<const int> offsets, std::optional<Var> rel_pos) const {
  if (keys.rows() != values.rows()) throw ShapeError(name + ": keys and values differ in count");
  if (keys.cols() != spec.d_input || values.cols() != spec.d_input) {
    throw ShapeError(name + ": key/value channels do not match the attention spec");
  }
  if (spec.positional_encoding) {
    if (!rel_pos) throw ShapeError(name + ": positional encoding needs relative offsets");
    if (rel_pos->rows() != keys.rows()) throw ShapeError(name + ": one offset per key required");
    Var pe = pe_mlp()(g, params, *rel_pos);
    keys = ad::add(keys, pe);
    values = ad::add(values, pe);
  }
  Var q = query_map()(g, params, query);
  Var k = key_map()(g, params, keys);
  Var v = value_map()(g, params, values);
  return ad::grouped_attention(q, k, v, offsets);
}

Var Attention::indexed(Graph& g, const ParamStore& params, Var query, Var source,
                       std::span<const int> slot_index, std::span<const int> offsets,
                       std::optional<Var> rel_pos) const {
  if (source.cols() != spec.d_input) {
    throw ShapeError(name + ": source channels do not match the attention spec");
  }
  const Linear km = key_map();
  const Linear vm = value_map();
  // Projection is linear, so W(x[idx] + pe) + b = (xW)[idx] + peW + b.
  Var k = ad::gather_rows(ad::matmul(source, g.param(params, km.weight_name())), slot_index);
  Var v = ad::gather_rows(ad::matmul(source, g.param(params, vm.weight_name())), slot_index);
  if (spec.positional_encoding) {
    if (!rel_pos) throw ShapeError(name + ": positional encoding needs relative offsets");
    if (rel_pos->rows() != static_cast<int>(slot_index.size())) {
      throw ShapeError(name + ": one offset per slot required");
    }
    Var pe = pe_mlp()(g, params, *rel_pos);
    k = ad::add(k, ad::matmul(pe, g.param(params, km.weight_name())));
    v = ad::add(v, ad::matmul(pe, g.param(params, vm.weight_name())));
  }
  k = ad::add(k, g.param(params, km.bias_name()));
  v = ad::add(v, g.param(params, vm.bias_name()));
  Var q = query_map()(g, params, query);
  return ad::grouped_attention(q, k, v, offsets);
}

void Conv2d::init(ParamStore& params, std::mt19937_64& rng) const {
  if (kernel % 2 == 0) throw ShapeError(name + ": kernel size must be odd");
  const int fan_in = kernel * kernel * in;
  params.add_uniform(weight_name(), fan_in, out, fan_in, rng);
  if (bias) params.add_uniform(bias_name(), 1, out, fan_in, rng);
}

Var Conv2d::operator()(Graph& g, const ParamStore& params, Var field, int height, int width,
                       int stride) const {
  if (field.cols() != in) {
    throw ShapeError(name + ": expected " + std::to_string(in) + " channels, got " +
                     std::to_string(field.cols()));
  }
  if (field.rows() != height * width) throw ShapeError(name + ": field rows are not H*W");
  Var cols = ad::im2col(field, height, width, kernel);
  if (stride > 1) {
    std::vector<int> keep;
    for (int y = 0; y < height; y += stride)
      for (int x = 0; x < width; x += stride) keep.push_back(y * width + x);
    cols = ad::gather_rows(cols, keep);
  }
  Var y = ad::matmul(cols, g.param(params, weight_name()));
  if (bias) y = ad::add(y, g.param(params, bias_name()));
  return y;
}

void ConvGru::init(ParamStore& params, std::mt19937_64& rng) const {
  update_gate().init(params, rng);
  reset_gate().init(params, rng);
  input_conv().init(params, rng);
  hidden_conv().init(params, rng);
}

Var ConvGru::operator()(Graph& g, const ParamStore& params, Var input, Var hidden, int height,
                        int width) const {
  if (input.rows() != hidden.rows() || hidden.cols() != channels) {
    throw ShapeError(name + ": input and hidden fields differ in shape");
  }
  Var both = ad::concat_cols({input, hidden});
  Var z = ad::sigmoid(update_gate()(g, params, both, height, width));
  Var r = ad::sigmoid(reset_gate()(g, params, both, height, width));
  Var cand = ad::tanh(ad::add(input_conv()(g, params, input, height, width),
                              hidden_conv()(g, params, ad::mul(r, hidden), height, width)));
  // z * h + (1 - z) * cand  ==  cand + z * (h - cand)
  return ad::add(cand, ad::mul(z, ad::sub(hidden, cand)));
}

void SpatialAttentionFusion::init(ParamStore& params, std::mt19937_64& rng) const {
  score_conv().init(params, rng);
}

Var SpatialAttentionFusion::weights(Graph& g, const ParamStore& params, Var traffic, Var motion,
                                    int height, int width) const {
  if (traffic.rows() != motion.rows() || traffic.cols() != motion.cols()) {
    throw ShapeError(name + ": traffic and motion fields differ in shape");
  }
  return ad::sigmoid(score_conv()(g, params, ad::concat_cols({traffic, motion}), height, width));
}

Var convex_fuse(Var weights, Var traffic, Var motion) {
  if (traffic.rows() != motion.rows() || traffic.cols() != motion.cols()) {
    throw ShapeError("convex_fuse: traffic and motion fields differ in shape");
  }
  return ad::add(motion, ad::mul(ad::sub(traffic, motion), weights));
}

Var SpatialAttentionFusion::operator()(Graph& g, const ParamStore& params, Var traffic, Var motion,
                                       int height, int width) const {
  return convex_fuse(weights(g, params, traffic, motion, height, width), traffic, motion);
}

AxialSlots column_slots(int height, int width) {
  AxialSlots s;
  s.offsets.push_back(0);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      for (int yy = 0; yy < height; ++yy) s.index.push_back(yy * width + x);
      s.offsets.push_back(static_cast<int>(s.index.size()));
    }
  return s;
}

AxialSlots row_slots(int height, int width) {
  AxialSlots s;
  s.offsets.push_back(0);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      for (int xx = 0; xx < width; ++xx) s.index.push_back(y * width + xx);
      s.offsets.push_back(static_cast<int>(s.index.size()));
    }
  return s;
}

Attention AxialAttentionBlock::column_attention() const {
  return {name + ".col", AttentionSpec{channels, channels, channels, channels, false, 3, 1}};
}

Attention AxialAttentionBlock::row_attention() const {
  return {name + ".row", AttentionSpec{channels, channels, channels, channels, false, 3, 1}};
}

void AxialAttentionBlock::init(ParamStore& params, std::mt19937_64& rng) const {
  column_attention().init(params, rng);
  row_attention().init(params, rng);
}

Var AxialAttentionBlock::operator()(Graph& g, const ParamStore& params, Var field, int height,
                                    int width) const {
  if (height < 1 || width < 1 || field.rows() != height * width || field.cols() != channels) {
    throw ShapeError(name + ": field does not match the block shape");
  }
  const AxialSlots cs = column_slots(height, width);
  Var along_h = column_attention().indexed(g, params, field, field, cs.index, cs.offsets);
  const AxialSlots rs = row_slots(height, width);
  Var along_w = row_attention().indexed(g, params, along_h, along_h, rs.index, rs.offsets);
  return ad::add(along_h, along_w);
}

void PointToGridAttention::init(ParamStore& params, std::mt19937_64& rng) const {
  key_map().init(params, rng);
  value_map().init(params, rng);
  gate_map().init(params, rng);
  params.add_uniform(query_name(), 1, out, out, rng);
}

Var PointToGridAttention::operator()(Graph& g, const ParamStore& params, Var features,
                                     std::span<const int> cell_of_point, int num_cells) const {
  if (static_cast<int>(cell_of_point.size()) != features.rows()) {
    throw ShapeError(name + ": one cell index per feature row required");
  }
  // bucket points by cell, stable in point order
  std::vector<int> counts(static_cast<std::size_t>(num_cells), 0);
  for (int c : cell_of_point) {
    if (c >= num_cells) throw SizeError(name + ": cell index out of range");
    if (c >= 0) ++counts[c];
  }
  std::vector<int> offsets(static_cast<std::size_t>(num_cells) + 1, 0);
  for (int c = 0; c < num_cells; ++c) offsets[c + 1] = offsets[c] + counts[c];
  std::vector<int> order(static_cast<std::size_t>(offsets.back()));
  std::vector<int> cursor(offsets.begin(), offsets.end() - 1);
  for (int i = 0; i < static_cast<int>(cell_of_point.size()); ++i) {
    if (cell_of_point[i] >= 0) order[cursor[cell_of_point[i]]++] = i;
  }
  if (order.empty()) {
    return g.constant(ad::Tensor(num_cells, out));
  }
  Var grouped = ad::gather_rows(features, order);
  Var k = key_map()(g, params, grouped);
  Var v = value_map()(g, params, grouped);
  std::vector<int> zeros(static_cast<std::size_t>(num_cells), 0);
  Var q = ad::gather_rows(g.param(params, query_name()), zeros);
  Var pooled = ad::grouped_attention(q, k, v, offsets);
  Var gate = ad::sigmoid(gate_map()(g, params, ad::group_mean(grouped, offsets)));
  return ad::mul(gate, pooled);
}

}  // namespace tars::blocks
