// Learnable building blocks. Each block is a small value type holding its
// parameter names and sizes; `init` registers parameters in a ParamStore and
// the call operator records the forward pass on a Graph.

#ifndef TARS_BLOCKS_HPP
#define TARS_BLOCKS_HPP

#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "tars/autodiff.hpp"
#include "tars/param_store.hpp"

namespace tars::blocks {

using ad::Graph;
using ad::Var;

inline constexpr double kLeakySlope = 0.1;

struct Linear {
  std::string name;
  int in = 0;
  int out = 0;
  bool bias = true;

  void init(ParamStore& params, std::mt19937_64& rng) const;
  Var operator()(Graph& g, const ParamStore& params, Var x) const;
  std::string weight_name() const { return name + ".w"; }
  std::string bias_name() const { return name + ".b"; }
};

/// Affine layers with a leaky rectifier between layers (none after the last).
/// widths = {in, hidden..., out}.
struct Mlp {
  std::string name;
  std::vector<int> widths;

  std::vector<Linear> layers() const;
  void init(ParamStore& params, std::mt19937_64& rng) const;
  Var operator()(Graph& g, const ParamStore& params, Var x) const;
};

struct AttentionSpec {
  int d_query = 1;   // query input channels
  int d_input = 1;   // key/value input channels
  int d_k = 1;
  int d_v = 1;
  bool positional_encoding = false;
  int pe_dims = 3;   // width of the relative offset fed to the encoding MLP
  int heads = 1;     // only single-head attention is implemented
};

/// Single-head scaled dot-product attention with linear Q/K/V maps and an
/// optional 2-layer MLP encoding of relative offsets added to keys and values
/// before projection.
struct Attention {
  std::string name;
  AttentionSpec spec;

  Linear query_map() const { return {name + ".q", spec.d_query, spec.d_k, true}; }
  Linear key_map() const { return {name + ".k", spec.d_input, spec.d_k, true}; }
  Linear value_map() const { return {name + ".v", spec.d_input, spec.d_v, true}; }
  Mlp pe_mlp() const { return {name + ".pe", {spec.pe_dims, spec.d_k, spec.d_input}}; }

  void init(ParamStore& params, std::mt19937_64& rng) const;

  /// keys/values hold one row per slot; group g owns slots [offsets[g], offsets[g+1]).
  Var operator()(Graph& g, const ParamStore& params, Var query, Var keys, Var values,
                 std::span<const int> offsets, std::optional<Var> rel_pos = std::nullopt) const;

  /// Same as operator() with keys = values = source[slot_index]. Projections
  /// are applied once per source row and then gathered.
  Var indexed(Graph& g, const ParamStore& params, Var query, Var source,
              std::span<const int> slot_index, std::span<const int> offsets,
              std::optional<Var> rel_pos = std::nullopt) const;
};

/// Offsets for fixed-size groups: {0, k, 2k, ...}.
std::vector<int> uniform_offsets(int groups, int k);

/// Stride-1 zero-padded ("same") 2-D convolution on an H*W x C field.
struct Conv2d {
  std::string name;
  int in = 1;
  int out = 1;
  int kernel = 3;
  bool bias = true;

  void init(ParamStore& params, std::mt19937_64& rng) const;
  Var operator()(Graph& g, const ParamStore& params, Var field, int height, int width,
                 int stride = 1) const;
  std::string weight_name() const { return name + ".w"; }
  std::string bias_name() const { return name + ".b"; }
};

/// Output spatial size of a stride-s "same" convolution.
inline int strided_size(int n, int stride) { return (n + stride - 1) / stride; }

/// Convolutional GRU step. The update gate z weights the previous state:
/// out = z * hidden + (1 - z) * tanh(W * x + U * (r * hidden)).
struct ConvGru {
  std::string name;
  int input_channels = 1;
  int channels = 1;
  int kernel = 3;

  Conv2d update_gate() const { return {name + ".z", input_channels + channels, channels, kernel, true}; }
  Conv2d reset_gate() const { return {name + ".r", input_channels + channels, channels, kernel, true}; }
  Conv2d input_conv() const { return {name + ".wg", input_channels, channels, kernel, true}; }
  Conv2d hidden_conv() const { return {name + ".ug", channels, channels, kernel, false}; }

  void init(ParamStore& params, std::mt19937_64& rng) const;
  Var operator()(Graph& g, const ParamStore& params, Var input, Var hidden, int height,
                 int width) const;
};

/// Pixel-wise convex fusion: w = sigmoid(conv([traffic, motion])) with one
/// weight per cell, out = w * traffic + (1 - w) * motion.
struct SpatialAttentionFusion {
  std::string name;
  int channels = 1;
  int kernel = 3;

  Conv2d score_conv() const { return {name + ".score", 2 * channels, 1, kernel, true}; }
  void init(ParamStore& params, std::mt19937_64& rng) const;
  Var weights(Graph& g, const ParamStore& params, Var traffic, Var motion, int height,
              int width) const;
  Var operator()(Graph& g, const ParamStore& params, Var traffic, Var motion, int height,
                 int width) const;
};

/// Fuses with an externally supplied weight map (H*W x 1).
Var convex_fuse(Var weights, Var traffic, Var motion);

/// Column-wise then row-wise self-attention; returns (col pass) + (row pass).
struct AxialAttentionBlock {
  std::string name;
  int channels = 1;

  Attention column_attention() const;
  Attention row_attention() const;
  void init(ParamStore& params, std::mt19937_64& rng) const;
  Var operator()(Graph& g, const ParamStore& params, Var field, int height, int width) const;
};

/// Slot tables for axial passes: every cell attends over its column / row.
struct AxialSlots {
  std::vector<int> index;
  std::vector<int> offsets;
};
AxialSlots column_slots(int height, int width);
AxialSlots row_slots(int height, int width);

/// Pools the points of each grid cell into one vector: attention pooling
/// with a learned query over the cell's points, multiplied by per-channel
/// sigmoid gates computed from the cell-mean input feature. Empty cells and
/// out-of-grid points contribute zero.
struct PointToGridAttention {
  std::string name;
  int in = 1;
  int out = 1;

  Linear key_map() const { return {name + ".k", in, out, true}; }
  Linear value_map() const { return {name + ".v", in, out, true}; }
  Linear gate_map() const { return {name + ".gate", in, out, true}; }
  std::string query_name() const { return name + ".query"; }

  void init(ParamStore& params, std::mt19937_64& rng) const;
  /// `cell_of_point` holds a flat cell index or kOutOfGrid per feature row.
  Var operator()(Graph& g, const ParamStore& params, Var features,
                 std::span<const int> cell_of_point, int num_cells) const;
};

}  // namespace tars::blocks

#endif  // TARS_BLOCKS_HPP
