#include "tars/autodiff.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>

#include "tars/param_store.hpp"

namespace tars::ad {

Tensor Tensor::from(int r, int c, std::vector<double> values) {
  if (values.size() != static_cast<std::size_t>(r) * c) {
    throw ShapeError("Tensor::from: value count does not match shape");
  }
  Tensor t;
  t.rows = r;
  t.cols = c;
  t.data = std::move(values);
  return t;
}

const Tensor& Var::value() const { return graph_->value(id_); }
double Var::scalar() const {
  const Tensor& t = value();
  if (t.size() != 1) throw ShapeError("Var::scalar on non-scalar");
  return t.data[0];
}
bool Var::requires_grad() const { return graph_->requires_grad(id_); }

Var Graph::record(Tensor value, bool requires_grad, Backward backward) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  if (requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Graph::constant(Tensor value) { return record(std::move(value), false, nullptr); }
Var Graph::variable(Tensor value) { return record(std::move(value), true, nullptr); }

Var Graph::param(const ParamStore& store, const std::string& name) {
  auto it = params_.find(name);
  if (it != params_.end()) return Var(this, it->second);
  const auto& entry = store.at(name);
  Var v = record(entry.value, !entry.frozen, nullptr);
  params_.emplace(name, v.id());
  return v;
}

Tensor& Graph::grad(int id) {
  Node& n = nodes_[id];
  if (n.grad.empty() && !n.value.empty()) n.grad = Tensor(n.value.rows, n.value.cols);
  return n.grad;
}

void Graph::backward(Var out) {
  if (out.value().size() != 1) throw ShapeError("backward: output must be 1x1");
  if (!requires_grad(out.id())) return;
  grad(out.id()).data[0] += 1.0;
  for (int id = out.id(); id >= 0; --id) {
    Node& n = nodes_[id];
    if (!n.requires_grad || !n.backward || n.grad.empty()) continue;
    n.backward(*this, id);
  }
}

void Graph::accumulate_param_grads(ParamStore& store) {
  for (const auto& [name, id] : params_) {
    auto& entry = store.at(name);
    if (entry.frozen || nodes_[id].grad.empty()) continue;
    if (entry.grad.empty()) entry.grad = Tensor(entry.value.rows, entry.value.cols);
    const Tensor& g = nodes_[id].grad;
    for (std::size_t i = 0; i < g.size(); ++i) entry.grad.data[i] += g.data[i];
  }
}

namespace {

Graph& graph_of(Var a) { return a.graph(); }

enum class Bcast { kSame, kScalar, kRow, kCol };

Bcast broadcast_kind(const Tensor& a, const Tensor& b) {
  if (a.same_shape(b)) return Bcast::kSame;
  if (b.rows == 1 && b.cols == 1) return Bcast::kScalar;
  if (b.rows == 1 && b.cols == a.cols) return Bcast::kRow;
  if (b.cols == 1 && b.rows == a.rows) return Bcast::kCol;
  throw ShapeError("elementwise op: incompatible shapes " + std::to_string(a.rows) + "x" +
                   std::to_string(a.cols) + " and " + std::to_string(b.rows) + "x" +
                   std::to_string(b.cols));
}

inline std::size_t bindex(Bcast k, int cols_a, std::size_t flat) {
  switch (k) {
    case Bcast::kSame:
      return flat;
    case Bcast::kScalar:
      return 0;
    case Bcast::kRow:
      return flat % static_cast<std::size_t>(cols_a);
    case Bcast::kCol:
      return flat / static_cast<std::size_t>(cols_a);
  }
  return 0;
}

template <class Fwd, class DA, class DB>
Var binary(Var a, Var b, Fwd fwd, DA da, DB db) {
  Graph& g = graph_of(a);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const Bcast kind = broadcast_kind(av, bv);
  Tensor out(av.rows, av.cols);
  for (std::size_t i = 0; i < out.size(); ++i) {
    out.data[i] = fwd(av.data[i], bv.data[bindex(kind, av.cols, i)]);
  }
  const bool rg = a.requires_grad() || b.requires_grad();
  const int ia = a.id(), ib = b.id();
  return g.record(std::move(out), rg, [ia, ib, kind, da, db](Graph& gr, int self) {
    const Tensor& go = gr.grad(self);
    const Tensor& av = gr.value(ia);
    const Tensor& bv = gr.value(ib);
    if (gr.requires_grad(ia)) {
      Tensor& ga = gr.grad(ia);
      for (std::size_t i = 0; i < go.size(); ++i) {
        ga.data[i] += go.data[i] * da(av.data[i], bv.data[bindex(kind, av.cols, i)]);
      }
    }
    if (gr.requires_grad(ib)) {
      Tensor& gb = gr.grad(ib);
      for (std::size_t i = 0; i < go.size(); ++i) {
        const std::size_t j = bindex(kind, av.cols, i);
        gb.data[j] += go.data[i] * db(av.data[i], bv.data[j]);
      }
    }
  });
}

template <class Fwd, class Deriv>
Var unary(Var a, Fwd fwd, Deriv deriv) {
  Graph& g = graph_of(a);
  const Tensor& av = a.value();
  Tensor out(av.rows, av.cols);
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = fwd(av.data[i]);
  const int ia = a.id();
  return g.record(std::move(out), a.requires_grad(), [ia, deriv](Graph& gr, int self) {
    const Tensor& go = gr.grad(self);
    const Tensor& x = gr.value(ia);
    const Tensor& y = gr.value(self);
    Tensor& ga = gr.grad(ia);
    for (std::size_t i = 0; i < go.size(); ++i) ga.data[i] += go.data[i] * deriv(x.data[i], y.data[i]);
  });
}

}  // namespace

Var add(Var a, Var b) {
  return binary(
      a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Var sub(Var a, Var b) {
  return binary(
      a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Var mul(Var a, Var b) {
  return binary(
      a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Var div(Var a, Var b) {
  return binary(
      a, b, [](double x, double y) { return x / y; }, [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

Var neg(Var a) { return scale(a, -1.0); }

Var scale(Var a, double s) {
  return unary(a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Var add_scalar(Var a, double s) {
  return unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Var matmul(Var a, Var b) {
  Graph& g = graph_of(a);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.cols != bv.rows) {
    throw ShapeError("matmul: " + std::to_string(av.rows) + "x" + std::to_string(av.cols) +
                     " times " + std::to_string(bv.rows) + "x" + std::to_string(bv.cols));
  }
  const int n = av.rows, k = av.cols, m = bv.cols;
  Tensor out(n, m);
  for (int i = 0; i < n; ++i) {
    double* orow = out.data.data() + static_cast<std::size_t>(i) * m;
    for (int p = 0; p < k; ++p) {
      const double aip = av.data[static_cast<std::size_t>(i) * k + p];
      if (aip == 0.0) continue;
      const double* brow = bv.data.data() + static_cast<std::size_t>(p) * m;
      for (int j = 0; j < m; ++j) orow[j] += aip * brow[j];
    }
  }
  const int ia = a.id(), ib = b.id();
  const bool rg = a.requires_grad() || b.requires_grad();
  return g.record(std::move(out), rg, [ia, ib, n, k, m](Graph& gr, int self) {
    const Tensor& go = gr.grad(self);
    const Tensor& av = gr.value(ia);
    const Tensor& bv = gr.value(ib);
    if (gr.requires_grad(ia)) {
      Tensor& ga = gr.grad(ia);
      for (int i = 0; i < n; ++i) {
        const double* grow = go.data.data() + static_cast<std::size_t>(i) * m;
        for (int p = 0; p < k; ++p) {
          const double* brow = bv.data.data() + static_cast<std::size_t>(p) * m;
          double acc = 0.0;
          for (int j = 0; j < m; ++j) acc += grow[j] * brow[j];
          ga.data[static_cast<std::size_t>(i) * k + p] += acc;
        }
      }
    }
    if (gr.requires_grad(ib)) {
      Tensor& gb = gr.grad(ib);
      for (int i = 0; i < n; ++i) {
        const double* grow = go.data.data() + static_cast<std::size_t>(i) * m;
        for (int p = 0; p < k; ++p) {
          const double aip = av.data[static_cast<std::size_t>(i) * k + p];
          if (aip == 0.0) continue;
          double* gbrow = gb.data.data() + static_cast<std::size_t>(p) * m;
          for (int j = 0; j < m; ++j) gbrow[j] += aip * grow[j];
        }
      }
    }
  });
}

Var transpose(Var a) {
  Graph& g = graph_of(a);
  const Tensor& av = a.value();
  Tensor out(av.cols, av.rows);
  for (int i = 0; i < av.rows; ++i)
    for (int j = 0; j < av.cols; ++j) out(j, i) = av(i, j);
  const int ia = a.id();
  return g.record(std::move(out), a.requires_grad(), [ia](Graph& gr, int self) {
    const Tensor& go = gr.grad(self);
    Tensor& ga = gr.grad(ia);
    for (int i = 0; i < ga.rows; ++i)
      for (int j = 0; j < ga.cols; ++j) ga(i, j) += go(j, i);
  });
}

Var leaky_relu(Var a, double slope) {
  return unary(
      a, [slope](double x) { return x > 0.0 ? x : slope * x; },
      [slope](double x, double) { return x > 0.0 ? 1.0 : slope; });
}

Var relu(Var a) {
  return unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var sigmoid(Var a) {
  return unary(
      a,
      [](double x) {
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Var tanh(Var a) {
  return unary(
      a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Var exp(Var a) {
  return unary(
      a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var log(Var a) {
  return unary(
      a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var abs(Var a) {
  return unary(
      a, [](double x) { return std::fabs(x); },
      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Var square(Var a) {
  return unary(
      a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var sqrt(Var a) {
  return unary(
      a, [](double x) { return std::sqrt(x); },
      [](double, double y) { return y > 0.0 ? 0.5 / y : 0.0; });
}

Var softplus(Var a) {
  return unary(
      a, [](double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); },
      [](double x, double) {
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      });
}

Var log_softmax_rows(Var a) {
  Graph& g = graph_of(a);
  const Tensor& av = a.value();
  Tensor out(av.rows, av.cols);
  for (int i = 0; i < av.rows; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (double v : av.row(i)) mx = std::max(mx, v);
    double z = 0.0;
    for (double v : av.row(i)) z += std::exp(v - mx);
    const double lz = mx + std::log(z);
    for (int j = 0; j < av.cols; ++j) out(i, j) = av(i, j) - lz;
  }
  const int ia = a.id();
  return g.record(std::move(out), a.requires_grad(), [ia](Graph& gr, int self) {
    const Tensor& go = gr.grad(self);
    const Tensor& y = gr.value(self);
    Tensor& ga = gr.grad(ia);
    for (int i = 0; i < y.rows; ++i) {
      double gs = 0.0;
      for (int j = 0; j < y.cols; ++j) gs += go(i, j);
      for (int j = 0; j < y.cols; ++j) ga(i, j) += go(i, j) - std::exp(y(i, j)) * gs;
    }
  });
}

Var clamp(Var a, double lo, double hi) {
  return unary(
      a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
      [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

Var sum(Var a) {
  Graph& g = graph_of(a);
  double s = 0.0;
  for (double v : a.value().data) s += v;
  const int ia = a.id();
  return g.record(Tensor(1, 1, s), a.requires_grad(), [ia](Graph& gr, int self) {
    const double go = gr.grad(self).data[0];
    for (double& v : gr.grad(ia).data) v += go;
  });
}

Var mean(Var a) {
  const auto n = static_cast<double>(a.value().size());
  if (n == 0) throw ShapeError("mean of empty tensor");
  return scale(sum(a), 1.0 / n);
}

Var sum_rows(Var a) {
  Graph& g = graph_of(a);
  const Tensor& av = a.value();
  Tensor out(1, av.cols);
  for (int i = 0; i < av.rows; ++i)
    for (int j = 0; j < av.cols; ++j) out.data[j] += av(i, j);
  const int ia = a.id();
  return g.record(std::move(out), a.requires_grad(), [ia](Graph& gr, int self) {
    const Tensor& go = gr.grad(self);
    Tensor& ga = gr.grad(ia);
    for (int i = 0; i < ga.rows; ++i)
      for (int j = 0; j < ga.cols; ++j) ga(i, j) += go.data[j];
  });
}

Var sum_cols(Var a) {
  Graph& g = graph_of(a);
  const Tensor& av = a.value();
  Tensor out(av.rows, 1);
  for (int i = 0; i < av.rows; ++i)
    for (int j = 0; j < av.cols; ++j) out.data[i] += av(i, j);
  const int ia = a.id();
  return g.record(std::move(out), a.requires_grad(), [ia](Graph& gr, int self) {
    const Tensor& go = gr.grad(self);
    Tensor& ga = gr.grad(ia);
    for (int i = 0; i < ga.rows; ++i)
      for (int j = 0; j < ga.cols; ++j) ga(i, j) += go.data[i];
  });
}

Var row_norm(Var a) {
  Graph& g = graph_of(a);
  const Tensor& av = a.value();
  Tensor out(av.rows, 1);
  for (int i = 0; i < av.rows; ++i) {
    double s = 0.0;
    for (double v : av.row(i)) s += v * v;
    out.data[i] = std::sqrt(s);
  }
  const int ia = a.id();
  return g.record(std::move(out), a.requires_grad(), [ia](Graph& gr, int self) {
    const Tensor& go = gr.grad(self);
    const Tensor& av = gr.value(ia);
    const Tensor& nv = gr.value(self);
    Tensor& ga = gr.grad(ia);
    for (int i = 0; i < av.rows; ++i) {
      if (nv.data[i] <= 0.0) continue;
      const double f = go.data[i] / nv.data[i];
      for (int j = 0; j < av.cols; ++j) ga(i, j) += f * av(i, j);
    }
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  Graph& g = graph_of(parts[0]);
  const int rows = parts[0].rows();
  int cols = 0;
  bool rg = false;
  std::vector<int> ids;
  std::vector<int> offsets;
  for (const Var& p : parts) {
    if (p.rows() != rows) throw ShapeError("concat_cols: row mismatch");
    offsets.push_back(cols);
    cols += p.cols();
    rg = rg || p.requires_grad();
    ids.push_back(p.id());
  }
  Tensor out(rows, cols);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& pv = parts[k].value();
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < pv.cols; ++j) out(i, offsets[k] + j) = pv(i, j);
  }
  return g.record(std::move(out), rg, [ids, offsets](Graph& gr, int self) {
    const Tensor& go = gr.grad(self);
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (!gr.requires_grad(ids[k])) continue;
      Tensor& gp = gr.grad(ids[k]);
      for (int i = 0; i < gp.rows; ++i)
        for (int j = 0; j < gp.cols; ++j) gp(i, j) += go(i, offsets[k] + j);
    }
  });
}

Var concat_cols(std::initializer_list<Var> parts) {
  return concat_cols(std::span<const Var>(parts.begin(), parts.size()));
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  Graph& g = graph_of(parts[0]);
  const int cols = parts[0].cols();
  int rows = 0;
  bool rg = false;
  std::vector<int> ids;
  std::vector<int> offsets;
  for (const Var& p : parts) {
    if (p.cols() != cols) throw ShapeError("concat_rows: column mismatch");
    offsets.push_back(rows);
    rows += p.rows();
    rg = rg || p.requires_grad();
    ids.push_back(p.id());
  }
  Tensor out(rows, cols);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& pv = parts[k].value();
    std::copy(pv.data.begin(), pv.data.end(),
              out.data.begin() + static_cast<std::ptrdiff_t>(offsets[k]) * cols);
  }
  return g.record(std::move(out), rg, [ids, offsets, cols](Graph& gr, int self) {
    const Tensor& go = gr.grad(self);
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (!gr.requires_grad(ids[k])) continue;
      Tensor& gp = gr.grad(ids[k]);
      const std::size_t base = static_cast<std::size_t>(offsets[k]) * cols;
      for (std::size_t i = 0; i < gp.size(); ++i) gp.data[i] += go.data[base + i];
    }
  });
}

Var slice_cols(Var a, int begin, int end) {
  Graph& g = graph_of(a);
  const Tensor& av = a.value();
  if (begin < 0 || end > av.cols || begin > end) throw ShapeError("slice_cols: bad range");
  Tensor out(av.rows, end - begin);
  for (int i = 0; i < av.rows; ++i)
    for (int j = begin; j < end; ++j) out(i, j - begin) = av(i, j);
  const int ia = a.id();
  return g.record(std::move(out), a.requires_grad(), [ia, begin](Graph& gr, int self) {
    const Tensor& go = gr.grad(self);
    Tensor& ga = gr.grad(ia);
    for (int i = 0; i < go.rows; ++i)
      for (int j = 0; j < go.cols; ++j) ga(i, begin + j) += go(i, j);
  });
}

Var gather_rows(Var a, std::span<const int> index) {
  Graph& g = graph_of(a);
  const Tensor& av = a.value();
  Tensor out(static_cast<int>(index.size()), av.cols);
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0 || index[i] >= av.rows) throw SizeError("gather_rows: index out of range");
    std::copy_n(av.row(index[i]).begin(), av.cols, out.row(static_cast<int>(i)).begin());
  }
  const int ia = a.id();
  std::vector<int> idx(index.begin(), index.end());
  return g.record(std::move(out), a.requires_grad(), [ia, idx = std::move(idx)](Graph& gr, int self) {
    const Tensor& go = gr.grad(self);
    Tensor& ga = gr.grad(ia);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      auto src = go.row(static_cast<int>(i));
      auto dst = ga.row(idx[i]);
      for (std::size_t j = 0; j < src.size(); ++j) dst[j] += src[j];
    }
  });
}

Var scatter_rows(Var a, std::span<const int> dest, int out_rows) {
  Graph& g = graph_of(a);
  const Tensor& av = a.value();
  if (static_cast<int>(dest.size()) != av.rows) throw ShapeError("scatter_rows: dest size mismatch");
  Tensor out(out_rows, av.cols);
  for (int i = 0; i < av.rows; ++i) {
    if (dest[i] < 0 || dest[i] >= out_rows) throw SizeError("scatter_rows: index out of range");
    auto dst = out.row(dest[i]);
    auto src = av.row(i);
    for (int j = 0; j < av.cols; ++j) dst[j] += src[j];
  }
  const int ia = a.id();
  std::vector<int> d(dest.begin(), dest.end());
  return g.record(std::move(out), a.requires_grad(), [ia, d = std::move(d)](Graph& gr, int self) {
    const Tensor& go = gr.grad(self);
    Tensor& ga = gr.grad(ia);
    for (std::size_t i = 0; i < d.size(); ++i) {
      auto src = go.row(d[i]);
      auto dst = ga.row(static_cast<int>(i));
      for (std::size_t j = 0; j < src.size(); ++j) dst[j] += src[j];
    }
  });
}

Var weighted_gather(Var a, std::span<const int> index, std::span<const double> weights, int k) {
  Graph& g = graph_of(a);
  const Tensor& av = a.value();
  if (k <= 0 || index.size() != weights.size() || index.size() % static_cast<std::size_t>(k) != 0) {
    throw ShapeError("weighted_gather: inconsistent index/weight sizes");
  }
  const int n = static_cast<int>(index.size() / static_cast<std::size_t>(k));
  Tensor out(n, av.cols);
  for (int i = 0; i < n; ++i) {
    auto dst = out.row(i);
    for (int j = 0; j < k; ++j) {
      const std::size_t s = static_cast<std::size_t>(i) * k + j;
      if (index[s] < 0 || index[s] >= av.rows) throw SizeError("weighted_gather: index out of range");
      auto src = av.row(index[s]);
      for (int c = 0; c < av.cols; ++c) dst[c] += weights[s] * src[c];
    }
  }
  const int ia = a.id();
  std::vector<int> idx(index.begin(), index.end());
  std::vector<double> w(weights.begin(), weights.end());
  return g.record(std::move(out), a.requires_grad(),
                  [ia, idx = std::move(idx), w = std::move(w)](Graph& gr, int self) {
                    const Tensor& go = gr.grad(self);
                    Tensor& ga = gr.grad(ia);
                    const int kk = static_cast<int>(idx.size()) / go.rows;
                    for (int i = 0; i < go.rows; ++i) {
                      auto src = go.row(i);
                      for (int j = 0; j < kk; ++j) {
                        const std::size_t s = static_cast<std::size_t>(i) * kk + j;
                        auto dst = ga.row(idx[s]);
                        for (std::size_t c = 0; c < src.size(); ++c) dst[c] += w[s] * src[c];
                      }
                    }
                  });
}

namespace {

void check_offsets(std::span<const int> offsets, int rows, const char* op) {
  if (offsets.empty() || offsets.front() != 0 || offsets.back() != rows) {
    throw ShapeError(std::string(op) + ": offsets do not cover the input rows");
  }
  for (std::size_t i = 1; i < offsets.size(); ++i) {
    if (offsets[i] < offsets[i - 1]) throw ShapeError(std::string(op) + ": offsets not sorted");
  }
}

}  // namespace

Var group_max(Var a, std::span<const int> offsets) {
  Graph& g = graph_of(a);
  const Tensor& av = a.value();
  check_offsets(offsets, av.rows, "group_max");
  const int groups = static_cast<int>(offsets.size()) - 1;
  Tensor out(groups, av.cols);
  std::vector<int> argmax(static_cast<std::size_t>(groups) * av.cols, -1);
  for (int gi = 0; gi < groups; ++gi) {
    for (int r = offsets[gi]; r < offsets[gi + 1]; ++r) {
      for (int c = 0; c < av.cols; ++c) {
        int& am = argmax[static_cast<std::size_t>(gi) * av.cols + c];
        if (am < 0 || av(r, c) > av(am, c)) am = r;
      }
    }
    for (int c = 0; c < av.cols; ++c) {
      const int am = argmax[static_cast<std::size_t>(gi) * av.cols + c];
      out(gi, c) = am < 0 ? 0.0 : av(am, c);
    }
  }
  const int ia = a.id();
  return g.record(std::move(out), a.requires_grad(),
                  [ia, argmax = std::move(argmax)](Graph& gr, int self) {
                    const Tensor& go = gr.grad(self);
                    Tensor& ga = gr.grad(ia);
                    for (int gi = 0; gi < go.rows; ++gi)
                      for (int c = 0; c < go.cols; ++c) {
                        const int am = argmax[static_cast<std::size_t>(gi) * go.cols + c];
                        if (am >= 0) ga(am, c) += go(gi, c);
                      }
                  });
}

Var group_mean(Var a, std::span<const int> offsets) {
  Graph& g = graph_of(a);
  const Tensor& av = a.value();
  check_offsets(offsets, av.rows, "group_mean");
  const int groups = static_cast<int>(offsets.size()) - 1;
  Tensor out(groups, av.cols);
  for (int gi = 0; gi < groups; ++gi) {
    const int cnt = offsets[gi + 1] - offsets[gi];
    if (cnt == 0) continue;
    for (int r = offsets[gi]; r < offsets[gi + 1]; ++r)
      for (int c = 0; c < av.cols; ++c) out(gi, c) += av(r, c);
    for (int c = 0; c < av.cols; ++c) out(gi, c) /= cnt;
  }
  const int ia = a.id();
  std::vector<int> off(offsets.begin(), offsets.end());
  return g.record(std::move(out), a.requires_grad(), [ia, off = std::move(off)](Graph& gr, int self) {
    const Tensor& go = gr.grad(self);
    Tensor& ga = gr.grad(ia);
    for (int gi = 0; gi + 1 < static_cast<int>(off.size()); ++gi) {
      const int cnt = off[gi + 1] - off[gi];
      for (int r = off[gi]; r < off[gi + 1]; ++r)
        for (int c = 0; c < go.cols; ++c) ga(r, c) += go(gi, c) / cnt;
    }
  });
}

Var grouped_attention(Var q, Var k, Var v, std::span<const int> offsets) {
  Graph& g = graph_of(q);
  const Tensor& qv = q.value();
  const Tensor& kv = k.value();
  const Tensor& vv = v.value();
  if (qv.cols != kv.cols) throw ShapeError("grouped_attention: query/key width mismatch");
  if (kv.rows != vv.rows) throw ShapeError("grouped_attention: key/value count mismatch");
  check_offsets(offsets, kv.rows, "grouped_attention");
  if (static_cast<int>(offsets.size()) - 1 != qv.rows) {
    throw ShapeError("grouped_attention: one query per group required");
  }
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(qv.cols));
  const int groups = qv.rows;
  Tensor out(groups, vv.cols);
  std::vector<double> prob(static_cast<std::size_t>(kv.rows));
  for (int gi = 0; gi < groups; ++gi) {
    const int b = offsets[gi], e = offsets[gi + 1];
    if (b == e) continue;
    double mx = -std::numeric_limits<double>::infinity();
    for (int s = b; s < e; ++s) {
      double dot = 0.0;
      for (int c = 0; c < qv.cols; ++c) dot += qv(gi, c) * kv(s, c);
      prob[s] = dot * inv_sqrt_d;
      mx = std::max(mx, prob[s]);
    }
    double z = 0.0;
    for (int s = b; s < e; ++s) {
      prob[s] = std::exp(prob[s] - mx);
      z += prob[s];
    }
    for (int s = b; s < e; ++s) {
      prob[s] /= z;
      for (int c = 0; c < vv.cols; ++c) out(gi, c) += prob[s] * vv(s, c);
    }
  }
  const bool rg = q.requires_grad() || k.requires_grad() || v.requires_grad();
  const int iq = q.id(), ik = k.id(), iv = v.id();
  std::vector<int> off(offsets.begin(), offsets.end());
  return g.record(
      std::move(out), rg,
      [iq, ik, iv, off = std::move(off), prob = std::move(prob), inv_sqrt_d](Graph& gr, int self) {
        const Tensor& go = gr.grad(self);
        const Tensor& qv = gr.value(iq);
        const Tensor& kv = gr.value(ik);
        const Tensor& vv = gr.value(iv);
        const bool gq = gr.requires_grad(iq), gk = gr.requires_grad(ik), gv = gr.requires_grad(iv);
        Tensor* gqt = gq ? &gr.grad(iq) : nullptr;
        Tensor* gkt = gk ? &gr.grad(ik) : nullptr;
        Tensor* gvt = gv ? &gr.grad(iv) : nullptr;
        std::vector<double> dscore;
        for (int gi = 0; gi + 1 < static_cast<int>(off.size()); ++gi) {
          const int b = off[gi], e = off[gi + 1];
          if (b == e) continue;
          dscore.assign(static_cast<std::size_t>(e - b), 0.0);
          double pdp = 0.0;
          for (int s = b; s < e; ++s) {
            double dp = 0.0;
            for (int c = 0; c < vv.cols; ++c) dp += go(gi, c) * vv(s, c);
            dscore[s - b] = dp;
            pdp += prob[s] * dp;
            if (gvt) {
              for (int c = 0; c < vv.cols; ++c) (*gvt)(s, c) += prob[s] * go(gi, c);
            }
          }
          for (int s = b; s < e; ++s) {
            const double da = prob[s] * (dscore[s - b] - pdp) * inv_sqrt_d;
            if (gqt) {
              for (int c = 0; c < qv.cols; ++c) (*gqt)(gi, c) += da * kv(s, c);
            }
            if (gkt) {
              for (int c = 0; c < qv.cols; ++c) (*gkt)(s, c) += da * qv(gi, c);
            }
          }
        }
      });
}

Var im2col(Var field, int height, int width, int kernel) {
  Graph& g = graph_of(field);
  const Tensor& fv = field.value();
  if (fv.rows != height * width) throw ShapeError("im2col: row count is not H*W");
  if (kernel % 2 == 0) throw ShapeError("im2col: kernel size must be odd");
  const int c = fv.cols;
  const int pad = kernel / 2;
  Tensor out(height * width, kernel * kernel * c);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      auto dst = out.row(y * width + x);
      for (int dy = 0; dy < kernel; ++dy)
        for (int dx = 0; dx < kernel; ++dx) {
          const int sy = y + dy - pad, sx = x + dx - pad;
          if (sy < 0 || sy >= height || sx < 0 || sx >= width) continue;
          auto src = fv.row(sy * width + sx);
          std::copy(src.begin(), src.end(), dst.begin() + (dy * kernel + dx) * c);
        }
    }
  const int ia = field.id();
  return g.record(std::move(out), field.requires_grad(),
                  [ia, height, width, kernel, c, pad](Graph& gr, int self) {
                    const Tensor& go = gr.grad(self);
                    Tensor& ga = gr.grad(ia);
                    for (int y = 0; y < height; ++y)
                      for (int x = 0; x < width; ++x) {
                        auto src = go.row(y * width + x);
                        for (int dy = 0; dy < kernel; ++dy)
                          for (int dx = 0; dx < kernel; ++dx) {
                            const int sy = y + dy - pad, sx = x + dx - pad;
                            if (sy < 0 || sy >= height || sx < 0 || sx >= width) continue;
                            auto dst = ga.row(sy * width + sx);
                            for (int ch = 0; ch < c; ++ch) dst[ch] += src[(dy * kernel + dx) * c + ch];
                          }
                      }
                  });
}

Var adaptive_avg_pool(Var field, int in_h, int in_w, int out_h, int out_w) {
  Graph& g = graph_of(field);
  const Tensor& fv = field.value();
  if (fv.rows != in_h * in_w) throw ShapeError("adaptive_avg_pool: row count is not H*W");
  struct Bin {
    int y0, y1, x0, x1;
  };
  std::vector<Bin> bins;
  bins.reserve(static_cast<std::size_t>(out_h) * out_w);
  for (int i = 0; i < out_h; ++i)
    for (int j = 0; j < out_w; ++j) {
      const int y0 = (i * in_h) / out_h;
      const int y1 = ((i + 1) * in_h + out_h - 1) / out_h;
      const int x0 = (j * in_w) / out_w;
      const int x1 = ((j + 1) * in_w + out_w - 1) / out_w;
      bins.push_back({y0, y1, x0, x1});
    }
  Tensor out(out_h * out_w, fv.cols);
  for (std::size_t b = 0; b < bins.size(); ++b) {
    const Bin& bn = bins[b];
    const double inv = 1.0 / ((bn.y1 - bn.y0) * (bn.x1 - bn.x0));
    auto dst = out.row(static_cast<int>(b));
    for (int y = bn.y0; y < bn.y1; ++y)
      for (int x = bn.x0; x < bn.x1; ++x) {
        auto src = fv.row(y * in_w + x);
        for (int c = 0; c < fv.cols; ++c) dst[c] += inv * src[c];
      }
  }
  const int ia = field.id();
  return g.record(std::move(out), field.requires_grad(),
                  [ia, bins = std::move(bins), in_w](Graph& gr, int self) {
                    const Tensor& go = gr.grad(self);
                    Tensor& ga = gr.grad(ia);
                    for (std::size_t b = 0; b < bins.size(); ++b) {
                      const Bin& bn = bins[b];
                      const double inv = 1.0 / ((bn.y1 - bn.y0) * (bn.x1 - bn.x0));
                      auto src = go.row(static_cast<int>(b));
                      for (int y = bn.y0; y < bn.y1; ++y)
                        for (int x = bn.x0; x < bn.x1; ++x) {
                          auto dst = ga.row(y * in_w + x);
                          for (std::size_t c = 0; c < src.size(); ++c) dst[c] += inv * src[c];
                        }
                    }
                  });
}

Var polar_rotation(Var a) {
  Graph& g = graph_of(a);
  const Tensor& av = a.value();
  if (av.rows != 3 || av.cols != 3) throw ShapeError("polar_rotation: expects 3x3");
  Eigen::Matrix3d m;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) m(i, j) = av(i, j);
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Eigen::Vector3d sv = svd.singularValues();
  if (!(sv(1) > 1e-12 * std::max(sv(0), 1e-300))) {
    throw DegenerateGeometryError("polar_rotation: rank-deficient input (collinear correspondences)");
  }
  const Eigen::Matrix3d u = svd.matrixU();
  const Eigen::Matrix3d v = svd.matrixV();
  const double d = (u * v.transpose()).determinant() < 0.0 ? -1.0 : 1.0;
  const Eigen::Matrix3d r = u * Eigen::Vector3d(1.0, 1.0, d).asDiagonal() * v.transpose();
  Tensor out(3, 3);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) out(i, j) = r(i, j);
  const Eigen::Vector3d lambda(sv(0), sv(1), d * sv(2));
  const int ia = a.id();
  return g.record(std::move(out), a.requires_grad(), [ia, r, v, lambda](Graph& gr, int self) {
    // A = R S with S = V diag(lambda) V^T; dR = R Omega with Omega skew.
    const Tensor& go = gr.grad(self);
    Eigen::Matrix3d grad_r;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) grad_r(i, j) = go(i, j);
    const Eigen::Matrix3d mprime = v.transpose() * (r.transpose() * grad_r) * v;
    Eigen::Matrix3d yprime = Eigen::Matrix3d::Zero();
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        if (i == j) continue;
        const double den = lambda(i) + lambda(j);
        if (std::fabs(den) > 1e-300) yprime(i, j) = mprime(i, j) / den;
      }
    const Eigen::Matrix3d y = v * yprime * v.transpose();
    const Eigen::Matrix3d grad_a = r * (y - y.transpose());
    Tensor& ga = gr.grad(ia);
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) ga(i, j) += grad_a(i, j);
  });
}

}  // namespace tars::ad
