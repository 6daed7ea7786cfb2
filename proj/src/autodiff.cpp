#include "moex/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

namespace moex {

template <typename T>
Var<T> Tape<T>::leaf(Tensor<T> value, bool requires_grad) {
  if (check_finite_ && !value.all_finite()) throw NumericError("non-finite value in tape leaf");
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var<T>{this, static_cast<int>(nodes_.size() - 1)};
}

template <typename T>
Var<T> Tape<T>::record(Tensor<T> out, std::initializer_list<Var<T>> inputs, BackwardFn fn) {
  return record(std::move(out), std::span<const Var<T>>(inputs.begin(), inputs.size()), std::move(fn));
}

template <typename T>
Var<T> Tape<T>::record(Tensor<T> out, std::span<const Var<T>> inputs, BackwardFn fn) {
  bool needs = false;
  for (const auto& in : inputs) {
    if (in.tape != this) throw Error("op input belongs to a different tape");
    needs = needs || nodes_.at(static_cast<std::size_t>(in.id)).requires_grad;
  }
  needs = needs && grad_enabled_;
  if (check_finite_ && !out.all_finite())
    throw NumericError("non-finite value produced by tape node " + std::to_string(nodes_.size()));
  Node n;
  n.value = std::move(out);
  n.requires_grad = needs;
  if (needs) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return Var<T>{this, static_cast<int>(nodes_.size() - 1)};
}

template <typename T>
Tensor<T>& Tape<T>::grad_buffer(int id) {
  Node& n = nodes_.at(static_cast<std::size_t>(id));
  if (n.grad.empty()) n.grad = Tensor<T>(n.value.shape(), T{0});
  return n.grad;
}

template <typename T>
Tensor<T> Tape<T>::grad(Var<T> v) const {
  const Node& n = nodes_.at(static_cast<std::size_t>(v.id));
  if (n.grad.empty()) return Tensor<T>(n.value.shape(), T{0});
  return n.grad;
}

template <typename T>
void Tape<T>::zero_grad() {
  for (auto& n : nodes_) n.grad = Tensor<T>();
}

template <typename T>
void Tape<T>::backward(Var<T> seed) {
  if (seed.tape != this || seed.id < 0 || static_cast<std::size_t>(seed.id) >= nodes_.size())
    throw Error("backward: seed is not on this tape");
  if (nodes_[static_cast<std::size_t>(seed.id)].value.size() != 1)
    throw DimensionError("backward: seed must be a scalar, got " +
                         shape_str(nodes_[static_cast<std::size_t>(seed.id)].value.shape()));
  grad_buffer(seed.id)[0] += T{1};
  for (int i = seed.id; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (n.backward && !n.grad.empty()) n.backward(*this, i);
  }
}

namespace {

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

template <typename T>
void accumulate(Tensor<T>& dst, const Tensor<T>& src) {
  T* d = dst.data();
  const T* s = src.data();
  for (std::size_t i = 0; i < dst.size(); ++i) d[i] += s[i];
}

// Elementwise unary op with derivative expressed via (input, output).
template <typename T, typename F, typename DF>
Var<T> unary(Var<T> a, F f, DF df) {
  Tensor<T> out = a.value();
  for (auto& v : out.storage()) v = f(v);
  const int ai = a.id;
  return a.tape->record(std::move(out), {a}, [ai, df](Tape<T>& t, int self) {
    if (!t.requires_grad(ai)) return;
    const auto& g = t.grad_buffer(self);
    const auto& x = t.value(ai);
    const auto& y = t.value(self);
    auto& ga = t.grad_buffer(ai);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * df(x[i], y[i]);
  });
}

}  // namespace

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor<T> out = a.value();
  accumulate(out, b.value());
  const int ai = a.id, bi = b.id;
  return a.tape->record(std::move(out), {a, b}, [ai, bi](Tape<T>& t, int self) {
    const auto& g = t.grad_buffer(self);
    if (t.requires_grad(ai)) accumulate(t.grad_buffer(ai), g);
    if (t.requires_grad(bi)) accumulate(t.grad_buffer(bi), g);
  });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  require_same_shape(a.value(), b.value(), "sub");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  const int ai = a.id, bi = b.id;
  return a.tape->record(std::move(out), {a, b}, [ai, bi](Tape<T>& t, int self) {
    const auto& g = t.grad_buffer(self);
    if (t.requires_grad(ai)) accumulate(t.grad_buffer(ai), g);
    if (t.requires_grad(bi)) {
      auto& gb = t.grad_buffer(bi);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= g[i];
    }
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  require_same_shape(a.value(), b.value(), "mul");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  const int ai = a.id, bi = b.id;
  return a.tape->record(std::move(out), {a, b}, [ai, bi](Tape<T>& t, int self) {
    const auto& g = t.grad_buffer(self);
    if (t.requires_grad(ai)) {
      auto& ga = t.grad_buffer(ai);
      const auto& bv = t.value(bi);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.requires_grad(bi)) {
      auto& gb = t.grad_buffer(bi);
      const auto& av = t.value(ai);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

template <typename T>
Var<T> div(Var<T> a, Var<T> b) {
  require_same_shape(a.value(), b.value(), "div");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] /= b.value()[i];
  const int ai = a.id, bi = b.id;
  return a.tape->record(std::move(out), {a, b}, [ai, bi](Tape<T>& t, int self) {
    const auto& g = t.grad_buffer(self);
    const auto& bv = t.value(bi);
    if (t.requires_grad(ai)) {
      auto& ga = t.grad_buffer(ai);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] / bv[i];
    }
    if (t.requires_grad(bi)) {
      auto& gb = t.grad_buffer(bi);
      const auto& y = t.value(self);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= g[i] * y[i] / bv[i];
    }
  });
}

template <typename T>
Var<T> scale(Var<T> a, T s) {
  return unary(a, [s](T x) { return s * x; }, [s](T, T) { return s; });
}

template <typename T>
Var<T> square(Var<T> a) {
  return unary(a, [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

template <typename T>
Var<T> sqrt_floor(Var<T> a, T floor) {
  return unary(
      a, [floor](T x) { return std::sqrt(std::max(x, floor)); },
      [floor](T x, T y) { return x > floor ? T(0.5) / y : T(0); });
}

template <typename T>
Var<T> clamp_min(Var<T> a, T floor) {
  return unary(
      a, [floor](T x) { return std::max(x, floor); }, [floor](T x, T) { return x > floor ? T(1) : T(0); });
}

template <typename T>
Var<T> relu(Var<T> a) {
  return unary(a, [](T x) { return x > T(0) ? x : T(0); }, [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
Var<T> gelu(Var<T> a) {
  return unary(a, [](T x) { return gelu_scalar(x); }, [](T x, T) { return gelu_grad_scalar(x); });
}

template <typename T>
Var<T> activation(Var<T> a, Activation kind) {
  return kind == Activation::kRelu ? relu(a) : gelu(a);
}

template <typename T>
Var<T> erf(Var<T> a) {
  return unary(
      a, [](T x) { return std::erf(x); },
      [](T x, T) { return T(2) / std::sqrt(std::numbers::pi_v<T>) * std::exp(-x * x); });
}

template <typename T>
Var<T> add_bias(Var<T> a, Var<T> bias) {
  const std::size_t c = a.value().cols();
  if (bias.value().size() != c)
    throw DimensionError("add_bias: bias " + shape_str(bias.shape()) + " vs rows of width " + std::to_string(c));
  Tensor<T> out = a.value();
  const auto& bv = bias.value();
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t j = 0; j < c; ++j) out.at(r, j) += bv[j];
  const int ai = a.id, bi = bias.id;
  return a.tape->record(std::move(out), {a, bias}, [ai, bi](Tape<T>& t, int self) {
    const auto& g = t.grad_buffer(self);
    if (t.requires_grad(ai)) accumulate(t.grad_buffer(ai), g);
    if (t.requires_grad(bi)) {
      auto& gb = t.grad_buffer(bi);
      const std::size_t cols = g.cols();
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t j = 0; j < cols; ++j) gb[j] += g.at(r, j);
    }
  });
}

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  Tensor<T> out = matmul(a.value(), b.value());
  const int ai = a.id, bi = b.id;
  return a.tape->record(std::move(out), {a, b}, [ai, bi](Tape<T>& t, int self) {
    const auto& g = t.grad_buffer(self);
    if (t.requires_grad(ai)) accumulate(t.grad_buffer(ai), matmul_nt(g, t.value(bi)));
    if (t.requires_grad(bi)) accumulate(t.grad_buffer(bi), matmul_tn(t.value(ai), g));
  });
}

template <typename T>
Var<T> linear(Var<T> x, Var<T> w) {
  Tensor<T> out = matmul_nt(x.value(), w.value());
  const int xi = x.id, wi = w.id;
  return x.tape->record(std::move(out), {x, w}, [xi, wi](Tape<T>& t, int self) {
    const auto& g = t.grad_buffer(self);
    if (t.requires_grad(xi)) accumulate(t.grad_buffer(xi), matmul(g, t.value(wi)));
    if (t.requires_grad(wi)) accumulate(t.grad_buffer(wi), matmul_tn(g, t.value(xi)));
  });
}

template <typename T>
Var<T> softmax_rows(Var<T> a) {
  Tensor<T> out = softmax(a.value());
  const int ai = a.id;
  return a.tape->record(std::move(out), {a}, [ai](Tape<T>& t, int self) {
    if (!t.requires_grad(ai)) return;
    const auto& g = t.grad_buffer(self);
    const auto& y = t.value(self);
    auto& ga = t.grad_buffer(ai);
    for (std::size_t r = 0; r < y.rows(); ++r) {
      auto yr = y.row(r);
      auto gr = g.row(r);
      T dot = 0;
      for (std::size_t j = 0; j < yr.size(); ++j) dot += gr[j] * yr[j];
      auto gar = ga.row(r);
      for (std::size_t j = 0; j < yr.size(); ++j) gar[j] += yr[j] * (gr[j] - dot);
    }
  });
}

template <typename T>
Var<T> layer_norm_rows(Var<T> x, Var<T> gain, Var<T> bias) {
  const auto& xv = x.value();
  const std::size_t d = xv.cols(), rows = xv.rows();
  if (gain.value().size() != d || bias.value().size() != d)
    throw DimensionError("layer_norm: gain/bias do not match width " + std::to_string(d));
  Tensor<T> xhat(xv.shape());
  std::vector<T> inv(rows);
  Tensor<T> out(xv.shape());
  const auto& gv = gain.value();
  const auto& bv = bias.value();
  for (std::size_t r = 0; r < rows; ++r) {
    auto row = xv.row(r);
    T m = 0;
    for (T v : row) m += v;
    m /= T(d);
    T var = 0;
    for (T v : row) var += (v - m) * (v - m);
    var /= T(d);
    inv[r] = T(1) / std::sqrt(var + T(kLayerNormEps));
    for (std::size_t j = 0; j < d; ++j) {
      xhat.at(r, j) = (row[j] - m) * inv[r];
      out.at(r, j) = xhat.at(r, j) * gv[j] + bv[j];
    }
  }
  const int xi = x.id, gi = gain.id, bi = bias.id;
  return x.tape->record(std::move(out), {x, gain, bias},
                        [xi, gi, bi, xhat = std::move(xhat), inv = std::move(inv)](Tape<T>& t, int self) {
                          const auto& g = t.grad_buffer(self);
                          const std::size_t d = g.cols();
                          if (t.requires_grad(gi)) {
                            auto& gg = t.grad_buffer(gi);
                            for (std::size_t r = 0; r < g.rows(); ++r)
                              for (std::size_t j = 0; j < d; ++j) gg[j] += g.at(r, j) * xhat.at(r, j);
                          }
                          if (t.requires_grad(bi)) {
                            auto& gb = t.grad_buffer(bi);
                            for (std::size_t r = 0; r < g.rows(); ++r)
                              for (std::size_t j = 0; j < d; ++j) gb[j] += g.at(r, j);
                          }
                          if (!t.requires_grad(xi)) return;
                          const auto& gv = t.value(gi);
                          auto& gx = t.grad_buffer(xi);
                          std::vector<T> dxhat(d);
                          for (std::size_t r = 0; r < g.rows(); ++r) {
                            T s1 = 0, s2 = 0;
                            for (std::size_t j = 0; j < d; ++j) {
                              dxhat[j] = g.at(r, j) * gv[j];
                              s1 += dxhat[j];
                              s2 += dxhat[j] * xhat.at(r, j);
                            }
                            for (std::size_t j = 0; j < d; ++j)
                              gx.at(r, j) += inv[r] / T(d) * (T(d) * dxhat[j] - s1 - xhat.at(r, j) * s2);
                          }
                        });
}

template <typename T>
Var<T> cross_entropy(Var<T> logits, std::span<const int> targets) {
  const T loss = cross_entropy(logits.value(), targets);
  std::vector<int> tg(targets.begin(), targets.end());
  const int li = logits.id;
  return logits.tape->record(Tensor<T>({1}, std::vector<T>{loss}), {logits},
                             [li, tg = std::move(tg)](Tape<T>& t, int self) {
                               if (!t.requires_grad(li)) return;
                               const T g = t.grad_buffer(self)[0];
                               Tensor<T> p = softmax(t.value(li));
                               const T s = g / T(p.rows());
                               auto& gl = t.grad_buffer(li);
                               for (std::size_t r = 0; r < p.rows(); ++r) {
                                 auto pr = p.row(r);
                                 auto gr = gl.row(r);
                                 for (std::size_t j = 0; j < pr.size(); ++j)
                                   gr[j] += s * (pr[j] - (static_cast<int>(j) == tg[r] ? T(1) : T(0)));
                               }
                             });
}

template <typename T>
Var<T> sum(Var<T> a) {
  T s = 0;
  for (T v : a.value().storage()) s += v;
  const int ai = a.id;
  return a.tape->record(Tensor<T>({1}, std::vector<T>{s}), {a}, [ai](Tape<T>& t, int self) {
    if (!t.requires_grad(ai)) return;
    const T g = t.grad_buffer(self)[0];
    for (auto& v : t.grad_buffer(ai).storage()) v += g;
  });
}

template <typename T>
Var<T> mean(Var<T> a) {
  return scale(sum(a), T(1) / T(a.value().size()));
}

template <typename T>
Var<T> mean_rows(Var<T> a) {
  const auto& av = a.value();
  const std::size_t r = av.rows(), c = av.cols();
  Tensor<T> out({1, c});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j] += av.at(i, j);
  for (auto& v : out.storage()) v /= T(r);
  const int ai = a.id;
  return a.tape->record(std::move(out), {a}, [ai](Tape<T>& t, int self) {
    if (!t.requires_grad(ai)) return;
    const auto& g = t.grad_buffer(self);
    auto& ga = t.grad_buffer(ai);
    const std::size_t rows = ga.rows(), cols = ga.cols();
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j) ga.at(i, j) += g[j] / T(rows);
  });
}

template <typename T>
Var<T> var_rows(Var<T> a) {
  const auto& av = a.value();
  const std::size_t r = av.rows(), c = av.cols();
  std::vector<T> mu(c, T{0});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) mu[j] += av.at(i, j);
  for (auto& v : mu) v /= T(r);
  Tensor<T> out({1, c});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      const T dev = av.at(i, j) - mu[j];
      out[j] += dev * dev;
    }
  for (auto& v : out.storage()) v /= T(r);
  const int ai = a.id;
  return a.tape->record(std::move(out), {a}, [ai, mu = std::move(mu)](Tape<T>& t, int self) {
    if (!t.requires_grad(ai)) return;
    const auto& g = t.grad_buffer(self);
    const auto& x = t.value(ai);
    auto& ga = t.grad_buffer(ai);
    const std::size_t rows = ga.rows(), cols = ga.cols();
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j) ga.at(i, j) += g[j] * T(2) * (x.at(i, j) - mu[j]) / T(rows);
  });
}

template <typename T>
Var<T> concat_rows(std::span<const Var<T>> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t c = parts[0].value().cols();
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p.value().cols() != c) throw DimensionError("concat_rows: column count mismatch");
    rows += p.value().rows();
  }
  Tensor<T> out({rows, c});
  std::vector<int> ids;
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.value().storage().begin(), p.value().storage().end(), out.data() + off);
    off += p.value().size();
    ids.push_back(p.id);
  }
  return parts[0].tape->record(std::move(out), parts, [ids = std::move(ids)](Tape<T>& t, int self) {
    const auto& g = t.grad_buffer(self);
    std::size_t off = 0;
    for (int id : ids) {
      const std::size_t n = t.value(id).size();
      if (t.requires_grad(id)) {
        auto& gp = t.grad_buffer(id);
        for (std::size_t i = 0; i < n; ++i) gp[i] += g[off + i];
      }
      off += n;
    }
  });
}

template <typename T>
Var<T> detach(Var<T> a) {
  return a.tape->leaf(a.value(), false);
}

template <typename T>
Var<T> gather_rows(Var<T> table, std::span<const std::uint32_t> rows) {
  const auto& tv = table.value();
  const std::size_t c = tv.cols();
  if (rows.empty()) throw DimensionError("gather_rows: empty row list");
  Tensor<T> out({rows.size(), c});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= tv.rows())
      throw DimensionError("gather_rows: row " + std::to_string(rows[i]) + " outside table of " +
                           std::to_string(tv.rows()) + " rows");
    std::copy_n(tv.data() + rows[i] * c, c, out.data() + i * c);
  }
  std::vector<std::uint32_t> idx(rows.begin(), rows.end());
  const int ti = table.id;
  return table.tape->record(std::move(out), {table}, [ti, idx = std::move(idx)](Tape<T>& t, int self) {
    if (!t.requires_grad(ti)) return;
    const auto& g = t.grad_buffer(self);
    auto& gt = t.grad_buffer(ti);
    const std::size_t c = g.cols();
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < c; ++j) gt[idx[i] * c + j] += g[i * c + j];
  });
}

template <typename T>
Var<T> scatter_add_rows(Var<T> base, Var<T> src, std::span<const std::uint32_t> rows) {
  const std::size_t c = base.value().cols();
  if (src.value().cols() != c || src.value().rows() != rows.size())
    throw DimensionError("scatter_add_rows: src " + shape_str(src.shape()) + " vs base " + shape_str(base.shape()));
  Tensor<T> out = base.value();
  const auto& sv = src.value();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= out.rows()) throw DimensionError("scatter_add_rows: row out of range");
    for (std::size_t j = 0; j < c; ++j) out[rows[i] * c + j] += sv[i * c + j];
  }
  std::vector<std::uint32_t> idx(rows.begin(), rows.end());
  const int bi = base.id, si = src.id;
  return base.tape->record(std::move(out), {base, src}, [bi, si, idx = std::move(idx)](Tape<T>& t, int self) {
    const auto& g = t.grad_buffer(self);
    if (t.requires_grad(bi)) accumulate(t.grad_buffer(bi), g);
    if (t.requires_grad(si)) {
      auto& gs = t.grad_buffer(si);
      const std::size_t c = g.cols();
      for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t j = 0; j < c; ++j) gs[i * c + j] += g[idx[i] * c + j];
    }
  });
}

template <typename T>
Var<T> gather_column(Var<T> a, std::span<const std::uint32_t> rows, std::size_t col) {
  const auto& av = a.value();
  if (col >= av.cols()) throw DimensionError("gather_column: column out of range");
  Tensor<T> out({rows.size(), 1});
  for (std::size_t i = 0; i < rows.size(); ++i) out[i] = av.at(rows[i], col);
  std::vector<std::uint32_t> idx(rows.begin(), rows.end());
  const int ai = a.id;
  return a.tape->record(std::move(out), {a}, [ai, col, idx = std::move(idx)](Tape<T>& t, int self) {
    if (!t.requires_grad(ai)) return;
    const auto& g = t.grad_buffer(self);
    auto& ga = t.grad_buffer(ai);
    for (std::size_t i = 0; i < idx.size(); ++i) ga.at(idx[i], col) += g[i];
  });
}

template <typename T>
Var<T> scale_rows(Var<T> a, Var<T> s) {
  const auto& av = a.value();
  if (s.value().size() != av.rows())
    throw DimensionError("scale_rows: " + shape_str(s.shape()) + " scales for " + shape_str(av.shape()));
  Tensor<T> out = av;
  const std::size_t c = av.cols();
  for (std::size_t i = 0; i < av.rows(); ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] *= s.value()[i];
  const int ai = a.id, si = s.id;
  return a.tape->record(std::move(out), {a, s}, [ai, si](Tape<T>& t, int self) {
    const auto& g = t.grad_buffer(self);
    const std::size_t c = g.cols();
    if (t.requires_grad(ai)) {
      auto& ga = t.grad_buffer(ai);
      const auto& sv = t.value(si);
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[i * c + j] * sv[i];
    }
    if (t.requires_grad(si)) {
      auto& gs = t.grad_buffer(si);
      const auto& av = t.value(ai);
      for (std::size_t i = 0; i < g.rows(); ++i) {
        T acc = 0;
        for (std::size_t j = 0; j < c; ++j) acc += g[i * c + j] * av[i * c + j];
        gs[i] += acc;
      }
    }
  });
}

template <typename T>
Var<T> topk_mask_rows(Var<T> a, std::size_t k) {
  const auto& av = a.value();
  const std::size_t c = av.cols();
  if (k < 1 || k > c) throw DimensionError("topk_mask_rows: k out of range");
  std::vector<std::uint8_t> keep(av.size(), 0);
  Tensor<T> out(av.shape(), T{0});
  for (std::size_t r = 0; r < av.rows(); ++r) {
    const auto top = topk_values<T>(av.row(r), k);
    for (std::size_t j : top.indices) {
      keep[r * c + j] = 1;
      out[r * c + j] = av[r * c + j];
    }
  }
  const int ai = a.id;
  return a.tape->record(std::move(out), {a}, [ai, keep = std::move(keep)](Tape<T>& t, int self) {
    if (!t.requires_grad(ai)) return;
    const auto& g = t.grad_buffer(self);
    auto& ga = t.grad_buffer(ai);
    for (std::size_t i = 0; i < ga.size(); ++i)
      if (keep[i]) ga[i] += g[i];
  });
}

template <typename T>
RowTopKSoftmax<T> topk_softmax_rows(Var<T> scores, std::size_t k) {
  const auto& sv = scores.value();
  const std::size_t n = sv.rows(), m = sv.cols();
  if (k < 1 || k > m) throw DimensionError("topk_softmax_rows: k=" + std::to_string(k) + " with " + std::to_string(m) + " columns");
  RowTopKSoftmax<T> res;
  res.k = k;
  res.selected.resize(n * k);
  Tensor<T> out({n, m}, T{0});
  for (std::size_t r = 0; r < n; ++r) {
    auto top = topk_values<T>(sv.row(r), k);
    softmax_inplace(std::span<T>(top.values));
    for (std::size_t i = 0; i < k; ++i) {
      res.selected[r * k + i] = static_cast<std::uint32_t>(top.indices[i]);
      out.at(r, top.indices[i]) = top.values[i];
    }
  }
  const int si = scores.id;
  res.weights = scores.tape->record(std::move(out), {scores}, [si, k, sel = res.selected](Tape<T>& t, int self) {
    if (!t.requires_grad(si)) return;
    const auto& g = t.grad_buffer(self);
    const auto& w = t.value(self);
    auto& gs = t.grad_buffer(si);
    for (std::size_t r = 0; r < w.rows(); ++r) {
      T dot = 0;
      for (std::size_t i = 0; i < k; ++i) {
        const std::size_t j = sel[r * k + i];
        dot += g.at(r, j) * w.at(r, j);
      }
      for (std::size_t i = 0; i < k; ++i) {
        const std::size_t j = sel[r * k + i];
        gs.at(r, j) += w.at(r, j) * (g.at(r, j) - dot);
      }
    }
  });
  return res;
}

template <typename T>
Var<T> causal_attention(Var<T> qkv, std::size_t batch, std::size_t seq, std::size_t n_head) {
  const auto& xv = qkv.value();
  if (xv.rank() != 2 || xv.dim(0) != batch * seq || xv.dim(1) % 3 != 0)
    throw DimensionError("causal_attention: qkv " + shape_str(xv.shape()) + " for batch " + std::to_string(batch) +
                         " x seq " + std::to_string(seq));
  const std::size_t d = xv.dim(1) / 3;
  if (n_head == 0 || d % n_head != 0) throw DimensionError("causal_attention: width not divisible by heads");
  const std::size_t hd = d / n_head;
  const T sc = T(1) / std::sqrt(T(hd));
  const std::size_t w3 = 3 * d;
  Tensor<T> out({batch * seq, d});
  // probs[(b*H + h)*T*T + i*T + j], lower triangle only.
  std::vector<T> probs(batch * n_head * seq * seq, T{0});
  std::vector<T> srow(seq);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < n_head; ++h) {
      T* P = probs.data() + (b * n_head + h) * seq * seq;
      for (std::size_t i = 0; i < seq; ++i) {
        const T* q = xv.data() + (b * seq + i) * w3 + h * hd;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j <= i; ++j) {
          const T* kk = xv.data() + (b * seq + j) * w3 + d + h * hd;
          T s = 0;
          for (std::size_t c = 0; c < hd; ++c) s += q[c] * kk[c];
          srow[j] = s * sc;
          mx = std::max(mx, srow[j]);
        }
        T z = 0;
        for (std::size_t j = 0; j <= i; ++j) {
          srow[j] = std::exp(srow[j] - mx);
          z += srow[j];
        }
        T* o = out.data() + (b * seq + i) * d + h * hd;
        for (std::size_t j = 0; j <= i; ++j) {
          const T p = srow[j] / z;
          P[i * seq + j] = p;
          const T* v = xv.data() + (b * seq + j) * w3 + 2 * d + h * hd;
          for (std::size_t c = 0; c < hd; ++c) o[c] += p * v[c];
        }
      }
    }
  }
  const int xi = qkv.id;
  return qkv.tape->record(
      std::move(out), {qkv}, [xi, batch, seq, n_head, d, hd, sc, probs = std::move(probs)](Tape<T>& t, int self) {
        if (!t.requires_grad(xi)) return;
        const auto& g = t.grad_buffer(self);
        const auto& xv = t.value(xi);
        auto& gx = t.grad_buffer(xi);
        const std::size_t w3 = 3 * d;
        std::vector<T> dp(seq);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t h = 0; h < n_head; ++h) {
            const T* P = probs.data() + (b * n_head + h) * seq * seq;
            for (std::size_t i = 0; i < seq; ++i) {
              const T* go = g.data() + (b * seq + i) * d + h * hd;
              T rowdot = 0;
              for (std::size_t j = 0; j <= i; ++j) {
                const std::size_t rj = (b * seq + j) * w3;
                const T* v = xv.data() + rj + 2 * d + h * hd;
                T* gv = gx.data() + rj + 2 * d + h * hd;
                const T p = P[i * seq + j];
                T acc = 0;
                for (std::size_t c = 0; c < hd; ++c) {
                  acc += go[c] * v[c];
                  gv[c] += p * go[c];
                }
                dp[j] = acc;
                rowdot += p * acc;
              }
              const std::size_t ri = (b * seq + i) * w3;
              const T* q = xv.data() + ri + h * hd;
              T* gq = gx.data() + ri + h * hd;
              for (std::size_t j = 0; j <= i; ++j) {
                const T ds = P[i * seq + j] * (dp[j] - rowdot) * sc;
                if (ds == T{0}) continue;
                const std::size_t rj = (b * seq + j) * w3;
                const T* kk = xv.data() + rj + d + h * hd;
                T* gk = gx.data() + rj + d + h * hd;
                for (std::size_t c = 0; c < hd; ++c) {
                  gq[c] += ds * kk[c];
                  gk[c] += ds * q[c];
                }
              }
            }
          }
        }
      });
}

#define MOEX_INSTANTIATE(T)                                                                          \
  template class Tape<T>;                                                                            \
  template Var<T> add<T>(Var<T>, Var<T>);                                                            \
  template Var<T> sub<T>(Var<T>, Var<T>);                                                            \
  template Var<T> mul<T>(Var<T>, Var<T>);                                                            \
  template Var<T> div<T>(Var<T>, Var<T>);                                                            \
  template Var<T> scale<T>(Var<T>, T);                                                               \
  template Var<T> square<T>(Var<T>);                                                                 \
  template Var<T> sqrt_floor<T>(Var<T>, T);                                                          \
  template Var<T> clamp_min<T>(Var<T>, T);                                                           \
  template Var<T> relu<T>(Var<T>);                                                                   \
  template Var<T> gelu<T>(Var<T>);                                                                   \
  template Var<T> activation<T>(Var<T>, Activation);                                                 \
  template Var<T> erf<T>(Var<T>);                                                                    \
  template Var<T> add_bias<T>(Var<T>, Var<T>);                                                       \
  template Var<T> matmul<T>(Var<T>, Var<T>);                                                         \
  template Var<T> linear<T>(Var<T>, Var<T>);                                                         \
  template Var<T> softmax_rows<T>(Var<T>);                                                           \
  template Var<T> layer_norm_rows<T>(Var<T>, Var<T>, Var<T>);                                        \
  template Var<T> cross_entropy<T>(Var<T>, std::span<const int>);                                    \
  template Var<T> sum<T>(Var<T>);                                                                    \
  template Var<T> mean<T>(Var<T>);                                                                   \
  template Var<T> mean_rows<T>(Var<T>);                                                              \
  template Var<T> var_rows<T>(Var<T>);                                                               \
  template Var<T> concat_rows<T>(std::span<const Var<T>>);                                           \
  template Var<T> detach<T>(Var<T>);                                                                 \
  template Var<T> gather_rows<T>(Var<T>, std::span<const std::uint32_t>);                            \
  template Var<T> scatter_add_rows<T>(Var<T>, Var<T>, std::span<const std::uint32_t>);               \
  template Var<T> gather_column<T>(Var<T>, std::span<const std::uint32_t>, std::size_t);             \
  template Var<T> scale_rows<T>(Var<T>, Var<T>);                                                     \
  template Var<T> topk_mask_rows<T>(Var<T>, std::size_t);                                            \
  template RowTopKSoftmax<T> topk_softmax_rows<T>(Var<T>, std::size_t);                              \
  template Var<T> causal_attention<T>(Var<T>, std::size_t, std::size_t, std::size_t);

MOEX_INSTANTIATE(float)
MOEX_INSTANTIATE(double)

#undef MOEX_INSTANTIATE

}  // namespace moex
