#include "moex/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

namespace moex {

Activation parse_activation(std::string_view name) {
  if (name == "relu") return Activation::kRelu;
  if (name == "gelu") return Activation::kGelu;
  throw ConfigError("unknown activation '" + std::string(name) + "' (expected relu or gelu)");
}

std::string_view activation_name(Activation a) { return a == Activation::kRelu ? "relu" : "gelu"; }

namespace {

constexpr std::size_t kBlockK = 128;
constexpr std::size_t kBlockN = 512;

void require_rank2(const Shape& s, const char* what) {
  if (s.size() != 2) throw DimensionError(std::string(what) + " expects a matrix, got " + shape_str(s));
}

}  // namespace

template <typename T>
void gemm_accumulate(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t j0 = 0; j0 < n; j0 += kBlockN) {
    const std::size_t j1 = std::min(n, j0 + kBlockN);
    for (std::size_t t0 = 0; t0 < k; t0 += kBlockK) {
      const std::size_t t1 = std::min(k, t0 + kBlockK);
      for (std::size_t i = 0; i < m; ++i) {
        T* __restrict crow = c + i * n;
        const T* arow = a + i * k;
        for (std::size_t t = t0; t < t1; ++t) {
          const T av = arow[t];
          if (av == T{0}) continue;
          const T* __restrict brow = b + t * n;
          for (std::size_t j = j0; j < j1; ++j) crow[j] += av * brow[j];
        }
      }
    }
  }
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  require_rank2(a.shape(), "transpose");
  const std::size_t r = a.dim(0), c = a.dim(1);
  Tensor<T> out({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a[i * c + j];
  return out;
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank2(a.shape(), "matmul");
  require_rank2(b.shape(), "matmul");
  if (a.dim(1) != b.dim(0))
    throw DimensionError("matmul inner dimensions disagree: " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  Tensor<T> out({a.dim(0), b.dim(1)});
  gemm_accumulate(a.data(), b.data(), out.data(), a.dim(0), a.dim(1), b.dim(1));
  return out;
}

template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank2(a.shape(), "matmul_nt");
  require_rank2(b.shape(), "matmul_nt");
  if (a.dim(1) != b.dim(1))
    throw DimensionError("matmul_nt inner dimensions disagree: " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()) + "^T");
  return matmul(a, transpose(b));
}

template <typename T>
Tensor<T> matmul_tn(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank2(a.shape(), "matmul_tn");
  require_rank2(b.shape(), "matmul_tn");
  if (a.dim(0) != b.dim(0))
    throw DimensionError("matmul_tn inner dimensions disagree: " + shape_str(a.shape()) + "^T x " +
                         shape_str(b.shape()));
  return matmul(transpose(a), b);
}

template <typename T>
T normal_cdf(T z) {
  return T(0.5) * (T(1) + std::erf(z / std::numbers::sqrt2_v<T>));
}

template <typename T>
T gelu_scalar(T x) {
  return x * normal_cdf(x);
}

template <typename T>
T gelu_grad_scalar(T x) {
  const T pdf = std::exp(T(-0.5) * x * x) / std::sqrt(T(2) * std::numbers::pi_v<T>);
  return normal_cdf(x) + x * pdf;
}

template <typename T>
Tensor<T> activation(const Tensor<T>& x, Activation kind) {
  Tensor<T> out = x;
  if (kind == Activation::kRelu) {
    for (auto& v : out.storage()) v = v > T{0} ? v : T{0};
  } else {
    for (auto& v : out.storage()) v = gelu_scalar(v);
  }
  return out;
}

template <typename T>
Tensor<T> erf(const Tensor<T>& x) {
  Tensor<T> out = x;
  for (auto& v : out.storage()) v = std::erf(v);
  return out;
}

template <typename T>
TopK<T> topk_values(std::span<const T> x, std::size_t k) {
  if (k < 1 || k > x.size())
    throw DimensionError("topk: k=" + std::to_string(k) + " out of range [1, " +
                         std::to_string(x.size()) + "]");
  std::vector<std::size_t> idx(x.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&](std::size_t a, std::size_t b) { return x[a] > x[b] || (x[a] == x[b] && a < b); });
  TopK<T> out;
  out.indices.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k));
  out.values.reserve(k);
  for (std::size_t i : out.indices) out.values.push_back(x[i]);
  return out;
}

template <typename T>
void softmax_inplace(std::span<T> x) {
  if (x.empty()) return;
  const T mx = *std::max_element(x.begin(), x.end());
  T sum = 0;
  for (auto& v : x) {
    v = std::exp(v - mx);
    sum += v;
  }
  for (auto& v : x) v /= sum;
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x) {
  Tensor<T> out = x;
  for (std::size_t r = 0; r < out.rows(); ++r) softmax_inplace(out.row(r));
  return out;
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias) {
  const std::size_t d = x.cols();
  if (gain.size() != d || bias.size() != d)
    throw DimensionError("layer_norm: gain/bias " + shape_str(gain.shape()) + "/" +
                         shape_str(bias.shape()) + " do not match width " + std::to_string(d));
  Tensor<T> out = x;
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto row = out.row(r);
    T mean = 0;
    for (T v : row) mean += v;
    mean /= T(d);
    T var = 0;
    for (T v : row) var += (v - mean) * (v - mean);
    var /= T(d);
    const T inv = T(1) / std::sqrt(var + T(kLayerNormEps));
    for (std::size_t i = 0; i < d; ++i) row[i] = (row[i] - mean) * inv * gain[i] + bias[i];
  }
  return out;
}

template <typename T>
T cross_entropy(const Tensor<T>& logits, std::span<const int> targets) {
  if (logits.rows() != targets.size())
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(logits.rows()) + " rows");
  const std::size_t v = logits.cols();
  T total = 0;
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    const int t = targets[r];
    if (t < 0 || static_cast<std::size_t>(t) >= v)
      throw DimensionError("cross_entropy: target " + std::to_string(t) + " outside [0, " +
                           std::to_string(v) + ")");
    auto row = logits.row(r);
    const T mx = *std::max_element(row.begin(), row.end());
    T sum = 0;
    for (T x : row) sum += std::exp(x - mx);
    total += std::log(sum) + mx - row[static_cast<std::size_t>(t)];
  }
  return total / T(logits.rows());
}

#define MOEX_INSTANTIATE(T)                                                                   \
  template void gemm_accumulate<T>(const T*, const T*, T*, std::size_t, std::size_t, std::size_t); \
  template Tensor<T> transpose<T>(const Tensor<T>&);                                          \
  template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&);                           \
  template Tensor<T> matmul_nt<T>(const Tensor<T>&, const Tensor<T>&);                        \
  template Tensor<T> matmul_tn<T>(const Tensor<T>&, const Tensor<T>&);                        \
  template T normal_cdf<T>(T);                                                                \
  template T gelu_scalar<T>(T);                                                               \
  template T gelu_grad_scalar<T>(T);                                                          \
  template Tensor<T> activation<T>(const Tensor<T>&, Activation);                             \
  template Tensor<T> erf<T>(const Tensor<T>&);                                                \
  template TopK<T> topk_values<T>(std::span<const T>, std::size_t);                           \
  template void softmax_inplace<T>(std::span<T>);                                             \
  template Tensor<T> softmax<T>(const Tensor<T>&);                                            \
  template Tensor<T> layer_norm<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);     \
  template T cross_entropy<T>(const Tensor<T>&, std::span<const int>);

MOEX_INSTANTIATE(float)
MOEX_INSTANTIATE(double)

#undef MOEX_INSTANTIATE

}  // namespace moex
