#pragma once

#include <cstddef>
#include <span>
#include <string_view>
#include <utility>
#include <vector>

#include "moex/tensor.hpp"

namespace moex {

enum class Activation { kRelu, kGelu };

Activation parse_activation(std::string_view name);
std::string_view activation_name(Activation a);

// Raw row-major GEMM: C[m×n] += A[m×k] · B[k×n].
template <typename T>
void gemm_accumulate(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n);

template <typename T>
Tensor<T> transpose(const Tensor<T>& a);

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

// a · bᵀ, with b stored [n×k] (the usual [out×in] weight layout).
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b);

// aᵀ · b, with a stored [k×m].
template <typename T>
Tensor<T> matmul_tn(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
T gelu_scalar(T x);
template <typename T>
T gelu_grad_scalar(T x);

template <typename T>
Tensor<T> activation(const Tensor<T>& x, Activation kind);

template <typename T>
Tensor<T> erf(const Tensor<T>& x);

// Standard normal CDF via erf.
template <typename T>
T normal_cdf(T z);

template <typename T>
struct TopK {
  std::vector<T> values;
  std::vector<std::size_t> indices;
};

/// k largest entries in descending order. Equal values keep ascending index
/// order, so the result is a function of (values, positions) only.
template <typename T>
TopK<T> topk_values(std::span<const T> x, std::size_t k);

template <typename T>
Tensor<T> softmax(const Tensor<T>& x);

template <typename T>
void softmax_inplace(std::span<T> x);

inline constexpr double kLayerNormEps = 1e-5;

// Standardizes the last axis, then applies gain and bias.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias);

template <typename T>
T cross_entropy(const Tensor<T>& logits, std::span<const int> targets);

}  // namespace moex
