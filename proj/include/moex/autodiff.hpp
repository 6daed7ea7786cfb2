#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <type_traits>
#include <vector>

#include "moex/kernels.hpp"
#include "moex/tensor.hpp"

namespace moex {

template <typename T>
class Tape;

/// Handle to a value recorded on a Tape.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  int id = -1;

  const Tensor<T>& value() const { return tape->value(id); }
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const { return tape->requires_grad(id); }
};

/// Single-writer record of a forward computation. Nodes are appended in
/// execution order, so reverse iteration is a valid topological order.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, int self)>;

  explicit Tape(bool check_finite = std::is_same_v<T, double>) : check_finite_(check_finite) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> leaf(Tensor<T> value, bool requires_grad = true);
  Var<T> constant(Tensor<T> value) { return leaf(std::move(value), false); }

  const Tensor<T>& value(int id) const { return nodes_.at(static_cast<std::size_t>(id)).value; }
  bool requires_grad(int id) const { return nodes_.at(static_cast<std::size_t>(id)).requires_grad; }

  // Gradient accumulated for a node; zeros when backward never reached it.
  Tensor<T> grad(Var<T> v) const;

  void backward(Var<T> seed);
  void zero_grad();

  // With recording off, ops still compute values but keep no closures.
  bool grad_enabled() const noexcept { return grad_enabled_; }
  void set_grad_enabled(bool on) noexcept { grad_enabled_ = on; }
  bool check_finite() const noexcept { return check_finite_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  Var<T> record(Tensor<T> out, std::initializer_list<Var<T>> inputs, BackwardFn fn);
  Var<T> record(Tensor<T> out, std::span<const Var<T>> inputs, BackwardFn fn);
  Tensor<T>& grad_buffer(int id);
  bool has_grad(int id) const { return !nodes_.at(static_cast<std::size_t>(id)).grad.empty(); }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    BackwardFn backward;
    bool requires_grad = false;
  };

  std::vector<Node> nodes_;
  bool grad_enabled_ = true;
  bool check_finite_;
};

// Elementwise, same shape.
template <typename T> Var<T> add(Var<T> a, Var<T> b);
template <typename T> Var<T> sub(Var<T> a, Var<T> b);
template <typename T> Var<T> mul(Var<T> a, Var<T> b);
template <typename T> Var<T> div(Var<T> a, Var<T> b);
template <typename T> Var<T> scale(Var<T> a, T s);
template <typename T> Var<T> square(Var<T> a);
// sqrt(max(a, floor)); gradient is zero where the floor is active.
template <typename T> Var<T> sqrt_floor(Var<T> a, T floor);
template <typename T> Var<T> clamp_min(Var<T> a, T floor);
template <typename T> Var<T> relu(Var<T> a);
template <typename T> Var<T> gelu(Var<T> a);
template <typename T> Var<T> activation(Var<T> a, Activation kind);
template <typename T> Var<T> erf(Var<T> a);

// Adds a length-c bias to every row of an [r×c] matrix.
template <typename T> Var<T> add_bias(Var<T> a, Var<T> bias);

template <typename T> Var<T> matmul(Var<T> a, Var<T> b);
// x · wᵀ with w stored [out×in].
template <typename T> Var<T> linear(Var<T> x, Var<T> w);

template <typename T> Var<T> softmax_rows(Var<T> a);
template <typename T> Var<T> layer_norm_rows(Var<T> x, Var<T> gain, Var<T> bias);
template <typename T> Var<T> cross_entropy(Var<T> logits, std::span<const int> targets);

template <typename T> Var<T> sum(Var<T> a);
template <typename T> Var<T> mean(Var<T> a);
// Column means over rows: [r×c] -> [1×c].
template <typename T> Var<T> mean_rows(Var<T> a);
// Column population variance over rows: [r×c] -> [1×c].
template <typename T> Var<T> var_rows(Var<T> a);
template <typename T> Var<T> concat_rows(std::span<const Var<T>> parts);

// Stop-gradient: same value, no path back to the input.
template <typename T> Var<T> detach(Var<T> a);

template <typename T> Var<T> gather_rows(Var<T> table, std::span<const std::uint32_t> rows);
// base + scatter(src into rows of base); rows may repeat.
template <typename T> Var<T> scatter_add_rows(Var<T> base, Var<T> src, std::span<const std::uint32_t> rows);
// Picks a[rows[i], col] into an [n×1] column.
template <typename T> Var<T> gather_column(Var<T> a, std::span<const std::uint32_t> rows, std::size_t col);
// Multiplies row i of a by s[i]; s is [n×1].
template <typename T> Var<T> scale_rows(Var<T> a, Var<T> s);

// Keeps the k largest entries of each row (lowest index wins ties), zeroing
// the rest. Selection is not differentiated.
template <typename T> Var<T> topk_mask_rows(Var<T> a, std::size_t k);

template <typename T>
struct RowTopKSoftmax {
  Var<T> weights;                        // [N×M], zero outside the selection
  std::vector<std::uint32_t> selected;   // N×k, row-major, descending score order
  std::size_t k = 0;
};

// Per row: top-k over scores, softmax over the selected entries only.
template <typename T> RowTopKSoftmax<T> topk_softmax_rows(Var<T> scores, std::size_t k);

// Multi-head causal self-attention over packed qkv [B·T × 3d]; returns [B·T × d].
template <typename T>
Var<T> causal_attention(Var<T> qkv, std::size_t batch, std::size_t seq, std::size_t n_head);

}  // namespace moex
