#pragma once

// Tape-based reverse-mode automatic differentiation over dense row-major
// float64 tensors.
//
// A Tape owns every node created during one forward pass, in creation order,
// which is a topological order of the graph. Tensor is a lightweight handle
// (tape pointer + node index). Trainable weights live outside tapes as
// Parameter objects; Tape::bind() copies a parameter onto the tape and
// backward() accumulates the bound node's gradient back into
// Parameter::grad().

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace uxw::ad {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Parameter {
 public:
  Parameter() = default;
  Parameter(Shape shape, std::vector<double> value);

  static Parameter zeros(Shape shape);

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return value_.size(); }

  std::span<double> value() { return value_; }
  std::span<const double> value() const { return value_; }
  std::span<double> grad() { return grad_; }
  std::span<const double> grad() const { return grad_; }

  void zero_grad();

 private:
  Shape shape_;
  std::vector<double> value_;
  std::vector<double> grad_;
};

class Tape;

class Tensor {
 public:
  Tensor() = default;

  const Shape& shape() const;
  std::size_t size() const;
  std::size_t rank() const { return shape().size(); }
  // Leading / trailing extent for matrices.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> value() const;
  // Empty until backward() has reached this tensor.
  std::span<const double> grad() const;
  bool requires_grad() const;

  double item() const;
  double at(std::size_t r, std::size_t c) const;

  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Tensor(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

enum class GradMode { kRecord, kInference };

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    Parameter* param = nullptr;
  };

  explicit Tape(GradMode mode = GradMode::kRecord);
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Tensor constant(Shape shape, std::vector<double> value);
  Tensor variable(Shape shape, std::vector<double> value);
  Tensor bind(Parameter& param);

  // Reverse sweep from a scalar loss. A tape supports exactly one sweep.
  void backward(const Tensor& loss);

  bool recording() const { return mode_ == GradMode::kRecord; }
  bool swept() const { return swept_; }
  std::size_t size() const { return nodes_.size(); }

  // Op-author interface.
  const Node& node(std::size_t id) const { return nodes_[id]; }
  Node& node(std::size_t id) { return nodes_[id]; }
  Tensor record(Shape shape, std::vector<double> value,
                std::vector<std::size_t> inputs, BackwardFn backward);
  // Gradient buffer of a node, allocated (zeroed) on first use.
  std::span<double> grad_buffer(std::size_t id);

 private:
  GradMode mode_;
  bool swept_ = false;
  std::vector<Node> nodes_;
};

// ---- differentiable operations --------------------------------------------
// All binary ops require both operands on the same tape.

Tensor matmul(const Tensor& a, const Tensor& b);     // [m×k]·[k×n]
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // [m×k]·[n×k]ᵀ

// Trailing-dimension broadcasting: the smaller shape must be a suffix of the
// larger one.
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor silu(const Tensor& a);
Tensor sum(const Tensor& a);

Tensor softmax_lastdim(const Tensor& a);

inline constexpr double kRmsNormEps = 1e-6;
Tensor rmsnorm(const Tensor& a, const Tensor& weight, double eps = kRmsNormEps);

// Mean of -log softmax(logits)[t, target_t] over positions with mask[t] != 0.
// Masked targets are never read.
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets,
                     std::span<const std::uint8_t> mask);

// Row gather from an embedding table [V×d].
Tensor embedding(const Tensor& table, std::span<const int> ids);

// Rotary position encoding on [T×d], rotate-half pairing within each head;
// row t is encoded at position t, or at positions[t] when given.
Tensor rope(const Tensor& x, std::size_t n_heads, double base,
            std::span<const std::size_t> positions = {});

// Multi-head scaled dot-product attention on [T×d] projections. allowed is a
// row-major T×T matrix; disallowed scores are -inf before the softmax.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v,
                 std::span<const std::uint8_t> allowed, std::size_t n_heads);

// Row-wise select: row i comes from b where take_b[i] != 0, else from a.
Tensor merge_rows(const Tensor& a, const Tensor& b,
                  std::span<const std::uint8_t> take_b);

// Rows of x in the given order.
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows);

// Inverse of splitting a sequence by take_b: a holds the unselected rows in
// order, b the selected ones.
Tensor interleave_rows(const Tensor& a, const Tensor& b, std::span<const std::uint8_t> take_b);

}  // namespace uxw::ad
