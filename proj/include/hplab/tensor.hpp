#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "hplab/errors.hpp"

namespace hplab {

using Shape = std::vector<int>;

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
  }
};

}  // namespace detail

// Dense row-major tensor of 64-bit floats with optional gradient tracking.
// Copies are shallow: two handles share storage and gradient.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  int64_t size() const;
  int rows() const;  // first dimension (1 for scalars)
  int cols() const;  // last dimension
  bool requires_grad() const;

  std::span<const double> data() const;
  std::span<double> mutable_data();  // leaf initialization / optimizer updates
  double item() const;              // value of a one-element tensor
  double at(int64_t i) const;       // flat index access

  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  // Deep copy of values (gradient buffer not copied).
  Tensor clone() const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;
};

// Define-by-run tape. Constructing a Tape makes it the active recorder on
// this thread; destruction restores the previous one. Operations record a
// backward rule only while a tape is active and an input is tracked.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Reverse accumulation from a scalar loss into every tracked leaf.
  // A second call without reset() is an error.
  void backward(const Tensor& loss);
  void reset();
  size_t size() const { return entries_.size(); }

  void record_entry(std::function<void()> fn) {
    entries_.push_back(std::move(fn));
  }

  static Tape* active();

 private:
  std::vector<std::function<void()>> entries_;
  bool used_ = false;
  Tape* prev_ = nullptr;
};

// Elementwise and structural primitives. Every operation validates shapes,
// rejects non-finite results, and records its backward rule on the active
// tape when gradients are tracked.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor vexp(const Tensor& a);
Tensor vlog(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor scale(const Tensor& a, double c);
Tensor shift(const Tensor& a, double c);

// log(max(1 - x, 1e-12)); the clamp keeps the value finite when x -> 1,
// with zero local derivative inside the clamped region.
Tensor log1m_clamped(const Tensor& a);
bool log1m_would_clamp(std::span<const double> values);

// Product with a one-element tensor, differentiable in both operands.
Tensor scale_by(const Tensor& a, const Tensor& s);

// One element as a scalar tensor; backward scatters into the source slot.
Tensor select(const Tensor& a, int64_t index);

// Softmax along the last axis (row-wise for matrices), max-subtracted.
Tensor softmax_rows(const Tensor& a);

// Row-wise normalization with learnable gain and bias, epsilon 1e-5.
Tensor layer_norm_rows(const Tensor& x, const Tensor& gain, const Tensor& bias);

// Gathers table rows; backward scatter-adds into the table.
Tensor embedding_lookup(const Tensor& table, std::span<const int> ids);

// Mean negative log-likelihood of integer labels under row-wise logits.
Tensor cross_entropy_rows(const Tensor& logits, std::span<const int> labels);

// Concatenation along the first axis.
Tensor concat_rows(const Tensor& a, const Tensor& b);

// Adds a length-d vector to every row of an [n, d] matrix.
Tensor add_rowvec(const Tensor& a, const Tensor& v);

// Binary top-k indicator of a vector. The backward rule treats the
// discretization as the identity map (straight-through); it is not the
// true derivative, which is zero almost everywhere.
Tensor straight_through_top_k(const Tensor& r, int k);

// Elementwise op with caller-supplied values and local derivative.
Tensor map_with_grad(const Tensor& x, std::vector<double> values,
                     std::vector<double> dvalues_dx);

// Max over coordinates of
//   |(f(x+h e_i) - f(x-h e_i))/(2h) - autodiff_grad_i| / (|autodiff_grad_i| + 1e-12).
// f must be scalar-valued; the difference quotients are evaluated without
// recording.
double finite_difference_check(const std::function<Tensor(const Tensor&)>& f,
                               const Tensor& x, double h);

}  // namespace hplab
