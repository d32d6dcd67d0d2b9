#include "hplab/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace hplab {

namespace {

thread_local Tape* g_active_tape = nullptr;

using NodePtr = std::shared_ptr<detail::Node>;

void check_finite(const char* op, std::span<const double> values) {
  for (double v : values) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string(op) + ": non-finite value");
    }
  }
}

bool tracking(const Tensor& a) {
  return g_active_tape != nullptr && a.requires_grad();
}
bool tracking(const Tensor& a, const Tensor& b) {
  return g_active_tape != nullptr && (a.requires_grad() || b.requires_grad());
}
bool tracking(const Tensor& a, const Tensor& b, const Tensor& c) {
  return g_active_tape != nullptr &&
         (a.requires_grad() || b.requires_grad() || c.requires_grad());
}

Tensor make_result(const char* op, Shape shape, std::vector<double> data,
                   bool requires_grad) {
  check_finite(op, data);
  Tensor t = Tensor::from_data(std::move(shape), std::move(data), false);
  t.node()->requires_grad = requires_grad;
  return t;
}

void record(std::function<void()> fn) {
  g_active_tape->record_entry(std::move(fn));
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

void require_defined(const char* op, const Tensor& a) {
  if (!a.defined()) throw ContractError(std::string(op) + ": empty tensor handle");
}

void require_matrix(const char* op, const Tensor& a) {
  if (a.shape().size() != 2) {
    throw ShapeError(std::string(op) + ": expected a matrix, got " +
                     shape_str(a.shape()));
  }
}

// out[m,n] += A[m,k] * B[k,n]
void mm_accumulate(std::span<const double> a, std::span<const double> b,
                   std::span<double> out, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* arow = a.data() + static_cast<size_t>(i) * k;
    double* orow = out.data() + static_cast<size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b.data() + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
}

// out[m,n] += A[m,k] * B[n,k]^T
void mm_nt_accumulate(std::span<const double> a, std::span<const double> b,
                      std::span<double> out, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* arow = a.data() + static_cast<size_t>(i) * k;
    double* orow = out.data() + static_cast<size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const double* brow = b.data() + static_cast<size_t>(j) * k;
      double acc = 0.0;
      for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
      orow[j] += acc;
    }
  }
}

// out[k,n] += A[m,k]^T * B[m,n]
void mm_tn_accumulate(std::span<const double> a, std::span<const double> b,
                      std::span<double> out, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* arow = a.data() + static_cast<size_t>(i) * k;
    const double* brow = b.data() + static_cast<size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      double av = arow[p];
      if (av == 0.0) continue;
      double* orow = out.data() + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
}

void axpy(std::span<double> out, std::span<const double> x, double alpha = 1.0) {
  for (size_t i = 0; i < out.size(); ++i) out[i] += alpha * x[i];
}

}  // namespace

int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  int64_t n = shape_numel(shape);
  return from_data(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  int64_t n = shape_numel(shape);
  return from_data(std::move(shape), std::vector<double>(n, value),
                   requires_grad);
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data,
                         bool requires_grad) {
  if (shape.empty()) throw ShapeError("Tensor: shape must have at least one dimension");
  for (int d : shape) {
    if (d <= 0) throw ShapeError("Tensor: dimensions must be positive, got " + shape_str(shape));
  }
  if (static_cast<int64_t>(data.size()) != shape_numel(shape)) {
    throw ShapeError("Tensor: data length does not match shape " + shape_str(shape));
  }
  check_finite("Tensor", data);
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_data({1}, {value}, requires_grad);
}

const Shape& Tensor::shape() const {
  require_defined("shape", *this);
  return node_->shape;
}

int64_t Tensor::size() const {
  require_defined("size", *this);
  return static_cast<int64_t>(node_->data.size());
}

int Tensor::rows() const { return shape().front(); }
int Tensor::cols() const { return shape().back(); }

bool Tensor::requires_grad() const {
  return node_ != nullptr && node_->requires_grad;
}

std::span<const double> Tensor::data() const {
  require_defined("data", *this);
  return node_->data;
}

std::span<double> Tensor::mutable_data() {
  require_defined("mutable_data", *this);
  return node_->data;
}

double Tensor::item() const {
  if (size() != 1) throw ContractError("item: tensor has more than one element");
  return node_->data[0];
}

double Tensor::at(int64_t i) const {
  if (i < 0 || i >= size()) throw ContractError("at: index out of range");
  return node_->data[static_cast<size_t>(i)];
}

bool Tensor::has_grad() const { return node_ != nullptr && !node_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  require_defined("grad", *this);
  if (node_->grad.empty()) throw ContractError("grad: no gradient has been accumulated");
  return node_->grad;
}

std::span<double> Tensor::mutable_grad() {
  require_defined("mutable_grad", *this);
  node_->ensure_grad();
  return node_->grad;
}

void Tensor::zero_grad() {
  require_defined("zero_grad", *this);
  node_->grad.clear();
}

Tensor Tensor::clone() const {
  require_defined("clone", *this);
  return from_data(node_->shape, node_->data, node_->requires_grad);
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

Tape::Tape() {
  prev_ = g_active_tape;
  g_active_tape = this;
}

Tape::~Tape() { g_active_tape = prev_; }

Tape* Tape::active() { return g_active_tape; }

void Tape::backward(const Tensor& loss) {
  if (used_) throw ContractError("backward: tape already consumed; reset() first");
  if (!loss.defined() || loss.size() != 1) {
    throw ContractError("backward: loss must be a one-element tensor");
  }
  if (entries_.empty()) throw ContractError("backward: tape is empty");
  if (!loss.requires_grad()) {
    throw ContractError("backward: loss does not depend on any tracked tensor");
  }
  loss.node()->ensure_grad();
  loss.node()->grad[0] = 1.0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
  used_ = true;
}

void Tape::reset() {
  entries_.clear();
  used_ = false;
}

// ---------------------------------------------------------------------------
// Elementwise primitives
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  std::vector<double> out(a.size());
  auto ad = a.data(), bd = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = ad[i] + bd[i];
  Tensor y = make_result("add", a.shape(), std::move(out), tracking(a, b));
  if (y.requires_grad()) {
    record([an = a.node(), bn = b.node(), yn = y.node()] {
      if (yn->grad.empty()) return;
      if (an->requires_grad) {
        an->ensure_grad();
        axpy(an->grad, yn->grad);
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        axpy(bn->grad, yn->grad);
      }
    });
  }
  return y;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  std::vector<double> out(a.size());
  auto ad = a.data(), bd = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = ad[i] - bd[i];
  Tensor y = make_result("sub", a.shape(), std::move(out), tracking(a, b));
  if (y.requires_grad()) {
    record([an = a.node(), bn = b.node(), yn = y.node()] {
      if (yn->grad.empty()) return;
      if (an->requires_grad) {
        an->ensure_grad();
        axpy(an->grad, yn->grad);
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        axpy(bn->grad, yn->grad, -1.0);
      }
    });
  }
  return y;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  std::vector<double> out(a.size());
  auto ad = a.data(), bd = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[i];
  Tensor y = make_result("mul", a.shape(), std::move(out), tracking(a, b));
  if (y.requires_grad()) {
    record([an = a.node(), bn = b.node(), yn = y.node()] {
      if (yn->grad.empty()) return;
      if (an->requires_grad) {
        an->ensure_grad();
        for (size_t i = 0; i < an->grad.size(); ++i) {
          an->grad[i] += yn->grad[i] * bn->data[i];
        }
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (size_t i = 0; i < bn->grad.size(); ++i) {
          bn->grad[i] += yn->grad[i] * an->data[i];
        }
      }
    });
  }
  return y;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix("matmul", a);
  require_matrix("matmul", b);
  int m = a.shape()[0], k = a.shape()[1];
  int k2 = b.shape()[0], n = b.shape()[1];
  if (k != k2) {
    throw ShapeError("matmul: inner dimensions differ, " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  }
  std::vector<double> out(static_cast<size_t>(m) * n, 0.0);
  mm_accumulate(a.data(), b.data(), out, m, k, n);
  Tensor y = make_result("matmul", {m, n}, std::move(out), tracking(a, b));
  if (y.requires_grad()) {
    record([an = a.node(), bn = b.node(), yn = y.node(), m, k, n] {
      if (yn->grad.empty()) return;
      if (an->requires_grad) {
        an->ensure_grad();
        mm_nt_accumulate(yn->grad, bn->data, an->grad, m, n, k);
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        mm_tn_accumulate(an->data, yn->grad, bn->grad, m, k, n);
      }
    });
  }
  return y;
}

Tensor transpose(const Tensor& a) {
  require_matrix("transpose", a);
  int r = a.shape()[0], c = a.shape()[1];
  std::vector<double> out(a.size());
  auto ad = a.data();
  for (int i = 0; i < r; ++i) {
    for (int j = 0; j < c; ++j) {
      out[static_cast<size_t>(j) * r + i] = ad[static_cast<size_t>(i) * c + j];
    }
  }
  Tensor y = make_result("transpose", {c, r}, std::move(out), tracking(a));
  if (y.requires_grad()) {
    record([an = a.node(), yn = y.node(), r, c] {
      if (yn->grad.empty()) return;
      an->ensure_grad();
      for (int i = 0; i < r; ++i) {
        for (int j = 0; j < c; ++j) {
          an->grad[static_cast<size_t>(i) * c + j] +=
              yn->grad[static_cast<size_t>(j) * r + i];
        }
      }
    });
  }
  return y;
}

Tensor vexp(const Tensor& a) {
  std::vector<double> out(a.size());
  auto ad = a.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = std::exp(ad[i]);
  Tensor y = make_result("exp", a.shape(), std::move(out), tracking(a));
  if (y.requires_grad()) {
    record([an = a.node(), yn = y.node()] {
      if (yn->grad.empty()) return;
      an->ensure_grad();
      for (size_t i = 0; i < an->grad.size(); ++i) {
        an->grad[i] += yn->grad[i] * yn->data[i];
      }
    });
  }
  return y;
}

Tensor vlog(const Tensor& a) {
  if (a.size() == 0) throw DomainError("log: empty input");
  std::vector<double> out(a.size());
  auto ad = a.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = std::log(ad[i]);
  Tensor y = make_result("log", a.shape(), std::move(out), tracking(a));
  if (y.requires_grad()) {
    record([an = a.node(), yn = y.node()] {
      if (yn->grad.empty()) return;
      an->ensure_grad();
      for (size_t i = 0; i < an->grad.size(); ++i) {
        an->grad[i] += yn->grad[i] / an->data[i];
      }
    });
  }
  return y;
}

Tensor relu(const Tensor& a) {
  std::vector<double> out(a.size());
  auto ad = a.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = ad[i] > 0.0 ? ad[i] : 0.0;
  Tensor y = make_result("relu", a.shape(), std::move(out), tracking(a));
  if (y.requires_grad()) {
    record([an = a.node(), yn = y.node()] {
      if (yn->grad.empty()) return;
      an->ensure_grad();
      for (size_t i = 0; i < an->grad.size(); ++i) {
        if (an->data[i] > 0.0) an->grad[i] += yn->grad[i];
      }
    });
  }
  return y;
}

Tensor sigmoid(const Tensor& a) {
  std::vector<double> out(a.size());
  auto ad = a.data();
  for (size_t i = 0; i < out.size(); ++i) {
    double x = ad[i];
    out[i] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                      : std::exp(x) / (1.0 + std::exp(x));
  }
  Tensor y = make_result("sigmoid", a.shape(), std::move(out), tracking(a));
  if (y.requires_grad()) {
    record([an = a.node(), yn = y.node()] {
      if (yn->grad.empty()) return;
      an->ensure_grad();
      for (size_t i = 0; i < an->grad.size(); ++i) {
        double s = yn->data[i];
        an->grad[i] += yn->grad[i] * s * (1.0 - s);
      }
    });
  }
  return y;
}

Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  Tensor y = make_result("sum", {1}, {acc}, tracking(a));
  if (y.requires_grad()) {
    record([an = a.node(), yn = y.node()] {
      if (yn->grad.empty()) return;
      an->ensure_grad();
      for (double& g : an->grad) g += yn->grad[0];
    });
  }
  return y;
}

Tensor mean(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  double inv_n = 1.0 / static_cast<double>(a.size());
  Tensor y = make_result("mean", {1}, {acc * inv_n}, tracking(a));
  if (y.requires_grad()) {
    record([an = a.node(), yn = y.node(), inv_n] {
      if (yn->grad.empty()) return;
      an->ensure_grad();
      for (double& g : an->grad) g += yn->grad[0] * inv_n;
    });
  }
  return y;
}

Tensor scale(const Tensor& a, double c) {
  if (!std::isfinite(c)) throw NumericError("scale: non-finite factor");
  std::vector<double> out(a.size());
  auto ad = a.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * c;
  Tensor y = make_result("scale", a.shape(), std::move(out), tracking(a));
  if (y.requires_grad()) {
    record([an = a.node(), yn = y.node(), c] {
      if (yn->grad.empty()) return;
      an->ensure_grad();
      axpy(an->grad, yn->grad, c);
    });
  }
  return y;
}

Tensor shift(const Tensor& a, double c) {
  if (!std::isfinite(c)) throw NumericError("shift: non-finite offset");
  std::vector<double> out(a.size());
  auto ad = a.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = ad[i] + c;
  Tensor y = make_result("shift", a.shape(), std::move(out), tracking(a));
  if (y.requires_grad()) {
    record([an = a.node(), yn = y.node()] {
      if (yn->grad.empty()) return;
      an->ensure_grad();
      axpy(an->grad, yn->grad);
    });
  }
  return y;
}

constexpr double kLog1mFloor = 1e-12;

bool log1m_would_clamp(std::span<const double> values) {
  for (double v : values) {
    if (1.0 - v <= kLog1mFloor) return true;
  }
  return false;
}

Tensor log1m_clamped(const Tensor& a) {
  std::vector<double> out(a.size());
  auto ad = a.data();
  for (size_t i = 0; i < out.size(); ++i) {
    out[i] = std::log(std::max(1.0 - ad[i], kLog1mFloor));
  }
  Tensor y = make_result("log1m_clamped", a.shape(), std::move(out), tracking(a));
  if (y.requires_grad()) {
    record([an = a.node(), yn = y.node()] {
      if (yn->grad.empty()) return;
      an->ensure_grad();
      for (size_t i = 0; i < an->grad.size(); ++i) {
        double rem = 1.0 - an->data[i];
        if (rem > kLog1mFloor) an->grad[i] += yn->grad[i] * (-1.0 / rem);
      }
    });
  }
  return y;
}

Tensor scale_by(const Tensor& a, const Tensor& s) {
  if (s.size() != 1) throw ShapeError("scale_by: scale must be a one-element tensor");
  double sv = s.at(0);
  std::vector<double> out(a.size());
  auto ad = a.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * sv;
  Tensor y = make_result("scale_by", a.shape(), std::move(out), tracking(a, s));
  if (y.requires_grad()) {
    record([an = a.node(), sn = s.node(), yn = y.node()] {
      if (yn->grad.empty()) return;
      if (an->requires_grad) {
        an->ensure_grad();
        axpy(an->grad, yn->grad, sn->data[0]);
      }
      if (sn->requires_grad) {
        sn->ensure_grad();
        double acc = 0.0;
        for (size_t i = 0; i < yn->grad.size(); ++i) {
          acc += yn->grad[i] * an->data[i];
        }
        sn->grad[0] += acc;
      }
    });
  }
  return y;
}

Tensor select(const Tensor& a, int64_t index) {
  if (index < 0 || index >= a.size()) throw ContractError("select: index out of range");
  Tensor y = make_result("select", {1}, {a.at(index)}, tracking(a));
  if (y.requires_grad()) {
    record([an = a.node(), yn = y.node(), index] {
      if (yn->grad.empty()) return;
      an->ensure_grad();
      an->grad[static_cast<size_t>(index)] += yn->grad[0];
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Row-structured primitives
// ---------------------------------------------------------------------------

namespace {

// Rows/cols interpretation for row-wise ops: 1-d is a single row.
void row_view(const Tensor& t, int& rows, int& cols) {
  if (t.shape().size() == 1) {
    rows = 1;
    cols = t.shape()[0];
  } else if (t.shape().size() == 2) {
    rows = t.shape()[0];
    cols = t.shape()[1];
  } else {
    throw ShapeError("row op: expected rank 1 or 2, got " + shape_str(t.shape()));
  }
}

}  // namespace

Tensor softmax_rows(const Tensor& a) {
  int rows, cols;
  row_view(a, rows, cols);
  if (cols == 0 || a.size() == 0) throw DomainError("softmax: empty axis");
  std::vector<double> out(a.size());
  auto ad = a.data();
  for (int r = 0; r < rows; ++r) {
    const double* x = ad.data() + static_cast<size_t>(r) * cols;
    double* y = out.data() + static_cast<size_t>(r) * cols;
    double mx = x[0];
    for (int j = 1; j < cols; ++j) mx = std::max(mx, x[j]);
    double denom = 0.0;
    for (int j = 0; j < cols; ++j) {
      y[j] = std::exp(x[j] - mx);
      denom += y[j];
    }
    for (int j = 0; j < cols; ++j) y[j] /= denom;
  }
  Tensor y = make_result("softmax", a.shape(), std::move(out), tracking(a));
  if (y.requires_grad()) {
    record([an = a.node(), yn = y.node(), rows, cols] {
      if (yn->grad.empty()) return;
      an->ensure_grad();
      for (int r = 0; r < rows; ++r) {
        const double* p = yn->data.data() + static_cast<size_t>(r) * cols;
        const double* dy = yn->grad.data() + static_cast<size_t>(r) * cols;
        double* dx = an->grad.data() + static_cast<size_t>(r) * cols;
        double dot = 0.0;
        for (int j = 0; j < cols; ++j) dot += dy[j] * p[j];
        for (int j = 0; j < cols; ++j) dx[j] += p[j] * (dy[j] - dot);
      }
    });
  }
  return y;
}

Tensor layer_norm_rows(const Tensor& x, const Tensor& gain, const Tensor& bias) {
  int rows, cols;
  row_view(x, rows, cols);
  if (gain.size() != cols || bias.size() != cols) {
    throw ShapeError("layer_norm: gain/bias length must equal the row width");
  }
  constexpr double kEps = 1e-5;
  std::vector<double> out(x.size());
  auto normalized = std::make_shared<std::vector<double>>(x.size());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  auto xd = x.data();
  auto gd = gain.data();
  auto bd = bias.data();
  for (int r = 0; r < rows; ++r) {
    const double* xr = xd.data() + static_cast<size_t>(r) * cols;
    double* yr = out.data() + static_cast<size_t>(r) * cols;
    double* nr = normalized->data() + static_cast<size_t>(r) * cols;
    double mu = 0.0;
    for (int j = 0; j < cols; ++j) mu += xr[j];
    mu /= cols;
    double var = 0.0;
    for (int j = 0; j < cols; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= cols;
    double is = 1.0 / std::sqrt(var + kEps);
    (*inv_std)[r] = is;
    for (int j = 0; j < cols; ++j) {
      nr[j] = (xr[j] - mu) * is;
      yr[j] = gd[j] * nr[j] + bd[j];
    }
  }
  Tensor y = make_result("layer_norm", x.shape(), std::move(out),
                         tracking(x, gain, bias));
  if (y.requires_grad()) {
    record([xn = x.node(), gn = gain.node(), bn = bias.node(), yn = y.node(),
            normalized, inv_std, rows, cols] {
      if (yn->grad.empty()) return;
      if (gn->requires_grad) gn->ensure_grad();
      if (bn->requires_grad) bn->ensure_grad();
      if (xn->requires_grad) xn->ensure_grad();
      for (int r = 0; r < rows; ++r) {
        const double* dy = yn->grad.data() + static_cast<size_t>(r) * cols;
        const double* nr = normalized->data() + static_cast<size_t>(r) * cols;
        if (gn->requires_grad || bn->requires_grad) {
          for (int j = 0; j < cols; ++j) {
            if (gn->requires_grad) gn->grad[j] += dy[j] * nr[j];
            if (bn->requires_grad) bn->grad[j] += dy[j];
          }
        }
        if (xn->requires_grad) {
          double* dx = xn->grad.data() + static_cast<size_t>(r) * cols;
          double mean_g = 0.0, mean_gn = 0.0;
          for (int j = 0; j < cols; ++j) {
            double h = dy[j] * gn->data[j];
            mean_g += h;
            mean_gn += h * nr[j];
          }
          mean_g /= cols;
          mean_gn /= cols;
          double is = (*inv_std)[r];
          for (int j = 0; j < cols; ++j) {
            double h = dy[j] * gn->data[j];
            dx[j] += is * (h - mean_g - nr[j] * mean_gn);
          }
        }
      }
    });
  }
  return y;
}

Tensor embedding_lookup(const Tensor& table, std::span<const int> ids) {
  require_matrix("embedding_lookup", table);
  if (ids.empty()) throw DomainError("embedding_lookup: empty id list");
  int v = table.shape()[0], d = table.shape()[1];
  for (int id : ids) {
    if (id < 0 || id >= v) throw DomainError("embedding_lookup: id out of range");
  }
  int t = static_cast<int>(ids.size());
  std::vector<double> out(static_cast<size_t>(t) * d);
  auto td = table.data();
  for (int i = 0; i < t; ++i) {
    const double* src = td.data() + static_cast<size_t>(ids[i]) * d;
    std::copy(src, src + d, out.data() + static_cast<size_t>(i) * d);
  }
  Tensor y = make_result("embedding_lookup", {t, d}, std::move(out), tracking(table));
  if (y.requires_grad()) {
    std::vector<int> ids_copy(ids.begin(), ids.end());
    record([tn = table.node(), yn = y.node(), ids_copy, d] {
      if (yn->grad.empty()) return;
      tn->ensure_grad();
      for (size_t i = 0; i < ids_copy.size(); ++i) {
        const double* dy = yn->grad.data() + i * d;
        double* dst = tn->grad.data() + static_cast<size_t>(ids_copy[i]) * d;
        for (int j = 0; j < d; ++j) dst[j] += dy[j];
      }
    });
  }
  return y;
}

Tensor cross_entropy_rows(const Tensor& logits, std::span<const int> labels) {
  int rows, cols;
  row_view(logits, rows, cols);
  if (static_cast<int>(labels.size()) != rows) {
    throw ShapeError("cross_entropy: one label per logit row required");
  }
  for (int lab : labels) {
    if (lab < 0 || lab >= cols) throw DomainError("cross_entropy: label out of range");
  }
  auto probs = std::make_shared<std::vector<double>>(logits.size());
  auto xd = logits.data();
  double total = 0.0;
  for (int r = 0; r < rows; ++r) {
    const double* x = xd.data() + static_cast<size_t>(r) * cols;
    double* p = probs->data() + static_cast<size_t>(r) * cols;
    double mx = x[0];
    for (int j = 1; j < cols; ++j) mx = std::max(mx, x[j]);
    double denom = 0.0;
    for (int j = 0; j < cols; ++j) {
      p[j] = std::exp(x[j] - mx);
      denom += p[j];
    }
    for (int j = 0; j < cols; ++j) p[j] /= denom;
    total += std::log(denom) + mx - x[labels[r]];
  }
  double inv_rows = 1.0 / rows;
  Tensor y = make_result("cross_entropy", {1}, {total * inv_rows}, tracking(logits));
  if (y.requires_grad()) {
    std::vector<int> labels_copy(labels.begin(), labels.end());
    record([ln = logits.node(), yn = y.node(), probs, labels_copy, rows, cols,
            inv_rows] {
      if (yn->grad.empty()) return;
      ln->ensure_grad();
      double g = yn->grad[0] * inv_rows;
      for (int r = 0; r < rows; ++r) {
        const double* p = probs->data() + static_cast<size_t>(r) * cols;
        double* dx = ln->grad.data() + static_cast<size_t>(r) * cols;
        for (int j = 0; j < cols; ++j) {
          dx[j] += g * (p[j] - (j == labels_copy[r] ? 1.0 : 0.0));
        }
      }
    });
  }
  return y;
}

Tensor concat_rows(const Tensor& a, const Tensor& b) {
  if (a.shape().size() != b.shape().size()) {
    throw ShapeError("concat_rows: rank mismatch");
  }
  Shape out_shape = a.shape();
  for (size_t i = 1; i < out_shape.size(); ++i) {
    if (a.shape()[i] != b.shape()[i]) {
      throw ShapeError("concat_rows: trailing dimensions differ");
    }
  }
  out_shape[0] += b.shape()[0];
  std::vector<double> out;
  out.reserve(a.size() + b.size());
  out.insert(out.end(), a.data().begin(), a.data().end());
  out.insert(out.end(), b.data().begin(), b.data().end());
  Tensor y = make_result("concat_rows", std::move(out_shape), std::move(out),
                         tracking(a, b));
  if (y.requires_grad()) {
    record([an = a.node(), bn = b.node(), yn = y.node()] {
      if (yn->grad.empty()) return;
      size_t na = an->data.size();
      if (an->requires_grad) {
        an->ensure_grad();
        for (size_t i = 0; i < na; ++i) an->grad[i] += yn->grad[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (size_t i = 0; i < bn->data.size(); ++i) {
          bn->grad[i] += yn->grad[na + i];
        }
      }
    });
  }
  return y;
}

Tensor add_rowvec(const Tensor& a, const Tensor& v) {
  int rows, cols;
  row_view(a, rows, cols);
  if (v.size() != cols) {
    throw ShapeError("add_rowvec: vector length must equal the row width");
  }
  std::vector<double> out(a.size());
  auto ad = a.data();
  auto vd = v.data();
  for (int r = 0; r < rows; ++r) {
    const double* x = ad.data() + static_cast<size_t>(r) * cols;
    double* y = out.data() + static_cast<size_t>(r) * cols;
    for (int j = 0; j < cols; ++j) y[j] = x[j] + vd[j];
  }
  Tensor y = make_result("add_rowvec", a.shape(), std::move(out), tracking(a, v));
  if (y.requires_grad()) {
    record([an = a.node(), vn = v.node(), yn = y.node(), rows, cols] {
      if (yn->grad.empty()) return;
      if (an->requires_grad) {
        an->ensure_grad();
        axpy(an->grad, yn->grad);
      }
      if (vn->requires_grad) {
        vn->ensure_grad();
        for (int r = 0; r < rows; ++r) {
          const double* dy = yn->grad.data() + static_cast<size_t>(r) * cols;
          for (int j = 0; j < cols; ++j) vn->grad[j] += dy[j];
        }
      }
    });
  }
  return y;
}

Tensor map_with_grad(const Tensor& x, std::vector<double> values,
                     std::vector<double> dvalues_dx) {
  if (static_cast<int64_t>(values.size()) != x.size() ||
      dvalues_dx.size() != values.size()) {
    throw ShapeError("map_with_grad: value/derivative length mismatch");
  }
  Tensor y = make_result("map_with_grad", x.shape(), std::move(values), tracking(x));
  if (y.requires_grad()) {
    auto local = std::make_shared<std::vector<double>>(std::move(dvalues_dx));
    record([xn = x.node(), yn = y.node(), local] {
      if (yn->grad.empty()) return;
      xn->ensure_grad();
      for (size_t i = 0; i < xn->grad.size(); ++i) {
        xn->grad[i] += yn->grad[i] * (*local)[i];
      }
    });
  }
  return y;
}

Tensor straight_through_top_k(const Tensor& r, int k) {
  if (r.shape().size() != 1) {
    throw ShapeError("straight_through_top_k: expected a vector");
  }
  int h = static_cast<int>(r.size());
  if (k < 1 || k > h) throw DomainError("straight_through_top_k: k out of [1, H]");
  std::vector<int> order(h);
  std::iota(order.begin(), order.end(), 0);
  auto rd = r.data();
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return rd[a] > rd[b]; });
  std::vector<double> values(h, 0.0);
  for (int i = 0; i < k; ++i) values[order[i]] = 1.0;
  return map_with_grad(r, std::move(values), std::vector<double>(h, 1.0));
}

double finite_difference_check(const std::function<Tensor(const Tensor&)>& f,
                               const Tensor& x, double h) {
  if (h <= 0.0) throw DomainError("finite_difference_check: step must be positive");
  Tensor probe = Tensor::from_data(x.shape(), {x.data().begin(), x.data().end()}, true);
  std::vector<double> autograd;
  {
    Tape tape;
    Tensor y = f(probe);
    if (y.size() != 1) {
      throw ContractError("finite_difference_check: f must be scalar-valued");
    }
    tape.backward(y);
    autograd.assign(probe.grad().begin(), probe.grad().end());
  }
  std::vector<double> base(x.data().begin(), x.data().end());
  double worst = 0.0;
  for (size_t i = 0; i < base.size(); ++i) {
    auto eval_at = [&](double delta) {
      std::vector<double> shifted = base;
      shifted[i] += delta;
      Tensor xi = Tensor::from_data(x.shape(), std::move(shifted), false);
      Tensor y = f(xi);
      if (y.size() != 1) {
        throw ContractError("finite_difference_check: f must be scalar-valued");
      }
      return y.item();
    };
    double fd = (eval_at(h) - eval_at(-h)) / (2.0 * h);
    double err = std::abs(fd - autograd[i]) / (std::abs(autograd[i]) + 1e-12);
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace hplab
