#pragma once

#include <cassert>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace seqtwin {

// Thrown when operand shapes do not fit an operation's contract.
class shape_error : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Thrown when an operation's numeric precondition is violated (degenerate
// batch, non-scalar loss, out-of-range index, ...).
class contract_error : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Thrown for unreadable/unwritable files and malformed on-disk artifacts.
class io_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::string shape_str(std::span<const int> shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

struct TensorImpl {
  std::vector<int> shape;
  std::vector<double> values;
  std::vector<double> grad;  // empty until backward touches this tensor
  bool requires_grad = false;
};

inline std::size_t shape_size(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw shape_error("tensor dimensions must be positive, got " + shape_str(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

}  // namespace detail

// Dense row-major tensor of 64-bit reals with an optional gradient buffer.
// Copies are shallow handles; the payload is shared.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false) {
    auto impl = std::make_shared<detail::TensorImpl>();
    std::size_t n = detail::shape_size(shape);
    impl->shape = std::move(shape);
    impl->values.assign(n, 0.0);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
  }

  static Tensor from(std::vector<int> shape, std::vector<double> values,
                     bool requires_grad = false) {
    if (detail::shape_size(shape) != values.size())
      throw shape_error("value count " + std::to_string(values.size()) +
                        " does not fill shape " + shape_str(shape));
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->shape = std::move(shape);
    impl->values = std::move(values);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
  }

  static Tensor scalar(double v) { return from({1}, {v}); }

  bool defined() const { return impl_ != nullptr; }
  const std::vector<int>& shape() const { return impl_->shape; }
  int dim(int i) const { return impl_->shape[static_cast<std::size_t>(i)]; }
  int ndim() const { return static_cast<int>(impl_->shape.size()); }
  std::size_t size() const { return impl_->values.size(); }

  double* data() { return impl_->values.data(); }
  const double* data() const { return impl_->values.data(); }
  std::vector<double>& values() { return impl_->values; }
  const std::vector<double>& values() const { return impl_->values; }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool b) { impl_->requires_grad = b; }

  bool has_grad() const { return !impl_->grad.empty(); }
  // Allocates a zero gradient buffer on first use.
  double* grad() {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->values.size(), 0.0);
    return impl_->grad.data();
  }
  const std::vector<double>& grad_values() const { return impl_->grad; }
  void zero_grad() { impl_->grad.clear(); }

  double value() const {
    if (size() != 1) throw contract_error("value() on non-scalar tensor " + shape_str(shape()));
    return impl_->values[0];
  }

  double at(std::initializer_list<int> idx) const {
    return impl_->values[offset(idx)];
  }
  double& at(std::initializer_list<int> idx) { return impl_->values[offset(idx)]; }

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

  std::size_t offset(std::initializer_list<int> idx) const {
    assert(idx.size() == impl_->shape.size());
    std::size_t off = 0;
    auto it = idx.begin();
    for (std::size_t d = 0; d < impl_->shape.size(); ++d, ++it) {
      assert(*it >= 0 && *it < impl_->shape[d]);
      off = off * static_cast<std::size_t>(impl_->shape[d]) + static_cast<std::size_t>(*it);
    }
    return off;
  }

  std::shared_ptr<detail::TensorImpl> impl_;
};

// Records the backward rule of every differentiable operation in forward
// order. backward() replays the rules in reverse, accumulating each input's
// gradient exactly once per recorded use.
class Tape {
 public:
  bool recording() const { return recording_; }
  void set_recording(bool b) { recording_ = b; }

  void record(std::function<void()> backward_rule) {
    nodes_.push_back(std::move(backward_rule));
  }

  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  void backward(Tensor loss) {
    if (loss.size() != 1)
      throw contract_error("backward expects a scalar loss, got " + shape_str(loss.shape()));
    loss.grad()[0] += 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  }

 private:
  std::vector<std::function<void()>> nodes_;
  bool recording_ = true;
};

// Temporarily disables tape recording (pure inference / finite differences).
class NoGradGuard {
 public:
  explicit NoGradGuard(Tape& tape) : tape_(tape), prev_(tape.recording()) {
    tape_.set_recording(false);
  }
  ~NoGradGuard() { tape_.set_recording(prev_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  Tape& tape_;
  bool prev_;
};

namespace detail {

inline void check_finite(const Tensor& t, const char* op) {
#ifndef NDEBUG
  for (double v : t.values()) {
    if (!std::isfinite(v))
      throw std::runtime_error(std::string("non-finite value produced by ") + op);
  }
#else
  (void)t;
  (void)op;
#endif
}

inline bool track(const Tape& tape, std::initializer_list<const Tensor*> inputs) {
  if (!tape.recording()) return false;
  for (const Tensor* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Differentiable operations. Forward passes are pure; each records a single
// backward rule when the tape is recording and an input requires gradients.
// ---------------------------------------------------------------------------

inline Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
    throw shape_error("matmul shape mismatch: " + shape_str(a.shape()) + " x " +
                      shape_str(b.shape()));
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out = Tensor::zeros({m, n});
  const double* ap = a.data();
  const double* bp = b.data();
  double* op = out.data();
  for (int i = 0; i < m; ++i)
    for (int kk = 0; kk < k; ++kk) {
      const double aik = ap[i * k + kk];
      const double* brow = bp + kk * n;
      double* orow = op + i * n;
      for (int j = 0; j < n; ++j) orow[j] += aik * brow[j];
    }
  detail::check_finite(out, "matmul");
  if (detail::track(tape, {&a, &b})) {
    out.set_requires_grad(true);
    Tensor ac = a, bc = b, oc = out;
    tape.record([ac, bc, oc]() mutable {
      const int m = ac.dim(0), k = ac.dim(1), n = bc.dim(1);
      const double* dout = oc.grad();
      if (ac.requires_grad()) {
        double* da = ac.grad();
        const double* bp = bc.data();
        for (int i = 0; i < m; ++i)
          for (int kk = 0; kk < k; ++kk) {
            double acc = 0.0;
            const double* brow = bp + kk * n;
            const double* drow = dout + i * n;
            for (int j = 0; j < n; ++j) acc += drow[j] * brow[j];
            da[i * k + kk] += acc;
          }
      }
      if (bc.requires_grad()) {
        double* db = bc.grad();
        const double* ap = ac.data();
        for (int i = 0; i < m; ++i)
          for (int kk = 0; kk < k; ++kk) {
            const double aik = ap[i * k + kk];
            const double* drow = dout + i * n;
            double* dbrow = db + kk * n;
            for (int j = 0; j < n; ++j) dbrow[j] += aik * drow[j];
          }
      }
    });
  }
  return out;
}

inline Tensor transpose(Tape& tape, const Tensor& a) {
  if (a.ndim() != 2) throw shape_error("transpose expects a matrix, got " + shape_str(a.shape()));
  const int m = a.dim(0), n = a.dim(1);
  Tensor out = Tensor::zeros({n, m});
  const double* ap = a.data();
  double* op = out.data();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) op[j * m + i] = ap[i * n + j];
  if (detail::track(tape, {&a})) {
    out.set_requires_grad(true);
    Tensor ac = a, oc = out;
    tape.record([ac, oc]() mutable {
      const int m = ac.dim(0), n = ac.dim(1);
      const double* dout = oc.grad();
      double* da = ac.grad();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) da[i * n + j] += dout[j * m + i];
    });
  }
  return out;
}

// Same-padded 1D cross-correlation over channels-first input [b x c_in x l]
// with kernels [c_out x c_in x w] (w odd) and bias [c_out].
inline Tensor conv1d(Tape& tape, const Tensor& input, const Tensor& kernels, const Tensor& bias) {
  if (input.ndim() != 3 || kernels.ndim() != 3)
    throw shape_error("conv1d expects input [b,c_in,l] and kernels [c_out,c_in,w], got " +
                      shape_str(input.shape()) + " and " + shape_str(kernels.shape()));
  if (input.dim(1) != kernels.dim(1))
    throw shape_error("conv1d channel mismatch: input " + shape_str(input.shape()) +
                      " vs kernels " + shape_str(kernels.shape()));
  if (kernels.dim(2) % 2 == 0)
    throw contract_error("conv1d kernel width must be odd, got " + std::to_string(kernels.dim(2)));
  if (bias.ndim() != 1 || bias.dim(0) != kernels.dim(0))
    throw shape_error("conv1d bias " + shape_str(bias.shape()) + " does not match kernels " +
                      shape_str(kernels.shape()));
  const int b = input.dim(0), ci = input.dim(1), l = input.dim(2);
  const int co = kernels.dim(0), w = kernels.dim(2), pad = w / 2;
  Tensor out = Tensor::zeros({b, co, l});
  const double* in = input.data();
  const double* ker = kernels.data();
  const double* bi = bias.data();
  double* op = out.data();
  for (int n = 0; n < b; ++n)
    for (int f = 0; f < co; ++f) {
      double* orow = op + (static_cast<std::size_t>(n) * co + f) * l;
      for (int t = 0; t < l; ++t) orow[t] = bi[f];
      for (int c = 0; c < ci; ++c) {
        const double* irow = in + (static_cast<std::size_t>(n) * ci + c) * l;
        const double* krow = ker + (static_cast<std::size_t>(f) * ci + c) * w;
        for (int dw = 0; dw < w; ++dw) {
          const double kv = krow[dw];
          const int shift = dw - pad;
          const int t0 = std::max(0, -shift), t1 = std::min(l, l - shift);
          for (int t = t0; t < t1; ++t) orow[t] += kv * irow[t + shift];
        }
      }
    }
  detail::check_finite(out, "conv1d");
  if (detail::track(tape, {&input, &kernels, &bias})) {
    out.set_requires_grad(true);
    Tensor ic = input, kc = kernels, bc = bias, oc = out;
    tape.record([ic, kc, bc, oc]() mutable {
      const int b = ic.dim(0), ci = ic.dim(1), l = ic.dim(2);
      const int co = kc.dim(0), w = kc.dim(2), pad = w / 2;
      const double* dout = oc.grad();
      if (bc.requires_grad()) {
        double* db = bc.grad();
        for (int n = 0; n < b; ++n)
          for (int f = 0; f < co; ++f) {
            const double* drow = dout + (static_cast<std::size_t>(n) * co + f) * l;
            double acc = 0.0;
            for (int t = 0; t < l; ++t) acc += drow[t];
            db[f] += acc;
          }
      }
      if (kc.requires_grad()) {
        double* dk = kc.grad();
        const double* in = ic.data();
        for (int n = 0; n < b; ++n)
          for (int f = 0; f < co; ++f) {
            const double* drow = dout + (static_cast<std::size_t>(n) * co + f) * l;
            for (int c = 0; c < ci; ++c) {
              const double* irow = in + (static_cast<std::size_t>(n) * ci + c) * l;
              double* dkrow = dk + (static_cast<std::size_t>(f) * ci + c) * w;
              for (int dw = 0; dw < w; ++dw) {
                const int shift = dw - pad;
                const int t0 = std::max(0, -shift), t1 = std::min(l, l - shift);
                double acc = 0.0;
                for (int t = t0; t < t1; ++t) acc += drow[t] * irow[t + shift];
                dkrow[dw] += acc;
              }
            }
          }
      }
      if (ic.requires_grad()) {
        double* din = ic.grad();
        const double* ker = kc.data();
        for (int n = 0; n < b; ++n)
          for (int f = 0; f < co; ++f) {
            const double* drow = dout + (static_cast<std::size_t>(n) * co + f) * l;
            for (int c = 0; c < ci; ++c) {
              double* dirow = din + (static_cast<std::size_t>(n) * ci + c) * l;
              const double* krow = ker + (static_cast<std::size_t>(f) * ci + c) * w;
              for (int dw = 0; dw < w; ++dw) {
                const double kv = krow[dw];
                const int shift = dw - pad;
                const int t0 = std::max(0, -shift), t1 = std::min(l, l - shift);
                for (int t = t0; t < t1; ++t) dirow[t + shift] += kv * drow[t];
              }
            }
          }
      }
    });
  }
  return out;
}

// Non-overlapping max pooling; the trailing remainder is dropped. Gradient
// routes to the argmax position, first index on ties.
inline Tensor maxpool1d(Tape& tape, const Tensor& input, int window) {
  if (input.ndim() != 3)
    throw shape_error("maxpool1d expects [b,c,l], got " + shape_str(input.shape()));
  if (window < 1) throw contract_error("maxpool1d window must be >= 1");
  const int b = input.dim(0), c = input.dim(1), l = input.dim(2);
  const int lo = l / window;
  if (lo == 0)
    throw contract_error("maxpool1d degenerate length: l=" + std::to_string(l) +
                         " < window=" + std::to_string(window));
  Tensor out = Tensor::zeros({b, c, lo});
  std::vector<std::int32_t> argmax(static_cast<std::size_t>(b) * c * lo);
  const double* in = input.data();
  double* op = out.data();
  for (int n = 0; n < b; ++n)
    for (int ch = 0; ch < c; ++ch) {
      const double* irow = in + (static_cast<std::size_t>(n) * c + ch) * l;
      const std::size_t obase = (static_cast<std::size_t>(n) * c + ch) * lo;
      for (int t = 0; t < lo; ++t) {
        int best = t * window;
        double bv = irow[best];
        for (int j = t * window + 1; j < (t + 1) * window; ++j)
          if (irow[j] > bv) {
            bv = irow[j];
            best = j;
          }
        op[obase + t] = bv;
        argmax[obase + t] = best;
      }
    }
  if (detail::track(tape, {&input})) {
    out.set_requires_grad(true);
    Tensor ic = input, oc = out;
    tape.record([ic, oc, argmax = std::move(argmax)]() mutable {
      const int b = ic.dim(0), c = ic.dim(1), l = ic.dim(2);
      const int lo = oc.dim(2);
      const double* dout = oc.grad();
      double* din = ic.grad();
      for (int n = 0; n < b; ++n)
        for (int ch = 0; ch < c; ++ch) {
          const std::size_t obase = (static_cast<std::size_t>(n) * c + ch) * lo;
          double* dirow = din + (static_cast<std::size_t>(n) * c + ch) * l;
          for (int t = 0; t < lo; ++t) dirow[argmax[obase + t]] += dout[obase + t];
        }
    });
  }
  return out;
}

inline Tensor relu(Tape& tape, const Tensor& a) {
  Tensor out = Tensor::zeros(a.shape());
  const double* ap = a.data();
  double* op = out.data();
  for (std::size_t i = 0; i < a.size(); ++i) op[i] = ap[i] > 0.0 ? ap[i] : 0.0;
  if (detail::track(tape, {&a})) {
    out.set_requires_grad(true);
    Tensor ac = a, oc = out;
    tape.record([ac, oc]() mutable {
      const double* dout = oc.grad();
      const double* ap = ac.data();
      double* da = ac.grad();
      for (std::size_t i = 0; i < ac.size(); ++i)
        if (ap[i] > 0.0) da[i] += dout[i];
    });
  }
  return out;
}

inline Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw shape_error("add shape mismatch: " + shape_str(a.shape()) + " vs " +
                      shape_str(b.shape()));
  Tensor out = Tensor::zeros(a.shape());
  const double* ap = a.data();
  const double* bp = b.data();
  double* op = out.data();
  for (std::size_t i = 0; i < a.size(); ++i) op[i] = ap[i] + bp[i];
  detail::check_finite(out, "add");
  if (detail::track(tape, {&a, &b})) {
    out.set_requires_grad(true);
    Tensor ac = a, bc = b, oc = out;
    tape.record([ac, bc, oc]() mutable {
      const double* dout = oc.grad();
      if (ac.requires_grad()) {
        double* da = ac.grad();
        for (std::size_t i = 0; i < ac.size(); ++i) da[i] += dout[i];
      }
      if (bc.requires_grad()) {
        double* db = bc.grad();
        for (std::size_t i = 0; i < bc.size(); ++i) db[i] += dout[i];
      }
    });
  }
  return out;
}

inline Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw shape_error("mul shape mismatch: " + shape_str(a.shape()) + " vs " +
                      shape_str(b.shape()));
  Tensor out = Tensor::zeros(a.shape());
  const double* ap = a.data();
  const double* bp = b.data();
  double* op = out.data();
  for (std::size_t i = 0; i < a.size(); ++i) op[i] = ap[i] * bp[i];
  detail::check_finite(out, "mul");
  if (detail::track(tape, {&a, &b})) {
    out.set_requires_grad(true);
    Tensor ac = a, bc = b, oc = out;
    tape.record([ac, bc, oc]() mutable {
      const double* dout = oc.grad();
      if (ac.requires_grad()) {
        double* da = ac.grad();
        const double* bp = bc.data();
        for (std::size_t i = 0; i < ac.size(); ++i) da[i] += dout[i] * bp[i];
      }
      if (bc.requires_grad()) {
        double* db = bc.grad();
        const double* ap = ac.data();
        for (std::size_t i = 0; i < bc.size(); ++i) db[i] += dout[i] * ap[i];
      }
    });
  }
  return out;
}

inline Tensor mul_scalar(Tape& tape, const Tensor& a, double s) {
  Tensor out = Tensor::zeros(a.shape());
  const double* ap = a.data();
  double* op = out.data();
  for (std::size_t i = 0; i < a.size(); ++i) op[i] = ap[i] * s;
  detail::check_finite(out, "mul_scalar");
  if (detail::track(tape, {&a})) {
    out.set_requires_grad(true);
    Tensor ac = a, oc = out;
    tape.record([ac, oc, s]() mutable {
      const double* dout = oc.grad();
      double* da = ac.grad();
      for (std::size_t i = 0; i < ac.size(); ++i) da[i] += dout[i] * s;
    });
  }
  return out;
}

inline Tensor add_scalar(Tape& tape, const Tensor& a, double s) {
  Tensor out = Tensor::zeros(a.shape());
  const double* ap = a.data();
  double* op = out.data();
  for (std::size_t i = 0; i < a.size(); ++i) op[i] = ap[i] + s;
  detail::check_finite(out, "add_scalar");
  if (detail::track(tape, {&a})) {
    out.set_requires_grad(true);
    Tensor ac = a, oc = out;
    tape.record([ac, oc]() mutable {
      const double* dout = oc.grad();
      double* da = ac.grad();
      for (std::size_t i = 0; i < ac.size(); ++i) da[i] += dout[i];
    });
  }
  return out;
}

// x [m x n] + bias [n] broadcast over rows.
inline Tensor add_bias_rows(Tape& tape, const Tensor& x, const Tensor& bias) {
  if (x.ndim() != 2 || bias.ndim() != 1 || x.dim(1) != bias.dim(0))
    throw shape_error("add_bias_rows shape mismatch: " + shape_str(x.shape()) + " vs " +
                      shape_str(bias.shape()));
  const int m = x.dim(0), n = x.dim(1);
  Tensor out = Tensor::zeros({m, n});
  const double* xp = x.data();
  const double* bp = bias.data();
  double* op = out.data();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) op[i * n + j] = xp[i * n + j] + bp[j];
  detail::check_finite(out, "add_bias_rows");
  if (detail::track(tape, {&x, &bias})) {
    out.set_requires_grad(true);
    Tensor xc = x, bc = bias, oc = out;
    tape.record([xc, bc, oc]() mutable {
      const int m = xc.dim(0), n = xc.dim(1);
      const double* dout = oc.grad();
      if (xc.requires_grad()) {
        double* dx = xc.grad();
        for (std::size_t i = 0; i < xc.size(); ++i) dx[i] += dout[i];
      }
      if (bc.requires_grad()) {
        double* db = bc.grad();
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j) db[j] += dout[i * n + j];
      }
    });
  }
  return out;
}

// Subtracts the per-column mean over rows (the batch dimension).
inline Tensor mean_center_columns(Tape& tape, const Tensor& x) {
  if (x.ndim() != 2)
    throw shape_error("mean_center_columns expects a matrix, got " + shape_str(x.shape()));
  const int m = x.dim(0), n = x.dim(1);
  Tensor out = Tensor::zeros({m, n});
  std::vector<double> mean(static_cast<std::size_t>(n), 0.0);
  const double* xp = x.data();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) mean[static_cast<std::size_t>(j)] += xp[i * n + j];
  for (int j = 0; j < n; ++j) mean[static_cast<std::size_t>(j)] /= m;
  double* op = out.data();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) op[i * n + j] = xp[i * n + j] - mean[static_cast<std::size_t>(j)];
  if (detail::track(tape, {&x})) {
    out.set_requires_grad(true);
    Tensor xc = x, oc = out;
    tape.record([xc, oc]() mutable {
      const int m = xc.dim(0), n = xc.dim(1);
      const double* dout = oc.grad();
      double* dx = xc.grad();
      for (int j = 0; j < n; ++j) {
        double col = 0.0;
        for (int i = 0; i < m; ++i) col += dout[i * n + j];
        col /= m;
        for (int i = 0; i < m; ++i) dx[i * n + j] += dout[i * n + j] - col;
      }
    });
  }
  return out;
}

inline constexpr double kNormEps = 1e-12;

// Scales each column to unit L2 norm; kNormEps inside the sqrt keeps the
// denominator nonzero and the derivative finite at the origin.
inline Tensor l2_normalize_columns(Tape& tape, const Tensor& x) {
  if (x.ndim() != 2)
    throw shape_error("l2_normalize_columns expects a matrix, got " + shape_str(x.shape()));
  const int m = x.dim(0), n = x.dim(1);
  Tensor out = Tensor::zeros({m, n});
  std::vector<double> norm(static_cast<std::size_t>(n));
  const double* xp = x.data();
  for (int j = 0; j < n; ++j) {
    double q = kNormEps;
    for (int i = 0; i < m; ++i) q += xp[i * n + j] * xp[i * n + j];
    norm[static_cast<std::size_t>(j)] = std::sqrt(q);
  }
  double* op = out.data();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) op[i * n + j] = xp[i * n + j] / norm[static_cast<std::size_t>(j)];
  detail::check_finite(out, "l2_normalize_columns");
  if (detail::track(tape, {&x})) {
    out.set_requires_grad(true);
    Tensor xc = x, oc = out;
    tape.record([xc, oc, norm = std::move(norm)]() mutable {
      const int m = xc.dim(0), n = xc.dim(1);
      const double* dout = oc.grad();
      const double* z = oc.data();
      double* dx = xc.grad();
      for (int j = 0; j < n; ++j) {
        double dot = 0.0;
        for (int i = 0; i < m; ++i) dot += dout[i * n + j] * z[i * n + j];
        const double s = norm[static_cast<std::size_t>(j)];
        for (int i = 0; i < m; ++i) dx[i * n + j] += (dout[i * n + j] - z[i * n + j] * dot) / s;
      }
    });
  }
  return out;
}

inline Tensor sum(Tape& tape, const Tensor& a) {
  double acc = 0.0;
  const double* ap = a.data();
  for (std::size_t i = 0; i < a.size(); ++i) acc += ap[i];
  Tensor out = Tensor::scalar(acc);
  if (detail::track(tape, {&a})) {
    out.set_requires_grad(true);
    Tensor ac = a, oc = out;
    tape.record([ac, oc]() mutable {
      const double d = oc.grad()[0];
      double* da = ac.grad();
      for (std::size_t i = 0; i < ac.size(); ++i) da[i] += d;
    });
  }
  return out;
}

// Main diagonal of a square matrix.
inline Tensor diag(Tape& tape, const Tensor& a) {
  if (a.ndim() != 2 || a.dim(0) != a.dim(1))
    throw shape_error("diag expects a square matrix, got " + shape_str(a.shape()));
  const int n = a.dim(0);
  Tensor out = Tensor::zeros({n});
  const double* ap = a.data();
  double* op = out.data();
  for (int i = 0; i < n; ++i) op[i] = ap[i * n + i];
  if (detail::track(tape, {&a})) {
    out.set_requires_grad(true);
    Tensor ac = a, oc = out;
    tape.record([ac, oc]() mutable {
      const int n = ac.dim(0);
      const double* dout = oc.grad();
      double* da = ac.grad();
      for (int i = 0; i < n; ++i) da[i * n + i] += dout[i];
    });
  }
  return out;
}

// Shape change over the same flat data (copying; backward passes through).
inline Tensor reshape(Tape& tape, const Tensor& a, std::vector<int> new_shape) {
  if (detail::shape_size(new_shape) != a.size())
    throw shape_error("reshape " + shape_str(a.shape()) + " -> " + shape_str(new_shape) +
                      " changes element count");
  Tensor out = Tensor::from(std::move(new_shape), a.values());
  if (detail::track(tape, {&a})) {
    out.set_requires_grad(true);
    Tensor ac = a, oc = out;
    tape.record([ac, oc]() mutable {
      const double* dout = oc.grad();
      double* da = ac.grad();
      for (std::size_t i = 0; i < ac.size(); ++i) da[i] += dout[i];
    });
  }
  return out;
}

// Mean softmax cross-entropy over rows of logits [b x n] against integer
// targets in [0, n).
inline Tensor softmax_cross_entropy(Tape& tape, const Tensor& logits,
                                    const std::vector<int>& targets) {
  if (logits.ndim() != 2)
    throw shape_error("softmax_cross_entropy expects [b,n] logits, got " +
                      shape_str(logits.shape()));
  const int b = logits.dim(0), n = logits.dim(1);
  if (static_cast<int>(targets.size()) != b)
    throw contract_error("softmax_cross_entropy: " + std::to_string(targets.size()) +
                         " targets for batch " + std::to_string(b));
  for (int t : targets)
    if (t < 0 || t >= n) throw contract_error("softmax_cross_entropy target out of range");
  std::vector<double> probs(static_cast<std::size_t>(b) * n);
  const double* lp = logits.data();
  double loss = 0.0;
  for (int i = 0; i < b; ++i) {
    const double* row = lp + static_cast<std::size_t>(i) * n;
    double mx = row[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    double* prow = probs.data() + static_cast<std::size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      prow[j] = std::exp(row[j] - mx);
      z += prow[j];
    }
    for (int j = 0; j < n; ++j) prow[j] /= z;
    loss += std::log(z) + mx - row[targets[static_cast<std::size_t>(i)]];
  }
  loss /= b;
  Tensor out = Tensor::scalar(loss);
  detail::check_finite(out, "softmax_cross_entropy");
  if (detail::track(tape, {&logits})) {
    out.set_requires_grad(true);
    Tensor lc = logits, oc = out;
    tape.record([lc, oc, probs = std::move(probs), targets]() mutable {
      const int b = lc.dim(0), n = lc.dim(1);
      const double d = oc.grad()[0] / b;
      double* dl = lc.grad();
      for (int i = 0; i < b; ++i) {
        const double* prow = probs.data() + static_cast<std::size_t>(i) * n;
        double* drow = dl + static_cast<std::size_t>(i) * n;
        for (int j = 0; j < n; ++j) drow[j] += d * prow[j];
        drow[targets[static_cast<std::size_t>(i)]] -= d;
      }
    });
  }
  return out;
}

// Gathers embedding rows for a batch of index sequences into channels-first
// layout [b x d x l]; backward scatter-adds into the table.
inline Tensor embed_sequences(Tape& tape, const Tensor& table,
                              const std::vector<std::int32_t>& indices, int batch, int seq_len) {
  if (table.ndim() != 2)
    throw shape_error("embed_sequences expects a [rows,d] table, got " + shape_str(table.shape()));
  if (static_cast<std::size_t>(batch) * seq_len != indices.size())
    throw contract_error("embed_sequences: index count does not match batch x seq_len");
  const int rows = table.dim(0), d = table.dim(1);
  for (std::int32_t ix : indices)
    if (ix < 0 || ix >= rows)
      throw contract_error("embedding index " + std::to_string(ix) + " out of range [0," +
                           std::to_string(rows - 1) + "]");
  Tensor out = Tensor::zeros({batch, d, seq_len});
  const double* tp = table.data();
  double* op = out.data();
  for (int n = 0; n < batch; ++n)
    for (int t = 0; t < seq_len; ++t) {
      const double* row = tp + static_cast<std::size_t>(indices[static_cast<std::size_t>(n) * seq_len + t]) * d;
      for (int j = 0; j < d; ++j)
        op[(static_cast<std::size_t>(n) * d + j) * seq_len + t] = row[j];
    }
  if (detail::track(tape, {&table})) {
    out.set_requires_grad(true);
    Tensor tc = table, oc = out;
    tape.record([tc, oc, indices, batch, seq_len]() mutable {
      const int d = tc.dim(1);
      const double* dout = oc.grad();
      double* dt = tc.grad();
      for (int n = 0; n < batch; ++n)
        for (int t = 0; t < seq_len; ++t) {
          double* drow = dt + static_cast<std::size_t>(indices[static_cast<std::size_t>(n) * seq_len + t]) * d;
          for (int j = 0; j < d; ++j)
            drow[j] += dout[(static_cast<std::size_t>(n) * d + j) * seq_len + t];
        }
    });
  }
  return out;
}

// Gathers single rows [n x d] (item tower of the dual encoder).
inline Tensor embedding_rows(Tape& tape, const Tensor& table,
                             const std::vector<std::int32_t>& indices) {
  if (table.ndim() != 2)
    throw shape_error("embedding_rows expects a [rows,d] table, got " + shape_str(table.shape()));
  const int rows = table.dim(0), d = table.dim(1);
  for (std::int32_t ix : indices)
    if (ix < 0 || ix >= rows)
      throw contract_error("embedding index " + std::to_string(ix) + " out of range [0," +
                           std::to_string(rows - 1) + "]");
  const int n = static_cast<int>(indices.size());
  Tensor out = Tensor::zeros({n, d});
  const double* tp = table.data();
  double* op = out.data();
  for (int i = 0; i < n; ++i) {
    const double* row = tp + static_cast<std::size_t>(indices[static_cast<std::size_t>(i)]) * d;
    for (int j = 0; j < d; ++j) op[static_cast<std::size_t>(i) * d + j] = row[j];
  }
  if (detail::track(tape, {&table})) {
    out.set_requires_grad(true);
    Tensor tc = table, oc = out;
    tape.record([tc, oc, indices]() mutable {
      const int d = tc.dim(1);
      const double* dout = oc.grad();
      double* dt = tc.grad();
      for (std::size_t i = 0; i < indices.size(); ++i) {
        double* drow = dt + static_cast<std::size_t>(indices[i]) * d;
        for (int j = 0; j < d; ++j) drow[j] += dout[i * d + j];
      }
    });
  }
  return out;
}

}  // namespace seqtwin
