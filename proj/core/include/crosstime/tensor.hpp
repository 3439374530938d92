#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "crosstime/errors.hpp"
#include "crosstime/rng.hpp"

namespace crosstime {

using Shape = std::vector<int64_t>;

std::string shape_str(const Shape& s);
int64_t shape_numel(const Shape& s);

/// Flat storage behind a Tensor handle. Row-major, 64-bit floats. The grad
/// buffer stays empty until backward() first touches it.
struct TensorData {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;
  bool requires_grad = false;

  int64_t numel() const { return static_cast<int64_t>(values.size()); }
  std::vector<double>& ensure_grad();
};

/// Dense n-dimensional array of doubles. Copies share storage (handle
/// semantics) so gradients accumulate in one place regardless of how many
/// handles reference a parameter.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorData> d) : data_(std::move(d)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_vector(Shape shape, std::vector<double> values,
                            bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  /// Entries i.i.d. N(0, stddev^2).
  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0,
                      bool requires_grad = false);

  bool defined() const { return data_ != nullptr; }
  const Shape& shape() const { return data_->shape; }
  int rank() const { return static_cast<int>(data_->shape.size()); }
  int64_t dim(int i) const { return data_->shape[static_cast<size_t>(i)]; }
  int64_t numel() const { return data_->numel(); }

  double* data() { return data_->values.data(); }
  const double* data() const { return data_->values.data(); }
  std::vector<double>& values() { return data_->values; }
  const std::vector<double>& values() const { return data_->values; }

  bool requires_grad() const { return data_->requires_grad; }
  Tensor& set_requires_grad(bool rg) {
    data_->requires_grad = rg;
    return *this;
  }

  /// Null until backward has accumulated into this tensor.
  const std::vector<double>* grad() const {
    return data_->grad.empty() ? nullptr : &data_->grad;
  }
  void zero_grad() { data_->grad.clear(); }

  /// Value of a one-element tensor.
  double item() const;
  /// Element at (row, col) of a rank-2 tensor. Test/debug convenience.
  double at(int64_t r, int64_t c) const;

  /// Same values, detached from any gradient bookkeeping.
  Tensor detached() const;

  const std::shared_ptr<TensorData>& impl() const { return data_; }

 private:
  std::shared_ptr<TensorData> data_;
};

/// Records the operations of one forward pass, in execution order, so that
/// reverse iteration is a valid topological order for backpropagation.
///
/// Construction pushes the tape as the active one for the current thread;
/// destruction pops it. Ops record themselves onto the active tape whenever
/// an input requires gradients. One tape belongs to one run; runs on
/// different threads never share a tape.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active();

  void record(std::vector<std::shared_ptr<TensorData>> inputs,
              std::shared_ptr<TensorData> output,
              std::function<void()> backward);

  /// Seeds d(loss)/d(loss) = 1 and runs all recorded backward rules in
  /// reverse. `loss` must be scalar and must have been produced on this tape.
  void backward(const Tensor& loss);

  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    std::vector<std::shared_ptr<TensorData>> inputs;
    std::shared_ptr<TensorData> output;
    std::function<void()> backward;
  };
  std::vector<Node> nodes_;
};

// ---- elementwise ----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, double s);
Tensor sub(const Tensor& a, double s);
Tensor mul(const Tensor& a, double s);
Tensor div(const Tensor& a, double s);
Tensor abs(const Tensor& a);
Tensor relu(const Tensor& a);
/// Exact GELU: x * Phi(x) with the Gaussian CDF.
Tensor gelu(const Tensor& a);

// ---- reductions -----------------------------------------------------------

Tensor sum(const Tensor& a);
Tensor sum(const Tensor& a, int axis);
Tensor mean(const Tensor& a);
Tensor mean(const Tensor& a, int axis);
/// Minimum/maximum over all entries as a scalar. By default the subgradient
/// flows to the first extremal element; detach = true drops it and returns a
/// constant.
Tensor min_all(const Tensor& a, bool detach = false);
Tensor max_all(const Tensor& a, bool detach = false);
/// Row-wise sum of absolute values of a rank-2 tensor, shape {rows}.
Tensor row_abs_sum(const Tensor& a);

// ---- structure ------------------------------------------------------------

/// Permutes axes then reinterprets as new_shape (element count preserved).
/// The permuted layout is materialized; no view aliasing.
Tensor permute_reshape(const Tensor& a, const std::vector<int>& permutation,
                       const Shape& new_shape);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, const Shape& new_shape);

/// out[i, :] = a[indices[i], :]. Backward scatter-adds into the source rows;
/// repeated indices accumulate.
Tensor gather_rows(const Tensor& a, const std::vector<int64_t>& indices);
/// Contiguous row slice [begin, begin+count).
Tensor slice_rows(const Tensor& a, int64_t begin, int64_t count);
/// out.flat[i] = a.flat[index_map[i]]; arbitrary (possibly repeating) gather.
Tensor gather_flat(const Tensor& a, std::shared_ptr<const std::vector<int64_t>> index_map,
                   Shape out_shape);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor concat_cols(std::span<const Tensor> parts);

// ---- row/column broadcast -------------------------------------------------

/// out[i,j] = a[i,j] + bias[j]
Tensor add_bias(const Tensor& a, const Tensor& bias);
/// out[i,j] = a[i,j] * g[j]
Tensor scale_columns(const Tensor& a, const Tensor& g);
/// out[i,j] = a[i,j] / s[i]; every s[i] must be nonzero.
Tensor row_div(const Tensor& a, const Tensor& s);
/// out[i,j] = a[i,j] * scale[i] + shift[i]
Tensor row_affine(const Tensor& a, const Tensor& scale, const Tensor& shift);

// ---- fused neural ops -----------------------------------------------------

/// Row-wise softmax of a rank-2 tensor, max-subtracted for stability.
Tensor softmax_rows(const Tensor& a);
/// Normalizes the last axis to zero mean / unit variance (eps-regularized),
/// then applies the per-feature affine (gain, bias).
Tensor layernorm(const Tensor& a, const Tensor& gain, const Tensor& bias,
                 double eps = 1e-5);
/// Training: zero with probability rate, scale survivors by 1/(1-rate).
/// Eval (training=false): identity. rate must lie in [0, 1).
Tensor dropout(const Tensor& a, double rate, bool training, Rng& rng);

// ---- matmul ---------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);

namespace detail {
// C += A(m x k) * B(k x n); row-major, used by forward and backward kernels.
void mm_acc(const double* a, const double* b, double* c, int64_t m, int64_t k,
            int64_t n);
// C += A^T(m x k viewed k x m) * B(m x n)
void mm_at_b_acc(const double* a, const double* b, double* c, int64_t m,
                 int64_t k, int64_t n);
// C += A(m x n) * B^T(k x n viewed n x k)
void mm_a_bt_acc(const double* a, const double* b, double* c, int64_t m,
                 int64_t n, int64_t k);
}  // namespace detail

}  // namespace crosstime
