#include "crosstime/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <utility>

namespace crosstime {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << ", ";
    os << s[i];
  }
  os << ")";
  return os.str();
}

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

std::vector<double>& TensorData::ensure_grad() {
  if (grad.empty()) grad.assign(values.size(), 0.0);
  return grad;
}

namespace {

void check_shape(const Shape& s) {
  for (int64_t d : s) {
    if (d < 1) throw ShapeError("tensor dimensions must be >= 1, got " + shape_str(s));
  }
}

Tensor make(Shape shape, std::vector<double> values) {
  auto d = std::make_shared<TensorData>();
  d->shape = std::move(shape);
  d->values = std::move(values);
  return Tensor(std::move(d));
}

using DataPtr = std::shared_ptr<TensorData>;

// Marks the output differentiable and records the node when a tape is active
// and some input needs gradients.
void maybe_record(std::vector<DataPtr> inputs, const DataPtr& out,
                  std::function<void()> backward) {
  Tape* tape = Tape::active();
  if (!tape) return;
  bool any = false;
  for (const auto& in : inputs)
    if (in->requires_grad) any = true;
  if (!any) return;
  out->requires_grad = true;
  tape->record(std::move(inputs), out, std::move(backward));
}

bool grad_ready(const DataPtr& out) { return !out->grad.empty(); }

}  // namespace

// ---- Tensor ---------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  check_shape(shape);
  const int64_t n = shape_numel(shape);
  Tensor t = make(std::move(shape), std::vector<double>(static_cast<size_t>(n), 0.0));
  t.set_requires_grad(requires_grad);
  return t;
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  check_shape(shape);
  const int64_t n = shape_numel(shape);
  Tensor t = make(std::move(shape), std::vector<double>(static_cast<size_t>(n), value));
  t.set_requires_grad(requires_grad);
  return t;
}

Tensor Tensor::from_vector(Shape shape, std::vector<double> values,
                           bool requires_grad) {
  check_shape(shape);
  if (shape_numel(shape) != static_cast<int64_t>(values.size()))
    throw ShapeError("from_vector: " + shape_str(shape) + " does not hold " +
                     std::to_string(values.size()) + " values");
  Tensor t = make(std::move(shape), std::move(values));
  t.set_requires_grad(requires_grad);
  return t;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_vector({1}, {value}, requires_grad);
}

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev, bool requires_grad) {
  check_shape(shape);
  const int64_t n = shape_numel(shape);
  std::vector<double> v(static_cast<size_t>(n));
  for (double& x : v) x = rng.normal(stddev);
  Tensor t = make(std::move(shape), std::move(v));
  t.set_requires_grad(requires_grad);
  return t;
}

double Tensor::item() const {
  if (numel() != 1)
    throw ShapeError("item(): tensor has shape " + shape_str(shape()));
  return data_->values[0];
}

double Tensor::at(int64_t r, int64_t c) const {
  if (rank() != 2) throw ShapeError("at(r,c) needs rank 2, got " + shape_str(shape()));
  return data_->values[static_cast<size_t>(r * dim(1) + c)];
}

Tensor Tensor::detached() const {
  auto d = std::make_shared<TensorData>();
  d->shape = data_->shape;
  d->values = data_->values;
  return Tensor(std::move(d));
}

// ---- Tape -----------------------------------------------------------------

namespace {
thread_local std::vector<Tape*> g_tape_stack;
}

Tape::Tape() { g_tape_stack.push_back(this); }

Tape::~Tape() {
  if (!g_tape_stack.empty() && g_tape_stack.back() == this) g_tape_stack.pop_back();
}

Tape* Tape::active() { return g_tape_stack.empty() ? nullptr : g_tape_stack.back(); }

void Tape::record(std::vector<std::shared_ptr<TensorData>> inputs,
                  std::shared_ptr<TensorData> output,
                  std::function<void()> backward) {
  nodes_.push_back(Node{std::move(inputs), std::move(output), std::move(backward)});
}

void Tape::backward(const Tensor& loss) {
  if (loss.numel() != 1)
    throw ShapeError("backward: loss must be scalar, got " + shape_str(loss.shape()));
  const auto& target = loss.impl();
  bool on_tape = false;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it)
    if (it->output == target) {
      on_tape = true;
      break;
    }
  if (!on_tape) throw NumericError("backward: loss was not produced on this tape");
  target->ensure_grad()[0] = 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->backward();
}

// ---- matmul kernels -------------------------------------------------------

namespace detail {

void mm_acc(const double* a, const double* b, double* c, int64_t m, int64_t k,
            int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (int64_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void mm_at_b_acc(const double* a, const double* b, double* c, int64_t m,
                 int64_t k, int64_t n) {
  // c (k x n) += a^T b where a is m x k, b is m x n
  for (int64_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    const double* brow = b + i * n;
    for (int64_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      double* crow = c + p * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void mm_a_bt_acc(const double* a, const double* b, double* c, int64_t m,
                 int64_t n, int64_t k) {
  // c (m x k) += a b^T where a is m x n, b is k x n
  for (int64_t i = 0; i < m; ++i) {
    const double* arow = a + i * n;
    double* crow = c + i * k;
    for (int64_t p = 0; p < k; ++p) {
      const double* brow = b + p * n;
      double acc = 0.0;
      for (int64_t j = 0; j < n; ++j) acc += arow[j] * brow[j];
      crow[p] += acc;
    }
  }
}

}  // namespace detail

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) +
                     " and " + shape_str(b.shape()));
  const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out = Tensor::zeros({m, n});
  detail::mm_acc(a.data(), b.data(), out.data(), m, k, n);
  maybe_record({a.impl(), b.impl()}, out.impl(),
               [ai = a.impl(), bi = b.impl(), oi = out.impl(), m, k, n]() {
                 if (!grad_ready(oi)) return;
                 const double* g = oi->grad.data();
                 if (ai->requires_grad)
                   detail::mm_a_bt_acc(g, bi->values.data(),
                                       ai->ensure_grad().data(), m, n, k);
                 if (bi->requires_grad)
                   detail::mm_at_b_acc(ai->values.data(), g,
                                       bi->ensure_grad().data(), m, k, n);
               });
  return out;
}

// ---- elementwise ----------------------------------------------------------

namespace {

enum class Bin { kAdd, kSub, kMul, kDiv };

Tensor binary_op(const Tensor& a, const Tensor& b, Bin op) {
  const bool a_scalar = a.numel() == 1;
  const bool b_scalar = b.numel() == 1;
  if (!(a.shape() == b.shape() || a_scalar || b_scalar))
    throw ShapeError("elementwise: shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()) + " differ (only scalar broadcast supported)");
  const Shape& out_shape = a_scalar ? b.shape() : a.shape();
  const int64_t n = shape_numel(out_shape);
  const double* pa = a.data();
  const double* pb = b.data();
  std::vector<double> v(static_cast<size_t>(n));
  const int64_t sa = a_scalar ? 0 : 1;
  const int64_t sb = b_scalar ? 0 : 1;
  switch (op) {
    case Bin::kAdd:
      for (int64_t i = 0; i < n; ++i) v[static_cast<size_t>(i)] = pa[i * sa] + pb[i * sb];
      break;
    case Bin::kSub:
      for (int64_t i = 0; i < n; ++i) v[static_cast<size_t>(i)] = pa[i * sa] - pb[i * sb];
      break;
    case Bin::kMul:
      for (int64_t i = 0; i < n; ++i) v[static_cast<size_t>(i)] = pa[i * sa] * pb[i * sb];
      break;
    case Bin::kDiv:
      for (int64_t i = 0; i < n; ++i) {
        if (pb[i * sb] == 0.0)
          throw NumericError("div: zero divisor at flat index " + std::to_string(i * sb));
        v[static_cast<size_t>(i)] = pa[i * sa] / pb[i * sb];
      }
      break;
  }
  Tensor out = make(out_shape, std::move(v));
  maybe_record(
      {a.impl(), b.impl()}, out.impl(),
      [ai = a.impl(), bi = b.impl(), oi = out.impl(), op, n, sa, sb]() {
        if (!grad_ready(oi)) return;
        const double* g = oi->grad.data();
        const double* pa = ai->values.data();
        const double* pb = bi->values.data();
        if (ai->requires_grad) {
          double* da = ai->ensure_grad().data();
          for (int64_t i = 0; i < n; ++i) {
            double gi = g[i];
            switch (op) {
              case Bin::kAdd:
              case Bin::kSub:
                break;
              case Bin::kMul:
                gi *= pb[i * sb];
                break;
              case Bin::kDiv:
                gi /= pb[i * sb];
                break;
            }
            da[i * sa] += gi;
          }
        }
        if (bi->requires_grad) {
          double* db = bi->ensure_grad().data();
          for (int64_t i = 0; i < n; ++i) {
            double gi = g[i];
            switch (op) {
              case Bin::kAdd:
                break;
              case Bin::kSub:
                gi = -gi;
                break;
              case Bin::kMul:
                gi *= pa[i * sa];
                break;
              case Bin::kDiv: {
                const double bv = pb[i * sb];
                gi *= -pa[i * sa] / (bv * bv);
                break;
              }
            }
            db[i * sb] += gi;
          }
        }
      });
  return out;
}

template <typename FwdFn, typename GradFn>
Tensor unary_op(const Tensor& a, FwdFn f, GradFn dfdx) {
  const int64_t n = a.numel();
  std::vector<double> v(static_cast<size_t>(n));
  const double* pa = a.data();
  for (int64_t i = 0; i < n; ++i) v[static_cast<size_t>(i)] = f(pa[i]);
  Tensor out = make(a.shape(), std::move(v));
  maybe_record({a.impl()}, out.impl(), [ai = a.impl(), oi = out.impl(), dfdx, n]() {
    if (!grad_ready(oi)) return;
    const double* g = oi->grad.data();
    const double* x = ai->values.data();
    double* da = ai->ensure_grad().data();
    for (int64_t i = 0; i < n; ++i) da[i] += g[i] * dfdx(x[i]);
  });
  return out;
}

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary_op(a, b, Bin::kAdd); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_op(a, b, Bin::kSub); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_op(a, b, Bin::kMul); }
Tensor div(const Tensor& a, const Tensor& b) { return binary_op(a, b, Bin::kDiv); }
Tensor add(const Tensor& a, double s) { return add(a, Tensor::scalar(s)); }
Tensor sub(const Tensor& a, double s) { return sub(a, Tensor::scalar(s)); }
Tensor mul(const Tensor& a, double s) { return mul(a, Tensor::scalar(s)); }
Tensor div(const Tensor& a, double s) { return div(a, Tensor::scalar(s)); }

Tensor abs(const Tensor& a) {
  return unary_op(
      a, [](double x) { return std::abs(x); },
      [](double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Tensor relu(const Tensor& a) {
  return unary_op(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& a) {
  return unary_op(
      a,
      [](double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); },
      [](double x) {
        const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
        return cdf + x * pdf;
      });
}

// ---- reductions -----------------------------------------------------------

Tensor sum(const Tensor& a) {
  double s = 0.0;
  const double* p = a.data();
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) s += p[i];
  Tensor out = Tensor::scalar(s);
  maybe_record({a.impl()}, out.impl(), [ai = a.impl(), oi = out.impl(), n]() {
    if (!grad_ready(oi)) return;
    const double g = oi->grad[0];
    double* da = ai->ensure_grad().data();
    for (int64_t i = 0; i < n; ++i) da[i] += g;
  });
  return out;
}

Tensor mean(const Tensor& a) { return div(sum(a), static_cast<double>(a.numel())); }

namespace {

// Decomposes a shape around `axis` into (outer, len, inner) strides.
void axis_split(const Shape& s, int axis, int64_t& outer, int64_t& len,
                int64_t& inner) {
  if (axis < 0 || axis >= static_cast<int>(s.size()))
    throw ShapeError("reduce: axis " + std::to_string(axis) +
                     " invalid for shape " + shape_str(s));
  outer = 1;
  for (int i = 0; i < axis; ++i) outer *= s[static_cast<size_t>(i)];
  len = s[static_cast<size_t>(axis)];
  inner = 1;
  for (size_t i = static_cast<size_t>(axis) + 1; i < s.size(); ++i) inner *= s[i];
}

}  // namespace

Tensor sum(const Tensor& a, int axis) {
  int64_t outer, len, inner;
  axis_split(a.shape(), axis, outer, len, inner);
  Shape out_shape;
  for (int i = 0; i < a.rank(); ++i)
    if (i != axis) out_shape.push_back(a.dim(i));
  if (out_shape.empty()) out_shape.push_back(1);
  Tensor out = Tensor::zeros(out_shape);
  const double* p = a.data();
  double* q = out.data();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t l = 0; l < len; ++l)
      for (int64_t i = 0; i < inner; ++i)
        q[o * inner + i] += p[(o * len + l) * inner + i];
  maybe_record({a.impl()}, out.impl(),
               [ai = a.impl(), oi = out.impl(), outer, len, inner]() {
                 if (!grad_ready(oi)) return;
                 const double* g = oi->grad.data();
                 double* da = ai->ensure_grad().data();
                 for (int64_t o = 0; o < outer; ++o)
                   for (int64_t l = 0; l < len; ++l)
                     for (int64_t i = 0; i < inner; ++i)
                       da[(o * len + l) * inner + i] += g[o * inner + i];
               });
  return out;
}

Tensor mean(const Tensor& a, int axis) {
  return div(sum(a, axis), static_cast<double>(a.dim(axis)));
}

namespace {

Tensor extremum_all(const Tensor& a, bool detach, bool take_min) {
  const double* p = a.data();
  double m = p[0];
  int64_t arg = 0;
  for (int64_t i = 1; i < a.numel(); ++i) {
    const bool better = take_min ? p[i] < m : p[i] > m;
    if (better) {
      m = p[i];
      arg = i;
    }
  }
  Tensor out = Tensor::scalar(m);
  if (!detach)
    maybe_record({a.impl()}, out.impl(), [ai = a.impl(), oi = out.impl(), arg]() {
      if (!grad_ready(oi)) return;
      ai->ensure_grad()[static_cast<size_t>(arg)] += oi->grad[0];
    });
  return out;
}

}  // namespace

Tensor min_all(const Tensor& a, bool detach) { return extremum_all(a, detach, true); }

Tensor max_all(const Tensor& a, bool detach) { return extremum_all(a, detach, false); }

Tensor row_abs_sum(const Tensor& a) {
  if (a.rank() != 2)
    throw ShapeError("row_abs_sum needs rank 2, got " + shape_str(a.shape()));
  const int64_t rows = a.dim(0), cols = a.dim(1);
  std::vector<double> v(static_cast<size_t>(rows), 0.0);
  const double* p = a.data();
  for (int64_t i = 0; i < rows; ++i) {
    double s = 0.0;
    for (int64_t j = 0; j < cols; ++j) s += std::abs(p[i * cols + j]);
    v[static_cast<size_t>(i)] = s;
  }
  Tensor out = make({rows}, std::move(v));
  maybe_record({a.impl()}, out.impl(),
               [ai = a.impl(), oi = out.impl(), rows, cols]() {
                 if (!grad_ready(oi)) return;
                 const double* g = oi->grad.data();
                 const double* x = ai->values.data();
                 double* da = ai->ensure_grad().data();
                 for (int64_t i = 0; i < rows; ++i)
                   for (int64_t j = 0; j < cols; ++j) {
                     const double xv = x[i * cols + j];
                     da[i * cols + j] += g[i] * (xv > 0.0 ? 1.0 : (xv < 0.0 ? -1.0 : 0.0));
                   }
               });
  return out;
}

// ---- structure ------------------------------------------------------------

namespace {

// Flat index map of a permutation: out.flat[i] = in.flat[map[i]].
std::vector<int64_t> permutation_map(const Shape& in_shape,
                                     const std::vector<int>& perm) {
  const int r = static_cast<int>(in_shape.size());
  std::vector<int64_t> in_strides(static_cast<size_t>(r), 1);
  for (int i = r - 2; i >= 0; --i)
    in_strides[static_cast<size_t>(i)] =
        in_strides[static_cast<size_t>(i + 1)] * in_shape[static_cast<size_t>(i + 1)];
  Shape out_shape(static_cast<size_t>(r));
  for (int i = 0; i < r; ++i)
    out_shape[static_cast<size_t>(i)] = in_shape[static_cast<size_t>(perm[static_cast<size_t>(i)])];
  const int64_t n = shape_numel(in_shape);
  std::vector<int64_t> map(static_cast<size_t>(n));
  std::vector<int64_t> idx(static_cast<size_t>(r), 0);
  for (int64_t flat = 0; flat < n; ++flat) {
    int64_t src = 0;
    for (int i = 0; i < r; ++i)
      src += idx[static_cast<size_t>(i)] * in_strides[static_cast<size_t>(perm[static_cast<size_t>(i)])];
    map[static_cast<size_t>(flat)] = src;
    for (int i = r - 1; i >= 0; --i) {
      if (++idx[static_cast<size_t>(i)] < out_shape[static_cast<size_t>(i)]) break;
      idx[static_cast<size_t>(i)] = 0;
    }
  }
  return map;
}

}  // namespace

Tensor gather_flat(const Tensor& a, std::shared_ptr<const std::vector<int64_t>> index_map,
                   Shape out_shape) {
  check_shape(out_shape);
  if (shape_numel(out_shape) != static_cast<int64_t>(index_map->size()))
    throw ShapeError("gather_flat: map size " + std::to_string(index_map->size()) +
                     " does not fill shape " + shape_str(out_shape));
  const int64_t n = static_cast<int64_t>(index_map->size());
  std::vector<double> v(static_cast<size_t>(n));
  const double* p = a.data();
  const int64_t src_n = a.numel();
  const auto& map = *index_map;
  for (int64_t i = 0; i < n; ++i) {
    const int64_t s = map[static_cast<size_t>(i)];
    if (s < 0 || s >= src_n)
      throw ShapeError("gather_flat: index " + std::to_string(s) + " out of range");
    v[static_cast<size_t>(i)] = p[s];
  }
  Tensor out = make(std::move(out_shape), std::move(v));
  maybe_record({a.impl()}, out.impl(),
               [ai = a.impl(), oi = out.impl(), index_map, n]() {
                 if (!grad_ready(oi)) return;
                 const double* g = oi->grad.data();
                 double* da = ai->ensure_grad().data();
                 const auto& map = *index_map;
                 for (int64_t i = 0; i < n; ++i) da[map[static_cast<size_t>(i)]] += g[i];
               });
  return out;
}

Tensor permute_reshape(const Tensor& a, const std::vector<int>& permutation,
                       const Shape& new_shape) {
  const int r = a.rank();
  if (static_cast<int>(permutation.size()) != r)
    throw ShapeError("permute_reshape: permutation rank " +
                     std::to_string(permutation.size()) + " vs tensor rank " +
                     std::to_string(r));
  std::vector<bool> seen(static_cast<size_t>(r), false);
  for (int p : permutation) {
    if (p < 0 || p >= r || seen[static_cast<size_t>(p)])
      throw ShapeError("permute_reshape: invalid axis permutation");
    seen[static_cast<size_t>(p)] = true;
  }
  if (shape_numel(new_shape) != a.numel())
    throw ShapeError("permute_reshape: element count mismatch, " +
                     shape_str(a.shape()) + " -> " + shape_str(new_shape));
  auto map = std::make_shared<std::vector<int64_t>>(permutation_map(a.shape(), permutation));
  return gather_flat(a, std::move(map), new_shape);
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("transpose needs rank 2, got " + shape_str(a.shape()));
  return permute_reshape(a, {1, 0}, {a.dim(1), a.dim(0)});
}

Tensor reshape(const Tensor& a, const Shape& new_shape) {
  if (shape_numel(new_shape) != a.numel())
    throw ShapeError("reshape: element count mismatch, " + shape_str(a.shape()) +
                     " -> " + shape_str(new_shape));
  check_shape(new_shape);
  Tensor out = make(new_shape, a.values());
  maybe_record({a.impl()}, out.impl(), [ai = a.impl(), oi = out.impl()]() {
    if (!grad_ready(oi)) return;
    double* da = ai->ensure_grad().data();
    for (size_t i = 0; i < oi->grad.size(); ++i) da[i] += oi->grad[i];
  });
  return out;
}

Tensor gather_rows(const Tensor& a, const std::vector<int64_t>& indices) {
  if (a.rank() != 2) throw ShapeError("gather_rows needs rank 2, got " + shape_str(a.shape()));
  const int64_t rows = a.dim(0), cols = a.dim(1);
  const int64_t out_rows = static_cast<int64_t>(indices.size());
  std::vector<double> v(static_cast<size_t>(out_rows * cols));
  const double* p = a.data();
  for (int64_t i = 0; i < out_rows; ++i) {
    const int64_t r = indices[static_cast<size_t>(i)];
    if (r < 0 || r >= rows)
      throw ShapeError("gather_rows: row " + std::to_string(r) + " out of range");
    std::copy(p + r * cols, p + (r + 1) * cols, v.begin() + i * cols);
  }
  Tensor out = make({out_rows, cols}, std::move(v));
  auto idx = std::make_shared<std::vector<int64_t>>(indices);
  maybe_record({a.impl()}, out.impl(),
               [ai = a.impl(), oi = out.impl(), idx, out_rows, cols]() {
                 if (!grad_ready(oi)) return;
                 const double* g = oi->grad.data();
                 double* da = ai->ensure_grad().data();
                 for (int64_t i = 0; i < out_rows; ++i) {
                   const int64_t r = (*idx)[static_cast<size_t>(i)];
                   for (int64_t j = 0; j < cols; ++j) da[r * cols + j] += g[i * cols + j];
                 }
               });
  return out;
}

Tensor slice_rows(const Tensor& a, int64_t begin, int64_t count) {
  if (a.rank() != 2) throw ShapeError("slice_rows needs rank 2, got " + shape_str(a.shape()));
  if (begin < 0 || count < 1 || begin + count > a.dim(0))
    throw ShapeError("slice_rows: [" + std::to_string(begin) + ", " +
                     std::to_string(begin + count) + ") out of " +
                     std::to_string(a.dim(0)) + " rows");
  const int64_t cols = a.dim(1);
  std::vector<double> v(a.data() + begin * cols, a.data() + (begin + count) * cols);
  Tensor out = make({count, cols}, std::move(v));
  maybe_record({a.impl()}, out.impl(),
               [ai = a.impl(), oi = out.impl(), begin, count, cols]() {
                 if (!grad_ready(oi)) return;
                 const double* g = oi->grad.data();
                 double* da = ai->ensure_grad().data();
                 for (int64_t i = 0; i < count * cols; ++i) da[begin * cols + i] += g[i];
               });
  return out;
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no parts");
  const int64_t cols = parts[0].dim(1);
  int64_t rows = 0;
  for (const Tensor& t : parts) {
    if (t.rank() != 2 || t.dim(1) != cols)
      throw ShapeError("concat_rows: column mismatch at shape " + shape_str(t.shape()));
    rows += t.dim(0);
  }
  std::vector<double> v;
  v.reserve(static_cast<size_t>(rows * cols));
  for (const Tensor& t : parts) v.insert(v.end(), t.values().begin(), t.values().end());
  Tensor out = make({rows, cols}, std::move(v));
  std::vector<DataPtr> inputs;
  for (const Tensor& t : parts) inputs.push_back(t.impl());
  maybe_record(inputs, out.impl(), [inputs, oi = out.impl()]() {
    if (!grad_ready(oi)) return;
    const double* g = oi->grad.data();
    size_t offset = 0;
    for (const auto& in : inputs) {
      const size_t n = in->values.size();
      if (in->requires_grad) {
        double* da = in->ensure_grad().data();
        for (size_t i = 0; i < n; ++i) da[i] += g[offset + i];
      }
      offset += n;
    }
  });
  return out;
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no parts");
  const int64_t rows = parts[0].dim(0);
  int64_t cols = 0;
  for (const Tensor& t : parts) {
    if (t.rank() != 2 || t.dim(0) != rows)
      throw ShapeError("concat_cols: row mismatch at shape " + shape_str(t.shape()));
    cols += t.dim(1);
  }
  std::vector<double> v(static_cast<size_t>(rows * cols));
  int64_t col_off = 0;
  for (const Tensor& t : parts) {
    const int64_t tc = t.dim(1);
    const double* p = t.data();
    for (int64_t i = 0; i < rows; ++i)
      std::copy(p + i * tc, p + (i + 1) * tc, v.begin() + i * cols + col_off);
    col_off += tc;
  }
  Tensor out = make({rows, cols}, std::move(v));
  std::vector<DataPtr> inputs;
  std::vector<int64_t> widths;
  for (const Tensor& t : parts) {
    inputs.push_back(t.impl());
    widths.push_back(t.dim(1));
  }
  maybe_record(inputs, out.impl(), [inputs, widths, oi = out.impl(), rows, cols]() {
    if (!grad_ready(oi)) return;
    const double* g = oi->grad.data();
    int64_t col_off = 0;
    for (size_t p = 0; p < inputs.size(); ++p) {
      const int64_t tc = widths[p];
      if (inputs[p]->requires_grad) {
        double* da = inputs[p]->ensure_grad().data();
        for (int64_t i = 0; i < rows; ++i)
          for (int64_t j = 0; j < tc; ++j) da[i * tc + j] += g[i * cols + col_off + j];
      }
      col_off += tc;
    }
  });
  return out;
}

// ---- row/column broadcast -------------------------------------------------

namespace {

void check_rows_vec(const Tensor& a, const Tensor& v, int64_t expect,
                    const char* who) {
  if (a.rank() != 2 || v.numel() != expect)
    throw ShapeError(std::string(who) + ": shapes " + shape_str(a.shape()) +
                     " and " + shape_str(v.shape()) + " incompatible");
}

}  // namespace

Tensor add_bias(const Tensor& a, const Tensor& bias) {
  check_rows_vec(a, bias, a.dim(1), "add_bias");
  const int64_t rows = a.dim(0), cols = a.dim(1);
  std::vector<double> v(a.values());
  const double* b = bias.data();
  for (int64_t i = 0; i < rows; ++i)
    for (int64_t j = 0; j < cols; ++j) v[static_cast<size_t>(i * cols + j)] += b[j];
  Tensor out = make(a.shape(), std::move(v));
  maybe_record({a.impl(), bias.impl()}, out.impl(),
               [ai = a.impl(), bi = bias.impl(), oi = out.impl(), rows, cols]() {
                 if (!grad_ready(oi)) return;
                 const double* g = oi->grad.data();
                 if (ai->requires_grad) {
                   double* da = ai->ensure_grad().data();
                   for (int64_t i = 0; i < rows * cols; ++i) da[i] += g[i];
                 }
                 if (bi->requires_grad) {
                   double* db = bi->ensure_grad().data();
                   for (int64_t i = 0; i < rows; ++i)
                     for (int64_t j = 0; j < cols; ++j) db[j] += g[i * cols + j];
                 }
               });
  return out;
}

Tensor scale_columns(const Tensor& a, const Tensor& g) {
  check_rows_vec(a, g, a.dim(1), "scale_columns");
  const int64_t rows = a.dim(0), cols = a.dim(1);
  std::vector<double> v(a.values());
  const double* s = g.data();
  for (int64_t i = 0; i < rows; ++i)
    for (int64_t j = 0; j < cols; ++j) v[static_cast<size_t>(i * cols + j)] *= s[j];
  Tensor out = make(a.shape(), std::move(v));
  maybe_record({a.impl(), g.impl()}, out.impl(),
               [ai = a.impl(), gi = g.impl(), oi = out.impl(), rows, cols]() {
                 if (!grad_ready(oi)) return;
                 const double* go = oi->grad.data();
                 const double* x = ai->values.data();
                 const double* s = gi->values.data();
                 if (ai->requires_grad) {
                   double* da = ai->ensure_grad().data();
                   for (int64_t i = 0; i < rows; ++i)
                     for (int64_t j = 0; j < cols; ++j) da[i * cols + j] += go[i * cols + j] * s[j];
                 }
                 if (gi->requires_grad) {
                   double* dg = gi->ensure_grad().data();
                   for (int64_t i = 0; i < rows; ++i)
                     for (int64_t j = 0; j < cols; ++j) dg[j] += go[i * cols + j] * x[i * cols + j];
                 }
               });
  return out;
}

Tensor row_div(const Tensor& a, const Tensor& s) {
  check_rows_vec(a, s, a.dim(0), "row_div");
  const int64_t rows = a.dim(0), cols = a.dim(1);
  const double* ps = s.data();
  for (int64_t i = 0; i < rows; ++i)
    if (ps[i] == 0.0) throw NumericError("row_div: zero divisor in row " + std::to_string(i));
  std::vector<double> v(a.values());
  for (int64_t i = 0; i < rows; ++i)
    for (int64_t j = 0; j < cols; ++j) v[static_cast<size_t>(i * cols + j)] /= ps[i];
  Tensor out = make(a.shape(), std::move(v));
  maybe_record({a.impl(), s.impl()}, out.impl(),
               [ai = a.impl(), si = s.impl(), oi = out.impl(), rows, cols]() {
                 if (!grad_ready(oi)) return;
                 const double* g = oi->grad.data();
                 const double* x = ai->values.data();
                 const double* sv = si->values.data();
                 if (ai->requires_grad) {
                   double* da = ai->ensure_grad().data();
                   for (int64_t i = 0; i < rows; ++i)
                     for (int64_t j = 0; j < cols; ++j) da[i * cols + j] += g[i * cols + j] / sv[i];
                 }
                 if (si->requires_grad) {
                   double* ds = si->ensure_grad().data();
                   for (int64_t i = 0; i < rows; ++i) {
                     double acc = 0.0;
                     for (int64_t j = 0; j < cols; ++j) acc += g[i * cols + j] * x[i * cols + j];
                     ds[i] += -acc / (sv[i] * sv[i]);
                   }
                 }
               });
  return out;
}

Tensor row_affine(const Tensor& a, const Tensor& scale, const Tensor& shift) {
  check_rows_vec(a, scale, a.dim(0), "row_affine");
  check_rows_vec(a, shift, a.dim(0), "row_affine");
  const int64_t rows = a.dim(0), cols = a.dim(1);
  std::vector<double> v(static_cast<size_t>(rows * cols));
  const double* x = a.data();
  const double* s = scale.data();
  const double* t = shift.data();
  for (int64_t i = 0; i < rows; ++i)
    for (int64_t j = 0; j < cols; ++j)
      v[static_cast<size_t>(i * cols + j)] = x[i * cols + j] * s[i] + t[i];
  Tensor out = make(a.shape(), std::move(v));
  maybe_record(
      {a.impl(), scale.impl(), shift.impl()}, out.impl(),
      [ai = a.impl(), si = scale.impl(), ti = shift.impl(), oi = out.impl(), rows, cols]() {
        if (!grad_ready(oi)) return;
        const double* g = oi->grad.data();
        const double* x = ai->values.data();
        const double* s = si->values.data();
        if (ai->requires_grad) {
          double* da = ai->ensure_grad().data();
          for (int64_t i = 0; i < rows; ++i)
            for (int64_t j = 0; j < cols; ++j) da[i * cols + j] += g[i * cols + j] * s[i];
        }
        if (si->requires_grad) {
          double* ds = si->ensure_grad().data();
          for (int64_t i = 0; i < rows; ++i) {
            double acc = 0.0;
            for (int64_t j = 0; j < cols; ++j) acc += g[i * cols + j] * x[i * cols + j];
            ds[i] += acc;
          }
        }
        if (ti->requires_grad) {
          double* dt = ti->ensure_grad().data();
          for (int64_t i = 0; i < rows; ++i) {
            double acc = 0.0;
            for (int64_t j = 0; j < cols; ++j) acc += g[i * cols + j];
            dt[i] += acc;
          }
        }
      });
  return out;
}

// ---- fused neural ops -----------------------------------------------------

Tensor softmax_rows(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("softmax_rows needs rank 2, got " + shape_str(a.shape()));
  const int64_t rows = a.dim(0), cols = a.dim(1);
  const double* p = a.data();
  for (int64_t i = 0; i < rows * cols; ++i)
    if (std::isnan(p[i]))
      throw NumericError("softmax_rows: NaN at flat index " + std::to_string(i));
  std::vector<double> v(static_cast<size_t>(rows * cols));
  for (int64_t i = 0; i < rows; ++i) {
    double mx = p[i * cols];
    for (int64_t j = 1; j < cols; ++j) mx = std::max(mx, p[i * cols + j]);
    double denom = 0.0;
    for (int64_t j = 0; j < cols; ++j) {
      const double e = std::exp(p[i * cols + j] - mx);
      v[static_cast<size_t>(i * cols + j)] = e;
      denom += e;
    }
    for (int64_t j = 0; j < cols; ++j) v[static_cast<size_t>(i * cols + j)] /= denom;
  }
  Tensor out = make(a.shape(), std::move(v));
  maybe_record({a.impl()}, out.impl(), [ai = a.impl(), oi = out.impl(), rows, cols]() {
    if (!grad_ready(oi)) return;
    const double* g = oi->grad.data();
    const double* w = oi->values.data();
    double* da = ai->ensure_grad().data();
    for (int64_t i = 0; i < rows; ++i) {
      double dot = 0.0;
      for (int64_t j = 0; j < cols; ++j) dot += g[i * cols + j] * w[i * cols + j];
      for (int64_t j = 0; j < cols; ++j)
        da[i * cols + j] += w[i * cols + j] * (g[i * cols + j] - dot);
    }
  });
  return out;
}

Tensor layernorm(const Tensor& a, const Tensor& gain, const Tensor& bias, double eps) {
  if (a.rank() < 1) throw ShapeError("layernorm needs rank >= 1");
  if (eps <= 0.0) throw NumericError("layernorm: eps must be > 0");
  const int64_t cols = a.dim(a.rank() - 1);
  if (gain.numel() != cols || bias.numel() != cols)
    throw ShapeError("layernorm: gain/bias length must equal last axis " + std::to_string(cols));
  const int64_t rows = a.numel() / cols;
  const double* x = a.data();
  const double* gm = gain.data();
  const double* bt = bias.data();
  std::vector<double> v(static_cast<size_t>(rows * cols));
  auto xhat = std::make_shared<std::vector<double>>(static_cast<size_t>(rows * cols));
  auto inv_std = std::make_shared<std::vector<double>>(static_cast<size_t>(rows));
  for (int64_t i = 0; i < rows; ++i) {
    double m = 0.0;
    for (int64_t j = 0; j < cols; ++j) m += x[i * cols + j];
    m /= static_cast<double>(cols);
    double var = 0.0;
    for (int64_t j = 0; j < cols; ++j) {
      const double d = x[i * cols + j] - m;
      var += d * d;
    }
    var /= static_cast<double>(cols);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[static_cast<size_t>(i)] = is;
    for (int64_t j = 0; j < cols; ++j) {
      const double xh = (x[i * cols + j] - m) * is;
      (*xhat)[static_cast<size_t>(i * cols + j)] = xh;
      v[static_cast<size_t>(i * cols + j)] = xh * gm[j] + bt[j];
    }
  }
  Tensor out = make(a.shape(), std::move(v));
  maybe_record(
      {a.impl(), gain.impl(), bias.impl()}, out.impl(),
      [ai = a.impl(), gi = gain.impl(), bi = bias.impl(), oi = out.impl(), xhat,
       inv_std, rows, cols]() {
        if (!grad_ready(oi)) return;
        const double* g = oi->grad.data();
        const double* gm = gi->values.data();
        if (gi->requires_grad) {
          double* dg = gi->ensure_grad().data();
          for (int64_t i = 0; i < rows; ++i)
            for (int64_t j = 0; j < cols; ++j)
              dg[j] += g[i * cols + j] * (*xhat)[static_cast<size_t>(i * cols + j)];
        }
        if (bi->requires_grad) {
          double* db = bi->ensure_grad().data();
          for (int64_t i = 0; i < rows; ++i)
            for (int64_t j = 0; j < cols; ++j) db[j] += g[i * cols + j];
        }
        if (ai->requires_grad) {
          double* da = ai->ensure_grad().data();
          for (int64_t i = 0; i < rows; ++i) {
            double mean_dxh = 0.0, mean_dxh_xh = 0.0;
            for (int64_t j = 0; j < cols; ++j) {
              const double dxh = g[i * cols + j] * gm[j];
              const double xh = (*xhat)[static_cast<size_t>(i * cols + j)];
              mean_dxh += dxh;
              mean_dxh_xh += dxh * xh;
            }
            mean_dxh /= static_cast<double>(cols);
            mean_dxh_xh /= static_cast<double>(cols);
            const double is = (*inv_std)[static_cast<size_t>(i)];
            for (int64_t j = 0; j < cols; ++j) {
              const double dxh = g[i * cols + j] * gm[j];
              const double xh = (*xhat)[static_cast<size_t>(i * cols + j)];
              da[i * cols + j] += is * (dxh - mean_dxh - xh * mean_dxh_xh);
            }
          }
        }
      });
  return out;
}

Tensor dropout(const Tensor& a, double rate, bool training, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0)
    throw NumericError("dropout: rate must be in [0, 1), got " + std::to_string(rate));
  if (!training || rate == 0.0) return a;
  const int64_t n = a.numel();
  const double keep_scale = 1.0 / (1.0 - rate);
  auto mask = std::make_shared<std::vector<double>>(static_cast<size_t>(n));
  const double* p = a.data();
  std::vector<double> v(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    const double m = rng.uniform() < rate ? 0.0 : keep_scale;
    (*mask)[static_cast<size_t>(i)] = m;
    v[static_cast<size_t>(i)] = p[i] * m;
  }
  Tensor out = make(a.shape(), std::move(v));
  maybe_record({a.impl()}, out.impl(), [ai = a.impl(), oi = out.impl(), mask, n]() {
    if (!grad_ready(oi)) return;
    const double* g = oi->grad.data();
    double* da = ai->ensure_grad().data();
    for (int64_t i = 0; i < n; ++i) da[i] += g[i] * (*mask)[static_cast<size_t>(i)];
  });
  return out;
}

}  // namespace crosstime
