#include "lsst/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "lsst/errors.hpp"
#include "lsst/instrumentation.hpp"

namespace lsst {
namespace {

std::size_t element_count(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_string(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

}  // namespace

std::size_t precision_bytes(Precision p) { return p == Precision::kSingle ? 4 : 8; }

std::string to_string(Precision p) { return p == Precision::kSingle ? "single" : "double"; }

Precision parse_precision(const std::string& s) {
  if (s == "double" || s == "f64") return Precision::kDouble;
  if (s == "single" || s == "f32") return Precision::kSingle;
  throw ConfigError("unknown precision '" + s + "'");
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, Precision precision)
    : shape_(std::move(shape)), precision_(precision) {
  if (shape_.empty() || shape_.size() > 3) {
    throw ShapeError("tensor rank must be 1..3, got " + shape_string(shape_));
  }
  data_.assign(element_count(shape_), 0.0);
}

Tensor::Tensor(Shape shape, std::vector<double> values, Precision precision)
    : shape_(std::move(shape)), data_(std::move(values)), precision_(precision) {
  if (shape_.empty() || shape_.size() > 3) {
    throw ShapeError("tensor rank must be 1..3, got " + shape_string(shape_));
  }
  if (element_count(shape_) != data_.size()) {
    throw ShapeError("tensor " + shape_string(shape_) + " given " + std::to_string(data_.size()) +
                     " values");
  }
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows,
                      Precision precision) {
  const std::size_t n = rows.size();
  const std::size_t m = n ? rows.begin()->size() : 0;
  std::vector<double> values;
  values.reserve(n * m);
  for (const auto& row : rows) {
    if (row.size() != m) throw ShapeError("ragged matrix literal");
    values.insert(values.end(), row.begin(), row.end());
  }
  return Tensor({n, m}, std::move(values), precision);
}

Tensor Tensor::vector(std::initializer_list<double> values, Precision precision) {
  return Tensor({values.size()}, std::vector<double>(values), precision);
}

Tensor Tensor::filled(Shape shape, double value, Precision precision) {
  Tensor t(std::move(shape), precision);
  std::fill(t.data_.begin(), t.data_.end(), value);
  return t;
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size()) throw ShapeError("axis out of range for " + shape_string(shape_));
  return shape_[axis];
}

std::size_t Tensor::rows() const {
  require_rank(*this, 2, "rows");
  return shape_[0];
}

std::size_t Tensor::cols() const {
  require_rank(*this, 2, "cols");
  return shape_[1];
}

Tensor Tensor::reshaped(Shape shape) const {
  return Tensor(std::move(shape), data_, precision_);
}

bool operator==(const Tensor& a, const Tensor& b) {
  if (a.shape_ != b.shape_ || a.precision_ != b.precision_) return false;
  // Bitwise, so that -0.0 != 0.0 and identical NaN payloads compare equal.
  return std::equal(a.data_.begin(), a.data_.end(), b.data_.begin(), [](double x, double y) {
    return std::bit_cast<std::uint64_t>(x) == std::bit_cast<std::uint64_t>(y);
  });
}

Mask Mask::all(std::size_t rows, std::size_t cols) {
  return Mask{rows, cols, std::vector<std::uint8_t>(rows * cols, 1)};
}

Mask Mask::causal(std::size_t rows, std::size_t cols, std::size_t row_offset) {
  Mask m{rows, cols, std::vector<std::uint8_t>(rows * cols, 0)};
  for (std::size_t i = 0; i < rows; ++i) {
    const std::size_t last = std::min(cols, row_offset + i + 1);
    for (std::size_t j = 0; j < last; ++j) m.allowed[i * cols + j] = 1;
  }
  return m;
}

void check_finite(const Tensor& t, const char* what) {
  for (double v : t.values()) {
    if (!std::isfinite(v)) throw NumericError(std::string(what) + ": non-finite value");
  }
}

Tensor finalize(Tensor t) {
  if (t.precision() == Precision::kSingle) {
    for (double& v : t.values()) v = static_cast<double>(static_cast<float>(v));
  }
  check_finite(t, "kernel output");
  return t;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw ShapeError("matmul: inner dimensions differ " + shape_string(a.shape()) + " * " +
                     shape_string(b.shape()));
  }
  Tensor c({m, n}, a.precision());
  const double* pa = a.data();
  const double* pb = b.data();
  double* pc = c.data();
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = pc + i * n;
    for (std::size_t t = 0; t < k; ++t) {
      const double av = pa[i * k + t];
      const double* brow = pb + t * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  count_flops(2 * m * k * n);
  return finalize(std::move(c));
}

Tensor matmul_transposed(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul_transposed");
  require_rank(b, 2, "matmul_transposed");
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  if (b.cols() != k) {
    throw ShapeError("matmul_transposed: inner dimensions differ " + shape_string(a.shape()) +
                     " * " + shape_string(b.shape()) + "^T");
  }
  Tensor c({m, n}, a.precision());
  const double* pa = a.data();
  const double* pb = b.data();
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = pa + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = pb + j * k;
      double acc = 0.0;
      for (std::size_t t = 0; t < k; ++t) acc += arow[t] * brow[t];
      c(i, j) = acc;
    }
  }
  count_flops(2 * m * k * n);
  return finalize(std::move(c));
}

Tensor transposed_matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "transposed_matmul");
  require_rank(b, 2, "transposed_matmul");
  const std::size_t k = a.rows(), m = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw ShapeError("transposed_matmul: inner dimensions differ " + shape_string(a.shape()) +
                     "^T * " + shape_string(b.shape()));
  }
  Tensor c({m, n}, a.precision());
  const double* pa = a.data();
  const double* pb = b.data();
  double* pc = c.data();
  for (std::size_t t = 0; t < k; ++t) {
    const double* brow = pb + t * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = pa[t * m + i];
      double* crow = pc + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  count_flops(2 * m * k * n);
  return finalize(std::move(c));
}

Tensor transpose(const Tensor& a) {
  require_rank(a, 2, "transpose");
  const std::size_t m = a.rows(), n = a.cols();
  Tensor b({n, m}, a.precision());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) b(j, i) = a(i, j);
  return b;
}

Tensor softmax_rows(const Tensor& a, const std::optional<Mask>& mask) {
  require_rank(a, 2, "softmax_rows");
  const std::size_t m = a.rows(), n = a.cols();
  if (mask && (mask->rows != m || mask->cols != n)) {
    throw ShapeError("softmax_rows: mask shape differs from " + shape_string(a.shape()));
  }
  Tensor out({m, n}, a.precision());
  for (std::size_t i = 0; i < m; ++i) {
    double row_max = -std::numeric_limits<double>::infinity();
    bool any = false;
    for (std::size_t j = 0; j < n; ++j) {
      if (mask && !(*mask)(i, j)) continue;
      row_max = std::max(row_max, a(i, j));
      any = true;
    }
    if (!any) throw DegenerateRowError("softmax_rows: row " + std::to_string(i) + " fully masked");
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (mask && !(*mask)(i, j)) continue;
      const double e = std::exp(a(i, j) - row_max);
      out(i, j) = e;
      total += e;
    }
    for (std::size_t j = 0; j < n; ++j) out(i, j) /= total;
  }
  return finalize(std::move(out));
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c[i] += b[i];
  return finalize(std::move(c));
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Tensor c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c[i] -= b[i];
  return finalize(std::move(c));
}

Tensor hadamard(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "hadamard");
  Tensor c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c[i] *= b[i];
  return finalize(std::move(c));
}

Tensor scale(const Tensor& a, double alpha) {
  Tensor c = a;
  for (double& v : c.values()) v *= alpha;
  return finalize(std::move(c));
}

void add_inplace(Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add_inplace");
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
  a = finalize(std::move(a));
}

void axpy_inplace(Tensor& a, double alpha, const Tensor& b) {
  require_same_shape(a, b, "axpy_inplace");
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += alpha * b[i];
  a = finalize(std::move(a));
}

Tensor column_sum(const Tensor& a) {
  require_rank(a, 2, "column_sum");
  const std::size_t m = a.rows(), n = a.cols();
  Tensor out({n}, a.precision());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j] += a(i, j);
  return finalize(std::move(out));
}

Tensor add_row_vector(const Tensor& a, const Tensor& v) {
  require_rank(a, 2, "add_row_vector");
  require_rank(v, 1, "add_row_vector");
  if (v.size() != a.cols()) {
    throw ShapeError("add_row_vector: " + shape_string(a.shape()) + " + " + shape_string(v.shape()));
  }
  Tensor c = a;
  const std::size_t n = a.cols();
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < n; ++j) c(i, j) += v[j];
  return finalize(std::move(c));
}

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
  require_rank(a, 2, "slice_rows");
  if (begin > end || end > a.rows()) throw IndexError("slice_rows: range out of bounds");
  const std::size_t n = a.cols();
  std::vector<double> values(a.data() + begin * n, a.data() + end * n);
  return Tensor({end - begin, n}, std::move(values), a.precision());
}

Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
  require_rank(a, 2, "slice_cols");
  if (begin > end || end > a.cols()) throw IndexError("slice_cols: range out of bounds");
  Tensor out({a.rows(), end - begin}, a.precision());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = begin; j < end; ++j) out(i, j - begin) = a(i, j);
  return out;
}

void set_cols(Tensor& dst, std::size_t begin, const Tensor& src) {
  require_rank(dst, 2, "set_cols");
  require_rank(src, 2, "set_cols");
  if (src.rows() != dst.rows() || begin + src.cols() > dst.cols()) {
    throw ShapeError("set_cols: " + shape_string(src.shape()) + " does not fit " +
                     shape_string(dst.shape()));
  }
  for (std::size_t i = 0; i < src.rows(); ++i)
    for (std::size_t j = 0; j < src.cols(); ++j) dst(i, begin + j) = src(i, j);
}

namespace {

// Splits a shape around `axis` into (outer, extent, inner) element counts.
struct AxisLayout {
  std::size_t outer = 1;
  std::size_t extent = 1;
  std::size_t inner = 1;
};

AxisLayout layout_of(const Shape& shape, std::size_t axis) {
  AxisLayout l;
  for (std::size_t d = 0; d < axis; ++d) l.outer *= shape[d];
  l.extent = shape[axis];
  for (std::size_t d = axis + 1; d < shape.size(); ++d) l.inner *= shape[d];
  return l;
}

}  // namespace

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no parts");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw ShapeError("concat: axis out of range");
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != first.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t d = 0; d < first.size(); ++d) {
      if (d != axis && p.shape()[d] != first[d]) {
        throw ShapeError("concat: " + shape_string(p.shape()) + " vs " + shape_string(first));
      }
    }
    out_shape[axis] += p.shape()[axis];
  }
  Tensor out(out_shape, parts.front().precision());
  const AxisLayout ol = layout_of(out_shape, axis);
  std::size_t offset = 0;
  for (const Tensor& p : parts) {
    const AxisLayout pl = layout_of(p.shape(), axis);
    for (std::size_t o = 0; o < pl.outer; ++o) {
      const double* src = p.data() + o * pl.extent * pl.inner;
      double* dst = out.data() + (o * ol.extent + offset) * ol.inner;
      std::copy(src, src + pl.extent * pl.inner, dst);
    }
    offset += pl.extent;
  }
  return out;
}

std::vector<Tensor> split(const Tensor& a, std::size_t axis, std::size_t parts) {
  if (parts == 0 || axis >= a.rank()) throw ShapeError("split: bad axis or part count");
  if (a.shape()[axis] % parts != 0) {
    throw ShapeError("split: dimension " + std::to_string(a.shape()[axis]) +
                     " not divisible by " + std::to_string(parts));
  }
  const AxisLayout al = layout_of(a.shape(), axis);
  const std::size_t chunk = al.extent / parts;
  Shape part_shape = a.shape();
  part_shape[axis] = chunk;
  std::vector<Tensor> out;
  out.reserve(parts);
  for (std::size_t p = 0; p < parts; ++p) {
    Tensor t(part_shape, a.precision());
    for (std::size_t o = 0; o < al.outer; ++o) {
      const double* src = a.data() + (o * al.extent + p * chunk) * al.inner;
      std::copy(src, src + chunk * al.inner, t.data() + o * chunk * al.inner);
    }
    out.push_back(std::move(t));
  }
  return out;
}

Tensor stack(std::span<const Tensor> mats) {
  if (mats.empty()) throw ShapeError("stack: no matrices");
  const Shape& s = mats.front().shape();
  if (s.size() != 2) throw ShapeError("stack: expects matrices");
  Tensor out({mats.size(), s[0], s[1]}, mats.front().precision());
  std::size_t offset = 0;
  for (const Tensor& m : mats) {
    if (m.shape() != s) throw ShapeError("stack: shape mismatch");
    std::copy(m.data(), m.data() + m.size(), out.data() + offset);
    offset += m.size();
  }
  return out;
}

Tensor unstack_at(const Tensor& a, std::size_t index) {
  require_rank(a, 3, "unstack_at");
  if (index >= a.dim(0)) throw IndexError("unstack_at: index out of range");
  const std::size_t n = a.dim(1) * a.dim(2);
  std::vector<double> values(a.data() + index * n, a.data() + (index + 1) * n);
  return Tensor({a.dim(1), a.dim(2)}, std::move(values), a.precision());
}

double dot(const Tensor& a, const Tensor& b) {
  if (a.size() != b.size()) throw ShapeError("dot: size mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

double sum(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.values()) acc += v;
  return acc;
}

double max_abs(const Tensor& a) {
  double m = 0.0;
  for (double v : a.values()) m = std::max(m, std::abs(v));
  return m;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace lsst
