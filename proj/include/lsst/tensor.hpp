#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace lsst {

// Storage precision of a tensor. Arithmetic is carried out in double; with
// kSingle every kernel rounds its stored results to float.
enum class Precision : std::uint8_t { kDouble, kSingle };

std::size_t precision_bytes(Precision p);
std::string to_string(Precision p);
Precision parse_precision(const std::string& s);

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);

// Dense row-major array of rank 1 to 3.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, Precision precision = Precision::kDouble);
  Tensor(Shape shape, std::vector<double> values,
         Precision precision = Precision::kDouble);

  // Row-wise literal, mostly for tests: Tensor::matrix({{1, 2}, {3, 4}}).
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows,
                       Precision precision = Precision::kDouble);
  static Tensor vector(std::initializer_list<double> values,
                       Precision precision = Precision::kDouble);
  static Tensor filled(Shape shape, double value,
                       Precision precision = Precision::kDouble);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  Precision precision() const { return precision_; }

  // Matrix accessors; valid for rank-2 tensors.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& operator()(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
  double& operator()(std::size_t i, std::size_t j, std::size_t k) {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  double operator()(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }

  // Same data, new shape with an equal element count.
  Tensor reshaped(Shape shape) const;

  // Bitwise equality of shape, precision and values.
  friend bool operator==(const Tensor& a, const Tensor& b);

 private:
  Shape shape_;
  std::vector<double> data_;
  Precision precision_ = Precision::kDouble;
};

// Allowed-entry mask for softmax_rows; 1 keeps the score, 0 masks it out.
struct Mask {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> allowed;

  static Mask all(std::size_t rows, std::size_t cols);
  // Row i (global position row_offset + i) may attend to keys j <= row_offset + i.
  static Mask causal(std::size_t rows, std::size_t cols, std::size_t row_offset);
  bool operator()(std::size_t i, std::size_t j) const { return allowed[i * cols + j] != 0; }
};

// Rounds to the tensor's precision and rejects NaN/Inf. Every kernel below
// passes its result through here.
Tensor finalize(Tensor t);
void check_finite(const Tensor& t, const char* what);

// c[i][j] = sum_t a[i][t] * b[t][j], t ascending.
Tensor matmul(const Tensor& a, const Tensor& b);
// a * b^T without materializing the transpose.
Tensor matmul_transposed(const Tensor& a, const Tensor& b);
// a^T * b, summing over rows of a and b in ascending order.
Tensor transposed_matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

// Row softmax with per-row max subtraction. Masked entries come out as 0.
Tensor softmax_rows(const Tensor& a, const std::optional<Mask>& mask = std::nullopt);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor hadamard(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double alpha);
// a += b (shapes must agree).
void add_inplace(Tensor& a, const Tensor& b);
// a += alpha * b.
void axpy_inplace(Tensor& a, double alpha, const Tensor& b);

// Column sums of a matrix: out[j] = sum_i a[i][j], i ascending.
Tensor column_sum(const Tensor& a);
// Adds a vector to every row of a matrix.
Tensor add_row_vector(const Tensor& a, const Tensor& v);

// Rows [begin, end) of a matrix.
Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end);
// Columns [begin, end) of a matrix.
Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end);
// Writes src into columns [begin, begin + src.cols()) of dst.
void set_cols(Tensor& dst, std::size_t begin, const Tensor& src);

// Concatenation / split along an arbitrary axis. Parts must agree on every
// other axis.
Tensor concat(std::span<const Tensor> parts, std::size_t axis);
std::vector<Tensor> split(const Tensor& a, std::size_t axis, std::size_t parts);

// Stack equal-shape matrices into a rank-3 tensor and back.
Tensor stack(std::span<const Tensor> mats);
Tensor unstack_at(const Tensor& a, std::size_t index);

double dot(const Tensor& a, const Tensor& b);
double sum(const Tensor& a);
double max_abs(const Tensor& a);
double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace lsst
