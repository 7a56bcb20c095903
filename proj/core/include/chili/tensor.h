#ifndef CHILI_TENSOR_H_
#define CHILI_TENSOR_H_

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace chili {

using Shape = std::vector<std::size_t>;

std::size_t ShapeProduct(const Shape& shape);
std::string ShapeToString(const Shape& shape);

// Dense row-major array of 32-bit floats. Non-finite entries are rejected at
// construction, so every Tensor in the program is finite.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<float> data);

  static Tensor Zeros(Shape shape);
  // Rounds each value to float; rejects values that overflow.
  static Tensor FromDoubles(Shape shape, std::span<const double> values);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<const float> data() const { return data_; }
  float operator[](std::size_t flat) const { return data_[flat]; }

  // 2-D element access.
  float at(std::size_t r, std::size_t c) const {
    return data_[r * shape_[1] + c];
  }
  // Contiguous slice along the leading axis (row of a matrix, plane of a
  // 3-D array, ...).
  std::span<const float> slice(std::size_t index) const;

  // Same data, different shape with identical element count.
  Tensor Reshaped(Shape shape) const;

  friend bool operator==(const Tensor& a, const Tensor& b) = default;

 private:
  Shape shape_;
  std::vector<float> data_;
};

// A scalar map over the patch grid. Values are held in double precision so
// that splits such as `map - median(map)` add back bit-exactly.
class GridMap {
 public:
  GridMap() = default;
  GridMap(std::size_t rows, std::size_t cols, std::vector<double> values);

  static GridMap Constant(std::size_t rows, std::size_t cols, double value);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return values_.size(); }
  std::span<const double> values() const { return values_; }
  double at(std::size_t r, std::size_t c) const {
    return values_[r * cols_ + c];
  }
  double operator[](std::size_t flat) const { return values_[flat]; }

  bool SameShape(const GridMap& other) const {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }
  // Sum in row-major order.
  double Sum() const;
  double Mean() const;

  friend bool operator==(const GridMap& a, const GridMap& b) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> values_;
};

GridMap operator+(const GridMap& a, const GridMap& b);
GridMap operator-(const GridMap& a, const GridMap& b);
GridMap operator*(double scale, const GridMap& m);

// Standard matrix product; 64-bit accumulation in fixed index order.
Tensor MatMul(const Tensor& a, const Tensor& b);

Tensor Transpose(const Tensor& a);

// a + 1 * bias^T: adds `bias` to every row of a matrix.
Tensor AddRowVector(const Tensor& a, const Tensor& bias);

// LayerNorm applied independently to each row of a matrix.
Tensor LayerNormRows(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                     double eps);

// Row-wise softmax with max subtraction.
Tensor SoftmaxRows(const Tensor& a);

double Gelu(double x);
double QuickGelu(double x);
// Exact erf form x * Phi(x).
Tensor Gelu(const Tensor& x);

// LayerNorm whose normalization statistics come from a total vector x but
// which can be applied to any additive part of x:
//   part -> gamma * (part - mean(part)) / sigma,  sigma = sqrt(var(x) + eps).
// Summing the normalized parts and adding beta reproduces LayerNorm(x).
class AdditiveLayerNorm {
 public:
  AdditiveLayerNorm(std::span<const double> total, std::span<const float> gamma,
                    double eps);
  // Rebuilds the fold from recorded statistics.
  AdditiveLayerNorm(double sigma, std::span<const float> gamma);

  std::size_t width() const { return gamma_.size(); }
  double sigma() const { return sigma_; }
  double total_mean() const { return total_mean_; }

  std::vector<double> NormalizePart(std::span<const double> part) const;
  std::vector<double> NormalizePart(std::span<const float> part) const;

  // Applies the fold to every column of a width x k matrix given row-major,
  // i.e. returns diag(gamma/sigma) (I - 11^T/width) M.
  std::vector<double> FoldColumns(std::span<const double> matrix,
                                  std::size_t cols) const;

 private:
  std::vector<double> gamma_;
  double sigma_ = 1.0;
  double total_mean_ = 0.0;
};

struct LayerNormSplit {
  std::vector<Tensor> normalized_parts;
  Tensor beta_term;
};

// Splits LayerNorm(sum(parts)) into one normalized term per part plus beta.
LayerNormSplit LayerNormAdditive(std::span<const Tensor> parts,
                                 const Tensor& gamma, const Tensor& beta,
                                 double eps);

// 3x3 median with edge-replication padding.
GridMap MedianFilter2d(const GridMap& m);

}  // namespace chili

#endif  // CHILI_TENSOR_H_
