#include "chili/tensor.h"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "chili/error.h"

namespace chili {

std::size_t ShapeProduct(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string ShapeToString(const Shape& shape) {
  std::ostringstream out;
  out << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ",";
    out << shape[i];
  }
  out << "]";
  return out.str();
}

Tensor::Tensor(Shape shape, std::vector<float> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (ShapeProduct(shape_) != data_.size()) {
    throw ValidationError("tensor shape " + ShapeToString(shape_) +
                          " does not match " + std::to_string(data_.size()) +
                          " values");
  }
  for (std::size_t i = 0; i < data_.size(); ++i) {
    if (!std::isfinite(data_[i])) {
      throw ValidationError("tensor contains a non-finite value at index " +
                            std::to_string(i));
    }
  }
}

Tensor Tensor::Zeros(Shape shape) {
  const std::size_t n = ShapeProduct(shape);
  return Tensor(std::move(shape), std::vector<float>(n, 0.0f));
}

Tensor Tensor::FromDoubles(Shape shape, std::span<const double> values) {
  std::vector<float> data(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    data[i] = static_cast<float>(values[i]);
  }
  return Tensor(std::move(shape), std::move(data));
}

std::span<const float> Tensor::slice(std::size_t index) const {
  if (shape_.empty() || index >= shape_[0]) {
    throw ValidationError("slice index out of range");
  }
  const std::size_t stride = data_.size() / shape_[0];
  return std::span<const float>(data_).subspan(index * stride, stride);
}

Tensor Tensor::Reshaped(Shape shape) const {
  return Tensor(std::move(shape), data_);
}

GridMap::GridMap(std::size_t rows, std::size_t cols, std::vector<double> values)
    : rows_(rows), cols_(cols), values_(std::move(values)) {
  if (rows_ * cols_ != values_.size()) {
    throw ValidationError("grid map " + std::to_string(rows_) + "x" +
                          std::to_string(cols_) + " does not match " +
                          std::to_string(values_.size()) + " values");
  }
  for (double v : values_) {
    if (!std::isfinite(v)) {
      throw ValidationError("grid map contains a non-finite value");
    }
  }
}

GridMap GridMap::Constant(std::size_t rows, std::size_t cols, double value) {
  return GridMap(rows, cols, std::vector<double>(rows * cols, value));
}

double GridMap::Sum() const {
  double s = 0.0;
  for (double v : values_) s += v;
  return s;
}

double GridMap::Mean() const {
  if (values_.empty()) return 0.0;
  return Sum() / static_cast<double>(values_.size());
}

namespace {

void RequireSameShape(const GridMap& a, const GridMap& b) {
  if (!a.SameShape(b)) {
    throw ValidationError("grid map shapes differ");
  }
}

}  // namespace

GridMap operator+(const GridMap& a, const GridMap& b) {
  RequireSameShape(a, b);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return GridMap(a.rows(), a.cols(), std::move(out));
}

GridMap operator-(const GridMap& a, const GridMap& b) {
  RequireSameShape(a, b);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return GridMap(a.rows(), a.cols(), std::move(out));
}

GridMap operator*(double scale, const GridMap& m) {
  std::vector<double> out(m.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = scale * m[i];
  return GridMap(m.rows(), m.cols(), std::move(out));
}

Tensor MatMul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ValidationError("matmul shape mismatch: " +
                          ShapeToString(a.shape()) + " x " +
                          ShapeToString(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> acc(m * n, 0.0);
  const auto ad = a.data();
  const auto bd = b.data();
  for (std::size_t i = 0; i < m; ++i) {
    double* row = acc.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ad[i * k + p];
      const float* brow = bd.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
  return Tensor::FromDoubles({m, n}, acc);
}

Tensor Transpose(const Tensor& a) {
  if (a.rank() != 2) throw ValidationError("transpose expects a matrix");
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<float> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a[i * n + j];
  }
  return Tensor({n, m}, std::move(out));
}

Tensor AddRowVector(const Tensor& a, const Tensor& bias) {
  if (a.rank() != 2 || bias.size() != a.dim(1)) {
    throw ValidationError("add_row_vector shape mismatch: " +
                          ShapeToString(a.shape()) + " + " +
                          ShapeToString(bias.shape()));
  }
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<float> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      out[i * n + j] = static_cast<float>(static_cast<double>(a[i * n + j]) +
                                          static_cast<double>(bias[j]));
    }
  }
  return Tensor(a.shape(), std::move(out));
}

Tensor LayerNormRows(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                     double eps) {
  if (x.rank() != 2 || gamma.size() != x.dim(1) || beta.size() != x.dim(1)) {
    throw ValidationError("layer norm shape mismatch");
  }
  const std::size_t m = x.dim(0), n = x.dim(1);
  std::vector<float> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    auto row = x.slice(i);
    double mean = 0.0;
    for (float v : row) mean += v;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (float v : row) var += (v - mean) * (v - mean);
    var /= static_cast<double>(n);
    const double sigma = std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      out[i * n + j] = static_cast<float>(gamma[j] * (row[j] - mean) / sigma +
                                          beta[j]);
    }
  }
  return Tensor(x.shape(), std::move(out));
}

Tensor SoftmaxRows(const Tensor& a) {
  if (a.rank() != 2) throw ValidationError("softmax_rows expects a matrix");
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<float> out(m * n);
  std::vector<double> e(n);
  for (std::size_t i = 0; i < m; ++i) {
    auto row = a.slice(i);
    const double mx = *std::max_element(row.begin(), row.end());
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      e[j] = std::exp(static_cast<double>(row[j]) - mx);
      total += e[j];
    }
    for (std::size_t j = 0; j < n; ++j) {
      out[i * n + j] = static_cast<float>(e[j] / total);
    }
  }
  return Tensor(a.shape(), std::move(out));
}

double Gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

double QuickGelu(double x) { return x / (1.0 + std::exp(-1.702 * x)); }

Tensor Gelu(const Tensor& x) {
  std::vector<float> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = static_cast<float>(Gelu(static_cast<double>(x[i])));
  }
  return Tensor(x.shape(), std::move(out));
}

AdditiveLayerNorm::AdditiveLayerNorm(std::span<const double> total,
                                     std::span<const float> gamma, double eps)
    : gamma_(gamma.begin(), gamma.end()) {
  if (total.size() != gamma.size() || total.empty()) {
    throw ValidationError("layer norm width mismatch");
  }
  const double d = static_cast<double>(total.size());
  double mean = 0.0;
  for (double v : total) mean += v;
  mean /= d;
  double var = 0.0;
  for (double v : total) var += (v - mean) * (v - mean);
  var /= d;
  total_mean_ = mean;
  sigma_ = std::sqrt(var + eps);
}

AdditiveLayerNorm::AdditiveLayerNorm(double sigma, std::span<const float> gamma)
    : gamma_(gamma.begin(), gamma.end()), sigma_(sigma) {
  if (!(sigma > 0.0)) throw ValidationError("layer norm sigma must be > 0");
}

std::vector<double> AdditiveLayerNorm::NormalizePart(
    std::span<const double> part) const {
  if (part.size() != gamma_.size()) {
    throw ValidationError("layer norm width mismatch");
  }
  double mean = 0.0;
  for (double v : part) mean += v;
  mean /= static_cast<double>(part.size());
  std::vector<double> out(part.size());
  for (std::size_t i = 0; i < part.size(); ++i) {
    out[i] = gamma_[i] * (part[i] - mean) / sigma_;
  }
  return out;
}

std::vector<double> AdditiveLayerNorm::NormalizePart(
    std::span<const float> part) const {
  std::vector<double> widened(part.begin(), part.end());
  return NormalizePart(std::span<const double>(widened));
}

std::vector<double> AdditiveLayerNorm::FoldColumns(
    std::span<const double> matrix, std::size_t cols) const {
  const std::size_t rows = gamma_.size();
  if (matrix.size() != rows * cols) {
    throw ValidationError("layer norm fold: matrix shape mismatch");
  }
  std::vector<double> col_mean(cols, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) col_mean[c] += matrix[r * cols + c];
  }
  for (double& v : col_mean) v /= static_cast<double>(rows);
  std::vector<double> out(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    const double g = gamma_[r] / sigma_;
    for (std::size_t c = 0; c < cols; ++c) {
      out[r * cols + c] = g * (matrix[r * cols + c] - col_mean[c]);
    }
  }
  return out;
}

LayerNormSplit LayerNormAdditive(std::span<const Tensor> parts,
                                 const Tensor& gamma, const Tensor& beta,
                                 double eps) {
  if (parts.empty()) throw ValidationError("layer_norm_additive: no parts");
  const std::size_t d = gamma.size();
  if (beta.size() != d) throw ValidationError("layer_norm_additive: beta width");
  std::vector<double> total(d, 0.0);
  for (const Tensor& p : parts) {
    if (p.size() != d) {
      throw ValidationError("layer_norm_additive: part width mismatch");
    }
    for (std::size_t i = 0; i < d; ++i) total[i] += p[i];
  }
  const AdditiveLayerNorm ln(total, gamma.data(), eps);
  LayerNormSplit split;
  split.normalized_parts.reserve(parts.size());
  for (const Tensor& p : parts) {
    split.normalized_parts.push_back(
        Tensor::FromDoubles({d}, ln.NormalizePart(p.data())));
  }
  split.beta_term = Tensor({d}, std::vector<float>(beta.data().begin(),
                                                   beta.data().end()));
  return split;
}

GridMap MedianFilter2d(const GridMap& m) {
  const std::size_t rows = m.rows(), cols = m.cols();
  if (rows == 0 || cols == 0) return m;
  auto clamp = [](long v, std::size_t n) {
    return static_cast<std::size_t>(std::clamp<long>(v, 0, static_cast<long>(n) - 1));
  };
  std::vector<double> out(m.size());
  std::array<double, 9> window{};
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      std::size_t k = 0;
      for (long dr = -1; dr <= 1; ++dr) {
        for (long dc = -1; dc <= 1; ++dc) {
          window[k++] = m.at(clamp(static_cast<long>(r) + dr, rows),
                             clamp(static_cast<long>(c) + dc, cols));
        }
      }
      std::nth_element(window.begin(), window.begin() + 4, window.end());
      out[r * cols + c] = window[4];
    }
  }
  return GridMap(rows, cols, std::move(out));
}

}  // namespace chili
