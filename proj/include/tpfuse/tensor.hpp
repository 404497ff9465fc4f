#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace tpfuse {

/// Thrown on any dimension disagreement. The message always carries the
/// offending shapes.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Dense rank-3 tensor (batch, sequence, feature), double precision,
/// row-major with sequence as the middle axis. Sequence slices are therefore
/// contiguous strides within each batch row.
class Tensor {
 public:
  Tensor() = default;
  Tensor(int64_t batch, int64_t seq, int64_t feat);  // zero-filled

  static Tensor filled(int64_t batch, int64_t seq, int64_t feat, double value);

  int64_t batch() const { return batch_; }
  int64_t seq() const { return seq_; }
  int64_t feat() const { return feat_; }
  int64_t size() const { return static_cast<int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  double& operator()(int64_t b, int64_t s, int64_t d) {
    return data_[(b * seq_ + s) * feat_ + d];
  }
  double operator()(int64_t b, int64_t s, int64_t d) const {
    return data_[(b * seq_ + s) * feat_ + d];
  }

  std::vector<double>& raw() { return data_; }
  const std::vector<double>& raw() const { return data_; }

  bool same_shape(const Tensor& other) const {
    return batch_ == other.batch_ && seq_ == other.seq_ && feat_ == other.feat_;
  }
  std::string shape_str() const;
  bool all_finite() const;

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.same_shape(b) && a.data_ == b.data_;
  }

 private:
  int64_t batch_ = 0, seq_ = 0, feat_ = 0;
  std::vector<double> data_;
};

/// Dense 2-D weight matrix, row-major.
class Matrix {
 public:
  Matrix() = default;
  Matrix(int64_t rows, int64_t cols);  // zero-filled

  static Matrix identity(int64_t n);

  int64_t rows() const { return rows_; }
  int64_t cols() const { return cols_; }

  double& operator()(int64_t r, int64_t c) { return data_[r * cols_ + c]; }
  double operator()(int64_t r, int64_t c) const { return data_[r * cols_ + c]; }

  std::vector<double>& raw() { return data_; }
  const std::vector<double>& raw() const { return data_; }

  std::string shape_str() const;

  friend bool operator==(const Matrix& a, const Matrix& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

 private:
  int64_t rows_ = 0, cols_ = 0;
  std::vector<double> data_;
};

/// Per-batch-row matrix product: (B,S,Din) x (Din,Dout) -> (B,S,Dout).
Tensor matmul(const Tensor& x, const Matrix& w);

/// Batched matrix product: (G,M,K) x (G,K,N) -> (G,M,N).
Tensor bmm(const Tensor& a, const Tensor& b);

/// Batched product against the transpose: (G,M,K) x (G,N,K) -> (G,M,N).
Tensor bmm_nt(const Tensor& a, const Tensor& b);

/// Row softmax over the last axis, stabilized by max-subtraction.
/// Every output row sums to 1 within 1e-12.
Tensor softmax_rows(const Tensor& scores);

/// Splits the sequence axis into n equal slices, in position order.
std::vector<Tensor> split_seq(const Tensor& x, int n);

/// Concatenates along the sequence axis, in list order.
Tensor concat_seq(const std::vector<Tensor>& parts);

/// Concatenates along the feature axis, in list order.
Tensor concat_feat(const std::vector<Tensor>& parts);

/// Element-wise dst += src. Shapes must match exactly.
void accumulate(Tensor& dst, const Tensor& src);

/// Applies fn to every element, returning a new tensor.
Tensor map_elements(const Tensor& x, const std::function<double(double)>& fn);

/// Multiplies every element by s.
Tensor scaled(Tensor x, double s);

/// Deterministic integer-valued test data in [lo, hi), seeded.
Tensor randint_fill(int64_t batch, int64_t seq, int64_t feat, int lo, int hi,
                    uint64_t seed);

/// Deterministic integer-valued weights in [lo, hi), seeded.
Matrix randint_matrix(int64_t rows, int64_t cols, int lo, int hi,
                      uint64_t seed);

/// (B,S,D) -> (B*heads, S, D/heads): feature blocks become head rows.
Tensor split_heads(const Tensor& x, int heads);

/// (B*heads, S, Dh) -> (B, S, heads*Dh): inverse of split_heads.
Tensor merge_heads(const Tensor& x, int heads);

/// Largest element-wise absolute difference. Shapes must match.
double max_abs_diff(const Tensor& a, const Tensor& b);

/// max|got - want| normalized by the largest magnitude in want
/// (absolute difference when want is identically zero).
double rel_deviation(const Tensor& got, const Tensor& want);

}  // namespace tpfuse
