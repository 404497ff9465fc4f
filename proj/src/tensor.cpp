#include "tpfuse/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

namespace tpfuse {

namespace {

void require_positive_dims(int64_t batch, int64_t seq, int64_t feat) {
  if (batch < 1 || seq < 1 || feat < 1) {
    std::ostringstream os;
    os << "tensor dimensions must be positive, got (" << batch << "," << seq
       << "," << feat << ")";
    throw ShapeError(os.str());
  }
}

}  // namespace

Tensor::Tensor(int64_t batch, int64_t seq, int64_t feat)
    : batch_(batch), seq_(seq), feat_(feat) {
  require_positive_dims(batch, seq, feat);
  data_.assign(static_cast<size_t>(batch * seq * feat), 0.0);
}

Tensor Tensor::filled(int64_t batch, int64_t seq, int64_t feat, double value) {
  Tensor t(batch, seq, feat);
  std::fill(t.data_.begin(), t.data_.end(), value);
  return t;
}

std::string Tensor::shape_str() const {
  std::ostringstream os;
  os << "(" << batch_ << "," << seq_ << "," << feat_ << ")";
  return os.str();
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(),
                     [](double v) { return std::isfinite(v); });
}

Matrix::Matrix(int64_t rows, int64_t cols) : rows_(rows), cols_(cols) {
  if (rows < 1 || cols < 1) {
    std::ostringstream os;
    os << "matrix dimensions must be positive, got (" << rows << "," << cols
       << ")";
    throw ShapeError(os.str());
  }
  data_.assign(static_cast<size_t>(rows * cols), 0.0);
}

Matrix Matrix::identity(int64_t n) {
  Matrix m(n, n);
  for (int64_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

std::string Matrix::shape_str() const {
  std::ostringstream os;
  os << "(" << rows_ << "," << cols_ << ")";
  return os.str();
}

Tensor matmul(const Tensor& x, const Matrix& w) {
  if (x.feat() != w.rows()) {
    throw ShapeError("matmul: feature width of x " + x.shape_str() +
                     " does not match rows of w " + w.shape_str());
  }
  Tensor out(x.batch(), x.seq(), w.cols());
  const int64_t k_len = x.feat();
  for (int64_t b = 0; b < x.batch(); ++b) {
    for (int64_t s = 0; s < x.seq(); ++s) {
      for (int64_t c = 0; c < w.cols(); ++c) {
        double acc = 0.0;
        for (int64_t k = 0; k < k_len; ++k) acc += x(b, s, k) * w(k, c);
        out(b, s, c) = acc;
      }
    }
  }
  return out;
}

Tensor bmm(const Tensor& a, const Tensor& b) {
  if (a.batch() != b.batch() || a.feat() != b.seq()) {
    throw ShapeError("bmm: incompatible shapes " + a.shape_str() + " x " +
                     b.shape_str());
  }
  Tensor out(a.batch(), a.seq(), b.feat());
  for (int64_t g = 0; g < a.batch(); ++g) {
    for (int64_t m = 0; m < a.seq(); ++m) {
      for (int64_t n = 0; n < b.feat(); ++n) {
        double acc = 0.0;
        for (int64_t k = 0; k < a.feat(); ++k) acc += a(g, m, k) * b(g, k, n);
        out(g, m, n) = acc;
      }
    }
  }
  return out;
}

Tensor bmm_nt(const Tensor& a, const Tensor& b) {
  if (a.batch() != b.batch() || a.feat() != b.feat()) {
    throw ShapeError("bmm_nt: incompatible shapes " + a.shape_str() + " x " +
                     b.shape_str() + "^T");
  }
  Tensor out(a.batch(), a.seq(), b.seq());
  for (int64_t g = 0; g < a.batch(); ++g) {
    for (int64_t m = 0; m < a.seq(); ++m) {
      for (int64_t n = 0; n < b.seq(); ++n) {
        double acc = 0.0;
        for (int64_t k = 0; k < a.feat(); ++k) acc += a(g, m, k) * b(g, n, k);
        out(g, m, n) = acc;
      }
    }
  }
  return out;
}

Tensor softmax_rows(const Tensor& scores) {
  if (!scores.all_finite()) {
    throw std::invalid_argument("softmax_rows: input contains NaN/Inf");
  }
  Tensor out(scores.batch(), scores.seq(), scores.feat());
  for (int64_t b = 0; b < scores.batch(); ++b) {
    for (int64_t s = 0; s < scores.seq(); ++s) {
      double row_max = scores(b, s, 0);
      for (int64_t d = 1; d < scores.feat(); ++d)
        row_max = std::max(row_max, scores(b, s, d));
      double denom = 0.0;
      for (int64_t d = 0; d < scores.feat(); ++d) {
        const double e = std::exp(scores(b, s, d) - row_max);
        out(b, s, d) = e;
        denom += e;
      }
      for (int64_t d = 0; d < scores.feat(); ++d) out(b, s, d) /= denom;
    }
  }
  return out;
}

std::vector<Tensor> split_seq(const Tensor& x, int n) {
  if (n < 1) throw std::invalid_argument("split_seq: slice count must be >= 1");
  if (x.seq() % n != 0) {
    std::ostringstream os;
    os << "split_seq: sequence length " << x.seq() << " is not divisible by "
       << n;
    throw std::invalid_argument(os.str());
  }
  const int64_t piece = x.seq() / n;
  std::vector<Tensor> out;
  out.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    Tensor part(x.batch(), piece, x.feat());
    for (int64_t b = 0; b < x.batch(); ++b)
      for (int64_t s = 0; s < piece; ++s)
        for (int64_t d = 0; d < x.feat(); ++d)
          part(b, s, d) = x(b, i * piece + s, d);
    out.push_back(std::move(part));
  }
  return out;
}

Tensor concat_seq(const std::vector<Tensor>& parts) {
  if (parts.empty())
    throw std::invalid_argument("concat_seq: no parts to concatenate");
  int64_t total_seq = 0;
  for (const Tensor& p : parts) {
    if (p.batch() != parts[0].batch() || p.feat() != parts[0].feat()) {
      throw ShapeError("concat_seq: part " + p.shape_str() +
                       " disagrees with " + parts[0].shape_str() +
                       " on batch/feature axes");
    }
    total_seq += p.seq();
  }
  Tensor out(parts[0].batch(), total_seq, parts[0].feat());
  int64_t offset = 0;
  for (const Tensor& p : parts) {
    for (int64_t b = 0; b < p.batch(); ++b)
      for (int64_t s = 0; s < p.seq(); ++s)
        for (int64_t d = 0; d < p.feat(); ++d)
          out(b, offset + s, d) = p(b, s, d);
    offset += p.seq();
  }
  return out;
}

Tensor concat_feat(const std::vector<Tensor>& parts) {
  if (parts.empty())
    throw std::invalid_argument("concat_feat: no parts to concatenate");
  int64_t total_feat = 0;
  for (const Tensor& p : parts) {
    if (p.batch() != parts[0].batch() || p.seq() != parts[0].seq()) {
      throw ShapeError("concat_feat: part " + p.shape_str() +
                       " disagrees with " + parts[0].shape_str() +
                       " on batch/sequence axes");
    }
    total_feat += p.feat();
  }
  Tensor out(parts[0].batch(), parts[0].seq(), total_feat);
  int64_t offset = 0;
  for (const Tensor& p : parts) {
    for (int64_t b = 0; b < p.batch(); ++b)
      for (int64_t s = 0; s < p.seq(); ++s)
        for (int64_t d = 0; d < p.feat(); ++d)
          out(b, s, offset + d) = p(b, s, d);
    offset += p.feat();
  }
  return out;
}

void accumulate(Tensor& dst, const Tensor& src) {
  if (!dst.same_shape(src)) {
    throw ShapeError("accumulate: shape mismatch " + dst.shape_str() + " vs " +
                     src.shape_str());
  }
  for (size_t i = 0; i < dst.raw().size(); ++i) dst.raw()[i] += src.raw()[i];
}

Tensor map_elements(const Tensor& x, const std::function<double(double)>& fn) {
  Tensor out = x;
  for (double& v : out.raw()) v = fn(v);
  return out;
}

Tensor scaled(Tensor x, double s) {
  for (double& v : x.raw()) v *= s;
  return x;
}

Tensor randint_fill(int64_t batch, int64_t seq, int64_t feat, int lo, int hi,
                    uint64_t seed) {
  if (lo >= hi) {
    std::ostringstream os;
    os << "randint_fill: empty range [" << lo << "," << hi << ")";
    throw std::invalid_argument(os.str());
  }
  // mt19937_64 output is fixed by the standard; modulo keeps the stream
  // reproducible across platforms, unlike uniform_int_distribution.
  std::mt19937_64 engine(seed);
  const uint64_t span = static_cast<uint64_t>(static_cast<int64_t>(hi) -
                                              static_cast<int64_t>(lo));
  Tensor t(batch, seq, feat);
  for (double& v : t.raw())
    v = static_cast<double>(lo + static_cast<int64_t>(engine() % span));
  return t;
}

Matrix randint_matrix(int64_t rows, int64_t cols, int lo, int hi,
                      uint64_t seed) {
  if (lo >= hi) {
    std::ostringstream os;
    os << "randint_matrix: empty range [" << lo << "," << hi << ")";
    throw std::invalid_argument(os.str());
  }
  std::mt19937_64 engine(seed);
  const uint64_t span = static_cast<uint64_t>(static_cast<int64_t>(hi) -
                                              static_cast<int64_t>(lo));
  Matrix m(rows, cols);
  for (double& v : m.raw())
    v = static_cast<double>(lo + static_cast<int64_t>(engine() % span));
  return m;
}

Tensor split_heads(const Tensor& x, int heads) {
  if (heads < 1 || x.feat() % heads != 0) {
    std::ostringstream os;
    os << "split_heads: feature width " << x.feat() << " not divisible into "
       << heads << " heads";
    throw ShapeError(os.str());
  }
  const int64_t head_dim = x.feat() / heads;
  Tensor out(x.batch() * heads, x.seq(), head_dim);
  for (int64_t b = 0; b < x.batch(); ++b)
    for (int64_t h = 0; h < heads; ++h)
      for (int64_t s = 0; s < x.seq(); ++s)
        for (int64_t d = 0; d < head_dim; ++d)
          out(b * heads + h, s, d) = x(b, s, h * head_dim + d);
  return out;
}

Tensor merge_heads(const Tensor& x, int heads) {
  if (heads < 1 || x.batch() % heads != 0) {
    std::ostringstream os;
    os << "merge_heads: folded batch " << x.batch() << " not divisible by "
       << heads << " heads";
    throw ShapeError(os.str());
  }
  const int64_t batch = x.batch() / heads;
  Tensor out(batch, x.seq(), heads * x.feat());
  for (int64_t b = 0; b < batch; ++b)
    for (int64_t h = 0; h < heads; ++h)
      for (int64_t s = 0; s < x.seq(); ++s)
        for (int64_t d = 0; d < x.feat(); ++d)
          out(b, s, h * x.feat() + d) = x(b * heads + h, s, d);
  return out;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) {
    throw ShapeError("max_abs_diff: shape mismatch " + a.shape_str() + " vs " +
                     b.shape_str());
  }
  double worst = 0.0;
  for (size_t i = 0; i < a.raw().size(); ++i)
    worst = std::max(worst, std::abs(a.raw()[i] - b.raw()[i]));
  return worst;
}

double rel_deviation(const Tensor& got, const Tensor& want) {
  const double diff = max_abs_diff(got, want);
  double norm = 0.0;
  for (double v : want.raw()) norm = std::max(norm, std::abs(v));
  return norm > 0.0 ? diff / norm : diff;
}

}  // namespace tpfuse
