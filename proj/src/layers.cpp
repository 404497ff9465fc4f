#include "tpfuse/layers.hpp"

#include <cmath>
#include <optional>
#include <sstream>
#include <utility>

namespace tpfuse {

ShardedLinear ShardedLinear::split_rows(Matrix full, int world) {
  if (world < 1 || full.rows() % world != 0) {
    std::ostringstream os;
    os << "split_rows: " << full.rows() << " rows cannot be split across "
       << world << " ranks";
    throw ShapeError(os.str());
  }
  const int64_t rows = full.rows() / world;
  std::vector<Matrix> shards;
  shards.reserve(static_cast<size_t>(world));
  for (int r = 0; r < world; ++r) {
    Matrix shard(rows, full.cols());
    for (int64_t i = 0; i < rows; ++i)
      for (int64_t j = 0; j < full.cols(); ++j)
        shard(i, j) = full(r * rows + i, j);
    shards.push_back(std::move(shard));
  }
  return ShardedLinear(Kind::RowShard, std::move(full), std::move(shards));
}

ShardedLinear ShardedLinear::split_columns(Matrix full, int world) {
  if (world < 1 || full.cols() % world != 0) {
    std::ostringstream os;
    os << "split_columns: " << full.cols() << " columns cannot be split across "
       << world << " ranks";
    throw ShapeError(os.str());
  }
  const int64_t cols = full.cols() / world;
  std::vector<Matrix> shards;
  shards.reserve(static_cast<size_t>(world));
  for (int r = 0; r < world; ++r) {
    Matrix shard(full.rows(), cols);
    for (int64_t i = 0; i < full.rows(); ++i)
      for (int64_t j = 0; j < cols; ++j)
        shard(i, j) = full(i, r * cols + j);
    shards.push_back(std::move(shard));
  }
  return ShardedLinear(Kind::ColumnShard, std::move(full), std::move(shards));
}

Matrix ShardedLinear::reconstruct() const {
  Matrix out(full_.rows(), full_.cols());
  if (kind_ == Kind::RowShard) {
    const int64_t rows = shards_[0].rows();
    for (int r = 0; r < world(); ++r)
      for (int64_t i = 0; i < rows; ++i)
        for (int64_t j = 0; j < out.cols(); ++j)
          out(r * rows + i, j) = shards_[static_cast<size_t>(r)](i, j);
  } else {
    const int64_t cols = shards_[0].cols();
    for (int r = 0; r < world(); ++r)
      for (int64_t i = 0; i < out.rows(); ++i)
        for (int64_t j = 0; j < cols; ++j)
          out(i, r * cols + j) = shards_[static_cast<size_t>(r)](i, j);
  }
  return out;
}

AttentionInputs make_attention_inputs(int batch, int heads, Tensor q, Tensor k,
                                      Tensor v) {
  if (batch < 1 || heads < 1)
    throw std::invalid_argument("attention inputs need batch >= 1, heads >= 1");
  if (!q.same_shape(k) || !q.same_shape(v)) {
    throw ShapeError("attention operands must share one shape, got q " +
                     q.shape_str() + ", k " + k.shape_str() + ", v " +
                     v.shape_str());
  }
  if (q.batch() != static_cast<int64_t>(batch) * heads) {
    std::ostringstream os;
    os << "attention operands fold batch*heads = " << batch << "*" << heads
       << " rows, got " << q.batch();
    throw ShapeError(os.str());
  }
  return AttentionInputs{batch, heads, std::move(q), std::move(k), std::move(v)};
}

namespace {

void require_kind(const ShardedLinear& w, ShardedLinear::Kind kind, int world,
                  const char* op) {
  if (w.kind() != kind) {
    throw std::invalid_argument(std::string(op) + ": wrong shard kind (need " +
                                (kind == ShardedLinear::Kind::RowShard
                                     ? "row"
                                     : "column") +
                                " shards)");
  }
  if (w.world() != world) {
    std::ostringstream os;
    os << op << ": weight sharded for " << w.world() << " ranks, group has "
       << world;
    throw std::invalid_argument(os.str());
  }
}

}  // namespace

Tensor attention_context(const Tensor& q, const Tensor& k, const Tensor& v,
                         const AttentionOptions& options) {
  if (!k.same_shape(v) || q.batch() != k.batch() || q.feat() != k.feat()) {
    throw ShapeError("attention_context: incompatible operands q " +
                     q.shape_str() + ", k " + k.shape_str() + ", v " +
                     v.shape_str());
  }
  Tensor scores = bmm_nt(q, k);
  if (options.scale_scores)
    scores = scaled(std::move(scores), 1.0 / std::sqrt(static_cast<double>(q.feat())));
  return bmm(softmax_rows(scores), v);
}

Tensor column_parallel_forward(RankEndpoint& ep, const Tensor& x,
                               const ShardedLinear& w, int m) {
  require_kind(w, ShardedLinear::Kind::ColumnShard, ep.group_size(),
               "column_parallel_forward");
  const Matrix& shard = w.shard(ep.rank());
  return fuse_all_gather(
      ep, x, [&](const Tensor& chunk) { return matmul(chunk, shard); }, m);
}

Tensor row_parallel_forward(RankEndpoint& ep, const Tensor& x,
                            const ShardedLinear& w, const Schedule& schedule,
                            int m) {
  require_kind(w, ShardedLinear::Kind::RowShard, ep.group_size(),
               "row_parallel_forward");
  const Matrix& shard = w.shard(ep.rank());
  return fuse_reduce_scatter(
      ep, x, [&](const Tensor& slice) { return matmul(slice, shard); },
      schedule, m);
}

Tensor tpsp_mlp_forward(RankEndpoint& ep, const Tensor& x,
                        const ShardedLinear& up, const ShardedLinear& down,
                        const Activation& activation, const Schedule& schedule,
                        int m) {
  const Tensor hidden = column_parallel_forward(ep, x, up, m);
  const Tensor activated = map_elements(hidden, activation);
  return row_parallel_forward(ep, activated, down, schedule, m);
}

Tensor query_split_attention(RankEndpoint& ep, const AttentionInputs& qkv,
                             const ShardedLinear& out_proj,
                             const Schedule& schedule,
                             const AttentionOptions& options) {
  require_kind(out_proj, ShardedLinear::Kind::RowShard, ep.group_size(),
               "query_split_attention");
  const Matrix& shard = out_proj.shard(ep.rank());
  if (shard.rows() != static_cast<int64_t>(qkv.heads) * qkv.head_dim()) {
    std::ostringstream os;
    os << "query_split_attention: projection shard expects "
       << shard.rows() << " features, head group provides "
       << qkv.heads * qkv.head_dim();
    throw ShapeError(os.str());
  }
  // Each partial output is the attention of one query slice followed by
  // the row-sharded projection; the reduce-scatter sums head groups.
  return fuse_reduce_scatter(
      ep, qkv.q,
      [&](const Tensor& q_slice) {
        const Tensor context = attention_context(q_slice, qkv.k, qkv.v, options);
        return matmul(merge_heads(context, qkv.heads), shard);
      },
      schedule);
}

Tensor fuse_all_to_all_attention(RankEndpoint& ep, const AttentionInputs& qkv,
                                 const AttentionOptions& options) {
  const int t = ep.group_size();
  const int r = ep.rank();
  if (t == 1) return merge_heads(attention_context(qkv.q, qkv.k, qkv.v, options), qkv.heads);
  if (qkv.seq() % t != 0) {
    std::ostringstream os;
    os << "fuse_all_to_all_attention: sequence length " << qkv.seq()
       << " is not divisible by group size " << t;
    throw std::invalid_argument(os.str());
  }

  const std::vector<Tensor> q_slices = split_seq(qkv.q, t);
  std::vector<Tensor> parts(static_cast<size_t>(t));  // indexed by source rank
  std::vector<PendingOp> pending;
  pending.reserve(2 * static_cast<size_t>(t - 1));
  for (int i = 0; i < t; ++i) {
    const int send_to = (r + i + 1) % t;
    const int recv_from = (r - i - 1 + t) % t;
    const int slice = send_to;
    Tensor out = attention_context(q_slices[static_cast<size_t>(slice)], qkv.k, qkv.v,
                        options);
    if (i < t - 1) {
      pending.push_back(ep.send_async(send_to, out));
      pending.push_back(
          ep.recv_async(recv_from, parts[static_cast<size_t>(recv_from)]));
    } else {
      parts[static_cast<size_t>(slice)] = std::move(out);  // slice == r
    }
  }
  for (PendingOp& op : pending) op.wait();

  std::vector<Tensor> merged;
  merged.reserve(static_cast<size_t>(t));
  for (int source = 0; source < t; ++source) {
    const Tensor& p = parts[static_cast<size_t>(source)];
    if (!p.same_shape(parts[static_cast<size_t>(r)])) {
      throw ShapeError("fuse_all_to_all_attention: part from rank " +
                       std::to_string(source) + " has shape " + p.shape_str() +
                       ", expected " + parts[static_cast<size_t>(r)].shape_str());
    }
    merged.push_back(merge_heads(p, qkv.heads));
  }
  return concat_feat(merged);
}

Tensor reference_mlp(const Tensor& x, const Matrix& up, const Matrix& down,
                     const Activation& activation) {
  return matmul(map_elements(matmul(x, up), activation), down);
}

Tensor reference_attention(const AttentionInputs& qkv,
                           const AttentionOptions& options) {
  return merge_heads(attention_context(qkv.q, qkv.k, qkv.v, options), qkv.heads);
}

}  // namespace tpfuse
