#pragma once

#include <functional>
#include <vector>

#include "tpfuse/collectives.hpp"
#include "tpfuse/fabric.hpp"
#include "tpfuse/tensor.hpp"

namespace tpfuse {

/// A full projection weight together with its per-rank shards. Row shards
/// partition the input dimension, column shards the output dimension;
/// stacking the shards in rank order reconstructs the full weight exactly.
class ShardedLinear {
 public:
  enum class Kind { RowShard, ColumnShard };

  static ShardedLinear split_rows(Matrix full, int world);
  static ShardedLinear split_columns(Matrix full, int world);

  Kind kind() const { return kind_; }
  int world() const { return static_cast<int>(shards_.size()); }
  const Matrix& full() const { return full_; }
  const Matrix& shard(int rank) const { return shards_.at(static_cast<size_t>(rank)); }
  Matrix& shard(int rank) { return shards_.at(static_cast<size_t>(rank)); }

  /// Stacks the shards back into a full weight (used to verify sharding).
  Matrix reconstruct() const;

 private:
  ShardedLinear(Kind kind, Matrix full, std::vector<Matrix> shards)
      : kind_(kind), full_(std::move(full)), shards_(std::move(shards)) {}

  Kind kind_;
  Matrix full_;
  std::vector<Matrix> shards_;
};

/// Per-rank attention operands, kept folded as (batch*heads, seq, head_dim).
struct AttentionInputs {
  int batch = 0;
  int heads = 0;  // heads held by this rank
  Tensor q, k, v;

  int64_t head_dim() const { return q.feat(); }
  int64_t seq() const { return q.seq(); }
};

AttentionInputs make_attention_inputs(int batch, int heads, Tensor q, Tensor k,
                                      Tensor v);

struct AttentionOptions {
  /// Scale scores by 1/sqrt(head_dim) before the softmax.
  bool scale_scores = true;
};

using Activation = std::function<double(double)>;

/// Scaled-dot-product attention of queries against keys/values, all folded
/// as (batch*heads, seq, head_dim). Queries may cover a sequence slice.
Tensor attention_context(const Tensor& q, const Tensor& k, const Tensor& v,
                         const AttentionOptions& options = {});

/// Column-parallel projection over the fused all-gather: equivalent to
/// matmul(all_gather(x), W_col_shard). Input (B, S/T, D), output
/// (B, S, Dout/T).
Tensor column_parallel_forward(RankEndpoint& ep, const Tensor& x,
                               const ShardedLinear& w, int m = 1);

/// Row-parallel projection over the fused reduce-scatter: equivalent to
/// reduce_scatter over ranks of matmul(x, W_row_shard). Input (B, S, D/T),
/// output (B, S/T, Dout).
Tensor row_parallel_forward(RankEndpoint& ep, const Tensor& x,
                            const ShardedLinear& w, const Schedule& schedule,
                            int m = 1);

/// Sequence-sharded MLP block: fused all-gather + column up-projection,
/// element-wise activation, fused reduce-scatter + row down-projection.
/// Input and output are both (B, S/T, D).
Tensor tpsp_mlp_forward(RankEndpoint& ep, const Tensor& x,
                        const ShardedLinear& up, const ShardedLinear& down,
                        const Activation& activation, const Schedule& schedule,
                        int m = 1);

/// Head-sharded attention whose output projection rides the fused
/// reduce-scatter: queries are split into sequence slices and each slice's
/// attention + row-sharded projection is one partial-output step.
/// Output is (B, S/T, D).
Tensor query_split_attention(RankEndpoint& ep, const AttentionInputs& qkv,
                             const ShardedLinear& out_proj,
                             const Schedule& schedule,
                             const AttentionOptions& options = {});

/// Head-sharded attention whose output redistribution rides a fused
/// all-to-all: each query slice's attention output is sent straight to the
/// slice owner, and the final iteration keeps the rank's own slice. The
/// result concatenates every rank's head-group output along the feature
/// axis; no output projection is applied. Output is (B, S/T, a/T * T * Dh).
Tensor fuse_all_to_all_attention(RankEndpoint& ep, const AttentionInputs& qkv,
                                 const AttentionOptions& options = {});

/// Single-device MLP used as ground truth by the equivalence tests.
Tensor reference_mlp(const Tensor& x, const Matrix& up, const Matrix& down,
                     const Activation& activation);

/// Single-device multi-head attention (no output projection), heads merged
/// along the feature axis. Ground truth for the attention paths.
Tensor reference_attention(const AttentionInputs& qkv,
                           const AttentionOptions& options = {});

}  // namespace tpfuse
