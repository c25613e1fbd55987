#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "seqtwin/tensor.hpp"

namespace seqtwin {

struct BTLossConfig {
  double lambda = 10.0;
};

// Per-dimension cross-correlation along the batch axis:
//   C[i][j] = sum_b y1[b][i] * y2[b][j] / (||y1[:,i]|| * ||y2[:,j]||)
// Inputs are expected to be mean-centered already; norms carry the kNormEps
// floor, so every entry lands in [-1, 1] up to rounding.
inline Tensor cross_correlation(Tape& tape, const Tensor& y1, const Tensor& y2) {
  if (y1.ndim() != 2 || y2.ndim() != 2 || y1.shape() != y2.shape())
    throw shape_error("cross_correlation expects two equal [b,d] matrices, got " +
                      shape_str(y1.shape()) + " and " + shape_str(y2.shape()));
  if (y1.dim(0) < 2)
    throw contract_error("cross_correlation needs batch >= 2, got " + std::to_string(y1.dim(0)));
  Tensor z1 = l2_normalize_columns(tape, y1);
  Tensor z2 = l2_normalize_columns(tape, y2);
  return matmul(tape, transpose(tape, z1), z2);
}

// Redundancy-reduction loss: sum_i (1 - C_ii) + lambda * sum_{i != j} C_ij^2.
// Centering happens here, so callers may pass raw projector outputs.
inline Tensor barlow_twins_loss(Tape& tape, const Tensor& y1, const Tensor& y2, double lambda) {
  Tensor c1 = mean_center_columns(tape, y1);
  Tensor c2 = mean_center_columns(tape, y2);
  Tensor corr = cross_correlation(tape, c1, c2);
  const int d = corr.dim(0);
  Tensor on_diag = diag(tape, corr);
  // sum_i (1 - C_ii) = d - sum(diag)
  Tensor invariance = add_scalar(tape, mul_scalar(tape, sum(tape, on_diag), -1.0),
                                 static_cast<double>(d));
  // sum_{i != j} C_ij^2 = sum(C*C) - sum(diag*diag)
  Tensor off_diag = add(tape, sum(tape, mul(tape, corr, corr)),
                        mul_scalar(tape, sum(tape, mul(tape, on_diag, on_diag)), -1.0));
  return add(tape, invariance, mul_scalar(tape, off_diag, lambda));
}

// Mean absolute off-diagonal entry of the cross-correlation between two raw
// view batches; a redundancy diagnostic, not part of any gradient.
inline double mean_abs_off_diagonal(const Tensor& y1, const Tensor& y2) {
  Tape tape;
  NoGradGuard ng(tape);
  Tensor corr = cross_correlation(tape, mean_center_columns(tape, y1),
                                  mean_center_columns(tape, y2));
  const int d = corr.dim(0);
  if (d < 2) return 0.0;
  const double* cp = corr.data();
  double acc = 0.0;
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j)
      if (i != j) acc += std::abs(cp[static_cast<std::size_t>(i) * d + j]);
  return acc / (static_cast<double>(d) * d - d);
}

// In-batch softmax contrastive loss for the dual encoder: row r of the logit
// matrix scores context r against every target embedding in the batch, with
// the diagonal as the positive. Duplicate targets stay distinct columns.
inline Tensor in_batch_contrastive_loss(Tape& tape, const Tensor& context_out,
                                        const std::vector<std::int32_t>& target_items,
                                        const Tensor& embedding_table) {
  if (context_out.ndim() != 2)
    throw shape_error("in_batch_contrastive_loss expects [b,d] contexts, got " +
                      shape_str(context_out.shape()));
  const int b = context_out.dim(0);
  if (static_cast<int>(target_items.size()) != b)
    throw contract_error("in_batch_contrastive_loss: " + std::to_string(target_items.size()) +
                         " targets for batch " + std::to_string(b));
  Tensor targets = embedding_rows(tape, embedding_table, target_items);
  if (targets.dim(1) != context_out.dim(1))
    throw shape_error("context dim " + shape_str(context_out.shape()) +
                      " does not match embedding dim " + shape_str(targets.shape()));
  Tensor logits = matmul(tape, context_out, transpose(tape, targets));
  std::vector<int> diagonal(static_cast<std::size_t>(b));
  for (int i = 0; i < b; ++i) diagonal[static_cast<std::size_t>(i)] = i;
  return softmax_cross_entropy(tape, logits, diagonal);
}

}  // namespace seqtwin
