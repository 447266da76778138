#pragma once

#include "maskprune/numerics.hpp"
#include "maskprune/toy_model.hpp"

#include <filesystem>
#include <vector>

namespace maskprune {

/// Importance scores: diagonal of the empirical Fisher of the mask variables.
/// Rows are layers, columns are heads (resp. filters).
struct FisherDiagonal {
  Matrix head_scores;    // L x H
  Matrix filter_scores;  // L x N

  Index layers() const { return head_scores.rows(); }
  Index heads() const { return head_scores.cols(); }
  Index filters() const { return filter_scores.cols(); }
  double total() const { return head_scores.sum() + filter_scores.sum(); }
};

/// Per-sublayer diagonal blocks of the empirical Fisher. Head-filter cross
/// terms are not kept.
struct FisherBlocks {
  std::vector<Matrix> head_blocks;    // L blocks of H x H
  std::vector<Matrix> filter_blocks;  // L blocks of N x N
};

/// diag_i = (1/|D|) sum_k g_k[i]^2, accumulated in sample order.
FisherDiagonal fisher_diagonal(const std::vector<Vector>& grads, const ModelShape& shape);

/// block_l = (1/|D|) sum_k g_{k,l} g_{k,l}^T over each sublayer's coordinates.
FisherBlocks fisher_blocks(const std::vector<Vector>& grads, const ModelShape& shape);

/// Diagonal entries of the blocks, in FisherDiagonal layout.
FisherDiagonal diagonal_of(const FisherBlocks& blocks);

void save_fisher(const FisherDiagonal& diag, const FisherBlocks* blocks, const std::filesystem::path& dir);
FisherDiagonal load_fisher_diagonal(const std::filesystem::path& dir);
FisherBlocks load_fisher_blocks(const std::filesystem::path& dir);

}  // namespace maskprune
