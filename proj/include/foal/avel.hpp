#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "foal/tensor.hpp"

namespace foal {

struct AlignmentConfig {
  std::size_t proj_dim = 512;
  double temperature = 10.0;  // multiplies the similarity logits
  bool l2_normalize = true;
  // Divide each anchor's positive terms by its positive count.
  bool per_positive_norm = false;
};

void validate(const AlignmentConfig& cfg);

// N x N emotion-equality matrix: entry (i, j) is 1 iff label_i == label_j.
class MatchLabels {
 public:
  MatchLabels() = default;
  explicit MatchLabels(std::span<const int> labels);

  std::size_t size() const { return n_; }
  bool operator()(std::size_t i, std::size_t j) const { return cells_[i * n_ + j] != 0; }
  std::size_t positives_in_row(std::size_t i) const;
  std::span<const int> labels() const { return labels_; }
  // 0/1 values as a constant [N, N] tensor.
  Tensor as_tensor() const;

 private:
  std::size_t n_ = 0;
  std::vector<int> labels_;
  std::vector<std::uint8_t> cells_;
};

MatchLabels emotion_match_matrix(std::span<const int> labels);

struct SimilarityMatrices {
  Tensor a2v;  // eps * E_a E_v^T
  Tensor v2a;  // eps * E_v E_a^T
};

// Rows of the embeddings are L2-normalized first when cfg.l2_normalize.
SimilarityMatrices similarity_matrices(const Tensor& e_a, const Tensor& e_v, const AlignmentConfig& cfg);

// -(1/(2N)) * sum_ij [log_softmax_row(C_a2v)_ij + log_softmax_row(C_v2a)_ij] * M_ij
Tensor alignment_loss(const Tensor& c_a2v, const Tensor& c_v2a, const MatchLabels& labels,
                      const AlignmentConfig& cfg);

}  // namespace foal
