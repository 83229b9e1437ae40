#pragma once

#include <vector>

#include "foal/avel.hpp"
#include "foal/layers.hpp"
#include "foal/tensor.hpp"

namespace foal {

class FoalNet;

// Hardest cross-modal negative for every anchor. Rows whose anchor has no
// differently-labelled candidate are flagged invalid and point back at the
// anchor's own partner.
struct HardNegatives {
  std::vector<std::size_t> id_a2v;  // video negative for audio anchor i
  std::vector<std::size_t> id_v2a;  // audio negative for video anchor i
  std::vector<bool> valid_a;
  std::vector<bool> valid_v;

  std::size_t size() const { return id_a2v.size(); }
};

// Copy of `c` with -inf wherever the two samples share a label.
Tensor mask_positives(const Tensor& c, const MatchLabels& labels);

// Row-wise argmax of softmax(masked row); lowest index wins ties.
HardNegatives mine_hard_negatives(const Tensor& c_a2v, const Tensor& c_v2a, const MatchLabels& labels);

struct NegativePairs {
  Tensor audio;  // Z_a[id_v2a]
  Tensor video;  // Z_v[id_a2v]
};

NegativePairs gather_negatives(const Tensor& z_a, const Tensor& z_v, const HardNegatives& hn);

// N ones (matched) followed by N zeros (mismatched).
std::vector<int> mem_labels(std::size_t n);

// Binary matching loss of one stream from pooled fused features of the
// matched and mismatched pairs; only valid rows participate. Returns a zero
// constant when no row is valid.
Tensor matching_stream_loss(const Tensor& match_logits_pos, const Tensor& match_logits_neg,
                            const std::vector<bool>& valid);

// Runs both fusion branches on matched and hard-negative pairs and returns
// L_m = (L_m^a + L_m^v) / 2.
Tensor mem_forward_loss(FoalNet& model, const Tensor& z_a, const Tensor& z_v, const HardNegatives& hn, Mode mode);

// Same, reusing already pooled fused features of the matched pairs.
Tensor mem_loss_from_pooled(FoalNet& model, const Tensor& pooled_pos_a, const Tensor& pooled_pos_v, const Tensor& z_a,
                            const Tensor& z_v, const HardNegatives& hn, Mode mode);

}  // namespace foal
