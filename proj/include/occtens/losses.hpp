#pragma once

#include <vector>

#include "occtens/common.hpp"

namespace occtens::losses {

struct LossWeights {
    double lambda_ce = 10.0, lambda_lovasz = 1.0, lambda_geoscal = 0.3, lambda_semscal = 0.5;
    double beta_occ = 1.0, beta_pose = 1.0;
    double codebook = 1.0, commitment = 0.25;
};

// All reference losses run in double precision and expose analytic gradients
// for finite-difference verification. Layouts are row-major N x K.

// Mean over rows of -log softmax(logits)[label]. Gradient w.r.t. logits.
double cross_entropy_rows(const std::vector<double>& logits, const std::vector<int>& labels, int n, int k,
                          std::vector<double>* grad_logits = nullptr);

// Rows of `probs` must sum to 1 within 1e-5. For each class present in
// labels: errors m_i = 1 - p_i(c) if y_i = c else p_i(c); sorted descending;
// loss_c = dot(sorted m, discrete Jaccard gradient); mean over present
// classes. Gradient w.r.t. probs (fixed sort order).
double lovasz_softmax(const std::vector<double>& probs, const std::vector<int>& labels, int n, int k,
                      std::vector<double>* grad_probs = nullptr);

// Soft precision / recall / specificity loss. geometric collapses classes to
// occupied (label != 0) vs empty and scores the single occupied class;
// semantic scores every class present in labels. Terms whose denominator
// population is empty are skipped. Gradient w.r.t. probs.
double scal_loss(const std::vector<double>& probs, const std::vector<int>& labels, int n, int k, bool geometric,
                 std::vector<double>* grad_probs = nullptr);

// Softmax rows in double precision.
std::vector<double> softmax_rows(const std::vector<double>& logits, int n, int k);

struct TokenizerLossBreakdown {
    double ce = 0.0, lovasz = 0.0, geoscal = 0.0, semscal = 0.0;
    double codebook = 0.0, commitment = 0.0;
    double total = 0.0;
};

// Weighted sum of the four reconstruction terms (computed from voxel logits)
// plus externally supplied codebook/commitment values.
TokenizerLossBreakdown tokenizer_loss(const std::vector<double>& logits, const std::vector<int>& labels, int n,
                                      int k, double codebook_term, double commitment_term, const LossWeights& w);

struct WorldModelLossBreakdown {
    double occ = 0.0, pose = 0.0, total = 0.0;
};

WorldModelLossBreakdown world_model_loss(const std::vector<double>& occ_logits, const std::vector<int>& occ_targets,
                                         int occ_n, int occ_vocab, const std::vector<double>& pose_logits,
                                         const std::vector<int>& pose_targets, int pose_n, int pose_vocab,
                                         const LossWeights& w);

}  // namespace occtens::losses
