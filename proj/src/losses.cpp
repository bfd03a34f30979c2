#include "occtens/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace occtens::losses {

namespace {
constexpr double kLogClamp = 1e-12;
}

std::vector<double> softmax_rows(const std::vector<double>& logits, int n, int k) {
    std::vector<double> probs(logits.size());
    for (int i = 0; i < n; ++i) {
        const double* row = &logits[static_cast<size_t>(i) * k];
        double mx = *std::max_element(row, row + k);
        double denom = 0.0;
        for (int j = 0; j < k; ++j) denom += std::exp(row[j] - mx);
        for (int j = 0; j < k; ++j) probs[static_cast<size_t>(i) * k + j] = std::exp(row[j] - mx) / denom;
    }
    return probs;
}

double cross_entropy_rows(const std::vector<double>& logits, const std::vector<int>& labels, int n, int k,
                          std::vector<double>* grad_logits) {
    if (static_cast<int>(labels.size()) != n || static_cast<int>(logits.size()) != n * k)
        throw DataError("cross_entropy_rows: shape mismatch");
    std::vector<double> probs = softmax_rows(logits, n, k);
    double loss = 0.0;
    for (int i = 0; i < n; ++i) {
        int y = labels[static_cast<size_t>(i)];
        if (y < 0 || y >= k) throw DataError("cross_entropy_rows: label out of range");
        loss -= std::log(std::max(probs[static_cast<size_t>(i) * k + y], kLogClamp));
    }
    loss /= n;
    if (grad_logits) {
        grad_logits->assign(logits.size(), 0.0);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < k; ++j)
                (*grad_logits)[static_cast<size_t>(i) * k + j] =
                    (probs[static_cast<size_t>(i) * k + j] - (j == labels[static_cast<size_t>(i)] ? 1.0 : 0.0)) / n;
    }
    return loss;
}

namespace {

// Discrete gradient of the Lovasz extension of the Jaccard index for one
// class, given the ground-truth indicator sorted by descending error.
std::vector<double> lovasz_grad(const std::vector<int>& gt_sorted) {
    int n = static_cast<int>(gt_sorted.size());
    double gts = std::accumulate(gt_sorted.begin(), gt_sorted.end(), 0.0);
    std::vector<double> jaccard(static_cast<size_t>(n));
    double inter = gts, uni = gts;
    for (int i = 0; i < n; ++i) {
        inter -= gt_sorted[static_cast<size_t>(i)];
        uni += 1 - gt_sorted[static_cast<size_t>(i)];
        jaccard[static_cast<size_t>(i)] = 1.0 - inter / uni;
    }
    for (int i = n - 1; i > 0; --i) jaccard[static_cast<size_t>(i)] -= jaccard[static_cast<size_t>(i) - 1];
    return jaccard;
}

}  // namespace

double lovasz_softmax(const std::vector<double>& probs, const std::vector<int>& labels, int n, int k,
                      std::vector<double>* grad_probs) {
    if (static_cast<int>(labels.size()) != n || static_cast<int>(probs.size()) != n * k)
        throw DataError("lovasz_softmax: shape mismatch");
    for (int i = 0; i < n; ++i) {
        double s = 0.0;
        for (int j = 0; j < k; ++j) s += probs[static_cast<size_t>(i) * k + j];
        if (std::abs(s - 1.0) > 1e-5) throw DataError("lovasz_softmax: probability rows must sum to 1");
    }
    if (grad_probs) grad_probs->assign(probs.size(), 0.0);

    double loss = 0.0;
    int present = 0;
    for (int c = 0; c < k; ++c) {
        bool any = false;
        for (int i = 0; i < n; ++i)
            if (labels[static_cast<size_t>(i)] == c) any = true;
        if (!any) continue;
        ++present;

        std::vector<double> m(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) {
            double p = probs[static_cast<size_t>(i) * k + c];
            m[static_cast<size_t>(i)] = labels[static_cast<size_t>(i)] == c ? 1.0 - p : p;
        }
        std::vector<int> order(static_cast<size_t>(n));
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(),
                         [&](int a, int b) { return m[static_cast<size_t>(a)] > m[static_cast<size_t>(b)]; });
        std::vector<int> gt_sorted(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i)
            gt_sorted[static_cast<size_t>(i)] = labels[static_cast<size_t>(order[static_cast<size_t>(i)])] == c;
        std::vector<double> g = lovasz_grad(gt_sorted);
        for (int i = 0; i < n; ++i) loss += m[static_cast<size_t>(order[static_cast<size_t>(i)])] * g[static_cast<size_t>(i)];
        if (grad_probs) {
            for (int i = 0; i < n; ++i) {
                int pix = order[static_cast<size_t>(i)];
                double dm = labels[static_cast<size_t>(pix)] == c ? -1.0 : 1.0;
                (*grad_probs)[static_cast<size_t>(pix) * k + c] += dm * g[static_cast<size_t>(i)];
            }
        }
    }
    if (present == 0) return 0.0;
    loss /= present;
    if (grad_probs)
        for (double& v : *grad_probs) v /= present;
    return loss;
}

double scal_loss(const std::vector<double>& probs, const std::vector<int>& labels, int n, int k, bool geometric,
                 std::vector<double>* grad_probs) {
    if (static_cast<int>(labels.size()) != n || static_cast<int>(probs.size()) != n * k)
        throw DataError("scal_loss: shape mismatch");
    if (grad_probs) grad_probs->assign(probs.size(), 0.0);

    // per-pixel probability of "class c" and its gradient targets; in
    // geometric mode class occupancy aggregates every non-empty column
    auto class_prob = [&](int i, int c) -> double {
        if (!geometric) return probs[static_cast<size_t>(i) * k + c];
        double s = 0.0;
        for (int j = 1; j < k; ++j) s += probs[static_cast<size_t>(i) * k + j];
        return s;
    };
    auto add_grad = [&](int i, int c, double g) {
        if (!grad_probs) return;
        if (!geometric) {
            (*grad_probs)[static_cast<size_t>(i) * k + c] += g;
        } else {
            for (int j = 1; j < k; ++j) (*grad_probs)[static_cast<size_t>(i) * k + j] += g;
        }
    };
    auto is_class = [&](int i, int c) -> bool {
        if (!geometric) return labels[static_cast<size_t>(i)] == c;
        return labels[static_cast<size_t>(i)] != 0;
    };

    std::vector<int> scope;
    if (geometric) {
        scope.push_back(1);  // the single synthetic "occupied" class
    } else {
        for (int c = 0; c < k; ++c) {
            bool any = false;
            for (int i = 0; i < n; ++i)
                if (labels[static_cast<size_t>(i)] == c) any = true;
            if (any) scope.push_back(c);
        }
        if (scope.empty()) return 0.0;
    }

    double loss = 0.0;
    double inv_scope = 1.0 / static_cast<double>(scope.size());
    for (int c : scope) {
        double pred_mass = 0.0, tp = 0.0;
        int pos = 0, neg = 0;
        for (int i = 0; i < n; ++i) {
            double p = class_prob(i, c);
            pred_mass += p;
            if (is_class(i, c)) {
                tp += p;
                ++pos;
            } else {
                ++neg;
            }
        }
        // precision: tp / pred_mass, skipped when no predicted mass
        if (pred_mass > 0.0) {
            double prec = tp / pred_mass;
            loss -= inv_scope * std::log(std::max(prec, kLogClamp));
            if (grad_probs && prec > kLogClamp) {
                for (int i = 0; i < n; ++i) {
                    double d = ((is_class(i, c) ? 1.0 : 0.0) * pred_mass - tp) / (pred_mass * pred_mass);
                    add_grad(i, c, -inv_scope * d / prec);
                }
            }
        }
        // recall: tp / #positives, skipped when the class is absent
        if (pos > 0) {
            double rec = tp / pos;
            loss -= inv_scope * std::log(std::max(rec, kLogClamp));
            if (grad_probs && rec > kLogClamp) {
                for (int i = 0; i < n; ++i)
                    if (is_class(i, c)) add_grad(i, c, -inv_scope / (pos * rec));
            }
        }
        // specificity: sum(1-p over negatives) / #negatives, skipped when all pixels are the class
        if (neg > 0) {
            double tn = 0.0;
            for (int i = 0; i < n; ++i)
                if (!is_class(i, c)) tn += 1.0 - class_prob(i, c);
            double spec = tn / neg;
            loss -= inv_scope * std::log(std::max(spec, kLogClamp));
            if (grad_probs && spec > kLogClamp) {
                for (int i = 0; i < n; ++i)
                    if (!is_class(i, c)) add_grad(i, c, inv_scope / (neg * spec));
            }
        }
    }
    return loss;
}

TokenizerLossBreakdown tokenizer_loss(const std::vector<double>& logits, const std::vector<int>& labels, int n,
                                      int k, double codebook_term, double commitment_term, const LossWeights& w) {
    TokenizerLossBreakdown b;
    b.ce = cross_entropy_rows(logits, labels, n, k);
    std::vector<double> probs = softmax_rows(logits, n, k);
    b.lovasz = lovasz_softmax(probs, labels, n, k);
    b.geoscal = scal_loss(probs, labels, n, k, true);
    b.semscal = scal_loss(probs, labels, n, k, false);
    b.codebook = codebook_term;
    b.commitment = commitment_term;
    b.total = w.lambda_ce * b.ce + w.lambda_lovasz * b.lovasz + w.lambda_geoscal * b.geoscal +
              w.lambda_semscal * b.semscal + w.codebook * b.codebook + w.commitment * b.commitment;
    return b;
}

WorldModelLossBreakdown world_model_loss(const std::vector<double>& occ_logits, const std::vector<int>& occ_targets,
                                         int occ_n, int occ_vocab, const std::vector<double>& pose_logits,
                                         const std::vector<int>& pose_targets, int pose_n, int pose_vocab,
                                         const LossWeights& w) {
    for (int t : occ_targets)
        if (t < 0 || t >= occ_vocab) throw DataError("world_model_loss: occ target outside vocabulary");
    for (int t : pose_targets)
        if (t < 0 || t >= pose_vocab) throw DataError("world_model_loss: pose target outside vocabulary");
    WorldModelLossBreakdown b;
    b.occ = cross_entropy_rows(occ_logits, occ_targets, occ_n, occ_vocab);
    b.pose = pose_n > 0 ? cross_entropy_rows(pose_logits, pose_targets, pose_n, pose_vocab) : 0.0;
    b.total = w.beta_occ * b.occ + w.beta_pose * b.pose;
    return b;
}

}  // namespace occtens::losses
