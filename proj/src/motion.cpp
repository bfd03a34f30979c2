#include "occtens/motion.hpp"

#include <algorithm>
#include <cmath>

namespace occtens {

namespace {

int bin_of(double v, double lo, double hi, int bins, int* clamp_counter) {
    if (std::isnan(v)) throw NumericError("quantize_pose: NaN component");
    double width = (hi - lo) / bins;
    int i = static_cast<int>(std::floor((v - lo) / width));
    if (i < 0) {
        i = 0;
        if (clamp_counter) ++*clamp_counter;
    } else if (i >= bins) {
        // v == hi lands exactly on the top edge and belongs to the last bin;
        // only genuinely out-of-range values count as clamps
        if (v > hi && clamp_counter) ++*clamp_counter;
        i = bins - 1;
    }
    return i;
}

void check_vocab(const PoseVocab& v) {
    if (v.vx < 1 || v.vy < 1 || v.vtheta < 1) throw ConfigError("pose vocab: bin counts must be >= 1");
    if (!(v.x_min < v.x_max) || !(v.y_min < v.y_max) || !(v.t_min < v.t_max))
        throw ConfigError("pose vocab: ranges must satisfy min < max");
}

}  // namespace

BinTriple quantize_pose(const RelPose& p, const PoseVocab& vocab, int* clamp_counter) {
    check_vocab(vocab);
    BinTriple b;
    b.ix = bin_of(p.dx, vocab.x_min, vocab.x_max, vocab.vx, clamp_counter);
    b.iy = bin_of(p.dy, vocab.y_min, vocab.y_max, vocab.vy, clamp_counter);
    b.itheta = bin_of(p.dtheta, vocab.t_min, vocab.t_max, vocab.vtheta, clamp_counter);
    return b;
}

int pose_token_index(const BinTriple& b, const PoseVocab& vocab) {
    check_vocab(vocab);
    if (b.ix < 0 || b.ix >= vocab.vx || b.iy < 0 || b.iy >= vocab.vy || b.itheta < 0 || b.itheta >= vocab.vtheta)
        throw ConfigError("pose_token_index: bin component out of range");
    return b.ix + b.iy * vocab.vx + b.itheta * vocab.vx * vocab.vy;
}

BinTriple decompose_pose_token(int token, const PoseVocab& vocab) {
    check_vocab(vocab);
    if (token < 0 || token >= vocab.size()) throw ConfigError("pose token index out of vocabulary");
    BinTriple b;
    b.ix = token % vocab.vx;
    b.iy = (token / vocab.vx) % vocab.vy;
    b.itheta = token / (vocab.vx * vocab.vy);
    return b;
}

RelPose decode_pose_token(int token, const PoseVocab& vocab) {
    BinTriple b = decompose_pose_token(token, vocab);
    RelPose p;
    p.dx = vocab.x_min + (b.ix + 0.5) * (vocab.x_max - vocab.x_min) / vocab.vx;
    p.dy = vocab.y_min + (b.iy + 0.5) * (vocab.y_max - vocab.y_min) / vocab.vy;
    p.dtheta = vocab.t_min + (b.itheta + 0.5) * (vocab.t_max - vocab.t_min) / vocab.vtheta;
    return p;
}

double wrap_angle(double a) {
    a = std::fmod(a, 2.0 * M_PI);
    if (a > M_PI) a -= 2.0 * M_PI;
    if (a <= -M_PI) a += 2.0 * M_PI;
    return a;
}

std::vector<std::array<double, 3>> compose_trajectory(const std::vector<RelPose>& rel_poses) {
    std::vector<std::array<double, 3>> out;
    out.reserve(rel_poses.size());
    double x = 0.0, y = 0.0, theta = 0.0;
    for (const RelPose& p : rel_poses) {
        double c = std::cos(theta), s = std::sin(theta);
        x += c * p.dx - s * p.dy;
        y += s * p.dx + c * p.dy;
        theta = wrap_angle(theta + p.dtheta);
        out.push_back({x, y, theta});
    }
    return out;
}

}  // namespace occtens
