#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "occtens/tensor.hpp"

namespace occtens::ad {

struct Node;
using NodeRef = std::shared_ptr<Node>;

// One vertex of the reverse-mode tape. Values are computed eagerly at build
// time; `backward` accumulates into parent grads. Values/grads of interior
// nodes are released as backward() walks the tape.
struct Node {
    Tensor owned;
    const Tensor* external = nullptr;  // leaf view into caller-owned storage
    Tensor grad;
    bool needs_grad = false;
    int param_id = -1;
    std::vector<NodeRef> parents;
    std::function<void(Node&)> backward;

    const Tensor& val() const { return external ? *external : owned; }
    void ensure_grad() {
        if (grad.data.empty()) grad = Tensor(val().shape);
    }
};

// Named parameter registry. Ids are stable registration order, which also
// fixes the deterministic init order.
struct ParamStore {
    std::vector<std::string> names;
    std::vector<Tensor> values;

    int add(const std::string& name, Tensor init);
    int find(const std::string& name) const;  // -1 if absent
    int64_t total_elements() const;
};

// Per-backward-pass gradient accumulator aligned with a ParamStore.
struct GradStore {
    std::vector<Tensor> g;

    void init_like(const ParamStore& ps);
    void zero();
    void add_scaled(const GradStore& other, float s);
    double global_norm() const;
};

// --- leaves ---------------------------------------------------------------
NodeRef constant(Tensor v);
NodeRef constant_view(const Tensor* v);
NodeRef param(const ParamStore& ps, int pid);

// --- elementwise / shape --------------------------------------------------
NodeRef add(const NodeRef& a, const NodeRef& b);
NodeRef sub(const NodeRef& a, const NodeRef& b);
NodeRef mul(const NodeRef& a, const NodeRef& b);
NodeRef scale(const NodeRef& a, float s);
NodeRef add_bias(const NodeRef& x, const NodeRef& bias);  // [n,d] + [d]
NodeRef gelu(const NodeRef& x);
NodeRef detach(const NodeRef& x);
NodeRef straight_through(const NodeRef& x, Tensor target);
NodeRef reshape(const NodeRef& x, std::vector<int> shape);

NodeRef slice_cols(const NodeRef& x, int c0, int c1);
NodeRef concat_cols(const std::vector<NodeRef>& parts);
NodeRef slice_rows(const NodeRef& x, int r0, int r1);
NodeRef concat_rows(const std::vector<NodeRef>& parts);
// out[i] = src[i] >= 0 ? x[src[i]] : 0
NodeRef gather_rows(const NodeRef& x, std::vector<int> src);

// --- linear algebra ---------------------------------------------------------
NodeRef matmul(const NodeRef& a, const NodeRef& b, bool trans_a = false, bool trans_b = false);
// x [n,din] * W^T [din,dout] + b
NodeRef linear(const NodeRef& x, const NodeRef& w, const NodeRef& b);
NodeRef layer_norm(const NodeRef& x, const NodeRef& gamma, const NodeRef& beta, float eps = 1e-5f);
// rows softmax restricted to mask entries; masked-out entries are 0
NodeRef softmax_masked(const NodeRef& scores, std::shared_ptr<const std::vector<uint8_t>> mask);
NodeRef embedding(const NodeRef& table, std::vector<int> idx);

// --- conv / resampling -------------------------------------------------------
// x [h,w,cin], w [kh,kw,cin,cout], b [cout]
NodeRef conv2d(const NodeRef& x, const NodeRef& w, const NodeRef& b, int stride, int pad);
NodeRef upsample_nearest2(const NodeRef& x);  // [h,w,c] -> [2h,2w,c]

// --- reductions / losses -----------------------------------------------------
NodeRef mean_all(const NodeRef& x);
NodeRef sq_diff_mean(const NodeRef& a, const NodeRef& b);
NodeRef weighted_sum(const std::vector<NodeRef>& scalars, const std::vector<float>& w);
// mean over rows of -log softmax(logits)[target]; double accumulation inside
NodeRef token_cross_entropy(const NodeRef& logits, std::vector<int> targets);
// scalar node with externally computed value and gradient w.r.t. x
NodeRef custom_scalar(const NodeRef& x, double value, Tensor grad_wrt_x);

// Runs reverse-mode on a scalar root. Param-leaf grads are flushed into `gs`
// (ids must align with the ParamStore the leaves came from). Interior
// values/grads are freed as the walk proceeds.
void backward(const NodeRef& root, GradStore* gs);

}  // namespace occtens::ad
