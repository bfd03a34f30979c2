#define EIGEN_DONT_PARALLELIZE
#include "occtens/autodiff.hpp"

#include <Eigen/Core>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace occtens::ad {

using EMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const EMat>;
using MMap = Eigen::Map<EMat>;

static CMap cmap(const Tensor& t, int r, int c) { return CMap(t.data.data(), r, c); }
static MMap mmap(Tensor& t, int r, int c) { return MMap(t.data.data(), r, c); }

static std::pair<int, int> as2d(const Tensor& t) {
    if (t.ndim() == 1) return {1, t.dim(0)};
    int rows = t.dim(0);
    int cols = 1;
    for (int i = 1; i < t.ndim(); ++i) cols *= t.dim(i);
    return {rows, cols};
}

int ParamStore::add(const std::string& name, Tensor init) {
    names.push_back(name);
    values.push_back(std::move(init));
    return static_cast<int>(values.size()) - 1;
}

int ParamStore::find(const std::string& name) const {
    for (size_t i = 0; i < names.size(); ++i)
        if (names[i] == name) return static_cast<int>(i);
    return -1;
}

int64_t ParamStore::total_elements() const {
    int64_t n = 0;
    for (const auto& t : values) n += t.numel();
    return n;
}

void GradStore::init_like(const ParamStore& ps) {
    g.clear();
    g.reserve(ps.values.size());
    for (const auto& t : ps.values) g.emplace_back(t.shape);
}

void GradStore::zero() {
    for (auto& t : g) t.fill(0.0f);
}

void GradStore::add_scaled(const GradStore& other, float s) {
    for (size_t i = 0; i < g.size(); ++i)
        for (size_t j = 0; j < g[i].data.size(); ++j) g[i].data[j] += s * other.g[i].data[j];
}

double GradStore::global_norm() const {
    double ss = 0.0;
    for (const auto& t : g)
        for (float v : t.data) ss += static_cast<double>(v) * v;
    return std::sqrt(ss);
}

NodeRef constant(Tensor v) {
    auto n = std::make_shared<Node>();
    n->owned = std::move(v);
    return n;
}

NodeRef constant_view(const Tensor* v) {
    auto n = std::make_shared<Node>();
    n->external = v;
    return n;
}

NodeRef param(const ParamStore& ps, int pid) {
    auto n = std::make_shared<Node>();
    n->external = &ps.values[static_cast<size_t>(pid)];
    n->needs_grad = true;
    n->param_id = pid;
    return n;
}

static NodeRef make_op(Tensor value, std::vector<NodeRef> parents, std::function<void(Node&)> bwd) {
    auto n = std::make_shared<Node>();
    n->owned = std::move(value);
    for (const auto& p : parents)
        if (p->needs_grad) n->needs_grad = true;
    if (n->needs_grad) {
        n->parents = std::move(parents);
        n->backward = std::move(bwd);
    }
    return n;
}

NodeRef add(const NodeRef& a, const NodeRef& b) {
    Tensor out = a->val();
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += b->val().data[i];
    return make_op(std::move(out), {a, b}, [a, b](Node& n) {
        if (a->needs_grad) {
            a->ensure_grad();
            for (size_t i = 0; i < n.grad.data.size(); ++i) a->grad.data[i] += n.grad.data[i];
        }
        if (b->needs_grad) {
            b->ensure_grad();
            for (size_t i = 0; i < n.grad.data.size(); ++i) b->grad.data[i] += n.grad.data[i];
        }
    });
}

NodeRef sub(const NodeRef& a, const NodeRef& b) {
    Tensor out = a->val();
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] -= b->val().data[i];
    return make_op(std::move(out), {a, b}, [a, b](Node& n) {
        if (a->needs_grad) {
            a->ensure_grad();
            for (size_t i = 0; i < n.grad.data.size(); ++i) a->grad.data[i] += n.grad.data[i];
        }
        if (b->needs_grad) {
            b->ensure_grad();
            for (size_t i = 0; i < n.grad.data.size(); ++i) b->grad.data[i] -= n.grad.data[i];
        }
    });
}

NodeRef mul(const NodeRef& a, const NodeRef& b) {
    Tensor out = a->val();
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] *= b->val().data[i];
    return make_op(std::move(out), {a, b}, [a, b](Node& n) {
        if (a->needs_grad) {
            a->ensure_grad();
            for (size_t i = 0; i < n.grad.data.size(); ++i) a->grad.data[i] += n.grad.data[i] * b->val().data[i];
        }
        if (b->needs_grad) {
            b->ensure_grad();
            for (size_t i = 0; i < n.grad.data.size(); ++i) b->grad.data[i] += n.grad.data[i] * a->val().data[i];
        }
    });
}

NodeRef scale(const NodeRef& a, float s) {
    Tensor out = a->val();
    for (auto& v : out.data) v *= s;
    return make_op(std::move(out), {a}, [a, s](Node& n) {
        a->ensure_grad();
        for (size_t i = 0; i < n.grad.data.size(); ++i) a->grad.data[i] += s * n.grad.data[i];
    });
}

NodeRef add_bias(const NodeRef& x, const NodeRef& bias) {
    auto [r, c] = as2d(x->val());
    Tensor out = x->val();
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) out.data[static_cast<size_t>(i) * c + j] += bias->val().data[static_cast<size_t>(j)];
    int rows = r, cols = c;
    return make_op(std::move(out), {x, bias}, [x, bias, rows, cols](Node& n) {
        if (x->needs_grad) {
            x->ensure_grad();
            for (size_t i = 0; i < n.grad.data.size(); ++i) x->grad.data[i] += n.grad.data[i];
        }
        if (bias->needs_grad) {
            bias->ensure_grad();
            for (int i = 0; i < rows; ++i)
                for (int j = 0; j < cols; ++j)
                    bias->grad.data[static_cast<size_t>(j)] += n.grad.data[static_cast<size_t>(i) * cols + j];
        }
    });
}

static constexpr float kGeluC = 0.7978845608028654f;  // sqrt(2/pi)
static constexpr float kGeluA = 0.044715f;

NodeRef gelu(const NodeRef& x) {
    Tensor out = x->val();
    for (auto& v : out.data) {
        float u = kGeluC * (v + kGeluA * v * v * v);
        v = 0.5f * v * (1.0f + std::tanh(u));
    }
    return make_op(std::move(out), {x}, [x](Node& n) {
        x->ensure_grad();
        for (size_t i = 0; i < n.grad.data.size(); ++i) {
            float v = x->val().data[i];
            float u = kGeluC * (v + kGeluA * v * v * v);
            float t = std::tanh(u);
            float d = 0.5f * (1.0f + t) + 0.5f * v * (1.0f - t * t) * kGeluC * (1.0f + 3.0f * kGeluA * v * v);
            x->grad.data[i] += d * n.grad.data[i];
        }
    });
}

NodeRef detach(const NodeRef& x) { return constant(x->val()); }

NodeRef straight_through(const NodeRef& x, Tensor target) {
    return make_op(std::move(target), {x}, [x](Node& n) {
        x->ensure_grad();
        for (size_t i = 0; i < n.grad.data.size(); ++i) x->grad.data[i] += n.grad.data[i];
    });
}

NodeRef reshape(const NodeRef& x, std::vector<int> shape) {
    Tensor out = x->val();
    out.shape = std::move(shape);
    if (out.numel() != Tensor::count(out.shape)) throw std::runtime_error("reshape: element count mismatch");
    return make_op(std::move(out), {x}, [x](Node& n) {
        x->ensure_grad();
        for (size_t i = 0; i < n.grad.data.size(); ++i) x->grad.data[i] += n.grad.data[i];
    });
}

NodeRef slice_cols(const NodeRef& x, int c0, int c1) {
    auto [r, c] = as2d(x->val());
    int w = c1 - c0;
    Tensor out({r, w});
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < w; ++j) out.at(i, j) = x->val().data[static_cast<size_t>(i) * c + c0 + j];
    int rows = r, cols = c;
    return make_op(std::move(out), {x}, [x, c0, w, rows, cols](Node& n) {
        x->ensure_grad();
        for (int i = 0; i < rows; ++i)
            for (int j = 0; j < w; ++j)
                x->grad.data[static_cast<size_t>(i) * cols + c0 + j] += n.grad.at(i, j);
    });
}

NodeRef concat_cols(const std::vector<NodeRef>& parts) {
    int r = as2d(parts[0]->val()).first;
    int total = 0;
    for (const auto& p : parts) total += as2d(p->val()).second;
    Tensor out({r, total});
    int off = 0;
    for (const auto& p : parts) {
        int w = as2d(p->val()).second;
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < w; ++j) out.at(i, off + j) = p->val().data[static_cast<size_t>(i) * w + j];
        off += w;
    }
    std::vector<NodeRef> parents(parts.begin(), parts.end());
    return make_op(std::move(out), parents, [parts, r, total](Node& n) {
        int off = 0;
        for (const auto& p : parts) {
            int w = as2d(p->val()).second;
            if (p->needs_grad) {
                p->ensure_grad();
                for (int i = 0; i < r; ++i)
                    for (int j = 0; j < w; ++j) p->grad.data[static_cast<size_t>(i) * w + j] += n.grad.at(i, off + j);
            }
            off += w;
        }
    });
}

NodeRef slice_rows(const NodeRef& x, int r0, int r1) {
    auto [r, c] = as2d(x->val());
    (void)r;
    int h = r1 - r0;
    Tensor out({h, c});
    std::copy(x->val().data.begin() + static_cast<size_t>(r0) * c, x->val().data.begin() + static_cast<size_t>(r1) * c,
              out.data.begin());
    int cols = c;
    return make_op(std::move(out), {x}, [x, r0, h, cols](Node& n) {
        x->ensure_grad();
        for (int64_t i = 0; i < static_cast<int64_t>(h) * cols; ++i)
            x->grad.data[static_cast<size_t>(r0) * cols + i] += n.grad.data[static_cast<size_t>(i)];
    });
}

NodeRef concat_rows(const std::vector<NodeRef>& parts) {
    int c = as2d(parts[0]->val()).second;
    int total = 0;
    for (const auto& p : parts) total += as2d(p->val()).first;
    Tensor out({total, c});
    size_t off = 0;
    for (const auto& p : parts) {
        std::copy(p->val().data.begin(), p->val().data.end(), out.data.begin() + off);
        off += p->val().data.size();
    }
    std::vector<NodeRef> parents(parts.begin(), parts.end());
    return make_op(std::move(out), parents, [parts](Node& n) {
        size_t off = 0;
        for (const auto& p : parts) {
            if (p->needs_grad) {
                p->ensure_grad();
                for (size_t i = 0; i < p->grad.data.size(); ++i) p->grad.data[i] += n.grad.data[off + i];
            }
            off += p->val().data.size();
        }
    });
}

NodeRef gather_rows(const NodeRef& x, std::vector<int> src) {
    auto [r, c] = as2d(x->val());
    (void)r;
    Tensor out({static_cast<int>(src.size()), c});
    for (size_t i = 0; i < src.size(); ++i) {
        if (src[i] >= 0)
            std::copy(x->val().data.begin() + static_cast<size_t>(src[i]) * c,
                      x->val().data.begin() + (static_cast<size_t>(src[i]) + 1) * c, out.data.begin() + i * c);
    }
    auto idx = std::make_shared<std::vector<int>>(std::move(src));
    int cols = c;
    return make_op(std::move(out), {x}, [x, idx, cols](Node& n) {
        x->ensure_grad();
        for (size_t i = 0; i < idx->size(); ++i) {
            int s = (*idx)[i];
            if (s < 0) continue;
            for (int j = 0; j < cols; ++j)
                x->grad.data[static_cast<size_t>(s) * cols + j] += n.grad.data[i * cols + j];
        }
    });
}

NodeRef matmul(const NodeRef& a, const NodeRef& b, bool trans_a, bool trans_b) {
    auto [ar, ac] = as2d(a->val());
    auto [br, bc] = as2d(b->val());
    int n_ = trans_a ? ac : ar;
    int k_ = trans_a ? ar : ac;
    int kb = trans_b ? bc : br;
    int m_ = trans_b ? br : bc;
    if (k_ != kb) throw std::runtime_error("matmul: inner dim mismatch");
    Tensor out({n_, m_});
    {
        auto A = cmap(a->val(), ar, ac);
        auto B = cmap(b->val(), br, bc);
        auto C = mmap(out, n_, m_);
        if (!trans_a && !trans_b)
            C.noalias() = A * B;
        else if (!trans_a && trans_b)
            C.noalias() = A * B.transpose();
        else if (trans_a && !trans_b)
            C.noalias() = A.transpose() * B;
        else
            C.noalias() = A.transpose() * B.transpose();
    }
    return make_op(std::move(out), {a, b}, [a, b, trans_a, trans_b, ar, ac, br, bc, n_, m_](Node& n) {
        auto G = cmap(n.grad, n_, m_);
        auto A = cmap(a->val(), ar, ac);
        auto B = cmap(b->val(), br, bc);
        if (a->needs_grad) {
            a->ensure_grad();
            auto GA = mmap(a->grad, ar, ac);
            // d(opA) = G * opB^T, then undo the transpose on A
            if (!trans_a) {
                if (!trans_b)
                    GA.noalias() += G * B.transpose();
                else
                    GA.noalias() += G * B;
            } else {
                if (!trans_b)
                    GA.noalias() += B * G.transpose();
                else
                    GA.noalias() += B.transpose() * G.transpose();
            }
        }
        if (b->needs_grad) {
            b->ensure_grad();
            auto GB = mmap(b->grad, br, bc);
            // d(opB) = opA^T * G
            if (!trans_b) {
                if (!trans_a)
                    GB.noalias() += A.transpose() * G;
                else
                    GB.noalias() += A * G;
            } else {
                if (!trans_a)
                    GB.noalias() += G.transpose() * A;
                else
                    GB.noalias() += G.transpose() * A.transpose();
            }
        }
    });
}

NodeRef linear(const NodeRef& x, const NodeRef& w, const NodeRef& b) {
    return add_bias(matmul(x, w, false, true), b);
}

NodeRef layer_norm(const NodeRef& x, const NodeRef& gamma, const NodeRef& beta, float eps) {
    auto [r, c] = as2d(x->val());
    Tensor out({r, c});
    Tensor xhat({r, c});
    Tensor inv_sigma({r});
    for (int i = 0; i < r; ++i) {
        double mu = 0.0;
        for (int j = 0; j < c; ++j) mu += x->val().data[static_cast<size_t>(i) * c + j];
        mu /= c;
        double var = 0.0;
        for (int j = 0; j < c; ++j) {
            double d = x->val().data[static_cast<size_t>(i) * c + j] - mu;
            var += d * d;
        }
        var /= c;
        float is = static_cast<float>(1.0 / std::sqrt(var + eps));
        inv_sigma.data[static_cast<size_t>(i)] = is;
        for (int j = 0; j < c; ++j) {
            float xh = (x->val().data[static_cast<size_t>(i) * c + j] - static_cast<float>(mu)) * is;
            xhat.at(i, j) = xh;
            out.at(i, j) = gamma->val().data[static_cast<size_t>(j)] * xh + beta->val().data[static_cast<size_t>(j)];
        }
    }
    auto xh_keep = std::make_shared<Tensor>(std::move(xhat));
    auto is_keep = std::make_shared<Tensor>(std::move(inv_sigma));
    return make_op(std::move(out), {x, gamma, beta}, [x, gamma, beta, xh_keep, is_keep, r, c](Node& n) {
        if (gamma->needs_grad) {
            gamma->ensure_grad();
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < c; ++j) gamma->grad.data[static_cast<size_t>(j)] += n.grad.at(i, j) * xh_keep->at(i, j);
        }
        if (beta->needs_grad) {
            beta->ensure_grad();
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < c; ++j) beta->grad.data[static_cast<size_t>(j)] += n.grad.at(i, j);
        }
        if (x->needs_grad) {
            x->ensure_grad();
            for (int i = 0; i < r; ++i) {
                double m1 = 0.0, m2 = 0.0;
                for (int j = 0; j < c; ++j) {
                    float dxh = n.grad.at(i, j) * gamma->val().data[static_cast<size_t>(j)];
                    m1 += dxh;
                    m2 += static_cast<double>(dxh) * xh_keep->at(i, j);
                }
                m1 /= c;
                m2 /= c;
                float is = is_keep->data[static_cast<size_t>(i)];
                for (int j = 0; j < c; ++j) {
                    float dxh = n.grad.at(i, j) * gamma->val().data[static_cast<size_t>(j)];
                    x->grad.data[static_cast<size_t>(i) * c + j] +=
                        is * (dxh - static_cast<float>(m1) - xh_keep->at(i, j) * static_cast<float>(m2));
                }
            }
        }
    });
}

NodeRef softmax_masked(const NodeRef& scores, std::shared_ptr<const std::vector<uint8_t>> mask) {
    auto [r, c] = as2d(scores->val());
    if (static_cast<int64_t>(mask->size()) != static_cast<int64_t>(r) * c)
        throw std::runtime_error("softmax_masked: mask size mismatch");
    Tensor out({r, c});
    for (int i = 0; i < r; ++i) {
        float mx = -std::numeric_limits<float>::infinity();
        for (int j = 0; j < c; ++j)
            if ((*mask)[static_cast<size_t>(i) * c + j]) mx = std::max(mx, scores->val().data[static_cast<size_t>(i) * c + j]);
        double denom = 0.0;
        for (int j = 0; j < c; ++j) {
            if ((*mask)[static_cast<size_t>(i) * c + j]) {
                float e = std::exp(scores->val().data[static_cast<size_t>(i) * c + j] - mx);
                out.at(i, j) = e;
                denom += e;
            }
        }
        float inv = static_cast<float>(1.0 / denom);
        for (int j = 0; j < c; ++j) out.at(i, j) *= inv;
    }
    // backward runs before this node's value is released, so read n.val()
    return make_op(std::move(out), {scores}, [scores, mask, r, c](Node& n) {
        scores->ensure_grad();
        const Tensor& p = n.val();
        for (int i = 0; i < r; ++i) {
            double dot = 0.0;
            for (int j = 0; j < c; ++j)
                if ((*mask)[static_cast<size_t>(i) * c + j]) dot += static_cast<double>(n.grad.at(i, j)) * p.at(i, j);
            for (int j = 0; j < c; ++j) {
                if (!(*mask)[static_cast<size_t>(i) * c + j]) continue;
                scores->grad.data[static_cast<size_t>(i) * c + j] +=
                    p.at(i, j) * (n.grad.at(i, j) - static_cast<float>(dot));
            }
        }
    });
}

NodeRef embedding(const NodeRef& table, std::vector<int> idx) {
    auto [v, d] = as2d(table->val());
    Tensor out({static_cast<int>(idx.size()), d});
    for (size_t i = 0; i < idx.size(); ++i) {
        int row = idx[i];
        if (row < 0 || row >= v) throw std::runtime_error("embedding: index out of range");
        std::copy(table->val().data.begin() + static_cast<size_t>(row) * d,
                  table->val().data.begin() + (static_cast<size_t>(row) + 1) * d, out.data.begin() + i * d);
    }
    auto keep = std::make_shared<std::vector<int>>(std::move(idx));
    return make_op(std::move(out), {table}, [table, keep, d](Node& n) {
        table->ensure_grad();
        for (size_t i = 0; i < keep->size(); ++i) {
            int row = (*keep)[i];
            for (int j = 0; j < d; ++j)
                table->grad.data[static_cast<size_t>(row) * d + j] += n.grad.data[i * d + j];
        }
    });
}

// im2col layout: [oh*ow, kh*kw*cin]
static Tensor im2col(const Tensor& x, int kh, int kw, int stride, int pad, int oh, int ow) {
    int h = x.dim(0), w = x.dim(1), cin = x.dim(2);
    Tensor cols({oh * ow, kh * kw * cin});
    for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox) {
            float* dst = &cols.data[static_cast<size_t>(oy * ow + ox) * kh * kw * cin];
            for (int ky = 0; ky < kh; ++ky) {
                int iy = oy * stride - pad + ky;
                for (int kx = 0; kx < kw; ++kx) {
                    int ix = ox * stride - pad + kx;
                    float* d = dst + (ky * kw + kx) * cin;
                    if (iy >= 0 && iy < h && ix >= 0 && ix < w) {
                        const float* s = &x.data[(static_cast<size_t>(iy) * w + ix) * cin];
                        std::copy(s, s + cin, d);
                    } else {
                        std::fill(d, d + cin, 0.0f);
                    }
                }
            }
        }
    }
    return cols;
}

NodeRef conv2d(const NodeRef& x, const NodeRef& w, const NodeRef& b, int stride, int pad) {
    int h = x->val().dim(0), wd = x->val().dim(1), cin = x->val().dim(2);
    int kh = w->val().dim(0), kw = w->val().dim(1), wcin = w->val().dim(2), cout = w->val().dim(3);
    if (cin != wcin) throw std::runtime_error("conv2d: channel mismatch");
    int oh = (h + 2 * pad - kh) / stride + 1;
    int ow = (wd + 2 * pad - kw) / stride + 1;
    Tensor cols = im2col(x->val(), kh, kw, stride, pad, oh, ow);
    Tensor out({oh, ow, cout});
    {
        auto C = cmap(cols, oh * ow, kh * kw * cin);
        auto W = cmap(w->val(), kh * kw * cin, cout);
        auto O = mmap(out, oh * ow, cout);
        O.noalias() = C * W;
        for (int i = 0; i < oh * ow; ++i)
            for (int j = 0; j < cout; ++j) out.data[static_cast<size_t>(i) * cout + j] += b->val().data[static_cast<size_t>(j)];
    }
    auto cols_keep = std::make_shared<Tensor>(std::move(cols));
    return make_op(std::move(out), {x, w, b},
                   [x, w, b, cols_keep, h, wd, cin, kh, kw, cout, stride, pad, oh, ow](Node& n) {
        auto G = cmap(n.grad, oh * ow, cout);
        if (w->needs_grad) {
            w->ensure_grad();
            auto C = cmap(*cols_keep, oh * ow, kh * kw * cin);
            auto GW = mmap(w->grad, kh * kw * cin, cout);
            GW.noalias() += C.transpose() * G;
        }
        if (b->needs_grad) {
            b->ensure_grad();
            for (int i = 0; i < oh * ow; ++i)
                for (int j = 0; j < cout; ++j) b->grad.data[static_cast<size_t>(j)] += n.grad.data[static_cast<size_t>(i) * cout + j];
        }
        if (x->needs_grad) {
            x->ensure_grad();
            Tensor dcols({oh * ow, kh * kw * cin});
            auto DC = mmap(dcols, oh * ow, kh * kw * cin);
            auto W = cmap(w->val(), kh * kw * cin, cout);
            DC.noalias() = G * W.transpose();
            // col2im scatter
            for (int oy = 0; oy < oh; ++oy) {
                for (int ox = 0; ox < ow; ++ox) {
                    const float* src = &dcols.data[static_cast<size_t>(oy * ow + ox) * kh * kw * cin];
                    for (int ky = 0; ky < kh; ++ky) {
                        int iy = oy * stride - pad + ky;
                        if (iy < 0 || iy >= h) continue;
                        for (int kx = 0; kx < kw; ++kx) {
                            int ix = ox * stride - pad + kx;
                            if (ix < 0 || ix >= wd) continue;
                            const float* s = src + (ky * kw + kx) * cin;
                            float* d = &x->grad.data[(static_cast<size_t>(iy) * wd + ix) * cin];
                            for (int c0 = 0; c0 < cin; ++c0) d[c0] += s[c0];
                        }
                    }
                }
            }
        }
    });
}

NodeRef upsample_nearest2(const NodeRef& x) {
    int h = x->val().dim(0), w = x->val().dim(1), c = x->val().dim(2);
    Tensor out({2 * h, 2 * w, c});
    for (int i = 0; i < 2 * h; ++i)
        for (int j = 0; j < 2 * w; ++j) {
            const float* s = &x->val().data[(static_cast<size_t>(i / 2) * w + j / 2) * c];
            float* d = &out.data[(static_cast<size_t>(i) * 2 * w + j) * c];
            std::copy(s, s + c, d);
        }
    return make_op(std::move(out), {x}, [x, h, w, c](Node& n) {
        x->ensure_grad();
        for (int i = 0; i < 2 * h; ++i)
            for (int j = 0; j < 2 * w; ++j) {
                const float* g = &n.grad.data[(static_cast<size_t>(i) * 2 * w + j) * c];
                float* d = &x->grad.data[(static_cast<size_t>(i / 2) * w + j / 2) * c];
                for (int k = 0; k < c; ++k) d[k] += g[k];
            }
    });
}

NodeRef mean_all(const NodeRef& x) {
    double s = 0.0;
    for (float v : x->val().data) s += v;
    int64_t n_elems = x->val().numel();
    Tensor out({1});
    out.data[0] = static_cast<float>(s / static_cast<double>(n_elems));
    return make_op(std::move(out), {x}, [x, n_elems](Node& n) {
        x->ensure_grad();
        float g = n.grad.data[0] / static_cast<float>(n_elems);
        for (auto& v : x->grad.data) v += g;
    });
}

NodeRef sq_diff_mean(const NodeRef& a, const NodeRef& b) {
    int64_t n_elems = a->val().numel();
    double s = 0.0;
    for (int64_t i = 0; i < n_elems; ++i) {
        double d = static_cast<double>(a->val().data[static_cast<size_t>(i)]) - b->val().data[static_cast<size_t>(i)];
        s += d * d;
    }
    Tensor out({1});
    out.data[0] = static_cast<float>(s / static_cast<double>(n_elems));
    return make_op(std::move(out), {a, b}, [a, b, n_elems](Node& n) {
        float g = 2.0f * n.grad.data[0] / static_cast<float>(n_elems);
        if (a->needs_grad) {
            a->ensure_grad();
            for (int64_t i = 0; i < n_elems; ++i)
                a->grad.data[static_cast<size_t>(i)] +=
                    g * (a->val().data[static_cast<size_t>(i)] - b->val().data[static_cast<size_t>(i)]);
        }
        if (b->needs_grad) {
            b->ensure_grad();
            for (int64_t i = 0; i < n_elems; ++i)
                b->grad.data[static_cast<size_t>(i)] -=
                    g * (a->val().data[static_cast<size_t>(i)] - b->val().data[static_cast<size_t>(i)]);
        }
    });
}

NodeRef weighted_sum(const std::vector<NodeRef>& scalars, const std::vector<float>& w) {
    double s = 0.0;
    for (size_t i = 0; i < scalars.size(); ++i) s += static_cast<double>(w[i]) * scalars[i]->val().data[0];
    Tensor out({1});
    out.data[0] = static_cast<float>(s);
    std::vector<NodeRef> parents(scalars.begin(), scalars.end());
    auto weights = w;
    return make_op(std::move(out), parents, [scalars, weights](Node& n) {
        for (size_t i = 0; i < scalars.size(); ++i) {
            if (!scalars[i]->needs_grad) continue;
            scalars[i]->ensure_grad();
            scalars[i]->grad.data[0] += weights[i] * n.grad.data[0];
        }
    });
}

NodeRef token_cross_entropy(const NodeRef& logits, std::vector<int> targets) {
    auto [r, c] = as2d(logits->val());
    if (static_cast<int>(targets.size()) != r) throw std::runtime_error("token_cross_entropy: target count mismatch");
    Tensor probs({r, c});
    double total = 0.0;
    for (int i = 0; i < r; ++i) {
        float mx = logits->val().data[static_cast<size_t>(i) * c];
        for (int j = 1; j < c; ++j) mx = std::max(mx, logits->val().data[static_cast<size_t>(i) * c + j]);
        double denom = 0.0;
        for (int j = 0; j < c; ++j) {
            double e = std::exp(static_cast<double>(logits->val().data[static_cast<size_t>(i) * c + j]) - mx);
            probs.at(i, j) = static_cast<float>(e);
            denom += e;
        }
        for (int j = 0; j < c; ++j) probs.at(i, j) = static_cast<float>(probs.at(i, j) / denom);
        int t = targets[static_cast<size_t>(i)];
        if (t < 0 || t >= c) throw std::runtime_error("token_cross_entropy: target out of range");
        total += -std::log(std::max(static_cast<double>(probs.at(i, t)), 1e-300));
    }
    Tensor out({1});
    out.data[0] = static_cast<float>(total / r);
    auto probs_keep = std::make_shared<Tensor>(std::move(probs));
    auto tgt = std::make_shared<std::vector<int>>(std::move(targets));
    return make_op(std::move(out), {logits}, [logits, probs_keep, tgt, r, c](Node& n) {
        logits->ensure_grad();
        float g = n.grad.data[0] / static_cast<float>(r);
        for (int i = 0; i < r; ++i) {
            for (int j = 0; j < c; ++j) {
                float p = probs_keep->at(i, j);
                float delta = (j == (*tgt)[static_cast<size_t>(i)]) ? 1.0f : 0.0f;
                logits->grad.data[static_cast<size_t>(i) * c + j] += g * (p - delta);
            }
        }
    });
}

NodeRef custom_scalar(const NodeRef& x, double value, Tensor grad_wrt_x) {
    Tensor out({1});
    out.data[0] = static_cast<float>(value);
    auto gk = std::make_shared<Tensor>(std::move(grad_wrt_x));
    return make_op(std::move(out), {x}, [x, gk](Node& n) {
        x->ensure_grad();
        float g = n.grad.data[0];
        for (size_t i = 0; i < x->grad.data.size(); ++i) x->grad.data[i] += g * gk->data[i];
    });
}

void backward(const NodeRef& root, GradStore* gs) {
    if (root->val().numel() != 1) throw std::runtime_error("backward: root must be scalar");
    // iterative topo sort
    std::vector<Node*> order;
    std::vector<std::pair<NodeRef, size_t>> stack;
    std::unordered_set<Node*> visited;
    stack.emplace_back(root, 0);
    visited.insert(root.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            NodeRef child = node->parents[next++];
            if (child->needs_grad && !visited.count(child.get())) {
                visited.insert(child.get());
                stack.emplace_back(child, 0);
            }
        } else {
            order.push_back(node.get());
            stack.pop_back();
        }
    }
    root->ensure_grad();
    root->grad.data[0] = 1.0f;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* node = *it;
        if (node->grad.data.empty()) continue;
        if (node->backward) node->backward(*node);
        if (node->param_id >= 0 && gs) {
            auto& dst = gs->g[static_cast<size_t>(node->param_id)];
            for (size_t i = 0; i < dst.data.size(); ++i) dst.data[i] += node->grad.data[i];
        }
        // consumers are all processed; release memory as we go
        node->grad = Tensor();
        if (!node->external && node != root.get()) node->owned = Tensor();
        node->backward = nullptr;
    }
}

}  // namespace occtens::ad
