#include "occtens/tensformer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "json.hpp"
#include "occtens/checkpoint.hpp"
#include "occtens/common.hpp"

namespace occtens {

namespace {

constexpr double kSinBase = 10000.0;

void check_scales(const std::vector<int>& scales) {
    if (scales.empty()) throw ConfigError("layout: empty scale list");
    int prev = 0;
    for (int s : scales) {
        if (s <= prev) throw ConfigError("layout: scales must be strictly increasing and positive");
        prev = s;
    }
}

template <typename Allow>
AttentionMask make_mask(const SequenceLayout& lay, int upto, Allow&& allow) {
    auto mask = std::make_shared<std::vector<uint8_t>>(static_cast<size_t>(upto) * upto, uint8_t{0});
    for (int i = 0; i < upto; ++i) {
        const auto& ci = lay.coords[static_cast<size_t>(i)];
        for (int j = 0; j < upto; ++j) {
            bool ok;
            if (i == 0)
                ok = j == 0;  // BOS attends to itself only
            else if (j == 0)
                ok = true;  // everyone sees BOS
            else
                ok = allow(ci, lay.coords[static_cast<size_t>(j)]);
            (*mask)[static_cast<size_t>(i) * upto + j] = ok ? 1 : 0;
        }
    }
    return mask;
}

}  // namespace

int SequenceLayout::frame_start(int t) const { return 1 + t * tokens_per_frame; }

int SequenceLayout::block_size(int m) const {
    if (m == 0) return include_pose ? 1 : 0;
    if (m < 1 || m > static_cast<int>(scales.size())) throw ConfigError("layout: scale index out of range");
    int s = scales[static_cast<size_t>(m) - 1];
    return s * s;
}

int SequenceLayout::block_start(int t, int m) const {
    if (t < 0 || t >= frames) throw ConfigError("layout: frame index out of range");
    if (m == 0) {
        if (!include_pose) throw ConfigError("layout: layout has no pose tokens");
        return frame_start(t);
    }
    if (m < 1 || m > static_cast<int>(scales.size())) throw ConfigError("layout: scale index out of range");
    int off = include_pose ? 1 : 0;
    for (int i = 1; i < m; ++i) off += scales[static_cast<size_t>(i) - 1] * scales[static_cast<size_t>(i) - 1];
    return frame_start(t) + off;
}

int SequenceLayout::index_of(int t, int m, int pos) const {
    if (pos < 0 || pos >= block_size(m)) throw ConfigError("layout: position outside scale block");
    return block_start(t, m) + pos;
}

SequenceLayout build_layout(int frames, const std::vector<int>& scales, bool include_pose) {
    if (frames < 1) throw ConfigError("layout: need at least one frame");
    check_scales(scales);
    SequenceLayout lay;
    lay.frames = frames;
    lay.scales = scales;
    lay.include_pose = include_pose;
    lay.tokens_per_frame = include_pose ? 1 : 0;
    for (int s : scales) lay.tokens_per_frame += s * s;
    lay.length = 1 + frames * lay.tokens_per_frame;
    lay.coords.reserve(static_cast<size_t>(lay.length));
    lay.coords.push_back({-1, -1, 0});
    for (int t = 0; t < frames; ++t) {
        if (include_pose) lay.coords.push_back({t, 0, 0});
        for (int m = 1; m <= static_cast<int>(scales.size()); ++m) {
            int cells = scales[static_cast<size_t>(m) - 1] * scales[static_cast<size_t>(m) - 1];
            for (int pos = 0; pos < cells; ++pos) lay.coords.push_back({t, m, pos});
        }
    }
    return lay;
}

AttentionMask build_temporal_scale_mask(const SequenceLayout& lay) {
    return make_mask(lay, lay.length, [](const SequenceLayout::Coord& q, const SequenceLayout::Coord& k) {
        return k.t <= q.t && k.m == q.m;
    });
}

AttentionMask build_temporal_literal_mask(const SequenceLayout& lay) {
    return make_mask(lay, lay.length, [](const SequenceLayout::Coord& q, const SequenceLayout::Coord& k) {
        return k.t < q.t || (k.t == q.t && k.m <= q.m);
    });
}

AttentionMask build_frame_spatial_mask(const SequenceLayout& lay) {
    return make_mask(lay, lay.length,
                     [](const SequenceLayout::Coord& q, const SequenceLayout::Coord& k) { return k.t == q.t; });
}

AttentionMask build_generation_mask(const SequenceLayout& lay) {
    return build_generation_mask_prefix(lay, lay.length);
}

AttentionMask build_generation_mask_prefix(const SequenceLayout& lay, int upto) {
    if (upto < 1 || upto > lay.length) throw ConfigError("generation mask: prefix length out of range");
    return make_mask(lay, upto, [](const SequenceLayout::Coord& q, const SequenceLayout::Coord& k) {
        return k.t < q.t || (k.t == q.t && k.m <= q.m);
    });
}

std::vector<float> sinusoid(int idx, int dim) {
    std::vector<float> out(static_cast<size_t>(dim), 0.0f);
    for (int i = 0; i < dim / 2; ++i) {
        double angle = idx / std::pow(kSinBase, 2.0 * i / dim);
        out[static_cast<size_t>(2 * i)] = static_cast<float>(std::sin(angle));
        out[static_cast<size_t>(2 * i) + 1] = static_cast<float>(std::cos(angle));
    }
    return out;
}

Tensor sinusoid_table(const SequenceLayout& lay, int dim) {
    Tensor out({lay.length, dim});
    for (int p = 1; p < lay.length; ++p) {
        const auto& c = lay.coords[static_cast<size_t>(p)];
        std::vector<float> pos = sinusoid(c.pos, dim);
        std::vector<float> scl = sinusoid(c.m, dim);
        std::vector<float> tim = sinusoid(c.t, dim);
        float* row = &out.data[static_cast<size_t>(p) * dim];
        for (int i = 0; i < dim; ++i)
            row[i] = pos[static_cast<size_t>(i)] + scl[static_cast<size_t>(i)] + tim[static_cast<size_t>(i)];
    }
    return out;
}

void ModelConfig::validate() const {
    if (hidden < 2 || hidden % 2 != 0) throw ConfigError("model: hidden dim must be even and >= 2");
    if (heads < 1 || hidden % heads != 0) throw ConfigError("model: head count must divide hidden dim");
    if (layers_temporal < 1 || layers_spatial < 1 || layers_gen < 1)
        throw ConfigError("model: each block needs at least one layer");
    if (occ_vocab < 2) throw ConfigError("model: occupancy vocab must be >= 2");
    if (pose_bins.vx < 1 || pose_bins.vy < 1 || pose_bins.vtheta < 1)
        throw ConfigError("model: pose bin counts must be positive");
    if (pose_bins.x_min >= pose_bins.x_max || pose_bins.y_min >= pose_bins.y_max ||
        pose_bins.t_min >= pose_bins.t_max)
        throw ConfigError("model: pose bin ranges must be non-empty");
    check_scales(scales);
    if (scales.back() > std::min(latent_h, latent_w)) throw ConfigError("model: largest scale exceeds latent dims");
    if (frames < 1) throw ConfigError("model: need at least one frame");
    if (code_dim < 1) throw ConfigError("model: code_dim must be positive");
    if (latent_h < 1 || latent_w < 1) throw ConfigError("model: latent dims must be positive");
    if (temporal_mask != "scale" && temporal_mask != "literal")
        throw ConfigError("model: temporal_mask must be 'scale' or 'literal'");
}

std::string model_config_json(const ModelConfig& cfg) {
    nlohmann::json j;
    j["hidden"] = cfg.hidden;
    j["heads"] = cfg.heads;
    j["layers_temporal"] = cfg.layers_temporal;
    j["layers_spatial"] = cfg.layers_spatial;
    j["layers_gen"] = cfg.layers_gen;
    j["occ_vocab"] = cfg.occ_vocab;
    j["pose_bins"] = {{"vx", cfg.pose_bins.vx},       {"vy", cfg.pose_bins.vy},       {"vtheta", cfg.pose_bins.vtheta},
                      {"x_min", cfg.pose_bins.x_min}, {"x_max", cfg.pose_bins.x_max}, {"y_min", cfg.pose_bins.y_min},
                      {"y_max", cfg.pose_bins.y_max}, {"t_min", cfg.pose_bins.t_min}, {"t_max", cfg.pose_bins.t_max}};
    j["scales"] = cfg.scales;
    j["frames"] = cfg.frames;
    j["code_dim"] = cfg.code_dim;
    j["latent_h"] = cfg.latent_h;
    j["latent_w"] = cfg.latent_w;
    j["include_pose"] = cfg.include_pose;
    j["temporal_mask"] = cfg.temporal_mask;
    return j.dump();
}

ModelConfig model_config_from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("model config: invalid JSON: ") + e.what());
    }
    static const std::vector<std::string> known = {"hidden",    "heads",    "layers_temporal", "layers_spatial",
                                                   "layers_gen", "occ_vocab", "pose_bins",      "scales",
                                                   "frames",    "code_dim", "latent_h",        "latent_w",
                                                   "include_pose", "temporal_mask"};
    for (const auto& item : j.items())
        if (std::find(known.begin(), known.end(), item.key()) == known.end())
            throw ConfigError("model config: unknown key '" + item.key() + "'");
    static const std::vector<std::string> bin_keys = {"vx",    "vy",    "vtheta", "x_min", "x_max",
                                                      "y_min", "y_max", "t_min",  "t_max"};
    ModelConfig cfg;
    try {
        cfg.hidden = j.at("hidden").get<int>();
        cfg.heads = j.at("heads").get<int>();
        cfg.layers_temporal = j.at("layers_temporal").get<int>();
        cfg.layers_spatial = j.at("layers_spatial").get<int>();
        cfg.layers_gen = j.at("layers_gen").get<int>();
        cfg.occ_vocab = j.at("occ_vocab").get<int>();
        const auto& b = j.at("pose_bins");
        for (const auto& item : b.items())
            if (std::find(bin_keys.begin(), bin_keys.end(), item.key()) == bin_keys.end())
                throw ConfigError("model config: unknown pose_bins key '" + item.key() + "'");
        cfg.pose_bins.vx = b.at("vx").get<int>();
        cfg.pose_bins.vy = b.at("vy").get<int>();
        cfg.pose_bins.vtheta = b.at("vtheta").get<int>();
        cfg.pose_bins.x_min = b.at("x_min").get<double>();
        cfg.pose_bins.x_max = b.at("x_max").get<double>();
        cfg.pose_bins.y_min = b.at("y_min").get<double>();
        cfg.pose_bins.y_max = b.at("y_max").get<double>();
        cfg.pose_bins.t_min = b.at("t_min").get<double>();
        cfg.pose_bins.t_max = b.at("t_max").get<double>();
        cfg.scales = j.at("scales").get<std::vector<int>>();
        cfg.frames = j.at("frames").get<int>();
        cfg.code_dim = j.at("code_dim").get<int>();
        cfg.latent_h = j.at("latent_h").get<int>();
        cfg.latent_w = j.at("latent_w").get<int>();
        cfg.include_pose = j.at("include_pose").get<bool>();
        cfg.temporal_mask = j.at("temporal_mask").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("model config: ") + e.what());
    }
    cfg.validate();
    return cfg;
}

WorldModel::WorldModel(ModelConfig cfg, const SceneTokenizer& tokenizer, uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng(seed);
    register_params(&rng);
    adopt_tokenizer(tokenizer);
    layout_ = build_layout(cfg_.frames, cfg_.scales, cfg_.include_pose);
}

WorldModel::WorldModel(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    register_params(nullptr);
    layout_ = build_layout(cfg_.frames, cfg_.scales, cfg_.include_pose);
}

void WorldModel::adopt_tokenizer(const SceneTokenizer& tokenizer) {
    const TokenizerConfig& tc = tokenizer.config();
    if (tc.vocab != cfg_.occ_vocab || tc.code_dim != cfg_.code_dim || tc.scales != cfg_.scales ||
        tc.latent_h() != cfg_.latent_h || tc.latent_w() != cfg_.latent_w)
        throw ConfigError("world model config does not match the tokenizer");
    codebook_ = tokenizer.codebook();
    scale_maps_ = build_scale_maps(cfg_.scales, cfg_.latent_h, cfg_.latent_w);
    ctx_maps_.clear();
    for (int s : cfg_.scales) ctx_maps_.push_back(bilinear_resize_map(cfg_.latent_h, cfg_.latent_w, s, s));
    tokenizer_hash_ = tokenizer.param_hash();
}

void WorldModel::register_params(Rng* rng) {
    int d = cfg_.hidden;
    constexpr double kStd = 0.02;
    auto mat = [&](const std::string& name, int rows, int cols) {
        Tensor t({rows, cols});
        if (rng)
            for (auto& v : t.data) v = static_cast<float>(rng->normal(0.0, kStd));
        ps_.add(name, std::move(t));
    };
    auto vec = [&](const std::string& name, int n, float fill) { ps_.add(name, Tensor({n}, rng ? fill : 0.0f)); };

    mat("bos", 1, d);
    mat("occ_embed", cfg_.occ_vocab, d);
    mat("pose_embed", cfg_.pose_vocab(), d);
    mat("frame_query", 1, d);
    mat("pose_proj.w", d, d);
    vec("pose_proj.b", d, 0.0f);
    mat("ctx_proj.w", d, cfg_.code_dim);
    vec("ctx_proj.b", d, 0.0f);

    auto block = [&](const std::string& name, int layers) {
        for (int i = 0; i < layers; ++i) {
            std::string p = name + "." + std::to_string(i);
            vec(p + ".ln1.g", d, 1.0f);
            vec(p + ".ln1.b", d, 0.0f);
            for (const char* w : {".attn.wq", ".attn.wk", ".attn.wv", ".attn.wo"}) mat(p + w, d, d);
            for (const char* b : {".attn.bq", ".attn.bk", ".attn.bv", ".attn.bo"}) vec(p + b, d, 0.0f);
            vec(p + ".ln2.g", d, 1.0f);
            vec(p + ".ln2.b", d, 0.0f);
            mat(p + ".ffn.w1", 4 * d, d);
            vec(p + ".ffn.b1", 4 * d, 0.0f);
            mat(p + ".ffn.w2", d, 4 * d);
            vec(p + ".ffn.b2", d, 0.0f);
        }
    };
    block("tmp", cfg_.layers_temporal);
    block("spa", cfg_.layers_spatial);
    block("gen", cfg_.layers_gen);
    vec("gen.out_ln.g", d, 1.0f);
    vec("gen.out_ln.b", d, 0.0f);
    mat("head_occ.w", cfg_.occ_vocab, d);
    vec("head_occ.b", cfg_.occ_vocab, 0.0f);
    mat("head_pose.w", cfg_.pose_vocab(), d);
    vec("head_pose.b", cfg_.pose_vocab(), 0.0f);
}

ad::NodeRef WorldModel::leaf(int pid, bool train) const {
    if (pid < 0) throw ConfigError("world model: unknown parameter");
    if (train) return ad::param(ps_, pid);
    return ad::constant_view(&ps_.values[static_cast<size_t>(pid)]);
}

ad::NodeRef WorldModel::transformer_layer(const ad::NodeRef& x, const std::string& prefix, const AttentionMask& mask,
                                          bool train) const {
    int d = cfg_.hidden, heads = cfg_.heads, dh = d / heads;
    auto P = [&](const char* n) { return leaf(ps_.find(prefix + n), train); };
    ad::NodeRef normed = ad::layer_norm(x, P(".ln1.g"), P(".ln1.b"));
    ad::NodeRef q = ad::linear(normed, P(".attn.wq"), P(".attn.bq"));
    ad::NodeRef k = ad::linear(normed, P(".attn.wk"), P(".attn.bk"));
    ad::NodeRef v = ad::linear(normed, P(".attn.wv"), P(".attn.bv"));
    float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(dh));
    std::vector<ad::NodeRef> head_outs;
    for (int h = 0; h < heads; ++h) {
        ad::NodeRef qh = ad::slice_cols(q, h * dh, (h + 1) * dh);
        ad::NodeRef kh = ad::slice_cols(k, h * dh, (h + 1) * dh);
        ad::NodeRef vh = ad::slice_cols(v, h * dh, (h + 1) * dh);
        ad::NodeRef scores = ad::scale(ad::matmul(qh, kh, false, true), inv_sqrt);
        ad::NodeRef probs = ad::softmax_masked(scores, mask);
        head_outs.push_back(ad::matmul(probs, vh));
    }
    ad::NodeRef attn = ad::linear(ad::concat_cols(head_outs), P(".attn.wo"), P(".attn.bo"));
    ad::NodeRef x2 = ad::add(x, attn);
    ad::NodeRef normed2 = ad::layer_norm(x2, P(".ln2.g"), P(".ln2.b"));
    ad::NodeRef h1 = ad::gelu(ad::linear(normed2, P(".ffn.w1"), P(".ffn.b1")));
    ad::NodeRef ffn = ad::linear(h1, P(".ffn.w2"), P(".ffn.b2"));
    return ad::add(x2, ffn);
}

ad::NodeRef WorldModel::stack(const ad::NodeRef& x, const std::string& block, int layers, const AttentionMask& mask,
                              bool train) const {
    int rows = x->val().dim(0);
    if (mask->size() != static_cast<size_t>(rows) * rows)
        throw ConfigError("attention mask does not match sequence length");
    ad::NodeRef cur = x;
    for (int i = 0; i < layers; ++i) cur = transformer_layer(cur, block + "." + std::to_string(i), mask, train);
    return cur;
}

std::vector<int> WorldModel::flatten_tokens(const TokenSequence& seq, const SequenceLayout& lay) const {
    if (lay.include_pose && static_cast<int>(seq.pose.size()) != lay.frames)
        throw DataError("token sequence: pose count does not match layout frames");
    if (static_cast<int>(seq.occ.size()) != lay.frames)
        throw DataError("token sequence: frame count does not match layout");
    std::vector<int> flat(static_cast<size_t>(lay.length), 0);
    for (int t = 0; t < lay.frames; ++t) {
        if (lay.include_pose) {
            int tok = seq.pose[static_cast<size_t>(t)];
            if (tok < 0 || tok >= cfg_.pose_vocab()) throw DataError("token sequence: pose token out of vocab");
            flat[static_cast<size_t>(lay.block_start(t, 0))] = tok;
        }
        const MultiScaleTokenMap& maps = seq.occ[static_cast<size_t>(t)];
        if (maps.scales != lay.scales) throw DataError("token sequence: scale list mismatch");
        for (int m = 1; m <= static_cast<int>(lay.scales.size()); ++m) {
            const auto& cells = maps.maps[static_cast<size_t>(m) - 1];
            if (static_cast<int>(cells.size()) != lay.block_size(m))
                throw DataError("token sequence: scale block size mismatch");
            int base = lay.block_start(t, m);
            for (size_t i = 0; i < cells.size(); ++i) {
                if (cells[i] < 0 || cells[i] >= cfg_.occ_vocab)
                    throw DataError("token sequence: occupancy token out of vocab");
                flat[static_cast<size_t>(base) + i] = cells[i];
            }
        }
    }
    return flat;
}

ad::NodeRef WorldModel::embed_graph(const std::vector<int>& tokens, const SequenceLayout& lay, bool train) const {
    if (static_cast<int>(tokens.size()) != lay.length) throw DataError("embed: token count does not match layout");
    ad::NodeRef occ_table = leaf(ps_.find("occ_embed"), train);
    ad::NodeRef pose_table = leaf(ps_.find("pose_embed"), train);
    std::vector<ad::NodeRef> pieces;
    pieces.push_back(leaf(ps_.find("bos"), train));
    for (int t = 0; t < lay.frames; ++t) {
        if (lay.include_pose) {
            int tok = tokens[static_cast<size_t>(lay.block_start(t, 0))];
            if (tok < 0 || tok >= cfg_.pose_vocab()) throw DataError("embed: pose token out of vocab");
            pieces.push_back(ad::embedding(pose_table, {tok}));
        }
        int occ_begin = lay.block_start(t, 1);
        int occ_end = lay.frame_start(t) + lay.tokens_per_frame;
        std::vector<int> ids(tokens.begin() + occ_begin, tokens.begin() + occ_end);
        for (int id : ids)
            if (id < 0 || id >= cfg_.occ_vocab) throw DataError("embed: occupancy token out of vocab");
        pieces.push_back(ad::embedding(occ_table, std::move(ids)));
    }
    ad::NodeRef x = ad::concat_rows(pieces);
    return ad::add(x, ad::constant(sinusoid_table(lay, cfg_.hidden)));
}

ad::NodeRef WorldModel::temporal_graph(const ad::NodeRef& x, const SequenceLayout& lay, bool train) const {
    AttentionMask mask =
        cfg_.temporal_mask == "literal" ? build_temporal_literal_mask(lay) : build_temporal_scale_mask(lay);
    return stack(x, "tmp", cfg_.layers_temporal, mask, train);
}

ad::NodeRef WorldModel::spatial_graph(const ad::NodeRef& x, const SequenceLayout& lay, bool train) const {
    return stack(x, "spa", cfg_.layers_spatial, build_frame_spatial_mask(lay), train);
}

ad::NodeRef WorldModel::scene_graph(const std::vector<int>& tokens, const SequenceLayout& lay, bool train) const {
    return spatial_graph(temporal_graph(embed_graph(tokens, lay, train), lay, train), lay, train);
}

Tensor WorldModel::frame_context(const MultiScaleTokenMap& frame_tokens, int m) const {
    int h = cfg_.latent_h, w = cfg_.latent_w, c = cfg_.code_dim;
    int side = cfg_.scales[static_cast<size_t>(m) - 1];
    Tensor partial({h, w, c});
    Tensor up({h, w, c});
    for (int prev = 1; prev < m; ++prev) {
        int s = cfg_.scales[static_cast<size_t>(prev) - 1];
        Tensor looked({s, s, c});
        const auto& cells = frame_tokens.maps[static_cast<size_t>(prev) - 1];
        for (int cell = 0; cell < s * s; ++cell)
            std::memcpy(&looked.data[static_cast<size_t>(cell) * c],
                        &codebook_.data[static_cast<size_t>(cells[static_cast<size_t>(cell)]) * c],
                        sizeof(float) * static_cast<size_t>(c));
        apply_resize(scale_maps_.up[static_cast<size_t>(prev) - 1], looked.data.data(), up.data.data(), c);
        for (size_t i = 0; i < partial.data.size(); ++i) partial.data[i] += up.data[i];
    }
    Tensor ctx({side * side, c});
    apply_resize(ctx_maps_[static_cast<size_t>(m) - 1], partial.data.data(), ctx.data.data(), c);
    return ctx;
}

ad::NodeRef WorldModel::gen_graph(const ad::NodeRef& guidance, const std::vector<int>& tokens,
                                  const SequenceLayout& lay, int upto, bool train) const {
    if (static_cast<int>(tokens.size()) != lay.length) throw DataError("gen: token count does not match layout");
    if (upto < 1 || upto > lay.length) throw ConfigError("gen: prefix length out of range");
    if (upto < lay.length && lay.coords[static_cast<size_t>(upto)].pos != 0)
        throw ConfigError("gen: prefix must end on a scale-block boundary");
    int needed_guidance = std::max(0, upto - lay.tokens_per_frame);
    if (guidance->val().dim(0) < needed_guidance) throw ConfigError("gen: guidance sequence too short");

    int d = cfg_.hidden;
    int m_count = static_cast<int>(cfg_.scales.size());

    // pose projections for frames whose scale-1 block is inside the prefix
    ad::NodeRef pose_proj_all;
    int proj_frames = 0;
    if (lay.include_pose) {
        std::vector<int> pose_ids;
        for (int t = 0; t < lay.frames && lay.block_start(t, 1) < upto; ++t) {
            int tok = tokens[static_cast<size_t>(lay.block_start(t, 0))];
            if (tok < 0 || tok >= cfg_.pose_vocab()) throw DataError("gen: pose token out of vocab");
            pose_ids.push_back(tok);
        }
        proj_frames = static_cast<int>(pose_ids.size());
        if (proj_frames > 0) {
            ad::NodeRef emb = ad::embedding(leaf(ps_.find("pose_embed"), train), std::move(pose_ids));
            pose_proj_all = ad::linear(emb, leaf(ps_.find("pose_proj.w"), train), leaf(ps_.find("pose_proj.b"), train));
        }
    }

    // constant partial-reconstruction rows for every m>=2 block in the prefix,
    // stacked in layout order and projected once
    std::vector<int> ctx_block_rows;
    std::vector<Tensor> ctx_rows;
    int ctx_total = 0;
    for (int t = 0; t < lay.frames; ++t) {
        for (int m = 2; m <= m_count; ++m) {
            if (lay.block_start(t, m) >= upto) break;
            MultiScaleTokenMap frame_tokens;
            frame_tokens.scales = lay.scales;
            for (int mm = 1; mm < m; ++mm) {
                int base = lay.block_start(t, mm);
                int cells = lay.block_size(mm);
                std::vector<int> ids(tokens.begin() + base, tokens.begin() + base + cells);
                for (int id : ids)
                    if (id < 0 || id >= cfg_.occ_vocab) throw DataError("gen: occupancy token out of vocab");
                frame_tokens.maps.push_back(std::move(ids));
            }
            Tensor ctx = frame_context(frame_tokens, m);
            ctx_block_rows.push_back(ctx.dim(0));
            ctx_total += ctx.dim(0);
            ctx_rows.push_back(std::move(ctx));
        }
    }
    ad::NodeRef ctx_proj_all;
    if (ctx_total > 0) {
        Tensor stacked({ctx_total, cfg_.code_dim});
        int at = 0;
        for (const Tensor& c : ctx_rows) {
            std::memcpy(&stacked.data[static_cast<size_t>(at) * cfg_.code_dim], c.data.data(),
                        sizeof(float) * c.data.size());
            at += c.dim(0);
        }
        ctx_proj_all = ad::linear(ad::constant(std::move(stacked)), leaf(ps_.find("ctx_proj.w"), train),
                                  leaf(ps_.find("ctx_proj.b"), train));
    }

    std::vector<ad::NodeRef> pieces;
    pieces.push_back(leaf(ps_.find("bos"), train));
    ad::NodeRef frame_query = leaf(ps_.find("frame_query"), train);
    int ctx_at = 0, ctx_block = 0;
    for (int t = 0; t < lay.frames; ++t) {
        if (lay.include_pose && lay.block_start(t, 0) < upto) pieces.push_back(frame_query);
        for (int m = 1; m <= m_count; ++m) {
            if (lay.block_start(t, m) >= upto) break;
            int cells = lay.block_size(m);
            if (m == 1) {
                if (lay.include_pose) {
                    pieces.push_back(ad::gather_rows(pose_proj_all, std::vector<int>(static_cast<size_t>(cells), t)));
                } else {
                    pieces.push_back(ad::gather_rows(frame_query, std::vector<int>(static_cast<size_t>(cells), 0)));
                }
            } else {
                pieces.push_back(ad::slice_rows(ctx_proj_all, ctx_at, ctx_at + ctx_block_rows[static_cast<size_t>(ctx_block)]));
                ctx_at += ctx_block_rows[static_cast<size_t>(ctx_block)];
                ++ctx_block;
            }
        }
    }
    ad::NodeRef content = ad::concat_rows(pieces);
    if (content->val().dim(0) != upto) throw ConfigError("gen: content assembly does not match prefix length");

    std::vector<int> shift(static_cast<size_t>(upto));
    for (int p = 0; p < upto; ++p) {
        const auto& c = lay.coords[static_cast<size_t>(p)];
        shift[static_cast<size_t>(p)] = (c.t <= 0) ? -1 : p - lay.tokens_per_frame;
    }
    ad::NodeRef shifted = ad::gather_rows(guidance, std::move(shift));

    Tensor sins = sinusoid_table(lay, d);
    Tensor sins_prefix({upto, d});
    std::memcpy(sins_prefix.data.data(), sins.data.data(), sizeof(float) * static_cast<size_t>(upto) * d);
    ad::NodeRef x = ad::add(ad::add(content, shifted), ad::constant(std::move(sins_prefix)));

    AttentionMask mask = build_generation_mask_prefix(lay, upto);
    ad::NodeRef out = stack(x, "gen", cfg_.layers_gen, mask, train);
    return ad::layer_norm(out, leaf(ps_.find("gen.out_ln.g"), train), leaf(ps_.find("gen.out_ln.b"), train));
}

WorldModel::TeacherLogits WorldModel::teacher_logits(const TokenSequence& seq) const {
    std::vector<int> flat = flatten_tokens(seq, layout_);
    ad::NodeRef guid = scene_graph(flat, layout_, false);
    ad::NodeRef x = gen_graph(guid, flat, layout_, layout_.length, false);
    std::vector<int> occ_idx, pose_idx;
    for (int p = 1; p < layout_.length; ++p)
        (layout_.coords[static_cast<size_t>(p)].m == 0 ? pose_idx : occ_idx).push_back(p);
    TeacherLogits out;
    out.occ = ad::linear(ad::gather_rows(x, occ_idx), leaf(ps_.find("head_occ.w"), false),
                         leaf(ps_.find("head_occ.b"), false))
                  ->val();
    if (!pose_idx.empty())
        out.pose = ad::linear(ad::gather_rows(x, pose_idx), leaf(ps_.find("head_pose.w"), false),
                              leaf(ps_.find("head_pose.b"), false))
                       ->val();
    return out;
}

Tensor WorldModel::scene_guidance(const std::vector<int>& tokens, const SequenceLayout& lay) const {
    return scene_graph(tokens, lay, false)->val();
}

Tensor WorldModel::block_logits(const Tensor& guidance, const std::vector<int>& tokens, const SequenceLayout& lay,
                                int t, int m) const {
    int start = lay.block_start(t, m);
    int size = lay.block_size(m);
    ad::NodeRef x = gen_graph(ad::constant_view(&guidance), tokens, lay, start + size, false);
    ad::NodeRef rows = ad::slice_rows(x, start, start + size);
    const char* wname = m == 0 ? "head_pose.w" : "head_occ.w";
    const char* bname = m == 0 ? "head_pose.b" : "head_occ.b";
    return ad::linear(rows, leaf(ps_.find(wname), false), leaf(ps_.find(bname), false))->val();
}

WorldModel::TrainGraph WorldModel::training_graph(const TokenSequence& seq, const losses::LossWeights& w) const {
    std::vector<int> flat = flatten_tokens(seq, layout_);
    ad::NodeRef guid = scene_graph(flat, layout_, true);
    ad::NodeRef x = gen_graph(guid, flat, layout_, layout_.length, true);
    std::vector<int> occ_idx, pose_idx;
    for (int p = 1; p < layout_.length; ++p)
        (layout_.coords[static_cast<size_t>(p)].m == 0 ? pose_idx : occ_idx).push_back(p);

    std::vector<int> occ_targets, pose_targets;
    for (int p : occ_idx) occ_targets.push_back(flat[static_cast<size_t>(p)]);
    for (int p : pose_idx) pose_targets.push_back(flat[static_cast<size_t>(p)]);

    ad::NodeRef occ_logits = ad::linear(ad::gather_rows(x, occ_idx), leaf(ps_.find("head_occ.w"), true),
                                        leaf(ps_.find("head_occ.b"), true));
    ad::NodeRef occ_ce = ad::token_cross_entropy(occ_logits, occ_targets);

    TrainGraph out;
    std::vector<double> occ_d(occ_logits->val().data.begin(), occ_logits->val().data.end());
    if (!pose_idx.empty()) {
        ad::NodeRef pose_logits = ad::linear(ad::gather_rows(x, pose_idx), leaf(ps_.find("head_pose.w"), true),
                                             leaf(ps_.find("head_pose.b"), true));
        ad::NodeRef pose_ce = ad::token_cross_entropy(pose_logits, pose_targets);
        out.loss = ad::weighted_sum({occ_ce, pose_ce},
                                    {static_cast<float>(w.beta_occ), static_cast<float>(w.beta_pose)});
        std::vector<double> pose_d(pose_logits->val().data.begin(), pose_logits->val().data.end());
        out.breakdown = losses::world_model_loss(occ_d, occ_targets, static_cast<int>(occ_targets.size()),
                                                 cfg_.occ_vocab, pose_d, pose_targets,
                                                 static_cast<int>(pose_targets.size()), cfg_.pose_vocab(), w);
    } else {
        out.loss = ad::weighted_sum({occ_ce}, {static_cast<float>(w.beta_occ)});
        out.breakdown = losses::world_model_loss(occ_d, occ_targets, static_cast<int>(occ_targets.size()),
                                                 cfg_.occ_vocab, {}, {}, 0, cfg_.pose_vocab(), w);
    }
    return out;
}

void WorldModel::save(const std::string& path) const {
    Checkpoint ckpt;
    ckpt.kind = "world_model";
    ckpt.config_json = model_config_json(cfg_);
    ckpt.names = ps_.names;
    ckpt.tensors = ps_.values;
    ckpt.tokenizer_hash = tokenizer_hash_;
    save_checkpoint(ckpt, path);
}

WorldModel WorldModel::load(const std::string& path, const SceneTokenizer& tokenizer) {
    Checkpoint ckpt = load_checkpoint(path);
    if (ckpt.kind != "world_model")
        throw DataError("checkpoint at " + path + " is not a world model (kind '" + ckpt.kind + "')");
    if (ckpt.tokenizer_hash != tokenizer.param_hash())
        throw DataError("world model checkpoint was trained against a different tokenizer");
    WorldModel model(model_config_from_json(ckpt.config_json));
    model.adopt_tokenizer(tokenizer);
    if (ckpt.names.size() != model.ps_.names.size())
        throw ConfigError("world model checkpoint parameter count mismatch");
    for (size_t i = 0; i < ckpt.names.size(); ++i) {
        int pid = model.ps_.find(ckpt.names[i]);
        if (pid < 0) throw ConfigError("world model checkpoint has unknown parameter " + ckpt.names[i]);
        Tensor& dst = model.ps_.values[static_cast<size_t>(pid)];
        if (dst.shape != ckpt.tensors[i].shape)
            throw ConfigError("world model checkpoint parameter " + ckpt.names[i] + " has mismatched shape");
        dst = std::move(ckpt.tensors[i]);
    }
    return model;
}

}  // namespace occtens
