#include "occtens/tokenizer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <memory>

#include "json.hpp"
#include "occtens/checkpoint.hpp"
#include "occtens/common.hpp"

namespace occtens {

namespace {

bool power_of_two(int v) { return v >= 1 && (v & (v - 1)) == 0; }

int log2_int(int v) {
    int n = 0;
    while ((1 << n) < v) ++n;
    return n;
}

Tensor conv_init(int kh, int kw, int cin, int cout, double gain, Rng& rng) {
    Tensor w({kh, kw, cin, cout});
    double std = std::sqrt(gain / (static_cast<double>(kh) * kw * cin));
    for (float& v : w.data) v = static_cast<float>(rng.normal(0.0, std));
    return w;
}

}  // namespace

int TokenizerConfig::tokens_per_frame() const {
    int n = 0;
    for (int s : scales) n += s * s;
    return n;
}

void TokenizerConfig::validate() const {
    if (grid_x < 1 || grid_y < 1 || grid_z < 1) throw ConfigError("tokenizer: grid dims must be positive");
    if (class_count < 2) throw ConfigError("tokenizer: class_count must be >= 2");
    if (!power_of_two(downsample)) throw ConfigError("tokenizer: downsample must be a power of two");
    if (grid_x % downsample != 0 || grid_y % downsample != 0)
        throw ConfigError("tokenizer: downsample must divide grid x and y");
    if (vocab < 2) throw ConfigError("tokenizer: vocab must be >= 2");
    if (code_dim < 1 || hidden < 1) throw ConfigError("tokenizer: code_dim and hidden must be positive");
    if (scales.empty()) throw ConfigError("tokenizer: at least one scale required");
    int prev = 0;
    for (int s : scales) {
        if (s <= prev) throw ConfigError("tokenizer: scales must be strictly increasing and positive");
        prev = s;
    }
    if (scales.back() > std::min(latent_h(), latent_w()))
        throw ConfigError("tokenizer: largest scale exceeds latent dims");
}

int MultiScaleTokenMap::total() const {
    int n = 0;
    for (const auto& m : maps) n += static_cast<int>(m.size());
    return n;
}

ScaleMaps build_scale_maps(const std::vector<int>& scales, int h, int w) {
    if (scales.empty()) throw ConfigError("scale maps: empty scale list");
    int prev = 0;
    for (int s : scales) {
        if (s <= prev) throw ConfigError("scale maps: scales must be strictly increasing and positive");
        prev = s;
    }
    if (scales.back() > std::min(h, w)) throw ConfigError("scale maps: largest scale exceeds latent dims");
    ScaleMaps sm;
    sm.scales = scales;
    sm.h = h;
    sm.w = w;
    for (int s : scales) {
        sm.up.push_back(bilinear_resize_map(s, s, h, w));
        sm.down.push_back(adjoint_average_map(sm.up.back()));
    }
    return sm;
}

Tensor init_codebook(int vocab, int code_dim, bool frozen_zero, Rng& rng) {
    Tensor cb({vocab, code_dim});
    // the spread must straddle the encoder's initial output range: packing
    // every entry near zero makes nearest-code selection degenerate, so only
    // a handful of entries ever win and the rest of the codebook stays dead
    double lim = 0.5;
    for (int v = frozen_zero ? 1 : 0; v < vocab; ++v) {
        for (bool dup = true; dup;) {
            for (int c = 0; c < code_dim; ++c) cb.at(v, c) = static_cast<float>(rng.uniform(-lim, lim));
            dup = false;
            for (int u = 0; u < v && !dup; ++u)
                dup = std::memcmp(&cb.at(u, 0), &cb.at(v, 0), sizeof(float) * static_cast<size_t>(code_dim)) == 0;
        }
    }
    return cb;
}

int nearest_code(const Tensor& codebook, const float* vec) {
    int v_count = codebook.rows(), c_count = codebook.cols();
    int best = 0;
    double best_d = 0.0;
    for (int v = 0; v < v_count; ++v) {
        double d = 0.0;
        const float* row = &codebook.data[static_cast<size_t>(v) * c_count];
        for (int c = 0; c < c_count; ++c) {
            double diff = static_cast<double>(vec[c]) - static_cast<double>(row[c]);
            d += diff * diff;
        }
        if (v == 0 || d < best_d) {
            best_d = d;
            best = v;
        }
    }
    return best;
}

QuantizeResult quantize_multiscale(const Tensor& codebook, const ScaleMaps& maps, const Tensor& latent) {
    int h = maps.h, w = maps.w, cdim = codebook.cols();
    if (latent.ndim() != 3 || latent.dim(0) != h || latent.dim(1) != w || latent.dim(2) != cdim)
        throw ConfigError("quantize: latent shape does not match scale maps / codebook");
    for (float v : latent.data)
        if (!std::isfinite(v)) throw NumericError("quantize: non-finite latent");

    QuantizeResult out;
    out.tokens.scales = maps.scales;
    Tensor residual = latent;
    out.recon = Tensor({h, w, cdim});
    Tensor up({h, w, cdim});
    for (size_t m = 0; m < maps.scales.size(); ++m) {
        int s = maps.scales[m];
        Tensor down({s, s, cdim});
        apply_resize(maps.down[m], residual.data.data(), down.data.data(), cdim);
        std::vector<int>& map = out.tokens.maps.emplace_back(static_cast<size_t>(s) * s);
        Tensor looked({s, s, cdim});
        for (int cell = 0; cell < s * s; ++cell) {
            int idx = nearest_code(codebook, &down.data[static_cast<size_t>(cell) * cdim]);
            map[static_cast<size_t>(cell)] = idx;
            std::memcpy(&looked.data[static_cast<size_t>(cell) * cdim],
                        &codebook.data[static_cast<size_t>(idx) * cdim], sizeof(float) * static_cast<size_t>(cdim));
        }
        apply_resize(maps.up[m], looked.data.data(), up.data.data(), cdim);
        for (size_t i = 0; i < up.data.size(); ++i) {
            out.recon.data[i] += up.data[i];
            residual.data[i] -= up.data[i];
        }
        out.downsampled.push_back(std::move(down));
    }
    out.residual = std::move(residual);
    return out;
}

Tensor dequantize(const Tensor& codebook, const ScaleMaps& maps, const MultiScaleTokenMap& tokens) {
    if (tokens.scales != maps.scales) throw ConfigError("dequantize: token scales do not match configured scales");
    if (tokens.maps.size() != maps.scales.size()) throw DataError("dequantize: map count does not match scales");
    int h = maps.h, w = maps.w, cdim = codebook.cols();
    Tensor recon({h, w, cdim});
    Tensor up({h, w, cdim});
    for (size_t m = 0; m < maps.scales.size(); ++m) {
        int s = maps.scales[m];
        if (tokens.maps[m].size() != static_cast<size_t>(s) * s)
            throw DataError("dequantize: map " + std::to_string(m) + " has wrong cell count");
        Tensor looked({s, s, cdim});
        for (int cell = 0; cell < s * s; ++cell) {
            int idx = tokens.maps[m][static_cast<size_t>(cell)];
            if (idx < 0 || idx >= codebook.rows())
                throw DataError("dequantize: token index " + std::to_string(idx) + " out of range");
            std::memcpy(&looked.data[static_cast<size_t>(cell) * cdim],
                        &codebook.data[static_cast<size_t>(idx) * cdim], sizeof(float) * static_cast<size_t>(cdim));
        }
        apply_resize(maps.up[m], looked.data.data(), up.data.data(), cdim);
        for (size_t i = 0; i < up.data.size(); ++i) recon.data[i] += up.data[i];
    }
    return recon;
}

SceneTokenizer::SceneTokenizer(TokenizerConfig cfg, uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng(seed);
    register_params(&rng);
    maps_ = build_scale_maps(cfg_.scales, cfg_.latent_h(), cfg_.latent_w());
}

SceneTokenizer::SceneTokenizer(TokenizerConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    register_params(nullptr);
    maps_ = build_scale_maps(cfg_.scales, cfg_.latent_h(), cfg_.latent_w());
}

void SceneTokenizer::register_params(Rng* rng) {
    int zk = cfg_.folded_channels();
    int hid = cfg_.hidden;
    int stages = log2_int(cfg_.downsample);

    auto add_conv = [&](const std::string& name, int cin, int cout, double gain, std::vector<int>* ws,
                        std::vector<int>* bs) {
        Tensor w = rng ? conv_init(3, 3, cin, cout, gain, *rng) : Tensor({3, 3, cin, cout});
        ws->push_back(ps_.add(name + ".w", std::move(w)));
        bs->push_back(ps_.add(name + ".b", Tensor({cout})));
    };

    if (rng) {
        ps_.add("codebook", init_codebook(cfg_.vocab, cfg_.code_dim, cfg_.frozen_zero, *rng));
    } else {
        ps_.add("codebook", Tensor({cfg_.vocab, cfg_.code_dim}));
    }
    codebook_pid_ = ps_.find("codebook");

    add_conv("enc.stem", zk, hid, 2.0, &enc_w_, &enc_b_);
    enc_stride_.push_back(1);
    for (int s = 0; s < stages; ++s) {
        add_conv("enc.down" + std::to_string(s), hid, hid, 2.0, &enc_w_, &enc_b_);
        enc_stride_.push_back(2);
    }
    add_conv("enc.head", hid, cfg_.code_dim, 1.0, &enc_w_, &enc_b_);
    enc_stride_.push_back(1);

    add_conv("dec.stem", cfg_.code_dim, hid, 2.0, &dec_w_, &dec_b_);
    dec_up_before_.push_back(0);
    for (int s = 0; s < stages; ++s) {
        add_conv("dec.up" + std::to_string(s), hid, hid, 2.0, &dec_w_, &dec_b_);
        dec_up_before_.push_back(1);
    }
    add_conv("dec.head", hid, zk, 1.0, &dec_w_, &dec_b_);
    dec_up_before_.push_back(0);
}

Tensor SceneTokenizer::fold_height(const SemanticGrid& grid) {
    int zk = grid.z * grid.class_count;
    Tensor out({grid.x, grid.y, zk});
    for (size_t i = 0; i < grid.labels.size(); ++i) {
        uint8_t label = grid.labels[i];
        if (label >= grid.class_count) throw DataError("fold_height: label out of class range");
        // flat voxel i = (ix*Y + iy)*Z + iz maps to channel iz*K + label of BEV
        // cell (ix, iy); the buffers share a layout, so the offset is i*K + label.
        out.data[i * static_cast<size_t>(grid.class_count) + label] = 1.0f;
    }
    return out;
}

ad::NodeRef SceneTokenizer::encode_graph(const ad::NodeRef& folded) const {
    const Tensor& v = folded->val();
    if (v.ndim() != 3 || v.dim(0) != cfg_.grid_x || v.dim(1) != cfg_.grid_y || v.dim(2) != cfg_.folded_channels())
        throw ConfigError("encode: folded input shape does not match tokenizer config");
    ad::NodeRef x = folded;
    for (size_t i = 0; i < enc_w_.size(); ++i) {
        x = ad::conv2d(x, ad::param(ps_, enc_w_[i]), ad::param(ps_, enc_b_[i]), enc_stride_[i], 1);
        if (i + 1 < enc_w_.size()) x = ad::gelu(x);
    }
    return x;
}

ad::NodeRef SceneTokenizer::decode_graph(const ad::NodeRef& latent) const {
    const Tensor& v = latent->val();
    if (v.ndim() != 3 || v.dim(0) != cfg_.latent_h() || v.dim(1) != cfg_.latent_w() || v.dim(2) != cfg_.code_dim)
        throw ConfigError("decode: latent shape does not match tokenizer config");
    ad::NodeRef x = latent;
    for (size_t i = 0; i < dec_w_.size(); ++i) {
        if (dec_up_before_[i]) x = ad::upsample_nearest2(x);
        x = ad::conv2d(x, ad::param(ps_, dec_w_[i]), ad::param(ps_, dec_b_[i]), 1, 1);
        if (i + 1 < dec_w_.size()) x = ad::gelu(x);
    }
    return ad::reshape(x, {cfg_.grid_x * cfg_.grid_y * cfg_.grid_z, cfg_.class_count});
}

Tensor SceneTokenizer::encode(const SemanticGrid& grid) const {
    Tensor folded = fold_height(grid);
    ad::NodeRef out = encode_graph(ad::constant(std::move(folded)));
    return out->val();
}

Tensor SceneTokenizer::decode_logits(const Tensor& latent) const {
    ad::NodeRef out = decode_graph(ad::constant_view(&latent));
    return out->val();
}

SemanticGrid SceneTokenizer::decode_grid(const Tensor& latent, double cell_size) const {
    Tensor logits = decode_logits(latent);
    SemanticGrid grid(cfg_.grid_x, cfg_.grid_y, cfg_.grid_z, cfg_.class_count, cell_size);
    int k = cfg_.class_count;
    for (size_t i = 0; i < grid.labels.size(); ++i) {
        const float* row = &logits.data[i * static_cast<size_t>(k)];
        int best = 0;
        for (int c = 1; c < k; ++c)
            if (row[c] > row[best]) best = c;
        grid.labels[i] = static_cast<uint8_t>(best);
    }
    return grid;
}

MultiScaleTokenMap SceneTokenizer::tokenize(const SemanticGrid& grid) const {
    return quantize(encode(grid)).tokens;
}

SemanticGrid SceneTokenizer::detokenize(const MultiScaleTokenMap& tokens, double cell_size) const {
    return decode_grid(dequantize_tokens(tokens), cell_size);
}

SceneTokenizer::TrainGraph SceneTokenizer::training_graph(const SemanticGrid& grid,
                                                          const losses::LossWeights& w) const {
    if (grid.x != cfg_.grid_x || grid.y != cfg_.grid_y || grid.z != cfg_.grid_z ||
        grid.class_count != cfg_.class_count)
        throw ConfigError("training_graph: grid dims do not match tokenizer config");

    ad::NodeRef latent = encode_graph(ad::constant(fold_height(grid)));
    QuantizeResult q = quantize(latent->val());
    ad::NodeRef logits = decode_graph(ad::straight_through(latent, q.recon));

    int n = cfg_.grid_x * cfg_.grid_y * cfg_.grid_z;
    int k = cfg_.class_count;
    std::vector<int> labels(grid.labels.begin(), grid.labels.end());
    ad::NodeRef ce = ad::token_cross_entropy(logits, labels);

    auto mask = std::make_shared<const std::vector<uint8_t>>(static_cast<size_t>(n) * k, uint8_t{1});
    ad::NodeRef probs = ad::softmax_masked(logits, mask);
    std::vector<double> pd(probs->val().data.begin(), probs->val().data.end());
    std::vector<double> g_lovasz, g_geo, g_sem;
    double lovasz = losses::lovasz_softmax(pd, labels, n, k, &g_lovasz);
    double geo = losses::scal_loss(pd, labels, n, k, true, &g_geo);
    double sem = losses::scal_loss(pd, labels, n, k, false, &g_sem);
    auto to_grad = [&](const std::vector<double>& g) {
        Tensor t({n, k});
        for (size_t i = 0; i < g.size(); ++i) t.data[i] = static_cast<float>(g[i]);
        return t;
    };
    ad::NodeRef lovasz_node = ad::custom_scalar(probs, lovasz, to_grad(g_lovasz));
    ad::NodeRef geo_node = ad::custom_scalar(probs, geo, to_grad(g_geo));
    ad::NodeRef sem_node = ad::custom_scalar(probs, sem, to_grad(g_sem));

    // codebook pull toward the (constant) pre-quantization vectors, averaged
    // over scales; commitment holds the encoder near the (constant) recon
    ad::NodeRef cb = ad::param(ps_, codebook_pid_);
    std::vector<ad::NodeRef> cb_terms;
    std::vector<float> cb_weights;
    int m_count = static_cast<int>(cfg_.scales.size());
    for (int m = 0; m < m_count; ++m) {
        int s = cfg_.scales[static_cast<size_t>(m)];
        ad::NodeRef emb = ad::embedding(cb, q.tokens.maps[static_cast<size_t>(m)]);
        Tensor target = q.downsampled[static_cast<size_t>(m)];
        target.shape = {s * s, cfg_.code_dim};
        cb_terms.push_back(ad::sq_diff_mean(emb, ad::constant(std::move(target))));
        cb_weights.push_back(1.0f / static_cast<float>(m_count));
    }
    ad::NodeRef codebook_term = ad::weighted_sum(cb_terms, cb_weights);
    ad::NodeRef commit_term = ad::sq_diff_mean(latent, ad::constant(q.recon));

    double cb_val = codebook_term->val().data[0];
    double commit_val = commit_term->val().data[0];
    ad::NodeRef loss = ad::weighted_sum(
        {ce, lovasz_node, geo_node, sem_node, codebook_term, commit_term},
        {static_cast<float>(w.lambda_ce), static_cast<float>(w.lambda_lovasz), static_cast<float>(w.lambda_geoscal),
         static_cast<float>(w.lambda_semscal), static_cast<float>(w.codebook), static_cast<float>(w.commitment)});

    TrainGraph out;
    out.loss = loss;
    out.tokens = std::move(q.tokens);
    std::vector<double> logits_d(logits->val().data.begin(), logits->val().data.end());
    out.breakdown = losses::tokenizer_loss(logits_d, labels, n, k, cb_val, commit_val, w);
    return out;
}

void SceneTokenizer::save(const std::string& path) const {
    Checkpoint ckpt;
    ckpt.kind = "tokenizer";
    ckpt.config_json = tokenizer_config_json(cfg_);
    ckpt.names = ps_.names;
    ckpt.tensors = ps_.values;
    save_checkpoint(ckpt, path);
}

SceneTokenizer SceneTokenizer::load(const std::string& path) {
    Checkpoint ckpt = load_checkpoint(path);
    if (ckpt.kind != "tokenizer") throw DataError("checkpoint at " + path + " is not a tokenizer (kind '" + ckpt.kind + "')");
    SceneTokenizer tok(tokenizer_config_from_json(ckpt.config_json));
    if (ckpt.names.size() != tok.ps_.names.size())
        throw ConfigError("tokenizer checkpoint parameter count mismatch");
    for (size_t i = 0; i < ckpt.names.size(); ++i) {
        int pid = tok.ps_.find(ckpt.names[i]);
        if (pid < 0) throw ConfigError("tokenizer checkpoint has unknown parameter " + ckpt.names[i]);
        Tensor& dst = tok.ps_.values[static_cast<size_t>(pid)];
        if (dst.shape != ckpt.tensors[i].shape)
            throw ConfigError("tokenizer checkpoint parameter " + ckpt.names[i] + " has mismatched shape");
        dst = std::move(ckpt.tensors[i]);
    }
    return tok;
}

uint64_t SceneTokenizer::param_hash() const {
    Checkpoint ckpt;
    ckpt.kind = "tokenizer";
    ckpt.config_json = tokenizer_config_json(cfg_);
    ckpt.names = ps_.names;
    ckpt.tensors = ps_.values;
    std::string bytes = serialize_checkpoint(ckpt);
    return fnv1a64(bytes.data(), bytes.size());
}

std::string tokenizer_config_json(const TokenizerConfig& cfg) {
    nlohmann::json j;
    j["grid_x"] = cfg.grid_x;
    j["grid_y"] = cfg.grid_y;
    j["grid_z"] = cfg.grid_z;
    j["class_count"] = cfg.class_count;
    j["downsample"] = cfg.downsample;
    j["vocab"] = cfg.vocab;
    j["code_dim"] = cfg.code_dim;
    j["hidden"] = cfg.hidden;
    j["scales"] = cfg.scales;
    j["frozen_zero"] = cfg.frozen_zero;
    return j.dump();
}

TokenizerConfig tokenizer_config_from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("tokenizer config: invalid JSON: ") + e.what());
    }
    static const std::vector<std::string> known = {"grid_x", "grid_y",   "grid_z", "class_count", "downsample",
                                                   "vocab",  "code_dim", "hidden", "scales",      "frozen_zero"};
    for (const auto& item : j.items())
        if (std::find(known.begin(), known.end(), item.key()) == known.end())
            throw ConfigError("tokenizer config: unknown key '" + item.key() + "'");
    TokenizerConfig cfg;
    try {
        cfg.grid_x = j.at("grid_x").get<int>();
        cfg.grid_y = j.at("grid_y").get<int>();
        cfg.grid_z = j.at("grid_z").get<int>();
        cfg.class_count = j.at("class_count").get<int>();
        cfg.downsample = j.at("downsample").get<int>();
        cfg.vocab = j.at("vocab").get<int>();
        cfg.code_dim = j.at("code_dim").get<int>();
        cfg.hidden = j.at("hidden").get<int>();
        cfg.scales = j.at("scales").get<std::vector<int>>();
        cfg.frozen_zero = j.at("frozen_zero").get<bool>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("tokenizer config: ") + e.what());
    }
    cfg.validate();
    return cfg;
}

}  // namespace occtens
