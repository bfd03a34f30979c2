#include "occtens/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "occtens/checkpoint.hpp"
#include "occtens/common.hpp"
#include "occtens/metrics.hpp"
#include "occtens/motion.hpp"
#include "occtens/rng.hpp"

namespace occtens::train {

void Adam::init(const ad::ParamStore& ps) {
    t = 0;
    m.clear();
    v.clear();
    for (const Tensor& p : ps.values) {
        m.emplace_back(std::vector<int>(p.shape.begin(), p.shape.end()), 0.0f);
        v.emplace_back(std::vector<int>(p.shape.begin(), p.shape.end()), 0.0f);
    }
}

void Adam::step(ad::ParamStore& ps, const ad::GradStore& g, double lr, double scale) {
    if (m.size() != ps.values.size()) throw ConfigError("adam: moments not initialized for this parameter store");
    for (size_t i = 0; i < m.size(); ++i)
        if (!m[i].same_shape(ps.values[i]))
            throw ConfigError("adam: moment shapes disagree with the parameter store");
    ++t;
    double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (size_t i = 0; i < ps.values.size(); ++i) {
        Tensor& p = ps.values[i];
        const Tensor& gi = g.g[i];
        Tensor& mi = m[i];
        Tensor& vi = v[i];
        for (int64_t e = 0; e < p.numel(); ++e) {
            double grad = static_cast<double>(gi[e]) * scale;
            double mm = beta1 * mi[e] + (1.0 - beta1) * grad;
            double vv = beta2 * vi[e] + (1.0 - beta2) * grad * grad;
            mi[e] = static_cast<float>(mm);
            vi[e] = static_cast<float>(vv);
            double upd = lr * (mm / bc1) / (std::sqrt(vv / bc2) + eps);
            p[e] = static_cast<float>(p[e] - upd);
        }
    }
}

double cosine_lr(double base, int64_t step, int64_t total_steps) {
    if (total_steps <= 1) return base;
    double frac = static_cast<double>(std::min(step, total_steps - 1)) / static_cast<double>(total_steps - 1);
    return base * 0.5 * (1.0 + std::cos(frac * 3.14159265358979323846));
}

std::vector<int> batch_indices(uint64_t seed, int64_t step, int pool, int batch) {
    if (pool < 1 || batch < 1) throw ConfigError("batch_indices: pool and batch must be >= 1");
    Rng rng(seed ^ (0x9E3779B97F4A7C15ull * static_cast<uint64_t>(step + 1)));
    std::vector<int> out(static_cast<size_t>(batch));
    for (int& i : out) i = static_cast<int>(rng.randint(0, pool - 1));
    return out;
}

void TrainState::save(const std::string& path, uint64_t param_hash) const {
    Checkpoint ckpt;
    ckpt.kind = "train_state";
    nlohmann::json j;
    j["step"] = step;
    j["best_metric"] = best_metric;
    j["best_step"] = best_step;
    j["adam_t"] = opt.t;
    j["beta1"] = opt.beta1;
    j["beta2"] = opt.beta2;
    j["eps"] = opt.eps;
    ckpt.config_json = j.dump();
    ckpt.tokenizer_hash = param_hash;
    for (size_t i = 0; i < opt.m.size(); ++i) {
        ckpt.names.push_back("m." + std::to_string(i));
        ckpt.tensors.push_back(opt.m[i]);
    }
    for (size_t i = 0; i < opt.v.size(); ++i) {
        ckpt.names.push_back("v." + std::to_string(i));
        ckpt.tensors.push_back(opt.v[i]);
    }
    save_checkpoint(ckpt, path);
}

TrainState TrainState::load(const std::string& path, uint64_t param_hash) {
    Checkpoint ckpt = load_checkpoint(path);
    if (ckpt.kind != "train_state") throw DataError("train state: wrong checkpoint kind '" + ckpt.kind + "'");
    if (ckpt.tokenizer_hash != param_hash)
        throw DataError("train state: saved beside different parameters (hash mismatch)");
    nlohmann::json j = nlohmann::json::parse(ckpt.config_json);
    TrainState st;
    st.step = j.at("step").get<int64_t>();
    st.best_metric = j.at("best_metric").get<double>();
    st.best_step = j.at("best_step").get<int64_t>();
    st.opt.t = j.at("adam_t").get<int64_t>();
    st.opt.beta1 = j.at("beta1").get<double>();
    st.opt.beta2 = j.at("beta2").get<double>();
    st.opt.eps = j.at("eps").get<double>();
    if (ckpt.names.size() % 2 != 0) throw DataError("train state: odd tensor count");
    size_t half = ckpt.names.size() / 2;
    st.opt.m.resize(half);
    st.opt.v.resize(half);
    for (size_t i = 0; i < ckpt.names.size(); ++i) {
        const std::string& name = ckpt.names[i];
        size_t idx = static_cast<size_t>(std::stoul(name.substr(2)));
        if (idx >= half) throw DataError("train state: tensor index out of range in " + name);
        if (name[0] == 'm')
            st.opt.m[idx] = ckpt.tensors[i];
        else if (name[0] == 'v')
            st.opt.v[idx] = ckpt.tensors[i];
        else
            throw DataError("train state: unexpected tensor " + name);
    }
    return st;
}

double reconstruction_miou(const SceneTokenizer& tok, const std::vector<const SemanticGrid*>& frames) {
    if (frames.empty()) throw DataError("reconstruction_miou: no frames");
    double sum = 0.0;
    for (const SemanticGrid* g : frames) {
        SemanticGrid recon = tok.detokenize(tok.tokenize(*g), g->cell_size);
        sum += metrics::miou(recon, *g).miou;
    }
    return sum / static_cast<double>(frames.size());
}

TokenizerTrainResult train_tokenizer(SceneTokenizer& tok, const std::vector<const SemanticGrid*>& pool,
                                     const std::vector<const SemanticGrid*>& val, const RunConfig& cfg,
                                     TrainState& state, const LogSink& log, std::vector<Tensor>* best_values,
                                     int64_t stop_after) {
    if (pool.empty()) throw DataError("train_tokenizer: empty training pool");
    if (val.empty()) throw DataError("train_tokenizer: empty validation pool");
    const TrainingConfig& tc = cfg.training;
    if (state.opt.m.empty()) {
        state.opt.beta1 = tc.adam_beta1;
        state.opt.beta2 = tc.adam_beta2;
        state.opt.eps = tc.adam_eps;
        state.opt.init(tok.params());
    }
    ad::GradStore gs;
    gs.init_like(tok.params());
    TokenizerTrainResult res;
    res.best_miou = state.best_metric;
    res.best_step = state.best_step;
    int codebook_pid = tok.codebook_pid();

    for (int64_t step = state.step; step < tc.tokenizer_steps; ++step) {
        if (stop_after >= 0 && step >= stop_after) break;
        gs.zero();
        double loss_sum = 0.0;
        losses::TokenizerLossBreakdown agg;
        std::vector<int> batch = batch_indices(cfg.seed, step, static_cast<int>(pool.size()), tc.batch);
        for (int idx : batch) {
            SceneTokenizer::TrainGraph g = tok.training_graph(*pool[static_cast<size_t>(idx)], cfg.loss);
            float lv = g.loss->val()[0];
            if (!std::isfinite(lv))
                throw NumericError("tokenizer training diverged at step " + std::to_string(step) +
                                   " (loss=" + std::to_string(lv) + ")");
            loss_sum += lv;
            agg.ce += g.breakdown.ce;
            agg.lovasz += g.breakdown.lovasz;
            agg.geoscal += g.breakdown.geoscal;
            agg.semscal += g.breakdown.semscal;
            agg.codebook += g.breakdown.codebook;
            agg.commitment += g.breakdown.commitment;
            ad::backward(g.loss, &gs);
        }
        double inv = 1.0 / tc.batch;
        if (tok.config().frozen_zero) {
            // code 0 is the reserved zero vector; it never trains
            Tensor& cg = gs.g[static_cast<size_t>(codebook_pid)];
            for (int c = 0; c < tok.config().code_dim; ++c) cg.at(0, c) = 0.0f;
        }
        state.opt.step(tok.params(), gs, cosine_lr(tc.lr_tokenizer, step, tc.tokenizer_steps), inv);
        state.step = step + 1;
        res.final_loss = loss_sum * inv;

        bool last = step + 1 == tc.tokenizer_steps;
        if ((step + 1) % tc.eval_every == 0 || last) {
            double miou = reconstruction_miou(tok, val);
            if (miou > state.best_metric) {
                state.best_metric = miou;
                state.best_step = step + 1;
                res.best_miou = miou;
                res.best_step = step + 1;
                if (best_values) *best_values = tok.params().values;
            }
            if (log) {
                nlohmann::json j;
                j["event"] = "eval";
                j["stage"] = "tokenizer";
                j["step"] = step + 1;
                j["val_miou"] = miou;
                j["best_miou"] = state.best_metric;
                log(j.dump());
            }
        }
        if (log) {
            nlohmann::json j;
            j["event"] = "step";
            j["stage"] = "tokenizer";
            j["step"] = step + 1;
            j["loss"] = res.final_loss;
            j["ce"] = agg.ce * inv;
            j["lovasz"] = agg.lovasz * inv;
            j["geoscal"] = agg.geoscal * inv;
            j["semscal"] = agg.semscal * inv;
            j["codebook"] = agg.codebook * inv;
            j["commitment"] = agg.commitment * inv;
            j["lr"] = cosine_lr(tc.lr_tokenizer, step, tc.tokenizer_steps);
            log(j.dump());
        }
    }
    res.best_miou = state.best_metric;
    res.best_step = state.best_step;
    return res;
}

WorldModel::TokenSequence tokenize_episode(const SceneTokenizer& tok, const PoseVocab& bins, const Sequence& ep) {
    WorldModel::TokenSequence seq;
    for (const Frame& f : ep.frames) {
        seq.occ.push_back(tok.tokenize(f.grid));
        seq.pose.push_back(pose_token_index(quantize_pose(f.rel_pose, bins), bins));
    }
    return seq;
}

namespace {

void put_u32(std::string& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

struct CacheReader {
    const std::string& buf;
    size_t pos = 0;
    uint32_t u32() {
        if (pos + 4 > buf.size()) throw DataError("token cache: truncated");
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<uint8_t>(buf[pos++])) << (8 * i);
        return v;
    }
    uint64_t u64() {
        if (pos + 8 > buf.size()) throw DataError("token cache: truncated");
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(static_cast<uint8_t>(buf[pos++])) << (8 * i);
        return v;
    }
};

}  // namespace

void save_token_cache(const std::string& path, uint64_t tokenizer_hash,
                      const std::vector<WorldModel::TokenSequence>& episodes) {
    std::string out = "OCTK";
    put_u32(out, 1);
    put_u64(out, tokenizer_hash);
    put_u32(out, static_cast<uint32_t>(episodes.size()));
    for (const WorldModel::TokenSequence& ep : episodes) {
        if (ep.pose.size() != ep.occ.size()) throw DataError("token cache: pose/occ frame count mismatch");
        put_u32(out, static_cast<uint32_t>(ep.occ.size()));
        for (size_t t = 0; t < ep.occ.size(); ++t) {
            put_u32(out, static_cast<uint32_t>(ep.pose[t]));
            const MultiScaleTokenMap& map = ep.occ[t];
            put_u32(out, static_cast<uint32_t>(map.scales.size()));
            for (size_t m = 0; m < map.scales.size(); ++m) {
                put_u32(out, static_cast<uint32_t>(map.scales[m]));
                if (map.maps[m].size() != static_cast<size_t>(map.scales[m]) * static_cast<size_t>(map.scales[m]))
                    throw DataError("token cache: map size disagrees with scale");
                for (int token : map.maps[m]) put_u32(out, static_cast<uint32_t>(token));
            }
        }
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("token cache: cannot open " + path + " for writing");
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw DataError("token cache: write failed for " + path);
}

std::vector<WorldModel::TokenSequence> load_token_cache(const std::string& path, uint64_t expected_hash) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("token cache: cannot open " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    std::string buf = ss.str();
    if (buf.size() < 4 || buf.compare(0, 4, "OCTK") != 0) throw DataError("token cache: bad magic");
    CacheReader r{buf, 4};
    uint32_t version = r.u32();
    if (version != 1) throw DataError("token cache: unsupported version " + std::to_string(version));
    uint64_t hash = r.u64();
    if (hash != expected_hash) throw DataError("token cache: built against a different tokenizer (hash mismatch)");
    uint32_t n_eps = r.u32();
    std::vector<WorldModel::TokenSequence> episodes(n_eps);
    for (WorldModel::TokenSequence& ep : episodes) {
        uint32_t frames = r.u32();
        for (uint32_t t = 0; t < frames; ++t) {
            ep.pose.push_back(static_cast<int>(r.u32()));
            MultiScaleTokenMap map;
            uint32_t m_count = r.u32();
            for (uint32_t m = 0; m < m_count; ++m) {
                int s = static_cast<int>(r.u32());
                if (s < 1 || s > 4096) throw DataError("token cache: implausible scale " + std::to_string(s));
                map.scales.push_back(s);
                std::vector<int> cells(static_cast<size_t>(s) * static_cast<size_t>(s));
                for (int& c : cells) c = static_cast<int>(r.u32());
                map.maps.push_back(std::move(cells));
            }
            ep.occ.push_back(std::move(map));
        }
    }
    if (r.pos != buf.size()) throw DataError("token cache: trailing bytes");
    return episodes;
}

namespace {

double val_loss_wm(const WorldModel& wm, const std::vector<WorldModel::TokenSequence>& val,
                   const losses::LossWeights& w) {
    double sum = 0.0;
    for (const WorldModel::TokenSequence& seq : val) {
        WorldModel::TrainGraph g = wm.training_graph(seq, w);
        sum += g.breakdown.total;
    }
    return sum / static_cast<double>(val.size());
}

}  // namespace

WorldModelTrainResult train_world_model(WorldModel& wm, const std::vector<WorldModel::TokenSequence>& pool,
                                        const std::vector<WorldModel::TokenSequence>& val, const RunConfig& cfg,
                                        TrainState& state, const LogSink& log, std::vector<Tensor>* best_values,
                                     int64_t stop_after) {
    if (pool.empty()) throw DataError("train_world_model: empty training pool");
    if (val.empty()) throw DataError("train_world_model: empty validation pool");
    const TrainingConfig& tc = cfg.training;
    if (state.opt.m.empty()) {
        state.opt.beta1 = tc.adam_beta1;
        state.opt.beta2 = tc.adam_beta2;
        state.opt.eps = tc.adam_eps;
        state.opt.init(wm.params());
        state.best_metric = 1e300;  // val loss: lower is better
    }
    ad::GradStore gs;
    gs.init_like(wm.params());
    WorldModelTrainResult res;
    res.best_val_loss = state.best_metric;
    res.best_step = state.best_step;

    for (int64_t step = state.step; step < tc.wm_steps; ++step) {
        if (stop_after >= 0 && step >= stop_after) break;
        gs.zero();
        double loss_sum = 0.0, occ_sum = 0.0, pose_sum = 0.0;
        std::vector<int> batch = batch_indices(cfg.seed + 0x51ul, step, static_cast<int>(pool.size()), tc.batch);
        for (int idx : batch) {
            WorldModel::TrainGraph g = wm.training_graph(pool[static_cast<size_t>(idx)], cfg.loss);
            float lv = g.loss->val()[0];
            if (!std::isfinite(lv))
                throw NumericError("world model training diverged at step " + std::to_string(step) +
                                   " (loss=" + std::to_string(lv) + ")");
            loss_sum += lv;
            occ_sum += g.breakdown.occ;
            pose_sum += g.breakdown.pose;
            ad::backward(g.loss, &gs);
        }
        double inv = 1.0 / tc.batch;
        state.opt.step(wm.params(), gs, cosine_lr(tc.lr_wm, step, tc.wm_steps), inv);
        state.step = step + 1;
        res.final_loss = loss_sum * inv;

        bool last = step + 1 == tc.wm_steps;
        if ((step + 1) % tc.eval_every == 0 || last) {
            double vl = val_loss_wm(wm, val, cfg.loss);
            if (vl < state.best_metric) {
                state.best_metric = vl;
                state.best_step = step + 1;
                res.best_val_loss = vl;
                res.best_step = step + 1;
                if (best_values) *best_values = wm.params().values;
            }
            if (log) {
                nlohmann::json j;
                j["event"] = "eval";
                j["stage"] = "world_model";
                j["step"] = step + 1;
                j["val_loss"] = vl;
                j["best_val_loss"] = state.best_metric;
                log(j.dump());
            }
        }
        if (log) {
            nlohmann::json j;
            j["event"] = "step";
            j["stage"] = "world_model";
            j["step"] = step + 1;
            j["loss"] = res.final_loss;
            j["occ"] = occ_sum * inv;
            j["pose"] = pose_sum * inv;
            j["lr"] = cosine_lr(tc.lr_wm, step, tc.wm_steps);
            log(j.dump());
        }
    }
    res.best_val_loss = state.best_metric;
    res.best_step = state.best_step;
    return res;
}

std::vector<Sequence> make_episodes(const WorldConfig& world, uint64_t seed, int count,
                                    std::vector<std::vector<std::array<double, 3>>>* tracks) {
    if (count < 1) throw ConfigError("make_episodes: count must be >= 1");
    std::vector<Sequence> eps;
    if (tracks) tracks->clear();
    for (int i = 0; i < count; ++i) {
        std::vector<std::array<double, 3>> track;
        eps.push_back(generate_toy_world(world, seed + static_cast<uint64_t>(i), tracks ? &track : nullptr));
        if (tracks) tracks->push_back(std::move(track));
    }
    return eps;
}

}  // namespace occtens::train
