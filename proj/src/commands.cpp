#include "occtens/commands.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "occtens/checkpoint.hpp"
#include "occtens/common.hpp"
#include "occtens/motion.hpp"
#include "occtens/visualize.hpp"

namespace fs = std::filesystem;

namespace occtens::cmd {

namespace {

void emit(const train::LogSink& log, nlohmann::json j) {
    if (log) log(j.dump());
}

std::string prepare_out(const RunConfig& cfg) {
    fs::create_directories(cfg.out_dir);
    std::string echo_path = (fs::path(cfg.out_dir) / "config.json").string();
    std::ofstream f(echo_path, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("cannot write config echo " + echo_path);
    f << run_config_json(cfg) << "\n";
    return echo_path;
}

std::string out_path(const RunConfig& cfg, const std::string& name) {
    return (fs::path(cfg.out_dir) / name).string();
}

void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("cannot write " + path);
    f << text;
    if (!f) throw DataError("write failed for " + path);
}

uint64_t params_hash(const ad::ParamStore& ps) {
    std::string buf;
    for (const Tensor& t : ps.values)
        buf.append(reinterpret_cast<const char*>(t.data.data()), t.data.size() * sizeof(float));
    return fnv1a64(buf.data(), buf.size());
}

std::vector<const SemanticGrid*> frame_pool(const std::vector<Sequence>& eps) {
    std::vector<const SemanticGrid*> pool;
    for (const Sequence& ep : eps)
        for (const Frame& f : ep.frames) pool.push_back(&f.grid);
    return pool;
}

std::array<double, 3> se2_compose(const std::array<double, 3>& a, const std::array<double, 3>& b) {
    double c = std::cos(a[2]), s = std::sin(a[2]);
    return {a[0] + c * b[0] - s * b[1], a[1] + s * b[0] + c * b[1], wrap_angle(a[2] + b[2])};
}

}  // namespace

uint64_t val_seed(const RunConfig& cfg) { return cfg.seed + 1000003ull; }

std::vector<std::string> gen_data(const RunConfig& cfg, const train::LogSink& log) {
    prepare_out(cfg);
    std::vector<std::string> paths;
    std::vector<Sequence> train_eps = train::make_episodes(cfg.world, cfg.seed, cfg.training.episodes);
    std::vector<Sequence> val_eps = train::make_episodes(cfg.world, val_seed(cfg), cfg.training.val_episodes);
    char name[32];
    for (size_t i = 0; i < train_eps.size(); ++i) {
        std::snprintf(name, sizeof(name), "ep_%03zu.occt", i);
        std::string p = out_path(cfg, name);
        save_sequence(train_eps[i], p);
        paths.push_back(p);
        emit(log, {{"event", "gen_data"}, {"split", "train"}, {"path", p}, {"frames", train_eps[i].frames.size()}});
    }
    for (size_t i = 0; i < val_eps.size(); ++i) {
        std::snprintf(name, sizeof(name), "val_%03zu.occt", i);
        std::string p = out_path(cfg, name);
        save_sequence(val_eps[i], p);
        paths.push_back(p);
        emit(log, {{"event", "gen_data"}, {"split", "val"}, {"path", p}, {"frames", val_eps[i].frames.size()}});
    }
    return paths;
}

train::TokenizerTrainResult train_tokenizer(const RunConfig& cfg, bool resume, const train::LogSink& log) {
    prepare_out(cfg);
    std::vector<Sequence> train_eps = train::make_episodes(cfg.world, cfg.seed, cfg.training.episodes);
    std::vector<Sequence> val_eps = train::make_episodes(cfg.world, val_seed(cfg), cfg.training.val_episodes);
    std::vector<const SemanticGrid*> pool = frame_pool(train_eps);
    std::vector<const SemanticGrid*> val = frame_pool(val_eps);

    std::string best_path = out_path(cfg, "tokenizer.ckpt");
    std::string last_path = out_path(cfg, "tokenizer_last.ckpt");
    std::string state_path = out_path(cfg, "tokenizer_state.bin");

    SceneTokenizer tok = resume ? SceneTokenizer::load(last_path) : SceneTokenizer(cfg.tokenizer, cfg.seed);
    if (resume && !(tok.config() == cfg.tokenizer))
        throw ConfigError("train-tokenizer: resume checkpoint config disagrees with run config");
    train::TrainState state;
    if (resume)
        state = train::TrainState::load(state_path, tok.param_hash());
    else
        state.best_metric = -1.0;

    std::vector<Tensor> best_values;
    train::TokenizerTrainResult res = train::train_tokenizer(tok, pool, val, cfg, state, log, &best_values);

    tok.save(last_path);
    state.save(state_path, tok.param_hash());
    if (!best_values.empty()) {
        std::vector<Tensor> last_values = tok.params().values;
        tok.params().values = best_values;
        tok.save(best_path);
        tok.params().values = last_values;
    }
    emit(log, {{"event", "done"},
               {"stage", "tokenizer"},
               {"best_miou", res.best_miou},
               {"best_step", res.best_step},
               {"checkpoint", best_path}});
    return res;
}

train::WorldModelTrainResult train_world_model(const RunConfig& cfg, bool resume, const train::LogSink& log) {
    prepare_out(cfg);
    SceneTokenizer tok = SceneTokenizer::load(out_path(cfg, "tokenizer.ckpt"));
    if (!(tok.config() == cfg.tokenizer))
        throw ConfigError("train-wm: tokenizer checkpoint config disagrees with run config");

    auto cached_tokens = [&](const std::string& name, uint64_t ep_seed, int count) {
        std::string path = out_path(cfg, name);
        if (fs::exists(path)) {
            emit(log, {{"event", "token_cache"}, {"path", path}, {"hit", true}});
            return train::load_token_cache(path, tok.param_hash());
        }
        std::vector<Sequence> eps = train::make_episodes(cfg.world, ep_seed, count);
        std::vector<WorldModel::TokenSequence> tokens;
        for (const Sequence& ep : eps) tokens.push_back(train::tokenize_episode(tok, cfg.model.pose_bins, ep));
        train::save_token_cache(path, tok.param_hash(), tokens);
        emit(log, {{"event", "token_cache"}, {"path", path}, {"hit", false}});
        return tokens;
    };
    std::vector<WorldModel::TokenSequence> pool = cached_tokens("tokens_train.bin", cfg.seed, cfg.training.episodes);
    std::vector<WorldModel::TokenSequence> val =
        cached_tokens("tokens_val.bin", val_seed(cfg), cfg.training.val_episodes);

    std::string best_path = out_path(cfg, "wm.ckpt");
    std::string last_path = out_path(cfg, "wm_last.ckpt");
    std::string state_path = out_path(cfg, "wm_state.bin");

    WorldModel wm = resume ? WorldModel::load(last_path, tok) : WorldModel(cfg.model, tok, cfg.seed);
    if (resume && !(wm.config() == cfg.model))
        throw ConfigError("train-wm: resume checkpoint config disagrees with run config");
    train::TrainState state;
    if (resume) state = train::TrainState::load(state_path, params_hash(wm.params()));

    std::vector<Tensor> best_values;
    train::WorldModelTrainResult res = train::train_world_model(wm, pool, val, cfg, state, log, &best_values);

    wm.save(last_path);
    state.save(state_path, params_hash(wm.params()));
    if (!best_values.empty()) {
        std::vector<Tensor> last_values = wm.params().values;
        wm.params().values = best_values;
        wm.save(best_path);
        wm.params().values = last_values;
    }
    emit(log, {{"event", "done"},
               {"stage", "world_model"},
               {"best_val_loss", res.best_val_loss},
               {"best_step", res.best_step},
               {"checkpoint", best_path}});
    return res;
}

std::vector<int> read_pose_file(const std::string& path, const PoseVocab& bins) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("pose file: cannot open " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(ss.str());
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("pose file: invalid JSON: ") + e.what());
    }
    if (!j.is_array() || j.empty()) throw DataError("pose file: expected a non-empty JSON array");
    std::vector<int> tokens;
    for (const auto& el : j) {
        if (el.is_number_integer()) {
            int t = el.get<int>();
            if (t < 0 || t >= bins.size()) throw DataError("pose file: token " + std::to_string(t) + " out of range");
            tokens.push_back(t);
        } else if (el.is_array() && el.size() == 3) {
            RelPose p{el[0].get<double>(), el[1].get<double>(), el[2].get<double>()};
            tokens.push_back(pose_token_index(quantize_pose(p, bins), bins));
        } else {
            throw DataError("pose file: entries must be token ids or [dx, dy, dtheta] triples");
        }
    }
    return tokens;
}

RolloutArtifacts rollout(const RunConfig& cfg, RolloutMode mode, const std::string& pose_file, int horizon,
                         const train::LogSink& log) {
    prepare_out(cfg);
    SceneTokenizer tok = SceneTokenizer::load(out_path(cfg, "tokenizer.ckpt"));
    WorldModel wm = WorldModel::load(out_path(cfg, "wm.ckpt"), tok);

    Sequence episode = generate_toy_world(cfg.world, cfg.seed);
    int history = std::min(cfg.training.eval_history, static_cast<int>(episode.frames.size()));
    Sequence prefix;
    prefix.rate_hz = episode.rate_hz;
    prefix.frames.assign(episode.frames.begin(), episode.frames.begin() + history);

    RolloutRequest req;
    req.history = train::tokenize_episode(tok, cfg.model.pose_bins, prefix);
    req.mode = mode;
    req.seed = cfg.seed;
    if (mode == RolloutMode::control) {
        if (pose_file.empty()) throw ConfigError("rollout: control mode requires --pose-file");
        req.pose_overrides = read_pose_file(pose_file, cfg.model.pose_bins);
        req.horizon = static_cast<int>(req.pose_overrides.size());
    } else {
        req.horizon = horizon > 0 ? horizon : cfg.world.frames - history;
    }

    auto t0 = std::chrono::steady_clock::now();
    RolloutResult result = ::occtens::rollout(wm, req);
    auto t1 = std::chrono::steady_clock::now();
    double ms = std::chrono::duration<double, std::milli>(t1 - t0).count();

    DecodedRollout decoded = decode_rollout(tok, wm, result.occ, result.pose, cfg.world.cell_size);

    // anchor the file on the last observed frame so it stands alone as a
    // valid sequence; rows of the CSV line up with its frames
    Sequence out_seq;
    out_seq.rate_hz = cfg.world.rate_hz;
    Frame anchor;
    anchor.grid = prefix.frames.back().grid;
    anchor.rel_pose = RelPose{};
    anchor.timestamp_index = 0;
    out_seq.frames.push_back(std::move(anchor));
    for (size_t i = 0; i < decoded.grids.size(); ++i) {
        Frame f;
        f.grid = decoded.grids[i];
        f.rel_pose = result.pose[i] >= 0 ? decode_pose_token(result.pose[i], cfg.model.pose_bins) : RelPose{};
        f.timestamp_index = 1 + static_cast<int>(i);
        out_seq.frames.push_back(std::move(f));
    }
    RolloutArtifacts art;
    art.occt_path = out_path(cfg, "rollout.occt");
    art.csv_path = out_path(cfg, "trajectory.csv");
    save_sequence(out_seq, art.occt_path);

    std::ostringstream csv;
    csv << "frame,x,y,theta\n";
    for (size_t i = 0; i < decoded.trajectory.size(); ++i) {
        char line[96];
        std::snprintf(line, sizeof(line), "%zu,%.6f,%.6f,%.6f\n", i, decoded.trajectory[i][0],
                      decoded.trajectory[i][1], decoded.trajectory[i][2]);
        csv << line;
    }
    write_text_file(art.csv_path, csv.str());

    art.occ_tokens_per_frame = cfg.tokenizer.tokens_per_frame();
    art.pose_tokens_per_frame = cfg.model.include_pose ? 1 : 0;
    art.frames = req.horizon;
    art.ms_per_frame = ms / req.horizon;
    art.tokens = std::move(result);
    art.decoded = std::move(decoded);
    emit(log, {{"event", "rollout_stats"},
               {"mode", mode == RolloutMode::control ? "control" : "plan"},
               {"frames", art.frames},
               {"occ_tokens_per_frame", art.occ_tokens_per_frame},
               {"pose_tokens_per_frame", art.pose_tokens_per_frame},
               {"tokens_total", (art.occ_tokens_per_frame + art.pose_tokens_per_frame) * art.frames},
               {"ms_per_frame", art.ms_per_frame},
               {"occt", art.occt_path},
               {"csv", art.csv_path}});
    return art;
}

EvalResult eval(const RunConfig& cfg, bool baseline_copy_last, const train::LogSink& log) {
    prepare_out(cfg);
    SceneTokenizer tok = SceneTokenizer::load(out_path(cfg, "tokenizer.ckpt"));
    WorldModel wm = WorldModel::load(out_path(cfg, "wm.ckpt"), tok);

    int history = cfg.training.eval_history;
    int horizon = cfg.training.eval_horizon;
    std::vector<int> horizons(static_cast<size_t>(horizon));
    for (int h = 1; h <= horizon; ++h) horizons[static_cast<size_t>(h - 1)] = h;

    std::vector<std::vector<std::array<double, 3>>> tracks;
    std::vector<Sequence> eps = train::make_episodes(cfg.world, val_seed(cfg), cfg.training.val_episodes, &tracks);

    metrics::ForecastAccumulator fc(horizons, cfg.world.class_count);
    metrics::ForecastAccumulator recon(horizons, cfg.world.class_count);
    metrics::PlanningAccumulator plan(horizons, cfg.world.ego_length, cfg.world.ego_width);
    metrics::ForecastAccumulator base_fc(horizons, cfg.world.class_count);
    metrics::PlanningAccumulator base_plan(horizons, cfg.world.ego_length, cfg.world.ego_width);

    for (size_t e = 0; e < eps.size(); ++e) {
        const Sequence& ep = eps[e];
        if (static_cast<int>(ep.frames.size()) < history + horizon)
            throw DataError("eval: episode shorter than history + horizon");
        Sequence prefix;
        prefix.rate_hz = ep.rate_hz;
        prefix.frames.assign(ep.frames.begin(), ep.frames.begin() + history);
        Sequence future;
        future.rate_hz = ep.rate_hz;
        future.frames.assign(ep.frames.begin() + history, ep.frames.begin() + history + horizon);

        RolloutRequest req;
        req.history = train::tokenize_episode(tok, cfg.model.pose_bins, prefix);
        req.horizon = horizon;
        req.mode = RolloutMode::plan;
        req.seed = cfg.seed + e;
        RolloutResult result = ::occtens::rollout(wm, req);
        DecodedRollout decoded = decode_rollout(tok, wm, result.occ, result.pose, cfg.world.cell_size);

        std::vector<SemanticGrid> gt_future;
        for (const Frame& f : future.frames) gt_future.push_back(f.grid);
        fc.add_episode(decoded.grids, gt_future);

        std::vector<SemanticGrid> rt;
        for (const Frame& f : future.frames) rt.push_back(tok.detokenize(tok.tokenize(f.grid), f.grid.cell_size));
        recon.add_episode(rt, gt_future);

        const std::vector<std::array<double, 3>>& track = tracks[e];
        std::array<double, 3> anchor = track[static_cast<size_t>(history - 1)];
        std::vector<std::array<double, 3>> pred_abs;
        for (const std::array<double, 3>& rel : decoded.trajectory) pred_abs.push_back(se2_compose(anchor, rel));
        std::vector<std::array<double, 3>> gt_abs(track.begin() + history - 1, track.begin() + history + horizon);
        plan.add_episode(pred_abs, gt_abs, future);

        if (baseline_copy_last) {
            std::vector<SemanticGrid> hold(static_cast<size_t>(horizon), prefix.frames.back().grid);
            base_fc.add_episode(hold, gt_future);
            std::vector<std::array<double, 3>> stay(static_cast<size_t>(horizon) + 1, anchor);
            base_plan.add_episode(stay, gt_abs, future);
        }
        emit(log, {{"event", "eval_episode"}, {"episode", e}, {"frames", ep.frames.size()}});
    }

    EvalResult res;
    res.forecast = fc.report();
    res.planning = plan.report();
    res.recon = recon.report();
    write_text_file(out_path(cfg, "eval_forecast.json"), metrics::forecast_report_json(res.forecast));
    write_text_file(out_path(cfg, "eval_forecast.txt"), metrics::forecast_report_text(res.forecast));
    write_text_file(out_path(cfg, "eval_planning.json"), metrics::planning_report_json(res.planning));
    write_text_file(out_path(cfg, "eval_planning.txt"), metrics::planning_report_text(res.planning));
    write_text_file(out_path(cfg, "eval_recon.json"), metrics::forecast_report_json(res.recon));
    if (baseline_copy_last) {
        res.has_baseline = true;
        res.baseline_forecast = base_fc.report();
        res.baseline_planning = base_plan.report();
        write_text_file(out_path(cfg, "eval_baseline_forecast.json"),
                        metrics::forecast_report_json(res.baseline_forecast));
        write_text_file(out_path(cfg, "eval_baseline_planning.json"),
                        metrics::planning_report_json(res.baseline_planning));
    }
    emit(log, {{"event", "eval_summary"},
               {"miou_avg", res.forecast.miou_avg},
               {"iou_avg", res.forecast.iou_avg},
               {"l2_avg", res.planning.l2_avg},
               {"collision_avg", res.planning.collision_avg},
               {"recon_miou_avg", res.recon.miou_avg}});
    return res;
}

std::vector<std::string> visualize(const std::string& occt_path, const std::string& out_dir,
                                   const train::LogSink& log) {
    Sequence seq = load_sequence(occt_path);
    if (seq.frames.empty()) throw DataError("visualize: empty sequence in " + occt_path);
    fs::create_directories(out_dir);

    std::vector<RelPose> rels;
    for (const Frame& f : seq.frames) rels.push_back(f.rel_pose);
    std::vector<std::array<double, 3>> traj = compose_trajectory(rels);

    const SemanticGrid& g0 = seq.frames[0].grid;
    std::array<double, 3> centre = {g0.x * g0.cell_size / 2.0, g0.y * g0.cell_size / 2.0, 0.0};

    const int px = 8;
    std::vector<std::string> paths;
    char name[32];
    for (size_t i = 0; i < seq.frames.size(); ++i) {
        const SemanticGrid& g = seq.frames[i].grid;
        viz::Image img = viz::render_bev(g, px);
        double c = std::cos(centre[2]), s = std::sin(centre[2]);
        std::array<double, 3> pose = {centre[0] + c * traj[i][0] - s * traj[i][1],
                                      centre[1] + s * traj[i][0] + c * traj[i][1], wrap_angle(centre[2] + traj[i][2])};
        viz::draw_ego_arrow(img, pose, g.cell_size, px, 3.0 * g.cell_size);
        std::snprintf(name, sizeof(name), "frame_%03zu.ppm", i);
        std::string p = (fs::path(out_dir) / name).string();
        viz::write_ppm(img, p);
        paths.push_back(p);
    }
    emit(log, {{"event", "visualize"}, {"frames", paths.size()}, {"out_dir", out_dir}});
    return paths;
}

}  // namespace occtens::cmd
