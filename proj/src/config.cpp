#include "occtens/config.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <vector>

#include "json.hpp"
#include "occtens/common.hpp"

namespace occtens {

namespace {

using nlohmann::json;

void reject_unknown(const json& j, const char* section, const std::vector<std::string>& known) {
    if (!j.is_object()) throw ConfigError(std::string("run config: section '") + section + "' must be an object");
    for (auto& item : j.items())
        if (std::find(known.begin(), known.end(), item.key()) == known.end())
            throw ConfigError(std::string("run config: unknown key '") + section + "." + item.key() + "'");
}

template <typename T>
void take(const json& j, const char* key, T& field) {
    if (j.contains(key)) field = j.at(key).get<T>();
}

void overlay_world(const json& j, WorldConfig& w) {
    reject_unknown(j, "world",
                   {"x", "y", "z", "class_count", "frames", "vehicles", "pedestrians", "static_blocks", "cell_size",
                    "rate_hz", "downsample", "density_min", "density_max", "ego_speed_min", "ego_speed_max",
                    "vehicle_speed_min", "vehicle_speed_max", "ego_length", "ego_width"});
    take(j, "x", w.x);
    take(j, "y", w.y);
    take(j, "z", w.z);
    take(j, "class_count", w.class_count);
    take(j, "frames", w.frames);
    take(j, "vehicles", w.vehicles);
    take(j, "pedestrians", w.pedestrians);
    take(j, "static_blocks", w.static_blocks);
    take(j, "cell_size", w.cell_size);
    take(j, "rate_hz", w.rate_hz);
    take(j, "downsample", w.downsample);
    take(j, "density_min", w.density_min);
    take(j, "density_max", w.density_max);
    take(j, "ego_speed_min", w.ego_speed_min);
    take(j, "ego_speed_max", w.ego_speed_max);
    take(j, "vehicle_speed_min", w.vehicle_speed_min);
    take(j, "vehicle_speed_max", w.vehicle_speed_max);
    take(j, "ego_length", w.ego_length);
    take(j, "ego_width", w.ego_width);
}

void overlay_tokenizer(const json& j, TokenizerConfig& t) {
    reject_unknown(j, "tokenizer",
                   {"grid_x", "grid_y", "grid_z", "class_count", "downsample", "vocab", "code_dim", "hidden",
                    "scales", "frozen_zero"});
    take(j, "grid_x", t.grid_x);
    take(j, "grid_y", t.grid_y);
    take(j, "grid_z", t.grid_z);
    take(j, "class_count", t.class_count);
    take(j, "downsample", t.downsample);
    take(j, "vocab", t.vocab);
    take(j, "code_dim", t.code_dim);
    take(j, "hidden", t.hidden);
    take(j, "scales", t.scales);
    take(j, "frozen_zero", t.frozen_zero);
}

void overlay_model(const json& j, ModelConfig& m) {
    reject_unknown(j, "model",
                   {"hidden", "heads", "layers_temporal", "layers_spatial", "layers_gen", "occ_vocab", "pose_bins",
                    "scales", "frames", "code_dim", "latent_h", "latent_w", "include_pose", "temporal_mask"});
    take(j, "hidden", m.hidden);
    take(j, "heads", m.heads);
    take(j, "layers_temporal", m.layers_temporal);
    take(j, "layers_spatial", m.layers_spatial);
    take(j, "layers_gen", m.layers_gen);
    take(j, "occ_vocab", m.occ_vocab);
    take(j, "scales", m.scales);
    take(j, "frames", m.frames);
    take(j, "code_dim", m.code_dim);
    take(j, "latent_h", m.latent_h);
    take(j, "latent_w", m.latent_w);
    take(j, "include_pose", m.include_pose);
    take(j, "temporal_mask", m.temporal_mask);
    if (j.contains("pose_bins")) {
        const json& b = j.at("pose_bins");
        reject_unknown(b, "model.pose_bins", {"vx", "vy", "vtheta", "x_min", "x_max", "y_min", "y_max", "t_min", "t_max"});
        take(b, "vx", m.pose_bins.vx);
        take(b, "vy", m.pose_bins.vy);
        take(b, "vtheta", m.pose_bins.vtheta);
        take(b, "x_min", m.pose_bins.x_min);
        take(b, "x_max", m.pose_bins.x_max);
        take(b, "y_min", m.pose_bins.y_min);
        take(b, "y_max", m.pose_bins.y_max);
        take(b, "t_min", m.pose_bins.t_min);
        take(b, "t_max", m.pose_bins.t_max);
    }
}

void overlay_loss(const json& j, losses::LossWeights& w) {
    reject_unknown(j, "loss",
                   {"lambda_ce", "lambda_lovasz", "lambda_geoscal", "lambda_semscal", "beta_occ", "beta_pose",
                    "codebook", "commitment"});
    take(j, "lambda_ce", w.lambda_ce);
    take(j, "lambda_lovasz", w.lambda_lovasz);
    take(j, "lambda_geoscal", w.lambda_geoscal);
    take(j, "lambda_semscal", w.lambda_semscal);
    take(j, "beta_occ", w.beta_occ);
    take(j, "beta_pose", w.beta_pose);
    take(j, "codebook", w.codebook);
    take(j, "commitment", w.commitment);
}

void overlay_training(const json& j, TrainingConfig& t) {
    reject_unknown(j, "training",
                   {"tokenizer_steps", "wm_steps", "batch", "lr_tokenizer", "lr_wm", "adam_beta1", "adam_beta2",
                    "adam_eps", "eval_every", "episodes", "val_episodes", "eval_history", "eval_horizon"});
    take(j, "tokenizer_steps", t.tokenizer_steps);
    take(j, "wm_steps", t.wm_steps);
    take(j, "batch", t.batch);
    take(j, "lr_tokenizer", t.lr_tokenizer);
    take(j, "lr_wm", t.lr_wm);
    take(j, "adam_beta1", t.adam_beta1);
    take(j, "adam_beta2", t.adam_beta2);
    take(j, "adam_eps", t.adam_eps);
    take(j, "eval_every", t.eval_every);
    take(j, "episodes", t.episodes);
    take(j, "val_episodes", t.val_episodes);
    take(j, "eval_history", t.eval_history);
    take(j, "eval_horizon", t.eval_horizon);
}

}  // namespace

void TrainingConfig::validate() const {
    if (tokenizer_steps < 1 || wm_steps < 1) throw ConfigError("training: step counts must be >= 1");
    if (batch < 1) throw ConfigError("training: batch must be >= 1");
    if (lr_tokenizer <= 0.0 || lr_wm <= 0.0) throw ConfigError("training: learning rates must be positive");
    if (adam_beta1 < 0.0 || adam_beta1 >= 1.0 || adam_beta2 < 0.0 || adam_beta2 >= 1.0)
        throw ConfigError("training: adam betas must lie in [0, 1)");
    if (adam_eps <= 0.0) throw ConfigError("training: adam_eps must be positive");
    if (eval_every < 1) throw ConfigError("training: eval_every must be >= 1");
    if (episodes < 1 || val_episodes < 1) throw ConfigError("training: episode counts must be >= 1");
    if (eval_history < 1 || eval_horizon < 1) throw ConfigError("training: eval history/horizon must be >= 1");
}

void RunConfig::validate() const {
    if (world.x < 1 || world.y < 1 || world.z < 1) throw ConfigError("world: grid dims must be >= 1");
    if (world.class_count < 2) throw ConfigError("world: class_count must be >= 2");
    if (world.frames < 2) throw ConfigError("world: frames must be >= 2");
    if (world.cell_size <= 0.0) throw ConfigError("world: cell_size must be positive");
    if (world.rate_hz <= 0.0) throw ConfigError("world: rate_hz must be positive");
    if (world.vehicles < 0 || world.pedestrians < 0 || world.static_blocks < 0)
        throw ConfigError("world: object counts must be >= 0");
    if (!(world.density_min >= 0.0 && world.density_min < world.density_max && world.density_max <= 1.0))
        throw ConfigError("world: density band must satisfy 0 <= min < max <= 1");
    tokenizer.validate();
    model.validate();
    training.validate();

    if (tokenizer.grid_x != world.x || tokenizer.grid_y != world.y || tokenizer.grid_z != world.z)
        throw ConfigError("run config: tokenizer grid dims disagree with world dims");
    if (tokenizer.class_count != world.class_count)
        throw ConfigError("run config: tokenizer class_count disagrees with world class_count");
    if (tokenizer.downsample != world.downsample)
        throw ConfigError("run config: tokenizer downsample disagrees with world downsample");
    if (model.occ_vocab != tokenizer.vocab) throw ConfigError("run config: model occ_vocab disagrees with tokenizer vocab");
    if (model.code_dim != tokenizer.code_dim)
        throw ConfigError("run config: model code_dim disagrees with tokenizer code_dim");
    if (model.scales != tokenizer.scales) throw ConfigError("run config: model scales disagree with tokenizer scales");
    if (model.latent_h != tokenizer.latent_h() || model.latent_w != tokenizer.latent_w())
        throw ConfigError("run config: model latent dims disagree with tokenizer latent dims");
    if (model.frames != world.frames) throw ConfigError("run config: model frames disagree with world frames");
    if (training.eval_history + training.eval_horizon > world.frames)
        throw ConfigError("run config: eval_history + eval_horizon exceeds world frames");
    const losses::LossWeights& w = loss;
    for (double v : {w.lambda_ce, w.lambda_lovasz, w.lambda_geoscal, w.lambda_semscal, w.beta_occ, w.beta_pose,
                     w.codebook, w.commitment})
        if (v < 0.0) throw ConfigError("loss: weights must be >= 0");
}

RunConfig default_run_config() { return RunConfig{}; }

std::string run_config_json(const RunConfig& cfg) {
    json j;
    const WorldConfig& w = cfg.world;
    j["world"] = {{"x", w.x},
                  {"y", w.y},
                  {"z", w.z},
                  {"class_count", w.class_count},
                  {"frames", w.frames},
                  {"vehicles", w.vehicles},
                  {"pedestrians", w.pedestrians},
                  {"static_blocks", w.static_blocks},
                  {"cell_size", w.cell_size},
                  {"rate_hz", w.rate_hz},
                  {"downsample", w.downsample},
                  {"density_min", w.density_min},
                  {"density_max", w.density_max},
                  {"ego_speed_min", w.ego_speed_min},
                  {"ego_speed_max", w.ego_speed_max},
                  {"vehicle_speed_min", w.vehicle_speed_min},
                  {"vehicle_speed_max", w.vehicle_speed_max},
                  {"ego_length", w.ego_length},
                  {"ego_width", w.ego_width}};
    j["tokenizer"] = json::parse(tokenizer_config_json(cfg.tokenizer));
    j["model"] = json::parse(model_config_json(cfg.model));
    const losses::LossWeights& lw = cfg.loss;
    j["loss"] = {{"lambda_ce", lw.lambda_ce},     {"lambda_lovasz", lw.lambda_lovasz},
                 {"lambda_geoscal", lw.lambda_geoscal}, {"lambda_semscal", lw.lambda_semscal},
                 {"beta_occ", lw.beta_occ},       {"beta_pose", lw.beta_pose},
                 {"codebook", lw.codebook},       {"commitment", lw.commitment}};
    const TrainingConfig& t = cfg.training;
    j["training"] = {{"tokenizer_steps", t.tokenizer_steps},
                     {"wm_steps", t.wm_steps},
                     {"batch", t.batch},
                     {"lr_tokenizer", t.lr_tokenizer},
                     {"lr_wm", t.lr_wm},
                     {"adam_beta1", t.adam_beta1},
                     {"adam_beta2", t.adam_beta2},
                     {"adam_eps", t.adam_eps},
                     {"eval_every", t.eval_every},
                     {"episodes", t.episodes},
                     {"val_episodes", t.val_episodes},
                     {"eval_history", t.eval_history},
                     {"eval_horizon", t.eval_horizon}};
    j["seed"] = cfg.seed;
    j["out_dir"] = cfg.out_dir;
    return j.dump(2);
}

RunConfig run_config_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("run config: invalid JSON: ") + e.what());
    }
    reject_unknown(j, "<root>", {"world", "tokenizer", "model", "loss", "training", "seed", "out_dir"});
    RunConfig cfg;
    try {
        if (j.contains("world")) overlay_world(j.at("world"), cfg.world);
        if (j.contains("tokenizer")) overlay_tokenizer(j.at("tokenizer"), cfg.tokenizer);
        if (j.contains("model")) overlay_model(j.at("model"), cfg.model);
        if (j.contains("loss")) overlay_loss(j.at("loss"), cfg.loss);
        if (j.contains("training")) overlay_training(j.at("training"), cfg.training);
        take(j, "seed", cfg.seed);
        take(j, "out_dir", cfg.out_dir);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("run config: bad value: ") + e.what());
    }
    cfg.validate();
    return cfg;
}

RunConfig load_run_config(const std::string& path) {
    if (path.empty()) {
        RunConfig cfg;
        cfg.validate();
        return cfg;
    }
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("run config: cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return run_config_from_json(ss.str());
}

}  // namespace occtens
