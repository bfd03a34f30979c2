#include <cstdio>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "occtens/commands.hpp"
#include "occtens/common.hpp"

using namespace occtens;

namespace {

struct CommonFlags {
    std::string config_path;
    std::string out_dir;
    int64_t seed = -1;
    std::string scales;
};

void add_common(CLI::App* sub, CommonFlags& f) {
    sub->add_option("--config", f.config_path, "run config JSON file (defaults apply when omitted)");
    sub->add_option("--seed", f.seed, "override config seed");
    sub->add_option("--out", f.out_dir, "override output directory");
    sub->add_option("--scales", f.scales, "override scale ladder, comma separated (e.g. 1,2,4,8)");
}

std::vector<int> parse_scales(const std::string& text) {
    std::vector<int> scales;
    std::string cur;
    for (char c : text + ",") {
        if (c == ',') {
            if (cur.empty()) throw ConfigError("--scales: empty entry");
            size_t used = 0;
            int v = std::stoi(cur, &used);
            if (used != cur.size()) throw ConfigError("--scales: bad entry '" + cur + "'");
            scales.push_back(v);
            cur.clear();
        } else if (c != ' ') {
            cur += c;
        }
    }
    return scales;
}

RunConfig resolve_config(const CommonFlags& f) {
    RunConfig cfg = load_run_config(f.config_path);
    if (f.seed >= 0) cfg.seed = static_cast<uint64_t>(f.seed);
    if (!f.out_dir.empty()) cfg.out_dir = f.out_dir;
    if (!f.scales.empty()) {
        std::vector<int> s = parse_scales(f.scales);
        cfg.tokenizer.scales = s;
        cfg.model.scales = s;
        cfg.validate();
    }
    return cfg;
}

void log_line(const std::string& line) {
    std::fputs(line.c_str(), stdout);
    std::fputc('\n', stdout);
    std::fflush(stdout);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"occtens: occupancy world model on a synthetic voxel world"};
    app.require_subcommand(1);

    CommonFlags gen_f, ttok_f, twm_f, roll_f, eval_f;
    bool ttok_resume = false, twm_resume = false;
    std::string roll_mode = "plan", roll_pose_file;
    int roll_horizon = 0;
    std::string eval_baseline;
    std::string viz_input, viz_out = "out/viz";

    CLI::App* gen = app.add_subcommand("gen-data", "write toy-world episodes as OCCT files");
    add_common(gen, gen_f);

    CLI::App* ttok = app.add_subcommand("train-tokenizer", "stage 1: train the scene tokenizer");
    add_common(ttok, ttok_f);
    ttok->add_flag("--resume", ttok_resume, "continue from the last checkpoint and optimizer state");

    CLI::App* twm = app.add_subcommand("train-wm", "stage 2: train the world model on cached tokens");
    add_common(twm, twm_f);
    twm->add_flag("--resume", twm_resume, "continue from the last checkpoint and optimizer state");

    CLI::App* roll = app.add_subcommand("rollout", "generate future frames; writes OCCT + trajectory CSV");
    add_common(roll, roll_f);
    roll->add_option("--mode", roll_mode, "plan or control")->check(CLI::IsMember({"plan", "control"}));
    roll->add_option("--pose-file", roll_pose_file, "JSON pose tokens or [dx,dy,dtheta] triples (control mode)");
    roll->add_option("--horizon", roll_horizon, "frames to generate (plan mode; default: rest of episode)");

    CLI::App* ev = app.add_subcommand("eval", "greedy rollouts over val episodes; forecast + planning reports");
    add_common(ev, eval_f);
    ev->add_option("--baseline", eval_baseline, "also evaluate a baseline")->check(CLI::IsMember({"copy-last"}));

    CLI::App* vz = app.add_subcommand("visualize", "render BEV images from an OCCT file");
    vz->add_option("--data", viz_input, "OCCT file to render")->required();
    vz->add_option("--out", viz_out, "image output directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (gen->parsed()) {
            cmd::gen_data(resolve_config(gen_f), log_line);
        } else if (ttok->parsed()) {
            cmd::train_tokenizer(resolve_config(ttok_f), ttok_resume, log_line);
        } else if (twm->parsed()) {
            cmd::train_world_model(resolve_config(twm_f), twm_resume, log_line);
        } else if (roll->parsed()) {
            RolloutMode mode = roll_mode == "control" ? RolloutMode::control : RolloutMode::plan;
            cmd::rollout(resolve_config(roll_f), mode, roll_pose_file, roll_horizon, log_line);
        } else if (ev->parsed()) {
            cmd::eval(resolve_config(eval_f), eval_baseline == "copy-last", log_line);
        } else if (vz->parsed()) {
            cmd::visualize(viz_input, viz_out, log_line);
        }
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const DataError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return 3;
    } catch (const NumericError& e) {
        std::fprintf(stderr, "numeric error: %s\n", e.what());
        return 4;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
