#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "fdm/common.hpp"
#include "fdm/diffusion.hpp"
#include "fdm/rng.hpp"
#include "fdm/synth.hpp"
#include "fdm/trainer.hpp"
#include "fdm/unet.hpp"

// Run configuration: flat dotted keys (`diffusion.timesteps = 200`), loaded
// from a config file and overridable on the command line. Keys are validated
// against a fixed registry so a typo fails loudly instead of silently using a
// default. Every run writes the effective configuration next to its outputs.

namespace fdm {

class RunConfig {
  public:
    // registry of every known key with its default (as written in a file)
    static const std::map<std::string, std::string>& defaults() {
        static const std::map<std::string, std::string> d = {
            {"seed", "0"},
            {"deterministic", "false"},  // single-threaded kernels, exact runs

            {"diffusion.timesteps", "200"},
            {"diffusion.beta_start", "1e-4"},
            // "auto" solves beta_end so the terminal signal level matches the
            // reference 1000-step schedule (1e-4 .. 0.02)
            {"diffusion.beta_end", "auto"},
            {"diffusion.sigma_mode", "beta"},

            {"model.base_channels", "32"},
            {"model.stage_multipliers", "1,2,3,4"},
            {"model.res_blocks_per_stage", "2"},
            {"model.num_regions", "3"},
            {"model.img_channels", "3"},
            {"model.resolution", "32"},
            {"model.time_embed_dim", "0"},  // 0 -> 4 * base_channels
            {"model.attention_at_lowest", "false"},
            {"model.variant", "shared"},

            {"train.batch_size", "64"},
            {"train.lr", "1e-4"},
            {"train.total_iters", "20000"},
            {"train.ema_rate", "0.9999"},
            {"train.adam_beta1", "0.9"},
            {"train.adam_beta2", "0.999"},
            {"train.adam_eps", "1e-8"},
            {"train.grad_clip_norm", "0"},  // 0 disables clipping
            {"train.checkpoint_every", "1000"},
            {"train.log_every", "50"},

            {"data.dir", ""},  // empty -> generate synthetic scenes
            {"data.num_images", "4000"},
            {"data.region_model", "fg_bg"},
            {"data.shapes", "ellipse,rectangle,blob"},
            {"data.min_size_frac", "0.10"},
            {"data.max_size_frac", "0.30"},
            {"data.texture_amp", "0.25"},
            {"data.color_separation", "0.80"},
            {"data.seed", "auto"},  // auto -> derived from the global seed
            {"data.hflip", "false"},

            {"eval.t_seg", "0"},  // 0 -> schedule-scaled default
            {"eval.num_images", "400"},
            {"eval.avg_draws", "1"},
            {"eval.paper_dice", "false"},
            {"eval.num_generate", "64"},
            {"eval.ref_steps", "600"},
            {"eval.ref_batch", "16"},
            {"eval.ref_lr", "1e-3"},
            {"eval.verbose", "false"},

            {"io.out", "out"},
            {"io.record_every", "0"},  // > 0: also record mask trajectories
        };
        return d;
    }

    RunConfig() : values_(defaults()) {}

    void set(const std::string& key, const std::string& value) {
        auto it = values_.find(key);
        if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
        it->second = value;
    }

    const std::string& str(const std::string& key) const {
        auto it = values_.find(key);
        if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
        return it->second;
    }

    long integer(const std::string& key) const {
        const std::string& s = str(key);
        std::size_t pos = 0;
        long v = 0;
        try {
            v = std::stol(s, &pos);
        } catch (const std::exception&) {
            throw ConfigError(key + ": expected an integer, got '" + s + "'");
        }
        if (pos != s.size()) throw ConfigError(key + ": expected an integer, got '" + s + "'");
        return v;
    }

    double real(const std::string& key) const {
        const std::string& s = str(key);
        std::size_t pos = 0;
        double v = 0;
        try {
            v = std::stod(s, &pos);
        } catch (const std::exception&) {
            throw ConfigError(key + ": expected a number, got '" + s + "'");
        }
        if (pos != s.size()) throw ConfigError(key + ": expected a number, got '" + s + "'");
        return v;
    }

    bool boolean(const std::string& key) const {
        const std::string& s = str(key);
        if (s == "true" || s == "1" || s == "yes") return true;
        if (s == "false" || s == "0" || s == "no") return false;
        throw ConfigError(key + ": expected true/false, got '" + s + "'");
    }

    std::vector<int> int_list(const std::string& key) const {
        std::vector<int> out;
        std::stringstream ss(str(key));
        std::string item;
        while (std::getline(ss, item, ',')) {
            try {
                std::size_t pos = 0;
                out.push_back(std::stoi(item, &pos));
                if (pos != item.size()) throw std::invalid_argument(item);
            } catch (const std::exception&) {
                throw ConfigError(key + ": expected comma-separated integers, got '" + str(key) +
                                  "'");
            }
        }
        return out;
    }

    std::vector<std::string> str_list(const std::string& key) const {
        std::vector<std::string> out;
        std::stringstream ss(str(key));
        std::string item;
        while (std::getline(ss, item, ',')) out.push_back(item);
        return out;
    }

    // `key = value` lines; '#' starts a comment; blank lines ignored.
    void load_file(const std::string& path) {
        std::ifstream f(path);
        if (!f) throw IoError("cannot read config file " + path);
        std::string line;
        int lineno = 0;
        while (std::getline(f, line)) {
            lineno++;
            auto hash = line.find('#');
            if (hash != std::string::npos) line.resize(hash);
            auto trim = [](std::string s) {
                auto issp = [](char c) { return c == ' ' || c == '\t' || c == '\r'; };
                while (!s.empty() && issp(s.front())) s.erase(s.begin());
                while (!s.empty() && issp(s.back())) s.pop_back();
                return s;
            };
            std::string t = trim(line);
            if (t.empty()) continue;
            auto eq = t.find('=');
            if (eq == std::string::npos)
                throw ConfigError(strformat("%s:%d: expected 'key = value', got '%s'", path.c_str(),
                                            lineno, t.c_str()));
            std::string key = trim(t.substr(0, eq)), val = trim(t.substr(eq + 1));
            if (key.empty())
                throw ConfigError(strformat("%s:%d: empty key", path.c_str(), lineno));
            try {
                set(key, val);
            } catch (const ConfigError& e) {
                throw ConfigError(strformat("%s:%d: %s", path.c_str(), lineno, e.what()));
            }
        }
    }

    // applies "key=value" (the --set form)
    void set_kv(const std::string& kv) {
        auto eq = kv.find('=');
        if (eq == std::string::npos)
            throw ConfigError("--set expects key=value, got '" + kv + "'");
        set(kv.substr(0, eq), kv.substr(eq + 1));
    }

    std::string echo() const {
        std::string out;
        for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
        return out;
    }

    void write_echo(const std::string& path) const {
        std::ofstream f(path);
        if (!f) throw IoError("cannot write config echo to " + path);
        f << echo();
    }

  private:
    std::map<std::string, std::string> values_;
};

// --- derived domain objects ---

inline ArchSpec arch_from_config(const RunConfig& c) {
    ArchSpec a;
    a.base_channels = int(c.integer("model.base_channels"));
    a.stage_multipliers = c.int_list("model.stage_multipliers");
    a.res_blocks_per_stage = int(c.integer("model.res_blocks_per_stage"));
    a.num_regions = int(c.integer("model.num_regions"));
    a.img_channels = int(c.integer("model.img_channels"));
    a.resolution = int(c.integer("model.resolution"));
    a.time_embed_dim = int(c.integer("model.time_embed_dim"));
    a.attention_at_lowest = c.boolean("model.attention_at_lowest");
    a.validate();
    return a;
}

inline Variant variant_from_config(const RunConfig& c) {
    return variant_from_string(c.str("model.variant"));
}

inline NoiseSchedule schedule_from_config(const RunConfig& c) {
    int T = int(c.integer("diffusion.timesteps"));
    double bs = c.real("diffusion.beta_start");
    double be;
    if (c.str("diffusion.beta_end") == "auto")
        be = solve_beta_end_matching_terminal(T, bs, reference_terminal_alpha_bar());
    else
        be = c.real("diffusion.beta_end");
    return build_linear_schedule(T, bs, be, sigma_mode_from_string(c.str("diffusion.sigma_mode")));
}

inline TrainConfig train_from_config(const RunConfig& c) {
    TrainConfig t;
    t.lr = c.real("train.lr");
    t.ema_rate = c.real("train.ema_rate");
    t.batch_size = int(c.integer("train.batch_size"));
    t.total_iters = c.integer("train.total_iters");
    t.seed = std::uint64_t(c.integer("seed"));
    t.grad_clip_norm = c.real("train.grad_clip_norm");
    t.checkpoint_every = c.integer("train.checkpoint_every");
    t.log_every = c.integer("train.log_every");
    t.adam_beta1 = c.real("train.adam_beta1");
    t.adam_beta2 = c.real("train.adam_beta2");
    t.adam_eps = c.real("train.adam_eps");
    t.validate();
    return t;
}

inline SceneSpec scene_from_config(const RunConfig& c) {
    SceneSpec sp;
    sp.resolution = int(c.integer("model.resolution"));
    sp.num_images = int(c.integer("data.num_images"));
    sp.region_model = region_model_from_string(c.str("data.region_model"));
    sp.shapes.clear();
    for (const auto& s : c.str_list("data.shapes")) sp.shapes.push_back(shape_kind_from_string(s));
    sp.min_size_frac = c.real("data.min_size_frac");
    sp.max_size_frac = c.real("data.max_size_frac");
    sp.texture_amp = c.real("data.texture_amp");
    sp.color_separation = c.real("data.color_separation");
    if (c.str("data.seed") == "auto")
        sp.seed = splitmix64(std::uint64_t(c.integer("seed")) ^ fnv1a("data"));
    else
        sp.seed = std::uint64_t(c.integer("data.seed"));
    sp.validate();
    return sp;
}

inline int t_seg_from_config(const RunConfig& c, int T) {
    long t = c.integer("eval.t_seg");
    if (t == 0) return std::max(1, int(std::lround(30.0 * double(T) / 1000.0)));
    if (t < 1 || t > T)
        throw ConfigError(strformat("eval.t_seg: %ld outside schedule range [1, %d]", t, T));
    return int(t);
}

}  // namespace fdm
