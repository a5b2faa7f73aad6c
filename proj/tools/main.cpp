#include <omp.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "fdm/config.hpp"
#include "fdm/metrics.hpp"
#include "fdm/png_io.hpp"
#include "fdm/sampler.hpp"
#include "fdm/synth.hpp"
#include "fdm/trainer.hpp"

// Command-line front end: train / segment / generate / eval / ablate /
// make-data. Exit codes: 0 success, 2 configuration or contract error, 3 I/O
// error, 4 numerical failure, 1 anything else.

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

struct CommonArgs {
    std::string config_file;
    std::vector<std::string> sets;
    long seed = -1;            // -1: not given on the command line
    std::string out;           // empty: not given
    bool deterministic = false;
};

void add_common(CLI::App* cmd, CommonArgs& a) {
    cmd->add_option("--config", a.config_file, "config file with 'key = value' lines");
    cmd->add_option("--set", a.sets, "override a config key, e.g. --set train.lr=3e-4")
        ->take_all();
    cmd->add_option("--seed", a.seed, "global seed (overrides config)");
    cmd->add_option("--out", a.out, "output directory (overrides config)");
    cmd->add_flag("--deterministic", a.deterministic,
                  "single-threaded kernels for bit-exact runs");
}

// precedence: defaults < config file < --set < dedicated flags
fdm::RunConfig build_config(const CommonArgs& a) {
    fdm::RunConfig c;
    if (!a.config_file.empty()) c.load_file(a.config_file);
    for (const auto& kv : a.sets) c.set_kv(kv);
    if (a.seed >= 0) c.set("seed", std::to_string(a.seed));
    if (!a.out.empty()) c.set("io.out", a.out);
    if (a.deterministic) c.set("deterministic", "true");
    if (c.boolean("deterministic")) omp_set_num_threads(1);
    return c;
}

std::string prepare_out_dir(const fdm::RunConfig& c) {
    std::string out = c.str("io.out");
    std::error_code ec;
    fs::create_directories(out, ec);
    if (ec) throw fdm::IoError("cannot create output directory " + out + ": " + ec.message());
    c.write_echo((fs::path(out) / "config.txt").string());
    return out;
}

fdm::Dataset dataset_from_config(const fdm::RunConfig& c, bool need_gt) {
    fdm::Dataset ds;
    if (c.str("data.dir").empty()) {
        ds = fdm::generate_dataset(fdm::scene_from_config(c));
    } else {
        ds = fdm::load_dataset(c.str("data.dir"));
        if (ds.resolution != int(c.integer("model.resolution")))
            throw fdm::ConfigError(fdm::strformat(
                "dataset resolution %d does not match model.resolution %ld", ds.resolution,
                c.integer("model.resolution")));
    }
    if (need_gt && !ds.has_gt())
        throw fdm::ConfigError("this command needs ground-truth masks, but the dataset has none");
    if (c.boolean("data.hflip")) ds = fdm::augment_hflip(ds);
    return ds;
}

// held-out scenes drawn from the same distribution under an independent seed
fdm::SceneSpec heldout_scene(const fdm::RunConfig& c) {
    fdm::SceneSpec sp = fdm::scene_from_config(c);
    sp.num_images = int(c.integer("eval.num_images"));
    sp.seed = fdm::splitmix64(sp.seed ^ fdm::fnv1a("heldout"));
    return sp;
}

void write_metrics_json(const std::string& path, const fdm::MetricReport& rep, bool verbose) {
    json j;
    j["acc"] = rep.acc;
    j["iou"] = rep.iou;
    j["miou"] = rep.miou;
    j["dice"] = rep.dice;
    j["matching"] = rep.matching;
    if (verbose) {
        j["pooled_acc"] = rep.pooled_acc;
        j["pooled_iou"] = rep.pooled_iou;
        j["pooled_miou"] = rep.pooled_miou;
        j["pooled_dice"] = rep.pooled_dice;
    }
    std::ofstream f(path);
    if (!f) throw fdm::IoError("cannot write " + path);
    f << j.dump(2) << "\n";
}

void print_metrics(const char* tag, const fdm::MetricReport& rep, bool verbose) {
    std::printf("%s: acc=%.4f iou=%.4f miou=%.4f dice=%.4f (matching:", tag, rep.acc, rep.iou,
                rep.miou, rep.dice);
    for (std::size_t k = 0; k < rep.matching.size(); k++)
        std::printf(" %zu->%d", k, rep.matching[k]);
    std::printf(")\n");
    if (verbose)
        std::printf("%s (pooled): acc=%.4f iou=%.4f miou=%.4f dice=%.4f\n", tag, rep.pooled_acc,
                    rep.pooled_iou, rep.pooled_miou, rep.pooled_dice);
}

// ---------------------------------------------------------------------------
// commands
// ---------------------------------------------------------------------------

int cmd_make_data(const fdm::RunConfig& c) {
    std::string out = prepare_out_dir(c);
    fdm::SceneSpec sp = fdm::scene_from_config(c);
    fdm::Dataset ds = fdm::generate_dataset(sp);
    fdm::save_dataset(ds, out, &sp);
    std::printf("wrote %d images (%dx%d, %d regions) to %s, checksum %016llx\n", ds.count,
                ds.resolution, ds.resolution, ds.num_regions_gt, out.c_str(),
                (unsigned long long)ds.checksum);
    return 0;
}

int cmd_train(const fdm::RunConfig& c) {
    std::string out = prepare_out_dir(c);
    fdm::ArchSpec arch = fdm::arch_from_config(c);
    fdm::Variant variant = fdm::variant_from_config(c);
    fdm::TrainConfig tc = fdm::train_from_config(c);
    fdm::NoiseSchedule sched = fdm::schedule_from_config(c);

    fdm::Dataset ds = dataset_from_config(c, false);
    if (ds.count < 1) throw fdm::ConfigError("training needs a non-empty dataset");

    fdm::TrainState<float> st;
    std::string ckpt = (fs::path(out) / "checkpoint.ckpt").string();
    if (fs::exists(ckpt)) {
        st = fdm::load_checkpoint<float>(ckpt);
        if (!(st.model.arch == arch) || st.model.variant != variant)
            throw fdm::ConfigError("existing checkpoint in " + out +
                                   " was trained with a different architecture");
        st.cfg = tc;  // total_iters may have been raised to continue training
        std::printf("resuming from %s at step %ld\n", ckpt.c_str(), st.step);
    } else {
        st = fdm::init_train_state<float>(arch, variant, tc);
    }

    fdm::train_loop(st, ds.images, sched, out, [](long step, double loss, double secs) {
        std::printf("step %ld  loss %.5f  (%.2f s)\n", step, loss, secs);
        std::fflush(stdout);
    });
    std::printf("done: %ld steps, checkpoint at %s\n", st.step, ckpt.c_str());
    return 0;
}

int cmd_segment(const fdm::RunConfig& c, const std::string& ckpt_path,
                const std::string& input_dir) {
    std::string out = prepare_out_dir(c);
    auto st = fdm::load_checkpoint<float>(ckpt_path);
    auto model = fdm::model_with_ema(st);
    fdm::NoiseSchedule sched = fdm::schedule_from_config(c);

    fdm::Dataset ds;
    if (!input_dir.empty()) {
        ds = fs::exists(fs::path(input_dir) / "manifest")
                 ? fdm::load_dataset(input_dir)
                 : fdm::load_png_dir(input_dir, model.arch.resolution);
        if (ds.resolution != model.arch.resolution)
            throw fdm::ConfigError(fdm::strformat("input resolution %d != model resolution %d",
                                                  ds.resolution, model.arch.resolution));
    } else {
        ds = fdm::generate_dataset(heldout_scene(c));
    }
    if (ds.count < 1) throw fdm::ConfigError("nothing to segment (empty input)");

    int t_seg = fdm::t_seg_from_config(c, sched.T);
    auto seg = fdm::segment(model, ds.images, t_seg, sched, std::uint64_t(c.integer("seed")),
                            int(c.integer("eval.avg_draws")));

    std::error_code ec;
    fs::create_directories(fs::path(out) / "masks", ec);
    auto palette = fdm::region_palette(model.arch.num_regions);
    int R = ds.resolution;
    for (int i = 0; i < ds.count; i++) {
        fdm::IndexedImage m;
        m.width = m.height = R;
        m.idx.resize(std::size_t(R) * R);
        for (std::size_t j = 0; j < m.idx.size(); j++)
            m.idx[j] = std::uint8_t(seg.hard.v[std::size_t(i) * R * R + j]);
        fdm::write_png_indexed((fs::path(out) / "masks" / fdm::strformat("%05d.png", i)).string(),
                               m, palette);
    }
    int n_show = std::min(ds.count, 16);
    fdm::write_png_rgb8(
        (fs::path(out) / "montage.png").string(),
        fdm::montage_with_masks(fdm::subset(ds, 0, n_show).images,
                                fdm::Tensor<int>({n_show, R, R},
                                                 std::vector<int>(seg.hard.v.begin(),
                                                                  seg.hard.v.begin() +
                                                                      std::size_t(n_show) * R * R))));
    std::printf("segmented %d images at t=%d -> %s/masks (montage.png for a quick look)\n",
                ds.count, t_seg, out.c_str());
    return 0;
}

int cmd_generate(const fdm::RunConfig& c, const std::string& ckpt_path, int n) {
    std::string out = prepare_out_dir(c);
    auto st = fdm::load_checkpoint<float>(ckpt_path);
    auto model = fdm::model_with_ema(st);
    fdm::NoiseSchedule sched = fdm::schedule_from_config(c);
    std::uint64_t seed = std::uint64_t(c.integer("seed"));

    auto gen = fdm::generate(model, n, sched, seed);

    std::error_code ec;
    fs::create_directories(fs::path(out) / "images", ec);
    fs::create_directories(fs::path(out) / "masks", ec);
    auto palette = fdm::region_palette(model.arch.num_regions);
    int R = model.arch.resolution;
    for (int i = 0; i < n; i++) {
        fdm::write_png_rgb8((fs::path(out) / "images" / fdm::strformat("%05d.png", i)).string(),
                            fdm::tensor_to_u8(gen.images, i));
        fdm::IndexedImage m;
        m.width = m.height = R;
        m.idx.resize(std::size_t(R) * R);
        for (std::size_t j = 0; j < m.idx.size(); j++)
            m.idx[j] = std::uint8_t(gen.masks.hard.v[std::size_t(i) * R * R + j]);
        fdm::write_png_indexed((fs::path(out) / "masks" / fdm::strformat("%05d.png", i)).string(),
                               m, palette);
    }
    int n_show = std::min(n, 16);
    fdm::Tensor<float> show({n_show, 3, R, R});
    std::copy_n(gen.images.data(), show.numel(), show.data());
    fdm::write_png_rgb8((fs::path(out) / "montage.png").string(),
                        fdm::montage_with_masks(
                            show, fdm::Tensor<int>({n_show, R, R},
                                                   std::vector<int>(gen.masks.hard.v.begin(),
                                                                    gen.masks.hard.v.begin() +
                                                                        std::size_t(n_show) * R * R))));

    long record_every = c.integer("io.record_every");
    if (record_every > 0) {
        auto traj = fdm::mask_trajectory(model, std::min(n, 4), sched, seed, int(record_every));
        fs::create_directories(fs::path(out) / "trajectory", ec);
        for (const auto& rec : traj) {
            int nb = rec.images.dim(0);
            fdm::Tensor<float> imgs = rec.images;
            for (auto& v : imgs.v) v = std::clamp(v, -1.0f, 1.0f);
            fdm::write_png_rgb8(
                (fs::path(out) / "trajectory" / fdm::strformat("t%04d.png", rec.t)).string(),
                fdm::montage_with_masks(imgs, fdm::argmax_channels(rec.soft)));
            (void)nb;
        }
        std::printf("trajectory: %zu snapshots in %s/trajectory\n", traj.size(), out.c_str());
    }
    std::printf("generated %d samples (%d reverse steps) in %s\n", n, gen.steps, out.c_str());
    return 0;
}

int cmd_eval(const fdm::RunConfig& c, const std::string& ckpt_path, const std::string& data_dir) {
    std::string out = prepare_out_dir(c);
    auto st = fdm::load_checkpoint<float>(ckpt_path);
    auto model = fdm::model_with_ema(st);
    fdm::NoiseSchedule sched = fdm::schedule_from_config(c);
    std::uint64_t seed = std::uint64_t(c.integer("seed"));
    bool verbose = c.boolean("eval.verbose");
    bool paper_dice = c.boolean("eval.paper_dice");

    // 1) segmentation quality on held-out labeled scenes
    fdm::Dataset ds;
    if (!data_dir.empty()) {
        ds = fdm::load_dataset(data_dir);
        if (!ds.has_gt())
            throw fdm::ConfigError("eval needs ground-truth masks, but " + data_dir + " has none");
    } else {
        ds = fdm::generate_dataset(heldout_scene(c));
    }
    int t_seg = fdm::t_seg_from_config(c, sched.T);
    auto seg = fdm::segment(model, ds.images, t_seg, sched, seed,
                            int(c.integer("eval.avg_draws")));
    auto rep = fdm::score(seg, ds.labels.data(), ds.num_regions_gt, {}, paper_dice);
    print_metrics("segmentation", rep, verbose);
    write_metrics_json((fs::path(out) / "metrics.json").string(), rep, true);

    // 2) consistency of generated image/mask pairs against a supervised
    //    reference segmenter trained on the labeled corpus
    int n_gen = int(c.integer("eval.num_generate"));
    double cons = -1.0;
    if (n_gen > 0) {
        fdm::ArchSpec ref_arch = model.arch;
        ref_arch.num_regions = ds.num_regions_gt;
        auto ref = fdm::SupervisedSegmenter<float>::build(ref_arch,
                                                          fdm::splitmix64(seed ^ fdm::fnv1a("ref")));
        ref.fit(ds, int(c.integer("eval.ref_steps")), int(c.integer("eval.ref_batch")),
                c.real("eval.ref_lr"), seed);
        auto gen = fdm::generate(model, n_gen, sched, seed);
        auto ref_labels = ref.predict(gen.images);
        cons = fdm::consistency(gen.masks.hard, model.arch.num_regions, ref_labels,
                                ref_arch.num_regions);
        std::printf("consistency: %.4f over %d generated samples\n", cons, n_gen);
    }

    json j;
    j["segmentation"] = {{"acc", rep.acc}, {"iou", rep.iou}, {"miou", rep.miou},
                         {"dice", rep.dice}};
    if (cons >= 0) j["consistency"] = cons;
    std::ofstream f(fs::path(out) / "eval.json");
    f << j.dump(2) << "\n";
    return 0;
}

int cmd_ablate(const fdm::RunConfig& c) {
    std::string out = prepare_out_dir(c);
    fdm::ArchSpec arch = fdm::arch_from_config(c);
    fdm::TrainConfig tc = fdm::train_from_config(c);
    fdm::NoiseSchedule sched = fdm::schedule_from_config(c);
    fdm::Dataset ds = dataset_from_config(c, true);
    fdm::Dataset held = fdm::generate_dataset(heldout_scene(c));
    int t_seg = fdm::t_seg_from_config(c, sched.T);
    std::uint64_t seed = std::uint64_t(c.integer("seed"));

    const fdm::Variant variants[] = {fdm::Variant::shared, fdm::Variant::concat,
                                     fdm::Variant::mask_mid, fdm::Variant::unshared};
    json table = json::array();
    std::printf("%-10s %8s %8s %8s %10s\n", "variant", "miou", "acc", "iou", "val-loss");
    for (fdm::Variant v : variants) {
        std::string vdir = (fs::path(out) / fdm::to_string(v)).string();
        fs::create_directories(vdir);
        fdm::TrainState<float> st;
        std::string ckpt = (fs::path(vdir) / "checkpoint.ckpt").string();
        if (fs::exists(ckpt)) {
            st = fdm::load_checkpoint<float>(ckpt);
            st.cfg = tc;
        } else {
            st = fdm::init_train_state<float>(arch, v, tc);
        }
        fdm::train_loop(st, ds.images, sched, vdir, nullptr);
        auto model = fdm::model_with_ema(st);
        auto seg = fdm::segment(model, held.images, t_seg, sched, seed);
        auto rep = fdm::score(seg, held.labels.data(), held.num_regions_gt);
        double val = fdm::validation_denoise_loss(model, held.images, sched,
                                                  fdm::splitmix64(seed ^ fdm::fnv1a("val")));
        std::printf("%-10s %8.4f %8.4f %8.4f %10.5f\n", fdm::to_string(v), rep.miou, rep.acc,
                    rep.iou, val);
        table.push_back({{"variant", fdm::to_string(v)},
                         {"miou", rep.miou},
                         {"acc", rep.acc},
                         {"iou", rep.iou},
                         {"val_denoise_loss", val}});
    }
    std::ofstream f(fs::path(out) / "ablation.json");
    f << table.dump(2) << "\n";
    std::printf("table written to %s/ablation.json\n", out.c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{
        "Factorized diffusion: image generation that yields unsupervised "
        "segmentation as a byproduct"};
    app.require_subcommand(1);

    CommonArgs a_train, a_seg, a_gen, a_eval, a_abl, a_data;
    std::string ckpt_path, input_dir, data_dir;
    int n_generate = 16;

    auto* c_train = app.add_subcommand("train", "train a model (resumes if checkpoint exists)");
    add_common(c_train, a_train);

    auto* c_seg = app.add_subcommand("segment", "one-step segmentation of images");
    add_common(c_seg, a_seg);
    c_seg->add_option("--checkpoint", ckpt_path, "model checkpoint")->required();
    c_seg->add_option("--input", input_dir,
                      "dataset dir or flat PNG dir (default: fresh synthetic scenes)");

    auto* c_gen = app.add_subcommand("generate", "sample images with their masks");
    add_common(c_gen, a_gen);
    c_gen->add_option("--checkpoint", ckpt_path, "model checkpoint")->required();
    c_gen->add_option("-n,--num", n_generate, "number of samples");

    auto* c_eval = app.add_subcommand("eval", "segmentation metrics + generation consistency");
    add_common(c_eval, a_eval);
    c_eval->add_option("--checkpoint", ckpt_path, "model checkpoint")->required();
    c_eval->add_option("--data", data_dir, "labeled dataset dir (default: fresh held-out scenes)");

    auto* c_abl = app.add_subcommand("ablate",
                                     "train all four decoder variants and compare");
    add_common(c_abl, a_abl);

    auto* c_data = app.add_subcommand("make-data", "write a synthetic dataset to --out");
    add_common(c_data, a_data);

    CLI11_PARSE(app, argc, argv);

    try {
        if (c_train->parsed()) return cmd_train(build_config(a_train));
        if (c_seg->parsed()) return cmd_segment(build_config(a_seg), ckpt_path, input_dir);
        if (c_gen->parsed()) return cmd_generate(build_config(a_gen), ckpt_path, n_generate);
        if (c_eval->parsed()) return cmd_eval(build_config(a_eval), ckpt_path, data_dir);
        if (c_abl->parsed()) return cmd_ablate(build_config(a_abl));
        if (c_data->parsed()) return cmd_make_data(build_config(a_data));
    } catch (const fdm::ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const fdm::ShapeError& e) {
        std::fprintf(stderr, "shape error: %s\n", e.what());
        return 2;
    } catch (const fdm::ContractError& e) {
        std::fprintf(stderr, "contract violation: %s\n", e.what());
        return 2;
    } catch (const fdm::IoError& e) {
        std::fprintf(stderr, "i/o error: %s\n", e.what());
        return 3;
    } catch (const fdm::NumericError& e) {
        std::fprintf(stderr, "numerical failure: %s\n", e.what());
        return 4;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
