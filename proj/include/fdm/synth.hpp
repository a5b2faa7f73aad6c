#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fdm/common.hpp"
#include "fdm/png_io.hpp"
#include "fdm/rng.hpp"
#include "fdm/tensor.hpp"

// Procedural scene corpus with exact ground-truth region labels. Scenes are
// built label-map-first: region membership is decided per pixel, then pixels
// are colored by label, so image boundaries and label boundaries coincide
// exactly. Backgrounds carry low-frequency value noise so denoising cannot be
// solved by predicting a constant.

namespace fdm {

enum class RegionModel { fg_bg, two_shapes };
enum class ShapeKind { ellipse, rectangle, blob };

inline std::string to_string(RegionModel m) {
    return m == RegionModel::fg_bg ? "fg_bg" : "two_shapes";
}
inline RegionModel region_model_from_string(const std::string& s) {
    if (s == "fg_bg") return RegionModel::fg_bg;
    if (s == "two_shapes") return RegionModel::two_shapes;
    throw ConfigError("unknown region model '" + s + "' (expected fg_bg or two_shapes)");
}
inline std::string to_string(ShapeKind k) {
    switch (k) {
        case ShapeKind::ellipse: return "ellipse";
        case ShapeKind::rectangle: return "rectangle";
        default: return "blob";
    }
}
inline ShapeKind shape_kind_from_string(const std::string& s) {
    if (s == "ellipse") return ShapeKind::ellipse;
    if (s == "rectangle") return ShapeKind::rectangle;
    if (s == "blob") return ShapeKind::blob;
    throw ConfigError("unknown shape kind '" + s + "' (expected ellipse, rectangle or blob)");
}

struct SceneSpec {
    int resolution = 32;
    int num_images = 4000;
    RegionModel region_model = RegionModel::fg_bg;
    std::vector<ShapeKind> shapes = {ShapeKind::ellipse, ShapeKind::rectangle, ShapeKind::blob};
    double min_size_frac = 0.10;  // shape area as fraction of image area
    double max_size_frac = 0.30;
    double texture_amp = 0.25;        // background value-noise amplitude
    double color_separation = 0.80;   // min pairwise max-channel distance of region colors
    std::uint64_t seed = 0;

    static constexpr int num_regions = 3;  // background + two parts in both modes

    void validate() const {
        if (resolution < 4)
            throw ConfigError(strformat("scene resolution %d too small (need >= 4)", resolution));
        if (num_images < 0) throw ConfigError("scene num_images must be >= 0");
        if (shapes.empty()) throw ConfigError("scene shape set must not be empty");
        if (min_size_frac <= 0.0 || max_size_frac <= 0.0 || min_size_frac > max_size_frac ||
            max_size_frac > 0.6)
            throw ConfigError(strformat(
                "scene size fractions [%g, %g] invalid (need 0 < min <= max <= 0.6)",
                min_size_frac, max_size_frac));
        if (texture_amp < 0.0 || texture_amp > 1.0)
            throw ConfigError(strformat("scene texture amplitude %g outside [0, 1]", texture_amp));
        if (color_separation < 0.0 || color_separation > 1.5)
            throw ConfigError(
                strformat("scene color separation %g outside [0, 1.5]", color_separation));
    }
};

struct Dataset {
    int count = 0;
    int resolution = 0;
    int num_regions_gt = 0;
    Tensor<float> images;             // (N, 3, R, R) in [-1, 1]; empty when count == 0
    std::vector<std::uint8_t> labels;  // N * R * R ground-truth labels; may be empty
    std::uint64_t checksum = 0;

    bool has_gt() const { return !labels.empty(); }
    const std::uint8_t* label_map(int i) const {
        return labels.data() + std::size_t(i) * resolution * resolution;
    }
};

// Checksum over the quantized byte representation, so an in-memory dataset
// and its PNG round-trip hash identically.
inline std::uint64_t dataset_checksum(const Dataset& ds) {
    std::uint64_t h = fnv1a(&ds.count, sizeof ds.count);
    h = fnv1a(&ds.resolution, sizeof ds.resolution, h);
    std::vector<std::uint8_t> q(ds.images.v.size());
    for (std::size_t i = 0; i < q.size(); i++) q[i] = float_to_byte(ds.images.v[i]);
    h = fnv1a(q.data(), q.size(), h);
    h = fnv1a(ds.labels.data(), ds.labels.size(), h);
    return h;
}

namespace detail {

// Low-frequency value noise: a coarse grid of uniform values in [-1, 1],
// bilinearly interpolated to full resolution, scaled by amp.
inline std::vector<float> value_noise(int res, int grid_cells, double amp, RngStream& rng) {
    int g = grid_cells + 1;  // node count per side
    std::vector<float> nodes(std::size_t(g) * g);
    for (auto& v : nodes) v = float(rng.uniform01() * 2.0 - 1.0);
    std::vector<float> out(std::size_t(res) * res);
    for (int y = 0; y < res; y++) {
        double fy = double(y) / res * grid_cells;
        int y0 = std::min(int(fy), grid_cells - 1);
        double wy = fy - y0;
        for (int x = 0; x < res; x++) {
            double fx = double(x) / res * grid_cells;
            int x0 = std::min(int(fx), grid_cells - 1);
            double wx = fx - x0;
            double v00 = nodes[std::size_t(y0) * g + x0];
            double v01 = nodes[std::size_t(y0) * g + x0 + 1];
            double v10 = nodes[std::size_t(y0 + 1) * g + x0];
            double v11 = nodes[std::size_t(y0 + 1) * g + x0 + 1];
            double v = (1 - wy) * ((1 - wx) * v00 + wx * v01) + wy * ((1 - wx) * v10 + wx * v11);
            out[std::size_t(y) * res + x] = float(amp * v);
        }
    }
    return out;
}

struct ShapeParams {
    ShapeKind kind = ShapeKind::ellipse;
    double cx = 0, cy = 0;     // center, pixel units
    double rx = 1, ry = 1;     // radii / half-extents
    double rot = 0;            // rotation, radians
    double blob_amp = 0;       // sinusoidal radius modulation
    int blob_freq = 3;
    double blob_phase = 0;

    bool contains(double px, double py) const {
        double dx = px - cx, dy = py - cy;
        double c = std::cos(rot), s = std::sin(rot);
        double u = dx * c + dy * s, v = -dx * s + dy * c;
        switch (kind) {
            case ShapeKind::rectangle:
                return std::abs(u) <= rx && std::abs(v) <= ry;
            case ShapeKind::ellipse: {
                double q = (u / rx) * (u / rx) + (v / ry) * (v / ry);
                return q <= 1.0;
            }
            default: {  // blob: ellipse with wavy radius
                double q = std::sqrt((u / rx) * (u / rx) + (v / ry) * (v / ry));
                double th = std::atan2(v / ry, u / rx);
                return q <= 1.0 + blob_amp * std::sin(blob_freq * th + blob_phase);
            }
        }
    }
};

inline ShapeParams draw_shape(const SceneSpec& sp, double area_scale, RngStream& rng) {
    ShapeParams p;
    p.kind = sp.shapes[std::size_t(rng.uniform_int(0, int(sp.shapes.size()) - 1))];
    int R = sp.resolution;
    double frac =
        (sp.min_size_frac + rng.uniform01() * (sp.max_size_frac - sp.min_size_frac)) * area_scale;
    double area = frac * R * R;
    double aspect = 0.5 + rng.uniform01() * 0.5;  // ry / rx in [0.5, 1]
    if (p.kind == ShapeKind::rectangle) {
        p.rx = std::sqrt(area / (4.0 * aspect));
        p.ry = aspect * p.rx;
    } else {
        p.rx = std::sqrt(area / (3.14159265358979323846 * aspect));
        p.ry = aspect * p.rx;
        if (p.kind == ShapeKind::blob) {
            p.blob_amp = 0.15 + rng.uniform01() * 0.20;
            p.blob_freq = int(rng.uniform_int(3, 5));
            p.blob_phase = rng.uniform01() * 2.0 * 3.14159265358979323846;
        }
    }
    p.rot = rng.uniform01() * 3.14159265358979323846;
    // keep the center far enough from the border that most of the shape fits
    double margin = std::max(p.rx, p.ry) * 0.7;
    double lo = margin, hi = R - 1 - margin;
    if (hi < lo) lo = hi = (R - 1) / 2.0;
    p.cx = lo + rng.uniform01() * (hi - lo);
    p.cy = lo + rng.uniform01() * (hi - lo);
    return p;
}

// Region base colors with a minimum pairwise max-channel separation,
// rejection-sampled. Each color is a 3-vector in [-0.9, 0.9].
inline std::vector<std::array<float, 3>> draw_colors(int n, double separation, RngStream& rng) {
    for (int attempt = 0; attempt < 10000; attempt++) {
        std::vector<std::array<float, 3>> cols;
        cols.resize(std::size_t(n));
        for (auto& c : cols)
            for (auto& ch : c) ch = float(rng.uniform01() * 1.8 - 0.9);
        bool ok = true;
        for (int i = 0; i < n && ok; i++)
            for (int j = i + 1; j < n && ok; j++) {
                double d = 0;
                for (int ch = 0; ch < 3; ch++)
                    d = std::max(d, std::abs(double(cols[i][ch]) - cols[j][ch]));
                if (d < separation) ok = false;
            }
        if (ok) return cols;
    }
    throw ContractError(strformat("could not draw %d colors with separation %.2f", 3, separation));
}

inline void render_scene(const SceneSpec& sp, RngStream rng, float* img, std::uint8_t* lab) {
    int R = sp.resolution;
    std::int64_t HW = std::int64_t(R) * R;

    ShapeParams body, part;
    if (sp.region_model == RegionModel::fg_bg) {
        body = draw_shape(sp, 1.0, rng);
        // attached part: smaller shape centered on the body's boundary so the
        // two always touch (mirrors a "body + attached part" scene structure)
        part = draw_shape(sp, 0.25, rng);
        double th = rng.uniform01() * 2.0 * 3.14159265358979323846;
        part.cx = body.cx + std::cos(th) * body.rx * 0.9;
        part.cy = body.cy + std::sin(th) * body.ry * 0.9;
        part.cx = std::clamp(part.cx, 1.0, R - 2.0);
        part.cy = std::clamp(part.cy, 1.0, R - 2.0);
    } else {
        body = draw_shape(sp, 1.0, rng);
        part = draw_shape(sp, 1.0, rng);
    }

    // label-map first: 0 background, 1 body/first shape, 2 part/second shape
    // (the later region wins overlaps)
    for (int y = 0; y < R; y++)
        for (int x = 0; x < R; x++) {
            std::uint8_t l = 0;
            if (body.contains(x, y)) l = 1;
            if (part.contains(x, y)) l = 2;
            lab[std::size_t(y) * R + x] = l;
        }

    auto cols = draw_colors(SceneSpec::num_regions, sp.color_separation, rng);
    // textures: full-amplitude noise on background, half on foreground regions
    std::vector<std::vector<float>> tex;
    for (int k = 0; k < SceneSpec::num_regions; k++)
        tex.push_back(value_noise(R, 4, sp.texture_amp * (k == 0 ? 1.0 : 0.5), rng));
    for (std::int64_t i = 0; i < HW; i++) {
        int l = lab[std::size_t(i)];
        for (int c = 0; c < 3; c++)
            img[c * HW + i] = std::clamp(cols[std::size_t(l)][c] + tex[std::size_t(l)][std::size_t(i)],
                                         -1.0f, 1.0f);
    }
}

}  // namespace detail

inline Dataset generate_dataset(const SceneSpec& sp) {
    sp.validate();
    Dataset ds;
    ds.count = sp.num_images;
    ds.resolution = sp.resolution;
    ds.num_regions_gt = SceneSpec::num_regions;
    std::int64_t HW = std::int64_t(sp.resolution) * sp.resolution;
    ds.images = Tensor<float>({sp.num_images, 3, sp.resolution, sp.resolution});
    ds.labels.assign(std::size_t(sp.num_images) * HW, 0);
    RngStream root = RngStream::keyed(sp.seed, "synth");
#pragma omp parallel for schedule(static)
    for (int i = 0; i < sp.num_images; i++)
        detail::render_scene(sp, root.substream(std::uint64_t(i)),
                             ds.images.data() + std::int64_t(i) * 3 * HW,
                             ds.labels.data() + std::int64_t(i) * HW);
    ds.checksum = dataset_checksum(ds);
    return ds;
}

inline Dataset subset(const Dataset& ds, int start, int n) {
    if (start < 0 || n < 0 || start + n > ds.count)
        throw ContractError(strformat("subset [%d, %d) out of range for %d images", start,
                                      start + n, ds.count));
    Dataset out;
    out.count = n;
    out.resolution = ds.resolution;
    out.num_regions_gt = ds.num_regions_gt;
    std::int64_t per = std::int64_t(3) * ds.resolution * ds.resolution;
    out.images = Tensor<float>({n, 3, ds.resolution, ds.resolution});
    std::copy_n(ds.images.data() + start * per, n * per, out.images.data());
    if (ds.has_gt()) {
        std::int64_t lper = std::int64_t(ds.resolution) * ds.resolution;
        out.labels.assign(ds.labels.begin() + start * lper, ds.labels.begin() + (start + n) * lper);
    }
    out.checksum = dataset_checksum(out);
    return out;
}

// Optional horizontal-flip augmentation: appends a mirrored copy of every
// image (and label map). Deterministic; off unless requested.
inline Dataset augment_hflip(const Dataset& ds) {
    Dataset out;
    out.count = ds.count * 2;
    out.resolution = ds.resolution;
    out.num_regions_gt = ds.num_regions_gt;
    int R = ds.resolution;
    std::int64_t HW = std::int64_t(R) * R;
    out.images = Tensor<float>({out.count, 3, R, R});
    std::copy(ds.images.v.begin(), ds.images.v.end(), out.images.v.begin());
    for (int i = 0; i < ds.count; i++) {
        const float* src = ds.images.data() + std::int64_t(i) * 3 * HW;
        float* dst = out.images.data() + std::int64_t(ds.count + i) * 3 * HW;
        for (int c = 0; c < 3; c++)
            for (int y = 0; y < R; y++)
                for (int x = 0; x < R; x++)
                    dst[c * HW + y * R + x] = src[c * HW + y * R + (R - 1 - x)];
    }
    if (ds.has_gt()) {
        out.labels.resize(std::size_t(out.count) * HW);
        std::copy(ds.labels.begin(), ds.labels.end(), out.labels.begin());
        for (int i = 0; i < ds.count; i++) {
            const std::uint8_t* src = ds.labels.data() + std::int64_t(i) * HW;
            std::uint8_t* dst = out.labels.data() + std::int64_t(ds.count + i) * HW;
            for (int y = 0; y < R; y++)
                for (int x = 0; x < R; x++) dst[y * R + x] = src[y * R + (R - 1 - x)];
        }
    }
    out.checksum = dataset_checksum(out);
    return out;
}

inline nlohmann::json scene_spec_to_json(const SceneSpec& sp) {
    nlohmann::json j;
    j["resolution"] = sp.resolution;
    j["num_images"] = sp.num_images;
    j["region_model"] = to_string(sp.region_model);
    std::vector<std::string> sh;
    for (auto k : sp.shapes) sh.push_back(to_string(k));
    j["shapes"] = sh;
    j["min_size_frac"] = sp.min_size_frac;
    j["max_size_frac"] = sp.max_size_frac;
    j["texture_amp"] = sp.texture_amp;
    j["color_separation"] = sp.color_separation;
    j["seed"] = sp.seed;
    return j;
}

inline SceneSpec scene_spec_from_json(const nlohmann::json& j) {
    SceneSpec sp;
    sp.resolution = j.at("resolution").get<int>();
    sp.num_images = j.at("num_images").get<int>();
    sp.region_model = region_model_from_string(j.at("region_model").get<std::string>());
    sp.shapes.clear();
    for (const auto& s : j.at("shapes")) sp.shapes.push_back(shape_kind_from_string(s));
    sp.min_size_frac = j.at("min_size_frac").get<double>();
    sp.max_size_frac = j.at("max_size_frac").get<double>();
    sp.texture_amp = j.at("texture_amp").get<double>();
    sp.color_separation = j.at("color_separation").get<double>();
    sp.seed = j.at("seed").get<std::uint64_t>();
    return sp;
}

// On-disk layout: <dir>/manifest (JSON), <dir>/images/NNNNN.png (RGB),
// <dir>/masks/NNNNN.png (indexed, palette index == label).
inline void save_dataset(const Dataset& ds, const std::string& dir,
                         const SceneSpec* spec_echo = nullptr) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(fs::path(dir) / "images", ec);
    if (ec) throw IoError("cannot create " + dir + "/images: " + ec.message());
    if (ds.has_gt()) {
        fs::create_directories(fs::path(dir) / "masks", ec);
        if (ec) throw IoError("cannot create " + dir + "/masks: " + ec.message());
    }
    std::int64_t HW = std::int64_t(ds.resolution) * ds.resolution;
    auto palette = region_palette(std::max(1, ds.num_regions_gt));
    for (int i = 0; i < ds.count; i++) {
        std::string name = strformat("%05d.png", i);
        write_png_rgb8((fs::path(dir) / "images" / name).string(), tensor_to_u8(ds.images, i));
        if (ds.has_gt()) {
            IndexedImage m;
            m.width = m.height = ds.resolution;
            m.idx.assign(ds.labels.begin() + i * HW, ds.labels.begin() + (i + 1) * HW);
            write_png_indexed((fs::path(dir) / "masks" / name).string(), m, palette);
        }
    }
    nlohmann::json j;
    j["count"] = ds.count;
    j["resolution"] = ds.resolution;
    j["num_regions"] = ds.num_regions_gt;
    j["has_masks"] = ds.has_gt();
    j["checksum"] = strformat("%016llx", (unsigned long long)ds.checksum);
    if (spec_echo) j["scene_spec"] = scene_spec_to_json(*spec_echo);
    std::ofstream f(fs::path(dir) / "manifest");
    if (!f) throw IoError("cannot write " + dir + "/manifest");
    f << j.dump(2) << "\n";
}

inline Dataset load_dataset(const std::string& dir) {
    namespace fs = std::filesystem;
    std::ifstream f(fs::path(dir) / "manifest");
    if (!f) throw IoError("cannot read " + dir + "/manifest (not a dataset directory?)");
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::exception& e) {
        throw IoError(dir + "/manifest: " + e.what());
    }
    Dataset ds;
    ds.count = j.at("count").get<int>();
    ds.resolution = j.at("resolution").get<int>();
    ds.num_regions_gt = j.at("num_regions").get<int>();
    bool has_masks = j.at("has_masks").get<bool>();
    std::int64_t HW = std::int64_t(ds.resolution) * ds.resolution;
    ds.images = Tensor<float>({ds.count, 3, ds.resolution, ds.resolution});
    if (has_masks) ds.labels.assign(std::size_t(ds.count) * HW, 0);
    for (int i = 0; i < ds.count; i++) {
        std::string name = strformat("%05d.png", i);
        ImageU8 im = read_png_rgb8((fs::path(dir) / "images" / name).string());
        if (im.width != ds.resolution || im.height != ds.resolution)
            throw IoError(strformat("%s/images/%s: size %dx%d does not match manifest resolution %d",
                                    dir.c_str(), name.c_str(), im.width, im.height, ds.resolution));
        u8_to_tensor(im, ds.images.data() + std::int64_t(i) * 3 * HW);
        if (has_masks) {
            IndexedImage m = read_png_indexed((fs::path(dir) / "masks" / name).string());
            if (m.width != ds.resolution || m.height != ds.resolution)
                throw IoError(strformat("%s/masks/%s: size mismatch", dir.c_str(), name.c_str()));
            std::copy(m.idx.begin(), m.idx.end(), ds.labels.begin() + i * HW);
        }
    }
    ds.checksum = dataset_checksum(ds);
    std::string want = j.at("checksum").get<std::string>();
    std::string got = strformat("%016llx", (unsigned long long)ds.checksum);
    if (got != want)
        throw IoError("dataset checksum mismatch in " + dir + " (expected " + want + ", got " +
                      got + ")");
    return ds;
}

namespace detail {

// Bilinear sample of a single channel plane at fractional position
// (align-corners=false convention).
inline float bilinear(const float* plane, int w, int h, double x, double y) {
    x = std::clamp(x, 0.0, double(w - 1));
    y = std::clamp(y, 0.0, double(h - 1));
    int x0 = int(x), y0 = int(y);
    int x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
    double wx = x - x0, wy = y - y0;
    double v0 = (1 - wx) * plane[y0 * w + x0] + wx * plane[y0 * w + x1];
    double v1 = (1 - wx) * plane[y1 * w + x0] + wx * plane[y1 * w + x1];
    return float((1 - wy) * v0 + wy * v1);
}

}  // namespace detail

// Loads a flat directory of PNGs (sorted by filename) as an unlabeled
// dataset: center-crop to square, bilinear-resize to the target resolution,
// map to [-1, 1]. An empty directory yields an empty dataset with a warning.
inline Dataset load_png_dir(const std::string& dir, int resolution) {
    namespace fs = std::filesystem;
    if (resolution < 1) throw ConfigError("load_png_dir: resolution must be >= 1");
    if (!fs::is_directory(dir)) throw IoError(dir + " is not a directory");
    std::vector<std::string> names;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file() && e.path().extension() == ".png")
            names.push_back(e.path().filename().string());
    std::sort(names.begin(), names.end());
    Dataset ds;
    ds.resolution = resolution;
    ds.count = int(names.size());
    if (names.empty()) {
        std::fprintf(stderr, "warning: no PNG files in %s; dataset is empty\n", dir.c_str());
        ds.checksum = dataset_checksum(ds);
        return ds;
    }
    std::int64_t HW = std::int64_t(resolution) * resolution;
    ds.images = Tensor<float>({ds.count, 3, resolution, resolution});
    for (int i = 0; i < ds.count; i++) {
        ImageU8 im = read_png_rgb8((fs::path(dir) / names[std::size_t(i)]).string());
        int side = std::min(im.width, im.height);
        int ox = (im.width - side) / 2, oy = (im.height - side) / 2;
        // cropped square as planar float channels
        std::vector<float> plane(std::size_t(3) * side * side);
        for (int y = 0; y < side; y++)
            for (int x = 0; x < side; x++)
                for (int c = 0; c < 3; c++)
                    plane[std::size_t(c) * side * side + std::size_t(y) * side + x] = byte_to_float(
                        im.rgb[(std::size_t(oy + y) * im.width + std::size_t(ox + x)) * 3 +
                               std::size_t(c)]);
        float* dst = ds.images.data() + std::int64_t(i) * 3 * HW;
        double scale = double(side) / resolution;
        for (int c = 0; c < 3; c++)
            for (int y = 0; y < resolution; y++)
                for (int x = 0; x < resolution; x++)
                    dst[c * HW + std::int64_t(y) * resolution + x] = detail::bilinear(
                        plane.data() + std::size_t(c) * side * side, side, side,
                        (x + 0.5) * scale - 0.5, (y + 0.5) * scale - 0.5);
    }
    ds.checksum = dataset_checksum(ds);
    return ds;
}

}  // namespace fdm
