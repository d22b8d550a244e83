#include "fewseg/episode.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>

#include "fewseg/geometry.hpp"
#include "fewseg/image_io.hpp"

namespace fs = std::filesystem;

namespace fewseg {

void Episode::validate() const {
    if (support.empty()) throw IngestError("episode " + episode_id + ": no support shots");
    if (queries.empty()) throw IngestError("episode " + episode_id + ": no queries");
    for (size_t i = 0; i < support.size(); ++i) {
        const auto& s = support[i];
        if (s.image.h != s.mask.h || s.image.w != s.mask.w)
            throw IngestError("episode " + episode_id + ": support " + std::to_string(i) +
                              " image/mask size mismatch");
    }
    for (size_t j = 0; j < queries.size(); ++j) {
        const auto& q = queries[j];
        if (q.gt && (q.image.h != q.gt->h || q.image.w != q.gt->w))
            throw IngestError("episode " + episode_id + ": query " + std::to_string(j) +
                              " image/mask size mismatch");
    }
}

namespace {

std::vector<std::string> list_images(const fs::path& dir, const std::string& prefix) {
    std::vector<std::string> names;
    if (!fs::is_directory(dir)) return names;
    for (const auto& e : fs::directory_iterator(dir)) {
        const std::string name = e.path().filename().string();
        if (name.rfind(prefix, 0) == 0 && name.size() > 4 &&
            name.substr(name.size() - 4) == ".png")
            names.push_back(name);
    }
    std::sort(names.begin(), names.end());
    return names;
}

}  // namespace

Episode load_episode(const std::string& dir) {
    const fs::path root(dir);
    if (!fs::is_directory(root)) throw IngestError("episode directory not found: " + dir);
    Episode ep;
    ep.episode_id = root.filename().string();

    const fs::path meta = root / "meta.txt";
    if (fs::exists(meta)) {
        std::ifstream f(meta);
        std::string line;
        while (std::getline(f, line)) {
            const auto eq = line.find('=');
            if (eq == std::string::npos) continue;
            const std::string key = line.substr(0, eq);
            const std::string val = line.substr(eq + 1);
            if (key == "class_id") ep.class_id = std::stoi(val);
            if (key == "seed") ep.seed = std::stoull(val);
        }
    }

    for (const std::string& name : list_images(root / "support", "img_")) {
        SupportShot shot;
        shot.image = read_image_rgb((root / "support" / name).string());
        const std::string mask_name = "mask_" + name.substr(4);
        const fs::path mask_path = root / "support" / mask_name;
        if (!fs::exists(mask_path))
            throw IngestError("missing support mask: " + mask_path.string());
        shot.mask = read_mask(mask_path.string());
        ep.support.push_back(std::move(shot));
    }
    for (const std::string& name : list_images(root / "query", "img_")) {
        QuerySample q;
        q.image = read_image_rgb((root / "query" / name).string());
        const std::string mask_name = "mask_" + name.substr(4);
        const fs::path mask_path = root / "query" / mask_name;
        if (fs::exists(mask_path)) q.gt = read_mask(mask_path.string());
        ep.queries.push_back(std::move(q));
    }
    ep.validate();
    return ep;
}

void save_episode(const Episode& ep, const std::string& dir) {
    const fs::path root(dir);
    fs::create_directories(root / "support");
    fs::create_directories(root / "query");
    {
        std::ofstream meta(root / "meta.txt");
        meta << "class_id=" << ep.class_id << "\n";
        meta << "seed=" << ep.seed << "\n";
    }
    for (size_t i = 0; i < ep.support.size(); ++i) {
        write_image_rgb((root / "support" / ("img_" + std::to_string(i) + ".png")).string(),
                        ep.support[i].image);
        write_mask((root / "support" / ("mask_" + std::to_string(i) + ".png")).string(),
                   ep.support[i].mask);
    }
    for (size_t j = 0; j < ep.queries.size(); ++j) {
        write_image_rgb((root / "query" / ("img_" + std::to_string(j) + ".png")).string(),
                        ep.queries[j].image);
        if (ep.queries[j].gt)
            write_mask((root / "query" / ("mask_" + std::to_string(j) + ".png")).string(),
                       *ep.queries[j].gt);
    }
}

// ---- synthetic episodes ----

void SynthSpec::validate() const {
    if (height < 8 || width < 8) throw ConfigError("synth: size too small");
    if (shots < 1 || queries < 1) throw ConfigError("synth: shots and queries must be >= 1");
    if (separation < 0) throw ConfigError("synth: separation must be >= 0");
    if (n_classes < 1) throw ConfigError("synth: n_classes must be >= 1");
    const Scalar lo = fixed_fg_ratio.value_or(fg_lo);
    const Scalar hi = fixed_fg_ratio.value_or(fg_hi);
    if (lo <= 0.0 || hi >= 1.0 || lo > hi)
        throw ConfigError("synth: degenerate foreground-ratio band");
}

namespace {

// Smooth blob mask with an exact foreground pixel count.
MaskU8 blob_mask(int h, int w, Scalar fg_ratio, int cells, Rng& rng) {
    MapF grid(cells, cells);
    for (auto& v : grid.data) v = rng.normal();
    MapF field = resize_bilinear(grid, h, w);
    const int n = h * w;
    const int count = static_cast<int>(std::lround(fg_ratio * n));
    if (count <= 0 || count >= n)
        throw ConfigError("synth: degenerate foreground area (ratio " + std::to_string(fg_ratio) +
                          ")");
    std::vector<int> order(n);
    for (int i = 0; i < n; ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&field](int a, int b) { return field.data[a] > field.data[b]; });
    MaskU8 mask(h, w, 0);
    for (int i = 0; i < count; ++i) mask.data[order[i]] = 1;
    return mask;
}

// multi-scale value noise; spatially smooth like natural texture
MapF smooth_field(int h, int w, Rng& rng) {
    MapF acc(h, w, 0.0);
    const int scales[3] = {4, 9, 18};
    const Scalar amps[3] = {0.55, 0.3, 0.15};
    for (int s = 0; s < 3; ++s) {
        MapF grid(std::min(scales[s], h), std::min(scales[s], w));
        for (auto& v : grid.data) v = rng.normal();
        MapF up = resize_bilinear(grid, h, w);
        for (int i = 0; i < acc.size(); ++i) acc.data[i] += amps[s] * up.data[i];
    }
    return acc;
}

struct ClassTexture {
    Scalar base[3];       // shared base color
    Scalar fg_dir[3];     // channel pattern of the foreground texture
    Scalar bg_dir[3];     // channel pattern of the background texture
    Scalar offs_dir[3];   // small chromatic offset direction
    Scalar contrast = 0;  // texture-pattern amplitude
    Scalar offset = 0;    // color-offset amplitude
};

// Both classes share their mean color; they differ by the channel pattern
// their texture modulates (plus a small chromatic offset). Raw cross-image
// cosines then carry almost no class signal, while the structure stays
// recoverable from texture statistics.
ImageU8 textured_image(const MaskU8& mask, const ClassTexture& ct, Scalar noise, Rng& rng) {
    const int h = mask.h, w = mask.w;
    // shared low-frequency illumination field
    MapF lum_grid(3, 3);
    for (auto& v : lum_grid.data) v = rng.normal() * 0.06;
    MapF lum = resize_bilinear(lum_grid, h, w);
    MapF tex = smooth_field(h, w, rng);       // class-agnostic luminance texture
    MapF pattern = smooth_field(h, w, rng);   // class-patterned texture
    MapF detail[3] = {smooth_field(h, w, rng), smooth_field(h, w, rng), smooth_field(h, w, rng)};
    ImageU8 img(h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const bool fg = mask.at(y, x) != 0;
            const Scalar* dir = fg ? ct.fg_dir : ct.bg_dir;
            const Scalar side = fg ? 1.0 : -1.0;
            for (int c = 0; c < 3; ++c) {
                Scalar v = ct.base[c] + lum.at(y, x) + noise * tex.at(y, x) +
                           ct.contrast * pattern.at(y, x) * dir[c] +
                           side * ct.offset * ct.offs_dir[c] +
                           0.03 * detail[c].at(y, x) + 0.01 * rng.normal();
                img.at(y, x, c) =
                    static_cast<uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
            }
        }
    return img;
}

}  // namespace

Episode synthesize_episode(uint64_t seed, const SynthSpec& spec) {
    spec.validate();
    Episode ep;
    ep.seed = seed;
    ep.episode_id = "synth_" + std::to_string(seed);
    ep.class_id = static_cast<int>(mix64(seed) % static_cast<uint64_t>(spec.n_classes));

    // class texture statistics are a function of the class id alone, so
    // episodes of one class share them
    Rng class_rng(derive_seed(0xC1A55E5, ep.class_id));
    ClassTexture ct;
    Scalar fg_raw[3], bg_raw[3], offs_raw[3];
    for (int c = 0; c < 3; ++c) {
        ct.base[c] = class_rng.uniform(0.35, 0.65);
        fg_raw[c] = class_rng.normal();
        bg_raw[c] = class_rng.normal();
        offs_raw[c] = class_rng.normal();
    }
    // orthonormal channel patterns for the two classes; chromatic offset
    // direction with the luminance component removed
    auto norm3 = [](Scalar* v) {
        Scalar n = std::sqrt(std::max(v[0] * v[0] + v[1] * v[1] + v[2] * v[2], 1e-9));
        for (int c = 0; c < 3; ++c) v[c] /= n;
    };
    norm3(fg_raw);
    Scalar dot = fg_raw[0] * bg_raw[0] + fg_raw[1] * bg_raw[1] + fg_raw[2] * bg_raw[2];
    for (int c = 0; c < 3; ++c) bg_raw[c] -= dot * fg_raw[c];
    norm3(bg_raw);
    const Scalar lum_mean = (offs_raw[0] + offs_raw[1] + offs_raw[2]) / 3.0;
    for (int c = 0; c < 3; ++c) offs_raw[c] -= lum_mean;
    norm3(offs_raw);
    for (int c = 0; c < 3; ++c) {
        ct.fg_dir[c] = fg_raw[c];
        ct.bg_dir[c] = bg_raw[c];
        ct.offs_dir[c] = offs_raw[c];
    }
    ct.contrast = spec.separation * 0.10;
    ct.offset = spec.separation * 0.21;
    Rng ep_rng(derive_seed(seed, 0xE21));
    for (int c = 0; c < 3; ++c)
        ct.base[c] = std::clamp(ct.base[c] + 0.03 * ep_rng.normal(), 0.1, 0.9);

    auto ratio = [&spec](Rng& rng) {
        return spec.fixed_fg_ratio ? *spec.fixed_fg_ratio : rng.uniform(spec.fg_lo, spec.fg_hi);
    };

    for (int i = 0; i < spec.shots; ++i) {
        Rng rng(derive_seed(seed, 0x5079, i));
        SupportShot shot;
        shot.mask = blob_mask(spec.height, spec.width, ratio(rng), spec.blob_cells, rng);
        shot.image = textured_image(shot.mask, ct, spec.noise, rng);
        ep.support.push_back(std::move(shot));
    }
    for (int j = 0; j < spec.queries; ++j) {
        Rng rng(derive_seed(seed, 0x9E12, j));
        QuerySample q;
        MaskU8 gt = blob_mask(spec.height, spec.width, ratio(rng), spec.blob_cells, rng);
        q.image = textured_image(gt, ct, spec.noise, rng);
        q.gt = std::move(gt);
        ep.queries.push_back(std::move(q));
    }
    ep.validate();
    return ep;
}

}  // namespace fewseg
