#pragma once

// Procedural forehead-crease corpus. An identity seed fixes the crease
// geometry (a bundle of near-horizontal wavy strokes); a pose seed perturbs
// only the rendering: placement, depth and thickness of each stroke,
// contrast, illumination, a mild elastic warp and sensor noise.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "crease/image.hpp"
#include "crease/png_io.hpp"
#include "crease/random.hpp"

namespace crease {

inline constexpr const char* kCorpusGenerator = "crease-procedural-1";

struct CreaseStroke {
    double y_center = 0.5;  // normalized row of the stroke's anchor
    double x_start = 0.1;
    double x_end = 0.9;
    double curvature = 0.0;  // parabolic bow, normalized units
    double wave_amp = 0.0;
    double wave_freq = 1.0;  // cycles across the image width
    double wave_phase = 0.0;
    double thickness = 1.0;  // Gaussian profile sigma in pixels at 32 px
    double depth = 0.4;      // darkening at the stroke center
};

struct CreaseIdentity {
    std::vector<CreaseStroke> strokes;
    double skin = 0.65;  // base luminance in [0, 1]
};

/// Identity-level summary of the crease geometry plus the two seeds.
struct CreaseParams {
    int num_horizontal_creases = 0;
    double curvature = 0.0;
    double thickness = 0.0;
    double waviness = 0.0;
    double depth_contrast = 0.0;
    std::uint64_t identity_seed = 0;
    std::uint64_t pose_seed = 0;
};

struct PoseJitter {
    double shift_x = 0.0, shift_y = 0.0;  // normalized
    double rotation = 0.0;                // radians
    double scale = 1.0;
    std::vector<double> depth_gain;       // per stroke
    std::vector<double> thickness_gain;   // per stroke
    double contrast = 1.0;
    double brightness = 0.0;
    double light_gx = 0.0, light_gy = 0.0;
    double warp_amp = 0.0;
    double warp_fx = 1.0, warp_fy = 1.0, warp_px = 0.0, warp_py = 0.0;
    double noise_sigma = 0.015;
    std::uint64_t noise_seed = 0;
};

inline CreaseIdentity identity_from_seed(std::uint64_t identity_seed) {
    Rng rng(identity_seed);
    CreaseIdentity id;
    id.skin = rng.uniform(0.6, 0.72);
    const int n = rng.uniform_int(2, 5);
    // stack strokes down the forehead band with uneven spacing
    const double top = rng.uniform(0.15, 0.3);
    const double bottom = rng.uniform(0.7, 0.88);
    const double spacing = (bottom - top) / std::max(1, n - 1);
    for (int i = 0; i < n; ++i) {
        CreaseStroke s;
        s.y_center = n == 1 ? 0.5 : top + spacing * i + rng.uniform(-0.25, 0.25) * spacing;
        s.x_start = rng.uniform(0.02, 0.35);
        s.x_end = rng.uniform(0.65, 0.98);
        s.curvature = rng.uniform(-0.22, 0.22);
        s.wave_amp = rng.uniform(0.0, 0.025);
        s.wave_freq = rng.uniform(0.8, 3.0);
        s.wave_phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
        s.thickness = rng.uniform(0.6, 1.5);
        s.depth = rng.uniform(0.22, 0.55);
        id.strokes.push_back(s);
    }
    return id;
}

inline PoseJitter pose_from_seed(std::uint64_t pose_seed, std::size_t num_strokes) {
    Rng rng(pose_seed);
    PoseJitter p;
    p.shift_x = rng.uniform(-0.05, 0.05);
    p.shift_y = rng.uniform(-0.05, 0.05);
    p.rotation = rng.uniform(-4.0, 4.0) * std::numbers::pi / 180.0;
    p.scale = rng.uniform(0.96, 1.04);
    for (std::size_t i = 0; i < num_strokes; ++i) {
        p.depth_gain.push_back(rng.uniform(0.65, 1.35));
        p.thickness_gain.push_back(rng.uniform(0.85, 1.15));
    }
    p.contrast = rng.uniform(0.85, 1.15);
    p.brightness = rng.uniform(-0.05, 0.05);
    p.light_gx = rng.uniform(-0.06, 0.06);
    p.light_gy = rng.uniform(-0.06, 0.06);
    p.warp_amp = rng.uniform(0.0, 0.012);
    p.warp_fx = rng.uniform(0.5, 1.5);
    p.warp_fy = rng.uniform(0.5, 1.5);
    p.warp_px = rng.uniform(0.0, 2.0 * std::numbers::pi);
    p.warp_py = rng.uniform(0.0, 2.0 * std::numbers::pi);
    p.noise_seed = rng.next_seed();
    return p;
}

inline CreaseParams describe(std::uint64_t identity_seed, std::uint64_t pose_seed) {
    const auto id = identity_from_seed(identity_seed);
    CreaseParams p;
    p.identity_seed = identity_seed;
    p.pose_seed = pose_seed;
    p.num_horizontal_creases = static_cast<int>(id.strokes.size());
    for (const auto& s : id.strokes) {
        p.curvature += s.curvature;
        p.thickness += s.thickness;
        p.waviness += s.wave_amp;
        p.depth_contrast += s.depth;
    }
    const double n = static_cast<double>(id.strokes.size());
    p.curvature /= n;
    p.thickness /= n;
    p.waviness /= n;
    p.depth_contrast /= n;
    return p;
}

namespace detail {

inline double smoothstep01(double x) {
    x = std::clamp(x, 0.0, 1.0);
    return x * x * (3.0 - 2.0 * x);
}

}  // namespace detail

/// Renders one pose; output is quantized to 8 bits so it equals its PNG.
inline ImageTensor render_crease_image(const CreaseIdentity& id, const PoseJitter& pose, int size) {
    ImageTensor img(size, size, 1);
    Rng noise(pose.noise_seed);
    const double px_scale = size / 32.0;
    const double cr = std::cos(pose.rotation), sr = std::sin(pose.rotation);
    for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
            const double u = (x + 0.5) / size, v = (y + 0.5) / size;
            // inverse pose transform back to identity coordinates
            double du = u - 0.5 - pose.shift_x, dv = v - 0.5 - pose.shift_y;
            double cu = (cr * du + sr * dv) / pose.scale + 0.5;
            double cv = (-sr * du + cr * dv) / pose.scale + 0.5;
            cu += pose.warp_amp * std::sin(2.0 * std::numbers::pi * pose.warp_fy * cv + pose.warp_px);
            cv += pose.warp_amp * std::sin(2.0 * std::numbers::pi * pose.warp_fx * cu + pose.warp_py);

            double lum = id.skin + pose.light_gx * (u - 0.5) + pose.light_gy * (v - 0.5);
            for (std::size_t k = 0; k < id.strokes.size(); ++k) {
                const auto& s = id.strokes[k];
                const double mid = 0.5 * (s.x_start + s.x_end);
                const double f = s.y_center + s.curvature * (cu - mid) * (cu - mid) +
                                 s.wave_amp * std::sin(2.0 * std::numbers::pi * s.wave_freq * cu + s.wave_phase);
                const double d_px = (cv - f) * size;
                const double sigma = s.thickness * pose.thickness_gain[k] * px_scale;
                const double taper = detail::smoothstep01((cu - s.x_start) / 0.08) *
                                     detail::smoothstep01((s.x_end - cu) / 0.08);
                const double depth = s.depth * pose.depth_gain[k] * pose.contrast * taper;
                lum -= depth * std::exp(-d_px * d_px / (2.0 * sigma * sigma));
                // lit ridge just above the fold
                const double r = d_px + 1.6 * sigma;
                lum += 0.25 * depth * std::exp(-r * r / (2.0 * sigma * sigma));
            }
            lum += pose.brightness + noise.normal(0.0, pose.noise_sigma);
            img.at(y, x) = std::clamp(lum, 0.0, 1.0) * 2.0 - 1.0;
        }
    }
    return quantize_u8(std::move(img));
}

inline ImageTensor render_crease_image(std::uint64_t identity_seed, std::uint64_t pose_seed, int size) {
    const auto id = identity_from_seed(identity_seed);
    return render_crease_image(id, pose_from_seed(pose_seed, id.strokes.size()), size);
}

// ---------------------------------------------------------------------------

struct CorpusEntry {
    int subject_id = 0;
    int pose_id = 0;
    std::uint64_t identity_seed = 0;
    std::uint64_t pose_seed = 0;
    std::string path;  // relative to the manifest directory
    ImageTensor image;
};

struct CorpusManifest {
    std::string generator = kCorpusGenerator;
    int image_size = 32;
    std::vector<CorpusEntry> entries;

    [[nodiscard]] std::set<int> subject_ids() const {
        std::set<int> ids;
        for (const auto& e : entries) ids.insert(e.subject_id);
        return ids;
    }

    /// Entry indices grouped by subject, poses in manifest order.
    [[nodiscard]] std::map<int, std::vector<std::size_t>> by_subject() const {
        std::map<int, std::vector<std::size_t>> groups;
        for (std::size_t i = 0; i < entries.size(); ++i) groups[entries[i].subject_id].push_back(i);
        return groups;
    }

    [[nodiscard]] const CorpusEntry& find(int subject_id, int pose_id) const {
        for (const auto& e : entries)
            if (e.subject_id == subject_id && e.pose_id == pose_id) return e;
        throw ValidationError("manifest has no image for subject " + std::to_string(subject_id) + " pose " +
                              std::to_string(pose_id));
    }
};

inline std::string corpus_relative_path(int subject_id, int pose_id) {
    return std::to_string(subject_id) + "/" + std::to_string(pose_id) + ".png";
}

inline std::uint64_t identity_seed_for(std::uint64_t master_seed, int subject_id) {
    return derive_seed(master_seed, {0x1dULL, static_cast<std::uint64_t>(subject_id)});
}

/// D subjects x N poses. Subject ids run first_subject_id .. +D-1; a test
/// population generated with a disjoint id range gets disjoint identity seeds.
inline CorpusManifest generate_corpus(int num_subjects, int poses_per_subject, int image_size, std::uint64_t master_seed,
                                      int first_subject_id = 0) {
    if (num_subjects < 2) throw ValidationError("generate_corpus: need at least 2 subjects");
    if (poses_per_subject < 2) throw ValidationError("generate_corpus: need at least 2 poses per subject");
    if (image_size < 8) throw ValidationError("generate_corpus: image_size must be >= 8");
    if (first_subject_id < 0) throw ValidationError("generate_corpus: subject ids must be non-negative");
    CorpusManifest m;
    m.image_size = image_size;
    std::set<std::uint64_t> seen;
    for (int i = 0; i < num_subjects; ++i) {
        const int sid = first_subject_id + i;
        const auto id_seed = identity_seed_for(master_seed, sid);
        if (!seen.insert(id_seed).second) throw std::runtime_error("generate_corpus: identity seed collision");
        const auto identity = identity_from_seed(id_seed);
        for (int j = 0; j < poses_per_subject; ++j) {
            CorpusEntry e;
            e.subject_id = sid;
            e.pose_id = j;
            e.identity_seed = id_seed;
            e.pose_seed = derive_seed(id_seed, {0x905eULL, static_cast<std::uint64_t>(j)});
            e.path = corpus_relative_path(sid, j);
            e.image = render_crease_image(identity, pose_from_seed(e.pose_seed, identity.strokes.size()), image_size);
            m.entries.push_back(std::move(e));
        }
    }
    return m;
}

// ---------------------------------------------------------------------------
// manifest file: "# crease-corpus v1 generator=<g> image_size=<n>" then
// tab-separated subject_id, pose_id, path, identity_seed, pose_seed.

inline void write_manifest(const CorpusManifest& m, const std::filesystem::path& file) {
    if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
    std::ofstream out(file);
    if (!out) throw std::runtime_error("cannot write manifest " + file.string());
    out << "# crease-corpus v1 generator=" << m.generator << " image_size=" << m.image_size << "\n";
    for (const auto& e : m.entries)
        out << e.subject_id << '\t' << e.pose_id << '\t' << e.path << '\t' << e.identity_seed << '\t' << e.pose_seed
            << '\n';
}

/// Writes every image under root and the manifest at root/manifest.txt.
inline void save_corpus(const CorpusManifest& m, const std::filesystem::path& root) {
    for (const auto& e : m.entries) write_png_gray(root / e.path, e.image);
    write_manifest(m, root / "manifest.txt");
}

inline CorpusManifest load_manifest(const std::filesystem::path& file, bool load_images = true) {
    std::ifstream in(file);
    if (!in) throw ValidationError("cannot open manifest " + file.string());
    CorpusManifest m;
    std::string line;
    if (!std::getline(in, line) || line.rfind("# crease-corpus v1", 0) != 0)
        throw ValidationError(file.string() + ": not a crease corpus manifest (bad header)");
    {
        std::istringstream hs(line.substr(18));
        std::string kv;
        while (hs >> kv) {
            const auto eq = kv.find('=');
            if (eq == std::string::npos) continue;
            const auto key = kv.substr(0, eq), val = kv.substr(eq + 1);
            if (key == "generator") m.generator = val;
            if (key == "image_size") m.image_size = std::stoi(val);
        }
    }
    const auto dir = file.parent_path();
    int lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ls(line);
        CorpusEntry e;
        if (!(ls >> e.subject_id >> e.pose_id >> e.path >> e.identity_seed >> e.pose_seed))
            throw ValidationError(file.string() + ":" + std::to_string(lineno) + ": malformed manifest record");
        if (load_images) {
            e.image = read_png_gray(dir / e.path);
            if (e.image.height() != m.image_size || e.image.width() != m.image_size)
                throw ValidationError(e.path + ": image size does not match manifest image_size");
        }
        m.entries.push_back(std::move(e));
    }
    std::set<std::pair<int, int>> keys;
    for (const auto& e : m.entries)
        if (!keys.insert({e.subject_id, e.pose_id}).second)
            throw ValidationError(file.string() + ": duplicate pose " + std::to_string(e.pose_id) + " for subject " +
                                  std::to_string(e.subject_id));
    return m;
}

}  // namespace crease
