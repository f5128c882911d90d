#pragma once

// Subject-specific generation: every real pose seeds k bridge chains whose
// outputs keep the pose's subject label. Also the synthetic-dataset manifest
// shared with subject-agnostic generation.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "crease/corpus.hpp"
#include "crease/denoiser.hpp"
#include "crease/png_io.hpp"
#include "crease/verifier.hpp"

namespace crease {

struct SsgmSampleSpec {
    int variations_per_pose = 5;
    int sample_steps = 200;
    double variance_scale = 1.0;
    std::uint64_t seed = 0;
    double flag_percentile = 5.0;  // samples below this crease-energy percentile are flagged
    int batch_size = 64;
    BridgeSampler sampler = BridgeSampler::marginal;

    void validate(const BridgeSchedule& sch) const {
        if (variations_per_pose < 1) throw ValidationError("SsgmSampleSpec: variations_per_pose must be >= 1");
        if (sample_steps < 1 || sample_steps > sch.T)
            throw ValidationError("SsgmSampleSpec: sample_steps " + std::to_string(sample_steps) +
                                  " incompatible with checkpoint schedule T=" + std::to_string(sch.T));
        if (!(variance_scale >= 0.0)) throw ValidationError("SsgmSampleSpec: variance_scale must be >= 0");
        if (!(flag_percentile >= 0.0 && flag_percentile <= 100.0))
            throw ValidationError("SsgmSampleSpec: flag_percentile must be in [0, 100]");
        if (batch_size < 1) throw ValidationError("SsgmSampleSpec: batch_size must be >= 1");
    }
};

struct SyntheticEntry {
    int subject_id = 0;
    std::string pose_key;        // file stem, always prefixed "syn_"
    int source_subject = -1;     // real subject the chain started from, -1 for none
    int source_pose = -1;        // real pose, or identity index for subject-agnostic samples
    std::uint64_t seed = 0;
    double variance_scale = 0.0;
    int steps = 0;               // 0 marks an unmodified identity sample
    double crease_energy = 0.0;
    bool flagged = false;
    std::string path;            // relative to the manifest directory
    ImageTensor image;
};

struct SyntheticManifest {
    std::string kind = "ss";  // "ss" or "sa"
    int image_size = 0;
    std::vector<SyntheticEntry> entries;

    [[nodiscard]] std::vector<int> subject_ids() const {
        std::vector<int> ids;
        for (const auto& e : entries) ids.push_back(e.subject_id);
        std::sort(ids.begin(), ids.end());
        ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
        return ids;
    }

    [[nodiscard]] std::map<int, std::vector<std::size_t>> by_subject() const {
        std::map<int, std::vector<std::size_t>> out;
        for (std::size_t i = 0; i < entries.size(); ++i) out[entries[i].subject_id].push_back(i);
        return out;
    }
};

/// High-pass energy: mean squared response of a 3x3 Laplacian. Flat or
/// washed-out samples score low.
inline double crease_energy(const ImageTensor& im) {
    double sum = 0.0;
    long n = 0;
    for (int c = 0; c < im.channels(); ++c)
        for (int y = 1; y + 1 < im.height(); ++y)
            for (int x = 1; x + 1 < im.width(); ++x) {
                const double l = 4 * im.at(y, x, c) - im.at(y - 1, x, c) - im.at(y + 1, x, c) - im.at(y, x - 1, c) -
                                 im.at(y, x + 1, c);
                sum += l * l;
                ++n;
            }
    return n ? sum / n : 0.0;
}

/// Sets crease_energy on every entry and flags those strictly below the
/// given percentile of the population.
inline void flag_low_energy(SyntheticManifest& m, double percentile) {
    if (m.entries.empty()) return;
    std::vector<double> e;
    for (auto& s : m.entries) e.push_back(s.crease_energy = crease_energy(s.image));
    std::sort(e.begin(), e.end());
    const auto idx = static_cast<std::size_t>(std::floor(percentile / 100.0 * static_cast<double>(e.size() - 1)));
    const double cut = e[idx];
    for (auto& s : m.entries) s.flagged = s.crease_energy < cut;
}

inline std::string ss_pose_key(int pose_id, int variation) {
    return "syn_" + std::to_string(pose_id) + "_" + std::to_string(variation);
}

/// Core sampler over any predictor; images must already match the model.
inline SyntheticManifest sample_subject_specific(const BridgeSchedule& schedule, const BatchPredictor& predict,
                                                 const CorpusManifest& manifest, const SsgmSampleSpec& spec) {
    if (manifest.entries.empty()) throw ValidationError("sample_subject_specific: empty manifest");
    spec.validate(schedule);
    std::vector<ImageTensor> starts;
    std::vector<std::uint64_t> seeds;
    SyntheticManifest out;
    out.kind = "ss";
    out.image_size = manifest.entries.front().image.height();
    for (const auto& e : manifest.entries) {
        for (int r = 0; r < spec.variations_per_pose; ++r) {
            SyntheticEntry s;
            s.subject_id = e.subject_id;
            s.source_subject = e.subject_id;
            s.source_pose = e.pose_id;
            s.pose_key = ss_pose_key(e.pose_id, r);
            s.seed = derive_seed(spec.seed, {static_cast<std::uint64_t>(e.subject_id), static_cast<std::uint64_t>(e.pose_id),
                                             static_cast<std::uint64_t>(r)});
            s.variance_scale = spec.variance_scale;
            s.steps = spec.sample_steps;
            s.path = std::to_string(e.subject_id) + "/" + s.pose_key + ".png";
            starts.push_back(e.image);
            seeds.push_back(s.seed);
            out.entries.push_back(std::move(s));
        }
    }
    auto images = bridge_sample(schedule, predict, starts, seeds, spec.sample_steps, spec.variance_scale, spec.batch_size,
                                true, spec.sampler);
    for (std::size_t i = 0; i < images.size(); ++i) out.entries[i].image = std::move(images[i]);
    flag_low_energy(out, spec.flag_percentile);
    return out;
}

inline SyntheticManifest sample_subject_specific(const BridgeModel& model, const CorpusManifest& manifest,
                                                 const SsgmSampleSpec& spec) {
    if (!model.trained()) throw ValidationError("sample_subject_specific: bridge model is untrained");
    for (const auto& e : manifest.entries) model.require_image(e.image, "sample_subject_specific");
    return sample_subject_specific(model.schedule, predictor(model), manifest, spec);
}

// ---------------------------------------------------------------------------
// manifest I/O: header "# crease-synthetic v1 kind=<k> image_size=<n>", then
// tab-separated subject_id, pose_key, path, source_subject, source_pose,
// seed, variance_scale, steps, crease_energy, flagged

inline void save_synthetic(const std::filesystem::path& root, const SyntheticManifest& m) {
    std::filesystem::create_directories(root);
    std::ofstream out(root / "manifest.txt");
    if (!out) throw std::runtime_error("cannot write " + (root / "manifest.txt").string());
    out << "# crease-synthetic v1 kind=" << m.kind << " image_size=" << m.image_size << "\n";
    out << std::setprecision(17);
    for (const auto& e : m.entries) {
        write_png_gray(root / e.path, e.image);
        out << e.subject_id << '\t' << e.pose_key << '\t' << e.path << '\t' << e.source_subject << '\t' << e.source_pose
            << '\t' << e.seed << '\t' << e.variance_scale << '\t' << e.steps << '\t' << e.crease_energy << '\t'
            << (e.flagged ? 1 : 0) << '\n';
    }
}

inline SyntheticManifest load_synthetic(const std::filesystem::path& file, bool load_images = true) {
    std::ifstream in(file);
    if (!in) throw ValidationError("cannot open synthetic manifest " + file.string());
    std::string line;
    if (!std::getline(in, line) || line.rfind("# crease-synthetic v1", 0) != 0)
        throw ValidationError(file.string() + ": not a synthetic manifest (bad header)");
    SyntheticManifest m;
    std::istringstream hs(line.substr(21));
    std::string tok;
    while (hs >> tok) {
        if (tok.rfind("kind=", 0) == 0) m.kind = tok.substr(5);
        if (tok.rfind("image_size=", 0) == 0) m.image_size = std::stoi(tok.substr(11));
    }
    if (m.kind != "ss" && m.kind != "sa") throw ValidationError(file.string() + ": unknown synthetic kind '" + m.kind + "'");
    int lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ls(line);
        SyntheticEntry e;
        int flagged = 0;
        if (!(ls >> e.subject_id >> e.pose_key >> e.path >> e.source_subject >> e.source_pose >> e.seed >>
              e.variance_scale >> e.steps >> e.crease_energy >> flagged))
            throw ValidationError(file.string() + ":" + std::to_string(lineno) + ": malformed synthetic record");
        if (e.pose_key.rfind("syn_", 0) != 0)
            throw ValidationError(file.string() + ":" + std::to_string(lineno) + ": pose key lacks syn_ prefix");
        e.flagged = flagged != 0;
        if (load_images) e.image = read_png_gray(file.parent_path() / e.path);
        m.entries.push_back(std::move(e));
    }
    return m;
}

// ---------------------------------------------------------------------------
// label consistency

struct CentroidCheck {
    double fraction_own_nearest = 0.0;
    std::size_t samples = 0;
};

/// Fraction of samples whose embedding is closer to their own subject's
/// centroid than to every other subject's centroid. Centroids come from
/// `reference` (subject id -> embeddings).
inline CentroidCheck nearest_centroid_check(const std::map<int, std::vector<Embedding>>& reference,
                                            const std::vector<std::pair<int, Embedding>>& samples) {
    if (reference.size() < 2) throw ValidationError("nearest_centroid_check: need at least 2 reference subjects");
    std::map<int, Embedding> centroids;
    for (const auto& [sid, es] : reference) {
        if (es.empty()) throw ValidationError("nearest_centroid_check: subject without embeddings");
        Embedding c{std::vector<float>(es.front().dim(), 0.f)};
        for (const auto& e : es)
            for (std::size_t i = 0; i < c.dim(); ++i) c.values[i] += e.values[i] / static_cast<float>(es.size());
        centroids.emplace(sid, std::move(c));
    }
    std::size_t hits = 0;
    for (const auto& [sid, e] : samples) {
        const auto own = centroids.find(sid);
        if (own == centroids.end()) throw ValidationError("nearest_centroid_check: sample subject has no centroid");
        const double d_own = score(e, own->second);
        double d_other = std::numeric_limits<double>::infinity();
        for (const auto& [other, c] : centroids)
            if (other != sid) d_other = std::min(d_other, score(e, c));
        hits += d_own < d_other;
    }
    return {samples.empty() ? 0.0 : static_cast<double>(hits) / static_cast<double>(samples.size()), samples.size()};
}

inline CentroidCheck label_consistency(const VerifierModel& verifier, const CorpusManifest& real,
                                       const SyntheticManifest& synthetic) {
    std::vector<ImageTensor> real_images, syn_images;
    for (const auto& e : real.entries) real_images.push_back(e.image);
    for (const auto& e : synthetic.entries) syn_images.push_back(e.image);
    const auto re = embed(verifier, real_images), se = embed(verifier, syn_images);
    std::map<int, std::vector<Embedding>> reference;
    for (std::size_t i = 0; i < re.size(); ++i) reference[real.entries[i].subject_id].push_back(re[i]);
    std::vector<std::pair<int, Embedding>> samples;
    for (std::size_t i = 0; i < se.size(); ++i) samples.emplace_back(synthetic.entries[i].subject_id, se[i]);
    return nearest_centroid_check(reference, samples);
}

}  // namespace crease
