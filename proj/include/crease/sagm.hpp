#pragma once

// Subject-agnostic generation: novel identities from the unconditional
// model, expanded into poses by the bridge sampler, then screened against
// the real population.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <set>
#include <string>
#include <vector>

#include "crease/metrics.hpp"
#include "crease/ssgm.hpp"

namespace crease {

inline std::vector<ImageTensor> sample_identities(const DdpmModel& model, int count, std::uint64_t seed, int sample_steps,
                                                  int batch_size = 64) {
    if (!model.trained()) throw ValidationError("sample_identities: unconditional model is untrained");
    if (count < 1) throw ValidationError("sample_identities: count must be >= 1");
    if (sample_steps < 1 || sample_steps > model.schedule.T)
        throw ValidationError("sample_identities: sample_steps must be in [1, T]");
    std::vector<std::uint64_t> seeds;
    for (int i = 0; i < count; ++i) seeds.push_back(derive_seed(seed, {0x5a6dULL, static_cast<std::uint64_t>(i)}));
    return ddpm_sample(model.schedule, predictor(model), {model.cfg.image_size, model.cfg.image_size, model.cfg.channels},
                       seeds, sample_steps, batch_size);
}

/// Identity i becomes subject first_id + i with its original image (pose key
/// "syn_orig") plus poses_per_identity - 1 bridge variations.
inline SyntheticManifest expand_identities(const std::vector<ImageTensor>& identities, const BridgeModel& bridge,
                                           int poses_per_identity, int first_id, const std::set<int>& real_ids,
                                           const SsgmSampleSpec& spec) {
    if (poses_per_identity < 1) throw ValidationError("expand_identities: poses_per_identity must be >= 1");
    if (identities.empty()) throw ValidationError("expand_identities: no identities");
    const auto n = static_cast<long long>(identities.size());
    if (first_id < 0 || first_id + n - 1 > std::numeric_limits<int>::max())
        throw ValidationError("expand_identities: id range out of bounds");
    for (int id : real_ids)
        if (id >= first_id && id < first_id + n)
            throw ValidationError("expand_identities: synthetic id " + std::to_string(id) +
                                  " collides with a real subject; choose a first_id above the real id range");
    SyntheticManifest out;
    out.kind = "sa";
    out.image_size = identities.front().height();
    std::vector<ImageTensor> starts;
    std::vector<std::uint64_t> seeds;
    std::vector<std::size_t> slots;
    for (std::size_t i = 0; i < identities.size(); ++i) {
        const int sid = first_id + static_cast<int>(i);
        SyntheticEntry orig;
        orig.subject_id = sid;
        orig.source_pose = static_cast<int>(i);
        orig.pose_key = "syn_orig";
        orig.path = std::to_string(sid) + "/syn_orig.png";
        orig.image = identities[i];
        out.entries.push_back(std::move(orig));
        for (int r = 1; r < poses_per_identity; ++r) {
            SyntheticEntry s;
            s.subject_id = sid;
            s.source_pose = static_cast<int>(i);
            s.pose_key = "syn_" + std::to_string(r);
            s.seed = derive_seed(spec.seed, {0x5a6eULL, static_cast<std::uint64_t>(i), static_cast<std::uint64_t>(r)});
            s.variance_scale = spec.variance_scale;
            s.steps = spec.sample_steps;
            s.path = std::to_string(sid) + "/" + s.pose_key + ".png";
            starts.push_back(identities[i]);
            seeds.push_back(s.seed);
            slots.push_back(out.entries.size());
            out.entries.push_back(std::move(s));
        }
    }
    if (!starts.empty()) {
        if (!bridge.trained()) throw ValidationError("expand_identities: bridge model is untrained");
        spec.validate(bridge.schedule);
        auto images = bridge_sample(bridge.schedule, predictor(bridge), starts, seeds, spec.sample_steps,
                                    spec.variance_scale, spec.batch_size, true, spec.sampler);
        for (std::size_t k = 0; k < images.size(); ++k) out.entries[slots[k]].image = std::move(images[k]);
    }
    flag_low_energy(out, spec.flag_percentile);
    return out;
}

struct LeakRow {
    int identity = 0;
    int nearest_real_subject = -1;
    double distance = 0.0;
    bool removed = false;
};

struct LeakFilterResult {
    SyntheticManifest kept;
    std::vector<LeakRow> report;
};

/// Per synthetic identity: the minimum embedding distance from any of its
/// images to any real image.
inline std::vector<LeakRow> identity_distances(const std::vector<Embedding>& synthetic, const std::vector<int>& syn_ids,
                                               const std::vector<Embedding>& real, const std::vector<int>& real_ids) {
    std::map<int, LeakRow> rows;
    for (std::size_t i = 0; i < synthetic.size(); ++i) {
        auto& row = rows.try_emplace(syn_ids[i], LeakRow{syn_ids[i], -1, std::numeric_limits<double>::infinity(), false})
                        .first->second;
        for (std::size_t j = 0; j < real.size(); ++j) {
            const double d = score(synthetic[i], real[j]);
            if (d < row.distance) {
                row.distance = d;
                row.nearest_real_subject = real_ids[j];
            }
        }
    }
    std::vector<LeakRow> out;
    for (auto& [id, row] : rows) out.push_back(row);
    return out;
}

/// Removes identities closer than `threshold` to any real image. A
/// threshold of 0 removes nothing.
inline LeakFilterResult filter_identity_leaks(const SyntheticManifest& synthetic, const CorpusManifest& real,
                                              const VerifierModel& verifier, double threshold) {
    if (!(threshold >= 0.0)) throw ValidationError("filter_identity_leaks: threshold must be >= 0");
    if (!verifier.trained()) throw ValidationError("filter_identity_leaks: verifier is untrained");
    if (real.entries.empty()) throw ValidationError("filter_identity_leaks: empty real manifest");
    std::vector<ImageTensor> si, ri;
    std::vector<int> sids, rids;
    for (const auto& e : synthetic.entries) {
        si.push_back(e.image);
        sids.push_back(e.subject_id);
    }
    for (const auto& e : real.entries) {
        ri.push_back(e.image);
        rids.push_back(e.subject_id);
    }
    LeakFilterResult res;
    // one image per pass: a duplicated image must embed bit-identically
    res.report = identity_distances(embed(verifier, si, 1), sids, embed(verifier, ri, 1), rids);
    std::set<int> removed;
    for (auto& row : res.report)
        if ((row.removed = row.distance < threshold)) removed.insert(row.identity);
    res.kept.kind = synthetic.kind;
    res.kept.image_size = synthetic.image_size;
    for (const auto& e : synthetic.entries)
        if (!removed.count(e.subject_id)) res.kept.entries.push_back(e);
    return res;
}

/// Distance at which the verifier accepts at most `fmr` of the impostor
/// comparisons among `validation` images (all cross-subject pairs).
inline double leak_threshold_at_fmr(const VerifierModel& verifier, const CorpusManifest& validation, double fmr) {
    std::vector<ImageTensor> images;
    std::vector<int> labels;
    for (const auto& e : validation.entries) {
        images.push_back(e.image);
        labels.push_back(e.subject_id);
    }
    auto s = all_pairs_scores(embed(verifier, images), labels);
    if (s.genuine.empty()) s.genuine.push_back(0.0);
    return tmr_at_fmr(s, {fmr}).front().threshold;
}

inline void write_leak_report(const std::filesystem::path& file, const std::vector<LeakRow>& rows) {
    if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
    std::ofstream out(file);
    if (!out) throw std::runtime_error("cannot write " + file.string());
    out << "# identity_id\tnearest_real_subject\tdistance\tverdict\n" << std::setprecision(10);
    for (const auto& r : rows)
        out << r.identity << '\t' << r.nearest_real_subject << '\t' << r.distance << '\t' << (r.removed ? "removed" : "kept")
            << '\n';
}

}  // namespace crease
