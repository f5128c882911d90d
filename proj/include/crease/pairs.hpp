#pragma once

// Training-pair construction for the bridge model.
//   comb        : unordered pose pairs, C(N_i, 2) forward records per subject
//   permute     : all ordered pairs, P(N_i, 2) = forward + backward records
//   permute_aug : permute plus k random image-to-augmentation records per subject
// A record (source -> target) trains the sampler to start at the source and
// land on the target, i.e. x_T = source and x_0 = target.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "crease/augment.hpp"
#include "crease/corpus.hpp"

namespace crease {

enum class PairStrategy { comb, permute, permute_aug };
enum class PairKind { forward, backward, image_to_aug };

inline std::string_view to_string(PairStrategy s) {
    switch (s) {
        case PairStrategy::comb: return "comb";
        case PairStrategy::permute: return "permute";
        case PairStrategy::permute_aug: return "permute_aug";
    }
    return "?";
}

inline PairStrategy parse_pair_strategy(std::string_view s) {
    if (s == "comb") return PairStrategy::comb;
    if (s == "permute") return PairStrategy::permute;
    if (s == "permute_aug" || s == "permuteaug") return PairStrategy::permute_aug;
    throw ValidationError("unknown pair strategy '" + std::string(s) + "' (comb | permute | permute_aug)");
}

inline std::string_view to_string(PairKind k) {
    switch (k) {
        case PairKind::forward: return "forward";
        case PairKind::backward: return "backward";
        case PairKind::image_to_aug: return "image_to_aug";
    }
    return "?";
}

inline PairKind parse_pair_kind(std::string_view s) {
    if (s == "forward") return PairKind::forward;
    if (s == "backward") return PairKind::backward;
    if (s == "image_to_aug") return PairKind::image_to_aug;
    throw ValidationError("unknown pair kind '" + std::string(s) + "'");
}

struct ImageRef {
    int subject_id = 0;
    int pose_id = 0;
    std::optional<AugSpec> aug;

    friend bool operator==(const ImageRef& a, const ImageRef& b) {
        return a.subject_id == b.subject_id && a.pose_id == b.pose_id && a.aug.has_value() == b.aug.has_value() &&
               (!a.aug || a.aug->seed == b.aug->seed);
    }
};

struct PairRecord {
    int subject_id = 0;
    ImageRef source;
    ImageRef target;
    PairKind kind = PairKind::forward;
};

inline std::vector<PairRecord> build_pairs(const CorpusManifest& manifest, PairStrategy strategy,
                                           int aug_pairs_per_subject = 100, std::uint64_t seed = 0) {
    if (strategy == PairStrategy::permute_aug && aug_pairs_per_subject < 0)
        throw ValidationError("build_pairs: aug_pairs_per_subject must be >= 0");
    std::vector<PairRecord> pairs;
    const auto groups = manifest.by_subject();
    if (groups.empty()) throw ValidationError("build_pairs: empty manifest");
    for (const auto& [sid, idx] : groups) {
        if (idx.size() < 2)
            throw ValidationError("build_pairs: subject " + std::to_string(sid) + " has fewer than 2 poses");
        for (std::size_t a = 0; a < idx.size(); ++a) {
            for (std::size_t b = 0; b < idx.size(); ++b) {
                if (a == b) continue;
                if (strategy == PairStrategy::comb && b < a) continue;
                const auto& src = manifest.entries[idx[a]];
                const auto& dst = manifest.entries[idx[b]];
                pairs.push_back({sid, {sid, src.pose_id, std::nullopt}, {sid, dst.pose_id, std::nullopt},
                                 a < b ? PairKind::forward : PairKind::backward});
            }
        }
        if (strategy == PairStrategy::permute_aug) {
            Rng rng(derive_seed(seed, {0xa06ULL, static_cast<std::uint64_t>(sid)}));
            for (int k = 0; k < aug_pairs_per_subject; ++k) {
                const auto& src = manifest.entries[idx[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(idx.size()) - 1))]];
                const auto kind = kPairAugKinds[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(kPairAugKinds.size()) - 1))];
                pairs.push_back({sid, {sid, src.pose_id, std::nullopt}, {sid, src.pose_id, random_aug_spec(kind, rng)},
                                 PairKind::image_to_aug});
            }
        }
    }
    return pairs;
}

inline ImageTensor resolve(const CorpusManifest& manifest, const ImageRef& ref) {
    const auto& img = manifest.find(ref.subject_id, ref.pose_id).image;
    return ref.aug ? augment_clamped(img, *ref.aug) : img;
}

/// (x0, xT) training pair: x0 = target, xT = source.
struct ImagePair {
    ImageTensor x0;
    ImageTensor xT;
};

inline std::vector<ImagePair> materialize_pairs(const CorpusManifest& manifest, const std::vector<PairRecord>& records) {
    std::vector<ImagePair> out;
    out.reserve(records.size());
    for (const auto& r : records) out.push_back({resolve(manifest, r.target), resolve(manifest, r.source)});
    return out;
}

// ---------------------------------------------------------------------------
// pair file: header "# crease-pairs v1 strategy=<s>" then tab-separated
// subject_id, source path, target path, kind. Paths are relative to the
// pair file's directory.

struct PairFileRecord {
    int subject_id = 0;
    std::string source;
    std::string target;
    PairKind kind = PairKind::forward;
};

inline void write_pair_file(const std::filesystem::path& file, std::string_view strategy,
                            const std::vector<PairFileRecord>& records) {
    if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
    std::ofstream out(file);
    if (!out) throw std::runtime_error("cannot write pair file " + file.string());
    out << "# crease-pairs v1 strategy=" << strategy << "\n";
    for (const auto& r : records)
        out << r.subject_id << '\t' << r.source << '\t' << r.target << '\t' << to_string(r.kind) << '\n';
}

inline std::vector<PairFileRecord> read_pair_file(const std::filesystem::path& file) {
    std::ifstream in(file);
    if (!in) throw ValidationError("cannot open pair file " + file.string());
    std::string line;
    if (!std::getline(in, line) || line.rfind("# crease-pairs v1", 0) != 0)
        throw ValidationError(file.string() + ": not a crease pair file (bad header)");
    std::vector<PairFileRecord> records;
    int lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ls(line);
        PairFileRecord r;
        std::string kind;
        if (!(ls >> r.subject_id >> r.source >> r.target >> kind))
            throw ValidationError(file.string() + ":" + std::to_string(lineno) + ": malformed pair record");
        r.kind = parse_pair_kind(kind);
        if (r.source == r.target)
            throw ValidationError(file.string() + ":" + std::to_string(lineno) + ": source equals target");
        records.push_back(std::move(r));
    }
    if (records.empty()) throw ValidationError(file.string() + ": no pairs");
    return records;
}

}  // namespace crease
