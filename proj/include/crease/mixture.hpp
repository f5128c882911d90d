#pragma once

// Declarative verifier training mixtures. One source per line:
//
//   real       <corpus manifest>
//   augmented  <corpus manifest> [copies=<n>]
//   ss         <synthetic manifest>
//   sa         <synthetic manifest>
//
// Paths are relative to the mixture file. Sources are expanded in file order
// and entries in manifest order, so a mixture plus a seed fixes the training
// set exactly.

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "crease/augment.hpp"
#include "crease/corpus.hpp"
#include "crease/ssgm.hpp"
#include "crease/verifier.hpp"

namespace crease {

enum class MixtureRole { real, augmented, ss, sa };

inline std::string_view to_string(MixtureRole r) {
    switch (r) {
        case MixtureRole::real: return "real";
        case MixtureRole::augmented: return "augmented";
        case MixtureRole::ss: return "ss";
        case MixtureRole::sa: return "sa";
    }
    return "?";
}

inline MixtureRole parse_mixture_role(std::string_view s) {
    for (auto r : {MixtureRole::real, MixtureRole::augmented, MixtureRole::ss, MixtureRole::sa})
        if (to_string(r) == s) return r;
    throw ValidationError("unknown mixture role '" + std::string(s) + "' (expected real, augmented, ss or sa)");
}

struct MixtureSource {
    MixtureRole role = MixtureRole::real;
    std::filesystem::path path;  // absolute after loading
    int copies = 1;              // augmented only
};

struct Mixture {
    std::vector<MixtureSource> sources;

    [[nodiscard]] bool has(MixtureRole r) const {
        for (const auto& s : sources)
            if (s.role == r) return true;
        return false;
    }
};

inline Mixture parse_mixture(std::istream& in, const std::filesystem::path& base, const std::string& where = "mixture") {
    Mixture m;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        std::istringstream ls(line);
        std::string role, path, opt;
        if (!(ls >> role)) continue;
        const auto at = where + ":" + std::to_string(lineno) + ": ";
        if (!(ls >> path)) throw ValidationError(at + "missing manifest path");
        MixtureSource s;
        s.role = parse_mixture_role(role);
        s.path = std::filesystem::path(path).is_absolute() ? std::filesystem::path(path) : base / path;
        while (ls >> opt) {
            if (s.role == MixtureRole::augmented && opt.rfind("copies=", 0) == 0) {
                s.copies = std::stoi(opt.substr(7));
                if (s.copies < 1) throw ValidationError(at + "copies must be >= 1");
            } else {
                throw ValidationError(at + "unexpected option '" + opt + "'");
            }
        }
        m.sources.push_back(std::move(s));
    }
    if (m.sources.empty()) throw ValidationError(where + ": mixture lists no sources");
    return m;
}

inline Mixture load_mixture(const std::filesystem::path& file) {
    std::ifstream in(file);
    if (!in) throw ValidationError("cannot open mixture file " + file.string());
    return parse_mixture(in, file.parent_path(), file.string());
}

/// Copy c of an image gets one augmentation of a kind drawn from its own
/// stream, so adding copies never changes earlier ones.
inline ImageTensor augmented_copy(const ImageTensor& image, std::uint64_t seed, int subject_id, int pose_id, int copy) {
    Rng rng(derive_seed(seed, {0xa117ULL, static_cast<std::uint64_t>(subject_id), static_cast<std::uint64_t>(pose_id),
                               static_cast<std::uint64_t>(copy)}));
    const auto kind = kAllAugKinds[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(kAllAugKinds.size()) - 1))];
    return augment_clamped(image, random_aug_spec(kind, rng));
}

struct MixtureCounts {
    std::size_t real = 0, augmented = 0, ss = 0, sa = 0;
    [[nodiscard]] std::size_t total() const { return real + augmented + ss + sa; }
};

/// Expands a mixture into labelled images. Subject-agnostic ids must not
/// coincide with any id from the other sources.
inline LabeledSet build_training_set(const Mixture& mix, std::uint64_t seed, MixtureCounts* counts = nullptr) {
    LabeledSet out;
    MixtureCounts n;
    std::set<int> named_ids, agnostic_ids;
    int image_size = -1;
    auto check_size = [&](const ImageTensor& im, const std::filesystem::path& src) {
        if (image_size < 0) image_size = im.height();
        if (im.height() != image_size || im.width() != image_size)
            throw ValidationError("mixture: " + src.string() + " has " + std::to_string(im.height()) + "x" +
                                  std::to_string(im.width()) + " images, expected " + std::to_string(image_size));
    };
    for (const auto& s : mix.sources) {
        if (s.role == MixtureRole::real || s.role == MixtureRole::augmented) {
            const auto m = load_manifest(s.path);
            for (const auto& e : m.entries) {
                check_size(e.image, s.path);
                named_ids.insert(e.subject_id);
                if (s.role == MixtureRole::real) {
                    out.add(e.image, e.subject_id);
                    ++n.real;
                } else {
                    for (int c = 0; c < s.copies; ++c) {
                        out.add(augmented_copy(e.image, seed, e.subject_id, e.pose_id, c), e.subject_id);
                        ++n.augmented;
                    }
                }
            }
        } else {
            const auto m = load_synthetic(s.path);
            const bool agnostic = s.role == MixtureRole::sa;
            if (m.kind != to_string(s.role))
                throw ValidationError("mixture: " + s.path.string() + " holds '" + m.kind + "' samples but is listed as '" +
                                      std::string(to_string(s.role)) + "'");
            for (const auto& e : m.entries) {
                check_size(e.image, s.path);
                (agnostic ? agnostic_ids : named_ids).insert(e.subject_id);
                out.add(e.image, e.subject_id);
                ++(agnostic ? n.sa : n.ss);
            }
        }
    }
    for (int id : agnostic_ids)
        if (named_ids.count(id))
            throw ValidationError("mixture: subject-agnostic identity " + std::to_string(id) +
                                  " reuses a real subject id; regenerate with a first id above the real range");
    if (counts) *counts = n;
    return out;
}

}  // namespace crease
