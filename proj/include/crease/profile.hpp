#pragma once

// Model and sampler settings read from a Config profile.

#include "crease/config.hpp"
#include "crease/ssgm.hpp"
#include "crease/verifier.hpp"

namespace crease {

inline constexpr int kTestFirstId = 100000;       // held-out population id range
inline constexpr int kSyntheticFirstId = 200000;  // subject-agnostic identities

/// Training population, or the disjoint held-out one when `test` is set.
inline CorpusManifest make_population(const Config& c, bool test) {
    const auto seed = static_cast<std::uint64_t>(c.integer("seed"));
    const int size = c.positive("corpus.image_size");
    if (test)
        return generate_corpus(c.positive("corpus.test_subjects"), c.positive("corpus.test_poses"), size,
                               derive_seed(seed, {0x7e57ULL}), kTestFirstId);
    return generate_corpus(c.positive("corpus.subjects"), c.positive("corpus.poses"), size, seed, 0);
}

inline DenoiserConfig denoiser_config(const Config& c, int image_size) {
    DenoiserConfig d;
    d.image_size = image_size;
    d.channels = 1;
    d.base_channels = c.positive("denoiser.base_channels");
    d.channel_multipliers = c.integers("denoiser.channel_multipliers");
    d.time_embed_dim = c.positive("denoiser.time_embed_dim");
    d.validate();
    return d;
}

inline VerifierConfig verifier_config(const Config& c, int image_size) {
    VerifierConfig v;
    v.image_size = image_size;
    v.embed_dim = c.positive("verifier.embed_dim");
    v.backbone_width = c.positive("verifier.width");
    v.adaface_m = c.real("verifier.adaface_m");
    v.adaface_h = c.real("verifier.adaface_h");
    v.adaface_s = c.real("verifier.adaface_s");
    v.focal_gamma = c.real("verifier.focal_gamma");
    v.epochs = c.positive("verifier.epochs");
    v.learning_rate = c.real("verifier.lr");
    v.batch_size = c.positive("verifier.batch_size");
    v.seed = derive_seed(static_cast<std::uint64_t>(c.integer("seed")), {0x7e41ULL});
    v.validate();
    return v;
}

inline SsgmSampleSpec sample_spec(const Config& c, std::uint64_t stream) {
    SsgmSampleSpec s;
    s.variations_per_pose = c.positive("ssgm.variations_per_pose");
    s.sample_steps = c.positive("bridge.sample_steps");
    s.variance_scale = c.real("bridge.variance_scale");
    s.sampler = parse_bridge_sampler(c.str("bridge.sampler"));
    s.flag_percentile = c.real("ssgm.flag_percentile");
    s.seed = derive_seed(static_cast<std::uint64_t>(c.integer("seed")), {stream});
    return s;
}

inline TrainConfig bridge_train_config(const Config& c) {
    return {c.positive("bridge.epochs"), c.real("bridge.lr"), c.positive("bridge.batch_size"),
            derive_seed(static_cast<std::uint64_t>(c.integer("seed")), {0xb41dULL}), c.real("bridge.ema_decay")};
}

inline TrainConfig ddpm_train_config(const Config& c) {
    return {c.positive("ddpm.epochs"), c.real("ddpm.lr"), c.positive("ddpm.batch_size"),
            derive_seed(static_cast<std::uint64_t>(c.integer("seed")), {0xdd93ULL}), c.real("ddpm.ema_decay")};
}

}  // namespace crease
