#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <map>
#include <set>

#include "crease/augment.hpp"
#include "crease/corpus.hpp"
#include "crease/pairs.hpp"

using namespace crease;

namespace {

// Manifest with the given pose counts and no pixels; build_pairs only needs ids.
CorpusManifest id_only_manifest(const std::vector<int>& pose_counts) {
    CorpusManifest m;
    for (std::size_t s = 0; s < pose_counts.size(); ++s)
        for (int p = 0; p < pose_counts[s]; ++p) {
            CorpusEntry e;
            e.subject_id = static_cast<int>(s);
            e.pose_id = p;
            m.entries.push_back(e);
        }
    return m;
}

long long choose2(long long n) { return n * (n - 1) / 2; }

ImageTensor ramp(int h, int w) {
    ImageTensor img(h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) img.at(y, x) = -1.0 + 2.0 * (y * w + x) / (h * w - 1.0);
    return img;
}

}  // namespace

TEST(Corpus, CountsAndLayout) {
    const auto m = generate_corpus(3, 4, 16, 11);
    EXPECT_EQ(m.entries.size(), 12u);
    EXPECT_EQ(m.subject_ids(), (std::set<int>{0, 1, 2}));
    for (const auto& e : m.entries) {
        EXPECT_EQ(e.image.height(), 16);
        EXPECT_EQ(e.image.channels(), 1);
        EXPECT_EQ(e.path, std::to_string(e.subject_id) + "/" + std::to_string(e.pose_id) + ".png");
        for (double v : e.image.values()) {
            EXPECT_GE(v, -1.0);
            EXPECT_LE(v, 1.0);
        }
    }
}

TEST(Corpus, PaperScaleImageCount) {
    // only seeds and counts are checked here; rendering at 8 px keeps it quick
    const auto m = generate_corpus(247, 10, 8, 3);
    EXPECT_EQ(m.entries.size(), 2470u);
}

TEST(Corpus, SeedsFollowIdentityAndPose) {
    const auto m = generate_corpus(4, 3, 16, 5);
    std::map<int, std::set<std::uint64_t>> id_seeds, pose_seeds;
    std::set<std::uint64_t> all_ids;
    for (const auto& e : m.entries) {
        id_seeds[e.subject_id].insert(e.identity_seed);
        pose_seeds[e.subject_id].insert(e.pose_seed);
        all_ids.insert(e.identity_seed);
    }
    for (const auto& [sid, s] : id_seeds) EXPECT_EQ(s.size(), 1u) << sid;
    for (const auto& [sid, s] : pose_seeds) EXPECT_EQ(s.size(), 3u) << sid;
    EXPECT_EQ(all_ids.size(), 4u);

    const auto test_pop = generate_corpus(4, 3, 16, 5, 1000);
    for (const auto& e : test_pop.entries) EXPECT_FALSE(all_ids.contains(e.identity_seed));
}

TEST(Corpus, DeterministicReplay) {
    const auto a = generate_corpus(2, 2, 32, 77);
    const auto b = generate_corpus(2, 2, 32, 77);
    ASSERT_EQ(a.entries.size(), 4u);
    for (std::size_t i = 0; i < a.entries.size(); ++i) {
        EXPECT_EQ(a.entries[i].image, b.entries[i].image);
        EXPECT_EQ(a.entries[i].pose_seed, b.entries[i].pose_seed);
    }
    const auto c = generate_corpus(2, 2, 32, 78);
    EXPECT_NE(a.entries[0].image, c.entries[0].image);
}

TEST(Corpus, IntraSubjectCloserThanInterSubject) {
    const auto m = generate_corpus(10, 5, 32, 2024);
    double intra = 0.0, inter = 0.0;
    long n_intra = 0, n_inter = 0;
    for (std::size_t i = 0; i < m.entries.size(); ++i)
        for (std::size_t j = i + 1; j < m.entries.size(); ++j) {
            const double d = l2_distance(m.entries[i].image, m.entries[j].image);
            if (m.entries[i].subject_id == m.entries[j].subject_id) {
                intra += d;
                ++n_intra;
            } else {
                inter += d;
                ++n_inter;
            }
        }
    intra /= n_intra;
    inter /= n_inter;
    EXPECT_LT(intra, inter);
    RecordProperty("intra", std::to_string(intra));
    RecordProperty("inter", std::to_string(inter));
}

TEST(Corpus, RejectsDegenerateSizes) {
    EXPECT_THROW(generate_corpus(1, 4, 32, 0), ValidationError);
    EXPECT_THROW(generate_corpus(4, 1, 32, 0), ValidationError);
    EXPECT_THROW(generate_corpus(4, 4, 4, 0), ValidationError);
}

TEST(Corpus, SaveLoadRoundTrip) {
    const auto dir = std::filesystem::temp_directory_path() / "crease_corpus_rt";
    std::filesystem::remove_all(dir);
    const auto m = generate_corpus(2, 3, 16, 9);
    save_corpus(m, dir);
    const auto back = load_manifest(dir / "manifest.txt");
    ASSERT_EQ(back.entries.size(), m.entries.size());
    EXPECT_EQ(back.image_size, 16);
    EXPECT_EQ(back.generator, kCorpusGenerator);
    for (std::size_t i = 0; i < m.entries.size(); ++i) {
        EXPECT_EQ(back.entries[i].identity_seed, m.entries[i].identity_seed);
        EXPECT_EQ(back.entries[i].pose_seed, m.entries[i].pose_seed);
        EXPECT_EQ(back.entries[i].image, m.entries[i].image);  // rendered images are already 8-bit exact
    }
    std::filesystem::remove_all(dir);
}

TEST(Corpus, LoadRejectsBadHeader) {
    const auto file = std::filesystem::temp_directory_path() / "crease_bad_manifest.txt";
    {
        std::ofstream out(file);
        out << "subject pose path\n";
    }
    EXPECT_THROW(load_manifest(file), ValidationError);
    std::filesystem::remove(file);
}

// ---------------------------------------------------------------------------

TEST(Augment, FlipIsInvolution) {
    const auto img = ramp(7, 9);
    const AugSpec flip{FlipParams{}, 0};
    EXPECT_EQ(augment(augment(img, flip), flip), img);
    EXPECT_NE(augment(img, flip), img);
}

TEST(Augment, ZeroTranslationIsIdentity) {
    const auto img = ramp(8, 8);
    EXPECT_EQ(augment(img, AugSpec{TranslationParams{0.0, 0.0}, 1}), img);
    const auto shifted = augment(img, AugSpec{TranslationParams{0.1, 0.0}, 1});  // 1 px right at width 8
    EXPECT_EQ(shifted.at(3, 4), img.at(3, 3));
    EXPECT_EQ(shifted.at(3, 0), img.at(3, 0));  // edge padding
}

TEST(Augment, BrightnessScalesBeforeClamp) {
    // intensity (x + 1) / 2 is scaled, so black stays black
    const ImageTensor img(4, 4, 1, 0.5);
    const auto out = augment(img, AugSpec{BrightnessParams{1.2}, 0});
    for (double v : out.values()) EXPECT_NEAR(v, 0.8, 1e-15);
    EXPECT_EQ(augment(ImageTensor(2, 2, 1, -1.0), AugSpec{BrightnessParams{0.7}, 0})[0], -1.0);
    const ImageTensor bright(4, 4, 1, 0.9);
    EXPECT_GT(augment(bright, AugSpec{BrightnessParams{1.4}, 0})[0], 1.0);
    EXPECT_EQ(augment_clamped(bright, AugSpec{BrightnessParams{1.4}, 0})[0], 1.0);
}

TEST(Augment, BlurIsLowPass) {
    const ImageTensor flat(9, 9, 1, 0.3);
    EXPECT_LT(max_abs_diff(augment(flat, AugSpec{BlurParams{1.0}, 0}), flat), 1e-12);
    ImageTensor spike(9, 9, 1, 0.0);
    spike.at(4, 4) = 1.0;
    const auto b = augment(spike, AugSpec{BlurParams{1.0}, 0});
    EXPECT_LT(b.at(4, 4), 1.0);
    EXPECT_GT(b.at(4, 5), 0.0);
    double sum = 0.0;
    for (double v : b.values()) sum += v;
    EXPECT_NEAR(sum, 1.0, 1e-12);
}

TEST(Augment, OcclusionBarWithinThirtyPercentOfRows) {
    const ImageTensor img(32, 32, 1, 0.5);
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto out = augment(img, AugSpec{OcclusionParams{0.3, -0.9}, seed});
        int rows = 0;
        for (int y = 0; y < 32; ++y) {
            const bool covered = out.at(y, 0) == -0.9;
            for (int x = 0; x < 32; ++x) ASSERT_EQ(out.at(y, x) == -0.9, covered);
            rows += covered;
        }
        EXPECT_GT(rows, 0);
        EXPECT_LE(rows, static_cast<int>(0.3 * 32));
    }
}

TEST(Augment, DistortionDeterministicAndMild) {
    const auto img = ramp(16, 16);
    const AugSpec spec{DistortionParams{1.0, 4}, 42};
    EXPECT_EQ(augment(img, spec), augment(img, spec));
    EXPECT_NE(augment(img, spec), augment(img, AugSpec{DistortionParams{1.0, 4}, 43}));
    EXPECT_EQ(augment(img, AugSpec{DistortionParams{0.0, 4}, 42}), img);
}

TEST(Augment, ShapeAndRangePreservedAfterClamp) {
    Rng rng(3);
    const auto m = generate_corpus(2, 2, 32, 1);
    for (auto kind : kAllAugKinds)
        for (int i = 0; i < 10; ++i) {
            const auto spec = random_aug_spec(kind, rng);
            EXPECT_EQ(spec.kind(), kind);
            const auto out = augment_clamped(m.entries[0].image, spec);
            ASSERT_EQ(out.shape(), m.entries[0].image.shape());
            for (double v : out.values()) {
                ASSERT_GE(v, -1.0);
                ASSERT_LE(v, 1.0);
            }
        }
}

TEST(Augment, RejectsOutOfRangeParams) {
    const ImageTensor img(8, 8);
    EXPECT_THROW(augment(img, AugSpec{BrightnessParams{2.0}, 0}), ValidationError);
    EXPECT_THROW(augment(img, AugSpec{TranslationParams{0.5, 0.0}, 0}), ValidationError);
    EXPECT_THROW(augment(img, AugSpec{OcclusionParams{0.5, -0.9}, 0}), ValidationError);
    EXPECT_THROW(augment(img, AugSpec{BlurParams{3.0}, 0}), ValidationError);
    EXPECT_THROW(parse_aug_kind("sharpen"), ValidationError);
    EXPECT_EQ(parse_aug_kind("random_distortion"), AugKind::random_distortion);
}

// ---------------------------------------------------------------------------

TEST(Pairs, SingleSubjectFourPoses) {
    const auto m = id_only_manifest({4});
    EXPECT_EQ(build_pairs(m, PairStrategy::comb).size(), 6u);
    const auto perm = build_pairs(m, PairStrategy::permute);
    EXPECT_EQ(perm.size(), 12u);
    for (const auto& r : perm) {
        EXPECT_NE(r.source.pose_id, r.target.pose_id);
        EXPECT_EQ(r.kind, r.source.pose_id < r.target.pose_id ? PairKind::forward : PairKind::backward);
    }
    for (const auto& r : build_pairs(m, PairStrategy::comb)) EXPECT_EQ(r.kind, PairKind::forward);
}

TEST(Pairs, PermuteContainsBackwardOfEveryForward) {
    const auto m = id_only_manifest({3, 5, 2});
    const auto perm = build_pairs(m, PairStrategy::permute);
    std::set<std::tuple<int, int, int>> seen;
    for (const auto& r : perm) seen.insert({r.subject_id, r.source.pose_id, r.target.pose_id});
    for (const auto& [s, a, b] : seen) EXPECT_TRUE(seen.contains({s, b, a}));
}

TEST(Pairs, CountFormulasOnRandomPoseCounts) {
    Rng rng(99);
    for (int trial = 0; trial < 25; ++trial) {
        std::vector<int> counts(static_cast<std::size_t>(rng.uniform_int(1, 12)));
        for (auto& c : counts) c = rng.uniform_int(2, 9);
        const auto m = id_only_manifest(counts);
        long long c2 = 0;
        for (int c : counts) c2 += choose2(c);
        const int k = rng.uniform_int(0, 15);
        EXPECT_EQ(static_cast<long long>(build_pairs(m, PairStrategy::comb).size()), c2);
        EXPECT_EQ(static_cast<long long>(build_pairs(m, PairStrategy::permute).size()), 2 * c2);
        const auto aug = build_pairs(m, PairStrategy::permute_aug, k, 5);
        EXPECT_EQ(static_cast<long long>(aug.size()), 2 * c2 + static_cast<long long>(k) * static_cast<long long>(counts.size()));
        for (const auto& r : aug) {
            EXPECT_EQ(r.source.subject_id, r.subject_id);
            EXPECT_EQ(r.target.subject_id, r.subject_id);
            if (r.kind == PairKind::image_to_aug) {
                ASSERT_TRUE(r.target.aug.has_value());
                EXPECT_EQ(r.source.pose_id, r.target.pose_id);
                const auto kind = r.target.aug->kind();
                EXPECT_TRUE(std::find(kPairAugKinds.begin(), kPairAugKinds.end(), kind) != kPairAugKinds.end());
            }
        }
    }
}

TEST(Pairs, PaperPairTotals) {
    // 247 subjects, 2462 training images: 15 subjects with 9 poses, 225 with
    // 10 and 7 with 11 is the distribution matching both totals
    std::vector<int> counts;
    counts.insert(counts.end(), 15, 9);
    counts.insert(counts.end(), 225, 10);
    counts.insert(counts.end(), 7, 11);
    const auto m = id_only_manifest(counts);
    ASSERT_EQ(m.entries.size(), 2462u);
    EXPECT_EQ(build_pairs(m, PairStrategy::comb).size(), 11050u);
    EXPECT_EQ(build_pairs(m, PairStrategy::permute).size(), 22100u);
    EXPECT_EQ(build_pairs(m, PairStrategy::permute_aug, 100, 1).size(), 46800u);
}

TEST(Pairs, RejectsSinglePoseSubject) {
    EXPECT_THROW(build_pairs(id_only_manifest({3, 1}), PairStrategy::permute), ValidationError);
    EXPECT_THROW(parse_pair_strategy("shuffle"), ValidationError);
}

TEST(Pairs, AugPairsDeterministicUnderSeed) {
    const auto m = id_only_manifest({4, 4});
    const auto a = build_pairs(m, PairStrategy::permute_aug, 10, 7);
    const auto b = build_pairs(m, PairStrategy::permute_aug, 10, 7);
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_TRUE(a[i].target == b[i].target);
}

TEST(Pairs, MaterializeOrientsTargetAsX0) {
    const auto m = generate_corpus(2, 3, 16, 4);
    const auto recs = build_pairs(m, PairStrategy::permute_aug, 2, 1);
    const auto pairs = materialize_pairs(m, recs);
    ASSERT_EQ(pairs.size(), recs.size());
    EXPECT_EQ(pairs[0].xT, m.find(recs[0].subject_id, recs[0].source.pose_id).image);
    EXPECT_EQ(pairs[0].x0, m.find(recs[0].subject_id, recs[0].target.pose_id).image);
}

TEST(Pairs, PairFileRoundTrip) {
    const auto file = std::filesystem::temp_directory_path() / "crease_pairs_rt.txt";
    std::vector<PairFileRecord> recs{{3, "3/0.png", "3/1.png", PairKind::forward},
                                     {3, "3/1.png", "aug/3/1_blur_0.png", PairKind::image_to_aug}};
    write_pair_file(file, "permute_aug", recs);
    const auto back = read_pair_file(file);
    ASSERT_EQ(back.size(), 2u);
    EXPECT_EQ(back[1].target, "aug/3/1_blur_0.png");
    EXPECT_EQ(back[1].kind, PairKind::image_to_aug);
    std::filesystem::remove(file);
}
