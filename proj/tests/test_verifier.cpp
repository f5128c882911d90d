#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numbers>

#include "crease/corpus.hpp"
#include "crease/verifier.hpp"

using namespace crease;

namespace {

VerifierConfig small_config(int epochs = 12) {
    VerifierConfig c;
    c.image_size = 16;
    c.embed_dim = 32;
    c.backbone_width = 8;
    c.epochs = epochs;
    c.batch_size = 16;
    c.seed = 3;
    return c;
}

LabeledSet labeled(const CorpusManifest& m) {
    LabeledSet s;
    for (const auto& e : m.entries) s.add(e.image, e.subject_id);
    return s;
}

// Closed-form adaptive-margin logit for the true class.
double oracle_true_logit(double cosine, double scaler, double m, double s) {
    constexpr double eps = 1e-3;
    const double theta = std::acos(cosine);
    const double theta_m = std::clamp(theta - m * scaler, eps, std::numbers::pi - eps);
    return s * (std::cos(theta_m) - (m * scaler + m));
}

const VerifierModel& trained_model() {
    static const VerifierModel m = train_verifier(labeled(generate_corpus(10, 4, 16, 31)), small_config());
    return m;
}

}  // namespace

TEST(Score, MetricProperties) {
    const Embedding a{{1.f, 0.f}}, b{{-1.f, 0.f}}, c{{0.f, 1.f}};
    EXPECT_EQ(score(a, a), 0.0);
    EXPECT_NEAR(score(a, b), 2.0, 1e-12);
    EXPECT_THROW(score(a, Embedding{{1.f}}), ValidationError);
    Rng rng(1);
    auto unit = [&] {
        Embedding e{std::vector<float>(16)};
        for (auto& v : e.values) v = static_cast<float>(rng.normal());
        const double n = e.norm();
        for (auto& v : e.values) v = static_cast<float>(v / n);
        return e;
    };
    for (int i = 0; i < 200; ++i) {
        const auto x = unit(), y = unit(), z = unit();
        EXPECT_NEAR(score(x, y), std::sqrt(std::max(0.0, 2.0 - 2.0 * cosine(x, y))), 1e-6);
        EXPECT_EQ(score(x, y), score(y, x));
        EXPECT_LE(score(x, z), score(x, y) + score(y, z) + 1e-12);
    }
    EXPECT_NEAR(score(a, c), std::sqrt(2.0), 1e-12);
}

TEST(AdaFace, ZeroMarginIsScaledCosine) {
    // two classes, 2-d: feature at 0 deg, centers at 53.13 and 36.87 deg
    const auto cos = torch::tensor({{0.6, 0.8}}, torch::kFloat64);
    const auto logits = adaface_logits(cos, torch::tensor({2.0}, torch::kFloat64), torch::tensor({0}, torch::kInt64),
                                       0.0, 0.33, 64.0);
    EXPECT_NEAR(logits[0][0].item<double>(), 64.0 * 0.6, 1e-9);
    EXPECT_NEAR(logits[0][1].item<double>(), 64.0 * 0.8, 1e-12);
}

TEST(AdaFace, MatchesClosedFormWithBatchStatistics) {
    const auto cos = torch::tensor({{0.7, 0.1}, {-0.2, 0.5}}, torch::kFloat64);
    const auto norms = torch::tensor({1.0, 3.0}, torch::kFloat64);
    const auto labels = torch::tensor({0, 1}, torch::kInt64);
    const double m = 0.4, h = 0.33, s = 64.0;
    const auto logits = adaface_logits(cos, norms, labels, m, h, s);
    // batch mean 2, unbiased std sqrt(2)
    const double z0 = std::clamp((1.0 - 2.0) / (std::sqrt(2.0) + 1e-3) * h, -1.0, 1.0);
    const double z1 = -z0;
    EXPECT_NEAR(logits[0][0].item<double>(), oracle_true_logit(0.7, z0, m, s), 1e-9);
    EXPECT_NEAR(logits[1][1].item<double>(), oracle_true_logit(0.5, z1, m, s), 1e-9);
    EXPECT_NEAR(logits[0][1].item<double>(), s * 0.1, 1e-12);
    EXPECT_NEAR(logits[1][0].item<double>(), s * -0.2, 1e-12);
}

TEST(AdaFace, SingleSampleBatchUsesNeutralScaler) {
    const auto logits = adaface_logits(torch::tensor({{0.5, 0.0}}, torch::kFloat64), torch::tensor({7.0}, torch::kFloat64),
                                       torch::tensor({0}, torch::kInt64), 0.4, 0.33, 64.0);
    EXPECT_NEAR(logits[0][0].item<double>(), oracle_true_logit(0.5, 0.0, 0.4, 64.0), 1e-9);
}

TEST(AdaFace, TrueLogitNeverIncreasesWithMargin) {
    Rng rng(5);
    for (int trial = 0; trial < 50; ++trial) {
        const auto cos = torch::rand({4, 3}, torch::kFloat64) * 2 - 1;
        const auto norms = torch::rand({4}, torch::kFloat64) * 5 + 0.1;
        const auto labels = torch::tensor({0, 1, 2, 0}, torch::kInt64);
        auto prev = adaface_logits(cos, norms, labels, 0.0, 0.33, 64.0).gather(1, labels.reshape({-1, 1}));
        for (double m = 0.05; m < 1.0; m += 0.05) {
            const auto cur = adaface_logits(cos, norms, labels, m, 0.33, 64.0).gather(1, labels.reshape({-1, 1}));
            EXPECT_TRUE((cur <= prev + 1e-9).all().item<bool>()) << "m=" << m;
            prev = cur;
        }
    }
}

TEST(FocalLoss, ReducesToCrossEntropyAndDownweightsEasy) {
    const auto logits = torch::tensor({{2.0, 0.5, -1.0}, {0.1, 0.2, 0.3}}, torch::kFloat64);
    const auto labels = torch::tensor({0, 2}, torch::kInt64);
    const double ce = torch::nn::functional::cross_entropy(logits, labels).item<double>();
    EXPECT_NEAR(focal_loss(logits, labels, 0.0).item<double>(), ce, 1e-12);
    // hand value for the first row with gamma 2
    const double p = std::exp(2.0) / (std::exp(2.0) + std::exp(0.5) + std::exp(-1.0));
    EXPECT_NEAR(focal_loss(logits.slice(0, 0, 1), labels.slice(0, 0, 1), 2.0).item<double>(),
                -std::pow(1 - p, 2) * std::log(p), 1e-12);
    EXPECT_LT(focal_loss(logits, labels, 2.0).item<double>(), ce);
}

TEST(Verifier, ConfigValidation) {
    auto c = small_config();
    c.adaface_m = 1.0;
    EXPECT_THROW(c.validate(), ValidationError);
    c = small_config();
    c.adaface_s = 1.0;
    EXPECT_THROW(c.validate(), ValidationError);
    c = small_config();
    c.focal_gamma = -1;
    EXPECT_THROW(c.validate(), ValidationError);
    c = small_config();
    c.image_size = 18;
    EXPECT_THROW(c.validate(), ValidationError);
}

TEST(Verifier, SingleClassRejected) {
    LabeledSet s;
    s.add(ImageTensor(16, 16), 4);
    s.add(ImageTensor(16, 16), 4);
    EXPECT_THROW(train_verifier(s, small_config(1)), ValidationError);
}

TEST(Verifier, EmbeddingsAreUnitNormDeterministicAndBatchInvariant) {
    const auto& m = trained_model();
    const auto corpus = generate_corpus(3, 3, 16, 77, 500);
    std::vector<ImageTensor> images;
    for (const auto& e : corpus.entries) images.push_back(e.image);
    const auto batch = embed(m, images);
    for (std::size_t i = 0; i < images.size(); ++i) {
        EXPECT_NEAR(batch[i].norm(), 1.0, 1e-5);
        const auto alone = embed(m, images[i]);
        for (std::size_t k = 0; k < alone.dim(); ++k) EXPECT_NEAR(alone.values[k], batch[i].values[k], 1e-5);
        EXPECT_EQ(embed(m, images[i]).values, alone.values);
    }
    EXPECT_THROW(embed(m, ImageTensor(8, 8)), ValidationError);
}

TEST(Verifier, LossFallsAndReplays) {
    const auto& m = trained_model();
    ASSERT_EQ(m.loss_history.size(), 12u);
    for (double v : m.loss_history) EXPECT_TRUE(std::isfinite(v));
    EXPECT_LT(m.loss_history.back(), m.loss_history.front());
    const auto again = train_verifier(labeled(generate_corpus(10, 4, 16, 31)), small_config());
    EXPECT_EQ(again.loss_history, m.loss_history);
}

TEST(Verifier, SeparatesHeldOutSubjects) {
    const auto& m = trained_model();
    const auto held = generate_corpus(8, 4, 16, 99, 1000);
    std::vector<ImageTensor> images;
    for (const auto& e : held.entries) images.push_back(e.image);
    const auto emb = embed(m, images);
    double intra = 0, inter = 0;
    int ni = 0, nx = 0;
    for (std::size_t i = 0; i < emb.size(); ++i)
        for (std::size_t j = i + 1; j < emb.size(); ++j) {
            const double c = cosine(emb[i], emb[j]);
            if (held.entries[i].subject_id == held.entries[j].subject_id) {
                intra += c;
                ++ni;
            } else {
                inter += c;
                ++nx;
            }
        }
    EXPECT_GT(intra / ni, inter / nx);
}

TEST(Verifier, CheckpointAndEmbeddingExportRoundTrip) {
    const auto& m = trained_model();
    const auto dir = std::filesystem::temp_directory_path() / "crease_test_verifier";
    std::filesystem::remove_all(dir);
    save_verifier(dir / "v.ck", m);
    const auto back = load_verifier(dir / "v.ck");
    EXPECT_EQ(back.class_ids, m.class_ids);
    EXPECT_EQ(back.loss_history, m.loss_history);
    EXPECT_TRUE(torch::equal(back.class_centers, m.class_centers));
    const auto corpus = generate_corpus(2, 2, 16, 5, 300);
    std::vector<ImageTensor> images;
    std::vector<EmbeddingRecord> ids;
    for (const auto& e : corpus.entries) {
        images.push_back(e.image);
        ids.push_back({e.subject_id, e.path});
    }
    const auto a = embed(m, images), b = embed(back, images);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].values, b[i].values);
    write_embeddings(dir / "emb.bin", ids, a);
    const auto [rids, remb] = read_embeddings(dir / "emb.bin");
    ASSERT_EQ(rids.size(), ids.size());
    EXPECT_EQ(rids[3].subject_id, ids[3].subject_id);
    EXPECT_EQ(rids[3].image, ids[3].image);
    EXPECT_EQ(remb[3].values, a[3].values);
    std::filesystem::remove_all(dir);
}
