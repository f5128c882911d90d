#pragma once

// Crease verifier: shallow residual backbone with position attention and
// efficient channel attention, unit-norm embedding head, adaptive-margin
// cosine logits with focal reweighting.

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <string>
#include <vector>

#include "crease/checkpoint.hpp"
#include "crease/denoiser.hpp"
#include "crease/embedding.hpp"
#include "crease/unet.hpp"

namespace crease {

struct VerifierConfig {
    int image_size = 32;
    int channels = 1;
    int embed_dim = 512;
    int backbone_width = 32;
    double adaface_m = 0.4;
    double adaface_h = 0.33;
    double adaface_s = 64.0;
    double focal_gamma = 2.0;
    int epochs = 40;
    double learning_rate = 1e-3;
    int batch_size = 64;
    std::uint64_t seed = 0;

    void validate() const {
        if (image_size <= 0 || channels <= 0 || embed_dim <= 0 || backbone_width <= 0 || epochs <= 0 ||
            batch_size <= 0 || !(learning_rate > 0.0))
            throw ValidationError("VerifierConfig: sizes, epochs and learning rate must be positive");
        if (image_size % 4 != 0) throw ValidationError("VerifierConfig: image_size must be divisible by 4");
        if (!(adaface_m >= 0.0 && adaface_m < 1.0)) throw ValidationError("VerifierConfig: adaface_m must be in [0, 1)");
        if (!(adaface_h >= 0.0)) throw ValidationError("VerifierConfig: adaface_h must be >= 0");
        if (!(adaface_s > 1.0)) throw ValidationError("VerifierConfig: adaface_s must exceed 1");
        if (!(focal_gamma >= 0.0)) throw ValidationError("VerifierConfig: focal_gamma must be >= 0");
    }
};

// ---------------------------------------------------------------------------
// network

struct BasicBlockImpl : torch::nn::Module {
    torch::nn::Conv2d conv1{nullptr}, conv2{nullptr}, down{nullptr};
    torch::nn::BatchNorm2d bn1{nullptr}, bn2{nullptr}, down_bn{nullptr};

    BasicBlockImpl(int in, int out, int stride) {
        conv1 = register_module("conv1", torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 3).stride(stride).padding(1).bias(false)));
        bn1 = register_module("bn1", torch::nn::BatchNorm2d(out));
        conv2 = register_module("conv2", torch::nn::Conv2d(torch::nn::Conv2dOptions(out, out, 3).padding(1).bias(false)));
        bn2 = register_module("bn2", torch::nn::BatchNorm2d(out));
        if (stride != 1 || in != out) {
            down = register_module("down", torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 1).stride(stride).bias(false)));
            down_bn = register_module("down_bn", torch::nn::BatchNorm2d(out));
        }
    }

    torch::Tensor forward(const torch::Tensor& x) {
        auto h = torch::relu(bn1(conv1(x)));
        h = bn2(conv2(h));
        return torch::relu(h + (down ? down_bn(down(x)) : x));
    }
};
TORCH_MODULE(BasicBlock);

/// Position attention: every location attends over all locations; the
/// residual gate starts at zero.
struct PositionAttentionImpl : torch::nn::Module {
    torch::nn::Conv2d query{nullptr}, key{nullptr}, value{nullptr};
    torch::Tensor gamma;

    explicit PositionAttentionImpl(int c) {
        const int r = std::max(1, c / 8);
        query = register_module("query", torch::nn::Conv2d(torch::nn::Conv2dOptions(c, r, 1)));
        key = register_module("key", torch::nn::Conv2d(torch::nn::Conv2dOptions(c, r, 1)));
        value = register_module("value", torch::nn::Conv2d(torch::nn::Conv2dOptions(c, c, 1)));
        gamma = register_parameter("gamma", torch::zeros({1}));
    }

    torch::Tensor forward(const torch::Tensor& x) {
        const auto b = x.size(0), c = x.size(1), n = x.size(2) * x.size(3);
        const auto q = query(x).reshape({b, -1, n}).permute({0, 2, 1});  // (B, N, r)
        const auto k = key(x).reshape({b, -1, n});                        // (B, r, N)
        const auto attn = torch::softmax(torch::bmm(q, k), -1);           // (B, N, N)
        const auto v = value(x).reshape({b, c, n});
        const auto out = torch::bmm(v, attn.permute({0, 2, 1})).reshape(x.sizes());
        return gamma * out + x;
    }
};
TORCH_MODULE(PositionAttention);

/// Efficient channel attention: 1-D convolution across pooled channel descriptors.
struct ChannelAttentionImpl : torch::nn::Module {
    torch::nn::Conv1d conv{nullptr};

    explicit ChannelAttentionImpl(int c) {
        int k = static_cast<int>(std::abs((std::log2(c) + 1) / 2));
        if (k % 2 == 0) ++k;
        conv = register_module("conv", torch::nn::Conv1d(torch::nn::Conv1dOptions(1, 1, k).padding(k / 2).bias(false)));
    }

    torch::Tensor forward(const torch::Tensor& x) {
        auto y = x.mean({2, 3}).unsqueeze(1);  // (B, 1, C)
        y = torch::sigmoid(conv(y)).squeeze(1).unsqueeze(-1).unsqueeze(-1);
        return x * y;
    }
};
TORCH_MODULE(ChannelAttention);

struct VerifierOutput {
    torch::Tensor pooled;    // penultimate features (B, 4w)
    torch::Tensor feature;   // unnormalized embedding (B, D)
    torch::Tensor embedding; // unit-norm embedding (B, D)
};

struct VerifierNetImpl : torch::nn::Module {
    torch::nn::Conv2d stem{nullptr};
    torch::nn::BatchNorm2d stem_bn{nullptr};
    BasicBlock block1{nullptr}, block2{nullptr}, block3{nullptr};
    PositionAttention pam{nullptr};
    ChannelAttention eca{nullptr};
    torch::nn::Linear fc{nullptr};
    torch::nn::BatchNorm1d fc_bn{nullptr};

    explicit VerifierNetImpl(const VerifierConfig& cfg) {
        const int w = cfg.backbone_width;
        stem = register_module("stem", torch::nn::Conv2d(torch::nn::Conv2dOptions(cfg.channels, w, 3).padding(1).bias(false)));
        stem_bn = register_module("stem_bn", torch::nn::BatchNorm2d(w));
        block1 = register_module("block1", BasicBlock(w, w, 1));
        block2 = register_module("block2", BasicBlock(w, 2 * w, 2));
        block3 = register_module("block3", BasicBlock(2 * w, 4 * w, 2));
        pam = register_module("pam", PositionAttention(4 * w));
        eca = register_module("eca", ChannelAttention(4 * w));
        fc = register_module("fc", torch::nn::Linear(4 * w, cfg.embed_dim));
        fc_bn = register_module("fc_bn", torch::nn::BatchNorm1d(cfg.embed_dim));
    }

    VerifierOutput forward(const torch::Tensor& x) {
        auto h = torch::relu(stem_bn(stem(x)));
        h = block3(block2(block1(h)));
        h = eca(pam(h));
        const auto pooled = h.mean({2, 3});
        const auto feature = fc_bn(fc(pooled));
        return {pooled, feature, torch::nn::functional::normalize(feature, torch::nn::functional::NormalizeFuncOptions().dim(1))};
    }
};
TORCH_MODULE(VerifierNet);

// ---------------------------------------------------------------------------
// loss

/// Adaptive-margin cosine logits. cosine: (B, K) cosines to class centers;
/// norms: (B) feature norms (treated as constants); labels: (B) int64.
/// The margin scaler is the batch-standardized norm times h, clipped to
/// [-1, 1]; it is 0 for batches of fewer than two samples.
inline torch::Tensor adaface_logits(const torch::Tensor& cosine, const torch::Tensor& norms, const torch::Tensor& labels,
                                    double m, double h, double s) {
    constexpr double eps = 1e-3;
    const auto n = norms.detach().clamp(1e-3, 100.0);
    torch::Tensor scaler;
    if (n.size(0) < 2) {
        scaler = torch::zeros_like(n);
    } else {
        const auto mean = n.mean(), std = n.std();
        scaler = ((n - mean) / (std + eps) * h).clamp(-1.0, 1.0);
    }
    const auto g_ang = -m * scaler;
    const auto g_add = m * scaler + m;
    const auto c = cosine.clamp(-1.0 + 1e-7, 1.0 - 1e-7);
    const auto one_hot = torch::zeros_like(c).scatter_(1, labels.reshape({-1, 1}), 1.0);
    const auto theta = torch::acos(c);
    const auto theta_m = (theta + g_ang.reshape({-1, 1})).clamp(eps, std::numbers::pi - eps);
    const auto target = torch::cos(theta_m) - g_add.reshape({-1, 1});
    return s * torch::where(one_hot > 0, target, c);
}

/// Mean of -(1 - p_t)^gamma log p_t over the batch.
inline torch::Tensor focal_loss(const torch::Tensor& logits, const torch::Tensor& labels, double gamma) {
    const auto logp = torch::log_softmax(logits, 1).gather(1, labels.reshape({-1, 1})).squeeze(1);
    const auto pt = logp.exp();
    return (-(torch::pow(1.0 - pt, gamma)) * logp).mean();
}

// ---------------------------------------------------------------------------
// model state

struct VerifierModel {
    VerifierConfig cfg;
    mutable VerifierNet net{nullptr};  // forward() is logically const
    torch::Tensor class_centers;        // (K, D)
    std::vector<int> class_ids;         // dataset label for each row of class_centers
    std::vector<double> loss_history;

    [[nodiscard]] bool trained() const { return net && !loss_history.empty(); }

    void require_image(const ImageTensor& x) const {
        if (!(x.shape() == Shape{cfg.image_size, cfg.image_size, cfg.channels}))
            throw ValidationError("verifier: image is " + std::to_string(x.height()) + "x" + std::to_string(x.width()) +
                                  "x" + std::to_string(x.channels()) + ", model expects " +
                                  std::to_string(cfg.image_size) + "x" + std::to_string(cfg.image_size) + "x" +
                                  std::to_string(cfg.channels));
    }

    [[nodiscard]] VerifierOutput forward(const std::vector<ImageTensor>& images, std::size_t first, std::size_t count) const {
        std::vector<const ImageTensor*> ptrs;
        for (std::size_t i = first; i < first + count; ++i) {
            require_image(images[i]);
            ptrs.push_back(&images[i]);
        }
        torch::NoGradGuard guard;
        net->eval();
        return net->forward(to_torch(ptrs));
    }
};

inline std::vector<Embedding> embed(const VerifierModel& m, const std::vector<ImageTensor>& images, int batch_size = 128) {
    std::vector<Embedding> out;
    out.reserve(images.size());
    for (std::size_t first = 0; first < images.size(); first += static_cast<std::size_t>(batch_size)) {
        const auto count = std::min(images.size() - first, static_cast<std::size_t>(batch_size));
        const auto e = m.forward(images, first, count).embedding.contiguous();
        for (int64_t i = 0; i < e.size(0); ++i) {
            const auto* row = e[i].data_ptr<float>();
            out.push_back({std::vector<float>(row, row + e.size(1))});
        }
    }
    return out;
}

inline Embedding embed(const VerifierModel& m, const ImageTensor& image) { return embed(m, std::vector<ImageTensor>{image}).front(); }

/// Penultimate (pooled backbone) features, used for set-level image quality.
inline std::vector<std::vector<double>> penultimate_features(const VerifierModel& m, const std::vector<ImageTensor>& images,
                                                             int batch_size = 128) {
    std::vector<std::vector<double>> out;
    for (std::size_t first = 0; first < images.size(); first += static_cast<std::size_t>(batch_size)) {
        const auto count = std::min(images.size() - first, static_cast<std::size_t>(batch_size));
        const auto p = m.forward(images, first, count).pooled.to(torch::kFloat64).contiguous();
        for (int64_t i = 0; i < p.size(0); ++i) {
            const auto* row = p[i].data_ptr<double>();
            out.emplace_back(row, row + p.size(1));
        }
    }
    return out;
}

/// Extractor adaptor for fid() / intra_subject_diversity().
inline auto feature_extractor(const VerifierModel& m) {
    return [&m](const ImageTensor& im) { return penultimate_features(m, {im}).front(); };
}

struct LabeledSet {
    std::vector<ImageTensor> images;
    std::vector<int> labels;

    void add(ImageTensor im, int label) {
        images.push_back(std::move(im));
        labels.push_back(label);
    }
};

inline VerifierModel train_verifier(const LabeledSet& data, const VerifierConfig& cfg, const EpochCallback& on_epoch = {}) {
    cfg.validate();
    if (data.images.size() != data.labels.size()) throw ValidationError("train_verifier: images and labels differ in count");
    std::map<int, int64_t> index;
    for (int l : data.labels) index.emplace(l, 0);
    if (index.size() < 2) throw ValidationError("train_verifier: need at least 2 classes");
    VerifierModel model;
    model.cfg = cfg;
    for (auto& [label, row] : index) {
        row = static_cast<int64_t>(model.class_ids.size());
        model.class_ids.push_back(label);
    }
    for (const auto& im : data.images) model.require_image(im);

    torch::manual_seed(cfg.seed);
    model.net = VerifierNet(cfg);
    model.class_centers = torch::randn({static_cast<int64_t>(index.size()), cfg.embed_dim}) * 0.01;
    model.class_centers.set_requires_grad(true);

    const auto X = to_torch(data.images);
    std::vector<int64_t> y;
    for (int l : data.labels) y.push_back(index.at(l));
    const auto Y = torch::tensor(y, torch::kInt64);
    const auto n = X.size(0);

    auto params = model.net->parameters();
    params.push_back(model.class_centers);
    torch::optim::Adam opt(params, torch::optim::AdamOptions(cfg.learning_rate).weight_decay(5e-4));
    auto gen = torch_generator(derive_seed(cfg.seed, {0x5e71ULL}));
    model.net->train();
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto perm = torch::randperm(n, gen, torch::kInt64);
        double sum = 0.0;
        int64_t seen = 0;
        int batch = 0;
        for (int64_t start = 0; start < n; start += cfg.batch_size, ++batch) {
            const auto end = std::min<int64_t>(n, start + cfg.batch_size);
            if (end - start < 2) break;  // batch norm needs two samples
            const auto idx = perm.slice(0, start, end);
            opt.zero_grad();
            const auto out = model.net->forward(X.index_select(0, idx));
            const auto labels = Y.index_select(0, idx);
            const auto centers = torch::nn::functional::normalize(
                model.class_centers, torch::nn::functional::NormalizeFuncOptions().dim(1));
            const auto cosine = torch::mm(out.embedding, centers.t());
            const auto logits = adaface_logits(cosine, out.feature.norm(2, 1), labels, cfg.adaface_m, cfg.adaface_h,
                                               cfg.adaface_s);
            auto loss = focal_loss(logits, labels, cfg.focal_gamma);
            const double v = loss.item<double>();
            detail::check_finite_loss(v, epoch, batch, cfg.learning_rate);
            loss.backward();
            opt.step();
            sum += v * static_cast<double>(end - start);
            seen += end - start;
        }
        model.loss_history.push_back(seen ? sum / static_cast<double>(seen) : 0.0);
        if (on_epoch) on_epoch(epoch, model.loss_history.back());
    }
    model.net->eval();
    model.class_centers = model.class_centers.detach();
    return model;
}

// ---------------------------------------------------------------------------
// checkpoint and embedding export

namespace detail {

struct VerifierBundleImpl : torch::nn::Module {
    VerifierBundleImpl(VerifierNet net, torch::Tensor centers) {
        register_module("net", std::move(net));
        register_parameter("class_centers", std::move(centers), false);
    }
};

}  // namespace detail

inline void save_verifier(const std::filesystem::path& file, const VerifierModel& m) {
    const auto& c = m.cfg;
    nlohmann::json meta = {{"kind", "verifier"},
                           {"config",
                            {{"image_size", c.image_size},
                             {"channels", c.channels},
                             {"embed_dim", c.embed_dim},
                             {"backbone_width", c.backbone_width},
                             {"adaface_m", c.adaface_m},
                             {"adaface_h", c.adaface_h},
                             {"adaface_s", c.adaface_s},
                             {"focal_gamma", c.focal_gamma},
                             {"epochs", c.epochs},
                             {"learning_rate", c.learning_rate},
                             {"batch_size", c.batch_size},
                             {"seed", c.seed}}},
                           {"seed", c.seed},
                           {"class_ids", m.class_ids},
                           {"loss_history", m.loss_history}};
    detail::VerifierBundleImpl bundle(m.net, m.class_centers);
    save_checkpoint(file, meta, bundle);
}

inline VerifierModel load_verifier(const std::filesystem::path& file) {
    const auto ck = read_checkpoint(file);
    if (ck.meta.at("kind") != "verifier")
        throw ValidationError(file.string() + ": expected a verifier checkpoint, found '" +
                              ck.meta.at("kind").get<std::string>() + "'");
    VerifierModel m;
    const auto& j = ck.meta.at("config");
    m.cfg.image_size = j.at("image_size");
    m.cfg.channels = j.at("channels");
    m.cfg.embed_dim = j.at("embed_dim");
    m.cfg.backbone_width = j.at("backbone_width");
    m.cfg.adaface_m = j.at("adaface_m");
    m.cfg.adaface_h = j.at("adaface_h");
    m.cfg.adaface_s = j.at("adaface_s");
    m.cfg.focal_gamma = j.at("focal_gamma");
    m.cfg.epochs = j.at("epochs");
    m.cfg.learning_rate = j.at("learning_rate");
    m.cfg.batch_size = j.at("batch_size");
    m.cfg.seed = j.at("seed");
    m.class_ids = ck.meta.at("class_ids").get<std::vector<int>>();
    m.loss_history = ck.meta.at("loss_history").get<std::vector<double>>();
    m.net = VerifierNet(m.cfg);
    m.class_centers = torch::zeros({static_cast<int64_t>(m.class_ids.size()), m.cfg.embed_dim});
    detail::VerifierBundleImpl bundle(m.net, m.class_centers);
    load_state_into(ck, bundle, file.string());
    m.net->eval();
    return m;
}

struct EmbeddingRecord {
    int subject_id = 0;
    std::string image;  // image path or pose key
};

// binary matrix: "CREASEEM" | u64 rows | u64 dim | float32 row-major; ids in <file>.ids
inline void write_embeddings(const std::filesystem::path& file, const std::vector<EmbeddingRecord>& ids,
                             const std::vector<Embedding>& embeddings) {
    if (ids.size() != embeddings.size()) throw ValidationError("write_embeddings: ids and embeddings differ in count");
    const std::uint64_t rows = embeddings.size(), dim = rows ? embeddings.front().dim() : 0;
    if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
    std::ofstream out(file, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + file.string());
    out.write("CREASEEM", 8);
    out.write(reinterpret_cast<const char*>(&rows), sizeof rows);
    out.write(reinterpret_cast<const char*>(&dim), sizeof dim);
    for (const auto& e : embeddings) {
        if (e.dim() != dim) throw ValidationError("write_embeddings: ragged embeddings");
        out.write(reinterpret_cast<const char*>(e.values.data()), static_cast<std::streamsize>(dim * sizeof(float)));
    }
    std::ofstream idf(file.string() + ".ids");
    for (const auto& r : ids) idf << r.subject_id << '\t' << r.image << '\n';
}

inline std::pair<std::vector<EmbeddingRecord>, std::vector<Embedding>> read_embeddings(const std::filesystem::path& file) {
    std::ifstream in(file, std::ios::binary);
    char magic[8];
    std::uint64_t rows = 0, dim = 0;
    in.read(magic, 8);
    if (!in || std::string(magic, 8) != "CREASEEM") throw ValidationError(file.string() + ": not an embedding matrix");
    in.read(reinterpret_cast<char*>(&rows), sizeof rows);
    in.read(reinterpret_cast<char*>(&dim), sizeof dim);
    std::vector<Embedding> es(rows, Embedding{std::vector<float>(dim)});
    for (auto& e : es) in.read(reinterpret_cast<char*>(e.values.data()), static_cast<std::streamsize>(dim * sizeof(float)));
    if (!in) throw ValidationError(file.string() + ": truncated embedding matrix");
    std::ifstream idf(file.string() + ".ids");
    std::vector<EmbeddingRecord> ids;
    EmbeddingRecord r;
    while (idf >> r.subject_id >> r.image) ids.push_back(r);
    if (ids.size() != rows) throw ValidationError(file.string() + ".ids: expected " + std::to_string(rows) + " ids");
    return {ids, es};
}

}  // namespace crease
