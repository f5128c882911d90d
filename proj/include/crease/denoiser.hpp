#pragma once

// Noise-prediction models for the Brownian bridge and the unconditional DDPM:
// losses, training loops, batched reverse chains, checkpoints.

#include <ATen/CPUGeneratorImpl.h>
#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "crease/checkpoint.hpp"
#include "crease/pairs.hpp"
#include "crease/random.hpp"
#include "crease/schedule.hpp"
#include "crease/unet.hpp"

namespace crease {

struct TrainConfig {
    int epochs = 200;
    double learning_rate = 1e-4;
    int batch_size = 16;
    std::uint64_t seed = 0;
    // weights kept as an exponential moving average; 0 keeps the last step
    double ema_decay = 0.995;

    void validate() const {
        if (epochs <= 0 || batch_size <= 0 || !(learning_rate > 0.0))
            throw ValidationError("TrainConfig: epochs, batch_size and learning_rate must be positive");
        if (!(ema_decay >= 0.0 && ema_decay < 1.0)) throw ValidationError("TrainConfig: ema_decay must be in [0, 1)");
    }
};

/// Raised when a loss turns non-finite; carries where it happened.
class TrainingDiverged : public std::runtime_error {
public:
    TrainingDiverged(int epoch, int batch, double lr)
        : std::runtime_error("training diverged: non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                             std::to_string(batch) + " (lr " + to_str(lr) + ")"),
          epoch(epoch),
          learning_rate(lr) {}
    int epoch;
    double learning_rate;

private:
    static std::string to_str(double v) {
        std::ostringstream s;
        s << v;
        return s.str();
    }
};

using EpochCallback = std::function<void(int epoch, double mean_loss)>;

inline UNet make_unet(const DenoiserConfig& cfg, std::uint64_t seed) {
    torch::manual_seed(seed);
    return UNet(cfg);
}

inline at::Generator torch_generator(std::uint64_t seed) { return at::make_generator<at::CPUGeneratorImpl>(seed); }

namespace detail {

inline torch::Tensor table(const std::vector<double>& v) {
    return torch::from_blob(const_cast<double*>(v.data()), {static_cast<int64_t>(v.size())}, torch::kFloat64).clone();
}

// per-sample coefficient, broadcastable against (B, C, H, W)
inline torch::Tensor gather(const torch::Tensor& tab, const torch::Tensor& t, torch::Dtype dtype) {
    return tab.index_select(0, t).to(dtype).reshape({-1, 1, 1, 1});
}

inline torch::Tensor sqrt_table(std::vector<double> v) {
    for (auto& x : v) x = std::sqrt(x);
    return table(v);
}

inline void check_finite_loss(double loss, int epoch, int batch, double lr) {
    if (!std::isfinite(loss)) throw TrainingDiverged(epoch, batch, lr);
}

}  // namespace detail

/// Bridge regression loss for a batch: t (int64) in [1, T], noise ~ N(0, I).
inline torch::Tensor bridge_loss(UNet& net, const BridgeSchedule& sch, const torch::Tensor& x0, const torch::Tensor& xT,
                                 const torch::Tensor& t, const torch::Tensor& noise) {
    const auto dtype = x0.scalar_type();
    const auto m = detail::gather(detail::table(sch.m), t, dtype);
    const auto sd = detail::gather(detail::sqrt_table(sch.delta), t, dtype);
    const auto x_t = bridge_mix(m, sd, x0, xT, noise);
    const auto target = bridge_target(m, sd, x0, xT, noise);
    return torch::mse_loss(net->forward(x_t, t.to(dtype)), target);
}

/// Epsilon-prediction loss: t (int64) in [0, T-1].
inline torch::Tensor ddpm_loss(UNet& net, const DdpmSchedule& sch, const torch::Tensor& x0, const torch::Tensor& t,
                               const torch::Tensor& noise) {
    const auto dtype = x0.scalar_type();
    std::vector<double> one_minus(sch.alpha_bar.size());
    for (std::size_t i = 0; i < one_minus.size(); ++i) one_minus[i] = 1.0 - sch.alpha_bar[i];
    const auto a = detail::gather(detail::sqrt_table(sch.alpha_bar), t, dtype);
    const auto b = detail::gather(detail::sqrt_table(one_minus), t, dtype);
    return torch::mse_loss(net->forward(ddpm_mix(a, b, x0, noise), t.to(dtype)), noise);
}

struct DenoiserState {
    DenoiserConfig cfg;
    TrainConfig train;
    mutable UNet net{nullptr};  // forward() is logically const
    std::vector<double> loss_history;
    nlohmann::json info = nlohmann::json::object();  // free-form provenance (pair strategy, data hash, ...)

    [[nodiscard]] bool trained() const { return net && !loss_history.empty(); }

    /// Batched prediction in evaluation mode, x: (B, C, H, W), t: (B).
    [[nodiscard]] torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& t) const {
        torch::NoGradGuard guard;
        net->eval();
        return net->forward(x, t);
    }

    void require_image(const ImageTensor& x, const char* what) const {
        const Shape want{cfg.image_size, cfg.image_size, cfg.channels};
        if (!(x.shape() == want))
            throw ValidationError(std::string(what) + ": image is " + std::to_string(x.height()) + "x" +
                                  std::to_string(x.width()) + "x" + std::to_string(x.channels()) + ", model expects " +
                                  std::to_string(cfg.image_size) + "x" + std::to_string(cfg.image_size) + "x" +
                                  std::to_string(cfg.channels));
    }
};

struct BridgeModel : DenoiserState {
    BridgeSchedule schedule;

    [[nodiscard]] ImageTensor predict(const ImageTensor& x_t, int t) const {
        require_image(x_t, "predict");
        if (t < 0 || t > schedule.T) throw ValidationError("predict: timestep outside [0, T]");
        return from_torch(forward(to_torch(x_t), torch::full({1}, static_cast<float>(t)))).front();
    }
};

struct DdpmModel : DenoiserState {
    DdpmSchedule schedule;

    [[nodiscard]] ImageTensor predict(const ImageTensor& x_t, int t) const {
        require_image(x_t, "predict");
        if (t < 0 || t >= schedule.T) throw ValidationError("predict: timestep outside [0, T)");
        return from_torch(forward(to_torch(x_t), torch::full({1}, static_cast<float>(t)))).front();
    }
};

namespace detail {

// Shared minibatch loop; `batch_loss(indices, gen)` returns the batch loss.
template <class BatchLoss>
std::vector<double> run_training(UNet& net, int64_t n, const TrainConfig& tc, BatchLoss&& batch_loss,
                                 const EpochCallback& on_epoch) {
    auto gen = torch_generator(derive_seed(tc.seed, {0x7a1bULL}));
    torch::optim::Adam opt(net->parameters(), torch::optim::AdamOptions(tc.learning_rate));
    auto params = net->parameters();
    std::vector<torch::Tensor> ema;
    if (tc.ema_decay > 0.0)
        for (const auto& p : params) ema.push_back(p.detach().clone());
    long updates = 0;
    net->train();
    std::vector<double> history;
    for (int epoch = 0; epoch < tc.epochs; ++epoch) {
        const auto perm = torch::randperm(n, gen, torch::kInt64);
        double sum = 0.0;
        int batch = 0;
        for (int64_t start = 0; start < n; start += tc.batch_size, ++batch) {
            const auto idx = perm.slice(0, start, std::min<int64_t>(n, start + tc.batch_size));
            opt.zero_grad();
            auto loss = batch_loss(idx, gen);
            const double v = loss.template item<double>();
            check_finite_loss(v, epoch, batch, tc.learning_rate);
            loss.backward();
            opt.step();
            if (!ema.empty()) {
                torch::NoGradGuard ng;
                // short warm-up so early weights do not dominate short runs
                const double d = std::min(tc.ema_decay, (1.0 + updates) / (10.0 + updates));
                ++updates;
                for (std::size_t i = 0; i < params.size(); ++i) ema[i].mul_(d).add_(params[i].detach(), 1.0 - d);
            }
            sum += v * static_cast<double>(idx.size(0));
        }
        history.push_back(sum / static_cast<double>(n));
        if (on_epoch) on_epoch(epoch, history.back());
    }
    if (!ema.empty()) {
        torch::NoGradGuard ng;
        for (std::size_t i = 0; i < params.size(); ++i) params[i].copy_(ema[i]);
    }
    net->eval();
    return history;
}

}  // namespace detail

inline BridgeModel train_bridge(const std::vector<ImagePair>& pairs, const BridgeSchedule& schedule,
                                const DenoiserConfig& cfg, const TrainConfig& tc, const EpochCallback& on_epoch = {}) {
    if (pairs.empty()) throw ValidationError("train_bridge: empty pair set");
    cfg.validate();
    tc.validate();
    BridgeModel model;
    model.cfg = cfg;
    model.train = tc;
    model.schedule = with_variance_scale(schedule, 1.0);
    model.net = make_unet(cfg, tc.seed);
    std::vector<const ImageTensor*> x0s, xTs;
    for (const auto& p : pairs) {
        model.require_image(p.x0, "train_bridge");
        model.require_image(p.xT, "train_bridge");
        x0s.push_back(&p.x0);
        xTs.push_back(&p.xT);
    }
    const auto X0 = to_torch(x0s), XT = to_torch(xTs);
    const auto T = schedule.T;
    model.loss_history = detail::run_training(
        model.net, X0.size(0), tc,
        [&](const torch::Tensor& idx, at::Generator& gen) {
            const auto x0 = X0.index_select(0, idx), xT = XT.index_select(0, idx);
            const auto t = torch::randint(1, T + 1, {idx.size(0)}, gen, torch::kInt64);
            const auto noise = torch::randn(x0.sizes(), gen, torch::kFloat32);
            return bridge_loss(model.net, model.schedule, x0, xT, t, noise);
        },
        on_epoch);
    return model;
}

inline DdpmModel train_ddpm(const std::vector<ImageTensor>& images, const DdpmSchedule& schedule,
                            const DenoiserConfig& cfg, const TrainConfig& tc, const EpochCallback& on_epoch = {}) {
    if (images.empty()) throw ValidationError("train_ddpm: empty image set");
    cfg.validate();
    tc.validate();
    DdpmModel model;
    model.cfg = cfg;
    model.train = tc;
    model.schedule = schedule;
    model.net = make_unet(cfg, tc.seed);
    for (const auto& im : images) model.require_image(im, "train_ddpm");
    const auto X = to_torch(images);
    const auto T = schedule.T;
    model.loss_history = detail::run_training(
        model.net, X.size(0), tc,
        [&](const torch::Tensor& idx, at::Generator& gen) {
            const auto x0 = X.index_select(0, idx);
            const auto t = torch::randint(0, T, {idx.size(0)}, gen, torch::kInt64);
            const auto noise = torch::randn(x0.sizes(), gen, torch::kFloat32);
            return ddpm_loss(model.net, model.schedule, x0, t, noise);
        },
        on_epoch);
    return model;
}

// ---------------------------------------------------------------------------
// Reverse chains. Each chain owns an Rng so results do not depend on batching.
// Predict: (x_t (B,C,H,W) float, t (B) float) -> predicted target, same shape.

using BatchPredictor = std::function<torch::Tensor(const torch::Tensor&, const torch::Tensor&)>;

namespace detail {

inline torch::Tensor chain_noise(std::vector<Rng>& rngs, std::size_t first, std::size_t count, const Shape& shape) {
    std::vector<ImageTensor> noise;
    noise.reserve(count);
    for (std::size_t i = 0; i < count; ++i) noise.push_back(rngs[first + i].normal_image(shape));
    return to_torch(noise);
}

}  // namespace detail

/// marginal: redraw from the bridge marginal at each lower timestep.
/// posterior: carry the chain's own noise down (bridge posterior).
enum class BridgeSampler { marginal, posterior };

inline std::string_view to_string(BridgeSampler s) { return s == BridgeSampler::marginal ? "marginal" : "posterior"; }

inline BridgeSampler parse_bridge_sampler(std::string_view s) {
    if (s == "marginal") return BridgeSampler::marginal;
    if (s == "posterior") return BridgeSampler::posterior;
    throw ValidationError("unknown bridge sampler '" + std::string(s) + "' (marginal | posterior)");
}

/// Runs one bridge chain per start image from x_T = start down to t = 0 over
/// `sample_steps` strided timesteps with variance scale s.
inline std::vector<ImageTensor> bridge_sample(const BridgeSchedule& training_schedule, const BatchPredictor& predict,
                                              const std::vector<ImageTensor>& starts,
                                              const std::vector<std::uint64_t>& chain_seeds, int sample_steps, double s,
                                              int batch_size = 64, bool clamp_x0 = true,
                                              BridgeSampler sampler = BridgeSampler::marginal) {
    if (starts.size() != chain_seeds.size()) throw ValidationError("bridge_sample: one seed per chain required");
    if (batch_size <= 0) throw ValidationError("bridge_sample: batch_size must be positive");
    const auto sch = with_variance_scale(training_schedule, s);
    const auto ts = strided_timesteps(sch.T, sample_steps);
    std::vector<Rng> rngs;
    for (auto seed : chain_seeds) rngs.emplace_back(seed);
    std::vector<ImageTensor> out;
    out.reserve(starts.size());
    for (std::size_t first = 0; first < starts.size(); first += static_cast<std::size_t>(batch_size)) {
        const auto count = std::min(starts.size() - first, static_cast<std::size_t>(batch_size));
        const std::vector<ImageTensor> chunk(starts.begin() + static_cast<std::ptrdiff_t>(first),
                                             starts.begin() + static_cast<std::ptrdiff_t>(first + count));
        const Shape shape = chunk.front().shape();
        const auto y = to_torch(chunk);
        auto x = y.clone();
        for (std::size_t i = 0; i < ts.size(); ++i) {
            const int t_hi = ts[i], t_lo = i + 1 < ts.size() ? ts[i + 1] : 0;
            const auto noise = detail::chain_noise(rngs, first, count, shape);
            auto x0_hat = x - predict(x, torch::full({static_cast<int64_t>(count)}, static_cast<float>(t_hi)));
            if (clamp_x0) x0_hat = x0_hat.clamp(-1.0, 1.0);
            if (sampler == BridgeSampler::posterior)
                x = bridge_posterior_apply(bridge_posterior_coefs(sch, t_hi, t_lo), x0_hat, x, y, noise);
            else
                x = bridge_step_apply(bridge_step_coefs(sch, t_hi, t_lo), x0_hat, y, noise);
        }
        for (auto& im : from_torch(x)) out.push_back(std::move(im));
    }
    return out;
}

/// Unconditional chains from pure noise, one per seed.
inline std::vector<ImageTensor> ddpm_sample(const DdpmSchedule& sch, const BatchPredictor& predict, const Shape& shape,
                                            const std::vector<std::uint64_t>& chain_seeds, int sample_steps,
                                            int batch_size = 64, bool clamp_x0 = true) {
    if (batch_size <= 0) throw ValidationError("ddpm_sample: batch_size must be positive");
    const auto ts = ddpm_sampling_timesteps(sch.T, sample_steps);
    std::vector<Rng> rngs;
    for (auto seed : chain_seeds) rngs.emplace_back(seed);
    std::vector<ImageTensor> out;
    for (std::size_t first = 0; first < chain_seeds.size(); first += static_cast<std::size_t>(batch_size)) {
        const auto count = std::min(chain_seeds.size() - first, static_cast<std::size_t>(batch_size));
        auto x = detail::chain_noise(rngs, first, count, shape);
        for (std::size_t i = 0; i < ts.size(); ++i) {
            const int t_hi = ts[i], t_lo = i + 1 < ts.size() ? ts[i + 1] : -1;
            const auto c = ddpm_step_coefs(sch, t_hi, t_lo);
            const auto noise = detail::chain_noise(rngs, first, count, shape);
            const auto eps = predict(x, torch::full({static_cast<int64_t>(count)}, static_cast<float>(t_hi)));
            auto x0_hat = ddpm_x0_estimate(c, x, eps);
            if (clamp_x0) x0_hat = x0_hat.clamp(-1.0, 1.0);
            x = ddpm_step_apply(c, x0_hat, x, noise);
        }
        for (auto& im : from_torch(x)) out.push_back(std::move(im));
    }
    return out;
}

inline BatchPredictor predictor(const DenoiserState& model) {
    if (!model.trained()) throw ValidationError("sampling requires a trained model");
    return [&model](const torch::Tensor& x, const torch::Tensor& t) { return model.forward(x, t); };
}

// ---------------------------------------------------------------------------
// checkpoints

namespace detail {

inline nlohmann::json denoiser_meta(const DenoiserState& m, const char* kind) {
    return {{"kind", kind},
            {"config",
             {{"image_size", m.cfg.image_size},
              {"channels", m.cfg.channels},
              {"base_channels", m.cfg.base_channels},
              {"channel_multipliers", m.cfg.channel_multipliers},
              {"time_embed_dim", m.cfg.time_embed_dim}}},
            {"train",
             {{"epochs", m.train.epochs},
              {"learning_rate", m.train.learning_rate},
              {"batch_size", m.train.batch_size},
              {"ema_decay", m.train.ema_decay},
              {"seed", m.train.seed}}},
            {"seed", m.train.seed},
            {"loss_history", m.loss_history},
            {"info", m.info}};
}

inline void denoiser_from_meta(DenoiserState& m, const nlohmann::json& j) {
    const auto& c = j.at("config");
    m.cfg.image_size = c.at("image_size");
    m.cfg.channels = c.at("channels");
    m.cfg.base_channels = c.at("base_channels");
    m.cfg.channel_multipliers = c.at("channel_multipliers").get<std::vector<int>>();
    m.cfg.time_embed_dim = c.at("time_embed_dim");
    const auto& t = j.at("train");
    m.train.epochs = t.at("epochs");
    m.train.learning_rate = t.at("learning_rate");
    m.train.batch_size = t.at("batch_size");
    m.train.ema_decay = t.value("ema_decay", 0.0);
    m.train.seed = t.at("seed");
    m.loss_history = j.at("loss_history").get<std::vector<double>>();
    m.info = j.value("info", nlohmann::json::object());
    m.net = UNet(m.cfg);
}

inline CheckpointFile read_kind(const std::filesystem::path& file, const std::string& kind) {
    auto ck = read_checkpoint(file);
    if (ck.meta.at("kind") != kind)
        throw ValidationError(file.string() + ": expected a " + kind + " checkpoint, found '" +
                              ck.meta.at("kind").get<std::string>() + "'");
    return ck;
}

}  // namespace detail

inline void save_bridge(const std::filesystem::path& file, const BridgeModel& m) {
    auto meta = detail::denoiser_meta(m, "bridge");
    meta["schedule"] = {{"T", m.schedule.T}, {"s", m.schedule.s}};
    save_checkpoint(file, meta, *m.net);
}

inline BridgeModel load_bridge(const std::filesystem::path& file) {
    const auto ck = detail::read_kind(file, "bridge");
    BridgeModel m;
    detail::denoiser_from_meta(m, ck.meta);
    m.schedule = build_bridge_schedule(ck.meta.at("schedule").at("T"), ck.meta.at("schedule").at("s"));
    load_state_into(ck, *m.net, file.string());
    m.net->eval();
    return m;
}

inline void save_ddpm(const std::filesystem::path& file, const DdpmModel& m) {
    auto meta = detail::denoiser_meta(m, "ddpm");
    meta["schedule"] = {{"T", m.schedule.T}, {"beta_start", m.schedule.beta.front()}, {"beta_end", m.schedule.beta.back()}};
    save_checkpoint(file, meta, *m.net);
}

inline DdpmModel load_ddpm(const std::filesystem::path& file) {
    const auto ck = detail::read_kind(file, "ddpm");
    DdpmModel m;
    detail::denoiser_from_meta(m, ck.meta);
    const auto& s = ck.meta.at("schedule");
    m.schedule = build_ddpm_schedule(s.at("T"), s.at("beta_start"), s.at("beta_end"));
    load_state_into(ck, *m.net, file.string());
    m.net->eval();
    return m;
}

}  // namespace crease
