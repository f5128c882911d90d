#pragma once

// Small U-shaped noise-prediction network: sinusoidal time embedding,
// one residual block per resolution, skip connections between levels.

#include <torch/torch.h>

#include <cmath>
#include <string>
#include <vector>

#include "crease/image.hpp"

namespace crease {

struct DenoiserConfig {
    int image_size = 32;
    int channels = 1;
    int base_channels = 32;
    std::vector<int> channel_multipliers{1, 2, 4};
    int time_embed_dim = 128;

    void validate() const {
        if (image_size <= 0 || channels <= 0 || base_channels <= 0 || time_embed_dim <= 0)
            throw ValidationError("DenoiserConfig: sizes must be positive");
        if (time_embed_dim % 2 != 0) throw ValidationError("DenoiserConfig: time_embed_dim must be even");
        if (channel_multipliers.empty()) throw ValidationError("DenoiserConfig: channel_multipliers is empty");
        for (int m : channel_multipliers)
            if (m <= 0) throw ValidationError("DenoiserConfig: channel multipliers must be positive");
        const int div = 1 << (channel_multipliers.size() - 1);
        if (image_size % div != 0)
            throw ValidationError("DenoiserConfig: image_size " + std::to_string(image_size) + " not divisible by " +
                                  std::to_string(div));
    }

    friend bool operator==(const DenoiserConfig&, const DenoiserConfig&) = default;
};

namespace detail {

// at least two channels per group so per-channel shifts survive normalization
inline int group_count(int channels) {
    for (int g : {8, 4, 2})
        if (channels % g == 0 && channels / g >= 2) return g;
    return 1;
}

}  // namespace detail

/// Sinusoidal embedding of (possibly fractional) timesteps, shape (B, dim).
inline torch::Tensor timestep_embedding(const torch::Tensor& t, int dim) {
    const int half = dim / 2;
    auto opts = torch::TensorOptions().dtype(t.dtype()).device(t.device());
    auto freqs = torch::exp(-std::log(10000.0) * torch::arange(half, opts) / half);
    auto args = t.reshape({-1, 1}) * freqs.reshape({1, -1});
    return torch::cat({torch::sin(args), torch::cos(args)}, 1);
}

struct ResBlockImpl : torch::nn::Module {
    torch::nn::GroupNorm norm1{nullptr}, norm2{nullptr};
    torch::nn::Conv2d conv1{nullptr}, conv2{nullptr}, skip{nullptr};
    torch::nn::Linear time_proj{nullptr};

    ResBlockImpl(int in, int out, int tdim) {
        norm1 = register_module("norm1", torch::nn::GroupNorm(detail::group_count(in), in));
        conv1 = register_module("conv1", torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 3).padding(1)));
        time_proj = register_module("time_proj", torch::nn::Linear(tdim, 2 * out));
        norm2 = register_module("norm2", torch::nn::GroupNorm(detail::group_count(out), out));
        conv2 = register_module("conv2", torch::nn::Conv2d(torch::nn::Conv2dOptions(out, out, 3).padding(1)));
        if (in != out) skip = register_module("skip", torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 1)));
    }

    torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& temb) {
        auto h = conv1(torch::silu(norm1(x)));
        // time enters as a scale/shift after normalization
        const auto ss = time_proj(temb).unsqueeze(-1).unsqueeze(-1).chunk(2, 1);
        h = conv2(torch::silu(norm2(h) * (1 + ss[0]) + ss[1]));
        return h + (skip ? skip(x) : x);
    }
};
TORCH_MODULE(ResBlock);

struct UNetImpl : torch::nn::Module {
    DenoiserConfig cfg;
    torch::nn::Linear temb1{nullptr}, temb2{nullptr};
    torch::nn::Conv2d in_conv{nullptr}, out_conv{nullptr};
    torch::nn::GroupNorm out_norm{nullptr};
    torch::nn::ModuleList down_blocks, downsample, up_blocks, upsample;
    ResBlock mid{nullptr};

    explicit UNetImpl(DenoiserConfig c) : cfg(std::move(c)) {
        cfg.validate();
        const int tdim = cfg.time_embed_dim;
        temb1 = register_module("temb1", torch::nn::Linear(tdim, tdim));
        temb2 = register_module("temb2", torch::nn::Linear(tdim, tdim));
        in_conv = register_module(
            "in_conv", torch::nn::Conv2d(torch::nn::Conv2dOptions(cfg.channels, cfg.base_channels, 3).padding(1)));
        const auto levels = cfg.channel_multipliers.size();
        std::vector<int> widths;
        int ch = cfg.base_channels;
        for (std::size_t i = 0; i < levels; ++i) {
            const int out = cfg.base_channels * cfg.channel_multipliers[i];
            down_blocks->push_back(ResBlock(ch, out, tdim));
            widths.push_back(out);
            ch = out;
            if (i + 1 < levels)
                downsample->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(ch, ch, 3).stride(2).padding(1)));
        }
        mid = register_module("mid", ResBlock(ch, ch, tdim));
        for (std::size_t i = levels; i-- > 0;) {
            const int out = cfg.base_channels * cfg.channel_multipliers[i];
            up_blocks->push_back(ResBlock(ch + widths[i], out, tdim));
            ch = out;
            if (i > 0) upsample->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(ch, ch, 3).padding(1)));
        }
        register_module("down_blocks", down_blocks);
        register_module("downsample", downsample);
        register_module("up_blocks", up_blocks);
        register_module("upsample", upsample);
        out_norm = register_module("out_norm", torch::nn::GroupNorm(detail::group_count(ch), ch));
        out_conv = register_module("out_conv", torch::nn::Conv2d(torch::nn::Conv2dOptions(ch, cfg.channels, 3).padding(1)));
    }

    /// x: (B, C, H, W); t: (B) timesteps as floating point.
    torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& t) {
        auto temb = timestep_embedding(t.to(x.dtype()), cfg.time_embed_dim);
        temb = temb2(torch::silu(temb1(temb)));
        auto h = in_conv(x);
        std::vector<torch::Tensor> skips;
        const auto levels = down_blocks->size();
        for (std::size_t i = 0; i < levels; ++i) {
            h = down_blocks[i]->as<ResBlock>()->forward(h, temb);
            skips.push_back(h);
            if (i + 1 < levels) h = downsample[i]->as<torch::nn::Conv2d>()->forward(h);
        }
        h = mid(h, temb);
        for (std::size_t j = 0; j < levels; ++j) {
            h = up_blocks[j]->as<ResBlock>()->forward(torch::cat({h, skips[levels - 1 - j]}, 1), temb);
            if (j + 1 < levels) {
                h = torch::upsample_nearest2d(h, std::vector<int64_t>{h.size(2) * 2, h.size(3) * 2});
                h = upsample[j]->as<torch::nn::Conv2d>()->forward(h);
            }
        }
        return out_conv(torch::silu(out_norm(h)));
    }
};
TORCH_MODULE(UNet);

// ---------------------------------------------------------------------------
// ImageTensor <-> torch (B, C, H, W) float tensors

inline torch::Tensor to_torch(const std::vector<const ImageTensor*>& images, torch::Dtype dtype = torch::kFloat32) {
    if (images.empty()) throw ValidationError("to_torch: empty batch");
    const Shape s = images.front()->shape();
    auto out = torch::empty({static_cast<int64_t>(images.size()), s.channels, s.height, s.width}, torch::kFloat64);
    auto* dst = out.data_ptr<double>();
    const auto plane = static_cast<std::size_t>(s.height) * s.width;
    for (std::size_t b = 0; b < images.size(); ++b) {
        if (!(images[b]->shape() == s)) throw ValidationError("to_torch: batch images differ in shape");
        const auto v = images[b]->values();
        for (int y = 0; y < s.height; ++y)
            for (int x = 0; x < s.width; ++x)
                for (int c = 0; c < s.channels; ++c)
                    dst[b * plane * s.channels + static_cast<std::size_t>(c) * plane + static_cast<std::size_t>(y) * s.width + x] =
                        v[(static_cast<std::size_t>(y) * s.width + x) * s.channels + c];
    }
    return out.to(dtype);
}

inline torch::Tensor to_torch(const std::vector<ImageTensor>& images, torch::Dtype dtype = torch::kFloat32) {
    std::vector<const ImageTensor*> ptrs;
    for (const auto& im : images) ptrs.push_back(&im);
    return to_torch(ptrs, dtype);
}

inline torch::Tensor to_torch(const ImageTensor& image, torch::Dtype dtype = torch::kFloat32) {
    return to_torch(std::vector<const ImageTensor*>{&image}, dtype);
}

inline std::vector<ImageTensor> from_torch(const torch::Tensor& batch) {
    if (batch.dim() != 4) throw ValidationError("from_torch: expected (B, C, H, W)");
    const auto t = batch.detach().to(torch::kFloat64).contiguous();
    const Shape s{static_cast<int>(t.size(2)), static_cast<int>(t.size(3)), static_cast<int>(t.size(1))};
    const auto* src = t.data_ptr<double>();
    const auto plane = static_cast<std::size_t>(s.height) * s.width;
    std::vector<ImageTensor> out;
    for (int64_t b = 0; b < t.size(0); ++b) {
        ImageTensor im(s);
        for (int y = 0; y < s.height; ++y)
            for (int x = 0; x < s.width; ++x)
                for (int c = 0; c < s.channels; ++c)
                    im.at(y, x, c) = src[static_cast<std::size_t>(b) * plane * s.channels +
                                         static_cast<std::size_t>(c) * plane + static_cast<std::size_t>(y) * s.width + x];
        out.push_back(std::move(im));
    }
    return out;
}

}  // namespace crease
