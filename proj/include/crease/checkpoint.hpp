#pragma once

// Checkpoint container shared by every trained model:
//   "CREASECK" | u32 version | u64 metadata length | JSON metadata | tensor bytes
// The metadata carries a "tensors" index (name, dtype, shape, offset, bytes)
// into the raw little-endian payload that follows it.

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>

#include "crease/image.hpp"

namespace crease {

inline constexpr char kCheckpointMagic[8] = {'C', 'R', 'E', 'A', 'S', 'E', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline std::map<std::string, torch::Tensor> module_state(const torch::nn::Module& m) {
    std::map<std::string, torch::Tensor> state;
    for (const auto& p : m.named_parameters(true)) state.emplace("param:" + p.key(), p.value());
    for (const auto& b : m.named_buffers(true)) state.emplace("buffer:" + b.key(), b.value());
    return state;
}

inline std::string dtype_name(torch::Dtype d) {
    if (d == torch::kFloat32) return "f32";
    if (d == torch::kFloat64) return "f64";
    if (d == torch::kInt64) return "i64";
    throw ValidationError("checkpoint: unsupported tensor dtype");
}

inline torch::Dtype dtype_from(const std::string& s) {
    if (s == "f32") return torch::kFloat32;
    if (s == "f64") return torch::kFloat64;
    if (s == "i64") return torch::kInt64;
    throw ValidationError("checkpoint: unknown tensor dtype '" + s + "'");
}

}  // namespace detail

/// Writes `meta` (must contain "kind") plus every parameter and buffer of `m`.
inline void save_checkpoint(const std::filesystem::path& file, nlohmann::json meta, const torch::nn::Module& m) {
    if (!meta.contains("kind")) throw ValidationError("save_checkpoint: metadata lacks 'kind'");
    const auto state = detail::module_state(m);
    std::uint64_t offset = 0;
    meta["tensors"] = nlohmann::json::array();
    std::vector<torch::Tensor> payload;
    for (const auto& [name, t] : state) {
        auto c = t.detach().cpu().contiguous();
        const auto bytes = static_cast<std::uint64_t>(c.numel()) * c.element_size();
        meta["tensors"].push_back({{"name", name},
                                   {"dtype", detail::dtype_name(c.scalar_type())},
                                   {"shape", c.sizes().vec()},
                                   {"offset", offset},
                                   {"bytes", bytes}});
        offset += bytes;
        payload.push_back(std::move(c));
    }
    const std::string text = meta.dump();
    if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
    const auto tmp = file.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw std::runtime_error("cannot write checkpoint " + file.string());
        const std::uint32_t version = kCheckpointVersion;
        const std::uint64_t len = text.size();
        out.write(kCheckpointMagic, sizeof kCheckpointMagic);
        out.write(reinterpret_cast<const char*>(&version), sizeof version);
        out.write(reinterpret_cast<const char*>(&len), sizeof len);
        out.write(text.data(), static_cast<std::streamsize>(text.size()));
        for (const auto& c : payload)
            out.write(static_cast<const char*>(c.data_ptr()), static_cast<std::streamsize>(c.numel() * c.element_size()));
        if (!out) throw std::runtime_error("short write on checkpoint " + file.string());
    }
    std::filesystem::rename(tmp, file);
}

struct CheckpointFile {
    nlohmann::json meta;
    std::map<std::string, torch::Tensor> tensors;
};

inline CheckpointFile read_checkpoint(const std::filesystem::path& file) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw ValidationError("cannot open checkpoint " + file.string());
    char magic[8];
    std::uint32_t version = 0;
    std::uint64_t len = 0;
    in.read(magic, sizeof magic);
    if (!in || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0)
        throw ValidationError(file.string() + ": not a crease checkpoint");
    in.read(reinterpret_cast<char*>(&version), sizeof version);
    in.read(reinterpret_cast<char*>(&len), sizeof len);
    if (!in || version != kCheckpointVersion)
        throw ValidationError(file.string() + ": unsupported checkpoint version " + std::to_string(version));
    std::string text(len, '\0');
    in.read(text.data(), static_cast<std::streamsize>(len));
    if (!in) throw ValidationError(file.string() + ": truncated metadata");
    CheckpointFile ck;
    ck.meta = nlohmann::json::parse(text);
    const auto base = in.tellg();
    for (const auto& e : ck.meta.at("tensors")) {
        const auto shape = e.at("shape").get<std::vector<int64_t>>();
        auto t = torch::empty(shape, torch::TensorOptions().dtype(detail::dtype_from(e.at("dtype"))));
        const auto bytes = e.at("bytes").get<std::uint64_t>();
        if (bytes != static_cast<std::uint64_t>(t.numel()) * t.element_size())
            throw ValidationError(file.string() + ": tensor size mismatch for " + e.at("name").get<std::string>());
        in.seekg(base + static_cast<std::streamoff>(e.at("offset").get<std::uint64_t>()));
        in.read(static_cast<char*>(t.data_ptr()), static_cast<std::streamsize>(bytes));
        if (!in) throw ValidationError(file.string() + ": truncated tensor payload");
        ck.tensors.emplace(e.at("name").get<std::string>(), std::move(t));
    }
    return ck;
}

/// Copies stored tensors into `m`; names, shapes and dtypes must match exactly.
inline void load_state_into(const CheckpointFile& ck, torch::nn::Module& m, const std::string& where) {
    torch::NoGradGuard guard;
    auto state = detail::module_state(m);
    if (state.size() != ck.tensors.size())
        throw ValidationError(where + ": checkpoint holds " + std::to_string(ck.tensors.size()) +
                              " tensors, model expects " + std::to_string(state.size()));
    for (auto& [name, dst] : state) {
        const auto it = ck.tensors.find(name);
        if (it == ck.tensors.end()) throw ValidationError(where + ": checkpoint lacks tensor " + name);
        if (it->second.sizes() != dst.sizes() || it->second.scalar_type() != dst.scalar_type())
            throw ValidationError(where + ": tensor " + name + " has mismatched shape or dtype");
        dst.copy_(it->second);
    }
}

}  // namespace crease
