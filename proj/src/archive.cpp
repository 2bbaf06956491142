// Copyright (C) 2026 The Open-Edit Authors
// SPDX-License-Identifier: Apache-2.0

#include "openedit/archive.hpp"

#include <cstring>
#include <fstream>

#include <openssl/evp.h>

#include "openedit/common.hpp"

namespace openedit {

namespace {

constexpr char kMagic[8] = {'O', 'E', 'D', 'I', 'T', 'C', 'K', 'P'};

template <typename T>
void write_pod(std::ostream& out, const T& value) {
    out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in, const std::filesystem::path& path) {
    T value{};
    in.read(reinterpret_cast<char*>(&value), sizeof(T));
    if (!in) {
        throw IoError("truncated checkpoint " + path.string());
    }
    return value;
}

}  // namespace

const torch::Tensor& Archive::at(const std::string& name) const {
    for (const auto& [key, tensor] : tensors) {
        if (key == name) {
            return tensor;
        }
    }
    throw IoError("checkpoint has no tensor named " + name);
}

void save_archive(const std::filesystem::path& path, const Archive& archive) {
    nlohmann::json header;
    header["meta"] = archive.meta;
    auto& index = header["tensors"] = nlohmann::json::array();
    std::vector<torch::Tensor> payloads;
    std::int64_t offset = 0;
    for (const auto& [name, tensor] : archive.tensors) {
        auto data = tensor.detach().to(torch::kCPU, torch::kFloat32).contiguous();
        index.push_back({{"name", name}, {"shape", data.sizes().vec()}, {"offset", offset}});
        offset += data.numel();
        payloads.push_back(data);
    }
    const std::string json = header.dump();

    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw IoError("cannot write checkpoint " + tmp.string());
        }
        out.write(kMagic, sizeof kMagic);
        write_pod(out, Archive::kFormatVersion);
        write_pod(out, static_cast<std::uint64_t>(json.size()));
        out.write(json.data(), static_cast<std::streamsize>(json.size()));
        for (const auto& data : payloads) {
            out.write(reinterpret_cast<const char*>(data.data_ptr<float>()),
                      static_cast<std::streamsize>(data.numel() * sizeof(float)));
        }
        if (!out) {
            throw IoError("short write to checkpoint " + tmp.string());
        }
    }
    std::filesystem::rename(tmp, path);
}

Archive load_archive(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open checkpoint " + path.string());
    }
    char magic[sizeof kMagic];
    in.read(magic, sizeof magic);
    if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0) {
        throw IoError(path.string() + " is not a checkpoint archive");
    }
    const auto version = read_pod<std::uint32_t>(in, path);
    if (version != Archive::kFormatVersion) {
        throw IoError("unsupported checkpoint version " + std::to_string(version) + " in " +
                      path.string());
    }
    const auto json_size = read_pod<std::uint64_t>(in, path);
    std::string json(json_size, '\0');
    in.read(json.data(), static_cast<std::streamsize>(json_size));
    if (!in) {
        throw IoError("truncated checkpoint header " + path.string());
    }
    auto header = nlohmann::json::parse(json);

    Archive archive;
    archive.meta = header.at("meta");
    for (const auto& entry : header.at("tensors")) {
        auto shape = entry.at("shape").get<std::vector<std::int64_t>>();
        auto tensor = torch::empty(shape, torch::kFloat32);
        in.read(reinterpret_cast<char*>(tensor.data_ptr<float>()),
                static_cast<std::streamsize>(tensor.numel() * sizeof(float)));
        if (!in) {
            throw IoError("truncated checkpoint payload " + path.string());
        }
        archive.tensors.emplace_back(entry.at("name").get<std::string>(), tensor);
    }
    return archive;
}

std::vector<std::pair<std::string, torch::Tensor>> named_state(const torch::nn::Module& module) {
    std::vector<std::pair<std::string, torch::Tensor>> state;
    for (const auto& item : module.named_parameters(true)) {
        state.emplace_back(item.key(), item.value());
    }
    for (const auto& item : module.named_buffers(true)) {
        state.emplace_back(item.key(), item.value());
    }
    return state;
}

void load_state(torch::nn::Module& module, const Archive& archive, const std::string& prefix) {
    torch::NoGradGuard no_grad;
    for (auto& [name, target] : named_state(module)) {
        const auto& source = archive.at(prefix + name);
        if (source.sizes() != target.sizes()) {
            throw IoError("shape mismatch for " + prefix + name);
        }
        target.copy_(source.to(target.dtype()));
    }
}

std::string state_hash(const torch::nn::Module& module) {
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
    for (const auto& [name, tensor] : named_state(module)) {
        auto data = tensor.detach().contiguous();
        EVP_DigestUpdate(ctx, name.data(), name.size());
        for (auto dim : data.sizes()) {
            EVP_DigestUpdate(ctx, &dim, sizeof dim);
        }
        EVP_DigestUpdate(ctx, data.data_ptr(), data.numel() * data.element_size());
    }
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int length = 0;
    EVP_DigestFinal_ex(ctx, digest, &length);
    EVP_MD_CTX_free(ctx);
    std::string hex;
    for (unsigned int i = 0; i < length; ++i) {
        static constexpr char kDigits[] = "0123456789abcdef";
        hex += kDigits[digest[i] >> 4];
        hex += kDigits[digest[i] & 0xf];
    }
    return hex;
}

}  // namespace openedit
