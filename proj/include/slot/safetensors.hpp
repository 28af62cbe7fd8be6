// Copyright 2026 The SLOT Authors
// SPDX-License-Identifier: Apache-2.0

// Reader and writer for the safetensors container: an 8-byte little-endian
// header length, a JSON header mapping tensor names to dtype/shape/byte
// range, then the raw little-endian tensor bytes.

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "slot/error.hpp"

namespace slot::safetensors {

static_assert(std::endian::native == std::endian::little, "safetensors I/O assumes a little-endian host");

struct TensorInfo {
    std::string dtype;
    std::vector<std::size_t> shape;
    std::uint64_t begin = 0;  // relative to the start of the data section
    std::uint64_t end = 0;

    std::size_t numel() const {
        std::size_t n = 1;
        for (auto s : shape) n *= s;
        return n;
    }
};

inline std::size_t dtype_size(const std::string& dtype) {
    if (dtype == "F64" || dtype == "I64" || dtype == "U64") return 8;
    if (dtype == "F32" || dtype == "I32" || dtype == "U32") return 4;
    if (dtype == "F16" || dtype == "BF16" || dtype == "I16" || dtype == "U16") return 2;
    if (dtype == "I8" || dtype == "U8" || dtype == "BOOL") return 1;
    return 0;
}

namespace detail {

inline float half_to_float(std::uint16_t h) {
    const std::uint32_t sign = static_cast<std::uint32_t>(h & 0x8000u) << 16;
    std::uint32_t exp = (h >> 10) & 0x1fu;
    std::uint32_t mant = h & 0x3ffu;
    std::uint32_t bits;
    if (exp == 0) {
        if (mant == 0) {
            bits = sign;
        } else {
            // subnormal: renormalize
            exp = 127 - 15 + 1;
            while ((mant & 0x400u) == 0) {
                mant <<= 1;
                --exp;
            }
            mant &= 0x3ffu;
            bits = sign | (exp << 23) | (mant << 13);
        }
    } else if (exp == 0x1f) {
        bits = sign | 0x7f800000u | (mant << 13);
    } else {
        bits = sign | ((exp + 127 - 15) << 23) | (mant << 13);
    }
    return std::bit_cast<float>(bits);
}

inline float bf16_to_float(std::uint16_t h) {
    return std::bit_cast<float>(static_cast<std::uint32_t>(h) << 16);
}

template <typename Raw>
Raw load_raw(const char* p) {
    Raw v;
    std::memcpy(&v, p, sizeof(Raw));
    return v;
}

} // namespace detail

class Reader {
public:
    explicit Reader(const std::filesystem::path& path) : path_(path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw LoadError("cannot open checkpoint file " + path.string());
        in.seekg(0, std::ios::end);
        file_size_ = static_cast<std::uint64_t>(in.tellg());
        in.seekg(0);
        if (file_size_ < 8) {
            throw LoadError("header parse failure in " + path.string() +
                            ": file shorter than the 8-byte header length");
        }
        char len_bytes[8];
        in.read(len_bytes, 8);
        const auto header_len = detail::load_raw<std::uint64_t>(len_bytes);
        if (header_len > file_size_ - 8) {
            throw LoadError("header parse failure in " + path.string() + ": header length " +
                            std::to_string(header_len) + " exceeds file size " +
                            std::to_string(file_size_));
        }
        std::string header(header_len, '\0');
        in.read(header.data(), static_cast<std::streamsize>(header_len));
        data_start_ = 8 + header_len;

        nlohmann::json j;
        try {
            j = nlohmann::json::parse(header);
        } catch (const nlohmann::json::exception& e) {
            throw LoadError("header parse failure in " + path.string() + ": " + e.what());
        }
        if (!j.is_object()) throw LoadError("header parse failure in " + path.string() + ": not an object");

        const std::uint64_t data_len = file_size_ - data_start_;
        for (auto it = j.begin(); it != j.end(); ++it) {
            if (it.key() == "__metadata__") {
                for (auto m = it->begin(); m != it->end(); ++m) {
                    if (m->is_string()) metadata_[m.key()] = m->get<std::string>();
                }
                continue;
            }
            TensorInfo info;
            try {
                info.dtype = it->at("dtype").get<std::string>();
                info.shape = it->at("shape").get<std::vector<std::size_t>>();
                const auto offs = it->at("data_offsets").get<std::vector<std::uint64_t>>();
                if (offs.size() != 2) throw LoadError("data_offsets must have two entries");
                info.begin = offs[0];
                info.end = offs[1];
            } catch (const nlohmann::json::exception& e) {
                throw LoadError("header parse failure in " + path.string() + " for tensor '" +
                                it.key() + "': " + e.what());
            }
            const std::size_t width = dtype_size(info.dtype);
            if (width == 0) {
                throw LoadError("tensor '" + it.key() + "' has unknown dtype " + info.dtype);
            }
            if (info.end < info.begin || info.end - info.begin != info.numel() * width) {
                throw LoadError("tensor '" + it.key() + "' byte range does not match its shape");
            }
            if (info.end > data_len) {
                throw LoadError("tensor '" + it.key() + "' extends past the end of " + path.string() +
                                " (file truncated?)");
            }
            tensors_.emplace(it.key(), std::move(info));
        }
    }

    const std::map<std::string, TensorInfo>& tensors() const noexcept { return tensors_; }
    const std::map<std::string, std::string>& metadata() const noexcept { return metadata_; }
    bool contains(const std::string& name) const { return tensors_.count(name) != 0; }

    const TensorInfo& info(const std::string& name) const {
        auto it = tensors_.find(name);
        if (it == tensors_.end()) throw LoadError("missing tensor '" + name + "' in " + path_.string());
        return it->second;
    }

    // Reads a floating-point tensor and converts it to T.
    template <typename T>
    std::vector<T> read(const std::string& name) const {
        const TensorInfo& ti = info(name);
        std::vector<char> raw(ti.end - ti.begin);
        std::ifstream in(path_, std::ios::binary);
        in.seekg(static_cast<std::streamoff>(data_start_ + ti.begin));
        in.read(raw.data(), static_cast<std::streamsize>(raw.size()));
        if (!in) throw LoadError("short read for tensor '" + name + "' in " + path_.string());

        std::vector<T> out(ti.numel());
        const char* p = raw.data();
        if (ti.dtype == "F32") {
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(detail::load_raw<float>(p + 4 * i));
        } else if (ti.dtype == "F64") {
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(detail::load_raw<double>(p + 8 * i));
        } else if (ti.dtype == "F16") {
            for (std::size_t i = 0; i < out.size(); ++i)
                out[i] = static_cast<T>(detail::half_to_float(detail::load_raw<std::uint16_t>(p + 2 * i)));
        } else if (ti.dtype == "BF16") {
            for (std::size_t i = 0; i < out.size(); ++i)
                out[i] = static_cast<T>(detail::bf16_to_float(detail::load_raw<std::uint16_t>(p + 2 * i)));
        } else {
            throw LoadError("tensor '" + name + "' has unsupported dtype " + ti.dtype);
        }
        return out;
    }

private:
    std::filesystem::path path_;
    std::uint64_t file_size_ = 0;
    std::uint64_t data_start_ = 0;
    std::map<std::string, TensorInfo> tensors_;
    std::map<std::string, std::string> metadata_;
};

struct OutputTensor {
    std::string name;
    std::vector<std::size_t> shape;
    std::string dtype;       // "F32" or "F64"
    std::vector<char> bytes;
};

template <typename T>
OutputTensor make_tensor(std::string name, std::vector<std::size_t> shape, const std::vector<T>& values) {
    static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
    OutputTensor t;
    t.name = std::move(name);
    t.shape = std::move(shape);
    t.dtype = std::is_same_v<T, float> ? "F32" : "F64";
    t.bytes.resize(values.size() * sizeof(T));
    std::memcpy(t.bytes.data(), values.data(), t.bytes.size());
    return t;
}

inline void write(const std::filesystem::path& path, const std::vector<OutputTensor>& tensors,
                  const std::map<std::string, std::string>& metadata = {}) {
    nlohmann::json header = nlohmann::json::object();
    std::uint64_t offset = 0;
    for (const auto& t : tensors) {
        header[t.name] = {{"dtype", t.dtype},
                          {"shape", t.shape},
                          {"data_offsets", {offset, offset + t.bytes.size()}}};
        offset += t.bytes.size();
    }
    if (!metadata.empty()) header["__metadata__"] = metadata;
    std::string text = header.dump();
    while ((text.size() + 8) % 8 != 0) text.push_back(' ');

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw LoadError("cannot write " + path.string());
    const std::uint64_t len = text.size();
    out.write(reinterpret_cast<const char*>(&len), 8);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    // offsets were assigned in input order, independent of header key order
    for (const auto& t : tensors) out.write(t.bytes.data(), static_cast<std::streamsize>(t.bytes.size()));
    if (!out) throw LoadError("failed writing " + path.string());
}

} // namespace slot::safetensors
