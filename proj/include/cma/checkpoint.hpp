#pragma once

// Checkpoint container: magic "CMADM1\n", a manifest (entry count; per entry
// name, rank, extents), then row-major 64-bit little-endian values per entry
// in manifest order. Load -> save round-trips bit-identically.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "cma/error.hpp"
#include "cma/tensor.hpp"

namespace cma {

inline constexpr char kCheckpointMagic[] = "CMADM1\n";

namespace detail {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

template <typename T>
void write_le(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_le(std::istream& is, const std::string& what) {
    T v;
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw CorruptArtifactError("checkpoint: truncated while reading " + what);
    return v;
}

}  // namespace detail

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

inline void save_checkpoint(const NamedTensors& entries, std::ostream& os) {
    os.write(kCheckpointMagic, sizeof(kCheckpointMagic) - 1);
    detail::write_le<std::uint64_t>(os, entries.size());
    for (const auto& [name, t] : entries) {
        detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.shape().size()));
        for (std::size_t e : t.shape()) detail::write_le<std::uint64_t>(os, e);
    }
    for (const auto& [name, t] : entries)
        os.write(reinterpret_cast<const char*>(t.values().data()),
                 static_cast<std::streamsize>(t.size() * sizeof(double)));
}

inline void save_checkpoint(const NamedTensors& entries, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ContractError("checkpoint: cannot open " + path + " for writing");
    save_checkpoint(entries, os);
}

inline NamedTensors load_checkpoint(std::istream& is) {
    char magic[sizeof(kCheckpointMagic) - 1];
    is.read(magic, sizeof(magic));
    if (!is || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
        throw CorruptArtifactError("checkpoint: bad magic");
    const auto count = detail::read_le<std::uint64_t>(is, "entry count");
    struct Entry {
        std::string name;
        Shape shape;
    };
    std::vector<Entry> manifest;
    for (std::uint64_t i = 0; i < count; ++i) {
        const auto name_len = detail::read_le<std::uint32_t>(is, "name length");
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        if (!is) throw CorruptArtifactError("checkpoint: truncated name in entry " + std::to_string(i));
        const auto rank = detail::read_le<std::uint32_t>(is, "rank of " + name);
        Shape shape;
        for (std::uint32_t d = 0; d < rank; ++d)
            shape.push_back(detail::read_le<std::uint64_t>(is, "extent of " + name));
        manifest.push_back({std::move(name), std::move(shape)});
    }
    NamedTensors out;
    for (auto& e : manifest) {
        std::vector<double> values(numel(e.shape));
        is.read(reinterpret_cast<char*>(values.data()),
                static_cast<std::streamsize>(values.size() * sizeof(double)));
        if (!is) throw CorruptArtifactError("checkpoint: truncated values for entry " + e.name);
        out.emplace_back(e.name, Tensor::from(e.shape, std::move(values)));
    }
    return out;
}

inline NamedTensors load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw CorruptArtifactError("checkpoint: cannot open " + path);
    return load_checkpoint(is);
}

}  // namespace cma
