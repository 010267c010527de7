// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <fstream>
#include <istream>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "adakv/attention.hpp"
#include "adakv/matrix.hpp"
#include "adakv/serde.hpp"

namespace adakv {

/// One contiguous buffer holding every head's variable-length cache: per
/// head, all key rows then all value rows. Offsets index elements (cache
/// positions), not doubles; head i's block starts at offsets[i]·2·d_h.
struct FlattenedCache {
    std::vector<double> data;
    std::vector<std::size_t> offsets;
    std::vector<std::size_t> lengths;
    std::size_t d_h = 0;

    std::size_t head_count() const { return lengths.size(); }
    std::size_t total_elements() const {
        std::size_t n = 0;
        for (std::size_t l : lengths) n += l;
        return n;
    }
};

struct CacheStats {
    std::size_t total_elements = 0;
    std::size_t bytes = 0;
    std::vector<std::size_t> per_head;
};

inline FlattenedCache flatten(const LayerCache& cache) {
    cache.validate();
    FlattenedCache fc;
    fc.offsets.reserve(cache.head_count());
    fc.lengths.reserve(cache.head_count());
    std::size_t offset = 0;
    for (const auto& head : cache.heads) {
        if (head.keys.cols() != cache.heads.front().keys.cols())
            throw std::invalid_argument("flatten: inconsistent head widths");
        fc.offsets.push_back(offset);
        fc.lengths.push_back(head.length());
        offset += head.length();
    }
    fc.d_h = cache.heads.empty() ? 0 : cache.heads.front().keys.cols();
    fc.data.reserve(2 * offset * fc.d_h);
    for (const auto& head : cache.heads) {
        const auto& kv = head.keys.values();
        fc.data.insert(fc.data.end(), kv.begin(), kv.end());
        const auto& vv = head.values.values();
        fc.data.insert(fc.data.end(), vv.begin(), vv.end());
    }
    return fc;
}

/// Rows written for head i, copied back out of the buffer.
inline HeadKV head_slice(const FlattenedCache& fc, std::size_t i) {
    if (i >= fc.head_count()) throw std::out_of_range("head_slice: head index out of range");
    const std::size_t n = fc.lengths[i];
    const std::size_t base = fc.offsets[i] * 2 * fc.d_h;
    Matrix keys(n, fc.d_h);
    Matrix values(n, fc.d_h);
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < fc.d_h; ++c) {
            keys(r, c) = fc.data[base + r * fc.d_h + c];
            values(r, c) = fc.data[base + (n + r) * fc.d_h + c];
        }
    return {std::move(keys), std::move(values)};
}

inline LayerCache unflatten(const FlattenedCache& fc) {
    LayerCache cache;
    cache.heads.reserve(fc.head_count());
    for (std::size_t i = 0; i < fc.head_count(); ++i) cache.heads.push_back(head_slice(fc, i));
    return cache;
}

/// Compaction pass: drops evicted rows, preserves relative order, rebuilds
/// offsets as prefix sums of the new lengths.
inline FlattenedCache select_and_compact(const FlattenedCache& fc,
                                         const EvictionDecision& decision) {
    if (decision.head_count() != fc.head_count())
        throw std::invalid_argument("select_and_compact: head count mismatch");
    FlattenedCache out;
    out.d_h = fc.d_h;
    std::size_t offset = 0;
    for (std::size_t i = 0; i < fc.head_count(); ++i) {
        if (decision.retain[i].size() != fc.lengths[i])
            throw std::invalid_argument("select_and_compact: decision length mismatch");
        out.offsets.push_back(offset);
        const std::size_t kept = decision.retained_count(i);
        out.lengths.push_back(kept);
        offset += kept;
    }
    out.data.reserve(2 * offset * fc.d_h);
    for (std::size_t i = 0; i < fc.head_count(); ++i) {
        const std::size_t base = fc.offsets[i] * 2 * fc.d_h;
        const std::size_t n = fc.lengths[i];
        for (std::size_t pass = 0; pass < 2; ++pass)
            for (std::size_t r = 0; r < n; ++r) {
                if (!decision.retain[i][r]) continue;
                const std::size_t row = base + (pass * n + r) * fc.d_h;
                out.data.insert(out.data.end(), fc.data.begin() + static_cast<std::ptrdiff_t>(row),
                                fc.data.begin() + static_cast<std::ptrdiff_t>(row + fc.d_h));
            }
    }
    return out;
}

inline CacheStats memory_footprint(const FlattenedCache& fc,
                                   std::size_t bytes_per_value = sizeof(double)) {
    CacheStats stats;
    stats.per_head = fc.lengths;
    stats.total_elements = fc.total_elements();
    stats.bytes = stats.total_elements * fc.d_h * 2 * bytes_per_value;
    return stats;
}

inline constexpr std::uint32_t kAkvcVersion = 1;

/// Binary layout: "AKVC", u32 version, u32 h, u32 d_h, u64 lengths[h],
/// then the data buffer as little-endian f64.
inline void save_flattened(const FlattenedCache& fc, std::ostream& os) {
    os.write("AKVC", 4);
    serde::store_u32(os, kAkvcVersion);
    serde::store_u32(os, static_cast<std::uint32_t>(fc.head_count()));
    serde::store_u32(os, static_cast<std::uint32_t>(fc.d_h));
    for (std::size_t l : fc.lengths) serde::store_u64(os, static_cast<std::uint64_t>(l));
    for (double v : fc.data) serde::store_f64(os, v);
    if (!os) throw IoError("save_flattened: write failed");
}

inline FlattenedCache load_flattened(std::istream& is) {
    char magic[4];
    if (!is.read(magic, 4)) throw FormatError("load_flattened: truncated header");
    if (std::string(magic, 4) != "AKVC") throw FormatError("load_flattened: bad magic");
    const std::uint32_t version = serde::load_u32(is);
    if (version != kAkvcVersion)
        throw FormatError("load_flattened: unsupported version " + std::to_string(version));
    const std::uint32_t h = serde::load_u32(is);
    const std::uint32_t d_h = serde::load_u32(is);
    FlattenedCache fc;
    fc.d_h = d_h;
    std::size_t offset = 0;
    for (std::uint32_t i = 0; i < h; ++i) {
        fc.offsets.push_back(offset);
        const auto l = static_cast<std::size_t>(serde::load_u64(is));
        fc.lengths.push_back(l);
        offset += l;
    }
    fc.data.resize(2 * offset * d_h);
    for (double& v : fc.data) v = serde::load_f64(is);
    return fc;
}

inline void save_flattened_file(const FlattenedCache& fc, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for writing: " + path);
    save_flattened(fc, os);
}

inline FlattenedCache load_flattened_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open for reading: " + path);
    return load_flattened(is);
}

}  // namespace adakv
