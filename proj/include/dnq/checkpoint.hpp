#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "errors.hpp"
#include "graph.hpp"
#include "tensor.hpp"

namespace dnq {

// File layout: "DNQCKPT1", then until EOF one record per tensor:
//   u32 name length | UTF-8 name | u32 rank | u32 dims[rank] | f32 values[prod(dims)]
// All integers and floats little-endian.
inline constexpr std::string_view checkpoint_magic = "DNQCKPT1";

struct Record {
    std::string name;
    Tensor value;
};

struct Checkpoint {
    std::vector<Record> records;

    void add(std::string name, Tensor value) { records.push_back({std::move(name), std::move(value)}); }

    const Tensor* find(std::string_view name) const {
        for (const auto& r : records) {
            if (r.name == name) return &r.value;
        }
        return nullptr;
    }

    const Tensor& at(std::string_view name) const {
        if (const Tensor* t = find(name)) return *t;
        throw CheckpointError("checkpoint has no record '" + std::string(name) + "'");
    }

    friend bool operator==(const Checkpoint& a, const Checkpoint& b) {
        if (a.records.size() != b.records.size()) return false;
        for (std::size_t i = 0; i < a.records.size(); ++i) {
            if (a.records[i].name != b.records[i].name || !(a.records[i].value == b.records[i].value)) return false;
        }
        return true;
    }
};

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class ByteReader {
public:
    explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

    bool at_end() const noexcept { return pos_ == bytes_.size(); }

    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
        pos_ += 4;
        return v;
    }

    std::span<const std::uint8_t> take(std::size_t n, const char* what) {
        need(n, what);
        auto s = bytes_.subspan(pos_, n);
        pos_ += n;
        return s;
    }

private:
    void need(std::size_t n, const char* what) const {
        if (bytes_.size() - pos_ < n) {
            throw CheckpointError(std::string("checkpoint truncated while reading ") + what);
        }
    }

    std::span<const std::uint8_t> bytes_;
    std::size_t pos_ = 0;
};

} // namespace detail

inline std::vector<std::uint8_t> serialize(const Checkpoint& ckpt) {
    std::vector<std::uint8_t> out(checkpoint_magic.begin(), checkpoint_magic.end());
    for (const auto& r : ckpt.records) {
        detail::put_u32(out, static_cast<std::uint32_t>(r.name.size()));
        out.insert(out.end(), r.name.begin(), r.name.end());
        detail::put_u32(out, static_cast<std::uint32_t>(r.value.rank()));
        for (std::size_t d : r.value.shape()) detail::put_u32(out, static_cast<std::uint32_t>(d));
        for (float v : r.value.data()) detail::put_u32(out, std::bit_cast<std::uint32_t>(v));
    }
    return out;
}

inline Checkpoint deserialize(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < checkpoint_magic.size()) throw CheckpointError("checkpoint truncated: missing header");
    if (!std::equal(checkpoint_magic.begin(), checkpoint_magic.end(), bytes.begin())) {
        throw CheckpointError("bad checkpoint header (expected DNQCKPT1)");
    }
    detail::ByteReader in(bytes.subspan(checkpoint_magic.size()));
    Checkpoint ckpt;
    while (!in.at_end()) {
        const std::uint32_t name_len = in.u32("name length");
        auto name_bytes = in.take(name_len, "name");
        std::string name(name_bytes.begin(), name_bytes.end());
        const std::uint32_t rank = in.u32("rank");
        if (rank == 0 || rank > 8) throw CheckpointError("record '" + name + "' has invalid rank " + std::to_string(rank));
        Shape shape;
        std::uint64_t count = 1;
        for (std::uint32_t i = 0; i < rank; ++i) {
            const std::uint32_t d = in.u32("dims");
            if (d == 0) throw CheckpointError("record '" + name + "' has a zero dimension");
            shape.push_back(d);
            count *= d;
            if (count > (std::uint64_t{1} << 32)) throw CheckpointError("record '" + name + "' is implausibly large");
        }
        auto raw = in.take(static_cast<std::size_t>(count) * 4, "values");
        std::vector<float> values(static_cast<std::size_t>(count));
        for (std::size_t i = 0; i < values.size(); ++i) {
            std::uint32_t u = 0;
            for (int b = 0; b < 4; ++b) u |= static_cast<std::uint32_t>(raw[4 * i + b]) << (8 * b);
            values[i] = std::bit_cast<float>(u);
        }
        ckpt.add(std::move(name), Tensor(std::move(shape), std::move(values)));
    }
    return ckpt;
}

inline void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    const auto bytes = serialize(ckpt);
    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw CheckpointError("cannot open " + tmp.string() + " for writing");
        os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!os) throw CheckpointError("failed writing " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

inline std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw CheckpointError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) { return deserialize(read_bytes(path)); }

// Parameters become records under their own names, in storage order.
inline Checkpoint snapshot(const ParameterSet& params, std::string_view prefix = {}) {
    Checkpoint c;
    for (const auto& p : params) c.add(std::string(prefix) + p.name, Tensor(p.value.shape(), p.value.values()));
    return c;
}

// Copies matching records into `params`; every parameter must be present with equal dims.
inline void restore(const Checkpoint& ckpt, ParameterSet& params, std::string_view prefix = {}) {
    for (auto& p : params) {
        const std::string key = std::string(prefix) + p.name;
        const Tensor* t = ckpt.find(key);
        if (!t) throw CheckpointError("checkpoint is missing parameter '" + key + "'");
        if (t->shape() != p.value.shape()) {
            throw CheckpointError("dimension mismatch for '" + key + "': checkpoint " + shape_str(t->shape()) +
                                  " vs model " + shape_str(p.value.shape()));
        }
        std::copy(t->data().begin(), t->data().end(), p.value.data().begin());
    }
}

} // namespace dnq
