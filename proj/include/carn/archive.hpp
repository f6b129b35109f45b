#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "carn/tensor.hpp"

namespace carn {

/// Flat binary container for named tensors, used for checkpoints and
/// reconstruction tables.
///
/// Layout (all integers little-endian):
///
///     magic    "CARNARCH"                 8 bytes
///     version  u32                        currently 1
///     kind     u32 length + UTF-8 bytes
///     metadata u64 length + UTF-8 bytes   flat "key = value" lines
///     count    u32
///     entries  count x { u32 name length, name, u8 dtype, u32 rank,
///                        rank x u64 dims, u64 payload bytes, payload }
///     checksum u64 FNV-1a over every preceding byte
///
/// Payloads are IEEE-754 binary32/binary64 or two's-complement int64, LE.
class Archive {
public:
    enum class DType : std::uint8_t { f32 = 1, f64 = 2, i64 = 3 };

    struct Entry {
        std::string name;
        DType dtype = DType::f64;
        Shape shape;
        std::vector<std::uint8_t> payload;

        friend bool operator==(const Entry&, const Entry&) = default;
    };

    static constexpr std::uint32_t kVersion = 1;

    Archive() = default;
    explicit Archive(std::string kind) : kind_(std::move(kind)) {}

    const std::string& kind() const noexcept { return kind_; }
    std::string& metadata() noexcept { return metadata_; }
    const std::string& metadata() const noexcept { return metadata_; }
    const std::vector<Entry>& entries() const noexcept { return entries_; }

    template <typename T>
    void put(const std::string& name, const Tensor<T>& t);
    void put_indices(const std::string& name, const Shape& shape, std::span<const std::int64_t> v);

    bool contains(const std::string& name) const { return find(name) != nullptr; }
    const Entry* find(const std::string& name) const;

    /// Reads a floating entry as T, converting precision if needed.
    template <typename T>
    Tensor<T> get(const std::string& name) const;
    std::vector<std::int64_t> get_indices(const std::string& name, Shape* shape = nullptr) const;

    std::vector<std::uint8_t> encode() const;
    static Archive decode(std::span<const std::uint8_t> bytes);

    void write(const std::filesystem::path& path) const;
    static Archive read(const std::filesystem::path& path);

    friend bool operator==(const Archive&, const Archive&) = default;

private:
    std::string kind_;
    std::string metadata_;
    std::vector<Entry> entries_;
};

class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes,
                      std::uint64_t seed = 0xcbf29ce484222325ULL);

}  // namespace carn
