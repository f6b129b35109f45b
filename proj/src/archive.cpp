#include "carn/archive.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace carn {

namespace {

constexpr char kMagic[8] = {'C', 'A', 'R', 'N', 'A', 'R', 'C', 'H'};

void put_u(std::vector<std::uint8_t>& out, std::uint64_t v, int bytes) {
    for (int i = 0; i < bytes; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_string(std::vector<std::uint8_t>& out, const std::string& s, int len_bytes) {
    put_u(out, s.size(), len_bytes);
    out.insert(out.end(), s.begin(), s.end());
}

class Reader {
public:
    explicit Reader(std::span<const std::uint8_t> b) : bytes_(b) {}

    std::uint64_t u(int n) {
        need(static_cast<std::size_t>(n));
        std::uint64_t v = 0;
        for (int i = 0; i < n; ++i) v |= std::uint64_t{bytes_[pos_ + i]} << (8 * i);
        pos_ += static_cast<std::size_t>(n);
        return v;
    }
    std::string str(int len_bytes) {
        const auto n = static_cast<std::size_t>(u(len_bytes));
        need(n);
        std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
        pos_ += n;
        return s;
    }
    std::vector<std::uint8_t> raw(std::size_t n) {
        need(n);
        std::vector<std::uint8_t> v(bytes_.begin() + static_cast<std::ptrdiff_t>(pos_),
                                    bytes_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
        pos_ += n;
        return v;
    }
    std::size_t pos() const { return pos_; }

private:
    void need(std::size_t n) const {
        if (pos_ + n > bytes_.size() || pos_ + n < pos_) throw FormatError("archive truncated");
    }
    std::span<const std::uint8_t> bytes_;
    std::size_t pos_ = 0;
};

std::size_t dtype_size(Archive::DType d) { return d == Archive::DType::f32 ? 4 : 8; }

template <typename T>
constexpr Archive::DType dtype_of() {
    return sizeof(T) == 4 ? Archive::DType::f32 : Archive::DType::f64;
}

}  // namespace

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes, std::uint64_t seed) {
    std::uint64_t h = seed;
    for (auto b : bytes) {
        h ^= b;
        h *= 0x100000001b3ULL;
    }
    return h;
}

template <typename T>
void Archive::put(const std::string& name, const Tensor<T>& t) {
    static_assert(std::is_floating_point_v<T>);
    Entry e{name, dtype_of<T>(), t.shape(), {}};
    e.payload.reserve(t.size() * sizeof(T));
    for (T v : t.storage()) {
        if constexpr (sizeof(T) == 4) {
            put_u(e.payload, std::bit_cast<std::uint32_t>(v), 4);
        } else {
            put_u(e.payload, std::bit_cast<std::uint64_t>(v), 8);
        }
    }
    entries_.push_back(std::move(e));
}

void Archive::put_indices(const std::string& name, const Shape& shape,
                          std::span<const std::int64_t> v) {
    if (shape_numel(shape) != v.size()) throw ShapeError("archive: index shape/length mismatch");
    Entry e{name, DType::i64, shape, {}};
    for (auto x : v) put_u(e.payload, static_cast<std::uint64_t>(x), 8);
    entries_.push_back(std::move(e));
}

const Archive::Entry* Archive::find(const std::string& name) const {
    for (const auto& e : entries_)
        if (e.name == name) return &e;
    return nullptr;
}

template <typename T>
Tensor<T> Archive::get(const std::string& name) const {
    const Entry* e = find(name);
    if (!e) throw FormatError("archive: missing entry '" + name + "'");
    if (e->dtype == DType::i64) throw FormatError("archive: entry '" + name + "' is not floating");
    Tensor<T> t(e->shape);
    Reader r(e->payload);
    for (auto& v : t.storage()) {
        if (e->dtype == DType::f32) {
            v = static_cast<T>(std::bit_cast<float>(static_cast<std::uint32_t>(r.u(4))));
        } else {
            v = static_cast<T>(std::bit_cast<double>(r.u(8)));
        }
    }
    return t;
}

std::vector<std::int64_t> Archive::get_indices(const std::string& name, Shape* shape) const {
    const Entry* e = find(name);
    if (!e) throw FormatError("archive: missing entry '" + name + "'");
    if (e->dtype != DType::i64) throw FormatError("archive: entry '" + name + "' is not int64");
    if (shape) *shape = e->shape;
    std::vector<std::int64_t> v(shape_numel(e->shape));
    Reader r(e->payload);
    for (auto& x : v) x = static_cast<std::int64_t>(r.u(8));
    return v;
}

std::vector<std::uint8_t> Archive::encode() const {
    std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
    put_u(out, kVersion, 4);
    put_string(out, kind_, 4);
    put_string(out, metadata_, 8);
    put_u(out, entries_.size(), 4);
    for (const auto& e : entries_) {
        put_string(out, e.name, 4);
        out.push_back(static_cast<std::uint8_t>(e.dtype));
        put_u(out, e.shape.size(), 4);
        for (auto d : e.shape) put_u(out, d, 8);
        put_u(out, e.payload.size(), 8);
        out.insert(out.end(), e.payload.begin(), e.payload.end());
    }
    put_u(out, fnv1a64(out), 8);
    return out;
}

Archive Archive::decode(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < sizeof(kMagic) + 8 || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
        throw FormatError("archive: bad magic");
    }
    const auto body = bytes.first(bytes.size() - 8);
    Reader tail(bytes.last(8));
    if (tail.u(8) != fnv1a64(body)) throw FormatError("archive: checksum mismatch");

    Reader r(body);
    r.raw(sizeof(kMagic));
    const auto version = r.u(4);
    if (version != kVersion) {
        throw FormatError("archive: unsupported version " + std::to_string(version));
    }
    Archive a(r.str(4));
    a.metadata_ = r.str(8);
    const auto count = r.u(4);
    for (std::uint64_t i = 0; i < count; ++i) {
        Entry e;
        e.name = r.str(4);
        const auto dt = r.u(1);
        if (dt < 1 || dt > 3) throw FormatError("archive: bad dtype in '" + e.name + "'");
        e.dtype = static_cast<DType>(dt);
        const auto rank = r.u(4);
        for (std::uint64_t k = 0; k < rank; ++k) e.shape.push_back(static_cast<std::size_t>(r.u(8)));
        const auto nbytes = static_cast<std::size_t>(r.u(8));
        if (nbytes != shape_numel(e.shape) * dtype_size(e.dtype)) {
            throw FormatError("archive: payload size mismatch in '" + e.name + "'");
        }
        e.payload = r.raw(nbytes);
        a.entries_.push_back(std::move(e));
    }
    if (r.pos() != body.size()) throw FormatError("archive: trailing bytes");
    return a;
}

void Archive::write(const std::filesystem::path& path) const {
    const auto bytes = encode();
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open " + path.string() + " for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw std::runtime_error("failed writing " + path.string());
}

Archive Archive::read(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    try {
        return decode(bytes);
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

template void Archive::put<float>(const std::string&, const Tensor<float>&);
template void Archive::put<double>(const std::string&, const Tensor<double>&);
template Tensor<float> Archive::get<float>(const std::string&) const;
template Tensor<double> Archive::get<double>(const std::string&) const;

}  // namespace carn
