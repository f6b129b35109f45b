#include "carn/synth.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

#include <json.hpp>

#include "carn/archive.hpp"
#include "carn/keyvalue.hpp"

namespace carn {

namespace {

constexpr double kSacrumHeightMm = 10.0;
constexpr double kMaxTilt = 0.1;     // vertical mm per horizontal mm
constexpr double kEdgeMarginMm = 2.0;
constexpr double kBlurSigmaPx = 1.5;

// Baseline heights (mm), anterior/middle/posterior.
constexpr double kBaseDisc[kNumLevels][3] = {
    {8.0, 9.0, 6.0}, {9.0, 10.0, 6.5}, {10.0, 11.0, 7.0}, {11.0, 11.5, 7.5}, {11.5, 11.0, 7.0}};
constexpr double kBaseBody[kNumLevels][3] = {
    {25.0, 23.5, 26.5}, {26.0, 24.5, 27.5}, {26.5, 25.0, 28.0}, {26.5, 25.0, 27.5}, {26.0, 24.5, 26.5}};

std::size_t disc(std::size_t level, std::size_t pos) { return kDiscOffset + 3 * level + pos; }
std::size_t body(std::size_t level, std::size_t pos) { return kBodyOffset + 3 * level + pos; }

IndexVector baseline() {
    IndexVector y(30);
    for (std::size_t l = 0; l < kNumLevels; ++l)
        for (std::size_t p = 0; p < 3; ++p) {
            y[disc(l, p)] = kBaseDisc[l][p];
            y[body(l, p)] = kBaseBody[l][p];
        }
    return y;
}

// Column j of the mixing matrix: the height pattern driven by feature j.
std::vector<IndexVector> mixing_patterns(std::size_t m) {
    std::vector<IndexVector> cols;
    const IndexVector base = baseline();

    // Overall stature.
    IndexVector stature(30);
    for (std::size_t i = 0; i < 30; ++i) stature[i] = 0.05 * base[i];
    cols.push_back(stature);

    // Anterior-posterior wedging (lordosis), stronger at lower levels.
    IndexVector wedge(30, 0.0);
    for (std::size_t l = 0; l < kNumLevels; ++l) {
        const double s = 1.0 + 0.2 * static_cast<double>(l);
        wedge[disc(l, 0)] = 1.0 * s;
        wedge[disc(l, 1)] = 0.2 * s;
        wedge[disc(l, 2)] = -0.8 * s;
        wedge[body(l, 0)] = 0.4;
        wedge[body(l, 2)] = -0.4;
    }
    cols.push_back(wedge);

    // Degeneration of the lower discs: the discs collapse and the adjacent
    // bodies lose height with them.
    IndexVector lower(30, 0.0);
    const double l4l5[3] = {-3.0, -3.0, -1.8}, l5s1[3] = {-2.0, -2.0, -1.2};
    const double vb4[3] = {-1.2, -1.0, -0.8}, vb5[3] = {-1.0, -0.8, -0.6};
    for (std::size_t p = 0; p < 3; ++p) {
        lower[disc(3, p)] = l4l5[p];
        lower[disc(4, p)] = l5s1[p];
        lower[body(3, p)] = vb4[p];
        lower[body(4, p)] = vb5[p];
    }
    cols.push_back(lower);

    // Degeneration of the upper discs.
    IndexVector upper(30, 0.0);
    const double l2l3[3] = {-2.5, -2.5, -1.2}, l3l4[3] = {-1.5, -1.5, -1.0};
    for (std::size_t p = 0; p < 3; ++p) {
        upper[disc(1, p)] = l2l3[p];
        upper[disc(2, p)] = l3l4[p];
        upper[body(1, p)] = -0.8;
        upper[body(2, p)] = -0.6;
    }
    cols.push_back(upper);

    // Further latent directions get fixed small random patterns.
    std::mt19937_64 rng(0x5eed5eedULL);
    std::uniform_real_distribution<double> amp(-0.5, 0.5);
    while (cols.size() < m) {
        IndexVector extra(30);
        for (auto& v : extra) v = amp(rng);
        cols.push_back(extra);
    }
    cols.resize(m);

    // Coupled term: middle heights trade between discs and bodies
    // (endplate concavity).
    IndexVector concavity(30, 0.0);
    for (std::size_t l = 0; l < kNumLevels; ++l) {
        concavity[disc(l, 1)] = 0.8;
        concavity[body(l, 1)] = -0.8;
    }
    cols.push_back(concavity);
    return cols;
}

std::vector<double> features(std::span<const double> z) {
    const std::size_t m = z.size();
    std::vector<double> f(m + 1);
    for (std::size_t j = 0; j < m; ++j) {
        f[j] = (j == 2 || j == 3) ? 0.5 * (1.0 - std::cos(z[j])) : std::sin(z[j]);
    }
    f[m] = m >= 2 ? std::sin(z[0]) * std::cos(z[1]) : std::cos(z[0]);
    return f;
}

void put_le_float(std::vector<std::uint8_t>& out, float v) {
    const auto u = std::bit_cast<std::uint32_t>(v);
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(u >> (8 * i)));
}

std::vector<std::uint8_t> image_bytes(const Tensor<float>& img) {
    std::vector<std::uint8_t> out;
    out.reserve(img.size() * 4);
    for (float v : img.storage()) put_le_float(out, v);
    return out;
}

std::string hex64(std::uint64_t v) {
    std::ostringstream s;
    s << std::hex;
    s.width(16);
    s.fill('0');
    s << v;
    return s.str();
}

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& p) {
    std::ifstream f(p, std::ios::binary);
    if (!f) throw DatasetError("cannot open image file " + p.string());
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

}  // namespace

const std::array<std::string, 30>& index_names() {
    static const std::array<std::string, 30> names = [] {
        std::array<std::string, 30> n;
        const char* discs[kNumLevels] = {"L1L2", "L2L3", "L3L4", "L4L5", "L5S1"};
        const char* bodies[kNumLevels] = {"L1", "L2", "L3", "L4", "L5"};
        const char* pos[3] = {"a", "m", "p"};
        for (std::size_t l = 0; l < kNumLevels; ++l)
            for (std::size_t p = 0; p < 3; ++p) {
                n[disc(l, p)] = std::string("idh_") + discs[l] + "_" + pos[p];
                n[body(l, p)] = std::string("vbh_") + bodies[l] + "_" + pos[p];
            }
        return n;
    }();
    return names;
}

bool is_disc_index(std::size_t i) { return i < kBodyOffset; }

PhantomSpec PhantomSpec::at_resolution(std::size_t h, std::size_t w) {
    PhantomSpec s;
    s.image_h = h;
    s.image_w = w;
    s.pixel_spacing = kFullSizePixelSpacingMm * 512.0 / static_cast<double>(h);
    return s;
}

PhantomColumns phantom_columns(std::size_t image_w) {
    const auto wd = static_cast<double>(image_w);
    const auto anterior = static_cast<std::size_t>(std::lround(0.3 * wd));
    const auto half = static_cast<std::size_t>(std::lround(0.2 * wd));
    return {anterior, anterior + half, anterior + 2 * half};
}

IndexVector latent_to_indices(std::span<const double> z) {
    if (z.empty() || z.size() >= 30) {
        throw ShapeError("latent_to_indices: latent dimension must be in [1, 29], got " +
                         std::to_string(z.size()));
    }
    IndexVector y = baseline();
    const auto f = features(z);
    const auto cols = mixing_patterns(z.size());
    for (std::size_t j = 0; j < cols.size(); ++j)
        for (std::size_t i = 0; i < 30; ++i) y[i] += cols[j][i] * f[j];
    for (std::size_t i = 0; i < 30; ++i) {
        y[i] = std::clamp(y[i], 0.5, is_disc_index(i) ? kMaxDiscHeightMm : kMaxBodyHeightMm);
    }
    return y;
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) {
    auto mix = [](std::uint64_t x) {
        x += 0x9e3779b97f4a7c15ULL;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
        return x ^ (x >> 31);
    };
    return mix(mix(mix(seed) ^ stream) ^ index);
}

Tensor<float> render_phantom(std::span<const double> heights, const PhantomSpec& spec,
                             std::uint64_t seed) {
    if (heights.size() != 30) throw ShapeError("render_phantom: expected 30 heights");
    if (spec.image_w < 16 || spec.image_h < 16 || spec.pixel_spacing <= 0) {
        throw ShapeError("render_phantom: invalid canvas");
    }
    const double s = spec.pixel_spacing;
    for (std::size_t i = 0; i < 30; ++i) {
        if (!(heights[i] / s >= 2.0)) {
            throw ShapeError("render_phantom: " + index_names()[i] + " = " + format_double(heights[i]) +
                             " mm is under 2 pixels at " + format_double(s) + " mm/pixel");
        }
    }
    const std::size_t H = spec.image_h, W = spec.image_w;
    const auto cols = phantom_columns(W);
    const double canvas = static_cast<double>(H) * s;

    // Height of band b (0..9, body/disc alternating from the top) at column c.
    auto band_height = [&](std::size_t band, std::size_t c) {
        const std::size_t level = band / 2;
        const std::size_t base = band % 2 == 0 ? body(level, 0) : disc(level, 0);
        const double a = heights[base], m = heights[base + 1], p = heights[base + 2];
        if (c <= cols.middle) {
            const double u = static_cast<double>(c - cols.anterior) /
                             static_cast<double>(cols.middle - cols.anterior);
            return a + u * (m - a);
        }
        const double u = static_cast<double>(c - cols.middle) /
                         static_cast<double>(cols.posterior - cols.middle);
        return m + u * (p - m);
    };

    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const double tilt = kMaxTilt * (2.0 * unit(rng) - 1.0);

    // Vertical extent of the stack relative to its top at the middle column.
    double lo = 0, hi = 0;
    for (std::size_t c = cols.anterior; c <= cols.posterior; ++c) {
        const double shift = tilt * (static_cast<double>(c) - static_cast<double>(cols.middle)) * s;
        double total = kSacrumHeightMm;
        for (std::size_t b = 0; b < 10; ++b) total += band_height(b, c);
        lo = std::min(lo, shift);
        hi = std::max(hi, shift + total);
    }
    const double free_space = canvas - 2 * kEdgeMarginMm - (hi - lo);
    if (free_space < 0) {
        throw ShapeError("render_phantom: spine stack of " + format_double(hi - lo) +
                         " mm exceeds the " + format_double(canvas) + " mm canvas");
    }
    const double top = kEdgeMarginMm - lo + free_space * unit(rng);

    std::vector<bool> blurred(kNumLevels);
    for (std::size_t l = 0; l < kNumLevels; ++l) blurred[l] = unit(rng) < spec.ambiguity_prob;

    Tensor<float> img(Shape{1, H, W}, kBackgroundIntensity);
    // Per column band boundaries, kept for the blur pass.
    std::vector<std::array<double, 12>> bounds(W);
    for (std::size_t c = cols.anterior; c <= cols.posterior; ++c) {
        auto& bd = bounds[c];
        bd[0] = top + tilt * (static_cast<double>(c) - static_cast<double>(cols.middle)) * s;
        for (std::size_t b = 0; b < 10; ++b) bd[b + 1] = bd[b] + band_height(b, c);
        bd[11] = bd[10] + kSacrumHeightMm;
        for (std::size_t r = 0; r < H; ++r) {
            const double y = (static_cast<double>(r) + 0.5) * s;
            if (y < bd[0] || y >= bd[11]) continue;
            std::size_t b = 0;
            while (y >= bd[b + 1]) ++b;
            float v = kBodyIntensity;
            if (b < 10 && b % 2 == 1) v = blurred[b / 2] ? kBlurredDiscIntensity : kDiscIntensity;
            img[r * W + c] = v;
        }
    }

    if (std::any_of(blurred.begin(), blurred.end(), [](bool b) { return b; })) {
        const Tensor<float> sharp = img;
        const int radius = static_cast<int>(std::ceil(3 * kBlurSigmaPx));
        std::vector<double> kernel(2 * radius + 1);
        double ksum = 0;
        for (int i = -radius; i <= radius; ++i) {
            kernel[i + radius] = std::exp(-0.5 * i * i / (kBlurSigmaPx * kBlurSigmaPx));
            ksum += kernel[i + radius];
        }
        for (auto& k : kernel) k /= ksum;
        for (std::size_t l = 0; l < kNumLevels; ++l) {
            if (!blurred[l]) continue;
            for (std::size_t c = cols.anterior; c <= cols.posterior; ++c) {
                const double y0 = bounds[c][2 * l + 1], y1 = bounds[c][2 * l + 2];
                const auto r0 = static_cast<long>(std::floor(y0 / s)) - radius;
                const auto r1 = static_cast<long>(std::ceil(y1 / s)) + radius;
                for (long r = std::max(0L, r0); r <= std::min<long>(static_cast<long>(H) - 1, r1); ++r) {
                    double acc = 0;
                    for (int i = -radius; i <= radius; ++i) {
                        const long rr = std::clamp<long>(r + i, 0, static_cast<long>(H) - 1);
                        acc += kernel[i + radius] * sharp[static_cast<std::size_t>(rr) * W + c];
                    }
                    img[static_cast<std::size_t>(r) * W + c] = static_cast<float>(acc);
                }
            }
        }
    }

    if (spec.noise_sigma > 0) {
        std::normal_distribution<double> noise(0.0, spec.noise_sigma);
        for (auto& v : img.storage()) v = static_cast<float>(v + noise(rng));
    }
    for (auto& v : img.storage()) v = std::clamp(v, 0.0f, 1.0f);
    return img;
}

std::vector<std::size_t> DatasetManifest::split(bool test) const {
    std::vector<std::size_t> ids;
    for (std::size_t i = 0; i < samples.size(); ++i)
        if (samples[i].test == test) ids.push_back(i);
    return ids;
}

std::vector<IndexVector> Dataset::targets(std::span<const std::size_t> ids) const {
    std::vector<IndexVector> out;
    out.reserve(ids.size());
    for (auto i : ids) out.push_back(manifest.samples.at(i).target);
    return out;
}

DatasetManifest generate_dataset(const std::filesystem::path& dir, std::size_t n,
                                 const PhantomSpec& spec, std::uint64_t seed,
                                 double test_fraction) {
    if (n < 10) throw DatasetError("generate_dataset: need at least 10 samples, got " + std::to_string(n));
    if (test_fraction < 0 || test_fraction >= 1) throw DatasetError("generate_dataset: bad test fraction");
    Dataset data;
    auto& m = data.manifest;
    m.image_h = spec.image_h;
    m.image_w = spec.image_w;
    m.pixel_spacing = spec.pixel_spacing;
    m.index_names.assign(index_names().begin(), index_names().end());
    m.seed = seed;
    m.phantom = spec;

    std::vector<bool> is_test(n, false);
    {
        std::vector<std::size_t> order(n);
        for (std::size_t i = 0; i < n; ++i) order[i] = i;
        std::mt19937_64 rng(derive_seed(seed, 3, 0));
        for (std::size_t i = n - 1; i > 0; --i) {
            std::uniform_int_distribution<std::size_t> pick(0, i);
            std::swap(order[i], order[pick(rng)]);
        }
        const auto n_test = static_cast<std::size_t>(std::lround(test_fraction * static_cast<double>(n)));
        for (std::size_t i = 0; i < n_test; ++i) is_test[order[i]] = true;
    }

    for (std::size_t i = 0; i < n; ++i) {
        std::mt19937_64 rng(derive_seed(seed, 1, i));
        std::uniform_real_distribution<double> angle(-std::numbers::pi, std::numbers::pi);
        std::vector<double> z(spec.latent_dim);
        for (auto& v : z) v = angle(rng);
        SampleRecord rec;
        rec.target = latent_to_indices(z);
        rec.test = is_test[i];
        char name[32];
        std::snprintf(name, sizeof(name), "images/%06zu.f32", i);
        rec.file = name;
        data.images.push_back(render_phantom(rec.target, spec, derive_seed(seed, 2, i)));
        m.samples.push_back(std::move(rec));
    }
    write_dataset(dir, data);
    return data.manifest;
}

void write_dataset(const std::filesystem::path& dir, const Dataset& data) {
    namespace fs = std::filesystem;
    const auto& m = data.manifest;
    if (m.samples.size() != data.images.size()) throw DatasetError("write_dataset: image/sample count mismatch");
    std::error_code ec;
    fs::create_directories(dir / "images", ec);
    if (ec) throw DatasetError("cannot create dataset directory " + dir.string() + ": " + ec.message());

    nlohmann::json j;
    j["format"] = "carn-dataset";
    j["version"] = m.version;
    j["num_samples"] = m.samples.size();
    j["image_height"] = m.image_h;
    j["image_width"] = m.image_w;
    j["pixel_spacing_mm"] = m.pixel_spacing;
    j["dtype"] = m.dtype;
    j["index_names"] = m.index_names;
    j["generator"] = {{"seed", m.seed},
                      {"latent_dim", m.phantom.latent_dim},
                      {"noise_sigma", m.phantom.noise_sigma},
                      {"ambiguity_prob", m.phantom.ambiguity_prob}};
    auto samples = nlohmann::json::array();
    for (std::size_t i = 0; i < m.samples.size(); ++i) {
        const auto& rec = m.samples[i];
        const auto& img = data.images[i];
        if (img.shape() != Shape{1, m.image_h, m.image_w}) {
            throw DatasetError("write_dataset: image for " + rec.file + " has shape " +
                               shape_to_string(img.shape()));
        }
        const auto bytes = image_bytes(img);
        const auto path = dir / rec.file;
        fs::create_directories(path.parent_path(), ec);
        std::ofstream f(path, std::ios::binary | std::ios::trunc);
        if (!f) throw DatasetError("cannot write " + path.string());
        f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!f) throw DatasetError("failed writing " + path.string());
        samples.push_back({{"file", rec.file},
                           {"split", rec.test ? "test" : "train"},
                           {"checksum", hex64(fnv1a64(bytes))},
                           {"target", rec.target}});
    }
    j["samples"] = samples;

    std::ofstream mf(dir / "manifest.json", std::ios::trunc);
    if (!mf) throw DatasetError("cannot write " + (dir / "manifest.json").string());
    mf << j.dump(2) << "\n";

    std::ofstream tf(dir / "targets.csv", std::ios::trunc);
    if (!tf) throw DatasetError("cannot write " + (dir / "targets.csv").string());
    for (std::size_t i = 0; i < m.index_names.size(); ++i) tf << (i ? "," : "") << m.index_names[i];
    tf << "\n";
    for (const auto& rec : m.samples) {
        for (std::size_t i = 0; i < rec.target.size(); ++i) tf << (i ? "," : "") << format_double(rec.target[i]);
        tf << "\n";
    }
    if (!tf) throw DatasetError("failed writing targets.csv");
}

Dataset read_dataset(const std::filesystem::path& dir) {
    const auto manifest_path = dir / "manifest.json";
    std::ifstream mf(manifest_path);
    if (!mf) throw DatasetError("cannot open " + manifest_path.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(mf);
    } catch (const nlohmann::json::exception& e) {
        throw DatasetError(manifest_path.string() + ": " + e.what());
    }

    Dataset data;
    auto& m = data.manifest;
    try {
        if (j.value("format", "") != "carn-dataset") throw DatasetError("not a carn-dataset manifest");
        m.version = j.at("version").get<int>();
        if (m.version != 1) throw DatasetError("unsupported manifest version " + std::to_string(m.version));
        m.image_h = j.at("image_height").get<std::size_t>();
        m.image_w = j.at("image_width").get<std::size_t>();
        m.pixel_spacing = j.at("pixel_spacing_mm").get<double>();
        m.dtype = j.at("dtype").get<std::string>();
        m.index_names = j.at("index_names").get<std::vector<std::string>>();
        if (j.contains("generator")) {
            const auto& g = j["generator"];
            m.seed = g.value("seed", std::uint64_t{0});
            m.phantom.latent_dim = g.value("latent_dim", m.phantom.latent_dim);
            m.phantom.noise_sigma = g.value("noise_sigma", m.phantom.noise_sigma);
            m.phantom.ambiguity_prob = g.value("ambiguity_prob", m.phantom.ambiguity_prob);
        }
        m.phantom.image_h = m.image_h;
        m.phantom.image_w = m.image_w;
        m.phantom.pixel_spacing = m.pixel_spacing;
        for (const auto& s : j.at("samples")) {
            SampleRecord rec;
            rec.file = s.at("file").get<std::string>();
            rec.test = s.at("split").get<std::string>() == "test";
            rec.checksum = std::stoull(s.at("checksum").get<std::string>(), nullptr, 16);
            rec.target = s.at("target").get<IndexVector>();
            m.samples.push_back(std::move(rec));
        }
        if (j.at("num_samples").get<std::size_t>() != m.samples.size()) {
            throw DatasetError("num_samples disagrees with the sample list");
        }
    } catch (const nlohmann::json::exception& e) {
        throw DatasetError(manifest_path.string() + ": " + e.what());
    } catch (const DatasetError& e) {
        throw DatasetError(manifest_path.string() + ": " + e.what());
    }
    if (m.samples.empty()) throw DatasetError(manifest_path.string() + ": dataset has no samples");
    if (m.dtype != "float32") throw DatasetError(manifest_path.string() + ": unsupported dtype " + m.dtype);
    if (m.image_h == 0 || m.image_w == 0) throw DatasetError(manifest_path.string() + ": empty image shape");
    const std::size_t d = m.index_names.size();

    const std::size_t expected = m.image_h * m.image_w * 4;
    for (const auto& rec : m.samples) {
        const auto path = dir / rec.file;
        if (rec.target.size() != d) {
            throw DatasetError(manifest_path.string() + ": target for " + rec.file + " has " +
                               std::to_string(rec.target.size()) + " entries, expected " + std::to_string(d));
        }
        const auto bytes = read_bytes(path);
        if (bytes.size() != expected) {
            throw DatasetError(path.string() + ": " + std::to_string(bytes.size()) + " bytes, expected " +
                               std::to_string(expected) + " for a " + std::to_string(m.image_h) + "x" +
                               std::to_string(m.image_w) + " float32 image");
        }
        if (fnv1a64(bytes) != rec.checksum) throw DatasetError(path.string() + ": checksum mismatch");
        Tensor<float> img(Shape{1, m.image_h, m.image_w});
        for (std::size_t i = 0; i < img.size(); ++i) {
            std::uint32_t u = 0;
            for (int b = 0; b < 4; ++b) u |= std::uint32_t{bytes[4 * i + static_cast<std::size_t>(b)]} << (8 * b);
            img[i] = std::bit_cast<float>(u);
        }
        data.images.push_back(std::move(img));
    }

    // targets.csv must agree with the manifest.
    const auto csv_path = dir / "targets.csv";
    std::ifstream tf(csv_path);
    if (!tf) throw DatasetError("cannot open " + csv_path.string());
    std::string line;
    std::getline(tf, line);
    std::size_t row = 0;
    while (std::getline(tf, line)) {
        if (line.empty()) continue;
        if (row >= m.samples.size()) throw DatasetError(csv_path.string() + ": more rows than samples");
        std::stringstream ss(line);
        std::string cell;
        std::size_t col = 0;
        while (std::getline(ss, cell, ',')) {
            if (col >= d || std::stod(cell) != m.samples[row].target[col]) {
                throw DatasetError(csv_path.string() + ": row " + std::to_string(row + 1) +
                                   " disagrees with manifest.json");
            }
            ++col;
        }
        if (col != d) throw DatasetError(csv_path.string() + ": row " + std::to_string(row + 1) + " is short");
        ++row;
    }
    if (row != m.samples.size()) throw DatasetError(csv_path.string() + ": fewer rows than samples");
    return data;
}

}  // namespace carn
