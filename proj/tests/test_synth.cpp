#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>

#include <json.hpp>

#include "carn/loss.hpp"
#include "carn/synth.hpp"
#include "oracles.hpp"

using namespace carn;
namespace fs = std::filesystem;

namespace {

std::vector<IndexVector> latent_targets(std::size_t n, std::size_t m, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> angle(-std::numbers::pi, std::numbers::pi);
    std::vector<IndexVector> out;
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> z(m);
        for (auto& v : z) v = angle(rng);
        out.push_back(latent_to_indices(z));
    }
    return out;
}

fs::path scratch(const std::string& name) {
    const auto p = fs::temp_directory_path() / ("carn_test_" + name);
    fs::remove_all(p);
    return p;
}

PhantomSpec clean_spec(std::size_t h, std::size_t w) {
    auto s = PhantomSpec::at_resolution(h, w);
    s.noise_sigma = 0;
    s.ambiguity_prob = 0;
    return s;
}

}  // namespace

TEST(Synth, IndexLayout) {
    const auto& n = index_names();
    EXPECT_EQ(n[0], "idh_L1L2_a");
    EXPECT_EQ(n[14], "idh_L5S1_p");
    EXPECT_EQ(n[15], "vbh_L1_a");
    EXPECT_EQ(n[29], "vbh_L5_p");
    EXPECT_TRUE(is_disc_index(14));
    EXPECT_FALSE(is_disc_index(15));
}

TEST(Synth, ZeroLatentGivesTheBaselineSpine) {
    const auto y = latent_to_indices(std::vector<double>(4, 0.0));
    EXPECT_DOUBLE_EQ(y[0], 8.0);
    EXPECT_DOUBLE_EQ(y[13], 11.0);
    EXPECT_DOUBLE_EQ(y[15], 25.0);
    EXPECT_DOUBLE_EQ(y[29], 26.5);
    // same baseline whatever the latent dimension
    EXPECT_EQ(latent_to_indices(std::vector<double>(7, 0.0)), y);
}

TEST(Synth, CenteredTargetsHaveLowRank) {
    for (std::size_t m : {1u, 2u, 4u, 6u}) {
        const auto ys = latent_targets(200, m, 40 + m);
        const auto sv = oracle::centered_singular_values(ys);
        EXPECT_LE(oracle::significant(sv, 1e-8), m + 1) << "m=" << m;
        EXPECT_GE(oracle::significant(sv, 1e-8), m) << "m=" << m;
    }
}

TEST(Synth, HeightsStayInPlausibleRanges) {
    const auto ys = latent_targets(5000, 4, 41);
    for (const auto& y : ys)
        for (std::size_t i = 0; i < 30; ++i) {
            EXPECT_GT(y[i], is_disc_index(i) ? 3.0 : 15.0);
            EXPECT_LT(y[i], is_disc_index(i) ? kMaxDiscHeightMm : kMaxBodyHeightMm);
        }
}

TEST(Synth, LatentDimensionLimits) {
    EXPECT_THROW(latent_to_indices(std::vector<double>{}), ShapeError);
    EXPECT_THROW(latent_to_indices(std::vector<double>(30, 0.1)), ShapeError);
    EXPECT_NO_THROW(latent_to_indices(std::vector<double>(29, 0.1)));
}

TEST(Synth, ReconstructionBeatsNearestNeighbor) {
    const auto ys = latent_targets(200, 4, 42);
    const auto table = precompute_reconstructions(ys, 5);
    double recon = 0, nn = 0;
    for (std::size_t i = 0; i < ys.size(); ++i) {
        const auto& nearest = ys[oracle::knn(ys, i, 1)[0]];
        double r = 0, d = 0;
        for (std::size_t j = 0; j < 30; ++j) {
            r += std::pow(ys[i][j] - table.y_tilde[i][j], 2);
            d += std::pow(ys[i][j] - nearest[j], 2);
        }
        recon += std::sqrt(r);
        nn += std::sqrt(d);
    }
    EXPECT_LT(recon, nn);
}

TEST(Synth, RenderIsDeterministicAndInUnitRange) {
    const auto y = latent_to_indices(std::vector<double>{0.3, -1.0, 2.0, 0.5});
    auto spec = PhantomSpec::at_resolution(128, 64);
    spec.ambiguity_prob = 0.5;
    const auto a = render_phantom(y, spec, 9), b = render_phantom(y, spec, 9), c = render_phantom(y, spec, 10);
    EXPECT_EQ(a, b);
    EXPECT_NE(a, c);
    EXPECT_EQ(a.shape(), (Shape{1, 128, 64}));
    for (float v : a.storage()) {
        EXPECT_GE(v, 0.f);
        EXPECT_LE(v, 1.f);
    }
}

TEST(Synth, ThresholdScanRecoversHeights) {
    const auto spec = clean_spec(512, 256);
    const auto cols = phantom_columns(spec.image_w);
    const std::size_t at[3] = {cols.anterior, cols.middle, cols.posterior};
    const auto ys = latent_targets(10, 4, 43);
    for (std::size_t s = 0; s < ys.size(); ++s) {
        const auto img = render_phantom(ys[s], spec, 100 + s);
        for (std::size_t p = 0; p < 3; ++p) {
            const auto runs = oracle::band_runs(img.storage(), spec.image_h, spec.image_w, at[p], 0.2f, 0.5f);
            ASSERT_EQ(runs.size(), 10u);
            for (std::size_t l = 0; l < kNumLevels; ++l) {
                const double body = static_cast<double>(runs[2 * l]) * spec.pixel_spacing;
                const double disc = static_cast<double>(runs[2 * l + 1]) * spec.pixel_spacing;
                EXPECT_LT(std::abs(body - ys[s][kBodyOffset + 3 * l + p]), spec.pixel_spacing);
                EXPECT_LT(std::abs(disc - ys[s][kDiscOffset + 3 * l + p]), spec.pixel_spacing);
            }
        }
    }
}

TEST(Synth, RenderRejectsImpossibleGeometry) {
    auto y = latent_to_indices(std::vector<double>(4, 0.0));
    const auto spec = clean_spec(128, 64);  // 1.875 mm per pixel
    auto thin = y;
    thin[3] = 3.0;
    EXPECT_THROW(render_phantom(thin, spec, 1), ShapeError);
    auto tiny = clean_spec(128, 64);
    tiny.pixel_spacing = 0.5;  // 64 mm field of view
    EXPECT_THROW(render_phantom(y, tiny, 1), ShapeError);
    EXPECT_THROW(render_phantom(std::vector<double>(29, 10.0), spec, 1), ShapeError);
}

TEST(Synth, DerivedSeedsDiffer) {
    EXPECT_NE(derive_seed(1, 1, 0), derive_seed(1, 1, 1));
    EXPECT_NE(derive_seed(1, 1, 0), derive_seed(1, 2, 0));
    EXPECT_NE(derive_seed(1, 1, 0), derive_seed(2, 1, 0));
    EXPECT_EQ(derive_seed(5, 6, 7), derive_seed(5, 6, 7));
}

TEST(Dataset, GenerateReadRoundTripIsBitwise) {
    const auto dir = scratch("ds_roundtrip");
    const auto spec = PhantomSpec::at_resolution(128, 64);
    const auto m = generate_dataset(dir, 20, spec, 77, 0.25);
    EXPECT_EQ(m.split(true).size(), 5u);
    EXPECT_EQ(m.split(false).size(), 15u);
    const auto d = read_dataset(dir);
    ASSERT_EQ(d.images.size(), 20u);
    for (std::size_t i = 0; i < 20; ++i) {
        EXPECT_EQ(d.manifest.samples[i].target, m.samples[i].target);
        EXPECT_EQ(d.manifest.samples[i].test, m.samples[i].test);
        EXPECT_EQ(d.images[i], render_phantom(m.samples[i].target, spec, derive_seed(77, 2, i)));
    }
    EXPECT_EQ(d.manifest.pixel_spacing, spec.pixel_spacing);

    // writing what was read reproduces every file byte for byte
    const auto dir2 = scratch("ds_roundtrip2");
    write_dataset(dir2, d);
    auto slurp = [](const fs::path& p) {
        std::ifstream f(p, std::ios::binary);
        return std::string(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
    };
    for (const auto* f : {"manifest.json", "targets.csv", "images/000007.f32"}) EXPECT_EQ(slurp(dir / f), slurp(dir2 / f)) << f;

    // same seed, same dataset
    const auto dir3 = scratch("ds_roundtrip3");
    generate_dataset(dir3, 20, spec, 77, 0.25);
    EXPECT_EQ(slurp(dir / "manifest.json"), slurp(dir3 / "manifest.json"));
    for (const auto& p : {dir, dir2, dir3}) fs::remove_all(p);
}

TEST(Dataset, TruncatedImageIsNamedInTheError) {
    const auto dir = scratch("ds_trunc");
    generate_dataset(dir, 10, PhantomSpec::at_resolution(128, 64), 1);
    fs::resize_file(dir / "images/000003.f32", 100);
    try {
        read_dataset(dir);
        FAIL() << "expected DatasetError";
    } catch (const DatasetError& e) {
        EXPECT_NE(std::string(e.what()).find("000003.f32"), std::string::npos) << e.what();
    }
    fs::remove_all(dir);
}

TEST(Dataset, CorruptedImageFailsChecksum) {
    const auto dir = scratch("ds_corrupt");
    generate_dataset(dir, 10, PhantomSpec::at_resolution(128, 64), 1);
    {
        std::fstream f(dir / "images/000002.f32", std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(40);
        f.put('\x7f');
    }
    EXPECT_THROW(read_dataset(dir), DatasetError);
    fs::remove_all(dir);
}

TEST(Dataset, EmptyManifestIsRejected) {
    const auto dir = scratch("ds_empty");
    generate_dataset(dir, 10, PhantomSpec::at_resolution(128, 64), 1);
    nlohmann::json j;
    {
        std::ifstream f(dir / "manifest.json");
        j = nlohmann::json::parse(f);
    }
    j["samples"] = nlohmann::json::array();
    j["num_samples"] = 0;
    {
        std::ofstream f(dir / "manifest.json", std::ios::trunc);
        f << j.dump();
    }
    EXPECT_THROW(read_dataset(dir), DatasetError);
    EXPECT_THROW(read_dataset(dir / "missing"), DatasetError);
    fs::remove_all(dir);
}

TEST(Dataset, TooFewSamplesIsRejected) {
    const auto dir = scratch("ds_small");
    EXPECT_THROW(generate_dataset(dir, 9, PhantomSpec::at_resolution(128, 64), 1), DatasetError);
    fs::remove_all(dir);
}
