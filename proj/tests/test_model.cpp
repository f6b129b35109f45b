#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>

#include "carn/gradcheck.hpp"
#include "carn/model.hpp"

using namespace carn;

namespace {

std::vector<std::pair<std::string, Shape>> shapes_of(const CARNConfig& cfg, std::size_t batch) {
    auto m = build_model<float>(cfg, 1);
    auto r = forward_traced(m, Var<float>::constant(Tensor<float>({batch, 1, cfg.input_h, cfg.input_w}, 0.5f)),
                            Mode::infer);
    std::vector<std::pair<std::string, Shape>> out;
    for (auto& l : r.trace) out.emplace_back(l.name, l.shape);
    return out;
}

CARNConfig small_config() {
    CARNConfig c;
    c.input_h = 128;
    c.input_w = 64;
    c.stem_channels = 4;
    c.au_cl_schedule = {2, 2, 4, 4, 4, 4};
    c.head_channels = 8;
    return c;
}

}  // namespace

TEST(Model, FullSizeShapeTrace) {
    const CARNConfig cfg;  // 512x256
    const auto t = shapes_of(cfg, 1);
    ASSERT_EQ(t.front().first, "stem");
    EXPECT_EQ(t.front().second, (Shape{1, cfg.stem_channels, 256, 128}));
    const auto chans = cfg.block_output_channels();
    std::size_t h = 256, w = 128, unit = 0;
    for (const auto& [name, shape] : t) {
        if (name.rfind("au", 0) == 0) {
            EXPECT_EQ(shape, (Shape{1, chans[unit], h, w})) << name;
            ++unit;
        } else if (name.rfind("pool", 0) == 0) {
            h /= 2;
            w /= 2;
            EXPECT_EQ(shape, (Shape{1, chans[unit - 1], h, w})) << name;
        }
    }
    EXPECT_EQ(unit, kNumUnits);
    const auto mix = std::find_if(t.begin(), t.end(), [](const auto& l) { return l.first == "mix"; });
    ASSERT_NE(mix, t.end());
    EXPECT_EQ(mix->second, (Shape{1, cfg.head_channels, 8, 4}));
    EXPECT_EQ(t.back().first, "head");
    EXPECT_EQ(t.back().second, (Shape{1, 30}));
}

TEST(Model, BaselineMatchesChannelCountsLayerByLayer) {
    auto carn_cfg = small_config();
    auto cnn_cfg = carn_cfg;
    cnn_cfg.variant = Variant::cnn_baseline;
    const auto a = shapes_of(carn_cfg, 2), b = shapes_of(cnn_cfg, 2);
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].second, b[i].second) << a[i].first << " vs " << b[i].first;

    auto m = build_model<float>(cnn_cfg, 3);
    EXPECT_TRUE(m.units.empty());
    ASSERT_EQ(m.plain.size(), kNumUnits);
    const auto chans = cnn_cfg.block_output_channels();
    for (std::size_t i = 0; i < kNumUnits; ++i) EXPECT_EQ(m.plain[i].conv.kernel.value().dim(0), chans[i]);
}

TEST(Model, ParameterListing) {
    auto m = build_model<float>(small_config(), 3);
    std::size_t count = 0, regularized = 0;
    for (const auto& p : m.parameters()) {
        count += p.var.value().size();
        if (p.regularized) {
            ++regularized;
            EXPECT_TRUE(p.name.find("kernel") != std::string::npos || p.name == "head.weight") << p.name;
        }
    }
    EXPECT_EQ(count, m.parameter_count());
    EXPECT_EQ(regularized, m.regularized_weights().size());
    // stem, 6 x (linear, gate), mix, head
    EXPECT_EQ(regularized, 15u);
    EXPECT_EQ(m.buffers().size(), 2u * 12u);
}

TEST(Model, ConfigValidation) {
    CARNConfig c;
    EXPECT_NO_THROW(c.validate());
    auto bad = c;
    bad.input_h = 100;
    EXPECT_THROW(bad.validate(), ConfigError);
    bad = c;
    bad.input_w = 0;
    EXPECT_THROW(bad.validate(), ConfigError);
    bad = c;
    bad.au_cl_schedule[3] = 0;
    EXPECT_THROW(bad.validate(), ConfigError);
    bad = c;
    bad.gate_kernel = 4;
    EXPECT_THROW(bad.validate(), ConfigError);
    EXPECT_THROW(parse_variant("resnet"), ConfigError);
    EXPECT_EQ(parse_variant(to_string(Variant::cnn_baseline)), Variant::cnn_baseline);

    KeyValues kv;
    auto custom = small_config();
    custom.variant = Variant::cnn_baseline;
    custom.write(kv);
    EXPECT_EQ(CARNConfig::read(kv), custom);
    kv.set("au_cl_schedule", "1,2,3");
    EXPECT_THROW(CARNConfig::read(kv), ConfigError);
}

TEST(Model, RejectsWrongInputShape) {
    auto m = build_model<float>(small_config(), 1);
    EXPECT_THROW(forward(m, Var<float>::constant(Tensor<float>({2, 1, 64, 64})), Mode::infer), ShapeError);
    EXPECT_THROW(forward(m, Var<float>::constant(Tensor<float>({2, 3, 128, 64})), Mode::infer), ShapeError);
}

TEST(Model, SameSeedSameWeights) {
    const auto a = to_archive(build_model<float>(small_config(), 42));
    const auto b = to_archive(build_model<float>(small_config(), 42));
    const auto c = to_archive(build_model<float>(small_config(), 43));
    EXPECT_EQ(a.encode(), b.encode());
    EXPECT_NE(a.encode(), c.encode());
}

TEST(Model, CheckpointRoundTripIsBitwise) {
    auto cfg = small_config();
    auto m = build_model<float>(cfg, 5);
    // move the running moments away from their initial values
    forward(m, Var<float>::constant(Tensor<float>({2, 1, 128, 64}, 0.3f)), Mode::train);
    const auto path = std::filesystem::temp_directory_path() / "carn_test_ckpt.carn";
    to_archive(m).write(path);
    auto back = from_archive<float>(Archive::read(path));
    std::filesystem::remove(path);
    EXPECT_EQ(back.config, cfg);
    EXPECT_EQ(to_archive(back).encode(), to_archive(m).encode());

    const auto x = Var<float>::constant(Tensor<float>({2, 1, 128, 64}, 0.7f));
    EXPECT_EQ(forward(m, x, Mode::infer).value(), forward(back, x, Mode::infer).value());

    // double copy of a float model converts back without loss
    auto wide = from_archive<double>(to_archive(m));
    EXPECT_EQ(to_archive(from_archive<float>(to_archive(wide))).encode(), to_archive(m).encode());
}

TEST(Model, CorruptCheckpointIsRejected) {
    auto bytes = to_archive(build_model<float>(small_config(), 5)).encode();
    bytes[bytes.size() / 2] ^= 0x40;
    EXPECT_THROW(Archive::decode(bytes), FormatError);
    EXPECT_THROW(from_archive<float>(Archive("something-else")), FormatError);
}

TEST(Model, TinyConfigGradcheck) {
    const auto report = gradcheck("model");
    for (const auto& e : report.entries) EXPECT_TRUE(e.passed) << e.scope << " " << e.name << " " << e.max_rel_error;
    EXPECT_LT(report.worst(), 1e-4);
}
