#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "carn/lae.hpp"
#include "carn/tensor.hpp"

namespace carn {

// Layout of the 30-entry index vector: five disc triples (L1/L2 .. L5/S1,
// top to bottom), then five vertebral-body triples (L1 .. L5). Each triple is
// (anterior, middle, posterior) height in millimetres.
inline constexpr std::size_t kNumLevels = 5;
inline constexpr std::size_t kDiscOffset = 0;
inline constexpr std::size_t kBodyOffset = 15;
inline constexpr double kMaxDiscHeightMm = 25.0;
inline constexpr double kMaxBodyHeightMm = 40.0;
inline constexpr double kFullSizePixelSpacingMm = 0.4688;

/// "idh_L1L2_a", ..., "vbh_L5_p"
const std::array<std::string, 30>& index_names();

bool is_disc_index(std::size_t i);

struct PhantomSpec {
    std::size_t latent_dim = 4;
    double pixel_spacing = kFullSizePixelSpacingMm;  // mm per pixel
    std::size_t image_h = 512;
    std::size_t image_w = 256;
    double noise_sigma = 0.03;
    double ambiguity_prob = 0.15;

    /// Same field of view as a 512x256 crop at 0.4688 mm/pixel, resampled to
    /// the given size.
    static PhantomSpec at_resolution(std::size_t h, std::size_t w);
};

/// Columns at which the anterior, middle and posterior heights are drawn
/// exactly. The vertebral column occupies [anterior, posterior].
struct PhantomColumns {
    std::size_t anterior, middle, posterior;
};
PhantomColumns phantom_columns(std::size_t image_w);

inline constexpr float kBackgroundIntensity = 0.1f;
inline constexpr float kDiscIntensity = 0.3f;
inline constexpr float kBodyIntensity = 0.7f;
inline constexpr float kBlurredDiscIntensity = 0.45f;

/// Smooth map from an m-dimensional latent to 30 heights. The output is an
/// affine image of m+1 bounded features of z (sinusoids plus one coupled
/// term), so centered outputs have rank at most m+1. Requires m < 30.
IndexVector latent_to_indices(std::span<const double> z);

/// Renders a sagittal phantom [1,H,W] with intensities in [0,1]: five bright
/// vertebral bodies above five darker discs, then a bright sacrum, on a dark
/// background. Band heights at the anterior/middle/posterior columns equal
/// the target heights; vertical placement and tilt vary with `seed`.
/// Throws ShapeError if the stack does not fit or a height is under 2 px.
Tensor<float> render_phantom(std::span<const double> heights, const PhantomSpec& spec,
                             std::uint64_t seed);

/// Per-sample stream derivation.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index);

struct SampleRecord {
    std::string file;  // relative to the dataset directory
    IndexVector target;
    bool test = false;
    std::uint64_t checksum = 0;  // FNV-1a of the raw image bytes
};

struct DatasetManifest {
    int version = 1;
    std::size_t image_h = 0, image_w = 0;
    double pixel_spacing = 0;
    std::string dtype = "float32";
    std::vector<std::string> index_names;
    std::vector<SampleRecord> samples;
    // Generator provenance; informational.
    std::uint64_t seed = 0;
    PhantomSpec phantom;

    std::size_t size() const { return samples.size(); }
    std::vector<std::size_t> split(bool test) const;
};

struct Dataset {
    DatasetManifest manifest;
    std::vector<Tensor<float>> images;  // each [1,H,W]

    std::vector<IndexVector> targets(std::span<const std::size_t> ids) const;
};

class DatasetError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Draws N i.i.d. latents, renders each phantom and writes the dataset
/// directory: manifest.json, targets.csv and images/<id>.f32 (raw
/// little-endian float32, row-major). Rejects N < 10.
DatasetManifest generate_dataset(const std::filesystem::path& dir, std::size_t n,
                                 const PhantomSpec& spec, std::uint64_t seed,
                                 double test_fraction = 0.2);

/// Writes an in-memory dataset in the same layout.
void write_dataset(const std::filesystem::path& dir, const Dataset& data);

/// Loads and validates a dataset directory. Errors name the offending file.
Dataset read_dataset(const std::filesystem::path& dir);

}  // namespace carn
