#ifndef LEFED_DATASET_HPP
#define LEFED_DATASET_HPP

#include <filesystem>
#include <random>

#include "lefed/volume.hpp"

namespace lefed {

// Dataset layout convention: images/<id>.nii.gz + labels/<id>.nii.gz,
// overridable through the JSON manifest {"cases":[{"id","image","label"?}]}.

struct CaseEntry {
    std::string id;
    std::filesystem::path image;
    std::optional<std::filesystem::path> label;
};

struct Manifest {
    std::vector<CaseEntry> cases;
};

Manifest load_manifest(const std::filesystem::path& path);
void save_manifest(const Manifest& m, const std::filesystem::path& path);

// Reads a NIfTI image; picks up the sibling label file when the path follows
// the images/ + labels/ convention.
std::pair<Volume, std::optional<SegmentationMask>> load_volume(
    const std::filesystem::path& path);

std::pair<Volume, std::optional<SegmentationMask>> load_case(const CaseEntry& c);

struct PatchSample {
    Tensor image;  // (1, d, h, w)
    std::optional<Labels> mask;
    std::string case_id;
    std::array<int64_t, 3> corner{0, 0, 0};
    bool padded = false;

    bool labeled() const { return mask.has_value(); }
};

struct PatchBatch {
    std::vector<PatchSample> labeled;
    std::vector<PatchSample> unlabeled;
};

// Uniform random corner; undersized volumes are padded symmetrically with
// edge values first.
PatchSample sample_patch(const Volume& v, const std::optional<SegmentationMask>& m,
                         const std::array<int64_t, 3>& size, std::mt19937_64& rng,
                         const std::string& case_id = "");

struct SyntheticSpec {
    std::array<int64_t, 3> grid_size{64, 64, 64};
    int num_blobs = 3;
    std::pair<double, double> blob_radius_range{6.0, 14.0};
    double noise_sigma = 0.1;
    uint64_t seed = 0;

    void validate() const {
        for (int64_t g : grid_size)
            if (g < 1) throw std::invalid_argument("SyntheticSpec: empty grid");
        if (num_blobs < 0) throw std::invalid_argument("SyntheticSpec: num_blobs < 0");
        if (!(blob_radius_range.first > 0) ||
            blob_radius_range.second < blob_radius_range.first)
            throw std::invalid_argument("SyntheticSpec: bad radius range");
        const int64_t gmin = std::min({grid_size[0], grid_size[1], grid_size[2]});
        if (blob_radius_range.second * 2 > static_cast<double>(gmin))
            throw std::invalid_argument("SyntheticSpec: radius exceeds grid");
        if (noise_sigma < 0) throw std::invalid_argument("SyntheticSpec: noise_sigma < 0");
    }
};

// Smooth-intensity ellipsoidal blobs plus Gaussian noise; the mask is the
// exact blob support. Deterministic under spec.seed.
std::pair<Volume, SegmentationMask> generate_synthetic_case(const SyntheticSpec& spec);

// round(fraction * n) labeled (at least 1), disjoint and exhaustive.
std::pair<std::vector<std::string>, std::vector<std::string>> split_labeled_unlabeled(
    const std::vector<std::string>& case_ids, double label_fraction, uint64_t seed);

// Without-replacement sampler over a case pool: a shuffled epoch of indices,
// reshuffled when exhausted (or an error when strict_epoch is set).
class EpochSampler {
  public:
    EpochSampler(size_t pool_size, uint64_t seed, bool strict_epoch = false);
    size_t next();
    size_t pool_size() const { return pool_size_; }
    std::string state() const;
    void restore(const std::string& s);

  private:
    void reshuffle();
    size_t pool_size_;
    bool strict_epoch_;
    std::mt19937_64 rng_;
    std::vector<size_t> order_;
    size_t cursor_ = 0;
};

struct BatchConfig {
    int batch_size = 4;  // half labeled, half unlabeled
    std::array<int64_t, 3> patch_size{96, 96, 96};
    bool strict_epoch = false;
};

struct PreprocessedCase {
    std::string id;
    Volume image;
    std::optional<SegmentationMask> mask;
};

class BatchComposer {
  public:
    BatchComposer(std::vector<PreprocessedCase> labeled_pool,
                  std::vector<PreprocessedCase> unlabeled_pool,
                  const BatchConfig& cfg, uint64_t seed);
    PatchBatch next();
    const std::vector<PreprocessedCase>& labeled_pool() const { return labeled_; }
    std::string state() const;
    void restore(const std::string& s);

  private:
    std::vector<PreprocessedCase> labeled_, unlabeled_;
    BatchConfig cfg_;
    EpochSampler labeled_sampler_, unlabeled_sampler_;
    std::mt19937_64 patch_rng_;
};

}  // namespace lefed

#endif
