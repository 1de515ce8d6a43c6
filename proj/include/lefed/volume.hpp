#ifndef LEFED_VOLUME_HPP
#define LEFED_VOLUME_HPP

#include <array>
#include <optional>

#include "lefed/losses.hpp"  // Labels
#include "lefed/tensor.hpp"

namespace lefed {

struct Volume {
    Tensor data;  // rank-3 scalar grid
    std::array<double, 3> spacing{1, 1, 1};  // mm
    std::array<double, 3> origin{0, 0, 0};   // informational

    void validate() const {
        if (data.rank() != 3) throw std::invalid_argument("Volume: rank must be 3");
        for (int i = 0; i < 3; ++i) {
            if (data.dim(i) < 1) throw std::invalid_argument("Volume: empty dim");
            if (!(spacing[static_cast<size_t>(i)] > 0))
                throw std::invalid_argument("Volume: spacing must be > 0");
        }
    }
};

struct SegmentationMask {
    Labels labels;  // rank-3 class ids
    int num_classes = 2;

    void validate() const {
        if (labels.rank() != 3)
            throw std::invalid_argument("SegmentationMask: rank must be 3");
        if (num_classes < 2)
            throw std::invalid_argument("SegmentationMask: num_classes < 2");
        for (int64_t i = 0; i < labels.numel(); ++i)
            if (labels[i] < 0 || labels[i] >= num_classes)
                throw std::invalid_argument("SegmentationMask: label out of range");
    }
    void validate_paired(const Volume& v) const {
        validate();
        if (labels.shape != v.data.shape)
            throw std::invalid_argument("SegmentationMask: shape differs from volume");
    }
};

struct PreprocessSpec {
    int crop_margin_voxels = 25;
    std::array<double, 3> target_spacing{1.0, 1.0, 1.0};
    std::optional<std::pair<double, double>> hu_clip;  // CT only
    bool normalize = true;

    void validate() const {
        if (crop_margin_voxels < 0)
            throw std::invalid_argument("PreprocessSpec: negative crop margin");
        for (double s : target_spacing)
            if (!(s > 0)) throw std::invalid_argument("PreprocessSpec: target spacing <= 0");
        if (hu_clip && !(hu_clip->first < hu_clip->second))
            throw std::invalid_argument("PreprocessSpec: hu_clip low >= high");
    }
};

Volume clip_intensities(const Volume& v, float low, float high);

std::pair<Volume, SegmentationMask> crop_foreground_with_margin(
    const Volume& v, const SegmentationMask& m, int margin);

std::pair<Volume, std::optional<SegmentationMask>> resample_isotropic(
    const Volume& v, const std::optional<SegmentationMask>& m,
    const std::array<double, 3>& target);

Volume normalize_zscore(const Volume& v);

// clip (if configured) -> crop -> resample -> normalize
std::pair<Volume, std::optional<SegmentationMask>> preprocess_case(
    const Volume& v, const std::optional<SegmentationMask>& m,
    const PreprocessSpec& spec);

}  // namespace lefed

#endif
