#ifndef LEFED_NIFTI_HPP
#define LEFED_NIFTI_HPP

#include <filesystem>
#include <string>

#include "lefed/volume.hpp"

namespace lefed {

// Minimal NIfTI-1 reader/writer (.nii and .nii.gz, native byte order).

struct NiftiData {
    std::vector<int64_t> dims;  // effective dims, trailing singletons dropped
    std::array<double, 3> spacing{1, 1, 1};
    std::array<double, 3> origin{0, 0, 0};
    std::vector<float> values;  // x-fastest, as stored in the file
};

NiftiData read_nifti(const std::filesystem::path& path);

// Rank-3 payload as a Volume (data reindexed so dim 0 is slowest).
Volume nifti_to_volume(const NiftiData& n);
Labels nifti_to_labels(const NiftiData& n);

void write_nifti(const std::filesystem::path& path, const Tensor& data,
                 const std::array<double, 3>& spacing,
                 const std::array<double, 3>& origin, bool as_labels = false);

inline void write_nifti(const std::filesystem::path& path, const Volume& v) {
    write_nifti(path, v.data, v.spacing, v.origin, false);
}
void write_nifti(const std::filesystem::path& path, const SegmentationMask& m,
                 const std::array<double, 3>& spacing,
                 const std::array<double, 3>& origin);

}  // namespace lefed

#endif
