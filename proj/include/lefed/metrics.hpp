#ifndef LEFED_METRICS_HPP
#define LEFED_METRICS_HPP

#include <filesystem>

#include "lefed/dataset.hpp"
#include "lefed/network.hpp"

namespace lefed {

using BinaryMask = TensorT<uint8_t>;  // rank-3, {0,1}

struct CaseMetrics {
    std::string case_id;
    double dice = 0, jaccard = 0;  // percent
    double asd = 0, hd95 = 0;      // physical units (mm); voxels at 1mm spacing
    bool distances_missing = false;  // an empty surface made asd/hd95 undefined
};

struct MetricsReport {
    std::vector<CaseMetrics> per_case;
    double mean_dice = 0, std_dice = 0;
    double mean_jaccard = 0, std_jaccard = 0;
    double mean_asd = 0, std_asd = 0;
    double mean_hd95 = 0, std_hd95 = 0;
    int missing_distance_cases = 0;
};

// dice = 2|P∩G|/(|P|+|G|), jaccard = |P∩G|/|P∪G|, in percent.
// Both masks empty => 100/100 by convention.
std::pair<double, double> dice_jaccard(const BinaryMask& pred, const BinaryMask& gt);

// Foreground voxels with at least one background 6-neighbor; voxels on the
// volume border count as surface (outside is background).
std::vector<std::array<int64_t, 3>> surface_voxels(const BinaryMask& mask);

// asd = mean of all directed nearest-surface distances pooled both ways;
// hd95 = 95th percentile (nearest-rank) of the same pooled set.
// With pooled_hd95=false, hd95 is max of the two directed percentiles instead.
struct SurfaceDistances {
    double asd = 0, hd95 = 0;
    bool missing = false;
};
SurfaceDistances asd_hd95(const BinaryMask& pred, const BinaryMask& gt,
                          const std::array<double, 3>& spacing,
                          bool pooled_hd95 = true);

// Exact anisotropic squared Euclidean distance transform to the given point
// set, evaluated on the full grid (used by asd_hd95; exposed for tests).
std::vector<double> distance_to_points(const std::vector<std::array<int64_t, 3>>& pts,
                                       const std::vector<int64_t>& shape,
                                       const std::array<double, 3>& spacing);

// Overlapping-window logits averaged per voxel, then argmax. `overlap` is the
// fractional window overlap in [0, 1).
BinaryMask sliding_window_predict(const Model& m, const Volume& v,
                                  const std::array<int64_t, 3>& patch_size,
                                  double overlap = 0.25);

CaseMetrics evaluate_case(const std::string& id, const BinaryMask& pred,
                          const SegmentationMask& gt,
                          const std::array<double, 3>& spacing);

MetricsReport aggregate(std::vector<CaseMetrics> per_case);

MetricsReport evaluate(const Model& m, const std::vector<PreprocessedCase>& cases,
                       const std::array<int64_t, 3>& patch_size,
                       double overlap = 0.25);

void write_report_json(const MetricsReport& r, const std::filesystem::path& path);
void write_report_csv(const MetricsReport& r, const std::filesystem::path& path);
MetricsReport read_report_json(const std::filesystem::path& path);

BinaryMask mask_from_labels(const Labels& l);

}  // namespace lefed

#endif
