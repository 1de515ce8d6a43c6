#include "lefed/volume.hpp"

#include <cmath>

namespace lefed {

Volume clip_intensities(const Volume& v, float low, float high) {
    v.validate();
    if (!(low < high)) throw std::invalid_argument("clip_intensities: low >= high");
    Volume out = v;
    for (auto& x : out.data.data) x = std::min(high, std::max(low, x));
    return out;
}

std::pair<Volume, SegmentationMask> crop_foreground_with_margin(
    const Volume& v, const SegmentationMask& m, int margin) {
    v.validate();
    m.validate_paired(v);
    if (margin < 0) throw std::invalid_argument("crop: negative margin");
    const auto& sh = v.data.shape;
    int64_t lo[3] = {sh[0], sh[1], sh[2]};
    int64_t hi[3] = {-1, -1, -1};
    for (int64_t i = 0; i < sh[0]; ++i)
        for (int64_t j = 0; j < sh[1]; ++j)
            for (int64_t k = 0; k < sh[2]; ++k)
                if (m.labels.at3(i, j, k) != 0) {
                    const int64_t idx[3] = {i, j, k};
                    for (int a = 0; a < 3; ++a) {
                        lo[a] = std::min(lo[a], idx[a]);
                        hi[a] = std::max(hi[a], idx[a]);
                    }
                }
    if (hi[0] < 0)
        throw std::runtime_error("crop_foreground_with_margin: empty foreground");
    std::vector<int64_t> osh(3);
    for (int a = 0; a < 3; ++a) {
        lo[a] = std::max<int64_t>(0, lo[a] - margin);
        hi[a] = std::min<int64_t>(sh[static_cast<size_t>(a)] - 1, hi[a] + margin);
        osh[static_cast<size_t>(a)] = hi[a] - lo[a] + 1;
    }
    Volume ov;
    ov.spacing = v.spacing;
    ov.origin = {v.origin[0] + lo[0] * v.spacing[0],
                 v.origin[1] + lo[1] * v.spacing[1],
                 v.origin[2] + lo[2] * v.spacing[2]};
    ov.data = Tensor(osh);
    SegmentationMask om;
    om.num_classes = m.num_classes;
    om.labels = Labels(osh);
    for (int64_t i = 0; i < osh[0]; ++i)
        for (int64_t j = 0; j < osh[1]; ++j)
            for (int64_t k = 0; k < osh[2]; ++k) {
                ov.data.at3(i, j, k) = v.data.at3(i + lo[0], j + lo[1], k + lo[2]);
                om.labels.at3(i, j, k) = m.labels.at3(i + lo[0], j + lo[1], k + lo[2]);
            }
    return {std::move(ov), std::move(om)};
}

std::pair<Volume, std::optional<SegmentationMask>> resample_isotropic(
    const Volume& v, const std::optional<SegmentationMask>& m,
    const std::array<double, 3>& target) {
    v.validate();
    for (double t : target)
        if (!(t > 0)) throw std::invalid_argument("resample: target spacing <= 0");
    if (m) m->validate_paired(v);
    const auto& sh = v.data.shape;
    std::vector<int64_t> osh(3);
    double scale[3];
    bool identity = true;
    for (int a = 0; a < 3; ++a) {
        osh[static_cast<size_t>(a)] = std::max<int64_t>(
            1, static_cast<int64_t>(std::llround(
                   static_cast<double>(sh[static_cast<size_t>(a)]) *
                   v.spacing[static_cast<size_t>(a)] / target[static_cast<size_t>(a)])));
        scale[a] = target[static_cast<size_t>(a)] / v.spacing[static_cast<size_t>(a)];
        identity = identity && osh[static_cast<size_t>(a)] == sh[static_cast<size_t>(a)] &&
                   scale[a] == 1.0;
    }
    Volume ov;
    ov.spacing = target;
    ov.origin = v.origin;
    if (identity) {
        ov.data = v.data;  // bit-identical
        return {std::move(ov), m};
    }
    ov.data = Tensor(osh);
    // output voxel i samples input coordinate i * (target / in_spacing),
    // clamped; trilinear for the image, nearest-neighbor for the mask
    auto in_coord = [&](int a, int64_t i) {
        double c = static_cast<double>(i) * scale[a];
        return std::min(c, static_cast<double>(sh[static_cast<size_t>(a)] - 1));
    };
    for (int64_t i = 0; i < osh[0]; ++i)
        for (int64_t j = 0; j < osh[1]; ++j)
            for (int64_t k = 0; k < osh[2]; ++k) {
                const double c[3] = {in_coord(0, i), in_coord(1, j), in_coord(2, k)};
                int64_t lo[3];
                double f[3];
                for (int a = 0; a < 3; ++a) {
                    lo[a] = static_cast<int64_t>(c[a]);
                    f[a] = c[a] - static_cast<double>(lo[a]);
                }
                double acc = 0;
                for (int bi = 0; bi < 2; ++bi)
                    for (int bj = 0; bj < 2; ++bj)
                        for (int bk = 0; bk < 2; ++bk) {
                            const double w = (bi ? f[0] : 1 - f[0]) *
                                             (bj ? f[1] : 1 - f[1]) *
                                             (bk ? f[2] : 1 - f[2]);
                            if (w == 0) continue;
                            acc += w * v.data.at3(std::min(lo[0] + bi, sh[0] - 1),
                                                  std::min(lo[1] + bj, sh[1] - 1),
                                                  std::min(lo[2] + bk, sh[2] - 1));
                        }
                ov.data.at3(i, j, k) = static_cast<float>(acc);
            }
    std::optional<SegmentationMask> om;
    if (m) {
        om.emplace();
        om->num_classes = m->num_classes;
        om->labels = Labels(osh);
        for (int64_t i = 0; i < osh[0]; ++i)
            for (int64_t j = 0; j < osh[1]; ++j)
                for (int64_t k = 0; k < osh[2]; ++k)
                    om->labels.at3(i, j, k) = m->labels.at3(
                        std::min<int64_t>(std::llround(in_coord(0, i)), sh[0] - 1),
                        std::min<int64_t>(std::llround(in_coord(1, j)), sh[1] - 1),
                        std::min<int64_t>(std::llround(in_coord(2, k)), sh[2] - 1));
    }
    return {std::move(ov), std::move(om)};
}

Volume normalize_zscore(const Volume& v) {
    v.validate();
    if (v.data.numel() < 2)
        throw std::invalid_argument("normalize_zscore: needs > 1 voxel");
    double mean = 0;
    for (float x : v.data.data) mean += x;
    mean /= static_cast<double>(v.data.numel());
    double var = 0;
    for (float x : v.data.data) {
        const double d = x - mean;
        var += d * d;
    }
    var /= static_cast<double>(v.data.numel());
    if (var <= 0) throw std::runtime_error("normalize_zscore: constant volume");
    const double inv = 1.0 / std::sqrt(var);
    Volume out = v;
    for (auto& x : out.data.data)
        x = static_cast<float>((static_cast<double>(x) - mean) * inv);
    return out;
}

std::pair<Volume, std::optional<SegmentationMask>> preprocess_case(
    const Volume& v, const std::optional<SegmentationMask>& m,
    const PreprocessSpec& spec) {
    spec.validate();
    Volume img = v;
    std::optional<SegmentationMask> mask = m;
    if (spec.hu_clip)
        img = clip_intensities(img, static_cast<float>(spec.hu_clip->first),
                               static_cast<float>(spec.hu_clip->second));
    if (mask) {
        auto [cv, cm] = crop_foreground_with_margin(img, *mask, spec.crop_margin_voxels);
        img = std::move(cv);
        mask = std::move(cm);
    }
    auto [rv, rm] = resample_isotropic(img, mask, spec.target_spacing);
    img = std::move(rv);
    mask = std::move(rm);
    if (spec.normalize) img = normalize_zscore(img);
    return {std::move(img), std::move(mask)};
}

}  // namespace lefed
