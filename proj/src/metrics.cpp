#include "lefed/metrics.hpp"

#include <fstream>

#include <json.hpp>

namespace lefed {

using nlohmann::json;

BinaryMask mask_from_labels(const Labels& l) {
    BinaryMask m(l.shape);
    for (int64_t i = 0; i < l.numel(); ++i) m[i] = l[i] != 0 ? 1 : 0;
    return m;
}

std::pair<double, double> dice_jaccard(const BinaryMask& pred, const BinaryMask& gt) {
    check_same_shape(pred, gt, "dice_jaccard");
    int64_t np = 0, ng = 0, inter = 0;
    for (int64_t i = 0; i < pred.numel(); ++i) {
        np += pred[i];
        ng += gt[i];
        inter += pred[i] & gt[i];
    }
    if (np == 0 && ng == 0) return {100.0, 100.0};
    const double dice = 200.0 * static_cast<double>(inter) / static_cast<double>(np + ng);
    const double uni = static_cast<double>(np + ng - inter);
    const double jac = uni > 0 ? 100.0 * static_cast<double>(inter) / uni : 100.0;
    return {dice, jac};
}

std::vector<std::array<int64_t, 3>> surface_voxels(const BinaryMask& mask) {
    if (mask.rank() != 3) throw std::invalid_argument("surface_voxels: rank-3 only");
    const auto& sh = mask.shape;
    std::vector<std::array<int64_t, 3>> out;
    auto bg = [&](int64_t i, int64_t j, int64_t k) {
        if (i < 0 || j < 0 || k < 0 || i >= sh[0] || j >= sh[1] || k >= sh[2])
            return true;  // outside the volume counts as background
        return mask.at3(i, j, k) == 0;
    };
    for (int64_t i = 0; i < sh[0]; ++i)
        for (int64_t j = 0; j < sh[1]; ++j)
            for (int64_t k = 0; k < sh[2]; ++k) {
                if (mask.at3(i, j, k) == 0) continue;
                if (bg(i - 1, j, k) || bg(i + 1, j, k) || bg(i, j - 1, k) ||
                    bg(i, j + 1, k) || bg(i, j, k - 1) || bg(i, j, k + 1))
                    out.push_back({i, j, k});
            }
    return out;
}

namespace {

constexpr double kInf = 1e30;

// 1D squared distance transform (lower envelope of parabolas) at sample
// positions i * s.
void dt1d(double* f, int64_t n, int64_t stride, double s) {
    if (n == 1) return;
    static thread_local std::vector<int64_t> v;
    static thread_local std::vector<double> z, out;
    v.assign(static_cast<size_t>(n), 0);
    z.assign(static_cast<size_t>(n + 1), 0);
    out.assign(static_cast<size_t>(n), 0);
    auto F = [&](int64_t i) -> double& { return f[i * stride]; };
    int64_t k = 0;
    v[0] = 0;
    z[0] = -kInf;
    z[1] = kInf;
    for (int64_t q = 1; q < n; ++q) {
        const double qs = static_cast<double>(q) * s;
        while (true) {
            const double vs = static_cast<double>(v[static_cast<size_t>(k)]) * s;
            const double inter =
                ((F(q) + qs * qs) - (F(v[static_cast<size_t>(k)]) + vs * vs)) /
                (2 * qs - 2 * vs);
            if (inter <= z[static_cast<size_t>(k)] && k > 0) {
                --k;
                continue;
            }
            ++k;
            v[static_cast<size_t>(k)] = q;
            z[static_cast<size_t>(k)] = inter;
            z[static_cast<size_t>(k + 1)] = kInf;
            break;
        }
    }
    k = 0;
    for (int64_t q = 0; q < n; ++q) {
        const double qs = static_cast<double>(q) * s;
        while (z[static_cast<size_t>(k + 1)] < qs) ++k;
        const double vs = static_cast<double>(v[static_cast<size_t>(k)]) * s;
        out[static_cast<size_t>(q)] = (qs - vs) * (qs - vs) + F(v[static_cast<size_t>(k)]);
    }
    for (int64_t q = 0; q < n; ++q) F(q) = out[static_cast<size_t>(q)];
}

double percentile95(std::vector<double> v) {
    if (v.empty()) return 0;
    std::sort(v.begin(), v.end());
    const size_t idx = std::min(
        v.size() - 1,
        static_cast<size_t>(std::ceil(0.95 * static_cast<double>(v.size()))) - 1);
    return v[idx];
}

}  // namespace

std::vector<double> distance_to_points(const std::vector<std::array<int64_t, 3>>& pts,
                                       const std::vector<int64_t>& shape,
                                       const std::array<double, 3>& spacing) {
    const int64_t n0 = shape[0], n1 = shape[1], n2 = shape[2];
    std::vector<double> f(static_cast<size_t>(n0 * n1 * n2), kInf);
    for (const auto& p : pts)
        f[static_cast<size_t>((p[0] * n1 + p[1]) * n2 + p[2])] = 0;
    // axis 2 (contiguous), then 1, then 0
    for (int64_t i = 0; i < n0; ++i)
        for (int64_t j = 0; j < n1; ++j)
            dt1d(&f[static_cast<size_t>((i * n1 + j) * n2)], n2, 1, spacing[2]);
    for (int64_t i = 0; i < n0; ++i)
        for (int64_t k = 0; k < n2; ++k)
            dt1d(&f[static_cast<size_t>(i * n1 * n2 + k)], n1, n2, spacing[1]);
    for (int64_t j = 0; j < n1; ++j)
        for (int64_t k = 0; k < n2; ++k)
            dt1d(&f[static_cast<size_t>(j * n2 + k)], n0, n1 * n2, spacing[0]);
    for (auto& d : f) d = std::sqrt(d);
    return f;
}

SurfaceDistances asd_hd95(const BinaryMask& pred, const BinaryMask& gt,
                          const std::array<double, 3>& spacing, bool pooled_hd95) {
    check_same_shape(pred, gt, "asd_hd95");
    const auto sp = surface_voxels(pred);
    const auto sg = surface_voxels(gt);
    SurfaceDistances out;
    if (sp.empty() || sg.empty()) {
        out.missing = true;
        return out;
    }
    const auto dist_to_g = distance_to_points(sg, gt.shape, spacing);
    const auto dist_to_p = distance_to_points(sp, pred.shape, spacing);
    const int64_t n1 = gt.shape[1], n2 = gt.shape[2];
    std::vector<double> d_pg, d_gp;
    d_pg.reserve(sp.size());
    d_gp.reserve(sg.size());
    for (const auto& p : sp)
        d_pg.push_back(dist_to_g[static_cast<size_t>((p[0] * n1 + p[1]) * n2 + p[2])]);
    for (const auto& p : sg)
        d_gp.push_back(dist_to_p[static_cast<size_t>((p[0] * n1 + p[1]) * n2 + p[2])]);
    double sum = 0;
    for (double d : d_pg) sum += d;
    for (double d : d_gp) sum += d;
    out.asd = sum / static_cast<double>(d_pg.size() + d_gp.size());
    if (pooled_hd95) {
        std::vector<double> pooled = d_pg;
        pooled.insert(pooled.end(), d_gp.begin(), d_gp.end());
        out.hd95 = percentile95(std::move(pooled));
    } else {
        out.hd95 = std::max(percentile95(d_pg), percentile95(d_gp));
    }
    return out;
}

BinaryMask sliding_window_predict(const Model& m, const Volume& v,
                                  const std::array<int64_t, 3>& patch_size,
                                  double overlap) {
    v.validate();
    if (overlap < 0 || overlap >= 1)
        throw std::invalid_argument("sliding_window_predict: overlap in [0,1)");
    NoGradGuard ng;
    const auto& sh = v.data.shape;
    // pad up to the patch size with edge values when the volume is smaller
    std::vector<int64_t> wsh(3);
    std::array<int64_t, 3> before{0, 0, 0};
    for (int a = 0; a < 3; ++a) {
        wsh[static_cast<size_t>(a)] =
            std::max(sh[static_cast<size_t>(a)], patch_size[static_cast<size_t>(a)]);
        before[static_cast<size_t>(a)] =
            (wsh[static_cast<size_t>(a)] - sh[static_cast<size_t>(a)]) / 2;
    }
    Tensor work(wsh);
    for (int64_t i = 0; i < wsh[0]; ++i)
        for (int64_t j = 0; j < wsh[1]; ++j)
            for (int64_t k = 0; k < wsh[2]; ++k)
                work.at3(i, j, k) =
                    v.data.at3(std::clamp<int64_t>(i - before[0], 0, sh[0] - 1),
                               std::clamp<int64_t>(j - before[1], 0, sh[1] - 1),
                               std::clamp<int64_t>(k - before[2], 0, sh[2] - 1));

    auto starts = [&](int a) {
        std::vector<int64_t> s;
        const int64_t p = patch_size[static_cast<size_t>(a)];
        const int64_t last = wsh[static_cast<size_t>(a)] - p;
        const int64_t step =
            std::max<int64_t>(1, static_cast<int64_t>(std::llround(
                                     static_cast<double>(p) * (1.0 - overlap))));
        for (int64_t x = 0; x < last; x += step) s.push_back(x);
        s.push_back(last);
        return s;
    };
    const auto s0 = starts(0), s1 = starts(1), s2 = starts(2);

    const int64_t C = m.cfg.num_classes;
    TensorT<double> acc({C, wsh[0], wsh[1], wsh[2]});
    TensorT<double> cnt({wsh[0], wsh[1], wsh[2]});
    Tensor patch({1, patch_size[0], patch_size[1], patch_size[2]});
    for (int64_t a0 : s0)
        for (int64_t a1 : s1)
            for (int64_t a2 : s2) {
                for (int64_t i = 0; i < patch_size[0]; ++i)
                    for (int64_t j = 0; j < patch_size[1]; ++j)
                        for (int64_t k = 0; k < patch_size[2]; ++k)
                            patch.at4(0, i, j, k) = work.at3(a0 + i, a1 + j, a2 + k);
                const auto trace = forward_iterative(m, patch);
                const auto& last = trace.per_iteration.back();
                Tensor logits;
                if (m.cfg.eval_decoder == "A") {
                    logits = last.logits_a;
                } else if (m.cfg.eval_decoder == "B") {
                    logits = last.logits_b;
                } else {
                    logits = last.logits_a;
                    for (int64_t i = 0; i < logits.numel(); ++i)
                        logits[i] = 0.5f * (logits[i] + last.logits_b[i]);
                }
                for (int64_t c = 0; c < C; ++c)
                    for (int64_t i = 0; i < patch_size[0]; ++i)
                        for (int64_t j = 0; j < patch_size[1]; ++j)
                            for (int64_t k = 0; k < patch_size[2]; ++k)
                                acc.at4(c, a0 + i, a1 + j, a2 + k) +=
                                    logits.at4(c, i, j, k);
                for (int64_t i = 0; i < patch_size[0]; ++i)
                    for (int64_t j = 0; j < patch_size[1]; ++j)
                        for (int64_t k = 0; k < patch_size[2]; ++k)
                            cnt.at3(a0 + i, a1 + j, a2 + k) += 1;
            }
    BinaryMask pred(std::vector<int64_t>{sh[0], sh[1], sh[2]});
    for (int64_t i = 0; i < sh[0]; ++i)
        for (int64_t j = 0; j < sh[1]; ++j)
            for (int64_t k = 0; k < sh[2]; ++k) {
                const int64_t wi = i + before[0], wj = j + before[1], wk = k + before[2];
                int64_t best = 0;
                double bv = acc.at4(0, wi, wj, wk);
                for (int64_t c = 1; c < C; ++c)
                    if (acc.at4(c, wi, wj, wk) > bv) {
                        bv = acc.at4(c, wi, wj, wk);
                        best = c;
                    }
                pred.at3(i, j, k) = best != 0 ? 1 : 0;
            }
    return pred;
}

CaseMetrics evaluate_case(const std::string& id, const BinaryMask& pred,
                          const SegmentationMask& gt,
                          const std::array<double, 3>& spacing) {
    CaseMetrics cm;
    cm.case_id = id;
    const BinaryMask g = mask_from_labels(gt.labels);
    std::tie(cm.dice, cm.jaccard) = dice_jaccard(pred, g);
    const auto sd = asd_hd95(pred, g, spacing);
    cm.asd = sd.asd;
    cm.hd95 = sd.hd95;
    cm.distances_missing = sd.missing;
    return cm;
}

MetricsReport aggregate(std::vector<CaseMetrics> per_case) {
    if (per_case.empty()) throw std::invalid_argument("aggregate: no cases");
    MetricsReport r;
    r.per_case = std::move(per_case);
    auto mean_std = [](const std::vector<double>& v, double& mean, double& sd) {
        mean = 0;
        sd = 0;
        if (v.empty()) return;
        for (double x : v) mean += x;
        mean /= static_cast<double>(v.size());
        if (v.size() > 1) {
            for (double x : v) sd += (x - mean) * (x - mean);
            sd = std::sqrt(sd / static_cast<double>(v.size() - 1));
        }
    };
    std::vector<double> d, j, a, h;
    for (const auto& c : r.per_case) {
        d.push_back(c.dice);
        j.push_back(c.jaccard);
        if (!c.distances_missing) {
            a.push_back(c.asd);
            h.push_back(c.hd95);
        } else {
            ++r.missing_distance_cases;
        }
    }
    mean_std(d, r.mean_dice, r.std_dice);
    mean_std(j, r.mean_jaccard, r.std_jaccard);
    mean_std(a, r.mean_asd, r.std_asd);
    mean_std(h, r.mean_hd95, r.std_hd95);
    return r;
}

MetricsReport evaluate(const Model& m, const std::vector<PreprocessedCase>& cases,
                       const std::array<int64_t, 3>& patch_size, double overlap) {
    if (cases.empty()) throw std::invalid_argument("evaluate: empty case list");
    std::vector<CaseMetrics> per_case;
    for (const auto& c : cases) {
        if (!c.mask) throw std::invalid_argument("evaluate: case without label: " + c.id);
        const auto pred = sliding_window_predict(m, c.image, patch_size, overlap);
        per_case.push_back(evaluate_case(c.id, pred, *c.mask, c.image.spacing));
    }
    return aggregate(std::move(per_case));
}

static json case_to_json(const CaseMetrics& c) {
    return json{{"case_id", c.case_id}, {"dice", c.dice},   {"jaccard", c.jaccard},
                {"asd", c.asd},         {"hd95", c.hd95},   {"distances_missing", c.distances_missing}};
}

void write_report_json(const MetricsReport& r, const std::filesystem::path& path) {
    json j;
    j["per_case"] = json::array();
    for (const auto& c : r.per_case) j["per_case"].push_back(case_to_json(c));
    j["mean"] = {{"dice", r.mean_dice},
                 {"jaccard", r.mean_jaccard},
                 {"asd", r.mean_asd},
                 {"hd95", r.mean_hd95}};
    j["std"] = {{"dice", r.std_dice},
                {"jaccard", r.std_jaccard},
                {"asd", r.std_asd},
                {"hd95", r.std_hd95}};
    j["missing_distance_cases"] = r.missing_distance_cases;
    std::ofstream out(path);
    if (!out) throw std::runtime_error("report: cannot write " + path.string());
    out << j.dump(2) << "\n";
}

MetricsReport read_report_json(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("report: cannot open " + path.string());
    json j = json::parse(in);
    std::vector<CaseMetrics> per_case;
    for (const auto& c : j.at("per_case")) {
        CaseMetrics cm;
        cm.case_id = c.at("case_id").get<std::string>();
        cm.dice = c.at("dice").get<double>();
        cm.jaccard = c.at("jaccard").get<double>();
        cm.asd = c.at("asd").get<double>();
        cm.hd95 = c.at("hd95").get<double>();
        cm.distances_missing = c.at("distances_missing").get<bool>();
        per_case.push_back(std::move(cm));
    }
    return aggregate(std::move(per_case));
}

void write_report_csv(const MetricsReport& r, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("report: cannot write " + path.string());
    out << "case_id,dice,jaccard,asd,hd95\n";
    for (const auto& c : r.per_case)
        out << c.case_id << "," << c.dice << "," << c.jaccard << "," << c.asd << ","
            << c.hd95 << "\n";
}

}  // namespace lefed
