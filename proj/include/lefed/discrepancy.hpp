#ifndef LEFED_DISCREPANCY_HPP
#define LEFED_DISCREPANCY_HPP

#include <set>
#include <string>

#include "lefed/nn_ops.hpp"

namespace lefed {

// Inter-decoder discrepancy: the feedback signal of the iterative forward
// pass. All functions here operate on detached value tensors; no gradient
// ever flows through the feedback path.

enum class EncodingKind { A_MINUS_B, B_MINUS_A, ABS_DIFF, ENTROPY };

inline std::string to_string(EncodingKind k) {
    switch (k) {
        case EncodingKind::A_MINUS_B: return "A-B";
        case EncodingKind::B_MINUS_A: return "B-A";
        case EncodingKind::ABS_DIFF: return "|A-B|";
        case EncodingKind::ENTROPY: return "Entropy";
    }
    return "?";
}

inline EncodingKind encoding_from_string(const std::string& s) {
    if (s == "A-B") return EncodingKind::A_MINUS_B;
    if (s == "B-A") return EncodingKind::B_MINUS_A;
    if (s == "|A-B|") return EncodingKind::ABS_DIFF;
    if (s == "Entropy") return EncodingKind::ENTROPY;
    throw std::invalid_argument("unknown discrepancy encoding: " + s);
}

template <class S>
struct DiscrepancyMapT {
    // scale 1 (full resolution) first, deeper scales follow
    std::vector<TensorT<S>> per_scale;
    EncodingKind encoding = EncodingKind::A_MINUS_B;
};

using DiscrepancyMap = DiscrepancyMapT<float>;

// Per-scale discrepancy between the two decoders' pre-head feature maps.
// Subtractive encodings keep the channel layout; ENTROPY collapses to one
// channel: the Shannon entropy of the channel-softmax of the decoder mean.
template <class S>
DiscrepancyMapT<S> compute_discrepancy(const std::vector<TensorT<S>>& feats_a,
                                       const std::vector<TensorT<S>>& feats_b,
                                       EncodingKind kind) {
    if (feats_a.size() != feats_b.size())
        throw std::invalid_argument("compute_discrepancy: scale count mismatch");
    DiscrepancyMapT<S> out;
    out.encoding = kind;
    for (size_t s = 0; s < feats_a.size(); ++s) {
        const auto& a = feats_a[s];
        const auto& b = feats_b[s];
        check_same_shape(a, b, "compute_discrepancy");
        if (kind == EncodingKind::ENTROPY) {
            TensorT<S> mean = a;
            for (int64_t i = 0; i < mean.numel(); ++i)
                mean[i] = (a[i] + b[i]) / S(2);
            const TensorT<S> p = softmax_channels(mean);
            const int64_t C = p.shape[0];
            const int64_t N = p.numel() / C;
            TensorT<S> ent({1, p.shape[1], p.shape[2], p.shape[3]});
            for (int64_t v = 0; v < N; ++v) {
                double h = 0;
                for (int64_t c = 0; c < C; ++c) {
                    const double q = p[c * N + v];
                    if (q > 0) h -= q * std::log(q);
                }
                ent[v] = static_cast<S>(h);
            }
            out.per_scale.push_back(std::move(ent));
        } else {
            TensorT<S> d(a.shape);
            for (int64_t i = 0; i < d.numel(); ++i) {
                const S diff = a[i] - b[i];
                d[i] = kind == EncodingKind::A_MINUS_B ? diff
                       : kind == EncodingKind::B_MINUS_A ? -diff
                                                         : std::abs(diff);
            }
            out.per_scale.push_back(std::move(d));
        }
    }
    return out;
}

// Ablation restriction to a subset of scales (1-based, 1 = full resolution).
template <class S>
DiscrepancyMapT<S> select_scales(const DiscrepancyMapT<S>& d,
                                 const std::set<int>& scales) {
    if (scales.empty())
        throw std::invalid_argument("select_scales: empty selection");
    DiscrepancyMapT<S> out;
    out.encoding = d.encoding;
    for (int s : scales) {
        if (s < 1 || static_cast<size_t>(s) > d.per_scale.size())
            throw std::invalid_argument("select_scales: scale index out of range");
        out.per_scale.push_back(d.per_scale[static_cast<size_t>(s - 1)]);
    }
    return out;
}

// Value-only trilinear resize (shared with the autodiff path).
template <class S>
TensorT<S> resize_trilinear(const TensorT<S>& t, int64_t td, int64_t th, int64_t tw) {
    NoGradGuard ng;
    return upsample_trilinear(constant(t), td, th, tw)->value;
}

// Feedback assembly: channel-mean each scale, upsample to the patch resolution,
// sum across scales, scale by lambda. Returns a rank-3 map matching the patch.
template <class S>
TensorT<S> reduce_to_feedback(const DiscrepancyMapT<S>& d, S lambda,
                              int64_t td, int64_t th, int64_t tw) {
    if (lambda < S(0)) throw std::invalid_argument("reduce_to_feedback: lambda < 0");
    TensorT<S> acc({1, td, th, tw});
    for (const auto& m : d.per_scale) {
        const int64_t C = m.shape[0];
        const int64_t N = m.numel() / C;
        TensorT<S> red({1, m.shape[1], m.shape[2], m.shape[3]});
        for (int64_t v = 0; v < N; ++v) {
            double s = 0;
            for (int64_t c = 0; c < C; ++c) s += m[c * N + v];
            red[v] = static_cast<S>(s / static_cast<double>(C));
        }
        const TensorT<S> up = resize_trilinear(red, td, th, tw);
        for (int64_t i = 0; i < acc.numel(); ++i) acc[i] += up[i];
    }
    TensorT<S> out({td, th, tw});
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = lambda * acc[i];
    return out;
}

struct ScaleStats {
    double mean_abs = 0, max_abs = 0, frac_above = 0;
};

// Per-scale magnitude summary, logged each epoch during training.
template <class S>
std::vector<ScaleStats> discrepancy_stats(const DiscrepancyMapT<S>& d,
                                          double threshold = 0.1) {
    std::vector<ScaleStats> out;
    for (const auto& m : d.per_scale) {
        ScaleStats st;
        int64_t above = 0;
        double sum = 0;
        for (int64_t i = 0; i < m.numel(); ++i) {
            const double a = std::abs(static_cast<double>(m[i]));
            sum += a;
            st.max_abs = std::max(st.max_abs, a);
            if (a > threshold) ++above;
        }
        if (m.numel() > 0) {
            st.mean_abs = sum / static_cast<double>(m.numel());
            st.frac_above = static_cast<double>(above) / static_cast<double>(m.numel());
        }
        out.push_back(st);
    }
    return out;
}

}  // namespace lefed

#endif
