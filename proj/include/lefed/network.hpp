#ifndef LEFED_NETWORK_HPP
#define LEFED_NETWORK_HPP

#include <optional>

#include "lefed/discrepancy.hpp"
#include "lefed/nn_ops.hpp"

namespace lefed {

// V-Net style shared encoder with two differentiated decoders:
//   decoder A: trilinear upsampling, deep-supervision heads, Dice-trained;
//   decoder B: transposed-convolution upsampling, CE-trained.
// Skips are additive; normalization is per-channel instance norm.

struct NetworkConfig {
    int in_channels = 1;
    int num_classes = 2;
    int base_width = 16;  // scaled down to 4-8 for desk-scale runs
    int num_stages = 5;   // 4 downsamplings + bottleneck
    double lambda_feedback = 1e-3;
    int iterations = 3;  // feedback iterations t
    // where the per-scale discrepancy is read from: decoder stage features
    // (default), final logits, or softmax probabilities
    std::string feedback_source = "features";
    std::string eval_decoder = "A";  // A | B | mean

    void validate() const {
        if (in_channels < 1) throw std::invalid_argument("in_channels < 1");
        if (num_classes < 2) throw std::invalid_argument("num_classes < 2");
        if (base_width < 1) throw std::invalid_argument("base_width < 1");
        if (num_stages < 2) throw std::invalid_argument("num_stages < 2");
        if (iterations < 1) throw std::invalid_argument("iterations < 1");
        if (lambda_feedback < 0) throw std::invalid_argument("lambda_feedback < 0");
        if (feedback_source != "features" && feedback_source != "logits" &&
            feedback_source != "probs")
            throw std::invalid_argument("feedback_source must be features|logits|probs");
        if (eval_decoder != "A" && eval_decoder != "B" && eval_decoder != "mean")
            throw std::invalid_argument("eval_decoder must be A|B|mean");
    }

    int width_at(int stage) const { return base_width << stage; }
    int downsample_factor() const { return 1 << (num_stages - 1); }
};

template <class S>
struct ModelT {
    struct Conv {
        VarT<S> w, b;
    };
    struct Norm {
        VarT<S> g, b;
    };
    struct Block {
        Conv c1, c2;
        Norm n1, n2;
    };
    struct EncStage {
        bool has_down = false;
        Conv down;  // 2x2x2 stride-2
        Norm dn;
        Block block;
    };
    struct DecStage {
        Conv up;  // A: 3x3x3 conv after trilinear resize; B: 2x2x2 transposed conv
        Norm un;
        Conv refine;
        Norm rn;
    };

    NetworkConfig cfg;
    std::vector<EncStage> enc;                     // shallow -> deep
    std::vector<DecStage> dec_a, dec_b;            // deep -> shallow
    Conv head_a, head_b;                           // 1x1x1 class heads
    std::vector<Conv> ds_heads;                    // scale1-first, bottleneck last
    std::vector<std::pair<std::string, VarT<S>>> params;

    VarT<S> find_param(const std::string& name) const {
        for (auto& [n, v] : params)
            if (n == name) return v;
        throw std::out_of_range("no parameter named " + name);
    }
};

using Model = ModelT<float>;

namespace detail {

template <class S>
typename ModelT<S>::Conv make_conv(ModelT<S>& m, const std::string& name,
                                   std::vector<int64_t> wshape, int64_t cout,
                                   std::mt19937_64& rng) {
    int64_t fan_in = 1;
    for (size_t i = 1; i < wshape.size(); ++i) fan_in *= wshape[i];
    const S std = static_cast<S>(std::sqrt(2.0 / static_cast<double>(fan_in)));
    typename ModelT<S>::Conv c;
    c.w = parameter(TensorT<S>::randn(wshape, rng, std));
    c.b = parameter(TensorT<S>({cout}, S(0)));
    m.params.push_back({name + ".w", c.w});
    m.params.push_back({name + ".b", c.b});
    return c;
}

template <class S>
typename ModelT<S>::Norm make_norm(ModelT<S>& m, const std::string& name,
                                   int64_t c) {
    typename ModelT<S>::Norm n;
    n.g = parameter(TensorT<S>({c}, S(1)));
    n.b = parameter(TensorT<S>({c}, S(0)));
    m.params.push_back({name + ".g", n.g});
    m.params.push_back({name + ".b", n.b});
    return n;
}

template <class S>
typename ModelT<S>::Block make_block(ModelT<S>& m, const std::string& name,
                                     int64_t cin, int64_t c, std::mt19937_64& rng) {
    typename ModelT<S>::Block b;
    b.c1 = make_conv(m, name + ".conv1", {c, cin, 3, 3, 3}, c, rng);
    b.n1 = make_norm(m, name + ".norm1", c);
    b.c2 = make_conv(m, name + ".conv2", {c, c, 3, 3, 3}, c, rng);
    b.n2 = make_norm(m, name + ".norm2", c);
    return b;
}

constexpr double kLeakySlope = 0.01;

template <class S>
VarT<S> act(const VarT<S>& v) {
    return leaky_relu(v, static_cast<S>(kLeakySlope));
}

template <class S>
VarT<S> run_block(const typename ModelT<S>::Block& b, const VarT<S>& x) {
    auto h = act<S>(instance_norm(conv3d(x, b.c1.w, b.c1.b, 1, 1), b.n1.g, b.n1.b));
    // residual over the width-preserving second conv
    return act<S>(add(instance_norm(conv3d(h, b.c2.w, b.c2.b, 1, 1), b.n2.g, b.n2.b), h));
}

}  // namespace detail

template <class S>
ModelT<S> build_model(const NetworkConfig& cfg, uint64_t seed = 0) {
    cfg.validate();
    ModelT<S> m;
    m.cfg = cfg;
    std::mt19937_64 rng(seed ^ 0x5efed5eedULL);
    const int St = cfg.num_stages;
    for (int i = 0; i < St; ++i) {
        typename ModelT<S>::EncStage st;
        const int64_t c = cfg.width_at(i);
        const int64_t cin = i == 0 ? cfg.in_channels : cfg.width_at(i - 1);
        const std::string base = "enc." + std::to_string(i);
        if (i > 0) {
            st.has_down = true;
            st.down = detail::make_conv(m, base + ".down", {c, cin, 2, 2, 2}, c, rng);
            st.dn = detail::make_norm<S>(m, base + ".down_norm", c);
            st.block = detail::make_block(m, base + ".block", c, c, rng);
        } else {
            st.block = detail::make_block(m, base + ".block", cin, c, rng);
        }
        m.enc.push_back(std::move(st));
    }
    for (const char* dn : {"a", "b"}) {
        auto& dec = dn[0] == 'a' ? m.dec_a : m.dec_b;
        for (int j = St - 2; j >= 0; --j) {
            typename ModelT<S>::DecStage d;
            const int64_t cin = cfg.width_at(j + 1), c = cfg.width_at(j);
            const std::string base =
                std::string("dec_") + dn + "." + std::to_string(j);
            if (dn[0] == 'a')
                d.up = detail::make_conv(m, base + ".up", {c, cin, 3, 3, 3}, c, rng);
            else
                d.up = detail::make_conv(m, base + ".up", {cin, c, 2, 2, 2}, c, rng);
            d.un = detail::make_norm<S>(m, base + ".up_norm", c);
            d.refine = detail::make_conv(m, base + ".refine", {c, c, 3, 3, 3}, c, rng);
            d.rn = detail::make_norm<S>(m, base + ".refine_norm", c);
            dec.push_back(std::move(d));
        }
    }
    m.head_a = detail::make_conv(
        m, "head_a", {cfg.num_classes, cfg.base_width, 1, 1, 1}, cfg.num_classes, rng);
    m.head_b = detail::make_conv(
        m, "head_b", {cfg.num_classes, cfg.base_width, 1, 1, 1}, cfg.num_classes, rng);
    // deep supervision: one head per decoder-A stage output plus the bottleneck
    for (int s = 0; s < St; ++s) {
        const int64_t c = s < St - 1 ? cfg.width_at(s) : cfg.width_at(St - 1);
        m.ds_heads.push_back(detail::make_conv(
            m, "ds_head." + std::to_string(s), {cfg.num_classes, c, 1, 1, 1},
            cfg.num_classes, rng));
    }
    return m;
}

template <class S>
int64_t count_parameters(const ModelT<S>& m) {
    int64_t n = 0;
    for (auto& [name, v] : m.params) n += v->value.numel();
    return n;
}

template <class S>
struct ForwardArtifactsT {
    VarT<S> logits_a, logits_b;
    std::vector<VarT<S>> ds_logits_a;        // scale1-first, all at label resolution
    std::vector<VarT<S>> feats_a, feats_b;   // decoder pre-head features, scale1-first
    VarT<S> bottleneck;
};

// The per-iteration output contract: final logits of both decoders plus the
// decoder-A deep-supervision logits, with the pre-head features the
// discrepancy module reads.
struct DualOutput {
    Tensor logits_a, logits_b;
    std::vector<Tensor> ds_logits_a;
    std::vector<Tensor> feats_a, feats_b;
};

struct IterativeTrace {
    std::vector<DualOutput> per_iteration;
};

// One encoder + dual-decoder pass. `feedback`, when present, is a rank-3 map
// added to every input channel before the encoder (the t>1 feedback path);
// it carries no gradient.
template <class S>
ForwardArtifactsT<S> forward(const ModelT<S>& m, const TensorT<S>& x,
                             const TensorT<S>* feedback = nullptr) {
    if (x.rank() != 4 || x.shape[0] != m.cfg.in_channels)
        throw std::invalid_argument("forward: expected (" +
                                    std::to_string(m.cfg.in_channels) +
                                    ",D,H,W) input, got " + x.shape_str());
    const int f = m.cfg.downsample_factor();
    for (int i = 1; i < 4; ++i)
        if (x.shape[i] % f != 0)
            throw std::invalid_argument("forward: spatial dims must divide " +
                                        std::to_string(f));
    TensorT<S> xin = x;
    if (feedback) {
        if (feedback->rank() != 3 || feedback->shape[0] != x.shape[1] ||
            feedback->shape[1] != x.shape[2] || feedback->shape[2] != x.shape[3])
            throw std::invalid_argument("forward: feedback shape mismatch");
        const int64_t n = feedback->numel();
        for (int64_t c = 0; c < x.shape[0]; ++c)
            for (int64_t i = 0; i < n; ++i) xin[c * n + i] += (*feedback)[i];
    }
    auto h = constant(std::move(xin));
    std::vector<VarT<S>> enc_out;
    for (auto& st : m.enc) {
        if (st.has_down)
            h = detail::act<S>(instance_norm(conv3d(h, st.down.w, st.down.b, 2, 0),
                                             st.dn.g, st.dn.b));
        h = detail::run_block<S>(st.block, h);
        enc_out.push_back(h);
    }
    ForwardArtifactsT<S> art;
    art.bottleneck = enc_out.back();

    const int St = m.cfg.num_stages;
    for (const char* dn : {"a", "b"}) {
        const bool is_a = dn[0] == 'a';
        auto& dec = is_a ? m.dec_a : m.dec_b;
        auto& feats = is_a ? art.feats_a : art.feats_b;
        auto v = art.bottleneck;
        for (int idx = 0; idx < St - 1; ++idx) {
            const auto& d = dec[static_cast<size_t>(idx)];
            const int j = St - 2 - idx;  // encoder level this stage restores
            const auto& skip = enc_out[static_cast<size_t>(j)];
            VarT<S> up;
            if (is_a) {
                up = upsample_trilinear(v, skip->value.shape[1],
                                        skip->value.shape[2], skip->value.shape[3]);
                up = conv3d(up, d.up.w, d.up.b, 1, 1);
            } else {
                up = conv_transpose3d(v, d.up.w, d.up.b, 2);
            }
            up = detail::act<S>(instance_norm(up, d.un.g, d.un.b));
            auto merged = add(up, skip);
            auto refined = detail::act<S>(
                instance_norm(conv3d(merged, d.refine.w, d.refine.b, 1, 1),
                              d.rn.g, d.rn.b));
            v = add(refined, merged);
            feats.push_back(v);
        }
        std::reverse(feats.begin(), feats.end());  // scale 1 (full res) first
    }
    art.logits_a = conv3d(art.feats_a[0], m.head_a.w, m.head_a.b, 1, 0);
    art.logits_b = conv3d(art.feats_b[0], m.head_b.w, m.head_b.b, 1, 0);
    for (int s = 0; s < St; ++s) {
        const auto& src = s < St - 1 ? art.feats_a[static_cast<size_t>(s)]
                                     : art.bottleneck;
        auto ds = conv3d(src, m.ds_heads[static_cast<size_t>(s)].w,
                         m.ds_heads[static_cast<size_t>(s)].b, 1, 0);
        art.ds_logits_a.push_back(
            upsample_trilinear(ds, x.shape[1], x.shape[2], x.shape[3]));
    }
    return art;
}

template <class S>
DualOutput to_dual_output(const ForwardArtifactsT<S>& art);

template <>
inline DualOutput to_dual_output<float>(const ForwardArtifactsT<float>& art) {
    DualOutput d;
    d.logits_a = art.logits_a->value;
    d.logits_b = art.logits_b->value;
    for (auto& v : art.ds_logits_a) d.ds_logits_a.push_back(v->value);
    for (auto& v : art.feats_a) d.feats_a.push_back(v->value);
    for (auto& v : art.feats_b) d.feats_b.push_back(v->value);
    return d;
}

inline DualOutput forward_once(const Model& m, const Tensor& x,
                               const Tensor* feedback = nullptr) {
    NoGradGuard ng;
    return to_dual_output(forward(m, x, feedback));
}

// Discrepancy source for the feedback signal, per NetworkConfig.feedback_source.
inline std::pair<std::vector<Tensor>, std::vector<Tensor>> feedback_source_tensors(
    const NetworkConfig& cfg, const DualOutput& d) {
    if (cfg.feedback_source == "features") return {d.feats_a, d.feats_b};
    if (cfg.feedback_source == "logits")
        return {{d.logits_a}, {d.logits_b}};
    return {{softmax_channels(d.logits_a)}, {softmax_channels(d.logits_b)}};
}

inline Tensor feedback_from_output(const NetworkConfig& cfg, const DualOutput& d,
                                   EncodingKind kind,
                                   const std::set<int>* scales,
                                   const std::vector<int64_t>& patch_dims) {
    auto [fa, fb] = feedback_source_tensors(cfg, d);
    auto disc = compute_discrepancy(fa, fb, kind);
    if (scales) disc = select_scales(disc, *scales);
    return reduce_to_feedback(disc, static_cast<float>(cfg.lambda_feedback),
                              patch_dims[0], patch_dims[1], patch_dims[2]);
}

// Iterative feedback: iteration 1 sees the raw input; iteration k>1 sees the input plus
// the lambda-scaled discrepancy of iteration k-1, treated as a constant.
inline IterativeTrace forward_iterative(const Model& m, const Tensor& x,
                                        EncodingKind kind = EncodingKind::A_MINUS_B,
                                        const std::set<int>* scales = nullptr) {
    NoGradGuard ng;
    IterativeTrace trace;
    const std::vector<int64_t> dims{x.shape[1], x.shape[2], x.shape[3]};
    for (int t = 0; t < m.cfg.iterations; ++t) {
        Tensor fb;
        const Tensor* fbp = nullptr;
        if (t > 0) {
            fb = feedback_from_output(m.cfg, trace.per_iteration.back(), kind,
                                      scales, dims);
            fbp = &fb;
        }
        trace.per_iteration.push_back(forward_once(m, x, fbp));
    }
    return trace;
}

}  // namespace lefed

#endif
