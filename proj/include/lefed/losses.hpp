#ifndef LEFED_LOSSES_HPP
#define LEFED_LOSSES_HPP

#include <cmath>

#include "lefed/nn_ops.hpp"

namespace lefed {

struct LossWeights {
    std::vector<double> ds_weights{0.8, 0.6, 0.4, 0.2, 0.1};  // low-level -> high-level
    double smooth_eps = 1e-5;

    void validate(size_t num_scales) const {
        if (ds_weights.size() != num_scales)
            throw std::invalid_argument("LossWeights: ds_weights length != scales");
        for (double w : ds_weights)
            if (w < 0) throw std::invalid_argument("LossWeights: negative weight");
    }
};

struct LossBreakdown {
    double l_dice = 0, l_ce = 0, l_ds = 0, l_sup = 0, l_unsup = 0, l_total = 0;

    bool finite() const {
        return std::isfinite(l_dice) && std::isfinite(l_ce) && std::isfinite(l_ds) &&
               std::isfinite(l_sup) && std::isfinite(l_unsup) && std::isfinite(l_total);
    }
};

using Labels = TensorT<int32_t>;  // rank-3 class ids

template <class S>
TensorT<S> one_hot(const Labels& labels, int64_t num_classes) {
    TensorT<S> t({num_classes, labels.shape[0], labels.shape[1], labels.shape[2]});
    const int64_t n = labels.numel();
    for (int64_t v = 0; v < n; ++v) {
        const int32_t c = labels[v];
        if (c < 0 || c >= num_classes)
            throw std::invalid_argument("one_hot: label out of range");
        t[c * n + v] = S(1);
    }
    return t;
}

namespace detail {
// grad wrt logits from grad wrt softmax probs: gl = p * (gp - sum_c gp_c p_c)
template <class S>
void softmax_backward_add(const TensorT<S>& p, const std::vector<S>& gp,
                          S upstream, TensorT<S>& glogits) {
    const int64_t C = p.shape[0];
    const int64_t N = p.numel() / C;
    for (int64_t v = 0; v < N; ++v) {
        double dot = 0;
        for (int64_t c = 0; c < C; ++c)
            dot += static_cast<double>(gp[static_cast<size_t>(c * N + v)]) * p[c * N + v];
        for (int64_t c = 0; c < C; ++c)
            glogits[c * N + v] += upstream * p[c * N + v] *
                                  (gp[static_cast<size_t>(c * N + v)] - static_cast<S>(dot));
    }
}
}  // namespace detail

// Soft Dice over softmax probabilities, averaged over classes:
//   L = 1 - mean_c (2*sum(p*g) + eps) / (sum(p) + sum(g) + eps)
template <class S>
VarT<S> dice_loss(const VarT<S>& logits, const TensorT<S>& target_onehot,
                  S eps = S(1e-5), bool include_background = true) {
    check_same_shape(logits->value, target_onehot, "dice_loss");
    const int64_t C = logits->value.shape[0];
    const int64_t N = logits->value.numel() / C;
    const int64_t c0 = include_background ? 0 : 1;
    if (c0 >= C) throw std::invalid_argument("dice_loss: no classes to average");
    auto p = std::make_shared<TensorT<S>>(softmax_channels(logits->value));
    std::vector<double> A(static_cast<size_t>(C), 0), B(static_cast<size_t>(C), 0);
    for (int64_t c = 0; c < C; ++c) {
        double a = 0, sp = 0, sg = 0;
        const S* pp = &p->data[static_cast<size_t>(c * N)];
        const S* pg = &target_onehot.data[static_cast<size_t>(c * N)];
        for (int64_t v = 0; v < N; ++v) {
            a += static_cast<double>(pp[v]) * pg[v];
            sp += pp[v];
            sg += pg[v];
        }
        A[static_cast<size_t>(c)] = a;
        B[static_cast<size_t>(c)] = sp + sg;
    }
    const double nc = static_cast<double>(C - c0);
    double loss = 0;
    for (int64_t c = c0; c < C; ++c)
        loss += (2 * A[static_cast<size_t>(c)] + eps) / (B[static_cast<size_t>(c)] + eps);
    loss = 1.0 - loss / nc;
    auto t = std::make_shared<TensorT<S>>(target_onehot);
    return make_op<S>(TensorT<S>({1}, static_cast<S>(loss)), {logits},
                      [logits, p, t, A, B, eps, c0, nc, C, N](NodeT<S>& n) {
        logits->ensure_grad();
        std::vector<S> gp(static_cast<size_t>(C * N), S(0));
        for (int64_t c = c0; c < C; ++c) {
            const double den = B[static_cast<size_t>(c)] + eps;
            const double num = 2 * A[static_cast<size_t>(c)] + eps;
            const S* pg = &t->data[static_cast<size_t>(c * N)];
            for (int64_t v = 0; v < N; ++v)
                gp[static_cast<size_t>(c * N + v)] = static_cast<S>(
                    -(2.0 * pg[v] * den - num) / (den * den) / nc);
        }
        detail::softmax_backward_add(*p, gp, n.grad[0], logits->grad);
    });
}

// Mean voxel-wise negative log softmax probability of the true class.
template <class S>
VarT<S> ce_loss(const VarT<S>& logits, const Labels& labels) {
    const int64_t C = logits->value.shape[0];
    const int64_t N = logits->value.numel() / C;
    if (labels.numel() != N) throw std::invalid_argument("ce_loss: label count");
    auto p = std::make_shared<TensorT<S>>(softmax_channels(logits->value));
    double loss = 0;
    for (int64_t v = 0; v < N; ++v) {
        const int32_t y = labels[v];
        if (y < 0 || y >= C) throw std::invalid_argument("ce_loss: label out of range");
        loss -= std::log(std::max(static_cast<double>((*p)[y * N + v]), 1e-30));
    }
    loss /= static_cast<double>(N);
    auto lab = std::make_shared<Labels>(labels);
    return make_op<S>(TensorT<S>({1}, static_cast<S>(loss)), {logits},
                      [logits, p, lab, C, N](NodeT<S>& n) {
        logits->ensure_grad();
        const S g = n.grad[0] / static_cast<S>(N);
        for (int64_t v = 0; v < N; ++v) {
            const int32_t y = (*lab)[v];
            for (int64_t c = 0; c < C; ++c)
                logits->grad[c * N + v] +=
                    g * ((*p)[c * N + v] - (c == y ? S(1) : S(0)));
        }
    });
}

// Consistency loss: mean squared difference, by default between softmax probability maps.
template <class S>
VarT<S> consistency_mse(const VarT<S>& a, const VarT<S>& b, bool on_probs = true) {
    check_same_shape(a->value, b->value, "consistency_mse");
    const int64_t Ne = a->value.numel();
    auto pa = std::make_shared<TensorT<S>>(on_probs ? softmax_channels(a->value)
                                                    : a->value);
    auto pb = std::make_shared<TensorT<S>>(on_probs ? softmax_channels(b->value)
                                                    : b->value);
    double loss = 0;
    for (int64_t i = 0; i < Ne; ++i) {
        const double d = static_cast<double>((*pa)[i]) - (*pb)[i];
        loss += d * d;
    }
    loss /= static_cast<double>(Ne);
    return make_op<S>(TensorT<S>({1}, static_cast<S>(loss)), {a, b},
                      [a, b, pa, pb, Ne, on_probs](NodeT<S>& n) {
        std::vector<S> gpa(static_cast<size_t>(Ne)), gpb(static_cast<size_t>(Ne));
        for (int64_t i = 0; i < Ne; ++i) {
            const S d = S(2) * ((*pa)[i] - (*pb)[i]) / static_cast<S>(Ne);
            gpa[static_cast<size_t>(i)] = d;
            gpb[static_cast<size_t>(i)] = -d;
        }
        if (a->requires_grad) {
            a->ensure_grad();
            if (on_probs)
                detail::softmax_backward_add(*pa, gpa, n.grad[0], a->grad);
            else
                for (int64_t i = 0; i < Ne; ++i)
                    a->grad[i] += n.grad[0] * gpa[static_cast<size_t>(i)];
        }
        if (b->requires_grad) {
            b->ensure_grad();
            if (on_probs)
                detail::softmax_backward_add(*pb, gpb, n.grad[0], b->grad);
            else
                for (int64_t i = 0; i < Ne; ++i)
                    b->grad[i] += n.grad[0] * gpb[static_cast<size_t>(i)];
        }
    });
}

// Deep supervision: sum_s w_s * Dice(ds_logits[s], target); ds_logits are already at
// label resolution (the 1x1x1-conv + upsample head is applied in the model).
template <class S>
VarT<S> deep_supervision_loss(const std::vector<VarT<S>>& ds_logits,
                              const TensorT<S>& target_onehot,
                              const LossWeights& weights,
                              bool include_background = true) {
    if (ds_logits.size() != weights.ds_weights.size())
        throw std::invalid_argument("deep_supervision_loss: |ds_logits| != |weights|");
    std::vector<std::pair<S, VarT<S>>> terms;
    for (size_t s = 0; s < ds_logits.size(); ++s)
        terms.push_back({static_cast<S>(weights.ds_weights[s]),
                         dice_loss(ds_logits[s], target_onehot,
                                   static_cast<S>(weights.smooth_eps),
                                   include_background)});
    return weighted_sum(terms);
}

template <class S>
struct SupervisedComponents {
    VarT<S> dice, ce, ds, sum;
};

// Supervised objective: L_sup = L_ds + L_dice(decoder A) + L_ce(decoder B).
// With distinct losses off (ablation "DL"), both decoders get Dice + CE.
template <class S>
SupervisedComponents<S> supervised_loss(const VarT<S>& logits_a,
                                        const VarT<S>& logits_b,
                                        const std::vector<VarT<S>>& ds_logits_a,
                                        const Labels& labels,
                                        const LossWeights& weights,
                                        bool use_deep_supervision = true,
                                        bool use_distinct_losses = true,
                                        bool include_background = true) {
    const int64_t C = logits_a->value.shape[0];
    const auto onehot = one_hot<S>(labels, C);
    SupervisedComponents<S> out;
    const S eps = static_cast<S>(weights.smooth_eps);
    if (use_distinct_losses) {
        out.dice = dice_loss(logits_a, onehot, eps, include_background);
        out.ce = ce_loss(logits_b, labels);
    } else {
        // symmetric: average of Dice and CE applied to both decoders
        out.dice = weighted_sum<S>({{S(0.5), dice_loss(logits_a, onehot, eps, include_background)},
                                    {S(0.5), dice_loss(logits_b, onehot, eps, include_background)}});
        out.ce = weighted_sum<S>({{S(0.5), ce_loss(logits_a, labels)},
                                  {S(0.5), ce_loss(logits_b, labels)}});
    }
    out.ds = use_deep_supervision
                 ? deep_supervision_loss(ds_logits_a, onehot, weights, include_background)
                 : scalar_var<S>(S(0));
    out.sum = weighted_sum<S>({{S(1), out.ds}, {S(1), out.dice}, {S(1), out.ce}});
    return out;
}

// Combined objective: L_total = L_sup + L_unsup, no extra weighting.
template <class S>
VarT<S> total_loss(const SupervisedComponents<S>& sup, const VarT<S>& unsup,
                   LossBreakdown* breakdown = nullptr) {
    auto tot = weighted_sum<S>({{S(1), sup.sum}, {S(1), unsup}});
    LossBreakdown b;
    b.l_dice = static_cast<double>(sup.dice->value[0]);
    b.l_ce = static_cast<double>(sup.ce->value[0]);
    b.l_ds = static_cast<double>(sup.ds->value[0]);
    b.l_sup = static_cast<double>(sup.sum->value[0]);
    b.l_unsup = static_cast<double>(unsup->value[0]);
    b.l_total = static_cast<double>(tot->value[0]);
    if (!b.finite()) throw std::runtime_error("total_loss: non-finite loss component");
    if (breakdown) *breakdown = b;
    return tot;
}

}  // namespace lefed

#endif
