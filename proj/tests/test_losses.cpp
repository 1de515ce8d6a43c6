#include <doctest.h>

#include "lefed/losses.hpp"

using namespace lefed;

using DT = TensorT<double>;
using DV = VarT<double>;

namespace {

double fd(const std::function<double()>& f, DT& leaf, int64_t i, double h = 1e-6) {
    const double keep = leaf[i];
    leaf[i] = keep + h;
    const double fp = f();
    leaf[i] = keep - h;
    const double fm = f();
    leaf[i] = keep;
    return (fp - fm) / (2 * h);
}

Labels checker(int64_t n) {
    Labels y({n, n, n});
    for (int64_t i = 0; i < y.numel(); ++i) y[i] = i % 2;
    return y;
}

}  // namespace

TEST_CASE("one_hot layout and validation") {
    Labels y({1, 1, 3});
    y[0] = 0;
    y[1] = 2;
    y[2] = 1;
    auto t = one_hot<double>(y, 3);
    REQUIRE(t.shape == std::vector<int64_t>({3, 1, 1, 3}));
    CHECK(t[0 * 3 + 0] == 1);
    CHECK(t[2 * 3 + 1] == 1);
    CHECK(t[1 * 3 + 2] == 1);
    double sum = 0;
    for (int64_t i = 0; i < t.numel(); ++i) sum += t[i];
    CHECK(sum == 3);
    y[1] = 5;
    CHECK_THROWS_AS(one_hot<double>(y, 3), std::invalid_argument);
}

TEST_CASE("dice_loss endpoints") {
    // strongly confident logits for the true class -> loss near 0
    Labels y = checker(4);
    auto onehot = one_hot<double>(y, 2);
    DT good({2, 4, 4, 4});
    const int64_t N = 64;
    for (int64_t v = 0; v < N; ++v) {
        good[y[v] * N + v] = 20;
        good[(1 - y[v]) * N + v] = -20;
    }
    CHECK(dice_loss(parameter(good), onehot)->value[0] ==
          doctest::Approx(0.0).epsilon(1e-6));

    // perfectly wrong predictions -> loss near 1
    DT bad({2, 4, 4, 4});
    for (int64_t v = 0; v < N; ++v) {
        bad[y[v] * N + v] = -20;
        bad[(1 - y[v]) * N + v] = 20;
    }
    CHECK(dice_loss(parameter(bad), onehot)->value[0] ==
          doctest::Approx(1.0).epsilon(1e-4));
}

TEST_CASE("dice_loss on a hand-computed case") {
    // two voxels, uniform probabilities (logits all zero): p = 0.5 everywhere.
    // labels {0, 1}: per class, intersection = 0.5, |p| + |g| = 1 + 1 = 2,
    // dice term = (2*0.5 + eps) / (2 + eps) ~ 0.5, loss = 1 - 0.5 = 0.5
    Labels y({1, 1, 2});
    y[0] = 0;
    y[1] = 1;
    auto onehot = one_hot<double>(y, 2);
    auto logits = parameter(DT({2, 1, 1, 2}, 0.0));
    CHECK(dice_loss(logits, onehot)->value[0] == doctest::Approx(0.5).epsilon(1e-5));
}

TEST_CASE("ce_loss hand cases") {
    // uniform logits over 2 classes: loss = ln 2
    Labels y = checker(2);
    auto logits = parameter(DT({2, 2, 2, 2}, 0.0));
    CHECK(ce_loss(logits, y)->value[0] ==
          doctest::Approx(std::log(2.0)).epsilon(1e-9));

    // single voxel with logits (1, 3), label 1: loss = -log(e^3 / (e^1 + e^3))
    Labels y1({1, 1, 1});
    y1[0] = 1;
    DT l({2, 1, 1, 1});
    l[0] = 1;
    l[1] = 3;
    const double want = -std::log(std::exp(3.0) / (std::exp(1.0) + std::exp(3.0)));
    CHECK(ce_loss(parameter(l), y1)->value[0] == doctest::Approx(want).epsilon(1e-9));

    Labels bad({1, 1, 1});
    bad[0] = 2;
    CHECK_THROWS_AS(ce_loss(parameter(l), bad), std::invalid_argument);
}

TEST_CASE("consistency_mse properties") {
    std::mt19937_64 rng(17);
    auto a = parameter(DT::randn({2, 3, 3, 3}, rng));

    SUBCASE("identical inputs give zero") {
        auto b = parameter(a->value);
        CHECK(consistency_mse(a, b)->value[0] == doctest::Approx(0.0));
    }
    SUBCASE("symmetric in its arguments") {
        auto b = parameter(DT::randn({2, 3, 3, 3}, rng));
        CHECK(consistency_mse(a, b)->value[0] ==
              doctest::Approx(consistency_mse(b, a)->value[0]).epsilon(1e-12));
    }
    SUBCASE("hand value on a single binary voxel") {
        // logits (z, -z) vs (-z, z): probs (p, 1-p) vs (1-p, p),
        // mse = mean of 2 * (2p - 1)^2 over the 2 channels = (2p-1)^2
        DT la({2, 1, 1, 1}), lb({2, 1, 1, 1});
        la[0] = 2;
        la[1] = -2;
        lb[0] = -2;
        lb[1] = 2;
        const double p = 1.0 / (1.0 + std::exp(-4.0));
        const double want = (2 * p - 1) * (2 * p - 1);
        CHECK(consistency_mse(parameter(la), parameter(lb))->value[0] ==
              doctest::Approx(want).epsilon(1e-9));
    }
    SUBCASE("shape mismatch throws") {
        auto b = parameter(DT::randn({2, 3, 3, 2}, rng));
        CHECK_THROWS_AS(consistency_mse(a, b), std::invalid_argument);
    }
}

TEST_CASE("deep supervision is the weighted sum of per-scale dice losses") {
    std::mt19937_64 rng(19);
    Labels y = checker(4);
    auto onehot = one_hot<double>(y, 2);
    LossWeights lw;
    lw.ds_weights = {0.8, 0.6, 0.4};
    std::vector<DV> ds;
    for (int s = 0; s < 3; ++s)
        ds.push_back(parameter(DT::randn({2, 4, 4, 4}, rng)));

    double hand = 0;
    for (size_t s = 0; s < ds.size(); ++s)
        hand += lw.ds_weights[s] * dice_loss(ds[s], onehot)->value[0];
    CHECK(deep_supervision_loss(ds, onehot, lw)->value[0] ==
          doctest::Approx(hand).epsilon(1e-9));

    // linear in the weights
    LossWeights doubled = lw;
    for (auto& w : doubled.ds_weights) w *= 2;
    CHECK(deep_supervision_loss(ds, onehot, doubled)->value[0] ==
          doctest::Approx(2 * hand).epsilon(1e-9));

    LossWeights wrong;
    wrong.ds_weights = {0.8};
    CHECK_THROWS_AS(deep_supervision_loss(ds, onehot, wrong), std::invalid_argument);
}

TEST_CASE("supervised and total objectives compose additively") {
    std::mt19937_64 rng(21);
    Labels y = checker(4);
    LossWeights lw;
    lw.ds_weights = {0.8, 0.6};
    auto la = parameter(DT::randn({2, 4, 4, 4}, rng));
    auto lb = parameter(DT::randn({2, 4, 4, 4}, rng));
    std::vector<DV> ds{parameter(DT::randn({2, 4, 4, 4}, rng)),
                       parameter(DT::randn({2, 4, 4, 4}, rng))};

    auto sup = supervised_loss(la, lb, ds, y, lw);
    CHECK(sup.sum->value[0] ==
          doctest::Approx(sup.dice->value[0] + sup.ce->value[0] + sup.ds->value[0])
              .epsilon(1e-12));

    auto unsup = consistency_mse(la, lb);
    LossBreakdown bd;
    auto tot = total_loss(sup, unsup, &bd);
    CHECK(bd.l_total == doctest::Approx(bd.l_sup + bd.l_unsup).epsilon(1e-12));
    CHECK(tot->value[0] == doctest::Approx(bd.l_total).epsilon(1e-12));

    // deep supervision off zeroes exactly that component
    auto nods = supervised_loss(la, lb, ds, y, lw, /*use_deep_supervision=*/false);
    CHECK(nods.ds->value[0] == 0.0);
    CHECK(nods.sum->value[0] ==
          doctest::Approx(nods.dice->value[0] + nods.ce->value[0]).epsilon(1e-12));
}

TEST_CASE("term attribution: a perfect CE decoder drives l_ce to zero") {
    Labels y = checker(4);
    const int64_t N = 64;
    DT perfect({2, 4, 4, 4});
    for (int64_t v = 0; v < N; ++v) {
        perfect[y[v] * N + v] = 30;
        perfect[(1 - y[v]) * N + v] = -30;
    }
    std::mt19937_64 rng(23);
    auto la = parameter(DT::randn({2, 4, 4, 4}, rng));
    LossWeights lw;
    lw.ds_weights = {0.8};
    auto sup = supervised_loss(la, parameter(perfect), {la}, y, lw);
    CHECK(sup.ce->value[0] == doctest::Approx(0.0).epsilon(1e-9));
    CHECK(sup.dice->value[0] > 1e-3);  // the random decoder is not perfect
}

TEST_CASE("symmetric losses when distinct losses are disabled") {
    std::mt19937_64 rng(29);
    Labels y = checker(4);
    LossWeights lw;
    lw.ds_weights = {0.8};
    auto la = parameter(DT::randn({2, 4, 4, 4}, rng));
    auto lb = parameter(DT::randn({2, 4, 4, 4}, rng));
    auto onehot = one_hot<double>(y, 2);
    auto sup = supervised_loss(la, lb, {la}, y, lw, true, /*use_distinct_losses=*/false);
    const double dice_want = 0.5 * dice_loss(la, onehot)->value[0] +
                             0.5 * dice_loss(lb, onehot)->value[0];
    const double ce_want =
        0.5 * ce_loss(la, y)->value[0] + 0.5 * ce_loss(lb, y)->value[0];
    CHECK(sup.dice->value[0] == doctest::Approx(dice_want).epsilon(1e-9));
    CHECK(sup.ce->value[0] == doctest::Approx(ce_want).epsilon(1e-9));
}

TEST_CASE("non-finite components are rejected") {
    auto sup = SupervisedComponents<double>{};
    sup.dice = scalar_var<double>(0.1);
    sup.ce = scalar_var<double>(0.2);
    sup.ds = scalar_var<double>(0.0);
    sup.sum = scalar_var<double>(std::numeric_limits<double>::quiet_NaN());
    auto unsup = scalar_var<double>(0.0);
    CHECK_THROWS_AS(total_loss(sup, unsup), std::runtime_error);
}

TEST_CASE("loss gradients match finite differences") {
    std::mt19937_64 rng(31);
    Labels y = checker(3);
    auto onehot = one_hot<double>(y, 2);
    auto la = parameter(DT::randn({2, 3, 3, 3}, rng));
    auto lb = parameter(DT::randn({2, 3, 3, 3}, rng));
    LossWeights lw;
    lw.ds_weights = {0.8, 0.6};
    std::vector<DV> ds{la, lb};

    auto loss = [&] {
        auto sup = supervised_loss(la, lb, ds, y, lw);
        auto unsup = consistency_mse(la, lb);
        return total_loss(sup, unsup);
    };
    la->ensure_grad();
    lb->ensure_grad();
    la->grad.fill(0);
    lb->grad.fill(0);
    backward(loss(), 1.0);
    for (auto& v : {la, lb})
        for (int64_t i = 0; i < v->value.numel(); i += 5) {
            const double g = fd([&] { return loss()->value[0]; }, v->value, i);
            CHECK(std::abs(g - v->grad[i]) <=
                  1e-4 * std::max({std::abs(g), std::abs(v->grad[i]), 1.0}));
        }
}
