#include <doctest.h>

#include "lefed/nn_ops.hpp"

using namespace lefed;

using DT = TensorT<double>;
using DV = VarT<double>;

namespace {

// reference convolution, straight from the definition
DT naive_conv3d(const DT& x, const DT& w, const DT& b, int stride, int pad) {
    const int64_t Ci = x.shape[0], D = x.shape[1], H = x.shape[2], W = x.shape[3];
    const int64_t Co = w.shape[0], K = w.shape[2];
    const int64_t Do = (D + 2 * pad - K) / stride + 1;
    const int64_t Ho = (H + 2 * pad - K) / stride + 1;
    const int64_t Wo = (W + 2 * pad - K) / stride + 1;
    DT out({Co, Do, Ho, Wo});
    for (int64_t co = 0; co < Co; ++co)
        for (int64_t od = 0; od < Do; ++od)
            for (int64_t oh = 0; oh < Ho; ++oh)
                for (int64_t ow = 0; ow < Wo; ++ow) {
                    double acc = b[co];
                    for (int64_t ci = 0; ci < Ci; ++ci)
                        for (int64_t kd = 0; kd < K; ++kd)
                            for (int64_t kh = 0; kh < K; ++kh)
                                for (int64_t kw = 0; kw < K; ++kw) {
                                    const int64_t id = od * stride + kd - pad;
                                    const int64_t ih = oh * stride + kh - pad;
                                    const int64_t iw = ow * stride + kw - pad;
                                    if (id < 0 || id >= D || ih < 0 || ih >= H ||
                                        iw < 0 || iw >= W)
                                        continue;
                                    acc += x.at4(ci, id, ih, iw) *
                                           w[(((co * Ci + ci) * K + kd) * K + kh) * K + kw];
                                }
                    out.at4(co, od, oh, ow) = acc;
                }
    return out;
}

// reference transposed convolution with kernel == stride (scatter form)
DT naive_conv_transpose3d(const DT& x, const DT& w, const DT& b, int k) {
    const int64_t Ci = x.shape[0], D = x.shape[1], H = x.shape[2], W = x.shape[3];
    const int64_t Co = w.shape[1];
    DT out({Co, D * k, H * k, W * k});
    for (int64_t co = 0; co < Co; ++co)
        for (auto& v : out.data) (void)v;
    for (int64_t co = 0; co < Co; ++co)
        for (int64_t d = 0; d < D * k; ++d)
            for (int64_t h = 0; h < H * k; ++h)
                for (int64_t ww = 0; ww < W * k; ++ww) out.at4(co, d, h, ww) = b[co];
    for (int64_t ci = 0; ci < Ci; ++ci)
        for (int64_t d = 0; d < D; ++d)
            for (int64_t h = 0; h < H; ++h)
                for (int64_t ww = 0; ww < W; ++ww)
                    for (int64_t co = 0; co < Co; ++co)
                        for (int64_t kd = 0; kd < k; ++kd)
                            for (int64_t kh = 0; kh < k; ++kh)
                                for (int64_t kw = 0; kw < k; ++kw)
                                    out.at4(co, d * k + kd, h * k + kh, ww * k + kw) +=
                                        x.at4(ci, d, h, ww) *
                                        w[(((ci * Co + co) * k + kd) * k + kh) * k + kw];
    return out;
}

double fd(const std::function<double()>& f, DT& leaf, int64_t i, double h = 1e-6) {
    const double keep = leaf[i];
    leaf[i] = keep + h;
    const double fp = f();
    leaf[i] = keep - h;
    const double fm = f();
    leaf[i] = keep;
    return (fp - fm) / (2 * h);
}

double sum_value(const DV& v) {
    double s = 0;
    for (int64_t i = 0; i < v->value.numel(); ++i) s += v->value[i];
    return s;
}

DV weighted_sum_all(const DV& v, const DT& wts) {
    double s = 0;
    for (int64_t i = 0; i < v->value.numel(); ++i) s += wts[i] * v->value[i];
    auto wcopy = std::make_shared<DT>(wts);
    return make_op<double>(DT({1}, s), {v}, [v, wcopy](NodeT<double>& n) {
        v->ensure_grad();
        for (int64_t i = 0; i < v->grad.numel(); ++i)
            v->grad[i] += (*wcopy)[i] * n.grad[0];
    });
}

void zero_grad(const DV& v) {
    v->ensure_grad();
    v->grad.fill(0);
}

}  // namespace

TEST_CASE("conv3d matches the naive definition") {
    std::mt19937_64 rng(5);
    struct Cfg {
        int64_t ci, co, d, h, w;
        int k, stride, pad;
    };
    // 3x3x3 stride 1 (the common path), 1x1x1 heads, the stride-2 downsamplers,
    // and an awkward odd shape
    for (const Cfg& c : {Cfg{2, 3, 6, 5, 7, 3, 1, 1}, Cfg{3, 2, 4, 4, 4, 1, 1, 0},
                         Cfg{2, 4, 6, 6, 6, 2, 2, 0}, Cfg{1, 2, 2, 3, 2, 3, 1, 1}}) {
        auto x = constant(DT::randn({c.ci, c.d, c.h, c.w}, rng));
        auto w = constant(DT::randn({c.co, c.ci, c.k, c.k, c.k}, rng));
        auto b = constant(DT::randn({c.co}, rng));
        auto got = conv3d(x, w, b, c.stride, c.pad);
        auto want = naive_conv3d(x->value, w->value, b->value, c.stride, c.pad);
        REQUIRE(got->value.shape == want.shape);
        for (int64_t i = 0; i < want.numel(); ++i)
            CHECK(got->value[i] == doctest::Approx(want[i]).epsilon(1e-10));
    }
}

TEST_CASE("conv3d gradients match finite differences") {
    std::mt19937_64 rng(6);
    for (int stride : {1, 2}) {
        const int k = stride == 1 ? 3 : 2, pad = stride == 1 ? 1 : 0;
        auto x = parameter(DT::randn({2, 4, 4, 4}, rng));
        auto w = parameter(DT::randn({2, 2, k, k, k}, rng));
        auto b = parameter(DT::randn({2}, rng));
        const DT wts = DT::randn({2, 4 / stride, 4 / stride, 4 / stride}, rng);
        auto loss = [&] { return weighted_sum_all(conv3d(x, w, b, stride, pad), wts); };
        zero_grad(x);
        zero_grad(w);
        zero_grad(b);
        backward(loss(), 1.0);
        for (auto* p : {&x, &w, &b}) {
            auto& v = *p;
            for (int64_t i = 0; i < v->value.numel(); i += 7) {
                const double g = fd([&] { return loss()->value[0]; }, v->value, i);
                CHECK(std::abs(g - v->grad[i]) < 1e-5);
            }
        }
    }
}

TEST_CASE("conv_transpose3d matches the scatter definition") {
    std::mt19937_64 rng(7);
    auto x = constant(DT::randn({3, 3, 2, 4}, rng));
    auto w = constant(DT::randn({3, 2, 2, 2, 2}, rng));
    auto b = constant(DT::randn({2}, rng));
    auto got = conv_transpose3d(x, w, b, 2);
    auto want = naive_conv_transpose3d(x->value, w->value, b->value, 2);
    REQUIRE(got->value.shape == want.shape);
    for (int64_t i = 0; i < want.numel(); ++i)
        CHECK(got->value[i] == doctest::Approx(want[i]).epsilon(1e-10));
}

TEST_CASE("conv_transpose3d gradients match finite differences") {
    std::mt19937_64 rng(8);
    auto x = parameter(DT::randn({2, 2, 2, 2}, rng));
    auto w = parameter(DT::randn({2, 2, 2, 2, 2}, rng));
    auto b = parameter(DT::randn({2}, rng));
    const DT wts = DT::randn({2, 4, 4, 4}, rng);
    auto loss = [&] { return weighted_sum_all(conv_transpose3d(x, w, b, 2), wts); };
    zero_grad(x);
    zero_grad(w);
    zero_grad(b);
    backward(loss(), 1.0);
    for (auto* p : {&x, &w, &b}) {
        auto& v = *p;
        for (int64_t i = 0; i < v->value.numel(); i += 3) {
            const double g = fd([&] { return loss()->value[0]; }, v->value, i);
            CHECK(std::abs(g - v->grad[i]) < 1e-5);
        }
    }
}

TEST_CASE("upsample_trilinear basics") {
    std::mt19937_64 rng(9);

    SUBCASE("identity size is exact") {
        auto x = constant(DT::randn({2, 3, 3, 3}, rng));
        auto y = upsample_trilinear(x, 3, 3, 3);
        CHECK(y->value.data == x->value.data);
    }
    SUBCASE("constant input stays constant") {
        auto x = constant(DT({1, 2, 2, 2}, 4.25));
        auto y = upsample_trilinear(x, 5, 7, 3);
        for (int64_t i = 0; i < y->value.numel(); ++i)
            CHECK(y->value[i] == doctest::Approx(4.25).epsilon(1e-12));
    }
    SUBCASE("interpolation stays within the input range") {
        auto x = constant(DT::randn({1, 4, 4, 4}, rng));
        double lo = 1e9, hi = -1e9;
        for (double v : x->value.data) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
        auto y = upsample_trilinear(x, 9, 9, 9);
        for (double v : y->value.data) {
            CHECK(v >= lo - 1e-12);
            CHECK(v <= hi + 1e-12);
        }
    }
    SUBCASE("gradient matches finite differences") {
        auto x = parameter(DT::randn({1, 2, 2, 2}, rng));
        const DT wts = DT::randn({1, 4, 4, 4}, rng);
        auto loss = [&] { return weighted_sum_all(upsample_trilinear(x, 4, 4, 4), wts); };
        zero_grad(x);
        backward(loss(), 1.0);
        for (int64_t i = 0; i < x->value.numel(); ++i) {
            const double g = fd([&] { return loss()->value[0]; }, x->value, i);
            CHECK(std::abs(g - x->grad[i]) < 1e-6);
        }
    }
}

TEST_CASE("instance_norm normalizes each channel") {
    std::mt19937_64 rng(10);
    auto x = constant(DT::randn({3, 4, 4, 4}, rng, 3.0));
    auto g = constant(DT({3}, 1.0));
    auto b = constant(DT({3}, 0.0));
    auto y = instance_norm(x, g, b);
    const int64_t N = 4 * 4 * 4;
    for (int64_t c = 0; c < 3; ++c) {
        double mean = 0;
        for (int64_t i = 0; i < N; ++i) mean += y->value[c * N + i];
        mean /= N;
        double var = 0;
        for (int64_t i = 0; i < N; ++i) {
            const double d = y->value[c * N + i] - mean;
            var += d * d;
        }
        var /= N;
        CHECK(std::abs(mean) < 1e-10);
        CHECK(var == doctest::Approx(1.0).epsilon(1e-4));
    }
}

TEST_CASE("instance_norm gradients match finite differences") {
    std::mt19937_64 rng(11);
    auto x = parameter(DT::randn({2, 3, 3, 3}, rng));
    auto g = parameter(DT::randn({2}, rng));
    auto b = parameter(DT::randn({2}, rng));
    const DT wts = DT::randn({2, 3, 3, 3}, rng);
    auto loss = [&] { return weighted_sum_all(instance_norm(x, g, b), wts); };
    zero_grad(x);
    zero_grad(g);
    zero_grad(b);
    backward(loss(), 1.0);
    for (auto* p : {&x, &g, &b}) {
        auto& v = *p;
        for (int64_t i = 0; i < v->value.numel(); i += 2) {
            const double gr = fd([&] { return loss()->value[0]; }, v->value, i);
            CHECK(std::abs(gr - v->grad[i]) < 1e-5);
        }
    }
}

TEST_CASE("softmax_channels sums to one and is shift invariant") {
    std::mt19937_64 rng(12);
    auto logits = DT::randn({3, 2, 2, 2}, rng, 2.0);
    auto p = softmax_channels(logits);
    const int64_t N = 8;
    for (int64_t v = 0; v < N; ++v) {
        double s = 0;
        for (int64_t c = 0; c < 3; ++c) {
            CHECK(p[c * N + v] > 0);
            s += p[c * N + v];
        }
        CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
    auto shifted = logits;
    for (int64_t v = 0; v < N; ++v)
        for (int64_t c = 0; c < 3; ++c) shifted[c * N + v] += 17.5;
    auto q = softmax_channels(shifted);
    for (int64_t i = 0; i < p.numel(); ++i)
        CHECK(p[i] == doctest::Approx(q[i]).epsilon(1e-9));
}

TEST_CASE("shape validation") {
    std::mt19937_64 rng(13);
    auto x = constant(DT::randn({2, 4, 4, 4}, rng));
    auto w = constant(DT::randn({2, 3, 3, 3, 3}, rng));  // channel mismatch
    auto b = constant(DT({2}, 0.0));
    CHECK_THROWS_AS(conv3d(x, w, b, 1, 1), std::invalid_argument);

    auto wt = constant(DT::randn({2, 2, 3, 3, 3}, rng));  // kernel != stride
    CHECK_THROWS_AS(conv_transpose3d(x, wt, b, 2), std::invalid_argument);
}

TEST_CASE("sum helper sanity") {
    auto x = constant(DT({2, 1, 1, 1}, 1.5));
    CHECK(sum_value(x) == doctest::Approx(3.0));
}
