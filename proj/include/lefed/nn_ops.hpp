#ifndef LEFED_NN_OPS_HPP
#define LEFED_NN_OPS_HPP

#include <Eigen/Dense>

#include "lefed/autodiff.hpp"

namespace lefed {

// 3D conv / transposed conv via im2col + GEMM, trilinear resampling and
// instance norm. All tensors are rank-4 (C, D, H, W); single sample per call.

namespace detail {

template <class S>
using MatRM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// reused per-thread im2col workspaces; fresh multi-MB allocations per conv
// call dominate runtime otherwise
template <class S, int Slot>
std::vector<S>& conv_scratch() {
    thread_local std::vector<S> buf;
    return buf;
}

template <class S>
void im2col3d(const TensorT<S>& x, int k, int stride, int pad,
              int64_t od, int64_t oh, int64_t ow, std::vector<S>& col) {
    const int64_t ci_n = x.shape[0], D = x.shape[1], H = x.shape[2], W = x.shape[3];
    const int64_t n_cols = od * oh * ow;
    col.resize(static_cast<size_t>(ci_n * k * k * k * n_cols));
    int64_t row = 0;
    for (int64_t ci = 0; ci < ci_n; ++ci)
        for (int kd = 0; kd < k; ++kd)
            for (int kh = 0; kh < k; ++kh)
                for (int kw = 0; kw < k; ++kw, ++row) {
                    S* crow = col.data() + row * n_cols;
                    for (int64_t d = 0; d < od; ++d) {
                        const int64_t id = d * stride + kd - pad;
                        if (id < 0 || id >= D) {
                            std::fill(crow + d * oh * ow, crow + (d + 1) * oh * ow, S(0));
                            continue;
                        }
                        for (int64_t h = 0; h < oh; ++h) {
                            const int64_t ih = h * stride + kh - pad;
                            S* dst = crow + (d * oh + h) * ow;
                            if (ih < 0 || ih >= H) {
                                std::fill(dst, dst + ow, S(0));
                                continue;
                            }
                            const S* src = &x.data[((ci * D + id) * H + ih) * W];
                            const int64_t iw0 = kw - pad;
                            if (stride == 1) {
                                const int64_t lo = std::max<int64_t>(0, -iw0);
                                const int64_t hi = std::min<int64_t>(ow, W - iw0);
                                for (int64_t w = 0; w < lo; ++w) dst[w] = S(0);
                                for (int64_t w = lo; w < hi; ++w) dst[w] = src[iw0 + w];
                                for (int64_t w = hi; w < ow; ++w) dst[w] = S(0);
                            } else {
                                for (int64_t w = 0; w < ow; ++w) {
                                    const int64_t iw = w * stride + iw0;
                                    dst[w] = (iw >= 0 && iw < W) ? src[iw] : S(0);
                                }
                            }
                        }
                    }
                }
}

template <class S>
void col2im3d_add(const std::vector<S>& col, int k, int stride, int pad,
                  int64_t od, int64_t oh, int64_t ow, TensorT<S>& x) {
    const int64_t ci_n = x.shape[0], D = x.shape[1], H = x.shape[2], W = x.shape[3];
    const int64_t n_cols = od * oh * ow;
    int64_t row = 0;
    for (int64_t ci = 0; ci < ci_n; ++ci)
        for (int kd = 0; kd < k; ++kd)
            for (int kh = 0; kh < k; ++kh)
                for (int kw = 0; kw < k; ++kw, ++row) {
                    const S* crow = col.data() + row * n_cols;
                    for (int64_t d = 0; d < od; ++d) {
                        const int64_t id = d * stride + kd - pad;
                        if (id < 0 || id >= D) continue;
                        for (int64_t h = 0; h < oh; ++h) {
                            const int64_t ih = h * stride + kh - pad;
                            if (ih < 0 || ih >= H) continue;
                            S* dst = &x.data[((ci * D + id) * H + ih) * W];
                            const S* src = crow + (d * oh + h) * ow;
                            for (int64_t w = 0; w < ow; ++w) {
                                const int64_t iw = w * stride + kw - pad;
                                if (iw >= 0 && iw < W) dst[iw] += src[w];
                            }
                        }
                    }
                }
}

// Direct 3x3x3 / stride-1 / pad-1 kernels. The im2col matrix for this case is
// 27x the activation size and the GEMM is memory-bound at desk-scale widths;
// streaming the (cached) activations row-wise is several times faster.

template <class S>
void conv3x3_forward(const TensorT<S>& x, const TensorT<S>& w, const TensorT<S>& b,
                     TensorT<S>& out) {
    const int64_t Ci = x.shape[0], D = x.shape[1], H = x.shape[2], W = x.shape[3];
    const int64_t Co = out.shape[0];
    std::vector<S> acc(static_cast<size_t>(W));
    for (int64_t d = 0; d < D; ++d)
        for (int64_t h = 0; h < H; ++h)
            for (int64_t co = 0; co < Co; ++co) {
                std::fill(acc.begin(), acc.end(), b[co]);
                S* __restrict__ ac = acc.data();
                for (int64_t ci = 0; ci < Ci; ++ci)
                    for (int a = -1; a <= 1; ++a) {
                        const int64_t id = d + a;
                        if (id < 0 || id >= D) continue;
                        for (int bb = -1; bb <= 1; ++bb) {
                            const int64_t ih = h + bb;
                            if (ih < 0 || ih >= H) continue;
                            const S* __restrict__ xr = &x.data[((ci * D + id) * H + ih) * W];
                            const S* wt =
                                &w.data[(((co * Ci + ci) * 3 + (a + 1)) * 3 + (bb + 1)) * 3];
                            const S w0 = wt[0], w1 = wt[1], w2 = wt[2];
                            ac[0] += w1 * xr[0] + w2 * xr[1];
#pragma omp simd
                            for (int64_t v = 1; v < W - 1; ++v)
                                ac[v] += w0 * xr[v - 1] + w1 * xr[v] + w2 * xr[v + 1];
                            ac[W - 1] += w0 * xr[W - 2] + w1 * xr[W - 1];
                        }
                    }
                std::copy(acc.begin(), acc.end(),
                          &out.data[((co * D + d) * H + h) * W]);
            }
}

// accumulates x-gradient; same stencil as forward with gy/weights transposed
template <class S>
void conv3x3_backward_input(const TensorT<S>& gy, const TensorT<S>& w,
                            TensorT<S>& gx) {
    const int64_t Ci = gx.shape[0], D = gx.shape[1], H = gx.shape[2], W = gx.shape[3];
    const int64_t Co = gy.shape[0];
    std::vector<S> acc(static_cast<size_t>(W));
    for (int64_t d = 0; d < D; ++d)
        for (int64_t h = 0; h < H; ++h)
            for (int64_t ci = 0; ci < Ci; ++ci) {
                std::fill(acc.begin(), acc.end(), S(0));
                S* __restrict__ ac = acc.data();
                for (int64_t co = 0; co < Co; ++co)
                    for (int a = -1; a <= 1; ++a) {
                        const int64_t od = d - a;
                        if (od < 0 || od >= D) continue;
                        for (int bb = -1; bb <= 1; ++bb) {
                            const int64_t oh = h - bb;
                            if (oh < 0 || oh >= H) continue;
                            const S* __restrict__ gr = &gy.data[((co * D + od) * H + oh) * W];
                            const S* wt =
                                &w.data[(((co * Ci + ci) * 3 + (a + 1)) * 3 + (bb + 1)) * 3];
                            // gx[v] += sum_c w[c] * gy[v - (c-1)]
                            const S w0 = wt[0], w1 = wt[1], w2 = wt[2];
                            ac[0] += w1 * gr[0] + w0 * gr[1];
#pragma omp simd
                            for (int64_t v = 1; v < W - 1; ++v)
                                ac[v] += w2 * gr[v - 1] + w1 * gr[v] + w0 * gr[v + 1];
                            ac[W - 1] += w2 * gr[W - 2] + w1 * gr[W - 1];
                        }
                    }
                S* dst = &gx.data[((ci * D + d) * H + h) * W];
                for (int64_t v = 0; v < W; ++v) dst[v] += acc[static_cast<size_t>(v)];
            }
}

template <class S>
void conv3x3_backward_weight(const TensorT<S>& x, const TensorT<S>& gy,
                             TensorT<S>& gw, TensorT<S>& gb) {
    const int64_t Ci = x.shape[0], D = x.shape[1], H = x.shape[2], W = x.shape[3];
    const int64_t Co = gy.shape[0];
    for (int64_t co = 0; co < Co; ++co) {
        double bsum = 0;
        const S* gch = &gy.data[static_cast<size_t>(co * D * H * W)];
        for (int64_t i = 0; i < D * H * W; ++i) bsum += gch[i];
        gb[co] += static_cast<S>(bsum);
    }
    for (int64_t d = 0; d < D; ++d)
        for (int64_t h = 0; h < H; ++h)
            for (int64_t co = 0; co < Co; ++co) {
                const S* gr = &gy.data[((co * D + d) * H + h) * W];
                for (int64_t ci = 0; ci < Ci; ++ci)
                    for (int a = -1; a <= 1; ++a) {
                        const int64_t id = d + a;
                        if (id < 0 || id >= D) continue;
                        for (int bb = -1; bb <= 1; ++bb) {
                            const int64_t ih = h + bb;
                            if (ih < 0 || ih >= H) continue;
                            const S* xr = &x.data[((ci * D + id) * H + ih) * W];
                            S s0 = 0, s1 = 0, s2 = 0;
                            s0 += gr[W - 1] * xr[W - 2];
                            s1 += gr[0] * xr[0] + gr[W - 1] * xr[W - 1];
                            s2 += gr[0] * xr[1];
#pragma omp simd reduction(+ : s0, s1, s2)
                            for (int64_t v = 1; v < W - 1; ++v) {
                                const S g = gr[v];
                                s0 += g * xr[v - 1];
                                s1 += g * xr[v];
                                s2 += g * xr[v + 1];
                            }
                            S* wt = &gw.data[(((co * Ci + ci) * 3 + (a + 1)) * 3 +
                                              (bb + 1)) * 3];
                            wt[0] += s0;
                            wt[1] += s1;
                            wt[2] += s2;
                        }
                    }
            }
}

struct AxisLerp {
    std::vector<int64_t> i0, i1;
    std::vector<double> w1;  // weight of i1; weight of i0 is 1-w1
};

inline AxisLerp make_axis_lerp(int64_t in_n, int64_t out_n) {
    AxisLerp a;
    a.i0.resize(static_cast<size_t>(out_n));
    a.i1.resize(static_cast<size_t>(out_n));
    a.w1.resize(static_cast<size_t>(out_n));
    for (int64_t i = 0; i < out_n; ++i) {
        double src = (static_cast<double>(i) + 0.5) * static_cast<double>(in_n) /
                         static_cast<double>(out_n) -
                     0.5;
        if (src < 0) src = 0;
        if (src > static_cast<double>(in_n - 1)) src = static_cast<double>(in_n - 1);
        const int64_t lo = static_cast<int64_t>(src);
        a.i0[static_cast<size_t>(i)] = lo;
        a.i1[static_cast<size_t>(i)] = std::min(lo + 1, in_n - 1);
        a.w1[static_cast<size_t>(i)] = src - static_cast<double>(lo);
    }
    return a;
}

}  // namespace detail

// x: (Cin,D,H,W), w: (Cout,Cin,k,k,k), b: (Cout). Output dims must divide evenly.
template <class S>
VarT<S> conv3d(const VarT<S>& x, const VarT<S>& w, const VarT<S>& b, int stride,
               int pad) {
    using detail::MatRM;
    const auto& xs = x->value.shape;
    const auto& ws = w->value.shape;
    if (xs.size() != 4 || ws.size() != 5 || xs[0] != ws[1])
        throw std::invalid_argument("conv3d: bad shapes");
    const int k = static_cast<int>(ws[2]);
    const int64_t cout = ws[0];
    auto out_dim = [&](int64_t n) {
        const int64_t o = (n + 2 * pad - k);
        if (o < 0 || o % stride != 0)
            throw std::invalid_argument("conv3d: input dim incompatible with stride");
        return o / stride + 1;
    };
    const int64_t od = out_dim(xs[1]), oh = out_dim(xs[2]), ow = out_dim(xs[3]);
    const int64_t K = xs[0] * k * k * k, N = od * oh * ow;
    const bool direct3 = k == 3 && stride == 1 && pad == 1 && xs[3] >= 2;
    const bool direct1 = k == 1 && stride == 1 && pad == 0;

    TensorT<S> out({cout, od, oh, ow});
    if (direct3) {
        detail::conv3x3_forward(x->value, w->value, b->value, out);
    } else {
        const S* cdata;
        if (direct1) {
            cdata = x->value.data.data();  // im2col is the identity here
        } else {
            std::vector<S>& col = detail::conv_scratch<S, 0>();
            detail::im2col3d(x->value, k, stride, pad, od, oh, ow, col);
            cdata = col.data();
        }
        Eigen::Map<const MatRM<S>> W(w->value.data.data(), cout, K);
        Eigen::Map<const MatRM<S>> C(cdata, K, N);
        Eigen::Map<MatRM<S>> O(out.data.data(), cout, N);
        O.noalias() = W * C;
        for (int64_t c = 0; c < cout; ++c) O.row(c).array() += b->value[c];
    }
    return make_op<S>(std::move(out), {x, w, b},
                      [x, w, b, k, stride, pad, od, oh, ow, K, N, cout, direct3,
                       direct1](NodeT<S>& n) {
        if (direct3) {
            if (w->requires_grad || b->requires_grad) {
                w->ensure_grad();
                b->ensure_grad();
                detail::conv3x3_backward_weight(x->value, n.grad, w->grad, b->grad);
            }
            if (x->requires_grad) {
                x->ensure_grad();
                detail::conv3x3_backward_input(n.grad, w->value, x->grad);
            }
            return;
        }
        Eigen::Map<const MatRM<S>> GY(n.grad.data.data(), cout, N);
        if (b->requires_grad) {
            b->ensure_grad();
            // plain loop, not an Eigen reduction: vectorized sums peel to an
            // alignment boundary, so their rounding depends on the buffer
            // address and run-to-run reproducibility is lost
            for (int64_t c = 0; c < cout; ++c) {
                double s = 0;
                const S* p = &n.grad.data[static_cast<size_t>(c * N)];
                for (int64_t i = 0; i < N; ++i) s += p[i];
                b->grad[c] += static_cast<S>(s);
            }
        }
        if (w->requires_grad) {
            const S* cdata;
            if (direct1) {
                cdata = x->value.data.data();
            } else {
                std::vector<S>& col = detail::conv_scratch<S, 0>();
                detail::im2col3d(x->value, k, stride, pad, od, oh, ow, col);
                cdata = col.data();
            }
            w->ensure_grad();
            Eigen::Map<const MatRM<S>> C(cdata, K, N);
            Eigen::Map<MatRM<S>> GW(w->grad.data.data(), cout, K);
            GW.noalias() += GY * C.transpose();
        }
        if (x->requires_grad) {
            std::vector<S>& gcol = detail::conv_scratch<S, 1>();
            gcol.resize(static_cast<size_t>(K * N));
            Eigen::Map<const MatRM<S>> W(w->value.data.data(), cout, K);
            Eigen::Map<MatRM<S>> GC(gcol.data(), K, N);
            GC.noalias() = W.transpose() * GY;
            x->ensure_grad();
            if (direct1) {
                for (int64_t i = 0; i < K * N; ++i) x->grad[i] += gcol[static_cast<size_t>(i)];
            } else {
                detail::col2im3d_add(gcol, k, stride, pad, od, oh, ow, x->grad);
            }
        }
    });
}

// Transposed conv with kernel == stride (non-overlapping scatter), the V-Net
// style 2x2x2/stride-2 up-convolution. w: (Cin, Cout, k, k, k), b: (Cout).
template <class S>
VarT<S> conv_transpose3d(const VarT<S>& x, const VarT<S>& w, const VarT<S>& b,
                         int k) {
    using detail::MatRM;
    const auto& xs = x->value.shape;
    const auto& ws = w->value.shape;
    if (xs.size() != 4 || ws.size() != 5 || xs[0] != ws[0] || ws[2] != k)
        throw std::invalid_argument("conv_transpose3d: bad shapes");
    const int64_t cin = xs[0], cout = ws[1];
    const int64_t D = xs[1], H = xs[2], W = xs[3];
    const int64_t Nin = D * H * W, K2 = cout * k * k * k;

    // col = Wm^T * X, then scatter each column into its k^3 output block
    TensorT<S> out({cout, D * k, H * k, W * k});
    std::vector<S>& col = detail::conv_scratch<S, 0>();
    col.resize(static_cast<size_t>(K2 * Nin));
    {
        Eigen::Map<const MatRM<S>> Wm(w->value.data.data(), cin, K2);
        Eigen::Map<const MatRM<S>> X(x->value.data.data(), cin, Nin);
        Eigen::Map<MatRM<S>> C(col.data(), K2, Nin);
        C.noalias() = Wm.transpose() * X;
    }
    detail::col2im3d_add(col, k, k, 0, D, H, W, out);
    for (int64_t c = 0; c < cout; ++c) {
        S* p = &out.data[static_cast<size_t>(c * out.shape[1] * out.shape[2] * out.shape[3])];
        const int64_t n = out.shape[1] * out.shape[2] * out.shape[3];
        for (int64_t i = 0; i < n; ++i) p[i] += b->value[c];
    }
    return make_op<S>(std::move(out), {x, w, b},
                      [x, w, b, k, D, H, W, Nin, K2, cin, cout](NodeT<S>& n) {
        std::vector<S>& gcol = detail::conv_scratch<S, 1>();
        detail::im2col3d(n.grad, k, k, 0, D, H, W, gcol);
        Eigen::Map<const MatRM<S>> GC(gcol.data(), K2, Nin);
        if (b->requires_grad) {
            b->ensure_grad();
            const int64_t vox = n.grad.numel() / cout;
            for (int64_t c = 0; c < cout; ++c) {
                double s = 0;
                const S* p = &n.grad.data[static_cast<size_t>(c * vox)];
                for (int64_t i = 0; i < vox; ++i) s += p[i];
                b->grad[c] += static_cast<S>(s);
            }
        }
        if (w->requires_grad) {
            w->ensure_grad();
            Eigen::Map<const MatRM<S>> X(x->value.data.data(), cin, Nin);
            Eigen::Map<MatRM<S>> GW(w->grad.data.data(), cin, K2);
            GW.noalias() += X * GC.transpose();
        }
        if (x->requires_grad) {
            x->ensure_grad();
            Eigen::Map<const MatRM<S>> Wm(w->value.data.data(), cin, K2);
            Eigen::Map<MatRM<S>> GX(x->grad.data.data(), cin, Nin);
            GX.noalias() += Wm * GC;
        }
    });
}

// Trilinear resampling to an arbitrary spatial target, channel-preserving.
template <class S>
VarT<S> upsample_trilinear(const VarT<S>& x, int64_t td, int64_t th, int64_t tw) {
    const auto& xs = x->value.shape;
    if (xs.size() != 4) throw std::invalid_argument("upsample_trilinear: rank-4 input");
    if (xs[1] == td && xs[2] == th && xs[3] == tw) return x;  // identity
    const auto ad = detail::make_axis_lerp(xs[1], td);
    const auto ah = detail::make_axis_lerp(xs[2], th);
    const auto aw = detail::make_axis_lerp(xs[3], tw);
    const int64_t C = xs[0];
    TensorT<S> out({C, td, th, tw});
    for (int64_t c = 0; c < C; ++c)
        for (int64_t d = 0; d < td; ++d)
            for (int64_t h = 0; h < th; ++h)
                for (int64_t w = 0; w < tw; ++w) {
                    const double wd = ad.w1[static_cast<size_t>(d)],
                                 wh = ah.w1[static_cast<size_t>(h)],
                                 ww = aw.w1[static_cast<size_t>(w)];
                    double acc = 0;
                    for (int bd = 0; bd < 2; ++bd)
                        for (int bh = 0; bh < 2; ++bh)
                            for (int bw = 0; bw < 2; ++bw) {
                                const double wt = (bd ? wd : 1 - wd) *
                                                  (bh ? wh : 1 - wh) *
                                                  (bw ? ww : 1 - ww);
                                if (wt == 0) continue;
                                acc += wt * static_cast<double>(x->value.at4(
                                           c,
                                           bd ? ad.i1[static_cast<size_t>(d)]
                                              : ad.i0[static_cast<size_t>(d)],
                                           bh ? ah.i1[static_cast<size_t>(h)]
                                              : ah.i0[static_cast<size_t>(h)],
                                           bw ? aw.i1[static_cast<size_t>(w)]
                                              : aw.i0[static_cast<size_t>(w)]));
                            }
                    out.at4(c, d, h, w) = static_cast<S>(acc);
                }
    return make_op<S>(std::move(out), {x}, [x, ad, ah, aw, C, td, th, tw](NodeT<S>& n) {
        x->ensure_grad();
        for (int64_t c = 0; c < C; ++c)
            for (int64_t d = 0; d < td; ++d)
                for (int64_t h = 0; h < th; ++h)
                    for (int64_t w = 0; w < tw; ++w) {
                        const S g = n.grad.at4(c, d, h, w);
                        if (g == S(0)) continue;
                        const double wd = ad.w1[static_cast<size_t>(d)],
                                     wh = ah.w1[static_cast<size_t>(h)],
                                     ww = aw.w1[static_cast<size_t>(w)];
                        for (int bd = 0; bd < 2; ++bd)
                            for (int bh = 0; bh < 2; ++bh)
                                for (int bw = 0; bw < 2; ++bw) {
                                    const double wt = (bd ? wd : 1 - wd) *
                                                      (bh ? wh : 1 - wh) *
                                                      (bw ? ww : 1 - ww);
                                    if (wt == 0) continue;
                                    x->grad.at4(c,
                                                bd ? ad.i1[static_cast<size_t>(d)]
                                                   : ad.i0[static_cast<size_t>(d)],
                                                bh ? ah.i1[static_cast<size_t>(h)]
                                                   : ah.i0[static_cast<size_t>(h)],
                                                bw ? aw.i1[static_cast<size_t>(w)]
                                                   : aw.i0[static_cast<size_t>(w)]) +=
                                        static_cast<S>(wt) * g;
                                }
                    }
    });
}

// Per-channel normalization over the spatial dims. gamma/beta: (C).
template <class S>
VarT<S> instance_norm(const VarT<S>& x, const VarT<S>& gamma, const VarT<S>& beta,
                      S eps = S(1e-5)) {
    const auto& xs = x->value.shape;
    const int64_t C = xs[0], N = xs[1] * xs[2] * xs[3];
    if (gamma->value.numel() != C || beta->value.numel() != C)
        throw std::invalid_argument("instance_norm: gamma/beta size");
    TensorT<S> out(xs);
    auto xhat = std::make_shared<TensorT<S>>(xs);
    auto inv_std = std::make_shared<std::vector<S>>(static_cast<size_t>(C));
    for (int64_t c = 0; c < C; ++c) {
        const S* px = &x->value.data[static_cast<size_t>(c * N)];
        double mean = 0;
        for (int64_t i = 0; i < N; ++i) mean += px[i];
        mean /= static_cast<double>(N);
        double var = 0;
        for (int64_t i = 0; i < N; ++i) {
            const double d = px[i] - mean;
            var += d * d;
        }
        var /= static_cast<double>(N);
        const S is = static_cast<S>(1.0 / std::sqrt(var + static_cast<double>(eps)));
        (*inv_std)[static_cast<size_t>(c)] = is;
        S* ph = &xhat->data[static_cast<size_t>(c * N)];
        S* po = &out.data[static_cast<size_t>(c * N)];
        const S g = gamma->value[c], bta = beta->value[c], m = static_cast<S>(mean);
        for (int64_t i = 0; i < N; ++i) {
            ph[i] = (px[i] - m) * is;
            po[i] = g * ph[i] + bta;
        }
    }
    return make_op<S>(std::move(out), {x, gamma, beta},
                      [x, gamma, beta, xhat, inv_std, C, N](NodeT<S>& n) {
        for (int64_t c = 0; c < C; ++c) {
            const S* gy = &n.grad.data[static_cast<size_t>(c * N)];
            const S* ph = &xhat->data[static_cast<size_t>(c * N)];
            double sum_gy = 0, sum_gy_xhat = 0;
            for (int64_t i = 0; i < N; ++i) {
                sum_gy += gy[i];
                sum_gy_xhat += static_cast<double>(gy[i]) * ph[i];
            }
            if (gamma->requires_grad) {
                gamma->ensure_grad();
                gamma->grad[c] += static_cast<S>(sum_gy_xhat);
            }
            if (beta->requires_grad) {
                beta->ensure_grad();
                beta->grad[c] += static_cast<S>(sum_gy);
            }
            if (x->requires_grad) {
                x->ensure_grad();
                S* gx = &x->grad.data[static_cast<size_t>(c * N)];
                const double k = gamma->value[c] *
                                 static_cast<double>((*inv_std)[static_cast<size_t>(c)]);
                const double mg = sum_gy / static_cast<double>(N);
                const double mgx = sum_gy_xhat / static_cast<double>(N);
                for (int64_t i = 0; i < N; ++i)
                    gx[i] += static_cast<S>(k * (gy[i] - mg - ph[i] * mgx));
            }
        }
    });
}

// Channel-wise softmax on a rank-4 tensor (plain tensor math, no gradient).
template <class S>
TensorT<S> softmax_channels(const TensorT<S>& logits) {
    const int64_t C = logits.shape[0];
    const int64_t N = logits.numel() / C;
    TensorT<S> p(logits.shape);
    for (int64_t v = 0; v < N; ++v) {
        S mx = logits[v];
        for (int64_t c = 1; c < C; ++c) mx = std::max(mx, logits[c * N + v]);
        double z = 0;
        for (int64_t c = 0; c < C; ++c) {
            const double e = std::exp(static_cast<double>(logits[c * N + v] - mx));
            p[c * N + v] = static_cast<S>(e);
            z += e;
        }
        for (int64_t c = 0; c < C; ++c)
            p[c * N + v] = static_cast<S>(p[c * N + v] / z);
    }
    return p;
}

}  // namespace lefed

#endif
