#pragma once

#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <unordered_set>
#include <vector>

#include "ccm/tensor.hpp"

namespace ccm {

enum class Padding { Same, Valid };
enum class RunMode { Train, Eval };

// A node in the dynamically recorded computation graph. Leaves are inputs or
// parameters; every op allocates a fresh node whose backward_fn scatters the
// node's grad into its parents' grads.
template <typename T>
struct VarNodeT {
    TensorT<T> value;
    TensorT<T> grad;
    bool requires_grad = false;
    bool is_param = false;
    std::string name;

    std::vector<std::shared_ptr<VarNodeT>> parents;
    std::function<void()> backward_fn;
    bool backward_done = false;

    void ensure_grad() {
        if (grad.numel() != value.numel()) grad = TensorT<T>(value.shape());
    }
    void zero_grad() {
        ensure_grad();
        grad.fill(T(0));
    }
};

template <typename T>
using VarT = std::shared_ptr<VarNodeT<T>>;

using Var = VarT<float>;

template <typename T>
VarT<T> make_var(TensorT<T> value, bool requires_grad = false) {
    auto n = std::make_shared<VarNodeT<T>>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    return n;
}

// A trainable parameter: a named leaf with grad storage.
template <typename T>
VarT<T> make_param(TensorT<T> value, std::string name) {
    auto n = make_var(std::move(value), true);
    n->is_param = true;
    n->name = std::move(name);
    n->zero_grad();
    return n;
}

namespace detail {

template <typename T>
VarT<T> make_op_node(TensorT<T> value, std::vector<VarT<T>> parents) {
    auto n = std::make_shared<VarNodeT<T>>();
    n->value = std::move(value);
    for (const auto& p : parents)
        if (p->requires_grad) n->requires_grad = true;
    if (n->requires_grad) n->parents = std::move(parents);
    return n;
}

// Views a [H,W,C] tensor as [1,H,W,C]; identity on 4-d input.
inline std::vector<int> as_batched(const std::vector<int>& shape) {
    if (shape.size() == 3) return {1, shape[0], shape[1], shape[2]};
    return shape;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Convolution (cross-correlation, zero-padded when padding == Same).
// x: [H,W,Cin] or [B,H,W,Cin]; kernel: [kh,kw,Cin,Cout].
// ---------------------------------------------------------------------------

template <typename T>
VarT<T> conv2d(const VarT<T>& x, const VarT<T>& kernel, int stride = 1, Padding padding = Padding::Same) {
    const auto& xs = x->value.shape();
    const auto& ks = kernel->value.shape();
    if (xs.size() != 3 && xs.size() != 4) throw DimensionError("conv2d input must be [H,W,C] or [B,H,W,C]");
    if (ks.size() != 4) throw DimensionError("conv2d kernel must be [kh,kw,Cin,Cout]");
    if (stride < 1) throw ArgumentError("conv2d stride must be >= 1");

    const bool batched = xs.size() == 4;
    const int B = batched ? xs[0] : 1;
    const int H = xs[batched ? 1 : 0], W = xs[batched ? 2 : 1], Cin = xs[batched ? 3 : 2];
    const int kh = ks[0], kw = ks[1], Cout = ks[3];
    if (ks[2] != Cin)
        throw DimensionError("conv2d: input has " + std::to_string(Cin) + " channels, kernel expects " +
                             std::to_string(ks[2]));

    int ph = 0, pw = 0;
    if (padding == Padding::Same) {
        if (kh % 2 == 0 || kw % 2 == 0) throw ArgumentError("conv2d same-padding requires odd kernel extents");
        ph = (kh - 1) / 2;
        pw = (kw - 1) / 2;
    }
    const int Ho = (H + 2 * ph - kh) / stride + 1;
    const int Wo = (W + 2 * pw - kw) / stride + 1;
    if (Ho < 1 || Wo < 1) throw DimensionError("conv2d output would be empty");

    TensorT<T> out(batched ? std::vector<int>{B, Ho, Wo, Cout} : std::vector<int>{Ho, Wo, Cout});

    const T* xd = x->value.data();
    const T* kd = kernel->value.data();
    T* od = out.data();
    const long x_img = static_cast<long>(H) * W * Cin;
    const long o_img = static_cast<long>(Ho) * Wo * Cout;

    for (int b = 0; b < B; ++b) {
        const T* xb = xd + b * x_img;
        T* ob = od + b * o_img;
        for (int oh = 0; oh < Ho; ++oh) {
            for (int ow = 0; ow < Wo; ++ow) {
                T* __restrict__ orow = ob + (static_cast<long>(oh) * Wo + ow) * Cout;
                for (int r = 0; r < kh; ++r) {
                    const int ih = oh * stride + r - ph;
                    if (ih < 0 || ih >= H) continue;
                    for (int c = 0; c < kw; ++c) {
                        const int iw = ow * stride + c - pw;
                        if (iw < 0 || iw >= W) continue;
                        const T* __restrict__ xrow = xb + (static_cast<long>(ih) * W + iw) * Cin;
                        const T* __restrict__ krow = kd + (static_cast<long>(r) * kw + c) * Cin * Cout;
                        for (int ci = 0; ci < Cin; ++ci) {
                            const T xv = xrow[ci];
                            const T* __restrict__ kk = krow + static_cast<long>(ci) * Cout;
                            for (int co = 0; co < Cout; ++co) orow[co] += xv * kk[co];
                        }
                    }
                }
            }
        }
    }

    auto node = detail::make_op_node(std::move(out), {x, kernel});
    if (node->requires_grad) {
        auto* np = node.get();
        auto* xp = x.get();
        auto* kp = kernel.get();
        node->backward_fn = [np, xp, kp, B, H, W, Cin, kh, kw, Cout, Ho, Wo, ph, pw, stride] {
            const T* gd = np->grad.data();
            const T* xd2 = xp->value.data();
            const T* kd2 = kp->value.data();
            const long x_img2 = static_cast<long>(H) * W * Cin;
            const long o_img2 = static_cast<long>(Ho) * Wo * Cout;
            T* gx = nullptr;
            T* gk = nullptr;
            if (xp->requires_grad) {
                xp->ensure_grad();
                gx = xp->grad.data();
            }
            if (kp->requires_grad) {
                kp->ensure_grad();
                gk = kp->grad.data();
            }
            // Transposed kernel [kh,kw,Cout,Cin] turns the dx accumulation
            // into streaming FMA over contiguous rows.
            std::vector<T> kt;
            if (gx) {
                kt.resize(static_cast<size_t>(kh) * kw * Cin * Cout);
                for (int r = 0; r < kh; ++r)
                    for (int c = 0; c < kw; ++c) {
                        const long base = (static_cast<long>(r) * kw + c) * Cin * Cout;
                        for (int ci = 0; ci < Cin; ++ci)
                            for (int co = 0; co < Cout; ++co)
                                kt[static_cast<size_t>(base + static_cast<long>(co) * Cin + ci)] =
                                    kd2[base + static_cast<long>(ci) * Cout + co];
                    }
            }
            for (int b = 0; b < B; ++b) {
                const T* xb = xd2 + b * x_img2;
                const T* gb = gd + b * o_img2;
                T* gxb = gx ? gx + b * x_img2 : nullptr;
                for (int oh = 0; oh < Ho; ++oh) {
                    for (int ow = 0; ow < Wo; ++ow) {
                        const T* grow = gb + (static_cast<long>(oh) * Wo + ow) * Cout;
                        for (int r = 0; r < kh; ++r) {
                            const int ih = oh * stride + r - ph;
                            if (ih < 0 || ih >= H) continue;
                            for (int c = 0; c < kw; ++c) {
                                const int iw = ow * stride + c - pw;
                                if (iw < 0 || iw >= W) continue;
                                const long xoff = (static_cast<long>(ih) * W + iw) * Cin;
                                const long koff = (static_cast<long>(r) * kw + c) * Cin * Cout;
                                if (gxb) {
                                    T* __restrict__ gxrow = gxb + xoff;
                                    for (int co = 0; co < Cout; ++co) {
                                        const T gv = grow[co];
                                        const T* __restrict__ kk = kt.data() + koff + static_cast<long>(co) * Cin;
                                        for (int ci = 0; ci < Cin; ++ci) gxrow[ci] += gv * kk[ci];
                                    }
                                }
                                if (gk) {
                                    const T* __restrict__ xrow = xb + xoff;
                                    for (int ci = 0; ci < Cin; ++ci) {
                                        const T xv = xrow[ci];
                                        T* __restrict__ gkk = gk + koff + static_cast<long>(ci) * Cout;
                                        for (int co = 0; co < Cout; ++co) gkk[co] += xv * grow[co];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        };
    }
    return node;
}

// Adds a per-channel bias b[C] over the last axis.
template <typename T>
VarT<T> bias_add(const VarT<T>& x, const VarT<T>& bias) {
    const auto& xs = x->value.shape();
    const auto& bs = bias->value.shape();
    if (bs.size() != 1 || bs[0] != xs.back())
        throw DimensionError("bias_add: bias shape " + bias->value.shape_string() + " vs input " +
                             x->value.shape_string());
    const int C = bs[0];
    TensorT<T> out = x->value;
    T* od = out.data();
    const T* bd = bias->value.data();
    const long rows = out.numel() / C;
    for (long r = 0; r < rows; ++r)
        for (int c = 0; c < C; ++c) od[r * C + c] += bd[c];

    auto node = detail::make_op_node(std::move(out), {x, bias});
    if (node->requires_grad) {
        auto* np = node.get();
        auto* xp = x.get();
        auto* bp = bias.get();
        node->backward_fn = [np, xp, bp, C] {
            const T* gd = np->grad.data();
            const long rows2 = np->grad.numel() / C;
            if (xp->requires_grad) {
                xp->ensure_grad();
                T* gx = xp->grad.data();
                for (long i = 0; i < np->grad.numel(); ++i) gx[i] += gd[i];
            }
            if (bp->requires_grad) {
                bp->ensure_grad();
                T* gb = bp->grad.data();
                for (long r = 0; r < rows2; ++r)
                    for (int c = 0; c < C; ++c) gb[c] += gd[r * C + c];
            }
        };
    }
    return node;
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

template <typename T>
VarT<T> relu(const VarT<T>& x) {
    TensorT<T> out(x->value.shape());
    for (long i = 0; i < out.numel(); ++i) out[i] = x->value[i] > T(0) ? x->value[i] : T(0);
    auto node = detail::make_op_node(std::move(out), {x});
    if (node->requires_grad) {
        auto* np = node.get();
        auto* xp = x.get();
        node->backward_fn = [np, xp] {
            xp->ensure_grad();
            for (long i = 0; i < np->grad.numel(); ++i)
                if (xp->value[i] > T(0)) xp->grad[i] += np->grad[i];
        };
    }
    return node;
}

// Numerically stable; output pinned strictly inside (0,1) even where exp
// underflows.
template <typename T>
T sigmoid_scalar(T v) {
    T s;
    if (v >= T(0)) {
        s = T(1) / (T(1) + std::exp(-v));
    } else {
        const T e = std::exp(v);
        s = e / (T(1) + e);
    }
    const T lo = std::numeric_limits<T>::min();
    const T hi = T(1) - std::numeric_limits<T>::epsilon() / T(2);
    return std::min(hi, std::max(lo, s));
}

template <typename T>
VarT<T> sigmoid(const VarT<T>& x) {
    TensorT<T> out(x->value.shape());
    for (long i = 0; i < out.numel(); ++i) out[i] = sigmoid_scalar(x->value[i]);
    auto node = detail::make_op_node(std::move(out), {x});
    if (node->requires_grad) {
        auto* np = node.get();
        auto* xp = x.get();
        node->backward_fn = [np, xp] {
            xp->ensure_grad();
            for (long i = 0; i < np->grad.numel(); ++i) {
                const T s = np->value[i];
                xp->grad[i] += np->grad[i] * s * (T(1) - s);
            }
        };
    }
    return node;
}

// Softmax over the last axis.
template <typename T>
VarT<T> softmax(const VarT<T>& x) {
    const auto& xs = x->value.shape();
    const int K = xs.back();
    TensorT<T> out(xs);
    const long rows = out.numel() / K;
    for (long r = 0; r < rows; ++r) {
        const T* in = x->value.data() + r * K;
        T* o = out.data() + r * K;
        T mx = in[0];
        for (int k = 1; k < K; ++k) mx = std::max(mx, in[k]);
        T denom = 0;
        for (int k = 0; k < K; ++k) {
            o[k] = std::exp(in[k] - mx);
            denom += o[k];
        }
        for (int k = 0; k < K; ++k) o[k] /= denom;
    }
    auto node = detail::make_op_node(std::move(out), {x});
    if (node->requires_grad) {
        auto* np = node.get();
        auto* xp = x.get();
        node->backward_fn = [np, xp, K] {
            xp->ensure_grad();
            const long rows2 = np->grad.numel() / K;
            for (long r = 0; r < rows2; ++r) {
                const T* y = np->value.data() + r * K;
                const T* g = np->grad.data() + r * K;
                T* gx = xp->grad.data() + r * K;
                T dot = 0;
                for (int k = 0; k < K; ++k) dot += g[k] * y[k];
                for (int k = 0; k < K; ++k) gx[k] += y[k] * (g[k] - dot);
            }
        };
    }
    return node;
}

// ---------------------------------------------------------------------------
// 2x2 max pooling, stride 2. Requires even spatial extents.
// ---------------------------------------------------------------------------

template <typename T>
VarT<T> max_pool2(const VarT<T>& x) {
    const auto& xs = x->value.shape();
    if (xs.size() != 3 && xs.size() != 4) throw DimensionError("max_pool2 input must be [H,W,C] or [B,H,W,C]");
    const bool batched = xs.size() == 4;
    const int B = batched ? xs[0] : 1;
    const int H = xs[batched ? 1 : 0], W = xs[batched ? 2 : 1], C = xs[batched ? 3 : 2];
    if (H % 2 != 0 || W % 2 != 0)
        throw DimensionError("max_pool2 requires even extents, got " + x->value.shape_string());
    const int Ho = H / 2, Wo = W / 2;

    TensorT<T> out(batched ? std::vector<int>{B, Ho, Wo, C} : std::vector<int>{Ho, Wo, C});
    // Flat index of the winning input element, for gradient routing.
    std::vector<long> argmax(static_cast<size_t>(out.numel()));

    const T* xd = x->value.data();
    T* od = out.data();
    const long x_img = static_cast<long>(H) * W * C;
    const long o_img = static_cast<long>(Ho) * Wo * C;
    for (int b = 0; b < B; ++b) {
        for (int oh = 0; oh < Ho; ++oh) {
            for (int ow = 0; ow < Wo; ++ow) {
                for (int c = 0; c < C; ++c) {
                    long best = b * x_img + ((static_cast<long>(2 * oh) * W) + 2 * ow) * C + c;
                    T bv = xd[best];
                    const int offs[3][2] = {{0, 1}, {1, 0}, {1, 1}};
                    for (const auto& o : offs) {
                        const long idx = b * x_img + ((static_cast<long>(2 * oh + o[0]) * W) + 2 * ow + o[1]) * C + c;
                        if (xd[idx] > bv) {
                            bv = xd[idx];
                            best = idx;
                        }
                    }
                    const long oidx = b * o_img + ((static_cast<long>(oh) * Wo) + ow) * C + c;
                    od[oidx] = bv;
                    argmax[static_cast<size_t>(oidx)] = best;
                }
            }
        }
    }

    auto node = detail::make_op_node(std::move(out), {x});
    if (node->requires_grad) {
        auto* np = node.get();
        auto* xp = x.get();
        node->backward_fn = [np, xp, argmax = std::move(argmax)] {
            xp->ensure_grad();
            for (long i = 0; i < np->grad.numel(); ++i) xp->grad[argmax[static_cast<size_t>(i)]] += np->grad[i];
        };
    }
    return node;
}

// ---------------------------------------------------------------------------
// Batch normalization over [B,H,W,C], per-channel statistics.
// ---------------------------------------------------------------------------

template <typename T>
struct BatchNormStateT {
    VarT<T> gamma;  // [C]
    VarT<T> beta;   // [C]
    TensorT<T> running_mean;
    TensorT<T> running_var;
    T epsilon = T(1e-5);
    T momentum = T(0.1);

    static BatchNormStateT create(int channels, const std::string& name) {
        BatchNormStateT s;
        s.gamma = make_param(TensorT<T>({channels}, T(1)), name + ".gamma");
        s.beta = make_param(TensorT<T>({channels}), name + ".beta");
        s.running_mean = TensorT<T>({channels});
        s.running_var = TensorT<T>({channels}, T(1));
        return s;
    }
};

template <typename T>
VarT<T> batch_norm(const VarT<T>& x, BatchNormStateT<T>& state, RunMode mode) {
    const auto& xs = x->value.shape();
    if (xs.size() != 4) throw DimensionError("batch_norm input must be [B,H,W,C]");
    const int B = xs[0], H = xs[1], W = xs[2], C = xs[3];
    if (state.gamma->value.dim(0) != C)
        throw DimensionError("batch_norm: state has " + std::to_string(state.gamma->value.dim(0)) +
                             " channels, input has " + std::to_string(C));
    if (mode == RunMode::Train && B < 2) throw ConfigError("batch_norm train mode requires batch size >= 2");

    const long m = static_cast<long>(B) * H * W;
    const T* xd = x->value.data();

    std::vector<T> mean(C), var(C);
    if (mode == RunMode::Train) {
        for (int c = 0; c < C; ++c) mean[c] = var[c] = T(0);
        for (long r = 0; r < m; ++r)
            for (int c = 0; c < C; ++c) mean[c] += xd[r * C + c];
        for (int c = 0; c < C; ++c) mean[c] /= static_cast<T>(m);
        for (long r = 0; r < m; ++r)
            for (int c = 0; c < C; ++c) {
                const T d = xd[r * C + c] - mean[c];
                var[c] += d * d;
            }
        for (int c = 0; c < C; ++c) var[c] /= static_cast<T>(m);
        // Exponential update of the running statistics.
        for (int c = 0; c < C; ++c) {
            state.running_mean[c] = (T(1) - state.momentum) * state.running_mean[c] + state.momentum * mean[c];
            state.running_var[c] = (T(1) - state.momentum) * state.running_var[c] + state.momentum * var[c];
        }
    } else {
        for (int c = 0; c < C; ++c) {
            mean[c] = state.running_mean[c];
            var[c] = state.running_var[c];
        }
    }

    std::vector<T> inv_std(C);
    for (int c = 0; c < C; ++c) inv_std[c] = T(1) / std::sqrt(var[c] + state.epsilon);

    TensorT<T> out(xs);
    T* od = out.data();
    const T* gd = state.gamma->value.data();
    const T* bd = state.beta->value.data();
    for (long r = 0; r < m; ++r)
        for (int c = 0; c < C; ++c) od[r * C + c] = gd[c] * (xd[r * C + c] - mean[c]) * inv_std[c] + bd[c];

    auto node = detail::make_op_node(std::move(out), {x, state.gamma, state.beta});
    if (node->requires_grad) {
        auto* np = node.get();
        auto* xp = x.get();
        auto* gp = state.gamma.get();
        auto* bp = state.beta.get();
        const bool train = mode == RunMode::Train;
        node->backward_fn = [np, xp, gp, bp, C, m, mean = std::move(mean), inv_std = std::move(inv_std), train] {
            const T* g = np->grad.data();
            const T* xd2 = xp->value.data();
            const T* gamma = gp->value.data();

            if (gp->requires_grad || bp->requires_grad) {
                gp->ensure_grad();
                bp->ensure_grad();
                T* gg = gp->grad.data();
                T* gb = bp->grad.data();
                for (long r = 0; r < m; ++r)
                    for (int c = 0; c < C; ++c) {
                        const T xhat = (xd2[r * C + c] - mean[c]) * inv_std[c];
                        gg[c] += g[r * C + c] * xhat;
                        gb[c] += g[r * C + c];
                    }
            }
            if (!xp->requires_grad) return;
            xp->ensure_grad();
            T* gx = xp->grad.data();
            if (!train) {
                for (long r = 0; r < m; ++r)
                    for (int c = 0; c < C; ++c) gx[r * C + c] += g[r * C + c] * gamma[c] * inv_std[c];
                return;
            }
            // Train mode: the batch statistics depend on x.
            std::vector<T> sum_g(C, T(0)), sum_gx(C, T(0));
            for (long r = 0; r < m; ++r)
                for (int c = 0; c < C; ++c) {
                    const T gy = g[r * C + c] * gamma[c];
                    sum_g[c] += gy;
                    sum_gx[c] += gy * (xd2[r * C + c] - mean[c]);
                }
            for (long r = 0; r < m; ++r)
                for (int c = 0; c < C; ++c) {
                    const T gy = g[r * C + c] * gamma[c];
                    const T xc = xd2[r * C + c] - mean[c];
                    gx[r * C + c] += inv_std[c] * (gy - sum_g[c] / static_cast<T>(m) -
                                                   xc * inv_std[c] * inv_std[c] * sum_gx[c] / static_cast<T>(m));
                }
        };
    }
    return node;
}

// ---------------------------------------------------------------------------
// Nearest-neighbor x2 upsampling of x, concatenated with the skip tensor
// along channels (skip channels last).
// ---------------------------------------------------------------------------

template <typename T>
VarT<T> upsample2_concat(const VarT<T>& x, const VarT<T>& skip) {
    const auto& xs = x->value.shape();
    const auto& ss = skip->value.shape();
    if (xs.size() != ss.size() || (xs.size() != 3 && xs.size() != 4))
        throw DimensionError("upsample2_concat inputs must both be [H,W,C] or [B,H,W,C]");
    const bool batched = xs.size() == 4;
    const int B = batched ? xs[0] : 1;
    const int H = xs[batched ? 1 : 0], W = xs[batched ? 2 : 1], C1 = xs[batched ? 3 : 2];
    const int SH = ss[batched ? 1 : 0], SW = ss[batched ? 2 : 1], C2 = ss[batched ? 3 : 2];
    if (batched && ss[0] != B) throw DimensionError("upsample2_concat batch mismatch");
    if (SH != 2 * H || SW != 2 * W)
        throw DimensionError("upsample2_concat: skip extents " + skip->value.shape_string() +
                             " must exactly double " + x->value.shape_string());

    const int Co = C1 + C2;
    TensorT<T> out(batched ? std::vector<int>{B, SH, SW, Co} : std::vector<int>{SH, SW, Co});
    const T* xd = x->value.data();
    const T* sd = skip->value.data();
    T* od = out.data();
    const long x_img = static_cast<long>(H) * W * C1;
    const long s_img = static_cast<long>(SH) * SW * C2;
    const long o_img = static_cast<long>(SH) * SW * Co;
    for (int b = 0; b < B; ++b) {
        for (int h = 0; h < SH; ++h) {
            for (int w = 0; w < SW; ++w) {
                T* orow = od + b * o_img + (static_cast<long>(h) * SW + w) * Co;
                const T* xrow = xd + b * x_img + (static_cast<long>(h / 2) * W + w / 2) * C1;
                const T* srow = sd + b * s_img + (static_cast<long>(h) * SW + w) * C2;
                for (int c = 0; c < C1; ++c) orow[c] = xrow[c];
                for (int c = 0; c < C2; ++c) orow[C1 + c] = srow[c];
            }
        }
    }

    auto node = detail::make_op_node(std::move(out), {x, skip});
    if (node->requires_grad) {
        auto* np = node.get();
        auto* xp = x.get();
        auto* sp = skip.get();
        node->backward_fn = [np, xp, sp, B, H, W, C1, C2, SH, SW] {
            const int Co2 = C1 + C2;
            const T* g = np->grad.data();
            const long x_img2 = static_cast<long>(H) * W * C1;
            const long s_img2 = static_cast<long>(SH) * SW * C2;
            const long o_img2 = static_cast<long>(SH) * SW * Co2;
            if (xp->requires_grad) {
                xp->ensure_grad();
                T* gx = xp->grad.data();
                for (int b = 0; b < B; ++b)
                    for (int h = 0; h < SH; ++h)
                        for (int w = 0; w < SW; ++w) {
                            const T* grow = g + b * o_img2 + (static_cast<long>(h) * SW + w) * Co2;
                            T* gxr = gx + b * x_img2 + (static_cast<long>(h / 2) * W + w / 2) * C1;
                            for (int c = 0; c < C1; ++c) gxr[c] += grow[c];
                        }
            }
            if (sp->requires_grad) {
                sp->ensure_grad();
                T* gs = sp->grad.data();
                for (int b = 0; b < B; ++b)
                    for (int h = 0; h < SH; ++h)
                        for (int w = 0; w < SW; ++w) {
                            const T* grow = g + b * o_img2 + (static_cast<long>(h) * SW + w) * Co2;
                            T* gsr = gs + b * s_img2 + (static_cast<long>(h) * SW + w) * C2;
                            for (int c = 0; c < C2; ++c) gsr[c] += grow[C1 + c];
                        }
            }
        };
    }
    return node;
}

// ---------------------------------------------------------------------------
// Dense (fully connected) layer and global average pooling, used by the
// classifier head.
// ---------------------------------------------------------------------------

template <typename T>
VarT<T> dense(const VarT<T>& x, const VarT<T>& w, const VarT<T>& b) {
    const auto& xs = x->value.shape();
    const auto& ws = w->value.shape();
    if (xs.size() != 2 || ws.size() != 2 || xs[1] != ws[0])
        throw DimensionError("dense: x " + x->value.shape_string() + " w " + w->value.shape_string());
    const int B = xs[0], C = xs[1], K = ws[1];
    if (b->value.ndim() != 1 || b->value.dim(0) != K) throw DimensionError("dense: bias must be [K]");

    TensorT<T> out({B, K});
    for (int i = 0; i < B; ++i)
        for (int c = 0; c < C; ++c) {
            const T xv = x->value.at(i, c);
            for (int k = 0; k < K; ++k) out.at(i, k) += xv * w->value.at(c, k);
        }
    for (int i = 0; i < B; ++i)
        for (int k = 0; k < K; ++k) out.at(i, k) += b->value[k];

    auto node = detail::make_op_node(std::move(out), {x, w, b});
    if (node->requires_grad) {
        auto* np = node.get();
        auto* xp = x.get();
        auto* wp = w.get();
        auto* bp = b.get();
        node->backward_fn = [np, xp, wp, bp, B, C, K] {
            const T* g = np->grad.data();
            if (xp->requires_grad) {
                xp->ensure_grad();
                for (int i = 0; i < B; ++i)
                    for (int c = 0; c < C; ++c) {
                        T acc = 0;
                        for (int k = 0; k < K; ++k) acc += g[i * K + k] * wp->value.at(c, k);
                        xp->grad.at(i, c) += acc;
                    }
            }
            if (wp->requires_grad) {
                wp->ensure_grad();
                for (int i = 0; i < B; ++i)
                    for (int c = 0; c < C; ++c) {
                        const T xv = xp->value.at(i, c);
                        for (int k = 0; k < K; ++k) wp->grad.at(c, k) += xv * g[i * K + k];
                    }
            }
            if (bp->requires_grad) {
                bp->ensure_grad();
                for (int i = 0; i < B; ++i)
                    for (int k = 0; k < K; ++k) bp->grad[k] += g[i * K + k];
            }
        };
    }
    return node;
}

template <typename T>
VarT<T> global_avg_pool(const VarT<T>& x) {
    const auto& xs = x->value.shape();
    if (xs.size() != 4) throw DimensionError("global_avg_pool input must be [B,H,W,C]");
    const int B = xs[0], H = xs[1], W = xs[2], C = xs[3];
    const long m = static_cast<long>(H) * W;
    TensorT<T> out({B, C});
    const T* xd = x->value.data();
    for (int b = 0; b < B; ++b)
        for (long r = 0; r < m; ++r)
            for (int c = 0; c < C; ++c) out.at(b, c) += xd[(b * m + r) * C + c];
    for (long i = 0; i < out.numel(); ++i) out[i] /= static_cast<T>(m);

    auto node = detail::make_op_node(std::move(out), {x});
    if (node->requires_grad) {
        auto* np = node.get();
        auto* xp = x.get();
        node->backward_fn = [np, xp, B, C, m] {
            xp->ensure_grad();
            T* gx = xp->grad.data();
            for (int b = 0; b < B; ++b)
                for (long r = 0; r < m; ++r)
                    for (int c = 0; c < C; ++c) gx[(b * m + r) * C + c] += np->grad.at(b, c) / static_cast<T>(m);
        };
    }
    return node;
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

inline constexpr double kProbClip = 1e-7;

// Mean over all entries of -g*log(p) - (1-g)*log(1-p), p clipped away from
// {0,1}. Natural log.
template <typename T>
VarT<T> pixelwise_bce(const VarT<T>& p, const TensorT<T>& g) {
    if (!(p->value.shape() == g.shape()))
        throw DimensionError("pixelwise_bce: prediction " + p->value.shape_string() + " vs target " +
                             g.shape_string());
    for (long i = 0; i < g.numel(); ++i)
        if (g[i] < T(0) || g[i] > T(1)) throw ArgumentError("pixelwise_bce target outside [0,1]");

    const T lo = static_cast<T>(kProbClip), hi = T(1) - static_cast<T>(kProbClip);
    const long n = p->value.numel();
    double acc = 0;
    for (long i = 0; i < n; ++i) {
        const T pc = std::min(hi, std::max(lo, p->value[i]));
        acc += -static_cast<double>(g[i]) * std::log(static_cast<double>(pc)) -
               (1.0 - static_cast<double>(g[i])) * std::log(1.0 - static_cast<double>(pc));
    }
    TensorT<T> out = TensorT<T>::scalar(static_cast<T>(acc / static_cast<double>(n)));

    auto node = detail::make_op_node(std::move(out), {p});
    if (node->requires_grad) {
        auto* np = node.get();
        auto* pp = p.get();
        node->backward_fn = [np, pp, g, lo, hi, n] {
            pp->ensure_grad();
            const T gscale = np->grad[0] / static_cast<T>(n);
            for (long i = 0; i < n; ++i) {
                const T pv = pp->value[i];
                if (pv <= lo || pv >= hi) continue;  // clipped: locally flat
                pp->grad[i] += gscale * (-g[i] / pv + (T(1) - g[i]) / (T(1) - pv));
            }
        };
    }
    return node;
}

// -log(probs[label]) with the same clipping. probs must already lie on the
// simplex (checked to 1e-5). Batched form averages over rows.
template <typename T>
VarT<T> categorical_ce(const VarT<T>& probs, const std::vector<int>& labels) {
    const auto& ps = probs->value.shape();
    const int K = ps.back();
    const long rows = probs->value.numel() / K;
    if (static_cast<long>(labels.size()) != rows)
        throw DimensionError("categorical_ce: " + std::to_string(labels.size()) + " labels for " +
                             std::to_string(rows) + " rows");
    for (long r = 0; r < rows; ++r) {
        if (labels[static_cast<size_t>(r)] < 0 || labels[static_cast<size_t>(r)] >= K)
            throw ArgumentError("categorical_ce label out of range");
        T s = 0;
        for (int k = 0; k < K; ++k) s += probs->value[r * K + k];
        if (std::abs(static_cast<double>(s) - 1.0) > 1e-5)
            throw ArgumentError("categorical_ce probabilities do not sum to 1");
    }

    const T lo = static_cast<T>(kProbClip), hi = T(1) - static_cast<T>(kProbClip);
    double acc = 0;
    for (long r = 0; r < rows; ++r) {
        const T pc = std::min(hi, std::max(lo, probs->value[r * K + labels[static_cast<size_t>(r)]]));
        acc += -std::log(static_cast<double>(pc));
    }
    TensorT<T> out = TensorT<T>::scalar(static_cast<T>(acc / static_cast<double>(rows)));

    auto node = detail::make_op_node(std::move(out), {probs});
    if (node->requires_grad) {
        auto* np = node.get();
        auto* pp = probs.get();
        node->backward_fn = [np, pp, labels, K, rows, lo, hi] {
            pp->ensure_grad();
            const T gscale = np->grad[0] / static_cast<T>(rows);
            for (long r = 0; r < rows; ++r) {
                const long idx = r * K + labels[static_cast<size_t>(r)];
                const T pv = pp->value[idx];
                if (pv <= lo || pv >= hi) continue;
                pp->grad[idx] += gscale * (-T(1) / pv);
            }
        };
    }
    return node;
}

template <typename T>
VarT<T> categorical_ce(const VarT<T>& probs, int label) {
    if (probs->value.ndim() != 1) throw DimensionError("categorical_ce expects a probability vector");
    return categorical_ce(probs, std::vector<int>{label});
}

template <typename T>
VarT<T> sum(const VarT<T>& x) {
    TensorT<T> out = TensorT<T>::scalar(x->value.sum());
    auto node = detail::make_op_node(std::move(out), {x});
    if (node->requires_grad) {
        auto* np = node.get();
        auto* xp = x.get();
        node->backward_fn = [np, xp] {
            xp->ensure_grad();
            for (long i = 0; i < xp->grad.numel(); ++i) xp->grad[i] += np->grad[0];
        };
    }
    return node;
}

// ---------------------------------------------------------------------------
// Reverse-mode sweep: seeds d(loss)/d(loss)=1 and accumulates into every
// reachable node with requires_grad, in reverse topological order.
// ---------------------------------------------------------------------------

template <typename T>
void backward(const VarT<T>& loss) {
    if (!loss) throw StateError("backward on empty graph");
    if (loss->value.numel() != 1) throw StateError("backward requires a scalar loss");
    if (loss->backward_done) throw StateError("backward called twice on the same recorded graph");

    std::vector<VarNodeT<T>*> order;
    std::unordered_set<VarNodeT<T>*> visited;
    std::vector<std::pair<VarNodeT<T>*, size_t>> stack;
    stack.emplace_back(loss.get(), 0);
    visited.insert(loss.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            VarNodeT<T>* p = node->parents[next++].get();
            if (!visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    loss->ensure_grad();
    loss->grad[0] = T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        if ((*it)->backward_fn) (*it)->backward_fn();
        (*it)->backward_done = true;
    }
}

}  // namespace ccm
