#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "genco/error.hpp"
#include "genco/graph.hpp"
#include "genco/kernels.hpp"
#include "genco/tensor.hpp"

// Differentiable operator set on Var<T>. Every op returns a fresh Var whose
// backward closure accumulates into the inputs. Reductions that feed the
// contrastive loss (log_sum_exp) sum their terms in a canonical value-sorted
// order so results are bitwise invariant under permutation of the inputs.

namespace genco::ops {

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    if (!a.value().same_shape(b.value())) shape_fail("add", a.shape(), b.shape());
    Tensor<T> out = a.value();
    out.add_(b.value());
    auto an = a.node(), bn = b.node();
    return Var<T>::make_result(std::move(out), {a, b}, [an, bn](Node<T>& self) {
        if (an->requires_grad) an->accumulate(self.grad);
        if (bn->requires_grad) bn->accumulate(self.grad);
    });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    if (!a.value().same_shape(b.value())) shape_fail("sub", a.shape(), b.shape());
    Tensor<T> out = a.value();
    for (size_t i = 0; i < out.numel(); ++i) out.data()[i] -= b.value().data()[i];
    auto an = a.node(), bn = b.node();
    return Var<T>::make_result(std::move(out), {a, b}, [an, bn](Node<T>& self) {
        if (an->requires_grad) an->accumulate(self.grad);
        if (bn->requires_grad) {
            Tensor<T> g = self.grad;
            for (size_t i = 0; i < g.numel(); ++i) g.data()[i] = -g.data()[i];
            bn->accumulate(g);
        }
    });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    if (!a.value().same_shape(b.value())) shape_fail("mul", a.shape(), b.shape());
    Tensor<T> out = a.value();
    for (size_t i = 0; i < out.numel(); ++i) out.data()[i] *= b.value().data()[i];
    auto an = a.node(), bn = b.node();
    return Var<T>::make_result(std::move(out), {a, b}, [an, bn](Node<T>& self) {
        if (an->requires_grad) {
            Tensor<T> g = self.grad;
            for (size_t i = 0; i < g.numel(); ++i) g.data()[i] *= bn->value.data()[i];
            an->accumulate(g);
        }
        if (bn->requires_grad) {
            Tensor<T> g = self.grad;
            for (size_t i = 0; i < g.numel(); ++i) g.data()[i] *= an->value.data()[i];
            bn->accumulate(g);
        }
    });
}

template <class T>
Var<T> scale(const Var<T>& a, T c) {
    Tensor<T> out = a.value();
    for (size_t i = 0; i < out.numel(); ++i) out.data()[i] *= c;
    auto an = a.node();
    return Var<T>::make_result(std::move(out), {a}, [an, c](Node<T>& self) {
        if (!an->requires_grad) return;
        Tensor<T> g = self.grad;
        for (size_t i = 0; i < g.numel(); ++i) g.data()[i] *= c;
        an->accumulate(g);
    });
}

template <class T>
Var<T> relu(const Var<T>& a) {
    Tensor<T> out = a.value();
    for (size_t i = 0; i < out.numel(); ++i) out.data()[i] = std::max(out.data()[i], T(0));
    auto an = a.node();
    return Var<T>::make_result(std::move(out), {a}, [an](Node<T>& self) {
        if (!an->requires_grad) return;
        Tensor<T> g = self.grad;
        for (size_t i = 0; i < g.numel(); ++i)
            if (an->value.data()[i] <= T(0)) g.data()[i] = T(0);
        an->accumulate(g);
    });
}

template <class T>
Var<T> mean_all(const Var<T>& a) {
    if (a.numel() == 0) throw Error("mean of empty tensor");
    T acc = T(0);
    for (size_t i = 0; i < a.numel(); ++i) acc += a.value().data()[i];
    const T inv = T(1) / T(a.numel());
    Tensor<T> out = Tensor<T>::scalar(acc * inv);
    auto an = a.node();
    return Var<T>::make_result(std::move(out), {a}, [an, inv](Node<T>& self) {
        if (!an->requires_grad) return;
        Tensor<T> g = Tensor<T>::full(an->value.shape(), self.grad.data()[0] * inv);
        an->accumulate(g);
    });
}

template <class T>
Var<T> reshape(const Var<T>& a, std::vector<int> new_shape) {
    Tensor<T> out = a.value().reshaped(new_shape);
    auto an = a.node();
    return Var<T>::make_result(std::move(out), {a}, [an](Node<T>& self) {
        if (!an->requires_grad) return;
        an->accumulate(self.grad.reshaped(an->value.shape()));
    });
}

// ---------------------------------------------------------------------------
// concatenation
// ---------------------------------------------------------------------------

template <class T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
    if (parts.empty()) throw Error("concat_cols with no inputs");
    const int B = parts[0].shape().at(0);
    int total = 0;
    for (const auto& p : parts) {
        if (p.shape().size() != 2 || p.shape()[0] != B)
            shape_fail("concat_cols", parts[0].shape(), p.shape());
        total += p.shape()[1];
    }
    Tensor<T> out = Tensor<T>::zeros({B, total});
    int off = 0;
    for (const auto& p : parts) {
        const int D = p.shape()[1];
        for (int b = 0; b < B; ++b)
            for (int d = 0; d < D; ++d)
                out.data()[(size_t)b * total + off + d] = p.value().data()[(size_t)b * D + d];
        off += D;
    }
    std::vector<std::shared_ptr<Node<T>>> nodes;
    for (const auto& p : parts) nodes.push_back(p.node());
    return Var<T>::make_result(std::move(out), parts, [nodes, B, total](Node<T>& self) {
        int off = 0;
        for (const auto& n : nodes) {
            const int D = n->value.shape()[1];
            if (n->requires_grad) {
                Tensor<T> g = Tensor<T>::zeros(n->value.shape());
                for (int b = 0; b < B; ++b)
                    for (int d = 0; d < D; ++d)
                        g.data()[(size_t)b * D + d] = self.grad.data()[(size_t)b * total + off + d];
                n->accumulate(g);
            }
            off += D;
        }
    });
}

template <class T>
Var<T> concat_rows(const Var<T>& a, const Var<T>& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[1])
        shape_fail("concat_rows", a.shape(), b.shape());
    const int Ba = a.shape()[0], Bb = b.shape()[0], D = a.shape()[1];
    Tensor<T> out = Tensor<T>::zeros({Ba + Bb, D});
    std::copy(a.value().vec().begin(), a.value().vec().end(), out.vec().begin());
    std::copy(b.value().vec().begin(), b.value().vec().end(),
              out.vec().begin() + (size_t)Ba * D);
    auto an = a.node(), bn = b.node();
    return Var<T>::make_result(std::move(out), {a, b}, [an, bn, Ba, Bb, D](Node<T>& self) {
        if (an->requires_grad) {
            Tensor<T> g = Tensor<T>::zeros({Ba, D});
            std::copy(self.grad.vec().begin(), self.grad.vec().begin() + (size_t)Ba * D,
                      g.vec().begin());
            an->accumulate(g);
        }
        if (bn->requires_grad) {
            Tensor<T> g = Tensor<T>::zeros({Bb, D});
            std::copy(self.grad.vec().begin() + (size_t)Ba * D, self.grad.vec().end(),
                      g.vec().begin());
            bn->accumulate(g);
        }
    });
}

// Channel concat of two NCHW maps (segmentation skip connections).
template <class T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
    const auto& sa = a.shape();
    const auto& sb = b.shape();
    if (sa.size() != 4 || sb.size() != 4 || sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3])
        shape_fail("concat_channels", sa, sb);
    const int B = sa[0], Ca = sa[1], Cb = sb[1], H = sa[2], W = sa[3];
    const size_t plane = (size_t)H * W;
    Tensor<T> out = Tensor<T>::zeros({B, Ca + Cb, H, W});
    for (int n = 0; n < B; ++n) {
        std::copy(a.value().vec().begin() + (size_t)n * Ca * plane,
                  a.value().vec().begin() + (size_t)(n + 1) * Ca * plane,
                  out.vec().begin() + (size_t)n * (Ca + Cb) * plane);
        std::copy(b.value().vec().begin() + (size_t)n * Cb * plane,
                  b.value().vec().begin() + (size_t)(n + 1) * Cb * plane,
                  out.vec().begin() + ((size_t)n * (Ca + Cb) + Ca) * plane);
    }
    auto an = a.node(), bn = b.node();
    return Var<T>::make_result(std::move(out), {a, b},
                               [an, bn, B, Ca, Cb, plane](Node<T>& self) {
        if (an->requires_grad) {
            Tensor<T> g = Tensor<T>::zeros(an->value.shape());
            for (int n = 0; n < B; ++n)
                std::copy(self.grad.vec().begin() + (size_t)n * (Ca + Cb) * plane,
                          self.grad.vec().begin() + ((size_t)n * (Ca + Cb) + Ca) * plane,
                          g.vec().begin() + (size_t)n * Ca * plane);
            an->accumulate(g);
        }
        if (bn->requires_grad) {
            Tensor<T> g = Tensor<T>::zeros(bn->value.shape());
            for (int n = 0; n < B; ++n)
                std::copy(self.grad.vec().begin() + ((size_t)n * (Ca + Cb) + Ca) * plane,
                          self.grad.vec().begin() + (size_t)(n + 1) * (Ca + Cb) * plane,
                          g.vec().begin() + (size_t)n * Cb * plane);
            bn->accumulate(g);
        }
    });
}

// ---------------------------------------------------------------------------
// matrix ops
// ---------------------------------------------------------------------------

template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
    const auto& sa = a.shape();
    const auto& sb = b.shape();
    if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0]) shape_fail("matmul", sa, sb);
    const int M = sa[0], K = sa[1], N = sb[1];
    Tensor<T> out = Tensor<T>::zeros({M, N});
    kernels::matmul_nn(a.value().data(), b.value().data(), out.data(), M, K,
                       N);
    auto an = a.node(), bn = b.node();
    return Var<T>::make_result(std::move(out), {a, b}, [an, bn, M, K, N](Node<T>& self) {
        if (an->requires_grad) {  // dA = G * B^T
            Tensor<T> g = Tensor<T>::zeros({M, K});
            kernels::matmul_nt(self.grad.data(), bn->value.data(), g.data(),
                               M, N, K);
            an->accumulate(g);
        }
        if (bn->requires_grad) {  // dB = A^T * G
            Tensor<T> g = Tensor<T>::zeros({K, N});
            kernels::matmul_tn(an->value.data(), self.grad.data(), g.data(),
                               K, M, N);
            bn->accumulate(g);
        }
    });
}

// a[M,K] * b[N,K]^T -> [M,N]; every row of a against every row of b.
template <class T>
Var<T> matmul_nt(const Var<T>& a, const Var<T>& b) {
    const auto& sa = a.shape();
    const auto& sb = b.shape();
    if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[1]) shape_fail("matmul_nt", sa, sb);
    const int M = sa[0], K = sa[1], N = sb[0];
    Tensor<T> out = Tensor<T>::zeros({M, N});
    kernels::matmul_nt(a.value().data(), b.value().data(), out.data(), M, K,
                       N);
    auto an = a.node(), bn = b.node();
    return Var<T>::make_result(std::move(out), {a, b}, [an, bn, M, K, N](Node<T>& self) {
        if (an->requires_grad) {  // dA = G * B
            Tensor<T> g = Tensor<T>::zeros({M, K});
            kernels::matmul_nn(self.grad.data(), bn->value.data(), g.data(),
                               M, N, K);
            an->accumulate(g);
        }
        if (bn->requires_grad) {  // dB = G^T * A
            Tensor<T> g = Tensor<T>::zeros({N, K});
            kernels::matmul_tn(self.grad.data(), an->value.data(), g.data(),
                               N, M, K);
            bn->accumulate(g);
        }
    });
}

// y = x * W^T + bias, x [B,IN], W [OUT,IN], bias [OUT]
template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& bias) {
    const auto& sx = x.shape();
    const auto& sw = w.shape();
    if (sx.size() != 2 || sw.size() != 2 || sx[1] != sw[1]) shape_fail("linear", sx, sw);
    const int B = sx[0], IN = sx[1], OUT = sw[0];
    if (bias.shape() != std::vector<int>{OUT}) shape_fail("linear bias", sw, bias.shape());
    Tensor<T> out = Tensor<T>::zeros({B, OUT});
    kernels::matmul_nt(x.value().data(), w.value().data(), out.data(), B, IN,
                       OUT);
    for (int b = 0; b < B; ++b)
        for (int o = 0; o < OUT; ++o) out.data()[(size_t)b * OUT + o] += bias.value().data()[o];
    auto xn = x.node(), wn = w.node(), biasn = bias.node();
    return Var<T>::make_result(std::move(out), {x, w, bias},
                               [xn, wn, biasn, B, IN, OUT](Node<T>& self) {
        if (xn->requires_grad) {  // dX = G * W
            Tensor<T> g = Tensor<T>::zeros({B, IN});
            kernels::matmul_nn(self.grad.data(), wn->value.data(), g.data(),
                               B, OUT, IN);
            xn->accumulate(g);
        }
        if (wn->requires_grad) {  // dW = G^T * X
            Tensor<T> g = Tensor<T>::zeros({OUT, IN});
            kernels::matmul_tn(self.grad.data(), xn->value.data(), g.data(),
                               OUT, B, IN);
            wn->accumulate(g);
        }
        if (biasn->requires_grad) {
            Tensor<T> g = Tensor<T>::zeros({OUT});
            for (int b = 0; b < B; ++b)
                for (int o = 0; o < OUT; ++o) g.data()[o] += self.grad.data()[(size_t)b * OUT + o];
            biasn->accumulate(g);
        }
    });
}

// Per-row dot product of equal-shape [B,D] matrices -> [B,1].
template <class T>
Var<T> rowwise_dot(const Var<T>& a, const Var<T>& b) {
    if (!a.value().same_shape(b.value()) || a.shape().size() != 2)
        shape_fail("rowwise_dot", a.shape(), b.shape());
    const int B = a.shape()[0], D = a.shape()[1];
    Tensor<T> out = Tensor<T>::zeros({B, 1});
    for (int i = 0; i < B; ++i) {
        T acc = T(0);
        for (int d = 0; d < D; ++d)
            acc += a.value().data()[(size_t)i * D + d] * b.value().data()[(size_t)i * D + d];
        out.data()[i] = acc;
    }
    auto an = a.node(), bn = b.node();
    return Var<T>::make_result(std::move(out), {a, b}, [an, bn, B, D](Node<T>& self) {
        if (an->requires_grad) {
            Tensor<T> g = Tensor<T>::zeros({B, D});
            for (int i = 0; i < B; ++i)
                for (int d = 0; d < D; ++d)
                    g.data()[(size_t)i * D + d] = self.grad.data()[i] * bn->value.data()[(size_t)i * D + d];
            an->accumulate(g);
        }
        if (bn->requires_grad) {
            Tensor<T> g = Tensor<T>::zeros({B, D});
            for (int i = 0; i < B; ++i)
                for (int d = 0; d < D; ++d)
                    g.data()[(size_t)i * D + d] = self.grad.data()[i] * an->value.data()[(size_t)i * D + d];
            bn->accumulate(g);
        }
    });
}

// ---------------------------------------------------------------------------
// normalization & reductions
// ---------------------------------------------------------------------------

// Row-wise L2 normalization. Accepts [D] (one row, shape kept) or [B,D].
// The norm is clamped from below at 1e-12, so a dead row maps to zeros
// instead of aborting a long training run (matching common framework
// semantics); the clamp also keeps the backward pass finite there.
template <class T>
Var<T> l2_normalize(const Var<T>& a) {
    const auto& s = a.shape();
    if (s.size() != 1 && s.size() != 2) throw ShapeError("l2_normalize expects rank 1 or 2, got " + shape_str(s));
    const int B = s.size() == 2 ? s[0] : 1;
    const int D = s.size() == 2 ? s[1] : s[0];
    Tensor<T> out = a.value();
    std::vector<T> inv_norm((size_t)B);
    for (int b = 0; b < B; ++b) {
        T ss = T(0);
        for (int d = 0; d < D; ++d) {
            const T v = a.value().data()[(size_t)b * D + d];
            ss += v * v;
        }
        const T n = std::max(std::sqrt(ss), T(1e-12));
        inv_norm[b] = T(1) / n;
        for (int d = 0; d < D; ++d) out.data()[(size_t)b * D + d] /= n;
    }
    auto an = a.node();
    Tensor<T> y = out;  // keep normalized values for the backward closure
    return Var<T>::make_result(std::move(out), {a},
                               [an, y = std::move(y), inv_norm = std::move(inv_norm), B, D](Node<T>& self) {
        if (!an->requires_grad) return;
        // d/dx (x/|x|) applied to g: (g - y*(g.y)) / |x|
        Tensor<T> g = Tensor<T>::zeros(an->value.shape());
        for (int b = 0; b < B; ++b) {
            T dot = T(0);
            for (int d = 0; d < D; ++d)
                dot += self.grad.data()[(size_t)b * D + d] * y.data()[(size_t)b * D + d];
            for (int d = 0; d < D; ++d)
                g.data()[(size_t)b * D + d] =
                    (self.grad.data()[(size_t)b * D + d] - y.data()[(size_t)b * D + d] * dot) * inv_norm[b];
        }
        an->accumulate(g);
    });
}

// Row-wise log-sum-exp. [N] -> scalar, [B,N] -> [B,1]. The shifted
// exponentials are summed in ascending value order (a canonical order), so
// the result is bitwise invariant under any permutation of the row.
template <class T>
Var<T> log_sum_exp(const Var<T>& a) {
    const auto& s = a.shape();
    if (s.size() != 1 && s.size() != 2) throw ShapeError("log_sum_exp expects rank 1 or 2, got " + shape_str(s));
    const int B = s.size() == 2 ? s[0] : 1;
    const int N = s.size() == 2 ? s[1] : s[0];
    if (N == 0) throw Error("log_sum_exp of empty row");
    Tensor<T> out = s.size() == 2 ? Tensor<T>::zeros({B, 1}) : Tensor<T>::scalar(T(0));
    std::vector<T> buf((size_t)N);
    for (int b = 0; b < B; ++b) {
        const T* row = a.value().data() + (size_t)b * N;
        T m = row[0];
        for (int j = 1; j < N; ++j) m = std::max(m, row[j]);
        for (int j = 0; j < N; ++j) buf[(size_t)j] = std::exp(row[j] - m);
        std::sort(buf.begin(), buf.end());
        T ssum = T(0);
        for (int j = 0; j < N; ++j) ssum += buf[(size_t)j];
        out.data()[b] = m + std::log(ssum);
    }
    auto an = a.node();
    Tensor<T> lse = out;
    return Var<T>::make_result(std::move(out), {a}, [an, lse = std::move(lse), B, N](Node<T>& self) {
        if (!an->requires_grad) return;
        // d lse / d x_j = softmax_j = exp(x_j - lse); elementwise, so the
        // gradient permutes exactly with the inputs.
        Tensor<T> g = Tensor<T>::zeros(an->value.shape());
        for (int b = 0; b < B; ++b)
            for (int j = 0; j < N; ++j)
                g.data()[(size_t)b * N + j] =
                    self.grad.data()[b] * std::exp(an->value.data()[(size_t)b * N + j] - lse.data()[b]);
        an->accumulate(g);
    });
}

// ---------------------------------------------------------------------------
// spatial ops
// ---------------------------------------------------------------------------

inline int conv_out_dim(int in, int k, int stride, int pad) {
    return (in + 2 * pad - k) / stride + 1;
}

template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& bias, int stride, int pad) {
    const auto& sx = x.shape();
    const auto& sw = w.shape();
    if (sx.size() != 4 || sw.size() != 4 || sx[1] != sw[1]) shape_fail("conv2d", sx, sw);
    const int B = sx[0], C = sx[1], H = sx[2], W = sx[3];
    const int OC = sw[0], K = sw[2];
    if (sw[3] != K) shape_fail("conv2d kernel", sw, sw);
    if (bias.shape() != std::vector<int>{OC}) shape_fail("conv2d bias", sw, bias.shape());
    const int OH = conv_out_dim(H, K, stride, pad), OW = conv_out_dim(W, K, stride, pad);
    if (OH <= 0 || OW <= 0) throw ShapeError("conv2d output collapses on input " + shape_str(sx));
    Tensor<T> out = Tensor<T>::zeros({B, OC, OH, OW});
    kernels::conv2d_fwd(x.value().data(), w.value().data(),
                        bias.value().data(), out.data(), B, C, H, W, OC, K, stride,
                        pad, OH, OW);
    auto xn = x.node(), wn = w.node(), biasn = bias.node();
    return Var<T>::make_result(std::move(out), {x, w, bias},
                               [xn, wn, biasn, B, C, H, W, OC, K, stride, pad, OH, OW](Node<T>& self) {
        if (xn->requires_grad) {
            Tensor<T> g = Tensor<T>::zeros(xn->value.shape());
            kernels::conv2d_bwd_input(self.grad.data(), wn->value.data(),
                                      g.data(), B, C, H, W, OC, K, stride, pad, OH, OW);
            xn->accumulate(g);
        }
        if (wn->requires_grad || biasn->requires_grad) {
            Tensor<T> gw = Tensor<T>::zeros(wn->value.shape());
            Tensor<T> gb = Tensor<T>::zeros({OC});
            kernels::conv2d_bwd_params(self.grad.data(), xn->value.data(),
                                       gw.data(), gb.data(), B, C, H, W, OC, K,
                                       stride, pad, OH, OW);
            if (wn->requires_grad) wn->accumulate(gw);
            if (biasn->requires_grad) biasn->accumulate(gb);
        }
    });
}

// Transposed convolution; weights [C,OC,K,K], output (H-1)*stride + K.
template <class T>
Var<T> transposed_conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& bias, int stride) {
    const auto& sx = x.shape();
    const auto& sw = w.shape();
    if (sx.size() != 4 || sw.size() != 4 || sx[1] != sw[0]) shape_fail("transposed_conv2d", sx, sw);
    const int B = sx[0], C = sx[1], H = sx[2], W = sx[3];
    const int OC = sw[1], K = sw[2];
    if (sw[3] != K) shape_fail("transposed_conv2d kernel", sw, sw);
    if (bias.shape() != std::vector<int>{OC}) shape_fail("transposed_conv2d bias", sw, bias.shape());
    const int OH = (H - 1) * stride + K, OW = (W - 1) * stride + K;
    Tensor<T> out = Tensor<T>::zeros({B, OC, OH, OW});
    kernels::deconv2d_fwd(x.value().data(), w.value().data(),
                          bias.value().data(), out.data(), B, C, H, W, OC, K, stride,
                          OH, OW);
    auto xn = x.node(), wn = w.node(), biasn = bias.node();
    return Var<T>::make_result(std::move(out), {x, w, bias},
                               [xn, wn, biasn, B, C, H, W, OC, K, stride, OH, OW](Node<T>& self) {
        if (xn->requires_grad) {
            Tensor<T> g = Tensor<T>::zeros(xn->value.shape());
            kernels::deconv2d_bwd_input(self.grad.data(), wn->value.data(),
                                        g.data(), B, C, H, W, OC, K, stride, OH, OW);
            xn->accumulate(g);
        }
        if (wn->requires_grad || biasn->requires_grad) {
            Tensor<T> gw = Tensor<T>::zeros(wn->value.shape());
            Tensor<T> gb = Tensor<T>::zeros({OC});
            kernels::deconv2d_bwd_params(self.grad.data(), xn->value.data(),
                                         gw.data(), gb.data(), B, C, H, W, OC, K,
                                         stride, OH, OW);
            if (wn->requires_grad) wn->accumulate(gw);
            if (biasn->requires_grad) biasn->accumulate(gb);
        }
    });
}

// 2x2 max pooling with stride 2; ties keep the first element in window scan
// order, which makes the backward scatter deterministic.
template <class T>
Var<T> max_pool2(const Var<T>& x) {
    const auto& s = x.shape();
    if (s.size() != 4) throw ShapeError("max_pool2 expects NCHW, got " + shape_str(s));
    const int B = s[0], C = s[1], H = s[2], W = s[3];
    if (H % 2 != 0 || W % 2 != 0)
        throw ShapeError("max_pool2 needs even spatial dims, got " + shape_str(s));
    const int OH = H / 2, OW = W / 2;
    Tensor<T> out = Tensor<T>::zeros({B, C, OH, OW});
    std::vector<uint32_t> arg((size_t)B * C * OH * OW);
    for (int b = 0; b < B; ++b) {
        for (int c = 0; c < C; ++c) {
            for (int oy = 0; oy < OH; ++oy) {
                for (int ox = 0; ox < OW; ++ox) {
                    T best = -std::numeric_limits<T>::infinity();
                    uint32_t best_idx = 0;
                    for (int ky = 0; ky < 2; ++ky) {
                        for (int kx = 0; kx < 2; ++kx) {
                            const size_t idx = (((size_t)b * C + c) * H + oy * 2 + ky) * W + ox * 2 + kx;
                            if (x.value().data()[idx] > best) {
                                best = x.value().data()[idx];
                                best_idx = (uint32_t)idx;
                            }
                        }
                    }
                    const size_t oidx = (((size_t)b * C + c) * OH + oy) * OW + ox;
                    out.data()[oidx] = best;
                    arg[oidx] = best_idx;
                }
            }
        }
    }
    auto xn = x.node();
    return Var<T>::make_result(std::move(out), {x}, [xn, arg = std::move(arg)](Node<T>& self) {
        if (!xn->requires_grad) return;
        Tensor<T> g = Tensor<T>::zeros(xn->value.shape());
        for (size_t i = 0; i < arg.size(); ++i) g.data()[arg[i]] += self.grad.data()[i];
        xn->accumulate(g);
    });
}

template <class T>
Var<T> global_avg_pool(const Var<T>& x) {
    const auto& s = x.shape();
    if (s.size() != 4) throw ShapeError("global_avg_pool expects NCHW, got " + shape_str(s));
    const int B = s[0], C = s[1], H = s[2], W = s[3];
    const T inv = T(1) / T((size_t)H * W);
    Tensor<T> out = Tensor<T>::zeros({B, C});
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
            T acc = T(0);
            const T* p = x.value().data() + (((size_t)b * C + c) * H) * W;
            for (int i = 0; i < H * W; ++i) acc += p[i];
            out.data()[(size_t)b * C + c] = acc * inv;
        }
    auto xn = x.node();
    return Var<T>::make_result(std::move(out), {x}, [xn, B, C, H, W, inv](Node<T>& self) {
        if (!xn->requires_grad) return;
        Tensor<T> g = Tensor<T>::zeros(xn->value.shape());
        for (int b = 0; b < B; ++b)
            for (int c = 0; c < C; ++c) {
                const T gv = self.grad.data()[(size_t)b * C + c] * inv;
                T* p = g.data() + (((size_t)b * C + c) * H) * W;
                for (int i = 0; i < H * W; ++i) p[i] = gv;
            }
        xn->accumulate(g);
    });
}

// Adds a per-(sample,channel) vector v[B,C] to every spatial position of
// x[B,C,H,W] (bottleneck perturbation broadcast).
template <class T>
Var<T> broadcast_add_chan(const Var<T>& x, const Var<T>& v) {
    const auto& s = x.shape();
    if (s.size() != 4 || v.shape() != std::vector<int>{s[0], s[1]})
        shape_fail("broadcast_add_chan", s, v.shape());
    const int B = s[0], C = s[1], H = s[2], W = s[3];
    Tensor<T> out = x.value();
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
            const T vv = v.value().data()[(size_t)b * C + c];
            T* p = out.data() + (((size_t)b * C + c) * H) * W;
            for (int i = 0; i < H * W; ++i) p[i] += vv;
        }
    auto xn = x.node(), vn = v.node();
    return Var<T>::make_result(std::move(out), {x, v}, [xn, vn, B, C, H, W](Node<T>& self) {
        if (xn->requires_grad) xn->accumulate(self.grad);
        if (vn->requires_grad) {
            Tensor<T> g = Tensor<T>::zeros({B, C});
            for (int b = 0; b < B; ++b)
                for (int c = 0; c < C; ++c) {
                    T acc = T(0);
                    const T* p = self.grad.data() + (((size_t)b * C + c) * H) * W;
                    for (int i = 0; i < H * W; ++i) acc += p[i];
                    g.data()[(size_t)b * C + c] = acc;
                }
            vn->accumulate(g);
        }
    });
}

// ---------------------------------------------------------------------------
// batch normalization
// ---------------------------------------------------------------------------

// Spatial batch norm over NCHW. In training mode normalizes with batch
// statistics (biased variance) and updates the caller's running buffers with
// momentum 0.1 (unbiased variance when possible); in eval mode uses the
// running buffers. Running buffers are plain tensors owned by the layer, not
// graph nodes.
template <class T>
Var<T> batch_norm2d(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                    Tensor<T>& running_mean, Tensor<T>& running_var, bool training,
                    T momentum = T(0.1), T eps = T(1e-5)) {
    const auto& s = x.shape();
    if (s.size() != 4) throw ShapeError("batch_norm2d expects NCHW, got " + shape_str(s));
    const int B = s[0], C = s[1], H = s[2], W = s[3];
    if (gamma.shape() != std::vector<int>{C} || beta.shape() != std::vector<int>{C})
        shape_fail("batch_norm2d params", s, gamma.shape());
    const size_t n = (size_t)B * H * W;

    std::vector<T> mean((size_t)C), invstd((size_t)C);
    if (training) {
        for (int c = 0; c < C; ++c) {
            T acc = T(0);
            for (int b = 0; b < B; ++b) {
                const T* p = x.value().data() + (((size_t)b * C + c) * H) * W;
                for (int i = 0; i < H * W; ++i) acc += p[i];
            }
            const T mu = acc / T(n);
            T vacc = T(0);
            for (int b = 0; b < B; ++b) {
                const T* p = x.value().data() + (((size_t)b * C + c) * H) * W;
                for (int i = 0; i < H * W; ++i) {
                    const T d = p[i] - mu;
                    vacc += d * d;
                }
            }
            const T var_biased = vacc / T(n);
            mean[(size_t)c] = mu;
            invstd[(size_t)c] = T(1) / std::sqrt(var_biased + eps);
            const T var_running = n > 1 ? vacc / T(n - 1) : var_biased;
            running_mean.data()[c] = (T(1) - momentum) * running_mean.data()[c] + momentum * mu;
            running_var.data()[c] = (T(1) - momentum) * running_var.data()[c] + momentum * var_running;
        }
    } else {
        for (int c = 0; c < C; ++c) {
            mean[(size_t)c] = running_mean.data()[c];
            invstd[(size_t)c] = T(1) / std::sqrt(running_var.data()[c] + eps);
        }
    }

    Tensor<T> out = Tensor<T>::zeros(s);
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
            const T* p = x.value().data() + (((size_t)b * C + c) * H) * W;
            T* q = out.data() + (((size_t)b * C + c) * H) * W;
            const T g = gamma.value().data()[c], be = beta.value().data()[c];
            for (int i = 0; i < H * W; ++i) q[i] = g * (p[i] - mean[(size_t)c]) * invstd[(size_t)c] + be;
        }

    auto xn = x.node(), gn = gamma.node(), bn = beta.node();
    return Var<T>::make_result(
        std::move(out), {x, gamma, beta},
        [xn, gn, bn, mean = std::move(mean), invstd = std::move(invstd), training, B, C, H, W,
         n](Node<T>& self) {
            const int HW = H * W;
            Tensor<T> gx = xn->requires_grad ? Tensor<T>::zeros(xn->value.shape()) : Tensor<T>();
            Tensor<T> gg = Tensor<T>::zeros({C}), gb = Tensor<T>::zeros({C});
            for (int c = 0; c < C; ++c) {
                // per-channel reductions over the batch
                T sum_g = T(0), sum_gx = T(0);
                for (int b = 0; b < B; ++b) {
                    const T* gp = self.grad.data() + (((size_t)b * C + c) * H) * W;
                    const T* xp = xn->value.data() + (((size_t)b * C + c) * H) * W;
                    for (int i = 0; i < HW; ++i) {
                        const T xhat = (xp[i] - mean[(size_t)c]) * invstd[(size_t)c];
                        sum_g += gp[i];
                        sum_gx += gp[i] * xhat;
                    }
                }
                gb.data()[c] = sum_g;
                gg.data()[c] = sum_gx;
                if (!xn->requires_grad) continue;
                const T gam = gn->value.data()[c];
                if (training) {
                    const T inv_n = T(1) / T(n);
                    for (int b = 0; b < B; ++b) {
                        const T* gp = self.grad.data() + (((size_t)b * C + c) * H) * W;
                        const T* xp = xn->value.data() + (((size_t)b * C + c) * H) * W;
                        T* op = gx.data() + (((size_t)b * C + c) * H) * W;
                        for (int i = 0; i < HW; ++i) {
                            const T xhat = (xp[i] - mean[(size_t)c]) * invstd[(size_t)c];
                            op[i] = gam * invstd[(size_t)c] *
                                    (gp[i] - inv_n * sum_g - xhat * inv_n * sum_gx);
                        }
                    }
                } else {
                    for (int b = 0; b < B; ++b) {
                        const T* gp = self.grad.data() + (((size_t)b * C + c) * H) * W;
                        T* op = gx.data() + (((size_t)b * C + c) * H) * W;
                        for (int i = 0; i < HW; ++i) op[i] = gam * invstd[(size_t)c] * gp[i];
                    }
                }
            }
            if (xn->requires_grad) xn->accumulate(gx);
            if (gn->requires_grad) gn->accumulate(gg);
            if (bn->requires_grad) bn->accumulate(gb);
        });
}

// ---------------------------------------------------------------------------
// classification / segmentation losses
// ---------------------------------------------------------------------------

// Mean softmax cross-entropy over rows of logits [B,C] with integer labels.
template <class T>
Var<T> softmax_cross_entropy(const Var<T>& logits, const std::vector<int>& labels) {
    const auto& s = logits.shape();
    if (s.size() != 2) throw ShapeError("softmax_cross_entropy expects [B,C], got " + shape_str(s));
    const int B = s[0], C = s[1];
    if ((int)labels.size() != B) throw Error("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for batch " + std::to_string(B));
    if (B == 0) throw Error("softmax_cross_entropy: empty batch");
    for (int b = 0; b < B; ++b)
        if (labels[(size_t)b] < 0 || labels[(size_t)b] >= C)
            throw Error("label " + std::to_string(labels[(size_t)b]) + " outside 0.." + std::to_string(C - 1));
    T total = T(0);
    std::vector<T> lse((size_t)B);
    for (int b = 0; b < B; ++b) {
        const T* row = logits.value().data() + (size_t)b * C;
        T m = row[0];
        for (int j = 1; j < C; ++j) m = std::max(m, row[j]);
        T ssum = T(0);
        for (int j = 0; j < C; ++j) ssum += std::exp(row[j] - m);
        lse[(size_t)b] = m + std::log(ssum);
        total += lse[(size_t)b] - row[labels[(size_t)b]];
    }
    Tensor<T> out = Tensor<T>::scalar(total / T(B));
    auto ln = logits.node();
    return Var<T>::make_result(std::move(out), {logits},
                               [ln, labels, lse = std::move(lse), B, C](Node<T>& self) {
        if (!ln->requires_grad) return;
        const T gscale = self.grad.data()[0] / T(B);
        Tensor<T> g = Tensor<T>::zeros(ln->value.shape());
        for (int b = 0; b < B; ++b) {
            for (int j = 0; j < C; ++j)
                g.data()[(size_t)b * C + j] =
                    gscale * std::exp(ln->value.data()[(size_t)b * C + j] - lse[(size_t)b]);
            g.data()[(size_t)b * C + labels[(size_t)b]] -= gscale;
        }
        ln->accumulate(g);
    });
}

// Per-pixel softmax cross-entropy over logits [B,C,H,W]; mask values are
// class indices, pixels valued `ignore` contribute nothing. Mean over valid
// pixels; errors when no pixel is valid.
template <class T>
Var<T> softmax_cross_entropy_spatial(const Var<T>& logits, const std::vector<uint8_t>& mask,
                                     int ignore = 255) {
    const auto& s = logits.shape();
    if (s.size() != 4) throw ShapeError("softmax_cross_entropy_spatial expects [B,C,H,W], got " + shape_str(s));
    const int B = s[0], C = s[1], H = s[2], W = s[3];
    if (mask.size() != (size_t)B * H * W)
        throw Error("mask size " + std::to_string(mask.size()) + " does not match logits " + shape_str(s));
    const size_t plane = (size_t)H * W;
    size_t n_valid = 0;
    T total = T(0);
    std::vector<T> lse((size_t)B * plane, T(0));
    for (int b = 0; b < B; ++b) {
        for (size_t i = 0; i < plane; ++i) {
            const int y = mask[(size_t)b * plane + i];
            if (y == ignore) continue;
            if (y < 0 || y >= C)
                throw Error("mask value " + std::to_string(y) + " outside 0.." + std::to_string(C - 1));
            T m = logits.value().data()[((size_t)b * C) * plane + i];
            for (int c = 1; c < C; ++c)
                m = std::max(m, logits.value().data()[((size_t)b * C + c) * plane + i]);
            T ssum = T(0);
            for (int c = 0; c < C; ++c)
                ssum += std::exp(logits.value().data()[((size_t)b * C + c) * plane + i] - m);
            const T l = m + std::log(ssum);
            lse[(size_t)b * plane + i] = l;
            total += l - logits.value().data()[((size_t)b * C + y) * plane + i];
            ++n_valid;
        }
    }
    if (n_valid == 0) throw Error("no valid pixels");
    Tensor<T> out = Tensor<T>::scalar(total / T(n_valid));
    auto ln = logits.node();
    return Var<T>::make_result(std::move(out), {logits},
                               [ln, mask, lse = std::move(lse), ignore, B, C, plane, n_valid](Node<T>& self) {
        if (!ln->requires_grad) return;
        const T gscale = self.grad.data()[0] / T(n_valid);
        Tensor<T> g = Tensor<T>::zeros(ln->value.shape());
        for (int b = 0; b < B; ++b) {
            for (size_t i = 0; i < plane; ++i) {
                const int y = mask[(size_t)b * plane + i];
                if (y == ignore) continue;
                for (int c = 0; c < C; ++c)
                    g.data()[((size_t)b * C + c) * plane + i] =
                        gscale * std::exp(ln->value.data()[((size_t)b * C + c) * plane + i] -
                                          lse[(size_t)b * plane + i]);
                g.data()[((size_t)b * C + y) * plane + i] -= gscale;
            }
        }
        ln->accumulate(g);
    });
}

// ---------------------------------------------------------------------------
// non-differentiable helpers
// ---------------------------------------------------------------------------

// Row argmax with ties broken toward the lowest class index.
template <class T>
std::vector<int> argmax_rows(const Tensor<T>& logits) {
    const auto& s = logits.shape();
    if (s.size() != 2) throw ShapeError("argmax_rows expects [B,C], got " + shape_str(s));
    const int B = s[0], C = s[1];
    std::vector<int> out((size_t)B);
    for (int b = 0; b < B; ++b) {
        const T* row = logits.data() + (size_t)b * C;
        int best = 0;
        for (int j = 1; j < C; ++j)
            if (row[j] > row[best]) best = j;
        out[(size_t)b] = best;
    }
    return out;
}

// Per-pixel channel argmax of [B,C,H,W] logits, ties toward lowest class.
template <class T>
std::vector<uint8_t> argmax_channels(const Tensor<T>& logits) {
    const auto& s = logits.shape();
    if (s.size() != 4) throw ShapeError("argmax_channels expects [B,C,H,W], got " + shape_str(s));
    const int B = s[0], C = s[1], H = s[2], W = s[3];
    const size_t plane = (size_t)H * W;
    std::vector<uint8_t> out((size_t)B * plane);
    for (int b = 0; b < B; ++b)
        for (size_t i = 0; i < plane; ++i) {
            int best = 0;
            T bv = logits.data()[((size_t)b * C) * plane + i];
            for (int c = 1; c < C; ++c) {
                const T v = logits.data()[((size_t)b * C + c) * plane + i];
                if (v > bv) {
                    bv = v;
                    best = c;
                }
            }
            out[(size_t)b * plane + i] = (uint8_t)best;
        }
    return out;
}

}  // namespace genco::ops
