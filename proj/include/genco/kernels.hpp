#pragma once

#include <algorithm>
#include <cstddef>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "genco/error.hpp"

// Heavy numeric kernels. Every kernel exists twice: kernels::serial is the
// reference implementation, kernels::par adds OpenMP pragmas over independent
// output elements. Each output element is produced by one thread with the
// same inner-loop order as the serial path, so the two variants are bitwise
// identical for any thread count. The unqualified wrappers dispatch on the
// configured thread count (default 1).
//
// Layouts: matrices row-major; images NCHW; conv weights [OC,C,KH,KW];
// transposed-conv weights [C,OC,KH,KW].

namespace genco::kernels {

inline int& thread_count_ref() {
    static int n = 1;
    return n;
}

inline int threads() { return thread_count_ref(); }

inline void set_threads(int n) {
    if (n < 1) throw ConfigError("thread count must be >= 1");
    thread_count_ref() = n;
#ifdef _OPENMP
    omp_set_num_threads(n);
#endif
}

inline bool parallel_enabled() {
#ifdef _OPENMP
    return threads() > 1;
#else
    return false;
#endif
}

// ---------------------------------------------------------------------------
// serial reference kernels
// ---------------------------------------------------------------------------

namespace serial {

template <class T>
void matmul_nn(const T* a, const T* b, T* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
            T acc = T(0);
            for (int p = 0; p < k; ++p) acc += a[(size_t)i * k + p] * b[(size_t)p * n + j];
            c[(size_t)i * n + j] = acc;
        }
    }
}

// c[m,n] = a[m,k] * b[n,k]^T
template <class T>
void matmul_nt(const T* a, const T* b, T* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
            T acc = T(0);
            for (int p = 0; p < k; ++p) acc += a[(size_t)i * k + p] * b[(size_t)j * k + p];
            c[(size_t)i * n + j] = acc;
        }
    }
}

// c[m,n] = a[k,m]^T * b[k,n]
template <class T>
void matmul_tn(const T* a, const T* b, T* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
            T acc = T(0);
            for (int p = 0; p < k; ++p) acc += a[(size_t)p * m + i] * b[(size_t)p * n + j];
            c[(size_t)i * n + j] = acc;
        }
    }
}

template <class T>
void conv2d_fwd(const T* x, const T* w, const T* bias, T* y, int B, int C, int H, int W, int OC,
                int K, int stride, int pad, int OH, int OW) {
    for (int b = 0; b < B; ++b) {
        for (int oc = 0; oc < OC; ++oc) {
            for (int oy = 0; oy < OH; ++oy) {
                for (int ox = 0; ox < OW; ++ox) {
                    T acc = bias ? bias[oc] : T(0);
                    for (int c = 0; c < C; ++c) {
                        for (int kh = 0; kh < K; ++kh) {
                            const int iy = oy * stride + kh - pad;
                            if (iy < 0 || iy >= H) continue;
                            for (int kw = 0; kw < K; ++kw) {
                                const int ix = ox * stride + kw - pad;
                                if (ix < 0 || ix >= W) continue;
                                acc += x[(((size_t)b * C + c) * H + iy) * W + ix] *
                                       w[(((size_t)oc * C + c) * K + kh) * K + kw];
                            }
                        }
                    }
                    y[(((size_t)b * OC + oc) * OH + oy) * OW + ox] = acc;
                }
            }
        }
    }
}

template <class T>
void conv2d_bwd_input(const T* dy, const T* w, T* dx, int B, int C, int H, int W, int OC, int K,
                      int stride, int pad, int OH, int OW) {
    for (int b = 0; b < B; ++b) {
        for (int c = 0; c < C; ++c) {
            for (int iy = 0; iy < H; ++iy) {
                for (int ix = 0; ix < W; ++ix) {
                    T acc = T(0);
                    for (int oc = 0; oc < OC; ++oc) {
                        for (int kh = 0; kh < K; ++kh) {
                            const int ty = iy + pad - kh;
                            if (ty < 0 || ty % stride != 0) continue;
                            const int oy = ty / stride;
                            if (oy >= OH) continue;
                            for (int kw = 0; kw < K; ++kw) {
                                const int tx = ix + pad - kw;
                                if (tx < 0 || tx % stride != 0) continue;
                                const int ox = tx / stride;
                                if (ox >= OW) continue;
                                acc += dy[(((size_t)b * OC + oc) * OH + oy) * OW + ox] *
                                       w[(((size_t)oc * C + c) * K + kh) * K + kw];
                            }
                        }
                    }
                    dx[(((size_t)b * C + c) * H + iy) * W + ix] = acc;
                }
            }
        }
    }
}

template <class T>
void conv2d_bwd_params(const T* dy, const T* x, T* dw, T* dbias, int B, int C, int H, int W,
                       int OC, int K, int stride, int pad, int OH, int OW) {
    for (int oc = 0; oc < OC; ++oc) {
        for (int c = 0; c < C; ++c) {
            for (int kh = 0; kh < K; ++kh) {
                for (int kw = 0; kw < K; ++kw) {
                    T acc = T(0);
                    for (int b = 0; b < B; ++b) {
                        for (int oy = 0; oy < OH; ++oy) {
                            const int iy = oy * stride + kh - pad;
                            if (iy < 0 || iy >= H) continue;
                            for (int ox = 0; ox < OW; ++ox) {
                                const int ix = ox * stride + kw - pad;
                                if (ix < 0 || ix >= W) continue;
                                acc += dy[(((size_t)b * OC + oc) * OH + oy) * OW + ox] *
                                       x[(((size_t)b * C + c) * H + iy) * W + ix];
                            }
                        }
                    }
                    dw[(((size_t)oc * C + c) * K + kh) * K + kw] = acc;
                }
            }
        }
        if (dbias) {
            T acc = T(0);
            for (int b = 0; b < B; ++b)
                for (int oy = 0; oy < OH; ++oy)
                    for (int ox = 0; ox < OW; ++ox)
                        acc += dy[(((size_t)b * OC + oc) * OH + oy) * OW + ox];
            dbias[oc] = acc;
        }
    }
}

// Transposed convolution, OH = (H-1)*stride + K.
template <class T>
void deconv2d_fwd(const T* x, const T* w, const T* bias, T* y, int B, int C, int H, int W, int OC,
                  int K, int stride, int OH, int OW) {
    for (int b = 0; b < B; ++b) {
        for (int oc = 0; oc < OC; ++oc) {
            for (int oy = 0; oy < OH; ++oy) {
                for (int ox = 0; ox < OW; ++ox) {
                    T acc = bias ? bias[oc] : T(0);
                    for (int c = 0; c < C; ++c) {
                        for (int kh = 0; kh < K; ++kh) {
                            const int ty = oy - kh;
                            if (ty < 0 || ty % stride != 0) continue;
                            const int iy = ty / stride;
                            if (iy >= H) continue;
                            for (int kw = 0; kw < K; ++kw) {
                                const int tx = ox - kw;
                                if (tx < 0 || tx % stride != 0) continue;
                                const int ix = tx / stride;
                                if (ix >= W) continue;
                                acc += x[(((size_t)b * C + c) * H + iy) * W + ix] *
                                       w[(((size_t)c * OC + oc) * K + kh) * K + kw];
                            }
                        }
                    }
                    y[(((size_t)b * OC + oc) * OH + oy) * OW + ox] = acc;
                }
            }
        }
    }
}

template <class T>
void deconv2d_bwd_input(const T* dy, const T* w, T* dx, int B, int C, int H, int W, int OC, int K,
                        int stride, int OH, int OW) {
    for (int b = 0; b < B; ++b) {
        for (int c = 0; c < C; ++c) {
            for (int iy = 0; iy < H; ++iy) {
                for (int ix = 0; ix < W; ++ix) {
                    T acc = T(0);
                    for (int oc = 0; oc < OC; ++oc) {
                        for (int kh = 0; kh < K; ++kh) {
                            const int oy = iy * stride + kh;
                            if (oy >= OH) continue;
                            for (int kw = 0; kw < K; ++kw) {
                                const int ox = ix * stride + kw;
                                if (ox >= OW) continue;
                                acc += dy[(((size_t)b * OC + oc) * OH + oy) * OW + ox] *
                                       w[(((size_t)c * OC + oc) * K + kh) * K + kw];
                            }
                        }
                    }
                    dx[(((size_t)b * C + c) * H + iy) * W + ix] = acc;
                }
            }
        }
    }
}

template <class T>
void deconv2d_bwd_params(const T* dy, const T* x, T* dw, T* dbias, int B, int C, int H, int W,
                         int OC, int K, int stride, int OH, int OW) {
    for (int c = 0; c < C; ++c) {
        for (int oc = 0; oc < OC; ++oc) {
            for (int kh = 0; kh < K; ++kh) {
                for (int kw = 0; kw < K; ++kw) {
                    T acc = T(0);
                    for (int b = 0; b < B; ++b) {
                        for (int iy = 0; iy < H; ++iy) {
                            const int oy = iy * stride + kh;
                            if (oy >= OH) continue;
                            for (int ix = 0; ix < W; ++ix) {
                                const int ox = ix * stride + kw;
                                if (ox >= OW) continue;
                                acc += x[(((size_t)b * C + c) * H + iy) * W + ix] *
                                       dy[(((size_t)b * OC + oc) * OH + oy) * OW + ox];
                            }
                        }
                    }
                    dw[(((size_t)c * OC + oc) * K + kh) * K + kw] = acc;
                }
            }
        }
    }
    if (dbias) {
        for (int oc = 0; oc < OC; ++oc) {
            T acc = T(0);
            for (int b = 0; b < B; ++b)
                for (int oy = 0; oy < OH; ++oy)
                    for (int ox = 0; ox < OW; ++ox)
                        acc += dy[(((size_t)b * OC + oc) * OH + oy) * OW + ox];
            dbias[oc] = acc;
        }
    }
}

}  // namespace serial

// ---------------------------------------------------------------------------
// OpenMP kernels. Same loop bodies, outer loops split across threads.
// ---------------------------------------------------------------------------

namespace par {

template <class T>
void matmul_nn(const T* a, const T* b, T* c, int m, int k, int n) {
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
            T acc = T(0);
            for (int p = 0; p < k; ++p) acc += a[(size_t)i * k + p] * b[(size_t)p * n + j];
            c[(size_t)i * n + j] = acc;
        }
    }
}

template <class T>
void matmul_nt(const T* a, const T* b, T* c, int m, int k, int n) {
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
            T acc = T(0);
            for (int p = 0; p < k; ++p) acc += a[(size_t)i * k + p] * b[(size_t)j * k + p];
            c[(size_t)i * n + j] = acc;
        }
    }
}

template <class T>
void matmul_tn(const T* a, const T* b, T* c, int m, int k, int n) {
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
            T acc = T(0);
            for (int p = 0; p < k; ++p) acc += a[(size_t)p * m + i] * b[(size_t)p * n + j];
            c[(size_t)i * n + j] = acc;
        }
    }
}

template <class T>
void conv2d_fwd(const T* x, const T* w, const T* bias, T* y, int B, int C, int H, int W, int OC,
                int K, int stride, int pad, int OH, int OW) {
#pragma omp parallel for collapse(2) schedule(static)
    for (int b = 0; b < B; ++b) {
        for (int oc = 0; oc < OC; ++oc) {
            for (int oy = 0; oy < OH; ++oy) {
                for (int ox = 0; ox < OW; ++ox) {
                    T acc = bias ? bias[oc] : T(0);
                    for (int c = 0; c < C; ++c) {
                        for (int kh = 0; kh < K; ++kh) {
                            const int iy = oy * stride + kh - pad;
                            if (iy < 0 || iy >= H) continue;
                            for (int kw = 0; kw < K; ++kw) {
                                const int ix = ox * stride + kw - pad;
                                if (ix < 0 || ix >= W) continue;
                                acc += x[(((size_t)b * C + c) * H + iy) * W + ix] *
                                       w[(((size_t)oc * C + c) * K + kh) * K + kw];
                            }
                        }
                    }
                    y[(((size_t)b * OC + oc) * OH + oy) * OW + ox] = acc;
                }
            }
        }
    }
}

template <class T>
void conv2d_bwd_input(const T* dy, const T* w, T* dx, int B, int C, int H, int W, int OC, int K,
                      int stride, int pad, int OH, int OW) {
#pragma omp parallel for collapse(2) schedule(static)
    for (int b = 0; b < B; ++b) {
        for (int c = 0; c < C; ++c) {
            for (int iy = 0; iy < H; ++iy) {
                for (int ix = 0; ix < W; ++ix) {
                    T acc = T(0);
                    for (int oc = 0; oc < OC; ++oc) {
                        for (int kh = 0; kh < K; ++kh) {
                            const int ty = iy + pad - kh;
                            if (ty < 0 || ty % stride != 0) continue;
                            const int oy = ty / stride;
                            if (oy >= OH) continue;
                            for (int kw = 0; kw < K; ++kw) {
                                const int tx = ix + pad - kw;
                                if (tx < 0 || tx % stride != 0) continue;
                                const int ox = tx / stride;
                                if (ox >= OW) continue;
                                acc += dy[(((size_t)b * OC + oc) * OH + oy) * OW + ox] *
                                       w[(((size_t)oc * C + c) * K + kh) * K + kw];
                            }
                        }
                    }
                    dx[(((size_t)b * C + c) * H + iy) * W + ix] = acc;
                }
            }
        }
    }
}

template <class T>
void conv2d_bwd_params(const T* dy, const T* x, T* dw, T* dbias, int B, int C, int H, int W,
                       int OC, int K, int stride, int pad, int OH, int OW) {
#pragma omp parallel for schedule(static)
    for (int oc = 0; oc < OC; ++oc) {
        for (int c = 0; c < C; ++c) {
            for (int kh = 0; kh < K; ++kh) {
                for (int kw = 0; kw < K; ++kw) {
                    T acc = T(0);
                    for (int b = 0; b < B; ++b) {
                        for (int oy = 0; oy < OH; ++oy) {
                            const int iy = oy * stride + kh - pad;
                            if (iy < 0 || iy >= H) continue;
                            for (int ox = 0; ox < OW; ++ox) {
                                const int ix = ox * stride + kw - pad;
                                if (ix < 0 || ix >= W) continue;
                                acc += dy[(((size_t)b * OC + oc) * OH + oy) * OW + ox] *
                                       x[(((size_t)b * C + c) * H + iy) * W + ix];
                            }
                        }
                    }
                    dw[(((size_t)oc * C + c) * K + kh) * K + kw] = acc;
                }
            }
        }
        if (dbias) {
            T acc = T(0);
            for (int b = 0; b < B; ++b)
                for (int oy = 0; oy < OH; ++oy)
                    for (int ox = 0; ox < OW; ++ox)
                        acc += dy[(((size_t)b * OC + oc) * OH + oy) * OW + ox];
            dbias[oc] = acc;
        }
    }
}

template <class T>
void deconv2d_fwd(const T* x, const T* w, const T* bias, T* y, int B, int C, int H, int W, int OC,
                  int K, int stride, int OH, int OW) {
#pragma omp parallel for collapse(2) schedule(static)
    for (int b = 0; b < B; ++b) {
        for (int oc = 0; oc < OC; ++oc) {
            for (int oy = 0; oy < OH; ++oy) {
                for (int ox = 0; ox < OW; ++ox) {
                    T acc = bias ? bias[oc] : T(0);
                    for (int c = 0; c < C; ++c) {
                        for (int kh = 0; kh < K; ++kh) {
                            const int ty = oy - kh;
                            if (ty < 0 || ty % stride != 0) continue;
                            const int iy = ty / stride;
                            if (iy >= H) continue;
                            for (int kw = 0; kw < K; ++kw) {
                                const int tx = ox - kw;
                                if (tx < 0 || tx % stride != 0) continue;
                                const int ix = tx / stride;
                                if (ix >= W) continue;
                                acc += x[(((size_t)b * C + c) * H + iy) * W + ix] *
                                       w[(((size_t)c * OC + oc) * K + kh) * K + kw];
                            }
                        }
                    }
                    y[(((size_t)b * OC + oc) * OH + oy) * OW + ox] = acc;
                }
            }
        }
    }
}

template <class T>
void deconv2d_bwd_input(const T* dy, const T* w, T* dx, int B, int C, int H, int W, int OC, int K,
                        int stride, int OH, int OW) {
#pragma omp parallel for collapse(2) schedule(static)
    for (int b = 0; b < B; ++b) {
        for (int c = 0; c < C; ++c) {
            for (int iy = 0; iy < H; ++iy) {
                for (int ix = 0; ix < W; ++ix) {
                    T acc = T(0);
                    for (int oc = 0; oc < OC; ++oc) {
                        for (int kh = 0; kh < K; ++kh) {
                            const int oy = iy * stride + kh;
                            if (oy >= OH) continue;
                            for (int kw = 0; kw < K; ++kw) {
                                const int ox = ix * stride + kw;
                                if (ox >= OW) continue;
                                acc += dy[(((size_t)b * OC + oc) * OH + oy) * OW + ox] *
                                       w[(((size_t)c * OC + oc) * K + kh) * K + kw];
                            }
                        }
                    }
                    dx[(((size_t)b * C + c) * H + iy) * W + ix] = acc;
                }
            }
        }
    }
}

template <class T>
void deconv2d_bwd_params(const T* dy, const T* x, T* dw, T* dbias, int B, int C, int H, int W,
                         int OC, int K, int stride, int OH, int OW) {
#pragma omp parallel for schedule(static)
    for (int c = 0; c < C; ++c) {
        for (int oc = 0; oc < OC; ++oc) {
            for (int kh = 0; kh < K; ++kh) {
                for (int kw = 0; kw < K; ++kw) {
                    T acc = T(0);
                    for (int b = 0; b < B; ++b) {
                        for (int iy = 0; iy < H; ++iy) {
                            const int oy = iy * stride + kh;
                            if (oy >= OH) continue;
                            for (int ix = 0; ix < W; ++ix) {
                                const int ox = ix * stride + kw;
                                if (ox >= OW) continue;
                                acc += x[(((size_t)b * C + c) * H + iy) * W + ix] *
                                       dy[(((size_t)b * OC + oc) * OH + oy) * OW + ox];
                            }
                        }
                    }
                    dw[(((size_t)c * OC + oc) * K + kh) * K + kw] = acc;
                }
            }
        }
    }
    if (dbias) {
#pragma omp parallel for schedule(static)
        for (int oc = 0; oc < OC; ++oc) {
            T acc = T(0);
            for (int b = 0; b < B; ++b)
                for (int oy = 0; oy < OH; ++oy)
                    for (int ox = 0; ox < OW; ++ox)
                        acc += dy[(((size_t)b * OC + oc) * OH + oy) * OW + ox];
            dbias[oc] = acc;
        }
    }
}

}  // namespace par

// ---------------------------------------------------------------------------
// dispatching wrappers
// ---------------------------------------------------------------------------

template <class T>
void matmul_nn(const T* a, const T* b, T* c, int m, int k, int n) {
    if (parallel_enabled())
        par::matmul_nn(a, b, c, m, k, n);
    else
        serial::matmul_nn(a, b, c, m, k, n);
}

template <class T>
void matmul_nt(const T* a, const T* b, T* c, int m, int k, int n) {
    if (parallel_enabled())
        par::matmul_nt(a, b, c, m, k, n);
    else
        serial::matmul_nt(a, b, c, m, k, n);
}

template <class T>
void matmul_tn(const T* a, const T* b, T* c, int m, int k, int n) {
    if (parallel_enabled())
        par::matmul_tn(a, b, c, m, k, n);
    else
        serial::matmul_tn(a, b, c, m, k, n);
}

template <class T>
void conv2d_fwd(const T* x, const T* w, const T* bias, T* y, int B, int C, int H, int W, int OC,
                int K, int stride, int pad, int OH, int OW) {
    if (parallel_enabled())
        par::conv2d_fwd(x, w, bias, y, B, C, H, W, OC, K, stride, pad, OH, OW);
    else
        serial::conv2d_fwd(x, w, bias, y, B, C, H, W, OC, K, stride, pad, OH, OW);
}

template <class T>
void conv2d_bwd_input(const T* dy, const T* w, T* dx, int B, int C, int H, int W, int OC, int K,
                      int stride, int pad, int OH, int OW) {
    if (parallel_enabled())
        par::conv2d_bwd_input(dy, w, dx, B, C, H, W, OC, K, stride, pad, OH, OW);
    else
        serial::conv2d_bwd_input(dy, w, dx, B, C, H, W, OC, K, stride, pad, OH, OW);
}

template <class T>
void conv2d_bwd_params(const T* dy, const T* x, T* dw, T* dbias, int B, int C, int H, int W,
                       int OC, int K, int stride, int pad, int OH, int OW) {
    if (parallel_enabled())
        par::conv2d_bwd_params(dy, x, dw, dbias, B, C, H, W, OC, K, stride, pad, OH, OW);
    else
        serial::conv2d_bwd_params(dy, x, dw, dbias, B, C, H, W, OC, K, stride, pad, OH, OW);
}

template <class T>
void deconv2d_fwd(const T* x, const T* w, const T* bias, T* y, int B, int C, int H, int W, int OC,
                  int K, int stride, int OH, int OW) {
    if (parallel_enabled())
        par::deconv2d_fwd(x, w, bias, y, B, C, H, W, OC, K, stride, OH, OW);
    else
        serial::deconv2d_fwd(x, w, bias, y, B, C, H, W, OC, K, stride, OH, OW);
}

template <class T>
void deconv2d_bwd_input(const T* dy, const T* w, T* dx, int B, int C, int H, int W, int OC, int K,
                        int stride, int OH, int OW) {
    if (parallel_enabled())
        par::deconv2d_bwd_input(dy, w, dx, B, C, H, W, OC, K, stride, OH, OW);
    else
        serial::deconv2d_bwd_input(dy, w, dx, B, C, H, W, OC, K, stride, OH, OW);
}

template <class T>
void deconv2d_bwd_params(const T* dy, const T* x, T* dw, T* dbias, int B, int C, int H, int W,
                         int OC, int K, int stride, int OH, int OW) {
    if (parallel_enabled())
        par::deconv2d_bwd_params(dy, x, dw, dbias, B, C, H, W, OC, K, stride, OH, OW);
    else
        serial::deconv2d_bwd_params(dy, x, dw, dbias, B, C, H, W, OC, K, stride, OH, OW);
}

}  // namespace genco::kernels
