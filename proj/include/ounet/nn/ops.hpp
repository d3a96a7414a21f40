#pragma once

#include <cmath>
#include <cstring>

#include "ounet/nn/autodiff.hpp"

namespace ounet::nn {

inline std::int64_t floor_div(std::int64_t a, std::int64_t b) {
    std::int64_t q = a / b, r = a % b;
    return (r != 0 && ((r < 0) != (b < 0))) ? q - 1 : q;
}
inline std::int64_t ceil_div(std::int64_t a, std::int64_t b) { return -floor_div(-a, b); }

inline std::int64_t conv_out_dim(std::int64_t in, int kernel, int stride, int padding) {
    return (in + 2 * padding - kernel) / stride + 1;
}

namespace detail {

// ---------------------------------------------------------------- conv3d
// x: [N,IC,Z,Y,X], w: [OC,IC,k,k,k], out: [N,OC,OZ,OY,OX]

template <typename T>
void conv3d_value(const Tensor<T>& x, const Tensor<T>& w, const T* bias, int k, int s, int p,
                  Tensor<T>& out) {
    const std::int64_t N = x.dim(0), IC = x.dim(1), Z = x.dim(2), Y = x.dim(3), X = x.dim(4);
    const std::int64_t OC = w.dim(0);
    const std::int64_t OZ = out.dim(2), OY = out.dim(3), OX = out.dim(4);
    const T* xd = x.data();
    const T* wd = w.data();
    T* od = out.data();
    const std::int64_t xs_c = Z * Y * X, xs_n = IC * xs_c;
    const std::int64_t os_c = OZ * OY * OX, os_n = OC * os_c;
    const std::int64_t ws_ic = static_cast<std::int64_t>(k) * k * k, ws_oc = IC * ws_ic;

    for (std::int64_t n = 0; n < N; ++n) {
#pragma omp parallel for collapse(2) schedule(static)
        for (std::int64_t oc = 0; oc < OC; ++oc) {
            for (std::int64_t zo = 0; zo < OZ; ++zo) {
                for (std::int64_t yo = 0; yo < OY; ++yo) {
                    T* orow = od + n * os_n + oc * os_c + (zo * OY + yo) * OX;
                    const T bv = bias ? bias[oc] : T{};
                    for (std::int64_t xo = 0; xo < OX; ++xo) orow[xo] = bv;
                    for (std::int64_t ic = 0; ic < IC; ++ic) {
                        for (int kz = 0; kz < k; ++kz) {
                            const std::int64_t zi = zo * s + kz - p;
                            if (zi < 0 || zi >= Z) continue;
                            for (int ky = 0; ky < k; ++ky) {
                                const std::int64_t yi = yo * s + ky - p;
                                if (yi < 0 || yi >= Y) continue;
                                const T* xrow = xd + n * xs_n + ic * xs_c + (zi * Y + yi) * X;
                                const T* wrow = wd + oc * ws_oc + ic * ws_ic +
                                                (static_cast<std::int64_t>(kz) * k + ky) * k;
                                for (int kx = 0; kx < k; ++kx) {
                                    const T wv = wrow[kx];
                                    const std::int64_t lo = std::max<std::int64_t>(0, ceil_div(p - kx, s));
                                    const std::int64_t hi =
                                        std::min<std::int64_t>(OX - 1, floor_div(X - 1 + p - kx, s));
                                    const T* xoff = xrow + kx - p;
                                    if (s == 1) {
                                        for (std::int64_t xo = lo; xo <= hi; ++xo)
                                            orow[xo] += wv * xoff[xo];
                                    } else {
                                        for (std::int64_t xo = lo; xo <= hi; ++xo)
                                            orow[xo] += wv * xoff[xo * s];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

template <typename T>
void conv3d_grad_input(const Tensor<T>& g, const Tensor<T>& w, int k, int s, int p, Tensor<T>& dx) {
    const std::int64_t N = dx.dim(0), IC = dx.dim(1), Z = dx.dim(2), Y = dx.dim(3), X = dx.dim(4);
    const std::int64_t OC = g.dim(1), OZ = g.dim(2), OY = g.dim(3), OX = g.dim(4);
    const T* gd = g.data();
    const T* wd = w.data();
    T* dxd = dx.data();
    const std::int64_t xs_c = Z * Y * X, xs_n = IC * xs_c;
    const std::int64_t gs_c = OZ * OY * OX, gs_n = OC * gs_c;
    const std::int64_t ws_ic = static_cast<std::int64_t>(k) * k * k, ws_oc = IC * ws_ic;

    for (std::int64_t n = 0; n < N; ++n) {
#pragma omp parallel for collapse(2) schedule(static)
        for (std::int64_t ic = 0; ic < IC; ++ic) {
            for (std::int64_t zi = 0; zi < Z; ++zi) {
                for (std::int64_t yi = 0; yi < Y; ++yi) {
                    T* dxrow = dxd + n * xs_n + ic * xs_c + (zi * Y + yi) * X;
                    for (std::int64_t oc = 0; oc < OC; ++oc) {
                        for (int kz = 0; kz < k; ++kz) {
                            const std::int64_t tz = zi + p - kz;
                            if (tz < 0 || tz % s != 0) continue;
                            const std::int64_t zo = tz / s;
                            if (zo >= OZ) continue;
                            for (int ky = 0; ky < k; ++ky) {
                                const std::int64_t ty = yi + p - ky;
                                if (ty < 0 || ty % s != 0) continue;
                                const std::int64_t yo = ty / s;
                                if (yo >= OY) continue;
                                const T* grow = gd + n * gs_n + oc * gs_c + (zo * OY + yo) * OX;
                                const T* wrow = wd + oc * ws_oc + ic * ws_ic +
                                                (static_cast<std::int64_t>(kz) * k + ky) * k;
                                for (int kx = 0; kx < k; ++kx) {
                                    const T wv = wrow[kx];
                                    const std::int64_t lo = std::max<std::int64_t>(0, ceil_div(p - kx, s));
                                    const std::int64_t hi =
                                        std::min<std::int64_t>(OX - 1, floor_div(X - 1 + p - kx, s));
                                    T* dxoff = dxrow + kx - p;
                                    for (std::int64_t xo = lo; xo <= hi; ++xo)
                                        dxoff[xo * s] += wv * grow[xo];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

template <typename T>
void conv3d_grad_weight(const Tensor<T>& g, const Tensor<T>& x, int k, int s, int p, Tensor<T>& dw) {
    const std::int64_t N = x.dim(0), IC = x.dim(1), Z = x.dim(2), Y = x.dim(3), X = x.dim(4);
    const std::int64_t OC = g.dim(1), OZ = g.dim(2), OY = g.dim(3), OX = g.dim(4);
    const T* gd = g.data();
    const T* xd = x.data();
    T* dwd = dw.data();
    const std::int64_t xs_c = Z * Y * X, xs_n = IC * xs_c;
    const std::int64_t gs_c = OZ * OY * OX, gs_n = OC * gs_c;
    const std::int64_t ws_ic = static_cast<std::int64_t>(k) * k * k, ws_oc = IC * ws_ic;

#pragma omp parallel for schedule(static)
    for (std::int64_t oc = 0; oc < OC; ++oc) {
        for (std::int64_t n = 0; n < N; ++n) {
            for (std::int64_t zo = 0; zo < OZ; ++zo) {
                for (int kz = 0; kz < k; ++kz) {
                    const std::int64_t zi = zo * s + kz - p;
                    if (zi < 0 || zi >= Z) continue;
                    for (std::int64_t yo = 0; yo < OY; ++yo) {
                        for (int ky = 0; ky < k; ++ky) {
                            const std::int64_t yi = yo * s + ky - p;
                            if (yi < 0 || yi >= Y) continue;
                            const T* grow = gd + n * gs_n + oc * gs_c + (zo * OY + yo) * OX;
                            for (std::int64_t ic = 0; ic < IC; ++ic) {
                                const T* xrow = xd + n * xs_n + ic * xs_c + (zi * Y + yi) * X;
                                T* dwrow = dwd + oc * ws_oc + ic * ws_ic +
                                           (static_cast<std::int64_t>(kz) * k + ky) * k;
                                for (int kx = 0; kx < k; ++kx) {
                                    const std::int64_t lo = std::max<std::int64_t>(0, ceil_div(p - kx, s));
                                    const std::int64_t hi =
                                        std::min<std::int64_t>(OX - 1, floor_div(X - 1 + p - kx, s));
                                    const T* xoff = xrow + kx - p;
                                    T acc{};
                                    if (s == 1) {
                                        for (std::int64_t xo = lo; xo <= hi; ++xo)
                                            acc += grow[xo] * xoff[xo];
                                    } else {
                                        for (std::int64_t xo = lo; xo <= hi; ++xo)
                                            acc += grow[xo] * xoff[xo * s];
                                    }
                                    dwrow[kx] += acc;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

template <typename T>
void sum_over_channel(const Tensor<T>& g, Tensor<T>& db) {
    const std::int64_t N = g.dim(0), OC = g.dim(1);
    const std::int64_t S = g.numel() / (N * OC);
    const T* gd = g.data();
#pragma omp parallel for schedule(static)
    for (std::int64_t oc = 0; oc < OC; ++oc) {
        T acc{};
        for (std::int64_t n = 0; n < N; ++n) {
            const T* slab = gd + (n * OC + oc) * S;
            for (std::int64_t i = 0; i < S; ++i) acc += slab[i];
        }
        db[oc] += acc;
    }
}

// ------------------------------------------- transposed conv, kernel 2 stride 2
// x: [N,IC,Z,Y,X], w: [IC,OC,2,2,2], out: [N,OC,2Z,2Y,2X]

template <typename T>
void convtranspose2_value(const Tensor<T>& x, const Tensor<T>& w, const T* bias, Tensor<T>& out) {
    const std::int64_t N = x.dim(0), IC = x.dim(1), Z = x.dim(2), Y = x.dim(3), X = x.dim(4);
    const std::int64_t OC = w.dim(1);
    const std::int64_t OZ = 2 * Z, OY = 2 * Y, OX = 2 * X;
    const T* xd = x.data();
    const T* wd = w.data();
    T* od = out.data();
    const std::int64_t xs_c = Z * Y * X, xs_n = IC * xs_c;
    const std::int64_t os_c = OZ * OY * OX, os_n = OC * os_c;

    for (std::int64_t n = 0; n < N; ++n) {
#pragma omp parallel for collapse(2) schedule(static)
        for (std::int64_t oc = 0; oc < OC; ++oc) {
            for (std::int64_t zo = 0; zo < OZ; ++zo) {
                const std::int64_t zi = zo >> 1, a = zo & 1;
                for (std::int64_t yo = 0; yo < OY; ++yo) {
                    const std::int64_t yi = yo >> 1, b = yo & 1;
                    T* orow = od + n * os_n + oc * os_c + (zo * OY + yo) * OX;
                    const T bv = bias ? bias[oc] : T{};
                    for (std::int64_t xo = 0; xo < OX; ++xo) orow[xo] = bv;
                    for (std::int64_t ic = 0; ic < IC; ++ic) {
                        const T* xrow = xd + n * xs_n + ic * xs_c + (zi * Y + yi) * X;
                        const T* wq = wd + ((ic * OC + oc) * 2 + a) * 4 + b * 2;
                        const T w0 = wq[0], w1 = wq[1];
                        for (std::int64_t xi = 0; xi < X; ++xi) {
                            orow[2 * xi] += w0 * xrow[xi];
                            orow[2 * xi + 1] += w1 * xrow[xi];
                        }
                    }
                }
            }
        }
    }
}

template <typename T>
void convtranspose2_grad_input(const Tensor<T>& g, const Tensor<T>& w, Tensor<T>& dx) {
    const std::int64_t N = dx.dim(0), IC = dx.dim(1), Z = dx.dim(2), Y = dx.dim(3), X = dx.dim(4);
    const std::int64_t OC = g.dim(1), OY = g.dim(3), OX = g.dim(4);
    const T* gd = g.data();
    const T* wd = w.data();
    T* dxd = dx.data();
    const std::int64_t xs_c = Z * Y * X, xs_n = IC * xs_c;
    const std::int64_t gs_c = g.dim(2) * OY * OX, gs_n = OC * gs_c;

    for (std::int64_t n = 0; n < N; ++n) {
#pragma omp parallel for collapse(2) schedule(static)
        for (std::int64_t ic = 0; ic < IC; ++ic) {
            for (std::int64_t zi = 0; zi < Z; ++zi) {
                for (std::int64_t yi = 0; yi < Y; ++yi) {
                    T* dxrow = dxd + n * xs_n + ic * xs_c + (zi * Y + yi) * X;
                    for (std::int64_t oc = 0; oc < OC; ++oc) {
                        for (int a = 0; a < 2; ++a) {
                            for (int b = 0; b < 2; ++b) {
                                const T* grow =
                                    gd + n * gs_n + oc * gs_c + ((2 * zi + a) * OY + 2 * yi + b) * OX;
                                const T* wq = wd + ((ic * OC + oc) * 2 + a) * 4 + b * 2;
                                const T w0 = wq[0], w1 = wq[1];
                                for (std::int64_t xi = 0; xi < X; ++xi)
                                    dxrow[xi] += w0 * grow[2 * xi] + w1 * grow[2 * xi + 1];
                            }
                        }
                    }
                }
            }
        }
    }
}

template <typename T>
void convtranspose2_grad_weight(const Tensor<T>& g, const Tensor<T>& x, Tensor<T>& dw) {
    const std::int64_t N = x.dim(0), IC = x.dim(1), Z = x.dim(2), Y = x.dim(3), X = x.dim(4);
    const std::int64_t OC = g.dim(1), OY = g.dim(3), OX = g.dim(4);
    const T* gd = g.data();
    const T* xd = x.data();
    T* dwd = dw.data();
    const std::int64_t xs_c = Z * Y * X, xs_n = IC * xs_c;
    const std::int64_t gs_c = g.dim(2) * OY * OX, gs_n = OC * gs_c;

#pragma omp parallel for schedule(static)
    for (std::int64_t ic = 0; ic < IC; ++ic) {
        for (std::int64_t oc = 0; oc < OC; ++oc) {
            for (int a = 0; a < 2; ++a) {
                for (int b = 0; b < 2; ++b) {
                    T acc0{}, acc1{};
                    for (std::int64_t n = 0; n < N; ++n) {
                        for (std::int64_t zi = 0; zi < Z; ++zi) {
                            for (std::int64_t yi = 0; yi < Y; ++yi) {
                                const T* xrow = xd + n * xs_n + ic * xs_c + (zi * Y + yi) * X;
                                const T* grow =
                                    gd + n * gs_n + oc * gs_c + ((2 * zi + a) * OY + 2 * yi + b) * OX;
                                for (std::int64_t xi = 0; xi < X; ++xi) {
                                    acc0 += xrow[xi] * grow[2 * xi];
                                    acc1 += xrow[xi] * grow[2 * xi + 1];
                                }
                            }
                        }
                    }
                    T* wq = dwd + ((ic * OC + oc) * 2 + a) * 4 + b * 2;
                    wq[0] += acc0;
                    wq[1] += acc1;
                }
            }
        }
    }
}

}  // namespace detail

// ------------------------------------------------------------- public ops

template <typename T>
VarPtr<T> conv3d(const VarPtr<T>& x, const VarPtr<T>& w, const VarPtr<T>& b, int stride,
                 int padding) {
    const auto& xs = x->value.shape();
    const auto& ws = w->value.shape();
    require(xs.size() == 5 && ws.size() == 5, ErrorKind::shape, "conv3d: rank");
    require(xs[1] == ws[1], ErrorKind::shape, "conv3d: in-channel mismatch ", shape_str(xs), " vs ",
            shape_str(ws));
    const int k = static_cast<int>(ws[2]);
    Shape os = {xs[0], ws[0], conv_out_dim(xs[2], k, stride, padding),
                conv_out_dim(xs[3], k, stride, padding), conv_out_dim(xs[4], k, stride, padding)};
    require(os[2] >= 1 && os[3] >= 1 && os[4] >= 1, ErrorKind::shape,
            "conv3d: input too small for kernel ", shape_str(xs));

    Tensor<T> out(os);
    detail::conv3d_value(x->value, w->value, b ? b->value.data() : nullptr, k, stride, padding, out);

    auto y = make_var(std::move(out));
    if (track_grad<T>({x, w, b})) {
        y->requires_grad = true;
        if (x->requires_grad) y->parents.push_back(x);
        if (w->requires_grad) y->parents.push_back(w);
        if (b && b->requires_grad) y->parents.push_back(b);
        y->backprop = [x, w, b, k, stride, padding](Var<T>& self) {
            if (x->requires_grad)
                detail::conv3d_grad_input(self.grad, w->value, k, stride, padding, x->ensure_grad());
            if (w->requires_grad)
                detail::conv3d_grad_weight(self.grad, x->value, k, stride, padding, w->ensure_grad());
            if (b && b->requires_grad) detail::sum_over_channel(self.grad, b->ensure_grad());
        };
    }
    return y;
}

/// Transposed convolution, kernel 2, stride 2 (doubles each spatial dim).
template <typename T>
VarPtr<T> conv_transpose3d_2x(const VarPtr<T>& x, const VarPtr<T>& w, const VarPtr<T>& b) {
    const auto& xs = x->value.shape();
    const auto& ws = w->value.shape();
    require(xs.size() == 5 && ws.size() == 5 && ws[2] == 2 && ws[3] == 2 && ws[4] == 2,
            ErrorKind::shape, "conv_transpose3d_2x: bad shapes");
    require(xs[1] == ws[0], ErrorKind::shape, "conv_transpose3d_2x: channel mismatch");
    Tensor<T> out({xs[0], ws[1], 2 * xs[2], 2 * xs[3], 2 * xs[4]});
    detail::convtranspose2_value(x->value, w->value, b ? b->value.data() : nullptr, out);

    auto y = make_var(std::move(out));
    if (track_grad<T>({x, w, b})) {
        y->requires_grad = true;
        if (x->requires_grad) y->parents.push_back(x);
        if (w->requires_grad) y->parents.push_back(w);
        if (b && b->requires_grad) y->parents.push_back(b);
        y->backprop = [x, w, b](Var<T>& self) {
            if (x->requires_grad) detail::convtranspose2_grad_input(self.grad, w->value, x->ensure_grad());
            if (w->requires_grad) detail::convtranspose2_grad_weight(self.grad, x->value, w->ensure_grad());
            if (b && b->requires_grad) detail::sum_over_channel(self.grad, b->ensure_grad());
        };
    }
    return y;
}

/// Instance normalization with affine parameters, statistics per (sample,
/// channel) over spatial voxels (population variance). A 1-voxel slab
/// normalizes to zero rather than erroring, so depth-7 bottlenecks work.
template <typename T>
VarPtr<T> instance_norm(const VarPtr<T>& x, const VarPtr<T>& gamma, const VarPtr<T>& beta,
                        T eps = static_cast<T>(1e-5)) {
    const auto& xs = x->value.shape();
    require(xs.size() == 5, ErrorKind::shape, "instance_norm: rank");
    const std::int64_t N = xs[0], C = xs[1];
    const std::int64_t S = xs[2] * xs[3] * xs[4];
    require(gamma->value.numel() == C && beta->value.numel() == C, ErrorKind::shape,
            "instance_norm: affine size");

    Tensor<T> out(xs);
    auto mean = std::make_shared<Tensor<T>>(Shape{N, C});
    auto inv = std::make_shared<Tensor<T>>(Shape{N, C});
    const T* xd = x->value.data();
    T* od = out.data();
    const T* gm = gamma->value.data();
    const T* bt = beta->value.data();

#pragma omp parallel for collapse(2) schedule(static)
    for (std::int64_t n = 0; n < N; ++n) {
        for (std::int64_t c = 0; c < C; ++c) {
            const T* slab = xd + (n * C + c) * S;
            T* oslab = od + (n * C + c) * S;
            T mu{};
            for (std::int64_t i = 0; i < S; ++i) mu += slab[i];
            mu /= static_cast<T>(S);
            T var{};
            for (std::int64_t i = 0; i < S; ++i) {
                const T d = slab[i] - mu;
                var += d * d;
            }
            var /= static_cast<T>(S);
            const T iv = T(1) / std::sqrt(var + eps);
            mean->at(n, c) = mu;
            inv->at(n, c) = iv;
            const T g = gm[c], be = bt[c];
            for (std::int64_t i = 0; i < S; ++i) oslab[i] = g * (slab[i] - mu) * iv + be;
        }
    }

    auto y = make_var(std::move(out));
    if (track_grad<T>({x, gamma, beta})) {
        y->requires_grad = true;
        if (x->requires_grad) y->parents.push_back(x);
        if (gamma->requires_grad) y->parents.push_back(gamma);
        if (beta->requires_grad) y->parents.push_back(beta);
        y->backprop = [x, gamma, beta, mean, inv, N, C, S](Var<T>& self) {
            const T* xd = x->value.data();
            const T* gd = self.grad.data();
            Tensor<T> dg_nc({N, C}), db_nc({N, C});
            T* dxd = x->requires_grad ? x->ensure_grad().data() : nullptr;
            const T* gm = gamma->value.data();
#pragma omp parallel for collapse(2) schedule(static)
            for (std::int64_t n = 0; n < N; ++n) {
                for (std::int64_t c = 0; c < C; ++c) {
                    const T* slab = xd + (n * C + c) * S;
                    const T* gslab = gd + (n * C + c) * S;
                    const T mu = mean->at(n, c), iv = inv->at(n, c);
                    T sum_dy{}, sum_dyxh{};
                    for (std::int64_t i = 0; i < S; ++i) {
                        const T xh = (slab[i] - mu) * iv;
                        sum_dy += gslab[i];
                        sum_dyxh += gslab[i] * xh;
                    }
                    db_nc.at(n, c) = sum_dy;
                    dg_nc.at(n, c) = sum_dyxh;
                    if (dxd) {
                        T* dxslab = dxd + (n * C + c) * S;
                        const T m = static_cast<T>(S);
                        const T coef = gm[c] * iv;
                        for (std::int64_t i = 0; i < S; ++i) {
                            const T xh = (slab[i] - mu) * iv;
                            dxslab[i] += coef * (gslab[i] - sum_dy / m - xh * sum_dyxh / m);
                        }
                    }
                }
            }
            if (gamma->requires_grad) {
                Tensor<T>& dgm = gamma->ensure_grad();
                for (std::int64_t n = 0; n < N; ++n)
                    for (std::int64_t c = 0; c < C; ++c) dgm[c] += dg_nc.at(n, c);
            }
            if (beta->requires_grad) {
                Tensor<T>& dbt = beta->ensure_grad();
                for (std::int64_t n = 0; n < N; ++n)
                    for (std::int64_t c = 0; c < C; ++c) dbt[c] += db_nc.at(n, c);
            }
        };
    }
    return y;
}

template <typename T>
VarPtr<T> leaky_relu(const VarPtr<T>& x, T slope) {
    Tensor<T> out(x->value.shape());
    const std::int64_t n = x->value.numel();
    const T* xd = x->value.data();
    T* od = out.data();
#pragma omp parallel for schedule(static) if (n > 1 << 16)
    for (std::int64_t i = 0; i < n; ++i) od[i] = xd[i] > T{} ? xd[i] : slope * xd[i];

    auto y = make_var(std::move(out));
    if (track_grad<T>({x})) {
        y->requires_grad = true;
        y->parents.push_back(x);
        y->backprop = [x, slope, n](Var<T>& self) {
            const T* xd = x->value.data();
            const T* gd = self.grad.data();
            T* dxd = x->ensure_grad().data();
#pragma omp parallel for schedule(static) if (n > 1 << 16)
            for (std::int64_t i = 0; i < n; ++i) dxd[i] += gd[i] * (xd[i] > T{} ? T(1) : slope);
        };
    }
    return y;
}

template <typename T>
VarPtr<T> relu(const VarPtr<T>& x) {
    return leaky_relu(x, T{});
}

template <typename T>
VarPtr<T> sigmoid(const VarPtr<T>& x) {
    Tensor<T> out(x->value.shape());
    const std::int64_t n = x->value.numel();
    const T* xd = x->value.data();
    T* od = out.data();
    for (std::int64_t i = 0; i < n; ++i) od[i] = T(1) / (T(1) + std::exp(-xd[i]));

    auto y = make_var(std::move(out));
    if (track_grad<T>({x})) {
        y->requires_grad = true;
        y->parents.push_back(x);
        auto yv = std::make_shared<Tensor<T>>(y->value);
        y->backprop = [x, yv, n](Var<T>& self) {
            const T* gd = self.grad.data();
            T* dxd = x->ensure_grad().data();
            const T* sv = yv->data();
            for (std::int64_t i = 0; i < n; ++i) dxd[i] += gd[i] * sv[i] * (T(1) - sv[i]);
        };
    }
    return y;
}

template <typename T>
VarPtr<T> add(const VarPtr<T>& a, const VarPtr<T>& b) {
    require(a->value.same_shape(b->value), ErrorKind::shape, "add: shape mismatch ",
            shape_str(a->value.shape()), " vs ", shape_str(b->value.shape()));
    Tensor<T> out(a->value.shape());
    const std::int64_t n = out.numel();
    const T* ad = a->value.data();
    const T* bd = b->value.data();
    T* od = out.data();
#pragma omp parallel for schedule(static) if (n > 1 << 16)
    for (std::int64_t i = 0; i < n; ++i) od[i] = ad[i] + bd[i];

    auto y = make_var(std::move(out));
    if (track_grad<T>({a, b})) {
        y->requires_grad = true;
        if (a->requires_grad) y->parents.push_back(a);
        if (b->requires_grad) y->parents.push_back(b);
        y->backprop = [a, b, n](Var<T>& self) {
            const T* gd = self.grad.data();
            if (a->requires_grad) {
                T* da = a->ensure_grad().data();
                for (std::int64_t i = 0; i < n; ++i) da[i] += gd[i];
            }
            if (b->requires_grad) {
                T* db = b->ensure_grad().data();
                for (std::int64_t i = 0; i < n; ++i) db[i] += gd[i];
            }
        };
    }
    return y;
}

/// Concatenate along the channel axis of [N,C,Z,Y,X] tensors.
template <typename T>
VarPtr<T> concat_channels(const VarPtr<T>& a, const VarPtr<T>& b) {
    const auto& as = a->value.shape();
    const auto& bs = b->value.shape();
    require(as.size() == 5 && bs.size() == 5 && as[0] == bs[0] && as[2] == bs[2] && as[3] == bs[3] &&
                as[4] == bs[4],
            ErrorKind::shape, "concat_channels: ", shape_str(as), " vs ", shape_str(bs));
    const std::int64_t N = as[0], Ca = as[1], Cb = bs[1];
    const std::int64_t S = as[2] * as[3] * as[4];
    Tensor<T> out({N, Ca + Cb, as[2], as[3], as[4]});
    for (std::int64_t n = 0; n < N; ++n) {
        std::memcpy(out.data() + n * (Ca + Cb) * S, a->value.data() + n * Ca * S,
                    sizeof(T) * static_cast<std::size_t>(Ca * S));
        std::memcpy(out.data() + (n * (Ca + Cb) + Ca) * S, b->value.data() + n * Cb * S,
                    sizeof(T) * static_cast<std::size_t>(Cb * S));
    }

    auto y = make_var(std::move(out));
    if (track_grad<T>({a, b})) {
        y->requires_grad = true;
        if (a->requires_grad) y->parents.push_back(a);
        if (b->requires_grad) y->parents.push_back(b);
        y->backprop = [a, b, N, Ca, Cb, S](Var<T>& self) {
            const T* gd = self.grad.data();
            if (a->requires_grad) {
                T* da = a->ensure_grad().data();
                for (std::int64_t n = 0; n < N; ++n) {
                    const T* src = gd + n * (Ca + Cb) * S;
                    T* dst = da + n * Ca * S;
                    for (std::int64_t i = 0; i < Ca * S; ++i) dst[i] += src[i];
                }
            }
            if (b->requires_grad) {
                T* db = b->ensure_grad().data();
                for (std::int64_t n = 0; n < N; ++n) {
                    const T* src = gd + (n * (Ca + Cb) + Ca) * S;
                    T* dst = db + n * Cb * S;
                    for (std::int64_t i = 0; i < Cb * S; ++i) dst[i] += src[i];
                }
            }
        };
    }
    return y;
}

/// Multiply [N,C,Z,Y,X] features by a [N,1,Z,Y,X] map, broadcast over C.
template <typename T>
VarPtr<T> mul_gate(const VarPtr<T>& x, const VarPtr<T>& alpha) {
    const auto& xs = x->value.shape();
    const auto& as = alpha->value.shape();
    require(as.size() == 5 && as[1] == 1 && as[0] == xs[0] && as[2] == xs[2] && as[3] == xs[3] &&
                as[4] == xs[4],
            ErrorKind::shape, "mul_gate: ", shape_str(xs), " vs ", shape_str(as));
    const std::int64_t N = xs[0], C = xs[1], S = xs[2] * xs[3] * xs[4];
    Tensor<T> out(xs);
    const T* xd = x->value.data();
    const T* ad = alpha->value.data();
    T* od = out.data();
#pragma omp parallel for collapse(2) schedule(static)
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t c = 0; c < C; ++c) {
            const T* xrow = xd + (n * C + c) * S;
            const T* arow = ad + n * S;
            T* orow = od + (n * C + c) * S;
            for (std::int64_t i = 0; i < S; ++i) orow[i] = xrow[i] * arow[i];
        }

    auto y = make_var(std::move(out));
    if (track_grad<T>({x, alpha})) {
        y->requires_grad = true;
        if (x->requires_grad) y->parents.push_back(x);
        if (alpha->requires_grad) y->parents.push_back(alpha);
        y->backprop = [x, alpha, N, C, S](Var<T>& self) {
            const T* gd = self.grad.data();
            const T* xd = x->value.data();
            const T* ad = alpha->value.data();
            if (x->requires_grad) {
                T* dx = x->ensure_grad().data();
#pragma omp parallel for collapse(2) schedule(static)
                for (std::int64_t n = 0; n < N; ++n)
                    for (std::int64_t c = 0; c < C; ++c) {
                        const T* grow = gd + (n * C + c) * S;
                        const T* arow = ad + n * S;
                        T* dxrow = dx + (n * C + c) * S;
                        for (std::int64_t i = 0; i < S; ++i) dxrow[i] += grow[i] * arow[i];
                    }
            }
            if (alpha->requires_grad) {
                T* da = alpha->ensure_grad().data();
#pragma omp parallel for schedule(static)
                for (std::int64_t n = 0; n < N; ++n) {
                    T* darow = da + n * S;
                    for (std::int64_t c = 0; c < C; ++c) {
                        const T* grow = gd + (n * C + c) * S;
                        const T* xrow = xd + (n * C + c) * S;
                        for (std::int64_t i = 0; i < S; ++i) darow[i] += grow[i] * xrow[i];
                    }
                }
            }
        };
    }
    return y;
}

/// Multiply by a fixed (non-learned) mask broadcast over channels; used by
/// drop-block, where the mask already carries the keep-rescale factor.
template <typename T>
VarPtr<T> mul_mask(const VarPtr<T>& x, Tensor<T> mask) {
    auto m = make_var(std::move(mask), false);
    return mul_gate(x, m);
}

/// Trilinear upsampling by 2 with half-voxel alignment
/// (src = (dst + 0.5) / 2 - 0.5, edges clamped).
template <typename T>
VarPtr<T> upsample_trilinear2x(const VarPtr<T>& x) {
    const auto& xs = x->value.shape();
    require(xs.size() == 5, ErrorKind::shape, "upsample_trilinear2x: rank");
    const std::int64_t N = xs[0], C = xs[1], Z = xs[2], Y = xs[3], X = xs[4];
    const std::int64_t OZ = 2 * Z, OY = 2 * Y, OX = 2 * X;

    struct AxisTap {
        std::int64_t i0, i1;
        T w0, w1;
    };
    auto make_taps = [](std::int64_t in, std::int64_t out) {
        std::vector<AxisTap> taps(static_cast<std::size_t>(out));
        for (std::int64_t o = 0; o < out; ++o) {
            double src = (static_cast<double>(o) + 0.5) / 2.0 - 0.5;
            std::int64_t i0 = static_cast<std::int64_t>(std::floor(src));
            double f = src - static_cast<double>(i0);
            std::int64_t i1 = i0 + 1;
            i0 = std::clamp<std::int64_t>(i0, 0, in - 1);
            i1 = std::clamp<std::int64_t>(i1, 0, in - 1);
            taps[static_cast<std::size_t>(o)] = {i0, i1, static_cast<T>(1.0 - f), static_cast<T>(f)};
        }
        return taps;
    };
    auto tz = std::make_shared<std::vector<AxisTap>>(make_taps(Z, OZ));
    auto ty = std::make_shared<std::vector<AxisTap>>(make_taps(Y, OY));
    auto tx = std::make_shared<std::vector<AxisTap>>(make_taps(X, OX));

    Tensor<T> out({N, C, OZ, OY, OX});
    const T* xd = x->value.data();
    T* od = out.data();
#pragma omp parallel for collapse(2) schedule(static)
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t c = 0; c < C; ++c) {
            const T* slab = xd + (n * C + c) * Z * Y * X;
            T* oslab = od + (n * C + c) * OZ * OY * OX;
            for (std::int64_t zo = 0; zo < OZ; ++zo) {
                const auto& az = (*tz)[static_cast<std::size_t>(zo)];
                for (std::int64_t yo = 0; yo < OY; ++yo) {
                    const auto& ay = (*ty)[static_cast<std::size_t>(yo)];
                    const T* r00 = slab + (az.i0 * Y + ay.i0) * X;
                    const T* r01 = slab + (az.i0 * Y + ay.i1) * X;
                    const T* r10 = slab + (az.i1 * Y + ay.i0) * X;
                    const T* r11 = slab + (az.i1 * Y + ay.i1) * X;
                    T* orow = oslab + (zo * OY + yo) * OX;
                    for (std::int64_t xo = 0; xo < OX; ++xo) {
                        const auto& ax = (*tx)[static_cast<std::size_t>(xo)];
                        const T v00 = az.w0 * ay.w0, v01 = az.w0 * ay.w1;
                        const T v10 = az.w1 * ay.w0, v11 = az.w1 * ay.w1;
                        orow[xo] = ax.w0 * (v00 * r00[ax.i0] + v01 * r01[ax.i0] + v10 * r10[ax.i0] +
                                            v11 * r11[ax.i0]) +
                                   ax.w1 * (v00 * r00[ax.i1] + v01 * r01[ax.i1] + v10 * r10[ax.i1] +
                                            v11 * r11[ax.i1]);
                    }
                }
            }
        }

    auto y = make_var(std::move(out));
    if (track_grad<T>({x})) {
        y->requires_grad = true;
        y->parents.push_back(x);
        y->backprop = [x, tz, ty, tx, N, C, Z, Y, X, OZ, OY, OX](Var<T>& self) {
            const T* gd = self.grad.data();
            T* dxd = x->ensure_grad().data();
#pragma omp parallel for collapse(2) schedule(static)
            for (std::int64_t n = 0; n < N; ++n)
                for (std::int64_t c = 0; c < C; ++c) {
                    T* dslab = dxd + (n * C + c) * Z * Y * X;
                    const T* gslab = gd + (n * C + c) * OZ * OY * OX;
                    for (std::int64_t zo = 0; zo < OZ; ++zo) {
                        const auto& az = (*tz)[static_cast<std::size_t>(zo)];
                        for (std::int64_t yo = 0; yo < OY; ++yo) {
                            const auto& ay = (*ty)[static_cast<std::size_t>(yo)];
                            const T* grow = gslab + (zo * OY + yo) * OX;
                            for (std::int64_t xo = 0; xo < OX; ++xo) {
                                const auto& ax = (*tx)[static_cast<std::size_t>(xo)];
                                const T g = grow[xo];
                                dslab[(az.i0 * Y + ay.i0) * X + ax.i0] += az.w0 * ay.w0 * ax.w0 * g;
                                dslab[(az.i0 * Y + ay.i0) * X + ax.i1] += az.w0 * ay.w0 * ax.w1 * g;
                                dslab[(az.i0 * Y + ay.i1) * X + ax.i0] += az.w0 * ay.w1 * ax.w0 * g;
                                dslab[(az.i0 * Y + ay.i1) * X + ax.i1] += az.w0 * ay.w1 * ax.w1 * g;
                                dslab[(az.i1 * Y + ay.i0) * X + ax.i0] += az.w1 * ay.w0 * ax.w0 * g;
                                dslab[(az.i1 * Y + ay.i0) * X + ax.i1] += az.w1 * ay.w0 * ax.w1 * g;
                                dslab[(az.i1 * Y + ay.i1) * X + ax.i0] += az.w1 * ay.w1 * ax.w0 * g;
                                dslab[(az.i1 * Y + ay.i1) * X + ax.i1] += az.w1 * ay.w1 * ax.w1 * g;
                            }
                        }
                    }
                }
        };
    }
    return y;
}

}  // namespace ounet::nn
