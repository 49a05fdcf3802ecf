#include "metamat/autodiff.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace metamat::ag {

namespace {

std::uint64_t g_next_id = 1;
bool g_grad_enabled = true;

using MatMap = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ConstMatMap =
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

Var make_node(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backprop) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->id = g_next_id++;
    if (g_grad_enabled) {
        bool needs = false;
        for (const auto& p : parents)
            if (p && p->requires_grad) needs = true;
        if (needs) {
            n->requires_grad = true;
            n->parents = std::move(parents);
            n->backprop = std::move(backprop);
        }
    }
    return n;
}

// Generic strided loop over `shape` invoking fn(out_linear, off_a, off_b).
template <typename Fn>
void for_each_broadcast(const Shape& shape, const std::vector<std::size_t>& sa,
                        const std::vector<std::size_t>& sb, Fn&& fn) {
    const std::size_t rank = shape.size();
    const std::size_t n = shape_numel(shape);
    if (rank == 0) {
        if (n) fn(0, 0, 0);
        return;
    }
    std::vector<std::size_t> idx(rank, 0);
    std::size_t off_a = 0, off_b = 0;
    for (std::size_t lin = 0; lin < n; ++lin) {
        fn(lin, off_a, off_b);
        for (std::size_t ax = rank; ax-- > 0;) {
            ++idx[ax];
            off_a += sa[ax];
            off_b += sb[ax];
            if (idx[ax] < shape[ax]) break;
            off_a -= sa[ax] * shape[ax];
            off_b -= sb[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
}

// Sum `src` (shaped `src_shape`) into the broadcast-reduced `dst_shape`.
Tensor reduce_to_shape(const Tensor& src, const Shape& dst_shape) {
    if (src.shape() == dst_shape) return src;
    Tensor dst(dst_shape);
    const auto sd = broadcast_strides(dst_shape, src.shape());
    const auto ss = strides_for(src.shape());
    for_each_broadcast(src.shape(), sd, ss,
                       [&](std::size_t, std::size_t od, std::size_t os) { dst[od] += src[os]; });
    return dst;
}

void accumulate(Node& node, const Tensor& g) {
    Tensor& grad = node.ensure_grad();
    for (std::size_t i = 0; i < grad.numel(); ++i) grad[i] += g[i];
}

template <typename FwdFn, typename BwdFn>
Var binary_op(const Var& a, const Var& b, FwdFn fwd, BwdFn bwd_pair) {
    const Shape out_shape = broadcast_shapes(a->value.shape(), b->value.shape());
    Tensor out(out_shape);
    const auto sa = broadcast_strides(a->value.shape(), out_shape);
    const auto sb = broadcast_strides(b->value.shape(), out_shape);
    const double* pa = a->value.data();
    const double* pb = b->value.data();
    if (a->value.shape() == b->value.shape()) {
        for (std::size_t i = 0; i < out.numel(); ++i) out[i] = fwd(pa[i], pb[i]);
    } else {
        for_each_broadcast(out_shape, sa, sb, [&](std::size_t o, std::size_t ia, std::size_t ib) {
            out[o] = fwd(pa[ia], pb[ib]);
        });
    }
    return make_node(std::move(out), {a, b}, [a, b, sa, sb, bwd_pair](Node& n) {
        Tensor ga_full(n.value.shape()), gb_full(n.value.shape());
        const double* pa2 = a->value.data();
        const double* pb2 = b->value.data();
        for_each_broadcast(n.value.shape(), sa, sb,
                           [&](std::size_t o, std::size_t ia, std::size_t ib) {
                               auto [da, db] = bwd_pair(pa2[ia], pb2[ib], n.value[o]);
                               ga_full[o] = n.grad[o] * da;
                               gb_full[o] = n.grad[o] * db;
                           });
        if (a->requires_grad) accumulate(*a, reduce_to_shape(ga_full, a->value.shape()));
        if (b->requires_grad) accumulate(*b, reduce_to_shape(gb_full, b->value.shape()));
    });
}

template <typename FwdFn, typename BwdFn>
Var unary_op(const Var& a, FwdFn fwd, BwdFn bwd) {
    Tensor out(a->value.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = fwd(a->value[i]);
    return make_node(std::move(out), {a}, [a, bwd](Node& n) {
        if (!a->requires_grad) return;
        Tensor g(a->value.shape());
        for (std::size_t i = 0; i < g.numel(); ++i)
            g[i] = n.grad[i] * bwd(a->value[i], n.value[i]);
        accumulate(*a, g);
    });
}

}  // namespace

Tensor& Node::ensure_grad() {
    if (!has_grad()) grad = Tensor(value.shape());
    return grad;
}

bool grad_enabled() { return g_grad_enabled; }
void set_grad_enabled(bool on) { g_grad_enabled = on; }

Var constant(Tensor value) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->id = g_next_id++;
    return n;
}

Var make_param(Tensor value) {
    auto n = constant(std::move(value));
    n->requires_grad = true;
    return n;
}

Var add(const Var& a, const Var& b) {
    return binary_op(
        a, b, [](double x, double y) { return x + y; },
        [](double, double, double) { return std::pair<double, double>{1.0, 1.0}; });
}

Var sub(const Var& a, const Var& b) {
    return binary_op(
        a, b, [](double x, double y) { return x - y; },
        [](double, double, double) { return std::pair<double, double>{1.0, -1.0}; });
}

Var mul(const Var& a, const Var& b) {
    return binary_op(
        a, b, [](double x, double y) { return x * y; },
        [](double x, double y, double) { return std::pair<double, double>{y, x}; });
}

Var div(const Var& a, const Var& b) {
    return binary_op(
        a, b, [](double x, double y) { return x / y; },
        [](double x, double y, double) {
            return std::pair<double, double>{1.0 / y, -x / (y * y)};
        });
}

Var add_scalar(const Var& a, double s) {
    return unary_op(
        a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Var mul_scalar(const Var& a, double s) {
    return unary_op(
        a, [s](double x) { return x * s; }, [s](double, double) { return s; });
}

Var neg(const Var& a) { return mul_scalar(a, -1.0); }

Var abs(const Var& a) {
    return unary_op(
        a, [](double x) { return std::fabs(x); },
        [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Var square(const Var& a) {
    return unary_op(
        a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var sqrt(const Var& a) {
    return unary_op(
        a, [](double x) { return std::sqrt(x); }, [](double, double y) { return 0.5 / y; });
}

Var exp(const Var& a) {
    return unary_op(
        a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var sigmoid(const Var& a) {
    return unary_op(
        a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
        [](double, double y) { return y * (1.0 - y); });
}

Var silu(const Var& a) {
    return unary_op(
        a,
        [](double x) {
            const double s = 1.0 / (1.0 + std::exp(-x));
            return x * s;
        },
        [](double x, double) {
            const double s = 1.0 / (1.0 + std::exp(-x));
            return s * (1.0 + x * (1.0 - s));
        });
}

Var elu_plus_one(const Var& a) {
    return unary_op(
        a, [](double x) { return x > 0.0 ? x + 1.0 : std::exp(x); },
        [](double x, double y) { return x > 0.0 ? 1.0 : y; });
}

Var softmax_last(const Var& a) {
    const Shape& shp = a->value.shape();
    if (shp.empty()) throw std::invalid_argument("softmax_last: rank-0 input");
    const std::size_t cols = shp.back();
    const std::size_t rows = a->value.numel() / cols;
    Tensor out(shp);
    const double* in = a->value.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = in + r * cols;
        double m = row[0];
        for (std::size_t c = 1; c < cols; ++c) m = std::max(m, row[c]);
        double z = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            const double e = std::exp(row[c] - m);
            out[r * cols + c] = e;
            z += e;
        }
        for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] /= z;
    }
    return make_node(std::move(out), {a}, [a, rows, cols](Node& n) {
        if (!a->requires_grad) return;
        Tensor g(a->value.shape());
        for (std::size_t r = 0; r < rows; ++r) {
            double dot = 0.0;
            for (std::size_t c = 0; c < cols; ++c)
                dot += n.grad[r * cols + c] * n.value[r * cols + c];
            for (std::size_t c = 0; c < cols; ++c)
                g[r * cols + c] = n.value[r * cols + c] * (n.grad[r * cols + c] - dot);
        }
        accumulate(*a, g);
    });
}

Var reshape(const Var& a, Shape shape) {
    Tensor out = a->value.reshaped(std::move(shape));
    return make_node(std::move(out), {a}, [a](Node& n) {
        if (!a->requires_grad) return;
        accumulate(*a, n.grad.reshaped(a->value.shape()));
    });
}

namespace {

Tensor permute_value(const Tensor& in, const std::vector<std::size_t>& axes) {
    const Shape& shp = in.shape();
    if (axes.size() != shp.size()) throw std::invalid_argument("permute: axes rank mismatch");
    Shape out_shape(shp.size());
    for (std::size_t i = 0; i < axes.size(); ++i) out_shape[i] = shp[axes[i]];
    Tensor out(out_shape);
    const auto in_strides = strides_for(shp);
    std::vector<std::size_t> src_strides(axes.size());
    for (std::size_t i = 0; i < axes.size(); ++i) src_strides[i] = in_strides[axes[i]];
    const auto zero = std::vector<std::size_t>(axes.size(), 0);
    for_each_broadcast(out_shape, src_strides, zero,
                       [&](std::size_t o, std::size_t s, std::size_t) { out[o] = in[s]; });
    return out;
}

}  // namespace

Var permute(const Var& a, const std::vector<std::size_t>& axes) {
    Tensor out = permute_value(a->value, axes);
    std::vector<std::size_t> inv(axes.size());
    for (std::size_t i = 0; i < axes.size(); ++i) inv[axes[i]] = i;
    return make_node(std::move(out), {a}, [a, inv](Node& n) {
        if (!a->requires_grad) return;
        accumulate(*a, permute_value(n.grad, inv));
    });
}

Var slice(const Var& a, std::size_t axis, std::size_t start, std::size_t len) {
    const Shape& shp = a->value.shape();
    if (axis >= shp.size() || start + len > shp[axis])
        throw std::invalid_argument("slice: range out of bounds");
    Shape out_shape = shp;
    out_shape[axis] = len;
    Tensor out(out_shape);
    const auto st = strides_for(shp);
    const std::size_t outer = shape_numel(Shape(shp.begin(), shp.begin() + axis));
    const std::size_t inner = st[axis];
    const std::size_t in_block = shp[axis] * inner;
    const std::size_t out_block = len * inner;
    for (std::size_t o = 0; o < outer; ++o)
        std::copy_n(a->value.data() + o * in_block + start * inner, out_block,
                    out.data() + o * out_block);
    return make_node(std::move(out), {a},
                     [a, outer, inner, in_block, out_block, start, len](Node& n) {
                         if (!a->requires_grad) return;
                         Tensor& g = a->ensure_grad();
                         for (std::size_t o = 0; o < outer; ++o) {
                             const double* src = n.grad.data() + o * out_block;
                             double* dst = g.data() + o * in_block + start * inner;
                             for (std::size_t i = 0; i < out_block; ++i) dst[i] += src[i];
                         }
                     });
}

Var concat(const std::vector<Var>& parts, std::size_t axis) {
    if (parts.empty()) throw std::invalid_argument("concat: no inputs");
    const Shape& first = parts[0]->value.shape();
    Shape out_shape = first;
    std::size_t total = 0;
    for (const auto& p : parts) {
        const Shape& s = p->value.shape();
        if (s.size() != first.size()) throw std::invalid_argument("concat: rank mismatch");
        for (std::size_t i = 0; i < s.size(); ++i)
            if (i != axis && s[i] != first[i])
                throw std::invalid_argument("concat: shape mismatch off-axis");
        total += s[axis];
    }
    out_shape[axis] = total;
    Tensor out(out_shape);
    const std::size_t outer = shape_numel(Shape(first.begin(), first.begin() + axis));
    const std::size_t inner = strides_for(out_shape)[axis];
    std::size_t offset = 0;
    std::vector<std::size_t> part_sizes;
    for (const auto& p : parts) {
        const std::size_t blk = p->value.dim(axis) * inner;
        part_sizes.push_back(blk);
        for (std::size_t o = 0; o < outer; ++o)
            std::copy_n(p->value.data() + o * blk, blk,
                        out.data() + o * total * inner + offset);
        offset += blk;
    }
    return make_node(std::move(out), parts, [parts, part_sizes, outer, inner, total](Node& n) {
        std::size_t off = 0;
        for (std::size_t pi = 0; pi < parts.size(); ++pi) {
            const std::size_t blk = part_sizes[pi];
            if (parts[pi]->requires_grad) {
                Tensor& g = parts[pi]->ensure_grad();
                for (std::size_t o = 0; o < outer; ++o) {
                    const double* src = n.grad.data() + o * total * inner + off;
                    double* dst = g.data() + o * blk;
                    for (std::size_t i = 0; i < blk; ++i) dst[i] += src[i];
                }
            }
            off += blk;
        }
    });
}

Var sum_axes(const Var& a, std::vector<std::size_t> axes) {
    const Shape& shp = a->value.shape();
    Shape out_shape = shp;
    for (std::size_t ax : axes) {
        if (ax >= shp.size()) throw std::invalid_argument("sum_axes: bad axis");
        out_shape[ax] = 1;
    }
    Tensor out(out_shape);
    const auto sd = broadcast_strides(out_shape, shp);
    const auto ss = strides_for(shp);
    const double* in = a->value.data();
    for_each_broadcast(shp, sd, ss,
                       [&](std::size_t, std::size_t od, std::size_t os) { out[od] += in[os]; });
    return make_node(std::move(out), {a}, [a, sd, ss](Node& n) {
        if (!a->requires_grad) return;
        Tensor& g = a->ensure_grad();
        for_each_broadcast(a->value.shape(), sd, ss,
                           [&](std::size_t, std::size_t od, std::size_t os) {
                               g[os] += n.grad[od];
                           });
    });
}

Var mean_axes(const Var& a, std::vector<std::size_t> axes) {
    std::size_t count = 1;
    for (std::size_t ax : axes) count *= a->value.dim(ax);
    return mul_scalar(sum_axes(a, std::move(axes)), 1.0 / static_cast<double>(count));
}

Var sum_all(const Var& a) {
    Tensor out({1});
    out[0] = a->value.sum();
    return make_node(std::move(out), {a}, [a](Node& n) {
        if (!a->requires_grad) return;
        Tensor& g = a->ensure_grad();
        const double s = n.grad[0];
        for (std::size_t i = 0; i < g.numel(); ++i) g[i] += s;
    });
}

Var mean_all(const Var& a) {
    return mul_scalar(sum_all(a), 1.0 / static_cast<double>(a->value.numel()));
}

Var matmul(const Var& a, const Var& b) {
    if (a->value.rank() != 2 || b->value.rank() != 2 || a->value.dim(1) != b->value.dim(0))
        throw std::invalid_argument("matmul: need [M,K]x[K,N], got " +
                                    shape_to_string(a->value.shape()) + " x " +
                                    shape_to_string(b->value.shape()));
    const std::size_t M = a->value.dim(0), K = a->value.dim(1), N = b->value.dim(1);
    Tensor out({M, N});
    ConstMatMap A(a->value.data(), M, K), B(b->value.data(), K, N);
    MatMap(out.data(), M, N).noalias() = A * B;
    return make_node(std::move(out), {a, b}, [a, b, M, K, N](Node& n) {
        ConstMatMap A(a->value.data(), M, K), B(b->value.data(), K, N),
            G(n.grad.data(), M, N);
        if (a->requires_grad) {
            MatMap GA(a->ensure_grad().data(), M, K);
            GA.noalias() += G * B.transpose();
        }
        if (b->requires_grad) {
            MatMap GB(b->ensure_grad().data(), K, N);
            GB.noalias() += A.transpose() * G;
        }
    });
}

Var bmm(const Var& a, const Var& b) {
    if (a->value.rank() != 3 || b->value.rank() != 3 || a->value.dim(0) != b->value.dim(0) ||
        a->value.dim(2) != b->value.dim(1))
        throw std::invalid_argument("bmm: need [G,M,K]x[G,K,N], got " +
                                    shape_to_string(a->value.shape()) + " x " +
                                    shape_to_string(b->value.shape()));
    const std::size_t G = a->value.dim(0), M = a->value.dim(1), K = a->value.dim(2),
                      N = b->value.dim(2);
    Tensor out({G, M, N});
    for (std::size_t g = 0; g < G; ++g) {
        ConstMatMap A(a->value.data() + g * M * K, M, K), B(b->value.data() + g * K * N, K, N);
        MatMap(out.data() + g * M * N, M, N).noalias() = A * B;
    }
    return make_node(std::move(out), {a, b}, [a, b, G, M, K, N](Node& n) {
        const bool ga = a->requires_grad, gb = b->requires_grad;
        if (ga) a->ensure_grad();
        if (gb) b->ensure_grad();
        for (std::size_t g = 0; g < G; ++g) {
            ConstMatMap A(a->value.data() + g * M * K, M, K),
                B(b->value.data() + g * K * N, K, N), Gm(n.grad.data() + g * M * N, M, N);
            if (ga) {
                MatMap GA(a->grad.data() + g * M * K, M, K);
                GA.noalias() += Gm * B.transpose();
            }
            if (gb) {
                MatMap GB(b->grad.data() + g * K * N, K, N);
                GB.noalias() += A.transpose() * Gm;
            }
        }
    });
}

namespace {

struct ConvDims {
    std::size_t N, C, H, W, Cout, kh, kw, OH, OW;
};

ConvDims conv_dims(const Tensor& x, const Tensor& w, std::size_t stride, std::size_t pad) {
    if (x.rank() != 4 || w.rank() != 4)
        throw std::invalid_argument("conv2d: need x[N,C,H,W], w[Cout,C,kh,kw]");
    if (x.dim(1) != w.dim(1))
        throw std::invalid_argument("conv2d: channel mismatch " + shape_to_string(x.shape()) +
                                    " vs " + shape_to_string(w.shape()));
    ConvDims d;
    d.N = x.dim(0);
    d.C = x.dim(1);
    d.H = x.dim(2);
    d.W = x.dim(3);
    d.Cout = w.dim(0);
    d.kh = w.dim(2);
    d.kw = w.dim(3);
    if (d.H + 2 * pad < d.kh || d.W + 2 * pad < d.kw)
        throw std::invalid_argument("conv2d: kernel larger than padded input");
    d.OH = (d.H + 2 * pad - d.kh) / stride + 1;
    d.OW = (d.W + 2 * pad - d.kw) / stride + 1;
    return d;
}

// col is [C*kh*kw, OH*OW] for one sample.
void im2col(const double* x, const ConvDims& d, std::size_t stride, std::size_t pad,
            double* col) {
    const std::size_t patch = d.kh * d.kw;
    for (std::size_t c = 0; c < d.C; ++c) {
        for (std::size_t ki = 0; ki < d.kh; ++ki) {
            for (std::size_t kj = 0; kj < d.kw; ++kj) {
                double* dst = col + ((c * patch) + ki * d.kw + kj) * d.OH * d.OW;
                for (std::size_t oh = 0; oh < d.OH; ++oh) {
                    const std::ptrdiff_t ih =
                        static_cast<std::ptrdiff_t>(oh * stride + ki) -
                        static_cast<std::ptrdiff_t>(pad);
                    if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(d.H)) {
                        std::fill_n(dst + oh * d.OW, d.OW, 0.0);
                        continue;
                    }
                    for (std::size_t ow = 0; ow < d.OW; ++ow) {
                        const std::ptrdiff_t iw =
                            static_cast<std::ptrdiff_t>(ow * stride + kj) -
                            static_cast<std::ptrdiff_t>(pad);
                        dst[oh * d.OW + ow] =
                            (iw < 0 || iw >= static_cast<std::ptrdiff_t>(d.W))
                                ? 0.0
                                : x[(c * d.H + static_cast<std::size_t>(ih)) * d.W +
                                    static_cast<std::size_t>(iw)];
                    }
                }
            }
        }
    }
}

void col2im_accumulate(const double* col, const ConvDims& d, std::size_t stride, std::size_t pad,
                       double* x_grad) {
    const std::size_t patch = d.kh * d.kw;
    for (std::size_t c = 0; c < d.C; ++c) {
        for (std::size_t ki = 0; ki < d.kh; ++ki) {
            for (std::size_t kj = 0; kj < d.kw; ++kj) {
                const double* src = col + ((c * patch) + ki * d.kw + kj) * d.OH * d.OW;
                for (std::size_t oh = 0; oh < d.OH; ++oh) {
                    const std::ptrdiff_t ih =
                        static_cast<std::ptrdiff_t>(oh * stride + ki) -
                        static_cast<std::ptrdiff_t>(pad);
                    if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(d.H)) continue;
                    for (std::size_t ow = 0; ow < d.OW; ++ow) {
                        const std::ptrdiff_t iw =
                            static_cast<std::ptrdiff_t>(ow * stride + kj) -
                            static_cast<std::ptrdiff_t>(pad);
                        if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(d.W)) continue;
                        x_grad[(c * d.H + static_cast<std::size_t>(ih)) * d.W +
                               static_cast<std::size_t>(iw)] += src[oh * d.OW + ow];
                    }
                }
            }
        }
    }
}

}  // namespace

Tensor conv2d_value(const Tensor& x, const Tensor& w, const Tensor* b, std::size_t stride,
                    std::size_t pad) {
    const ConvDims d = conv_dims(x, w, stride, pad);
    const std::size_t cols = d.C * d.kh * d.kw;
    Tensor out({d.N, d.Cout, d.OH, d.OW});
    std::vector<double> col(cols * d.OH * d.OW);
    ConstMatMap Wm(w.data(), d.Cout, cols);
    for (std::size_t n = 0; n < d.N; ++n) {
        im2col(x.data() + n * d.C * d.H * d.W, d, stride, pad, col.data());
        ConstMatMap Cm(col.data(), cols, d.OH * d.OW);
        MatMap Om(out.data() + n * d.Cout * d.OH * d.OW, d.Cout, d.OH * d.OW);
        Om.noalias() = Wm * Cm;
        if (b) {
            for (std::size_t co = 0; co < d.Cout; ++co) {
                double* dst = out.data() + (n * d.Cout + co) * d.OH * d.OW;
                const double bias = (*b)[co];
                for (std::size_t i = 0; i < d.OH * d.OW; ++i) dst[i] += bias;
            }
        }
    }
    return out;
}

Var conv2d(const Var& x, const Var& w, const Var& b, std::size_t stride, std::size_t pad) {
    if (b && b->value.numel() != w->value.dim(0))
        throw std::invalid_argument("conv2d: bias size mismatch");
    Tensor out = conv2d_value(x->value, w->value, b ? &b->value : nullptr, stride, pad);
    std::vector<Var> parents = {x, w};
    if (b) parents.push_back(b);
    return make_node(std::move(out), std::move(parents), [x, w, b, stride, pad](Node& n) {
        const ConvDims d = conv_dims(x->value, w->value, stride, pad);
        const std::size_t cols = d.C * d.kh * d.kw;
        const std::size_t plane = d.OH * d.OW;
        std::vector<double> col(cols * plane);
        std::vector<double> dcol(cols * plane);
        ConstMatMap Wm(w->value.data(), d.Cout, cols);
        const bool gx = x->requires_grad, gw = w->requires_grad,
                   gb = b && b->requires_grad;
        if (gx) x->ensure_grad();
        if (gw) w->ensure_grad();
        if (gb) b->ensure_grad();
        for (std::size_t s = 0; s < d.N; ++s) {
            ConstMatMap Gm(n.grad.data() + s * d.Cout * plane, d.Cout, plane);
            if (gw || gx) {
                // im2col recomputed here instead of being cached from the
                // forward pass; keeps graph memory proportional to activations.
                im2col(x->value.data() + s * d.C * d.H * d.W, d, stride, pad, col.data());
            }
            if (gw) {
                ConstMatMap Cm(col.data(), cols, plane);
                MatMap GW(w->grad.data(), d.Cout, cols);
                GW.noalias() += Gm * Cm.transpose();
            }
            if (gx) {
                MatMap Dc(dcol.data(), cols, plane);
                Dc.noalias() = Wm.transpose() * Gm;
                col2im_accumulate(dcol.data(), d, stride, pad,
                                  x->grad.data() + s * d.C * d.H * d.W);
            }
            if (gb) {
                for (std::size_t co = 0; co < d.Cout; ++co) {
                    double acc = 0.0;
                    const double* g = n.grad.data() + (s * d.Cout + co) * plane;
                    for (std::size_t i = 0; i < plane; ++i) acc += g[i];
                    b->grad[co] += acc;
                }
            }
        }
    });
}

Var upsample_nearest_2x(const Var& x) {
    if (x->value.rank() != 4) throw std::invalid_argument("upsample_nearest_2x: need [N,C,H,W]");
    const std::size_t N = x->value.dim(0), C = x->value.dim(1), H = x->value.dim(2),
                      W = x->value.dim(3);
    Tensor out({N, C, 2 * H, 2 * W});
    for (std::size_t nc = 0; nc < N * C; ++nc) {
        const double* src = x->value.data() + nc * H * W;
        double* dst = out.data() + nc * 4 * H * W;
        for (std::size_t i = 0; i < H; ++i)
            for (std::size_t j = 0; j < W; ++j) {
                const double v = src[i * W + j];
                dst[(2 * i) * 2 * W + 2 * j] = v;
                dst[(2 * i) * 2 * W + 2 * j + 1] = v;
                dst[(2 * i + 1) * 2 * W + 2 * j] = v;
                dst[(2 * i + 1) * 2 * W + 2 * j + 1] = v;
            }
    }
    return make_node(std::move(out), {x}, [x, N, C, H, W](Node& n) {
        if (!x->requires_grad) return;
        Tensor& g = x->ensure_grad();
        for (std::size_t nc = 0; nc < N * C; ++nc) {
            const double* src = n.grad.data() + nc * 4 * H * W;
            double* dst = g.data() + nc * H * W;
            for (std::size_t i = 0; i < H; ++i)
                for (std::size_t j = 0; j < W; ++j)
                    dst[i * W + j] += src[(2 * i) * 2 * W + 2 * j] +
                                      src[(2 * i) * 2 * W + 2 * j + 1] +
                                      src[(2 * i + 1) * 2 * W + 2 * j] +
                                      src[(2 * i + 1) * 2 * W + 2 * j + 1];
        }
    });
}

void backward(const Var& root) {
    if (!root->requires_grad)
        throw std::runtime_error("backward: root does not require grad (grad mode off?)");
    root->ensure_grad().fill(1.0);

    // Reverse creation order is a valid topological order. The order holds
    // owning pointers: clearing a consumer's edges must not free a node that
    // is still queued.
    std::vector<Var> order;
    std::unordered_set<Node*> seen;
    std::vector<Var> stack{root};
    seen.insert(root.get());
    while (!stack.empty()) {
        Var n = stack.back();
        stack.pop_back();
        order.push_back(n);
        for (const auto& p : n->parents)
            if (p && p->requires_grad && seen.insert(p.get()).second) stack.push_back(p);
    }
    std::sort(order.begin(), order.end(),
              [](const Var& a, const Var& b) { return a->id > b->id; });

    for (const Var& n : order) {
        if (n->backprop) {
            n->backprop(*n);
            // Interior grads and edges are dead once propagated.
            n->backprop = nullptr;
            n->parents.clear();
            n->grad = Tensor();
        }
    }
}

void zero_grad(const std::vector<Var>& params) {
    for (const auto& p : params)
        if (p->has_grad()) p->grad.fill(0.0);
}

}  // namespace metamat::ag
