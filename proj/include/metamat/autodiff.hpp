#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "metamat/tensor.hpp"

namespace metamat::ag {

// Reverse-mode autodiff over Tensor. Ops build a DAG of Nodes; backward()
// walks it in reverse creation order. With grad mode disabled, ops compute
// values only and keep no parent references, so inference streams memory.

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
    Tensor value;
    Tensor grad;  // allocated lazily by backward()
    bool requires_grad = false;
    std::uint64_t id = 0;
    std::vector<Var> parents;
    std::function<void(Node&)> backprop;  // accumulates into parents' grads

    bool has_grad() const { return grad.numel() == value.numel() && grad.numel() > 0; }
    Tensor& ensure_grad();
};

bool grad_enabled();
void set_grad_enabled(bool on);

// RAII guard for inference sections.
struct NoGradGuard {
    NoGradGuard() : prev_(grad_enabled()) { set_grad_enabled(false); }
    ~NoGradGuard() { set_grad_enabled(prev_); }

private:
    bool prev_;
};

Var constant(Tensor value);
Var make_param(Tensor value);  // leaf with requires_grad = true

// --- elementwise binary, NumPy broadcasting ---
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);

// --- scalar ---
Var add_scalar(const Var& a, double s);
Var mul_scalar(const Var& a, double s);

// --- elementwise unary ---
Var neg(const Var& a);
Var abs(const Var& a);
Var square(const Var& a);
Var sqrt(const Var& a);
Var exp(const Var& a);
Var sigmoid(const Var& a);
Var silu(const Var& a);
Var elu_plus_one(const Var& a);  // positive feature map for linear attention

// softmax over the last axis
Var softmax_last(const Var& a);

// --- shape ---
Var reshape(const Var& a, Shape shape);
Var permute(const Var& a, const std::vector<std::size_t>& axes);
Var slice(const Var& a, std::size_t axis, std::size_t start, std::size_t len);
Var concat(const std::vector<Var>& parts, std::size_t axis);

// --- reductions ---
// Reduce over `axes`; reduced axes kept with size 1.
Var sum_axes(const Var& a, std::vector<std::size_t> axes);
Var mean_axes(const Var& a, std::vector<std::size_t> axes);
Var sum_all(const Var& a);   // -> shape {1}
Var mean_all(const Var& a);  // -> shape {1}

// --- linear algebra ---
Var matmul(const Var& a, const Var& b);  // [M,K]x[K,N]
Var bmm(const Var& a, const Var& b);     // [G,M,K]x[G,K,N]

// --- conv / resampling ---
// x [N,Cin,H,W], w [Cout,Cin,kh,kw], optional bias [Cout].
Var conv2d(const Var& x, const Var& w, const Var& b, std::size_t stride, std::size_t pad);
Var upsample_nearest_2x(const Var& x);  // [N,C,H,W] -> [N,C,2H,2W]

void backward(const Var& root);
void zero_grad(const std::vector<Var>& params);

// Plain-tensor helpers shared with non-graph code paths.
Tensor conv2d_value(const Tensor& x, const Tensor& w, const Tensor* b, std::size_t stride,
                    std::size_t pad);

}  // namespace metamat::ag
