#pragma once

// Minimal tape-free reverse-mode autodiff. Every op returns a Var holding its
// value and, when any input requires a gradient, a closure that pushes the
// upstream gradient into its parents. backward() walks the graph in reverse
// topological order.

#include "dgkd/tensor.hpp"

#include <functional>
#include <memory>
#include <vector>

namespace dgkd::ag {

struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    // Adds g into grad, allocating on first use.
    void accumulate(const Tensor& g);
    Tensor& grad_buffer();
};

class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node> node)
        : node_(std::move(node))
    {
    }

    bool defined() const noexcept { return node_ != nullptr; }
    const Tensor& value() const { return node_->value; }
    Tensor& mutable_value() { return node_->value; }
    const Shape& shape() const { return node_->value.shape(); }
    int dim(int axis) const { return node_->value.dim(axis); }
    int rank() const { return node_->value.rank(); }
    bool requires_grad() const { return node_ && node_->requires_grad; }

    /// Gradient accumulated by backward(); zeros if none has reached this node.
    Tensor grad() const;
    bool has_grad() const { return !node_->grad.empty(); }
    void zero_grad() { node_->grad = Tensor(); }

    const std::shared_ptr<Node>& node() const noexcept { return node_; }

    /// Scalar value of a one-element Var.
    double item() const;

private:
    std::shared_ptr<Node> node_;
};

Var constant(Tensor value);
Var parameter(Tensor value);
Var detach(const Var& x);

void backward(const Var& root);

// Elementwise
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
/// Multiplies sample n (leading axis) by factors[n].
Var scale_samples(const Var& a, const std::vector<double>& factors);
Var add_scalar(const Var& a, double s);
Var one_minus(const Var& a);
Var sigmoid(const Var& a);
Var relu(const Var& a);
Var silu(const Var& a);

// Broadcasting: bias [C] over NCHW, or per-sample vector [N,C] over NCHW.
Var add_channel_bias(const Var& x, const Var& bias);
Var add_sample_channel(const Var& x, const Var& v);

// Linear map for [N,D] inputs with weight [O,D] and bias [O].
Var linear(const Var& x, const Var& weight, const Var& bias);

/// 2-D cross-correlation, input [N,Ci,H,W], weight [Co,Ci,k,k], bias [Co].
Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int pad);

/// Bilinear resize with half-pixel centres (align_corners = false).
Var upsample_bilinear(const Var& x, int out_h, int out_w);
/// Mean over non-overlapping factor x factor blocks.
Var avg_pool(const Var& x, int factor);
/// [N,C,H,W] -> [N,C]
Var global_avg_pool(const Var& x);
/// Channels [from, to) of an NCHW tensor.
Var slice_channels(const Var& x, int from, int to);
Var flip_horizontal(const Var& x);

// Reductions / losses; all return shape [1].
Var sum(const std::vector<Var>& scalars);
Var mean_squared_error(const Var& a, const Var& b);
/// Multi-label BCE with logits averaged over all entries; targets in {0,1}.
Var bce_with_logits(const Var& scores, const Tensor& targets);
/// Per-pixel softmax cross-entropy over channel axis, mean over pixels whose
/// target differs from ignore_label. Returns 0 when every pixel is ignored.
Var cross_entropy(const Var& logits, const std::vector<int>& targets, int ignore_label);
/// Mean over pixels of KL(softmax(target) || softmax(input)) along channels.
Var kl_div_logits(const Var& input, const Var& target);

Tensor softmax_channels(const Tensor& logits);

} // namespace dgkd::ag
