// Eager reverse-mode autodiff. Ops compute their value when recorded, so a
// forward pass can read intermediate values (the vector quantizer needs the
// encoder output before the graph continues). backward() walks the tape in
// reverse and accumulates into bound Parameters.
#pragma once

#include <functional>
#include <vector>

#include "msd/nn/kernels.hpp"
#include "msd/nn/tensor.hpp"

namespace msd::nn {

template <typename T>
class Tape {
public:
    struct Var {
        int id = -1;
        bool valid() const { return id >= 0; }
    };

    // Leaves. constants never receive gradients; inputs do (readable through
    // grad() after backward); params accumulate into Parameter::grad.
    Var constant(Tensor<T> value);
    Var input(Tensor<T> value);
    Var param(Parameter<T>& p);

    Var conv2d(Var x, Var kernel, int stride = 1, int pad = 0);
    Var conv_transpose2d(Var x, Var kernel, int stride = 1, int pad = 0);
    Var bias_add(Var x, Var bias);  // x [N,C,...], bias [C]
    Var linear(Var x, Var weight);  // x [N,C], weight [C,F]
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var scale(Var a, T factor);
    Var relu(Var x);
    Var global_avg_pool(Var x);  // [N,C,H,W] -> [N,C]
    // Forward value is `quantized`; the gradient passes through to
    // encoder_out unchanged.
    Var straight_through(Var encoder_out, Tensor<T> quantized);
    Var sum(Var x);           // scalar
    Var sum_squares(Var x);   // scalar ||x||^2
    Var mean_squares(Var x);  // scalar ||x||^2 / numel
    Var kl_diag_gaussian(Var mean, Var variance);  // scalar, vs N(0, I)
    Var bce_with_logits(Var logits, Tensor<T> targets);  // scalar mean

    const Tensor<T>& value(Var v) const { return node(v).value; }
    const Tensor<T>& grad(Var v) const { return node(v).grad; }
    std::size_t size() const { return nodes_.size(); }

    // loss must be scalar. Gradients of this tape are zeroed first; bound
    // Parameter grads are accumulated (callers zero them between steps).
    void backward(Var loss);

private:
    struct Node {
        Tensor<T> value;
        Tensor<T> grad;
        bool needs_grad = false;
        Parameter<T>* bound = nullptr;
        std::function<void(Tape&, int)> back;  // pushes grad to parents
    };

    Node& node(Var v) {
        if (!v.valid() || v.id >= static_cast<int>(nodes_.size())) throw NnError("invalid var");
        return nodes_[static_cast<std::size_t>(v.id)];
    }
    const Node& node(Var v) const {
        if (!v.valid() || v.id >= static_cast<int>(nodes_.size())) throw NnError("invalid var");
        return nodes_[static_cast<std::size_t>(v.id)];
    }
    Var push(Node n);
    Tensor<T>& grad_buf(int id);

    std::vector<Node> nodes_;
};

using TapeF = Tape<float>;
using TapeD = Tape<double>;

// Plain (non-tape) evaluations of the loss utilities.
template <typename T>
T kl_diag_gaussian_value(const std::vector<T>& mean, const std::vector<T>& variance);

template <typename T>
struct VaeLossInputs {
    Tensor<T> x;
    Tensor<T> x_tilde;
    std::vector<T> mean;      // f(x)
    std::vector<T> variance;  // g(x), elementwise positive
    T beta = T(1);
};

template <typename T>
T vae_total_loss(const VaeLossInputs<T>& in);

}  // namespace msd::nn
