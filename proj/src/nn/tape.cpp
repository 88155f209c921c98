#include "msd/nn/tape.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

namespace msd::nn {

template <typename T>
typename Tape<T>::Var Tape<T>::push(Node n) {
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
}

template <typename T>
Tensor<T>& Tape<T>::grad_buf(int id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.size() == 0) n.grad = Tensor<T>::zeros(n.value.shape);
    return n.grad;
}

template <typename T>
typename Tape<T>::Var Tape<T>::constant(Tensor<T> value) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = false;
    return push(std::move(n));
}

template <typename T>
typename Tape<T>::Var Tape<T>::input(Tensor<T> value) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = true;
    return push(std::move(n));
}

template <typename T>
typename Tape<T>::Var Tape<T>::param(Parameter<T>& p) {
    Node n;
    n.value = p.value;
    n.needs_grad = true;
    n.bound = &p;
    return push(std::move(n));
}

namespace {

kern::ConvGeom conv_geom(const std::vector<int>& xshape, const std::vector<int>& kshape,
                         int stride, int pad) {
    if (xshape.size() != 4 || kshape.size() != 4) throw NnError("conv expects 4-d tensors");
    if (kshape[2] != kshape[3]) throw NnError("conv kernels must be square");
    if (xshape[1] != kshape[1]) throw NnError("channel mismatch: input has " +
                                              std::to_string(xshape[1]) + ", kernel expects " +
                                              std::to_string(kshape[1]));
    if (stride < 1 || pad < 0) throw NnError("bad stride/pad");
    kern::ConvGeom g;
    g.n = xshape[0];
    g.c_in = xshape[1];
    g.h_in = xshape[2];
    g.w_in = xshape[3];
    g.c_out = kshape[0];
    g.k = kshape[2];
    g.stride = stride;
    g.pad = pad;
    if (g.h_out() < 1 || g.w_out() < 1) throw NnError("conv output would be empty");
    return g;
}

}  // namespace

template <typename T>
typename Tape<T>::Var Tape<T>::conv2d(Var x, Var kernel, int stride, int pad) {
    const Tensor<T>& xv = value(x);
    const Tensor<T>& kv = value(kernel);
    const kern::ConvGeom g = conv_geom(xv.shape, kv.shape, stride, pad);

    Node n;
    n.value = Tensor<T>({g.n, g.c_out, g.h_out(), g.w_out()});
    kern::conv2d_fwd(xv.ptr(), kv.ptr(), n.value.ptr(), g);
    n.needs_grad = node(x).needs_grad || node(kernel).needs_grad;
    if (n.needs_grad) {
        const int xid = x.id, kid = kernel.id;
        n.back = [g, xid, kid](Tape& t, int self) {
            const Tensor<T>& gy = t.nodes_[self].grad;
            Node& xn = t.nodes_[xid];
            Node& kn = t.nodes_[kid];
            if (xn.needs_grad) {
                Tensor<T> gx(xn.value.shape);
                kern::conv2d_bwd_input(gy.ptr(), kn.value.ptr(), gx.ptr(), g);
                Tensor<T>& acc = t.grad_buf(xid);
                for (std::int64_t i = 0; i < gx.size(); ++i) acc[i] += gx[i];
            }
            if (kn.needs_grad) {
                Tensor<T> gk(kn.value.shape);
                kern::conv2d_bwd_kernel(xn.value.ptr(), gy.ptr(), gk.ptr(), g);
                Tensor<T>& acc = t.grad_buf(kid);
                for (std::int64_t i = 0; i < gk.size(); ++i) acc[i] += gk[i];
            }
        };
    }
    return push(std::move(n));
}

template <typename T>
typename Tape<T>::Var Tape<T>::conv_transpose2d(Var x, Var kernel, int stride, int pad) {
    const Tensor<T>& xv = value(x);
    const Tensor<T>& kv = value(kernel);
    if (xv.ndim() != 4 || kv.ndim() != 4) throw NnError("conv_transpose expects 4-d tensors");
    if (xv.shape[1] != kv.shape[0])
        throw NnError("channel mismatch: input has " + std::to_string(xv.shape[1]) +
                      ", kernel provides " + std::to_string(kv.shape[0]));
    // Geometry of the adjoint forward conv: x plays gy.
    kern::ConvGeom g;
    g.n = xv.shape[0];
    g.c_out = kv.shape[0];
    g.c_in = kv.shape[1];
    g.k = kv.shape[2];
    g.stride = stride;
    g.pad = pad;
    g.h_in = (xv.shape[2] - 1) * stride - 2 * pad + g.k;
    g.w_in = (xv.shape[3] - 1) * stride - 2 * pad + g.k;
    if (g.h_in < 1 || g.w_in < 1) throw NnError("conv_transpose output would be empty");
    if (g.h_out() != xv.shape[2] || g.w_out() != xv.shape[3])
        throw NnError("conv_transpose geometry mismatch");

    Node n;
    n.value = Tensor<T>({g.n, g.c_in, g.h_in, g.w_in});
    kern::conv2d_bwd_input(xv.ptr(), kv.ptr(), n.value.ptr(), g);
    n.needs_grad = node(x).needs_grad || node(kernel).needs_grad;
    if (n.needs_grad) {
        const int xid = x.id, kid = kernel.id;
        n.back = [g, xid, kid](Tape& t, int self) {
            const Tensor<T>& gy = t.nodes_[self].grad;  // shaped like ct output
            Node& xn = t.nodes_[xid];
            Node& kn = t.nodes_[kid];
            if (xn.needs_grad) {
                Tensor<T> gx(xn.value.shape);
                kern::conv2d_fwd(gy.ptr(), kn.value.ptr(), gx.ptr(), g);
                Tensor<T>& acc = t.grad_buf(xid);
                for (std::int64_t i = 0; i < gx.size(); ++i) acc[i] += gx[i];
            }
            if (kn.needs_grad) {
                Tensor<T> gk(kn.value.shape);
                kern::conv2d_bwd_kernel(gy.ptr(), xn.value.ptr(), gk.ptr(), g);
                Tensor<T>& acc = t.grad_buf(kid);
                for (std::int64_t i = 0; i < gk.size(); ++i) acc[i] += gk[i];
            }
        };
    }
    return push(std::move(n));
}

template <typename T>
typename Tape<T>::Var Tape<T>::bias_add(Var x, Var bias) {
    const Tensor<T>& xv = value(x);
    const Tensor<T>& bv = value(bias);
    if (xv.ndim() < 2 || bv.ndim() != 1 || bv.shape[0] != xv.shape[1])
        throw NnError("bias_add expects bias of size channels");

    const std::int64_t channels = bv.shape[0];
    const std::int64_t batch = xv.shape[0];
    const std::int64_t inner = xv.size() / (batch * channels);

    Node n;
    n.value = xv;
    for (std::int64_t b = 0; b < batch; ++b)
        for (std::int64_t c = 0; c < channels; ++c) {
            T* p = n.value.ptr() + (b * channels + c) * inner;
            const T bc = bv[c];
            for (std::int64_t i = 0; i < inner; ++i) p[i] += bc;
        }
    n.needs_grad = node(x).needs_grad || node(bias).needs_grad;
    if (n.needs_grad) {
        const int xid = x.id, bid = bias.id;
        n.back = [batch, channels, inner, xid, bid](Tape& t, int self) {
            const Tensor<T>& gy = t.nodes_[self].grad;
            if (t.nodes_[xid].needs_grad) {
                Tensor<T>& gx = t.grad_buf(xid);
                for (std::int64_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
            }
            if (t.nodes_[bid].needs_grad) {
                Tensor<T>& gb = t.grad_buf(bid);
                for (std::int64_t b = 0; b < batch; ++b)
                    for (std::int64_t c = 0; c < channels; ++c) {
                        const T* p = gy.ptr() + (b * channels + c) * inner;
                        T acc = T(0);
                        for (std::int64_t i = 0; i < inner; ++i) acc += p[i];
                        gb[c] += acc;
                    }
            }
        };
    }
    return push(std::move(n));
}

template <typename T>
typename Tape<T>::Var Tape<T>::linear(Var x, Var weight) {
    const Tensor<T>& xv = value(x);
    const Tensor<T>& wv = value(weight);
    if (xv.ndim() != 2 || wv.ndim() != 2 || xv.shape[1] != wv.shape[0])
        throw NnError("linear expects [N,C] x [C,F]");
    const int batch = xv.shape[0], cin = xv.shape[1], cout = wv.shape[1];

    Node n;
    n.value = Tensor<T>({batch, cout});
    for (int b = 0; b < batch; ++b)
        for (int f = 0; f < cout; ++f) {
            T acc = T(0);
            for (int c = 0; c < cin; ++c) acc += xv[b * cin + c] * wv[c * cout + f];
            n.value[b * cout + f] = acc;
        }
    n.needs_grad = node(x).needs_grad || node(weight).needs_grad;
    if (n.needs_grad) {
        const int xid = x.id, wid = weight.id;
        n.back = [batch, cin, cout, xid, wid](Tape& t, int self) {
            const Tensor<T>& gy = t.nodes_[self].grad;
            const Tensor<T>& xv2 = t.nodes_[xid].value;
            const Tensor<T>& wv2 = t.nodes_[wid].value;
            if (t.nodes_[xid].needs_grad) {
                Tensor<T>& gx = t.grad_buf(xid);
                for (int b = 0; b < batch; ++b)
                    for (int c = 0; c < cin; ++c) {
                        T acc = T(0);
                        for (int f = 0; f < cout; ++f) acc += gy[b * cout + f] * wv2[c * cout + f];
                        gx[b * cin + c] += acc;
                    }
            }
            if (t.nodes_[wid].needs_grad) {
                Tensor<T>& gw = t.grad_buf(wid);
                for (int c = 0; c < cin; ++c)
                    for (int f = 0; f < cout; ++f) {
                        T acc = T(0);
                        for (int b = 0; b < batch; ++b) acc += xv2[b * cin + c] * gy[b * cout + f];
                        gw[c * cout + f] += acc;
                    }
            }
        };
    }
    return push(std::move(n));
}

template <typename T>
typename Tape<T>::Var Tape<T>::add(Var a, Var b) {
    const Tensor<T>& av = value(a);
    const Tensor<T>& bv = value(b);
    if (!same_shape(av, bv)) throw NnError("add: shape mismatch");
    Node n;
    n.value = av;
    for (std::int64_t i = 0; i < n.value.size(); ++i) n.value[i] += bv[i];
    n.needs_grad = node(a).needs_grad || node(b).needs_grad;
    if (n.needs_grad) {
        const int aid = a.id, bid = b.id;
        n.back = [aid, bid](Tape& t, int self) {
            const Tensor<T>& gy = t.nodes_[self].grad;
            for (int pid : {aid, bid}) {
                if (!t.nodes_[pid].needs_grad) continue;
                Tensor<T>& gp = t.grad_buf(pid);
                for (std::int64_t i = 0; i < gy.size(); ++i) gp[i] += gy[i];
            }
        };
    }
    return push(std::move(n));
}

template <typename T>
typename Tape<T>::Var Tape<T>::sub(Var a, Var b) {
    const Tensor<T>& av = value(a);
    const Tensor<T>& bv = value(b);
    if (!same_shape(av, bv)) throw NnError("sub: shape mismatch");
    Node n;
    n.value = av;
    for (std::int64_t i = 0; i < n.value.size(); ++i) n.value[i] -= bv[i];
    n.needs_grad = node(a).needs_grad || node(b).needs_grad;
    if (n.needs_grad) {
        const int aid = a.id, bid = b.id;
        n.back = [aid, bid](Tape& t, int self) {
            const Tensor<T>& gy = t.nodes_[self].grad;
            if (t.nodes_[aid].needs_grad) {
                Tensor<T>& ga = t.grad_buf(aid);
                for (std::int64_t i = 0; i < gy.size(); ++i) ga[i] += gy[i];
            }
            if (t.nodes_[bid].needs_grad) {
                Tensor<T>& gb = t.grad_buf(bid);
                for (std::int64_t i = 0; i < gy.size(); ++i) gb[i] -= gy[i];
            }
        };
    }
    return push(std::move(n));
}

template <typename T>
typename Tape<T>::Var Tape<T>::scale(Var a, T factor) {
    Node n;
    n.value = value(a);
    for (std::int64_t i = 0; i < n.value.size(); ++i) n.value[i] *= factor;
    n.needs_grad = node(a).needs_grad;
    if (n.needs_grad) {
        const int aid = a.id;
        n.back = [aid, factor](Tape& t, int self) {
            const Tensor<T>& gy = t.nodes_[self].grad;
            Tensor<T>& ga = t.grad_buf(aid);
            for (std::int64_t i = 0; i < gy.size(); ++i) ga[i] += factor * gy[i];
        };
    }
    return push(std::move(n));
}

template <typename T>
typename Tape<T>::Var Tape<T>::relu(Var x) {
    Node n;
    n.value = value(x);
    for (std::int64_t i = 0; i < n.value.size(); ++i)
        if (n.value[i] < T(0)) n.value[i] = T(0);
    n.needs_grad = node(x).needs_grad;
    if (n.needs_grad) {
        const int xid = x.id;
        n.back = [xid](Tape& t, int self) {
            const Tensor<T>& gy = t.nodes_[self].grad;
            const Tensor<T>& xv = t.nodes_[xid].value;
            Tensor<T>& gx = t.grad_buf(xid);
            for (std::int64_t i = 0; i < gy.size(); ++i)
                if (xv[i] > T(0)) gx[i] += gy[i];
        };
    }
    return push(std::move(n));
}

template <typename T>
typename Tape<T>::Var Tape<T>::global_avg_pool(Var x) {
    const Tensor<T>& xv = value(x);
    if (xv.ndim() != 4) throw NnError("global_avg_pool expects [N,C,H,W]");
    const int batch = xv.shape[0], channels = xv.shape[1];
    const std::int64_t hw = static_cast<std::int64_t>(xv.shape[2]) * xv.shape[3];

    Node n;
    n.value = Tensor<T>({batch, channels});
    for (int b = 0; b < batch; ++b)
        for (int c = 0; c < channels; ++c) {
            const T* p = xv.ptr() + (static_cast<std::int64_t>(b) * channels + c) * hw;
            double acc = 0.0;
            for (std::int64_t i = 0; i < hw; ++i) acc += p[i];
            n.value[b * channels + c] = static_cast<T>(acc / static_cast<double>(hw));
        }
    n.needs_grad = node(x).needs_grad;
    if (n.needs_grad) {
        const int xid = x.id;
        n.back = [batch, channels, hw, xid](Tape& t, int self) {
            const Tensor<T>& gy = t.nodes_[self].grad;
            Tensor<T>& gx = t.grad_buf(xid);
            for (int b = 0; b < batch; ++b)
                for (int c = 0; c < channels; ++c) {
                    const T g = gy[b * channels + c] / static_cast<T>(hw);
                    T* p = gx.ptr() + (static_cast<std::int64_t>(b) * channels + c) * hw;
                    for (std::int64_t i = 0; i < hw; ++i) p[i] += g;
                }
        };
    }
    return push(std::move(n));
}

template <typename T>
typename Tape<T>::Var Tape<T>::straight_through(Var encoder_out, Tensor<T> quantized) {
    const Tensor<T>& ev = value(encoder_out);
    if (ev.shape != quantized.shape) throw NnError("straight_through: shape mismatch");
    Node n;
    n.value = std::move(quantized);
    n.needs_grad = node(encoder_out).needs_grad;
    if (n.needs_grad) {
        const int eid = encoder_out.id;
        n.back = [eid](Tape& t, int self) {
            const Tensor<T>& gy = t.nodes_[self].grad;
            Tensor<T>& ge = t.grad_buf(eid);
            for (std::int64_t i = 0; i < gy.size(); ++i) ge[i] += gy[i];
        };
    }
    return push(std::move(n));
}

template <typename T>
typename Tape<T>::Var Tape<T>::sum(Var x) {
    const Tensor<T>& xv = value(x);
    double acc = 0.0;
    for (std::int64_t i = 0; i < xv.size(); ++i) acc += static_cast<double>(xv[i]);
    Node n;
    n.value = Tensor<T>::scalar(static_cast<T>(acc));
    n.needs_grad = node(x).needs_grad;
    if (n.needs_grad) {
        const int xid = x.id;
        n.back = [xid](Tape& t, int self) {
            const T go = t.nodes_[self].grad[0];
            Tensor<T>& gx = t.grad_buf(xid);
            for (std::int64_t i = 0; i < gx.size(); ++i) gx[i] += go;
        };
    }
    return push(std::move(n));
}

template <typename T>
typename Tape<T>::Var Tape<T>::sum_squares(Var x) {
    const Tensor<T>& xv = value(x);
    double acc = 0.0;
    for (std::int64_t i = 0; i < xv.size(); ++i)
        acc += static_cast<double>(xv[i]) * static_cast<double>(xv[i]);
    Node n;
    n.value = Tensor<T>::scalar(static_cast<T>(acc));
    n.needs_grad = node(x).needs_grad;
    if (n.needs_grad) {
        const int xid = x.id;
        n.back = [xid](Tape& t, int self) {
            const T go = t.nodes_[self].grad[0];
            const Tensor<T>& xv2 = t.nodes_[xid].value;
            Tensor<T>& gx = t.grad_buf(xid);
            for (std::int64_t i = 0; i < xv2.size(); ++i) gx[i] += T(2) * xv2[i] * go;
        };
    }
    return push(std::move(n));
}

template <typename T>
typename Tape<T>::Var Tape<T>::mean_squares(Var x) {
    const Tensor<T>& xv = value(x);
    if (xv.size() == 0) throw NnError("mean_squares of empty tensor");
    const std::int64_t count = xv.size();
    double acc = 0.0;
    for (std::int64_t i = 0; i < count; ++i)
        acc += static_cast<double>(xv[i]) * static_cast<double>(xv[i]);
    Node n;
    n.value = Tensor<T>::scalar(static_cast<T>(acc / static_cast<double>(count)));
    n.needs_grad = node(x).needs_grad;
    if (n.needs_grad) {
        const int xid = x.id;
        n.back = [xid, count](Tape& t, int self) {
            const T go = t.nodes_[self].grad[0];
            const Tensor<T>& xv2 = t.nodes_[xid].value;
            Tensor<T>& gx = t.grad_buf(xid);
            const T f = T(2) / static_cast<T>(count);
            for (std::int64_t i = 0; i < xv2.size(); ++i) gx[i] += f * xv2[i] * go;
        };
    }
    return push(std::move(n));
}

template <typename T>
typename Tape<T>::Var Tape<T>::kl_diag_gaussian(Var mean, Var variance) {
    const Tensor<T>& fv = value(mean);
    const Tensor<T>& gv = value(variance);
    if (fv.size() != gv.size()) throw NnError("kl: mean/variance length mismatch");
    for (std::int64_t i = 0; i < gv.size(); ++i)
        if (!(gv[i] > T(0))) throw NnError("kl: variance must be positive elementwise");

    double acc = 0.0;
    for (std::int64_t i = 0; i < fv.size(); ++i) {
        const double f = fv[i], g = gv[i];
        acc += 0.5 * (g + f * f - 1.0 - std::log(g));
    }
    Node n;
    n.value = Tensor<T>::scalar(static_cast<T>(acc));
    n.needs_grad = node(mean).needs_grad || node(variance).needs_grad;
    if (n.needs_grad) {
        const int fid = mean.id, gid = variance.id;
        n.back = [fid, gid](Tape& t, int self) {
            const T go = t.nodes_[self].grad[0];
            const Tensor<T>& fv2 = t.nodes_[fid].value;
            const Tensor<T>& gv2 = t.nodes_[gid].value;
            if (t.nodes_[fid].needs_grad) {
                Tensor<T>& gf = t.grad_buf(fid);
                for (std::int64_t i = 0; i < fv2.size(); ++i) gf[i] += go * fv2[i];
            }
            if (t.nodes_[gid].needs_grad) {
                Tensor<T>& gg = t.grad_buf(gid);
                for (std::int64_t i = 0; i < gv2.size(); ++i)
                    gg[i] += go * T(0.5) * (T(1) - T(1) / gv2[i]);
            }
        };
    }
    return push(std::move(n));
}

template <typename T>
typename Tape<T>::Var Tape<T>::bce_with_logits(Var logits, Tensor<T> targets) {
    const Tensor<T>& zv = value(logits);
    if (zv.size() != targets.size()) throw NnError("bce: logits/targets size mismatch");
    const std::int64_t count = zv.size();

    double acc = 0.0;
    for (std::int64_t i = 0; i < count; ++i) {
        const double z = zv[i], y = targets[i];
        acc += std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
    }
    Node n;
    n.value = Tensor<T>::scalar(static_cast<T>(acc / static_cast<double>(count)));
    n.needs_grad = node(logits).needs_grad;
    if (n.needs_grad) {
        const int zid = logits.id;
        auto tgt = std::make_shared<Tensor<T>>(std::move(targets));
        n.back = [zid, count, tgt](Tape& t, int self) {
            const T go = t.nodes_[self].grad[0];
            const Tensor<T>& zv2 = t.nodes_[zid].value;
            Tensor<T>& gz = t.grad_buf(zid);
            for (std::int64_t i = 0; i < count; ++i) {
                const double s = 1.0 / (1.0 + std::exp(-static_cast<double>(zv2[i])));
                gz[i] += go * static_cast<T>((s - (*tgt)[i]) / static_cast<double>(count));
            }
        };
    }
    return push(std::move(n));
}

template <typename T>
void Tape<T>::backward(Var loss) {
    Node& ln = node(loss);
    if (ln.value.size() != 1) throw NnError("backward requires a scalar loss");
    for (auto& n : nodes_)
        if (n.grad.size() != 0) std::fill(n.grad.data.begin(), n.grad.data.end(), T(0));
    grad_buf(loss.id)[0] = T(1);

    for (int i = loss.id; i >= 0; --i) {
        Node& n = nodes_[static_cast<std::size_t>(i)];
        if (n.back && n.needs_grad && n.grad.size() != 0) n.back(*this, i);
    }
    for (int i = 0; i <= loss.id; ++i) {
        Node& n = nodes_[static_cast<std::size_t>(i)];
        if (n.bound && n.bound->trainable && n.grad.size() != 0)
            for (std::int64_t j = 0; j < n.grad.size(); ++j) n.bound->grad[j] += n.grad[j];
    }
}

template <typename T>
T kl_diag_gaussian_value(const std::vector<T>& mean, const std::vector<T>& variance) {
    if (mean.size() != variance.size()) throw NnError("kl: mean/variance length mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < mean.size(); ++i) {
        if (!(variance[i] > T(0))) throw NnError("kl: variance must be positive elementwise");
        const double f = mean[i], g = variance[i];
        acc += 0.5 * (g + f * f - 1.0 - std::log(g));
    }
    return static_cast<T>(acc);
}

template <typename T>
T vae_total_loss(const VaeLossInputs<T>& in) {
    if (!same_shape(in.x, in.x_tilde)) throw NnError("vae loss: x/x_tilde shape mismatch");
    double fidelity = 0.0;
    for (std::int64_t i = 0; i < in.x.size(); ++i) {
        const double d = static_cast<double>(in.x[i]) - static_cast<double>(in.x_tilde[i]);
        fidelity += d * d;
    }
    return static_cast<T>(fidelity) + in.beta * kl_diag_gaussian_value(in.mean, in.variance);
}

template class Tape<float>;
template class Tape<double>;
template float kl_diag_gaussian_value<float>(const std::vector<float>&, const std::vector<float>&);
template double kl_diag_gaussian_value<double>(const std::vector<double>&, const std::vector<double>&);
template float vae_total_loss<float>(const VaeLossInputs<float>&);
template double vae_total_loss<double>(const VaeLossInputs<double>&);

}  // namespace msd::nn
