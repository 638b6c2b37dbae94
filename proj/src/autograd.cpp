#include "dgkd/autograd.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace dgkd::ag {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

Var make(Tensor value, std::initializer_list<Var> inputs, std::function<void(Node&)> fn)
{
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    for (const Var& in : inputs)
        node->requires_grad = node->requires_grad || in.requires_grad();
    if (node->requires_grad) {
        for (const Var& in : inputs)
            node->parents.push_back(in.node());
        node->backward_fn = std::move(fn);
    }
    return Var(std::move(node));
}

bool wants(const Node& self, std::size_t i)
{
    return self.parents[i]->requires_grad;
}

void require_rank4(const Tensor& t, const char* what)
{
    if (t.rank() != 4)
        throw std::invalid_argument(std::string(what) + ": expected NCHW tensor, got " + shape_str(t.shape()));
}

double sigmoid_scalar(double x)
{
    if (x >= 0) {
        const double e = std::exp(-x);
        return 1.0 / (1.0 + e);
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

// Column buffer for one sample: rows = Ci*k*k, cols = Ho*Wo.
void im2col(const double* img, int ci, int h, int w, int k, int stride, int pad, int ho, int wo, double* cols)
{
    for (int c = 0; c < ci; ++c)
        for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
                double* row = cols + (static_cast<std::size_t>(c) * k * k + ky * k + kx) * ho * wo;
                for (int oy = 0; oy < ho; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= h) {
                        std::fill(row + oy * wo, row + (oy + 1) * wo, 0.0);
                        continue;
                    }
                    const double* src = img + (static_cast<std::size_t>(c) * h + iy) * w;
                    for (int ox = 0; ox < wo; ++ox) {
                        const int ix = ox * stride - pad + kx;
                        row[oy * wo + ox] = (ix >= 0 && ix < w) ? src[ix] : 0.0;
                    }
                }
            }
}

void col2im(const double* cols, int ci, int h, int w, int k, int stride, int pad, int ho, int wo, double* img)
{
    for (int c = 0; c < ci; ++c)
        for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
                const double* row = cols + (static_cast<std::size_t>(c) * k * k + ky * k + kx) * ho * wo;
                for (int oy = 0; oy < ho; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= h)
                        continue;
                    double* dst = img + (static_cast<std::size_t>(c) * h + iy) * w;
                    for (int ox = 0; ox < wo; ++ox) {
                        const int ix = ox * stride - pad + kx;
                        if (ix >= 0 && ix < w)
                            dst[ix] += row[oy * wo + ox];
                    }
                }
            }
}

struct BilinearTap {
    int i0, i1;
    double w0, w1;
};

std::vector<BilinearTap> bilinear_taps(int in, int out)
{
    std::vector<BilinearTap> taps(static_cast<std::size_t>(out));
    const double ratio = static_cast<double>(in) / out;
    for (int o = 0; o < out; ++o) {
        double src = (o + 0.5) * ratio - 0.5;
        if (src < 0)
            src = 0;
        int i0 = static_cast<int>(std::floor(src));
        if (i0 > in - 1)
            i0 = in - 1;
        const int i1 = std::min(i0 + 1, in - 1);
        const double frac = src - i0;
        taps[static_cast<std::size_t>(o)] = {i0, i1, 1.0 - frac, frac};
    }
    return taps;
}

} // namespace

void Node::accumulate(const Tensor& g)
{
    if (grad.empty())
        grad = g;
    else
        grad += g;
}

Tensor& Node::grad_buffer()
{
    if (grad.empty())
        grad = Tensor(value.shape());
    return grad;
}

Tensor Var::grad() const
{
    if (node_->grad.empty())
        return Tensor(node_->value.shape());
    return node_->grad;
}

double Var::item() const
{
    if (value().size() != 1)
        throw std::logic_error("item() on non-scalar of shape " + shape_str(shape()));
    return value()[0];
}

Var constant(Tensor value)
{
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    return Var(std::move(node));
}

Var parameter(Tensor value)
{
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    node->requires_grad = true;
    return Var(std::move(node));
}

Var detach(const Var& x)
{
    return constant(x.value());
}

void backward(const Var& root)
{
    if (!root.requires_grad())
        return;
    if (root.value().size() != 1)
        throw std::logic_error("backward() requires a scalar root");

    // Iterative post-order DFS gives a topological order.
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack{{root.node().get(), 0}};
    seen.insert(root.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* p = node->parents[next++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root.node()->accumulate(Tensor(root.shape(), 1.0));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn && !n->grad.empty())
            n->backward_fn(*n);
    }
    // Free intermediate gradients; leaves keep theirs.
    for (Node* n : order)
        if (n->backward_fn)
            n->grad = Tensor();
}

Var add(const Var& a, const Var& b)
{
    require_same_shape(a.value(), b.value(), "add");
    return make(a.value() + b.value(), {a, b}, [](Node& self) {
        for (std::size_t i = 0; i < 2; ++i)
            if (wants(self, i))
                self.parents[i]->accumulate(self.grad);
    });
}

Var sub(const Var& a, const Var& b)
{
    require_same_shape(a.value(), b.value(), "sub");
    return make(a.value() - b.value(), {a, b}, [](Node& self) {
        if (wants(self, 0))
            self.parents[0]->accumulate(self.grad);
        if (wants(self, 1))
            self.parents[1]->accumulate(self.grad * -1.0);
    });
}

Var mul(const Var& a, const Var& b)
{
    require_same_shape(a.value(), b.value(), "mul");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] *= b.value()[i];
    return make(std::move(out), {a, b}, [](Node& self) {
        const Tensor& av = self.parents[0]->value;
        const Tensor& bv = self.parents[1]->value;
        if (wants(self, 0)) {
            Tensor g = self.grad;
            for (std::size_t i = 0; i < g.size(); ++i)
                g[i] *= bv[i];
            self.parents[0]->accumulate(g);
        }
        if (wants(self, 1)) {
            Tensor g = self.grad;
            for (std::size_t i = 0; i < g.size(); ++i)
                g[i] *= av[i];
            self.parents[1]->accumulate(g);
        }
    });
}

Var scale(const Var& a, double s)
{
    return make(a.value() * s, {a}, [s](Node& self) { self.parents[0]->accumulate(self.grad * s); });
}

Var scale_samples(const Var& a, const std::vector<double>& factors)
{
    const int n = a.dim(0);
    if (factors.size() != static_cast<std::size_t>(n))
        throw std::invalid_argument("scale_samples: need one factor per sample");
    const std::size_t per = a.value().size() / static_cast<std::size_t>(n);
    auto apply = [factors, per](Tensor t) {
        for (std::size_t i = 0; i < t.size(); ++i)
            t[i] *= factors[i / per];
        return t;
    };
    return make(apply(a.value()), {a}, [apply](Node& self) { self.parents[0]->accumulate(apply(self.grad)); });
}

Var add_scalar(const Var& a, double s)
{
    Tensor out = a.value();
    for (double& v : out.values())
        v += s;
    return make(std::move(out), {a}, [](Node& self) { self.parents[0]->accumulate(self.grad); });
}

Var one_minus(const Var& a)
{
    return add_scalar(scale(a, -1.0), 1.0);
}

Var sigmoid(const Var& a)
{
    Tensor out = a.value();
    for (double& v : out.values())
        v = sigmoid_scalar(v);
    return make(out, {a}, [out](Node& self) {
        Tensor g = self.grad;
        for (std::size_t i = 0; i < g.size(); ++i)
            g[i] *= out[i] * (1.0 - out[i]);
        self.parents[0]->accumulate(g);
    });
}

Var relu(const Var& a)
{
    Tensor out = a.value();
    for (double& v : out.values())
        v = v > 0 ? v : 0.0;
    return make(out, {a}, [](Node& self) {
        const Tensor& in = self.parents[0]->value;
        Tensor g = self.grad;
        for (std::size_t i = 0; i < g.size(); ++i)
            if (in[i] <= 0)
                g[i] = 0.0;
        self.parents[0]->accumulate(g);
    });
}

Var silu(const Var& a)
{
    Tensor out = a.value();
    for (double& v : out.values())
        v = v * sigmoid_scalar(v);
    return make(std::move(out), {a}, [](Node& self) {
        const Tensor& in = self.parents[0]->value;
        Tensor g = self.grad;
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double s = sigmoid_scalar(in[i]);
            g[i] *= s * (1.0 + in[i] * (1.0 - s));
        }
        self.parents[0]->accumulate(g);
    });
}

Var add_channel_bias(const Var& x, const Var& bias)
{
    require_rank4(x.value(), "add_channel_bias");
    const int n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    if (bias.value().size() != static_cast<std::size_t>(c))
        throw std::invalid_argument("add_channel_bias: bias size mismatch");
    Tensor out = x.value();
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < c; ++j) {
            double* p = out.data() + (static_cast<std::size_t>(i) * c + j) * hw;
            const double b = bias.value()[static_cast<std::size_t>(j)];
            for (int k = 0; k < hw; ++k)
                p[k] += b;
        }
    return make(std::move(out), {x, bias}, [n, c, hw](Node& self) {
        if (wants(self, 0))
            self.parents[0]->accumulate(self.grad);
        if (wants(self, 1)) {
            Tensor gb(self.parents[1]->value.shape());
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < c; ++j) {
                    const double* p = self.grad.data() + (static_cast<std::size_t>(i) * c + j) * hw;
                    double s = 0;
                    for (int k = 0; k < hw; ++k)
                        s += p[k];
                    gb[static_cast<std::size_t>(j)] += s;
                }
            self.parents[1]->accumulate(gb);
        }
    });
}

Var add_sample_channel(const Var& x, const Var& v)
{
    require_rank4(x.value(), "add_sample_channel");
    const int n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    if (v.value().size() != static_cast<std::size_t>(n) * c)
        throw std::invalid_argument("add_sample_channel: vector must be [N,C]");
    Tensor out = x.value();
    for (int i = 0; i < n * c; ++i) {
        double* p = out.data() + static_cast<std::size_t>(i) * hw;
        const double b = v.value()[static_cast<std::size_t>(i)];
        for (int k = 0; k < hw; ++k)
            p[k] += b;
    }
    return make(std::move(out), {x, v}, [n, c, hw](Node& self) {
        if (wants(self, 0))
            self.parents[0]->accumulate(self.grad);
        if (wants(self, 1)) {
            Tensor gv(self.parents[1]->value.shape());
            for (int i = 0; i < n * c; ++i) {
                const double* p = self.grad.data() + static_cast<std::size_t>(i) * hw;
                double s = 0;
                for (int k = 0; k < hw; ++k)
                    s += p[k];
                gv[static_cast<std::size_t>(i)] = s;
            }
            self.parents[1]->accumulate(gv);
        }
    });
}

Var linear(const Var& x, const Var& weight, const Var& bias)
{
    const int n = x.dim(0), d = x.dim(1), o = weight.dim(0);
    if (weight.dim(1) != d || bias.value().size() != static_cast<std::size_t>(o))
        throw std::invalid_argument("linear: shape mismatch");
    Tensor out(Shape{n, o});
    MapMat(out.data(), n, o) = CMapMat(x.value().data(), n, d) * CMapMat(weight.value().data(), o, d).transpose();
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < o; ++j)
            out[static_cast<std::size_t>(i) * o + j] += bias.value()[static_cast<std::size_t>(j)];
    return make(std::move(out), {x, weight, bias}, [n, d, o](Node& self) {
        CMapMat g(self.grad.data(), n, o);
        if (wants(self, 0)) {
            Tensor gx(Shape{n, d});
            MapMat(gx.data(), n, d) = g * CMapMat(self.parents[1]->value.data(), o, d);
            self.parents[0]->accumulate(gx);
        }
        if (wants(self, 1)) {
            Tensor gw(Shape{o, d});
            MapMat(gw.data(), o, d) = g.transpose() * CMapMat(self.parents[0]->value.data(), n, d);
            self.parents[1]->accumulate(gw);
        }
        if (wants(self, 2)) {
            Tensor gb(Shape{o});
            for (int j = 0; j < o; ++j) {
                double s = 0;
                for (int i = 0; i < n; ++i)
                    s += g(i, j);
                gb[static_cast<std::size_t>(j)] = s;
            }
            self.parents[2]->accumulate(gb);
        }
    });
}

Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int pad)
{
    require_rank4(x.value(), "conv2d");
    const int n = x.dim(0), ci = x.dim(1), h = x.dim(2), w = x.dim(3);
    const int co = weight.dim(0), k = weight.dim(2);
    if (weight.rank() != 4 || weight.dim(1) != ci || weight.dim(3) != k)
        throw std::invalid_argument("conv2d: weight " + shape_str(weight.shape()) + " incompatible with input "
                                    + shape_str(x.shape()));
    if (bias.value().size() != static_cast<std::size_t>(co))
        throw std::invalid_argument("conv2d: bias size mismatch");
    if (stride < 1)
        throw std::invalid_argument("conv2d: stride must be positive");
    const int ho = (h + 2 * pad - k) / stride + 1;
    const int wo = (w + 2 * pad - k) / stride + 1;
    const int rows = ci * k * k, cols_n = ho * wo;

    Tensor out(Shape{n, co, ho, wo});
    // Column buffers kept for the weight gradient.
    auto cols = std::make_shared<std::vector<double>>(static_cast<std::size_t>(n) * rows * cols_n);
    CMapMat wm(weight.value().data(), co, rows);
    for (int i = 0; i < n; ++i) {
        double* cb = cols->data() + static_cast<std::size_t>(i) * rows * cols_n;
        im2col(x.value().data() + static_cast<std::size_t>(i) * ci * h * w, ci, h, w, k, stride, pad, ho, wo, cb);
        MapMat om(out.data() + static_cast<std::size_t>(i) * co * cols_n, co, cols_n);
        om.noalias() = wm * CMapMat(cb, rows, cols_n);
        for (int j = 0; j < co; ++j)
            om.row(j).array() += bias.value()[static_cast<std::size_t>(j)];
    }
    return make(std::move(out), {x, weight, bias},
                [=](Node& self) {
                    CMapMat wmat(self.parents[1]->value.data(), co, rows);
                    if (wants(self, 0)) {
                        Tensor gx(Shape{n, ci, h, w});
                        RowMat gcols(rows, cols_n);
                        for (int i = 0; i < n; ++i) {
                            CMapMat g(self.grad.data() + static_cast<std::size_t>(i) * co * cols_n, co, cols_n);
                            gcols.noalias() = wmat.transpose() * g;
                            col2im(gcols.data(), ci, h, w, k, stride, pad, ho, wo,
                                   gx.data() + static_cast<std::size_t>(i) * ci * h * w);
                        }
                        self.parents[0]->accumulate(gx);
                    }
                    if (wants(self, 1)) {
                        Tensor gw(self.parents[1]->value.shape());
                        MapMat gwm(gw.data(), co, rows);
                        for (int i = 0; i < n; ++i) {
                            CMapMat g(self.grad.data() + static_cast<std::size_t>(i) * co * cols_n, co, cols_n);
                            gwm.noalias() += g * CMapMat(cols->data() + static_cast<std::size_t>(i) * rows * cols_n,
                                                         rows, cols_n)
                                                     .transpose();
                        }
                        self.parents[1]->accumulate(gw);
                    }
                    if (wants(self, 2)) {
                        Tensor gb(Shape{co});
                        for (int i = 0; i < n; ++i)
                            for (int j = 0; j < co; ++j) {
                                const double* p = self.grad.data() + (static_cast<std::size_t>(i) * co + j) * cols_n;
                                double s = 0;
                                for (int q = 0; q < cols_n; ++q)
                                    s += p[q];
                                gb[static_cast<std::size_t>(j)] += s;
                            }
                        self.parents[2]->accumulate(gb);
                    }
                });
}

Var upsample_bilinear(const Var& x, int out_h, int out_w)
{
    require_rank4(x.value(), "upsample_bilinear");
    const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    auto ty = bilinear_taps(h, out_h);
    auto tx = bilinear_taps(w, out_w);
    Tensor out(Shape{n, c, out_h, out_w});
    const int planes = n * c;
    for (int p = 0; p < planes; ++p) {
        const double* src = x.value().data() + static_cast<std::size_t>(p) * h * w;
        double* dst = out.data() + static_cast<std::size_t>(p) * out_h * out_w;
        for (int oy = 0; oy < out_h; ++oy) {
            const auto& a = ty[static_cast<std::size_t>(oy)];
            for (int ox = 0; ox < out_w; ++ox) {
                const auto& b = tx[static_cast<std::size_t>(ox)];
                dst[oy * out_w + ox] = a.w0 * (b.w0 * src[a.i0 * w + b.i0] + b.w1 * src[a.i0 * w + b.i1])
                                       + a.w1 * (b.w0 * src[a.i1 * w + b.i0] + b.w1 * src[a.i1 * w + b.i1]);
            }
        }
    }
    return make(std::move(out), {x}, [=](Node& self) {
        Tensor gx(Shape{n, c, h, w});
        for (int p = 0; p < planes; ++p) {
            const double* g = self.grad.data() + static_cast<std::size_t>(p) * out_h * out_w;
            double* dst = gx.data() + static_cast<std::size_t>(p) * h * w;
            for (int oy = 0; oy < out_h; ++oy) {
                const auto& a = ty[static_cast<std::size_t>(oy)];
                for (int ox = 0; ox < out_w; ++ox) {
                    const auto& b = tx[static_cast<std::size_t>(ox)];
                    const double v = g[oy * out_w + ox];
                    dst[a.i0 * w + b.i0] += v * a.w0 * b.w0;
                    dst[a.i0 * w + b.i1] += v * a.w0 * b.w1;
                    dst[a.i1 * w + b.i0] += v * a.w1 * b.w0;
                    dst[a.i1 * w + b.i1] += v * a.w1 * b.w1;
                }
            }
        }
        self.parents[0]->accumulate(gx);
    });
}

Var avg_pool(const Var& x, int factor)
{
    require_rank4(x.value(), "avg_pool");
    const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (factor < 1 || h % factor || w % factor)
        throw std::invalid_argument("avg_pool: factor " + std::to_string(factor) + " does not divide "
                                    + shape_str(x.shape()));
    const int oh = h / factor, ow = w / factor;
    const double inv = 1.0 / (factor * factor);
    Tensor out(Shape{n, c, oh, ow});
    const int planes = n * c;
    for (int p = 0; p < planes; ++p) {
        const double* src = x.value().data() + static_cast<std::size_t>(p) * h * w;
        double* dst = out.data() + static_cast<std::size_t>(p) * oh * ow;
        for (int y = 0; y < h; ++y)
            for (int xx = 0; xx < w; ++xx)
                dst[(y / factor) * ow + xx / factor] += src[y * w + xx] * inv;
    }
    return make(std::move(out), {x}, [=](Node& self) {
        Tensor gx(Shape{n, c, h, w});
        for (int p = 0; p < planes; ++p) {
            const double* g = self.grad.data() + static_cast<std::size_t>(p) * oh * ow;
            double* dst = gx.data() + static_cast<std::size_t>(p) * h * w;
            for (int y = 0; y < h; ++y)
                for (int xx = 0; xx < w; ++xx)
                    dst[y * w + xx] = g[(y / factor) * ow + xx / factor] * inv;
        }
        self.parents[0]->accumulate(gx);
    });
}

Var global_avg_pool(const Var& x)
{
    require_rank4(x.value(), "global_avg_pool");
    const int n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    Tensor out(Shape{n, c});
    for (int p = 0; p < n * c; ++p) {
        const double* src = x.value().data() + static_cast<std::size_t>(p) * hw;
        double s = 0;
        for (int k = 0; k < hw; ++k)
            s += src[k];
        out[static_cast<std::size_t>(p)] = s / hw;
    }
    return make(std::move(out), {x}, [n, c, hw](Node& self) {
        Tensor gx(self.parents[0]->value.shape());
        for (int p = 0; p < n * c; ++p) {
            const double g = self.grad[static_cast<std::size_t>(p)] / hw;
            double* dst = gx.data() + static_cast<std::size_t>(p) * hw;
            for (int k = 0; k < hw; ++k)
                dst[k] = g;
        }
        self.parents[0]->accumulate(gx);
    });
}

Var slice_channels(const Var& x, int from, int to)
{
    require_rank4(x.value(), "slice_channels");
    const int n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    if (from < 0 || to > c || from >= to)
        throw std::invalid_argument("slice_channels: bad range");
    const int cs = to - from;
    Tensor out(Shape{n, cs, x.dim(2), x.dim(3)});
    for (int i = 0; i < n; ++i)
        std::copy_n(x.value().data() + (static_cast<std::size_t>(i) * c + from) * hw, static_cast<std::size_t>(cs) * hw,
                    out.data() + static_cast<std::size_t>(i) * cs * hw);
    return make(std::move(out), {x}, [=](Node& self) {
        Tensor gx(self.parents[0]->value.shape());
        for (int i = 0; i < n; ++i)
            std::copy_n(self.grad.data() + static_cast<std::size_t>(i) * cs * hw, static_cast<std::size_t>(cs) * hw,
                        gx.data() + (static_cast<std::size_t>(i) * c + from) * hw);
        self.parents[0]->accumulate(gx);
    });
}

Var flip_horizontal(const Var& x)
{
    require_rank4(x.value(), "flip_horizontal");
    auto flip = [](const Tensor& t) {
        Tensor out(t.shape());
        const int rows = t.dim(0) * t.dim(1) * t.dim(2), w = t.dim(3);
        for (int r = 0; r < rows; ++r)
            for (int j = 0; j < w; ++j)
                out[static_cast<std::size_t>(r) * w + j] = t[static_cast<std::size_t>(r) * w + (w - 1 - j)];
        return out;
    };
    return make(flip(x.value()), {x}, [flip](Node& self) { self.parents[0]->accumulate(flip(self.grad)); });
}

Var sum(const std::vector<Var>& scalars)
{
    auto node = std::make_shared<Node>();
    double total = 0;
    for (const Var& s : scalars) {
        total += s.item();
        node->requires_grad = node->requires_grad || s.requires_grad();
    }
    node->value = Tensor(Shape{1}, total);
    if (node->requires_grad) {
        for (const Var& s : scalars)
            node->parents.push_back(s.node());
        node->backward_fn = [](Node& self) {
            for (auto& p : self.parents)
                if (p->requires_grad)
                    p->accumulate(self.grad);
        };
    }
    return Var(std::move(node));
}

Var mean_squared_error(const Var& a, const Var& b)
{
    require_same_shape(a.value(), b.value(), "mean_squared_error");
    const std::size_t count = a.value().size();
    double s = 0;
    for (std::size_t i = 0; i < count; ++i) {
        const double d = a.value()[i] - b.value()[i];
        s += d * d;
    }
    return make(Tensor(Shape{1}, s / static_cast<double>(count)), {a, b}, [count](Node& self) {
        const Tensor& av = self.parents[0]->value;
        const Tensor& bv = self.parents[1]->value;
        const double g = self.grad[0] * 2.0 / static_cast<double>(count);
        Tensor d = av - bv;
        d *= g;
        if (wants(self, 0))
            self.parents[0]->accumulate(d);
        if (wants(self, 1))
            self.parents[1]->accumulate(d * -1.0);
    });
}

Var bce_with_logits(const Var& scores, const Tensor& targets)
{
    require_same_shape(scores.value(), targets, "bce_with_logits");
    const std::size_t count = targets.size();
    double s = 0;
    for (std::size_t i = 0; i < count; ++i) {
        const double x = scores.value()[i];
        s += std::max(x, 0.0) - x * targets[i] + std::log1p(std::exp(-std::abs(x)));
    }
    return make(Tensor(Shape{1}, s / static_cast<double>(count)), {scores}, [targets, count](Node& self) {
        const Tensor& x = self.parents[0]->value;
        Tensor g(x.shape());
        const double scale_g = self.grad[0] / static_cast<double>(count);
        for (std::size_t i = 0; i < count; ++i)
            g[i] = (sigmoid_scalar(x[i]) - targets[i]) * scale_g;
        self.parents[0]->accumulate(g);
    });
}

Tensor softmax_channels(const Tensor& logits)
{
    require_rank4(logits, "softmax_channels");
    const int n = logits.dim(0), c = logits.dim(1), hw = logits.dim(2) * logits.dim(3);
    Tensor out(logits.shape());
    for (int i = 0; i < n; ++i)
        for (int p = 0; p < hw; ++p) {
            const std::size_t base = static_cast<std::size_t>(i) * c * hw + p;
            double mx = logits[base];
            for (int j = 1; j < c; ++j)
                mx = std::max(mx, logits[base + static_cast<std::size_t>(j) * hw]);
            double z = 0;
            for (int j = 0; j < c; ++j) {
                const double e = std::exp(logits[base + static_cast<std::size_t>(j) * hw] - mx);
                out[base + static_cast<std::size_t>(j) * hw] = e;
                z += e;
            }
            for (int j = 0; j < c; ++j)
                out[base + static_cast<std::size_t>(j) * hw] /= z;
        }
    return out;
}

Var cross_entropy(const Var& logits, const std::vector<int>& targets, int ignore_label)
{
    require_rank4(logits.value(), "cross_entropy");
    const int n = logits.dim(0), c = logits.dim(1), hw = logits.dim(2) * logits.dim(3);
    if (targets.size() != static_cast<std::size_t>(n) * hw)
        throw std::invalid_argument("cross_entropy: target count mismatch");
    Tensor prob = softmax_channels(logits.value());
    double s = 0;
    std::size_t valid = 0;
    for (int i = 0; i < n; ++i)
        for (int p = 0; p < hw; ++p) {
            const int t = targets[static_cast<std::size_t>(i) * hw + p];
            if (t == ignore_label)
                continue;
            if (t < 0 || t >= c)
                throw std::out_of_range("cross_entropy: target " + std::to_string(t) + " out of range");
            s -= std::log(std::max(prob[(static_cast<std::size_t>(i) * c + t) * hw + p], 1e-300));
            ++valid;
        }
    const double loss = valid ? s / static_cast<double>(valid) : 0.0;
    return make(Tensor(Shape{1}, loss), {logits}, [=](Node& self) {
        if (!valid)
            return;
        Tensor g = prob;
        const double scale_g = self.grad[0] / static_cast<double>(valid);
        for (int i = 0; i < n; ++i)
            for (int p = 0; p < hw; ++p) {
                const int t = targets[static_cast<std::size_t>(i) * hw + p];
                for (int j = 0; j < c; ++j) {
                    double& v = g[(static_cast<std::size_t>(i) * c + j) * hw + p];
                    if (t == ignore_label)
                        v = 0;
                    else
                        v = (v - (j == t ? 1.0 : 0.0)) * scale_g;
                }
            }
        self.parents[0]->accumulate(g);
    });
}

Var kl_div_logits(const Var& input, const Var& target)
{
    require_same_shape(input.value(), target.value(), "kl_div_logits");
    require_rank4(input.value(), "kl_div_logits");
    const int n = input.dim(0), c = input.dim(1), hw = input.dim(2) * input.dim(3);
    const Tensor ps = softmax_channels(input.value());
    const Tensor pt = softmax_channels(target.value());
    const std::size_t pixels = static_cast<std::size_t>(n) * hw;
    Tensor per_pixel(Shape{n, hw});
    double total = 0;
    for (int i = 0; i < n; ++i)
        for (int p = 0; p < hw; ++p) {
            double kl = 0;
            for (int j = 0; j < c; ++j) {
                const std::size_t idx = (static_cast<std::size_t>(i) * c + j) * hw + p;
                if (pt[idx] > 0)
                    kl += pt[idx] * (std::log(pt[idx]) - std::log(std::max(ps[idx], 1e-300)));
            }
            per_pixel[static_cast<std::size_t>(i) * hw + p] = kl;
            total += kl;
        }
    return make(Tensor(Shape{1}, std::max(0.0, total / static_cast<double>(pixels))), {input, target}, [=](Node& self) {
        const double scale_g = self.grad[0] / static_cast<double>(pixels);
        if (wants(self, 0)) {
            Tensor g = ps - pt;
            g *= scale_g;
            self.parents[0]->accumulate(g);
        }
        if (wants(self, 1)) {
            Tensor g(pt.shape());
            for (int i = 0; i < n; ++i)
                for (int p = 0; p < hw; ++p)
                    for (int j = 0; j < c; ++j) {
                        const std::size_t idx = (static_cast<std::size_t>(i) * c + j) * hw + p;
                        const double lt = pt[idx] > 0 ? std::log(pt[idx]) : 0.0;
                        g[idx] = pt[idx] * (lt - std::log(std::max(ps[idx], 1e-300))
                                            - per_pixel[static_cast<std::size_t>(i) * hw + p])
                                 * scale_g;
                    }
            self.parents[1]->accumulate(g);
        }
    });
}

} // namespace dgkd::ag
