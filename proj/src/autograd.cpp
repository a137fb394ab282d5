#include "meldiff/autograd.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace meldiff::ag {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using StridedMap = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using ConstStridedMap = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;

thread_local bool g_grad_enabled = true;

Var make_op(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward_fn) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    bool needs = g_grad_enabled;
    if (needs) {
        needs = false;
        for (const Var& p : parents)
            if (p && p->requires_grad) { needs = true; break; }
    }
    if (needs) {
        node->requires_grad = true;
        node->parents = std::move(parents);
        node->backward_fn = std::move(backward_fn);
    }
    return node;
}

void require_rank(const Tensor& t, int rank, const char* what) {
    if (t.rank() != rank)
        throw std::invalid_argument(std::string(what) + ": expected rank " + std::to_string(rank) +
                                    ", got shape " + t.shape_str());
}

}  // namespace

Tensor& Node::ensure_grad() {
    if (!grad.defined()) grad = Tensor::zeros(value.dims());
    return grad;
}

Var constant(Tensor value) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    return node;
}

Var parameter(Tensor value) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    node->requires_grad = true;
    return node;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

void backward(const Var& root) {
    if (!root || root->value.size() != 1)
        throw std::invalid_argument("backward requires a scalar root");
    if (!root->requires_grad) return;

    // Iterative post-order topological sort over grad-requiring nodes.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.emplace_back(root.get(), 0);
    visited.insert(root.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* parent = node->parents[next++].get();
            if (parent && parent->requires_grad && !visited.count(parent)) {
                visited.insert(parent);
                stack.emplace_back(parent, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root->ensure_grad().fill_(1.0);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* node = *it;
        if (node->backward_fn && node->grad.defined()) node->backward_fn(*node);
    }
}

void zero_grad(const std::vector<Var>& params) {
    for (const Var& p : params)
        if (p && p->grad.defined()) p->grad.fill_(0.0);
}

// ---------------------------------------------------------------------------
// elementwise / structural
// ---------------------------------------------------------------------------

Var add(const Var& a, const Var& b) {
    if (!a->value.same_shape(b->value))
        throw std::invalid_argument("add shape mismatch: " + a->value.shape_str() + " vs " +
                                    b->value.shape_str());
    Tensor out = a->value.clone();
    out.add_(b->value);
    Var pa = a, pb = b;
    return make_op(std::move(out), {a, b}, [pa, pb](Node& self) {
        if (pa->requires_grad) pa->ensure_grad().add_(self.grad);
        if (pb->requires_grad) pb->ensure_grad().add_(self.grad);
    });
}

Var scale(const Var& a, double s) {
    Tensor out = a->value.clone();
    out.mul_(s);
    Var pa = a;
    return make_op(std::move(out), {a}, [pa, s](Node& self) {
        if (pa->requires_grad) pa->ensure_grad().add_(self.grad, s);
    });
}

Var gelu(const Var& x) {
    const Tensor& v = x->value;
    Tensor out(v.dims());
    const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
    for (int64_t i = 0; i < v.size(); ++i)
        out[i] = 0.5 * v[i] * (1.0 + std::erf(v[i] * inv_sqrt2));
    Var px = x;
    return make_op(std::move(out), {x}, [px, inv_sqrt2](Node& self) {
        if (!px->requires_grad) return;
        Tensor& g = px->ensure_grad();
        const Tensor& v = px->value;
        const double inv_sqrt2pi = 1.0 / std::sqrt(2.0 * M_PI);
        for (int64_t i = 0; i < v.size(); ++i) {
            double cdf = 0.5 * (1.0 + std::erf(v[i] * inv_sqrt2));
            double pdf = inv_sqrt2pi * std::exp(-0.5 * v[i] * v[i]);
            g[i] += self.grad[i] * (cdf + v[i] * pdf);
        }
    });
}

Var elu_plus_one(const Var& x) {
    const Tensor& v = x->value;
    Tensor out(v.dims());
    for (int64_t i = 0; i < v.size(); ++i)
        out[i] = v[i] > 0.0 ? v[i] + 1.0 : std::exp(v[i]);
    Var px = x;
    return make_op(std::move(out), {x}, [px](Node& self) {
        if (!px->requires_grad) return;
        Tensor& g = px->ensure_grad();
        const Tensor& v = px->value;
        for (int64_t i = 0; i < v.size(); ++i)
            g[i] += self.grad[i] * (v[i] > 0.0 ? 1.0 : std::exp(v[i]));
    });
}

Var exp(const Var& x) {
    const Tensor& v = x->value;
    Tensor out(v.dims());
    for (int64_t i = 0; i < v.size(); ++i) out[i] = std::exp(v[i]);
    Var px = x;
    Tensor saved = out;
    return make_op(std::move(out), {x}, [px, saved](Node& self) {
        if (!px->requires_grad) return;
        Tensor& g = px->ensure_grad();
        for (int64_t i = 0; i < saved.size(); ++i) g[i] += self.grad[i] * saved[i];
    });
}

Var view(const Var& x, std::vector<int64_t> dims) {
    Tensor out = x->value.reshaped(std::move(dims));
    Var px = x;
    return make_op(std::move(out), {x}, [px](Node& self) {
        if (!px->requires_grad) return;
        Tensor& g = px->ensure_grad();
        const Tensor& sg = self.grad;
        for (int64_t i = 0; i < sg.size(); ++i) g[i] += sg[i];
    });
}

Var concat_channels(const Var& a, const Var& b) {
    require_rank(a->value, 4, "concat_channels");
    require_rank(b->value, 4, "concat_channels");
    const auto& da = a->value.dims();
    const auto& db = b->value.dims();
    if (da[0] != db[0] || da[2] != db[2] || da[3] != db[3])
        throw std::invalid_argument("concat_channels shape mismatch: " + a->value.shape_str() +
                                    " vs " + b->value.shape_str());
    const int64_t n = da[0], ca = da[1], cb = db[1], hw = da[2] * da[3];
    Tensor out({n, ca + cb, da[2], da[3]});
    for (int64_t i = 0; i < n; ++i) {
        std::copy_n(a->value.data() + i * ca * hw, ca * hw, out.data() + i * (ca + cb) * hw);
        std::copy_n(b->value.data() + i * cb * hw, cb * hw, out.data() + (i * (ca + cb) + ca) * hw);
    }
    Var pa = a, pb = b;
    return make_op(std::move(out), {a, b}, [pa, pb, n, ca, cb, hw](Node& self) {
        const double* sg = self.grad.data();
        if (pa->requires_grad) {
            double* g = pa->ensure_grad().data();
            for (int64_t i = 0; i < n; ++i)
                for (int64_t j = 0; j < ca * hw; ++j)
                    g[i * ca * hw + j] += sg[i * (ca + cb) * hw + j];
        }
        if (pb->requires_grad) {
            double* g = pb->ensure_grad().data();
            for (int64_t i = 0; i < n; ++i)
                for (int64_t j = 0; j < cb * hw; ++j)
                    g[i * cb * hw + j] += sg[(i * (ca + cb) + ca) * hw + j];
        }
    });
}

Var add_time_bias(const Var& x, const Var& t) {
    require_rank(x->value, 4, "add_time_bias");
    require_rank(t->value, 2, "add_time_bias");
    const auto& dx = x->value.dims();
    if (t->value.dim(0) != dx[0] || t->value.dim(1) != dx[1])
        throw std::invalid_argument("add_time_bias: embedding shape " + t->value.shape_str() +
                                    " does not match features of " + x->value.shape_str());
    const int64_t n = dx[0], c = dx[1], hw = dx[2] * dx[3];
    Tensor out = x->value.clone();
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < c; ++j) {
            const double bias = t->value[i * c + j];
            double* p = out.data() + (i * c + j) * hw;
            for (int64_t k = 0; k < hw; ++k) p[k] += bias;
        }
    Var px = x, pt = t;
    return make_op(std::move(out), {x, t}, [px, pt, n, c, hw](Node& self) {
        const double* sg = self.grad.data();
        if (px->requires_grad) px->ensure_grad().add_(self.grad);
        if (pt->requires_grad) {
            double* g = pt->ensure_grad().data();
            for (int64_t i = 0; i < n; ++i)
                for (int64_t j = 0; j < c; ++j) {
                    double acc = 0.0;
                    const double* p = sg + (i * c + j) * hw;
                    for (int64_t k = 0; k < hw; ++k) acc += p[k];
                    g[i * c + j] += acc;
                }
        }
    });
}

// ---------------------------------------------------------------------------
// linear maps
// ---------------------------------------------------------------------------

Var linear_vec(const Var& x, const Var& W, const Var& b) {
    require_rank(x->value, 2, "linear_vec");
    require_rank(W->value, 2, "linear_vec weight");
    const int64_t n = x->value.dim(0), din = x->value.dim(1);
    const int64_t dout = W->value.dim(0);
    if (W->value.dim(1) != din || b->value.size() != dout)
        throw std::invalid_argument("linear_vec weight shape mismatch");
    Tensor out({n, dout});
    ConstMatMap xm(x->value.data(), n, din);
    ConstMatMap wm(W->value.data(), dout, din);
    MatMap om(out.data(), n, dout);
    om.noalias() = xm * wm.transpose();
    om.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(b->value.data(), dout);
    Var px = x, pw = W, pb = b;
    return make_op(std::move(out), {x, W, b}, [px, pw, pb, n, din, dout](Node& self) {
        ConstMatMap gm(self.grad.data(), n, dout);
        if (px->requires_grad) {
            MatMap gx(px->ensure_grad().data(), n, din);
            ConstMatMap wm(pw->value.data(), dout, din);
            gx.noalias() += gm * wm;
        }
        if (pw->requires_grad) {
            MatMap gw(pw->ensure_grad().data(), dout, din);
            ConstMatMap xm(px->value.data(), n, din);
            gw.noalias() += gm.transpose() * xm;
        }
        if (pb->requires_grad) {
            Eigen::Map<Eigen::RowVectorXd> gb(pb->ensure_grad().data(), dout);
            gb += gm.colwise().sum();
        }
    });
}

Var linear_pointwise(const Var& x, const Var& W, const Var& b) {
    require_rank(x->value, 4, "linear_pointwise");
    const auto& dx = x->value.dims();
    const int64_t n = dx[0], din = dx[1], hw = dx[2] * dx[3];
    const int64_t dout = W->value.dim(0);
    if (W->value.dim(1) != din || b->value.size() != dout)
        throw std::invalid_argument("linear_pointwise weight shape mismatch for input " +
                                    x->value.shape_str());
    Tensor out({n, dout, dx[2], dx[3]});
    ConstMatMap wm(W->value.data(), dout, din);
    for (int64_t i = 0; i < n; ++i) {
        ConstMatMap xm(x->value.data() + i * din * hw, din, hw);
        MatMap om(out.data() + i * dout * hw, dout, hw);
        om.noalias() = wm * xm;
        om.colwise() += Eigen::Map<const Eigen::VectorXd>(b->value.data(), dout);
    }
    Var px = x, pw = W, pb = b;
    return make_op(std::move(out), {x, W, b}, [px, pw, pb, n, din, dout, hw](Node& self) {
        for (int64_t i = 0; i < n; ++i) {
            ConstMatMap gm(self.grad.data() + i * dout * hw, dout, hw);
            if (px->requires_grad) {
                MatMap gx(px->ensure_grad().data() + i * din * hw, din, hw);
                ConstMatMap wm(pw->value.data(), dout, din);
                gx.noalias() += wm.transpose() * gm;
            }
            if (pw->requires_grad) {
                MatMap gw(pw->ensure_grad().data(), dout, din);
                ConstMatMap xm(px->value.data() + i * din * hw, din, hw);
                gw.noalias() += gm * xm.transpose();
            }
            if (pb->requires_grad) {
                Eigen::Map<Eigen::VectorXd> gb(pb->ensure_grad().data(), dout);
                gb += gm.rowwise().sum();
            }
        }
    });
}

Var tokenize_freq(const Var& x, const Var& W, const Var& b) {
    require_rank(x->value, 4, "tokenize_freq");
    const auto& dx = x->value.dims();
    const int64_t n = dx[0], c = dx[1], f = dx[2], l = dx[3];
    const int64_t d = W->value.dim(0);
    if (W->value.dim(1) != f || b->value.size() != d)
        throw std::invalid_argument("tokenize_freq: weight " + W->value.shape_str() +
                                    " incompatible with input " + x->value.shape_str());
    Tensor out({n, d, c, l});
    ConstMatMap wm(W->value.data(), d, f);
    for (int64_t i = 0; i < n; ++i)
        for (int64_t cc = 0; cc < c; ++cc) {
            ConstMatMap xm(x->value.data() + (i * c + cc) * f * l, f, l);
            StridedMap om(out.data() + (i * d * c + cc) * l, d, l, Eigen::OuterStride<>(c * l));
            om.noalias() = wm * xm;
            om.colwise() += Eigen::Map<const Eigen::VectorXd>(b->value.data(), d);
        }
    Var px = x, pw = W, pb = b;
    return make_op(std::move(out), {x, W, b}, [px, pw, pb, n, c, f, l, d](Node& self) {
        for (int64_t i = 0; i < n; ++i)
            for (int64_t cc = 0; cc < c; ++cc) {
                ConstStridedMap gm(self.grad.data() + (i * d * c + cc) * l, d, l,
                                   Eigen::OuterStride<>(c * l));
                if (px->requires_grad) {
                    MatMap gx(px->ensure_grad().data() + (i * c + cc) * f * l, f, l);
                    ConstMatMap wm(pw->value.data(), d, f);
                    gx.noalias() += wm.transpose() * gm;
                }
                if (pw->requires_grad) {
                    MatMap gw(pw->ensure_grad().data(), d, f);
                    ConstMatMap xm(px->value.data() + (i * c + cc) * f * l, f, l);
                    gw.noalias() += gm * xm.transpose();
                }
                if (pb->requires_grad) {
                    Eigen::Map<Eigen::VectorXd> gb(pb->ensure_grad().data(), d);
                    gb += gm.rowwise().sum();
                }
            }
    });
}

Var detokenize_freq(const Var& h, const Var& W, const Var& b) {
    require_rank(h->value, 4, "detokenize_freq");
    const auto& dh = h->value.dims();
    const int64_t n = dh[0], d = dh[1], c = dh[2], l = dh[3];
    const int64_t f = W->value.dim(0);
    if (W->value.dim(1) != d || b->value.size() != f)
        throw std::invalid_argument("detokenize_freq: weight " + W->value.shape_str() +
                                    " incompatible with input " + h->value.shape_str());
    Tensor out({n, c, f, l});
    ConstMatMap wm(W->value.data(), f, d);
    for (int64_t i = 0; i < n; ++i)
        for (int64_t cc = 0; cc < c; ++cc) {
            ConstStridedMap hm(h->value.data() + (i * d * c + cc) * l, d, l,
                               Eigen::OuterStride<>(c * l));
            MatMap om(out.data() + (i * c + cc) * f * l, f, l);
            om.noalias() = wm * hm;
            om.colwise() += Eigen::Map<const Eigen::VectorXd>(b->value.data(), f);
        }
    Var ph = h, pw = W, pb = b;
    return make_op(std::move(out), {h, W, b}, [ph, pw, pb, n, c, f, l, d](Node& self) {
        for (int64_t i = 0; i < n; ++i)
            for (int64_t cc = 0; cc < c; ++cc) {
                ConstMatMap gm(self.grad.data() + (i * c + cc) * f * l, f, l);
                if (ph->requires_grad) {
                    StridedMap gh(ph->ensure_grad().data() + (i * d * c + cc) * l, d, l,
                                  Eigen::OuterStride<>(c * l));
                    ConstMatMap wm(pw->value.data(), f, d);
                    gh.noalias() += wm.transpose() * gm;
                }
                if (pw->requires_grad) {
                    MatMap gw(pw->ensure_grad().data(), f, d);
                    ConstStridedMap hm(ph->value.data() + (i * d * c + cc) * l, d, l,
                                       Eigen::OuterStride<>(c * l));
                    gw.noalias() += gm * hm.transpose();
                }
                if (pb->requires_grad) {
                    Eigen::Map<Eigen::VectorXd> gb(pb->ensure_grad().data(), f);
                    gb += gm.rowwise().sum();
                }
            }
    });
}

// ---------------------------------------------------------------------------
// convolutions
// ---------------------------------------------------------------------------

namespace {

struct ConvGeometry {
    int64_t cin, H, W, KH, KW, SH, SW, PH, PW, DH, DW, OH, OW;
};

void im2col_chunk(const double* x, const ConvGeometry& g, int64_t col0, int64_t col1,
                  double* col) {
    const int64_t nc = col1 - col0;
    for (int64_t ci = 0; ci < g.cin; ++ci)
        for (int64_t ki = 0; ki < g.KH; ++ki)
            for (int64_t kj = 0; kj < g.KW; ++kj) {
                double* row = col + ((ci * g.KH + ki) * g.KW + kj) * nc;
                for (int64_t p = 0; p < nc; ++p) {
                    const int64_t pos = col0 + p;
                    const int64_t oh = pos / g.OW, ow = pos % g.OW;
                    const int64_t ih = oh * g.SH - g.PH + ki * g.DH;
                    const int64_t iw = ow * g.SW - g.PW + kj * g.DW;
                    row[p] = (ih >= 0 && ih < g.H && iw >= 0 && iw < g.W)
                                 ? x[(ci * g.H + ih) * g.W + iw]
                                 : 0.0;
                }
            }
}

void col2im_chunk_add(const double* col, const ConvGeometry& g, int64_t col0, int64_t col1,
                      double* x) {
    const int64_t nc = col1 - col0;
    for (int64_t ci = 0; ci < g.cin; ++ci)
        for (int64_t ki = 0; ki < g.KH; ++ki)
            for (int64_t kj = 0; kj < g.KW; ++kj) {
                const double* row = col + ((ci * g.KH + ki) * g.KW + kj) * nc;
                for (int64_t p = 0; p < nc; ++p) {
                    const int64_t pos = col0 + p;
                    const int64_t oh = pos / g.OW, ow = pos % g.OW;
                    const int64_t ih = oh * g.SH - g.PH + ki * g.DH;
                    const int64_t iw = ow * g.SW - g.PW + kj * g.DW;
                    if (ih >= 0 && ih < g.H && iw >= 0 && iw < g.W)
                        x[(ci * g.H + ih) * g.W + iw] += row[p];
                }
            }
}

int64_t conv_chunk_cols(int64_t K, int64_t total) {
    const int64_t target = std::max<int64_t>(int64_t{256}, 2'000'000 / std::max<int64_t>(K, 1));
    return std::min(total, target);
}

}  // namespace

Var conv2d(const Var& x, const Var& W, const Var& b,
           int64_t stride_h, int64_t stride_w,
           int64_t pad_h, int64_t pad_w,
           int64_t dil_h, int64_t dil_w) {
    require_rank(x->value, 4, "conv2d");
    require_rank(W->value, 4, "conv2d weight");
    const auto& dx = x->value.dims();
    const auto& dw = W->value.dims();
    ConvGeometry g{};
    g.cin = dx[1]; g.H = dx[2]; g.W = dx[3];
    g.KH = dw[2]; g.KW = dw[3];
    g.SH = stride_h; g.SW = stride_w;
    g.PH = pad_h; g.PW = pad_w;
    g.DH = dil_h; g.DW = dil_w;
    if (dw[1] != g.cin)
        throw std::invalid_argument("conv2d: weight " + W->value.shape_str() +
                                    " incompatible with input " + x->value.shape_str());
    g.OH = (g.H + 2 * g.PH - g.DH * (g.KH - 1) - 1) / g.SH + 1;
    g.OW = (g.W + 2 * g.PW - g.DW * (g.KW - 1) - 1) / g.SW + 1;
    if (g.OH < 1 || g.OW < 1)
        throw std::invalid_argument("conv2d: output would be empty for input " + x->value.shape_str());
    const int64_t n = dx[0], dout = dw[0], K = g.cin * g.KH * g.KW, N = g.OH * g.OW;
    if (b->value.size() != dout) throw std::invalid_argument("conv2d bias shape mismatch");

    Tensor out({n, dout, g.OH, g.OW});
    const int64_t chunk = conv_chunk_cols(K, N);
    std::vector<double> col(static_cast<size_t>(K * chunk));
    ConstMatMap wm(W->value.data(), dout, K);
    for (int64_t i = 0; i < n; ++i) {
        const double* xi = x->value.data() + i * g.cin * g.H * g.W;
        double* oi = out.data() + i * dout * N;
        for (int64_t c0 = 0; c0 < N; c0 += chunk) {
            const int64_t c1 = std::min(N, c0 + chunk);
            im2col_chunk(xi, g, c0, c1, col.data());
            ConstMatMap cm(col.data(), K, c1 - c0);
            StridedMap om(oi + c0, dout, c1 - c0, Eigen::OuterStride<>(N));
            om.noalias() = wm * cm;
        }
        MatMap full(oi, dout, N);
        full.colwise() += Eigen::Map<const Eigen::VectorXd>(b->value.data(), dout);
    }

    Var px = x, pw = W, pb = b;
    return make_op(std::move(out), {x, W, b}, [px, pw, pb, g, n, dout, K, N](Node& self) {
        const int64_t chunk = conv_chunk_cols(K, N);
        std::vector<double> col(static_cast<size_t>(K * chunk));
        for (int64_t i = 0; i < n; ++i) {
            const double* gi = self.grad.data() + i * dout * N;
            const double* xi = px->value.data() + i * g.cin * g.H * g.W;
            for (int64_t c0 = 0; c0 < N; c0 += chunk) {
                const int64_t c1 = std::min(N, c0 + chunk);
                ConstStridedMap gm(gi + c0, dout, c1 - c0, Eigen::OuterStride<>(N));
                if (pw->requires_grad) {
                    im2col_chunk(xi, g, c0, c1, col.data());
                    ConstMatMap cm(col.data(), K, c1 - c0);
                    MatMap gw(pw->ensure_grad().data(), dout, K);
                    gw.noalias() += gm * cm.transpose();
                }
                if (px->requires_grad) {
                    MatMap cm(col.data(), K, c1 - c0);
                    ConstMatMap wm(pw->value.data(), dout, K);
                    cm.noalias() = wm.transpose() * gm;
                    col2im_chunk_add(col.data(), g, c0, c1,
                                     px->ensure_grad().data() + i * g.cin * g.H * g.W);
                }
            }
            if (pb->requires_grad) {
                ConstMatMap gm(gi, dout, N);
                Eigen::Map<Eigen::VectorXd> gb(pb->ensure_grad().data(), dout);
                gb += gm.rowwise().sum();
            }
        }
    });
}

Var depthwise_conv3x3(const Var& x, const Var& W, const Var& b, int64_t dilation) {
    require_rank(x->value, 4, "depthwise_conv3x3");
    const auto& dx = x->value.dims();
    const int64_t n = dx[0], c = dx[1], H = dx[2], L = dx[3];
    if (W->value.size() != c * 9 || b->value.size() != c)
        throw std::invalid_argument("depthwise_conv3x3 weight shape mismatch");
    const int64_t pad = dilation;
    Tensor out({n, c, H, L});
    for (int64_t i = 0; i < n; ++i)
        for (int64_t ch = 0; ch < c; ++ch) {
            const double* xi = x->value.data() + (i * c + ch) * H * L;
            const double* w = W->value.data() + ch * 9;
            const double bias = b->value[ch];
            double* oi = out.data() + (i * c + ch) * H * L;
            for (int64_t hh = 0; hh < H; ++hh)
                for (int64_t ll = 0; ll < L; ++ll) {
                    double acc = bias;
                    for (int64_t ki = 0; ki < 3; ++ki)
                        for (int64_t kj = 0; kj < 3; ++kj) {
                            const int64_t ih = hh - pad + ki * dilation;
                            const int64_t iw = ll - pad + kj * dilation;
                            if (ih >= 0 && ih < H && iw >= 0 && iw < L)
                                acc += w[ki * 3 + kj] * xi[ih * L + iw];
                        }
                    oi[hh * L + ll] = acc;
                }
        }
    Var px = x, pw = W, pb = b;
    return make_op(std::move(out), {x, W, b}, [px, pw, pb, n, c, H, L, dilation](Node& self) {
        const int64_t pad = dilation;
        for (int64_t i = 0; i < n; ++i)
            for (int64_t ch = 0; ch < c; ++ch) {
                const double* gi = self.grad.data() + (i * c + ch) * H * L;
                const double* xi = px->value.data() + (i * c + ch) * H * L;
                const double* w = pw->value.data() + ch * 9;
                double* gx = px->requires_grad
                                 ? px->ensure_grad().data() + (i * c + ch) * H * L
                                 : nullptr;
                double* gw = pw->requires_grad ? pw->ensure_grad().data() + ch * 9 : nullptr;
                double gb_acc = 0.0;
                for (int64_t hh = 0; hh < H; ++hh)
                    for (int64_t ll = 0; ll < L; ++ll) {
                        const double go = gi[hh * L + ll];
                        gb_acc += go;
                        for (int64_t ki = 0; ki < 3; ++ki)
                            for (int64_t kj = 0; kj < 3; ++kj) {
                                const int64_t ih = hh - pad + ki * dilation;
                                const int64_t iw = ll - pad + kj * dilation;
                                if (ih < 0 || ih >= H || iw < 0 || iw >= L) continue;
                                if (gw) gw[ki * 3 + kj] += go * xi[ih * L + iw];
                                if (gx) gx[ih * L + iw] += go * w[ki * 3 + kj];
                            }
                    }
                if (pb->requires_grad) pb->ensure_grad()[ch] += gb_acc;
            }
    });
}

Var zero_stuff_w(const Var& x) {
    require_rank(x->value, 4, "zero_stuff_w");
    const auto& dx = x->value.dims();
    const int64_t rows = dx[0] * dx[1] * dx[2], w = dx[3], w2 = 2 * w - 1;
    Tensor out({dx[0], dx[1], dx[2], w2});
    for (int64_t r = 0; r < rows; ++r) {
        const double* src = x->value.data() + r * w;
        double* dst = out.data() + r * w2;
        for (int64_t j = 0; j < w; ++j) dst[2 * j] = src[j];
    }
    Var px = x;
    return make_op(std::move(out), {x}, [px, rows, w, w2](Node& self) {
        if (!px->requires_grad) return;
        double* g = px->ensure_grad().data();
        const double* sg = self.grad.data();
        for (int64_t r = 0; r < rows; ++r)
            for (int64_t j = 0; j < w; ++j) g[r * w + j] += sg[r * w2 + 2 * j];
    });
}

// ---------------------------------------------------------------------------
// normalization
// ---------------------------------------------------------------------------

Var instance_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
    require_rank(x->value, 4, "instance_norm");
    const auto& dx = x->value.dims();
    const int64_t n = dx[0], c = dx[1], m = dx[2] * dx[3];
    if (gamma->value.size() != c || beta->value.size() != c)
        throw std::invalid_argument("instance_norm affine shape mismatch");
    Tensor out(dx);
    Tensor xhat(dx);
    Tensor inv_std({n, c});
    for (int64_t i = 0; i < n * c; ++i) {
        const double* xi = x->value.data() + i * m;
        double mean = 0.0;
        for (int64_t k = 0; k < m; ++k) mean += xi[k];
        mean /= static_cast<double>(m);
        double var = 0.0;
        for (int64_t k = 0; k < m; ++k) {
            const double d = xi[k] - mean;
            var += d * d;
        }
        var /= static_cast<double>(m);
        const double istd = 1.0 / std::sqrt(var + eps);
        inv_std[i] = istd;
        const double gm = gamma->value[i % c], bt = beta->value[i % c];
        double* xh = xhat.data() + i * m;
        double* oi = out.data() + i * m;
        for (int64_t k = 0; k < m; ++k) {
            xh[k] = (xi[k] - mean) * istd;
            oi[k] = gm * xh[k] + bt;
        }
    }
    Var px = x, pg = gamma, pb = beta;
    return make_op(std::move(out), {x, gamma, beta},
                   [px, pg, pb, xhat, inv_std, n, c, m](Node& self) {
        for (int64_t i = 0; i < n * c; ++i) {
            const double* sg = self.grad.data() + i * m;
            const double* xh = xhat.data() + i * m;
            const double gm = pg->value[i % c];
            if (pg->requires_grad || pb->requires_grad) {
                double dg = 0.0, db = 0.0;
                for (int64_t k = 0; k < m; ++k) {
                    dg += sg[k] * xh[k];
                    db += sg[k];
                }
                if (pg->requires_grad) pg->ensure_grad()[i % c] += dg;
                if (pb->requires_grad) pb->ensure_grad()[i % c] += db;
            }
            if (px->requires_grad) {
                double mean_g = 0.0, mean_gx = 0.0;
                for (int64_t k = 0; k < m; ++k) {
                    mean_g += sg[k];
                    mean_gx += sg[k] * xh[k];
                }
                mean_g /= static_cast<double>(m);
                mean_gx /= static_cast<double>(m);
                double* gx = px->ensure_grad().data() + i * m;
                const double scale = gm * inv_std[i];
                for (int64_t k = 0; k < m; ++k)
                    gx[k] += scale * (sg[k] - mean_g - xh[k] * mean_gx);
            }
        }
    });
}

// ---------------------------------------------------------------------------
// attention primitives
// ---------------------------------------------------------------------------

namespace {

void bmm_into(double* out, const Tensor& a, const Tensor& b, bool ta, bool tb, bool accumulate) {
    const auto& da = a.dims();
    const auto& db = b.dims();
    const int64_t batch = da[0] * da[1];
    const int64_t am = da[2], ak = da[3], bm = db[2], bk = db[3];
    const int64_t M = ta ? ak : am, K = ta ? am : ak;
    const int64_t Kb = tb ? bk : bm, N = tb ? bm : bk;
    if (db[0] != da[0] || db[1] != da[1] || Kb != K)
        throw std::invalid_argument("bmm shape mismatch: " + a.shape_str() + " vs " + b.shape_str());
    for (int64_t i = 0; i < batch; ++i) {
        ConstMatMap ma(a.data() + i * am * ak, am, ak);
        ConstMatMap mb(b.data() + i * bm * bk, bm, bk);
        MatMap mo(out + i * M * N, M, N);
        if (!ta && !tb) {
            if (accumulate) mo.noalias() += ma * mb; else mo.noalias() = ma * mb;
        } else if (ta && !tb) {
            if (accumulate) mo.noalias() += ma.transpose() * mb; else mo.noalias() = ma.transpose() * mb;
        } else if (!ta && tb) {
            if (accumulate) mo.noalias() += ma * mb.transpose(); else mo.noalias() = ma * mb.transpose();
        } else {
            if (accumulate) mo.noalias() += ma.transpose() * mb.transpose();
            else mo.noalias() = ma.transpose() * mb.transpose();
        }
    }
}

}  // namespace

Tensor bmm_raw(const Tensor& a, const Tensor& b, bool trans_a, bool trans_b) {
    const auto& da = a.dims();
    const auto& db = b.dims();
    const int64_t M = trans_a ? da[3] : da[2];
    const int64_t N = trans_b ? db[2] : db[3];
    Tensor out({da[0], da[1], M, N});
    bmm_into(out.data(), a, b, trans_a, trans_b, false);
    return out;
}

Var bmm(const Var& a, const Var& b, bool trans_a, bool trans_b) {
    require_rank(a->value, 4, "bmm");
    require_rank(b->value, 4, "bmm");
    Tensor out = bmm_raw(a->value, b->value, trans_a, trans_b);
    Var pa = a, pb = b;
    return make_op(std::move(out), {a, b}, [pa, pb, trans_a, trans_b](Node& self) {
        // dA and dB follow from C = opA(A) opB(B).
        if (pa->requires_grad) {
            Tensor& ga = pa->ensure_grad();
            if (!trans_a) bmm_into(ga.data(), self.grad, pb->value, false, !trans_b, true);
            else bmm_into(ga.data(), pb->value, self.grad, trans_b, true, true);
        }
        if (pb->requires_grad) {
            Tensor& gb = pb->ensure_grad();
            if (!trans_b) bmm_into(gb.data(), pa->value, self.grad, !trans_a, false, true);
            else bmm_into(gb.data(), self.grad, pa->value, true, trans_a, true);
        }
    });
}

Var sum_lastdim(const Var& x) {
    require_rank(x->value, 4, "sum_lastdim");
    const auto& dx = x->value.dims();
    const int64_t rows = dx[0] * dx[1] * dx[2], s = dx[3];
    Tensor out({dx[0], dx[1], dx[2], 1});
    for (int64_t r = 0; r < rows; ++r) {
        const double* p = x->value.data() + r * s;
        double acc = 0.0;
        for (int64_t j = 0; j < s; ++j) acc += p[j];
        out[r] = acc;
    }
    Var px = x;
    return make_op(std::move(out), {x}, [px, rows, s](Node& self) {
        if (!px->requires_grad) return;
        double* g = px->ensure_grad().data();
        for (int64_t r = 0; r < rows; ++r) {
            const double go = self.grad[r];
            for (int64_t j = 0; j < s; ++j) g[r * s + j] += go;
        }
    });
}

Var div_rowbroadcast(const Var& num, const Var& den, double eps) {
    require_rank(num->value, 4, "div_rowbroadcast");
    require_rank(den->value, 4, "div_rowbroadcast");
    const auto& dn = num->value.dims();
    const auto& dd = den->value.dims();
    if (dd[0] != dn[0] || dd[1] != dn[1] || dd[2] != 1 || dd[3] != dn[3])
        throw std::invalid_argument("div_rowbroadcast denominator shape mismatch");
    const int64_t batch = dn[0] * dn[1], d = dn[2], s = dn[3];
    Tensor out(dn);
    for (int64_t i = 0; i < batch; ++i) {
        const double* np = num->value.data() + i * d * s;
        const double* dp = den->value.data() + i * s;
        double* op = out.data() + i * d * s;
        for (int64_t r = 0; r < d; ++r)
            for (int64_t j = 0; j < s; ++j) op[r * s + j] = np[r * s + j] / (dp[j] + eps);
    }
    Var pn = num, pd = den;
    return make_op(std::move(out), {num, den}, [pn, pd, eps, batch, d, s](Node& self) {
        for (int64_t i = 0; i < batch; ++i) {
            const double* sg = self.grad.data() + i * d * s;
            const double* np = pn->value.data() + i * d * s;
            const double* dp = pd->value.data() + i * s;
            if (pn->requires_grad) {
                double* gn = pn->ensure_grad().data() + i * d * s;
                for (int64_t r = 0; r < d; ++r)
                    for (int64_t j = 0; j < s; ++j) gn[r * s + j] += sg[r * s + j] / (dp[j] + eps);
            }
            if (pd->requires_grad) {
                double* gd = pd->ensure_grad().data() + i * s;
                for (int64_t j = 0; j < s; ++j) {
                    const double dj = dp[j] + eps;
                    double acc = 0.0;
                    for (int64_t r = 0; r < d; ++r) acc += sg[r * s + j] * np[r * s + j];
                    gd[j] -= acc / (dj * dj);
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

Var mse_loss(const Var& pred, const Tensor& target) {
    if (!pred->value.same_shape(target))
        throw std::invalid_argument("mse_loss shape mismatch: " + pred->value.shape_str() + " vs " +
                                    target.shape_str());
    const int64_t n = target.size();
    double acc = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        const double d = pred->value[i] - target[i];
        acc += d * d;
    }
    Tensor out = Tensor::scalar(acc / static_cast<double>(n));
    Var pp = pred;
    return make_op(std::move(out), {pred}, [pp, target, n](Node& self) {
        if (!pp->requires_grad) return;
        const double go = self.grad[0] * 2.0 / static_cast<double>(n);
        Tensor& g = pp->ensure_grad();
        for (int64_t i = 0; i < n; ++i) g[i] += go * (pp->value[i] - target[i]);
    });
}

Var spectral_convergence(const Var& pred, const Tensor& target, double eps) {
    if (!pred->value.same_shape(target))
        throw std::invalid_argument("spectral_convergence shape mismatch");
    const int64_t n = target.size();
    double diff_sq = 0.0, ref_sq = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        const double d = target[i] - pred->value[i];
        diff_sq += d * d;
        ref_sq += target[i] * target[i];
    }
    const double num = std::sqrt(diff_sq);
    const double den = std::max(std::sqrt(ref_sq), eps);
    Tensor out = Tensor::scalar(num / den);
    Var pp = pred;
    return make_op(std::move(out), {pred}, [pp, target, n, num, den](Node& self) {
        if (!pp->requires_grad || num <= 0.0) return;
        const double go = self.grad[0] / (num * den);
        Tensor& g = pp->ensure_grad();
        for (int64_t i = 0; i < n; ++i) g[i] += go * (pp->value[i] - target[i]);
    });
}

Var log_magnitude(const Var& pred, const Tensor& target, double eps) {
    if (!pred->value.same_shape(target))
        throw std::invalid_argument("log_magnitude shape mismatch");
    const int64_t n = target.size();
    double acc = 0.0;
    for (int64_t i = 0; i < n; ++i)
        acc += std::abs(std::log(target[i] + eps) - std::log(pred->value[i] + eps));
    Tensor out = Tensor::scalar(acc / static_cast<double>(n));
    Var pp = pred;
    return make_op(std::move(out), {pred}, [pp, target, n, eps](Node& self) {
        if (!pp->requires_grad) return;
        const double go = self.grad[0] / static_cast<double>(n);
        Tensor& g = pp->ensure_grad();
        for (int64_t i = 0; i < n; ++i) {
            const double diff = std::log(pp->value[i] + eps) - std::log(target[i] + eps);
            const double sign = diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0);
            g[i] += go * sign / (pp->value[i] + eps);
        }
    });
}

}  // namespace meldiff::ag
