#include "dayolo/autograd.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <unordered_set>

namespace dayolo {

namespace {

thread_local bool g_grad_enabled = true;

using MatrixRM = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatrixRM>;
using ConstMapRM = Eigen::Map<const MatrixRM>;

bool any_requires(const std::vector<Var>& parents) {
    for (const auto& p : parents)
        if (p && p->requires_grad) return true;
    return false;
}

}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

Var make_leaf(Tensor value, bool requires_grad) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->requires_grad = requires_grad && g_grad_enabled;
    return n;
}

Var make_constant(Tensor value) { return make_leaf(std::move(value), false); }

Var make_op(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward_fn) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    if (g_grad_enabled && any_requires(parents)) {
        n->requires_grad = true;
        n->parents = std::move(parents);
        n->backward_fn = std::move(backward_fn);
    }
    return n;
}

void backward(const Var& root) {
    if (!root) throw ValidationError("backward: null root");
    if (root->value.numel() != 1)
        throw ValidationError("backward: root must be scalar, got " + shape_str(root->value.shape));
    if (!root->requires_grad) return;

    // iterative post-order DFS: parents before node
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.emplace_back(root.get(), 0);
    visited.insert(root.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Node* p = node->parents[idx].get();
            ++idx;
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    for (Node* n : order) n->ensure_grad();
    root->grad.data[0] += 1.0f;

    // reverse post-order: every consumer of a node runs before the node
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn) n->backward_fn(*n);
    }
}

void zero_grad(const Var& v) {
    if (v && v->has_grad()) v->grad.fill(0.0f);
}

// ---------------------------------------------------------------------------
// elementwise / reductions
// ---------------------------------------------------------------------------

Var add(const Var& a, const Var& b) {
    if (!a->value.same_shape(b->value))
        throw ShapeError("add: shape mismatch " + shape_str(a->value.shape) + " vs " +
                         shape_str(b->value.shape));
    Tensor out = a->value;
    for (int64_t i = 0; i < out.numel(); ++i) out.data[size_t(i)] += b->value.data[size_t(i)];
    return make_op(std::move(out), {a, b}, [](Node& self) {
        for (int pi = 0; pi < 2; ++pi) {
            Node* p = self.parents[size_t(pi)].get();
            if (!p->requires_grad) continue;
            for (int64_t i = 0; i < self.grad.numel(); ++i)
                p->grad.data[size_t(i)] += self.grad.data[size_t(i)];
        }
    });
}

Var add_n(const std::vector<Var>& xs) {
    if (xs.empty()) throw ValidationError("add_n: empty input");
    Tensor out = xs[0]->value;
    for (size_t k = 1; k < xs.size(); ++k) {
        if (!xs[k]->value.same_shape(out))
            throw ShapeError("add_n: shape mismatch at input " + std::to_string(k));
        for (int64_t i = 0; i < out.numel(); ++i) out.data[size_t(i)] += xs[k]->value.data[size_t(i)];
    }
    return make_op(std::move(out), xs, [](Node& self) {
        for (auto& pv : self.parents) {
            Node* p = pv.get();
            if (!p->requires_grad) continue;
            for (int64_t i = 0; i < self.grad.numel(); ++i)
                p->grad.data[size_t(i)] += self.grad.data[size_t(i)];
        }
    });
}

Var scale(const Var& x, float c) {
    Tensor out = x->value;
    for (float& v : out.data) v *= c;
    return make_op(std::move(out), {x}, [c](Node& self) {
        Node* p = self.parents[0].get();
        if (!p->requires_grad) return;
        for (int64_t i = 0; i < self.grad.numel(); ++i)
            p->grad.data[size_t(i)] += c * self.grad.data[size_t(i)];
    });
}

Var leaky_relu(const Var& x, float negative_slope) {
    Tensor out = x->value;
    for (float& v : out.data) v = v > 0.0f ? v : negative_slope * v;
    return make_op(std::move(out), {x}, [negative_slope](Node& self) {
        Node* p = self.parents[0].get();
        if (!p->requires_grad) return;
        const Tensor& in = p->value;
        for (int64_t i = 0; i < self.grad.numel(); ++i) {
            float g = self.grad.data[size_t(i)];
            p->grad.data[size_t(i)] += in.data[size_t(i)] > 0.0f ? g : negative_slope * g;
        }
    });
}

Var sigmoid(const Var& x) {
    Tensor out = x->value;
    for (float& v : out.data) v = 1.0f / (1.0f + std::exp(-v));
    return make_op(std::move(out), {x}, [](Node& self) {
        Node* p = self.parents[0].get();
        if (!p->requires_grad) return;
        for (int64_t i = 0; i < self.grad.numel(); ++i) {
            float s = self.value.data[size_t(i)];
            p->grad.data[size_t(i)] += self.grad.data[size_t(i)] * s * (1.0f - s);
        }
    });
}

Var sum_all(const Var& x) {
    Tensor out = Tensor::scalar(float(x->value.sum_double()));
    return make_op(std::move(out), {x}, [](Node& self) {
        Node* p = self.parents[0].get();
        if (!p->requires_grad) return;
        float g = self.grad.data[0];
        for (float& v : p->grad.data) v += g;
    });
}

Var mean_all(const Var& x) {
    int64_t n = x->value.numel();
    Tensor out = Tensor::scalar(float(x->value.sum_double() / double(n)));
    return make_op(std::move(out), {x}, [n](Node& self) {
        Node* p = self.parents[0].get();
        if (!p->requires_grad) return;
        float g = self.grad.data[0] / float(n);
        for (float& v : p->grad.data) v += g;
    });
}

Var abs_diff(const Var& a, const Var& b) {
    if (a->value.numel() != 1 || b->value.numel() != 1)
        throw ShapeError("abs_diff: scalar inputs expected");
    float d = a->value.data[0] - b->value.data[0];
    Tensor out = Tensor::scalar(std::fabs(d));
    float sign = d > 0.0f ? 1.0f : (d < 0.0f ? -1.0f : 0.0f);
    return make_op(std::move(out), {a, b}, [sign](Node& self) {
        float g = self.grad.data[0];
        if (self.parents[0]->requires_grad) self.parents[0]->grad.data[0] += sign * g;
        if (self.parents[1]->requires_grad) self.parents[1]->grad.data[0] -= sign * g;
    });
}

// ---------------------------------------------------------------------------
// conv2d via im2col + GEMM
// ---------------------------------------------------------------------------

namespace {

// cols: [Cin*kh*kw, Ho*Wo] row-major
void im2col(const float* x, int cin, int h, int w, int kh, int kw, int stride, int pad,
            int ho, int wo, float* cols) {
    for (int ci = 0; ci < cin; ++ci) {
        for (int ky = 0; ky < kh; ++ky) {
            for (int kx = 0; kx < kw; ++kx) {
                float* row = cols + (size_t((ci * kh + ky) * kw + kx)) * size_t(ho * wo);
                for (int oy = 0; oy < ho; ++oy) {
                    int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= h) {
                        std::fill(row + oy * wo, row + (oy + 1) * wo, 0.0f);
                        continue;
                    }
                    const float* src = x + (size_t(ci) * h + iy) * w;
                    for (int ox = 0; ox < wo; ++ox) {
                        int ix = ox * stride - pad + kx;
                        row[oy * wo + ox] = (ix >= 0 && ix < w) ? src[ix] : 0.0f;
                    }
                }
            }
        }
    }
}

void col2im_accum(const float* cols, int cin, int h, int w, int kh, int kw, int stride, int pad,
                  int ho, int wo, float* dx) {
    for (int ci = 0; ci < cin; ++ci) {
        for (int ky = 0; ky < kh; ++ky) {
            for (int kx = 0; kx < kw; ++kx) {
                const float* row = cols + (size_t((ci * kh + ky) * kw + kx)) * size_t(ho * wo);
                for (int oy = 0; oy < ho; ++oy) {
                    int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= h) continue;
                    float* dst = dx + (size_t(ci) * h + iy) * w;
                    for (int ox = 0; ox < wo; ++ox) {
                        int ix = ox * stride - pad + kx;
                        if (ix >= 0 && ix < w) dst[ix] += row[oy * wo + ox];
                    }
                }
            }
        }
    }
}

}  // namespace

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
    const Tensor& xv = x->value;
    const Tensor& wv = w->value;
    bool batched = xv.ndim() == 4;
    if (!batched && xv.ndim() != 3)
        throw ShapeError("conv2d: input must be [B,C,H,W] or [C,H,W], got " + shape_str(xv.shape));
    if (wv.ndim() != 4) throw ShapeError("conv2d: weight must be [Cout,Cin,kh,kw]");

    int batch = batched ? xv.dim(0) : 1;
    int cin = batched ? xv.dim(1) : xv.dim(0);
    int h = batched ? xv.dim(2) : xv.dim(1);
    int w_in = batched ? xv.dim(3) : xv.dim(2);
    int cout = wv.dim(0), kh = wv.dim(2), kw = wv.dim(3);
    if (wv.dim(1) != cin)
        throw ShapeError("conv2d: input has " + std::to_string(cin) + " channels, weight expects " +
                         std::to_string(wv.dim(1)));
    if (b->value.numel() != cout) throw ShapeError("conv2d: bias size mismatch");

    int ho = (h + 2 * pad - kh) / stride + 1;
    int wo = (w_in + 2 * pad - kw) / stride + 1;
    if (ho <= 0 || wo <= 0) throw ShapeError("conv2d: output would be empty");

    int ck = cin * kh * kw;
    int64_t plane_in = int64_t(cin) * h * w_in;
    int64_t plane_out = int64_t(cout) * ho * wo;

    Tensor out(batched ? std::vector<int>{batch, cout, ho, wo} : std::vector<int>{cout, ho, wo});
    // cache im2col buffers for backward
    auto cols_cache = std::make_shared<std::vector<Tensor>>();
    bool need_cache = g_grad_enabled && (x->requires_grad || w->requires_grad);

    Tensor cols({ck, ho * wo});
    for (int bi = 0; bi < batch; ++bi) {
        im2col(xv.data.data() + bi * plane_in, cin, h, w_in, kh, kw, stride, pad, ho, wo,
               cols.data.data());
        ConstMapRM wm(wv.data.data(), cout, ck);
        ConstMapRM cm(cols.data.data(), ck, ho * wo);
        MapRM om(out.data.data() + bi * plane_out, cout, ho * wo);
        om.noalias() = wm * cm;
        for (int c = 0; c < cout; ++c) om.row(c).array() += b->value.data[size_t(c)];
        if (need_cache) cols_cache->push_back(cols);
    }

    auto bw = [=](Node& self) {
        Node* px = self.parents[0].get();
        Node* pw = self.parents[1].get();
        Node* pb = self.parents[2].get();
        Tensor dcols({ck, ho * wo});
        for (int bi = 0; bi < batch; ++bi) {
            ConstMapRM dy(self.grad.data.data() + bi * plane_out, cout, ho * wo);
            if (pb->requires_grad)
                for (int c = 0; c < cout; ++c) pb->grad.data[size_t(c)] += dy.row(c).sum();
            if (pw->requires_grad) {
                ConstMapRM cm((*cols_cache)[size_t(bi)].data.data(), ck, ho * wo);
                MapRM dwm(pw->grad.data.data(), cout, ck);
                dwm.noalias() += dy * cm.transpose();
            }
            if (px->requires_grad) {
                ConstMapRM wm(pw->value.data.data(), cout, ck);
                MapRM dcm(dcols.data.data(), ck, ho * wo);
                dcm.noalias() = wm.transpose() * dy;
                col2im_accum(dcols.data.data(), cin, h, w_in, kh, kw, stride, pad, ho, wo,
                             px->grad.data.data() + bi * plane_in);
            }
        }
    };
    return make_op(std::move(out), {x, w, b}, bw);
}

Var linear(const Var& x, const Var& w, const Var& b) {
    const Tensor& xv = x->value;
    const Tensor& wv = w->value;
    bool batched = xv.ndim() == 2;
    if (!batched && xv.ndim() != 1)
        throw ShapeError("linear: input must be [B,N] or [N]");
    int batch = batched ? xv.dim(0) : 1;
    int n = batched ? xv.dim(1) : xv.dim(0);
    if (wv.ndim() != 2 || wv.dim(1) != n)
        throw ShapeError("linear: weight " + shape_str(wv.shape) + " incompatible with input of width " +
                         std::to_string(n));
    int m = wv.dim(0);
    if (b->value.numel() != m) throw ShapeError("linear: bias size mismatch");

    Tensor out(batched ? std::vector<int>{batch, m} : std::vector<int>{m});
    ConstMapRM xm(xv.data.data(), batch, n);
    ConstMapRM wm(wv.data.data(), m, n);
    MapRM om(out.data.data(), batch, m);
    om.noalias() = xm * wm.transpose();
    for (int bi = 0; bi < batch; ++bi)
        for (int j = 0; j < m; ++j) om(bi, j) += b->value.data[size_t(j)];

    auto bw = [=](Node& self) {
        Node* px = self.parents[0].get();
        Node* pw = self.parents[1].get();
        Node* pb = self.parents[2].get();
        ConstMapRM dy(self.grad.data.data(), batch, m);
        if (pb->requires_grad)
            for (int j = 0; j < m; ++j) pb->grad.data[size_t(j)] += dy.col(j).sum();
        if (pw->requires_grad) {
            ConstMapRM xm2(px->value.data.data(), batch, n);
            MapRM dwm(pw->grad.data.data(), m, n);
            dwm.noalias() += dy.transpose() * xm2;
        }
        if (px->requires_grad) {
            ConstMapRM wm2(pw->value.data.data(), m, n);
            MapRM dxm(px->grad.data.data(), batch, n);
            dxm.noalias() += dy * wm2;
        }
    };
    return make_op(std::move(out), {x, w, b}, bw);
}

// ---------------------------------------------------------------------------
// gradient reversal
// ---------------------------------------------------------------------------

Var grl(const Var& x, float lambda) {
    if (lambda < 0.0f) throw ValidationError("grl: lambda must be >= 0, got " + std::to_string(lambda));
    Tensor out = x->value;  // elementwise identity
    return make_op(std::move(out), {x}, [lambda](Node& self) {
        Node* p = self.parents[0].get();
        if (!p->requires_grad) return;
        for (int64_t i = 0; i < self.grad.numel(); ++i)
            p->grad.data[size_t(i)] += -lambda * self.grad.data[size_t(i)];
    });
}

// ---------------------------------------------------------------------------
// ROI max pooling
// ---------------------------------------------------------------------------

Var roi_max_pool(const Var& x, int x0, int x1, int y0, int y1, int pool) {
    const Tensor& xv = x->value;
    if (xv.ndim() != 3) throw ShapeError("roi_max_pool: input must be [C,H,W]");
    int c = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
    x0 = std::clamp(x0, 0, w);
    x1 = std::clamp(x1, 0, w);
    y0 = std::clamp(y0, 0, h);
    y1 = std::clamp(y1, 0, h);
    if (x1 <= x0 || y1 <= y0) throw ValidationError("degenerate ROI");

    Tensor out({c, pool, pool});
    auto argmax = std::make_shared<std::vector<int>>(size_t(c) * pool * pool);

    int rw = x1 - x0, rh = y1 - y0;
    for (int py = 0; py < pool; ++py) {
        int by0 = y0 + (py * rh) / pool;
        int by1 = y0 + ((py + 1) * rh + pool - 1) / pool;  // ceil
        if (by1 <= by0) by1 = by0 + 1;                     // empty bin: nearest covered cell
        for (int px = 0; px < pool; ++px) {
            int bx0 = x0 + (px * rw) / pool;
            int bx1 = x0 + ((px + 1) * rw + pool - 1) / pool;
            if (bx1 <= bx0) bx1 = bx0 + 1;
            for (int ci = 0; ci < c; ++ci) {
                float best = -std::numeric_limits<float>::infinity();
                int best_idx = -1;
                for (int yy = by0; yy < by1; ++yy) {
                    for (int xx = bx0; xx < bx1; ++xx) {
                        float v = xv.at3(ci, yy, xx);
                        if (v > best) {
                            best = v;
                            best_idx = yy * w + xx;
                        }
                    }
                }
                out.at3(ci, py, px) = best;
                (*argmax)[size_t((ci * pool + py) * pool + px)] = best_idx;
            }
        }
    }

    return make_op(std::move(out), {x}, [argmax, c, pool, h, w](Node& self) {
        Node* p = self.parents[0].get();
        if (!p->requires_grad) return;
        (void)h;
        for (int ci = 0; ci < c; ++ci)
            for (int py = 0; py < pool; ++py)
                for (int px = 0; px < pool; ++px) {
                    size_t oi = size_t((ci * pool + py) * pool + px);
                    int idx = (*argmax)[oi];
                    p->grad.data[size_t(ci) * size_t(h) * size_t(w) + size_t(idx)] +=
                        self.grad.data[oi];
                }
    });
}

// ---------------------------------------------------------------------------
// binary cross entropy over probabilities
// ---------------------------------------------------------------------------

Var bce_sum(const Var& p, int domain_label, float weight, float eps) {
    if (domain_label != 0 && domain_label != 1)
        throw ValidationError("bce_sum: domain label must be 0 or 1");
    const Tensor& pv = p->value;
    double acc = 0.0;
    for (float raw : pv.data) {
        double pc = std::min(std::max(double(raw), double(eps)), 1.0 - double(eps));
        acc += domain_label == 1 ? std::log(pc) : std::log(1.0 - pc);
    }
    Tensor out = Tensor::scalar(float(-double(weight) * acc));
    return make_op(std::move(out), {p}, [domain_label, weight, eps](Node& self) {
        Node* par = self.parents[0].get();
        if (!par->requires_grad) return;
        float g = self.grad.data[0];
        const Tensor& pv2 = par->value;
        for (int64_t i = 0; i < pv2.numel(); ++i) {
            float raw = pv2.data[size_t(i)];
            if (raw < eps || raw > 1.0f - eps) continue;  // clamp region: zero gradient
            float dldp = domain_label == 1 ? -weight / raw : weight / (1.0f - raw);
            par->grad.data[size_t(i)] += g * dldp;
        }
    });
}

// ---------------------------------------------------------------------------
// finite differences (test utility)
// ---------------------------------------------------------------------------

std::vector<float> finite_difference(const std::function<float(const Tensor&)>& f, const Tensor& x,
                                     float eps) {
    std::vector<float> grad(size_t(x.numel()));
    Tensor probe = x;
    for (int64_t i = 0; i < x.numel(); ++i) {
        float orig = probe.data[size_t(i)];
        probe.data[size_t(i)] = orig + eps;
        float up = f(probe);
        probe.data[size_t(i)] = orig - eps;
        float down = f(probe);
        probe.data[size_t(i)] = orig;
        grad[size_t(i)] = (up - down) / (2.0f * eps);
    }
    return grad;
}

}  // namespace dayolo
