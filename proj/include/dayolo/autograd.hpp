#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "dayolo/tensor.hpp"

namespace dayolo {

// Reverse-mode autodiff over Tensor values. Each op builds a Node holding
// its forward value, its parents, and a closure that scatters the node's
// gradient into the parents' gradients. Graphs are rebuilt every step and
// freed when the last Var handle goes away (the graph is a DAG, closures
// only reference parents, so shared_ptr ownership is cycle-free).
struct Node {
    Tensor value;
    Tensor grad;  // allocated lazily by backward()
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;  // null for leaves

    bool has_grad() const { return grad.numel() == value.numel() && grad.numel() > 0; }
    void ensure_grad() {
        if (!has_grad()) grad = Tensor::zeros(value.shape);
    }
};

using Var = std::shared_ptr<Node>;

// Thread-local switch: when disabled, every op returns a detached leaf.
// Evaluation-mode forwards run under NoGradGuard.
bool grad_enabled();

class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

Var make_leaf(Tensor value, bool requires_grad = false);
Var make_constant(Tensor value);

// Custom-op escape hatch: value plus parents plus a backward closure.
// Honors grad_enabled(); drops the closure when no parent needs gradients.
Var make_op(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward_fn);

// Accumulates d(root)/d(node) into node->grad for every node reachable from
// root. root must be scalar. Leaf gradients accumulate across calls; fresh
// interior nodes start at zero.
void backward(const Var& root);

void zero_grad(const Var& v);

// ---- elementwise / reduction ops ----
Var add(const Var& a, const Var& b);
Var add_n(const std::vector<Var>& xs);  // all same shape
Var scale(const Var& x, float c);
Var leaky_relu(const Var& x, float negative_slope = 0.1f);
Var sigmoid(const Var& x);
Var sum_all(const Var& x);   // -> scalar
Var mean_all(const Var& x);  // -> scalar
Var abs_diff(const Var& a, const Var& b);  // scalars: |a - b|

// ---- layers ----
// x [B,Cin,H,W] or [Cin,H,W]; w [Cout,Cin,kh,kw]; b [Cout]
Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad);
// x [B,N] or [N]; w [M,N]; b [M]
Var linear(const Var& x, const Var& w, const Var& b);

// Gradient reversal: forward identity, backward multiplies by -lambda.
Var grl(const Var& x, float lambda);

// Max pool a fixed P x P grid of bins over feature-map cells
// [y0,y1) x [x0,x1) of x [C,H,W]. Empty bins take the nearest covered cell.
// Gradient flows to the argmax cells only; the window is a constant.
Var roi_max_pool(const Var& x, int x0, int x1, int y0, int y1, int pool);

// Negative log-likelihood of domain label over every element of p:
//   -weight * sum[ D*log(p) + (1-D)*log(1-p) ],  p clamped to [eps, 1-eps].
// Accumulated in double. Gradient is zero where the clamp is active.
Var bce_sum(const Var& p, int domain_label, float weight, float eps = 1e-7f);

// numerical gradient of f at x (central differences), for tests
std::vector<float> finite_difference(const std::function<float(const Tensor&)>& f,
                                     const Tensor& x, float eps = 1e-2f);

}  // namespace dayolo
