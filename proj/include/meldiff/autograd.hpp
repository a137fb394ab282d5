#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "meldiff/tensor.hpp"

namespace meldiff::ag {

struct Node;
using Var = std::shared_ptr<Node>;

/// One value in the computation graph. Backward functions are recorded only
/// while gradients are enabled and some input requires them, so inference
/// builds no graph and frees intermediates eagerly.
struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::vector<Var> parents;
    std::function<void(Node&)> backward_fn;

    Tensor& ensure_grad();
};

Var constant(Tensor value);
Var parameter(Tensor value);

bool grad_enabled();

struct NoGradGuard {
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

/// Reverse-mode sweep from a scalar root ([1]-shaped value).
void backward(const Var& root);
void zero_grad(const std::vector<Var>& params);

// ---- elementwise / structural ----
Var add(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var gelu(const Var& x);
Var elu_plus_one(const Var& x);
Var exp(const Var& x);
Var view(const Var& x, std::vector<int64_t> dims);
Var concat_channels(const Var& a, const Var& b);        // dim 1 of [n,c,h,w]
Var add_time_bias(const Var& x, const Var& t);          // x [n,C,h,w] + t [n,C]

// ---- linear maps ----
Var linear_vec(const Var& x, const Var& W, const Var& b);        // [n,din] -> [n,dout]
Var linear_pointwise(const Var& x, const Var& W, const Var& b);  // 1x1 conv on [n,din,h,w]
Var tokenize_freq(const Var& x, const Var& W, const Var& b);     // [n,c,f,l] -> [n,d,c,l]
Var detokenize_freq(const Var& h, const Var& W, const Var& b);   // [n,d,c,l] -> [n,c,f,l]

// ---- convolutions ----
Var conv2d(const Var& x, const Var& W, const Var& b,
           int64_t stride_h, int64_t stride_w,
           int64_t pad_h, int64_t pad_w,
           int64_t dil_h = 1, int64_t dil_w = 1);
Var depthwise_conv3x3(const Var& x, const Var& W, const Var& b, int64_t dilation = 1);
Var zero_stuff_w(const Var& x);  // [n,c,h,w] -> [n,c,h,2w-1], zeros interleaved

// ---- normalization ----
Var instance_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);

// ---- attention primitives (batched over the two leading dims) ----
Var bmm(const Var& a, const Var& b, bool trans_a, bool trans_b);
Var sum_lastdim(const Var& x);                                   // [..,d,s] -> [..,d,1]
Var div_rowbroadcast(const Var& num, const Var& den, double eps);  // den [..,1,s]

// ---- losses (target is a plain tensor, never differentiated) ----
Var mse_loss(const Var& pred, const Tensor& target);
Var spectral_convergence(const Var& pred, const Tensor& target, double eps);
Var log_magnitude(const Var& pred, const Tensor& target, double eps);

/// Raw batched matmul on tensors [b0,b1,m,k]; shared by ops and samplers.
Tensor bmm_raw(const Tensor& a, const Tensor& b, bool trans_a, bool trans_b);

}  // namespace meldiff::ag
