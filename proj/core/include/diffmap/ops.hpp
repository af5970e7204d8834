#pragma once

#include <vector>

#include "diffmap/autograd.hpp"

// Differentiable operations over NCHW tensors.
namespace diffmap::ag {

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var detach(const Var& a);

Var relu(const Var& x);
Var silu(const Var& x);
Var sigmoid(const Var& x);

Var sum(const Var& x);
Var mean(const Var& x);
// Weighted sum of scalar terms.
Var weighted_sum(const std::vector<Var>& terms, const std::vector<double>& weights);

// x[N,C,H,W] * (1 + scale[N,C]) + shift[N,C]
Var modulate(const Var& x, const Var& scale, const Var& shift);

// x[N,I] -> [N,O] with weight[O,I], bias[O].
Var linear(const Var& x, const Var& weight, const Var& bias);

// Cross-correlation with square kernels; weight[O,I,k,k], optional bias[O].
Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int padding);

Var upsample_nearest(const Var& x, int factor);
// Non-overlapping mean over factor x factor blocks.
Var avg_pool(const Var& x, int factor);

// Picks pixels (flat (n, h, w) indices) of x[N,C,H,W] into a [1,C,P,1] column.
Var gather_pixels(const Var& x, const std::vector<std::size_t>& pixels);
Var concat_channels(const std::vector<Var>& parts);
Var slice_channels(const Var& x, int begin, int end);

// [N,C,H,W] <-> [N,H*W,C] token layouts.
Var to_tokens(const Var& x);
Var from_tokens(const Var& tokens, int height, int width);
// tokens[N,L,I] -> [N,L,O] with weight[O,I], bias[O].
Var token_linear(const Var& tokens, const Var& weight, const Var& bias);

// Multi-head scaled dot-product attention. q[N,L,E], k[N,S,E], v[N,S,E],
// E divisible by heads; per head softmax(q k^T / sqrt(E/heads)) v.
Var attention(const Var& q, const Var& k, const Var& v, int heads);
// Attention weights [N,heads,L,S] for inspection.
Tensor attention_weights(const Tensor& q, const Tensor& k, int heads);

// Mean of (a - b)^2 over all elements.
Var mse(const Var& a, const Var& b);
// Mean binary cross-entropy of sigmoid(logits) against targets in [0,1].
Var bce_with_logits(const Var& logits, const Tensor& targets);
// Mean softmax cross-entropy over pixels. logits[N,K,H,W]; labels[N,H,W] as
// class indices, with negative labels ignored. Empty selection yields 0.
Var softmax_cross_entropy(const Var& logits, const std::vector<int>& labels);

}  // namespace diffmap::ag
