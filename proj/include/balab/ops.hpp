#pragma once

#include <functional>
#include <vector>

#include "balab/tensor.hpp"

namespace balab {

// Reverse-mode primitives. Every op computes eagerly and, when the graph is
// enabled and an input participates in gradient flow, records a backward
// closure on the tape. Gradients accumulate additively across uses.

Tensor matmul(Graph& g, const Tensor& a, const Tensor& b);
Tensor add(Graph& g, const Tensor& a, const Tensor& b);          // same shape
Tensor add_rowvec(Graph& g, const Tensor& x, const Tensor& b);   // [n x c] + [c]
Tensor mul(Graph& g, const Tensor& a, const Tensor& b);          // elementwise
Tensor scale(Graph& g, const Tensor& x, double s);               // constant scale
Tensor smul(Graph& g, const Tensor& x, const Tensor& s);         // scale by scalar tensor
Tensor silu(Graph& g, const Tensor& x);
Tensor sigmoid(Graph& g, const Tensor& x);
Tensor softmax(Graph& g, const Tensor& x, int axis = -1);
Tensor rmsnorm(Graph& g, const Tensor& x, const Tensor& gain);   // eps 1e-5, per row
Tensor gather_rows(Graph& g, const Tensor& table, const std::vector<int>& ids);
Tensor concat_rows(Graph& g, const std::vector<Tensor>& parts);
Tensor concat_cols(Graph& g, const std::vector<Tensor>& parts);
Tensor slice_rows(Graph& g, const Tensor& x, int r0, int r1);    // half-open
Tensor slice_cols(Graph& g, const Tensor& x, int c0, int c1);
Tensor transpose(Graph& g, const Tensor& x);
Tensor mean_rows(Graph& g, const Tensor& x);                     // [n x c] -> [1 x c]
Tensor mean_all(Graph& g, const Tensor& x);                      // scalar
Tensor sum_all(Graph& g, const Tensor& x);                       // scalar
Tensor index(Graph& g, const Tensor& x, int flat_index);         // scalar pick
// rotary position transform over adjacent pairs; rows are positions pos0..pos0+s-1
Tensor rope(Graph& g, const Tensor& x, int pos0, double base = 10000.0);
// mean of -log softmax(logits)[target] over positions; target id -1 masks a position
Tensor cross_entropy(Graph& g, const Tensor& logits, const std::vector<int>& targets);

constexpr double kRmsNormEps = 1e-5;

// Central-difference gradient oracle. x must be float64. Returns the max over
// coordinates of |analytic - numeric| / max(1, |numeric|).
double grad_check(const std::function<Tensor(Graph&, const Tensor&)>& f, const Tensor& x,
                  double h = 1e-5);

// Same oracle for a loss that closes over shared parameter tensors: one
// analytic backward pass, then per-parameter central differences in place.
double grad_check_params(const std::function<Tensor(Graph&)>& loss_fn,
                         const std::vector<Tensor>& params, double h = 1e-5);

}  // namespace balab
