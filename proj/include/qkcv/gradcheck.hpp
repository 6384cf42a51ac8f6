// Finite-difference oracle for the reverse-mode engine.
//
// The oracle side never touches the tape: objectives are evaluated with
// plain double arithmetic on the forward outputs, so an error in a backward
// rule cannot hide on both sides of the comparison.
#pragma once

#include <functional>
#include <string>
#include <vector>

#include "qkcv/tensor.hpp"

namespace qkcv {

using TensorFn = std::function<Tensor(const std::vector<Tensor>&)>;

// Compares reverse-mode gradients of a fixed pseudorandom linear projection
// of f's output against central differences. Returns the worst relative
// error |analytic - central| / max(1, |central|) over every coordinate of
// every input that requires grad.
//
// pre: eps in [1e-7, 1e-3]; every grad-requiring input is a leaf; f is
//      deterministic (two evaluations must agree bitwise, checked here).
double finite_difference_check(const TensorFn& f, const std::vector<Tensor>& inputs, double eps = 1e-5);

struct OpCheck {
    std::string name;
    TensorFn fn;
    std::vector<Tensor> inputs;
};

// One check per differentiable primitive, with inputs drawn from `seed`.
// Shapes exercise broadcasting, batching and shared right-hand sides.
std::vector<OpCheck> op_set_checks(unsigned long seed);

// Multi-op blocks checked end to end: the gated residual block with and
// without context, variable selection, and one full multi-head attention
// block per variant. Looser tolerance than the primitives (error compounds
// through the composition).
std::vector<OpCheck> composite_checks(unsigned long seed);

}  // namespace qkcv
