// Parameter containers, deterministic initialization, and the named
// parameter registry used by checkpointing and freeze policies.
#pragma once

#include <random>
#include <string>
#include <utility>
#include <vector>

#include "qkcv/tensor.hpp"

namespace qkcv {

// Ordered name -> tensor view of a model. Handles share storage with the
// owning module, so optimizer updates through the map are visible everywhere.
using ParamMap = std::vector<std::pair<std::string, Tensor>>;

long param_count(const ParamMap& params);
Tensor find_param(const ParamMap& params, const std::string& name);

class ParamInit {
  public:
    explicit ParamInit(unsigned long seed) : rng_(seed) {}

    Tensor uniform(Shape shape, double lo, double hi) {
        std::uniform_real_distribution<double> dist(lo, hi);
        std::vector<double> data(shape_numel(shape));
        for (auto& v : data) v = dist(rng_);
        return Tensor::from_data(std::move(shape), std::move(data), true);
    }

    // Glorot-uniform for affine weights laid out [fan_in, fan_out].
    Tensor glorot(long fan_in, long fan_out) {
        const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
        return uniform({fan_in, fan_out}, -limit, limit);
    }

    // Fan-based scaled uniform for embedding tables [rows, width].
    Tensor table(long rows, long width) {
        const double limit = 1.0 / std::sqrt(static_cast<double>(width));
        return uniform({rows, width}, -limit, limit);
    }

    Tensor zeros(Shape shape) { return Tensor::zeros(std::move(shape), true); }
    Tensor full(Shape shape, double value) { return Tensor::full(std::move(shape), value, true); }

  private:
    std::mt19937_64 rng_;
};

struct LinearParams {
    Tensor w;  // [in, out]
    Tensor b;  // [out]
};

LinearParams make_linear(long in_dim, long out_dim, ParamInit& init);
Tensor linear_apply(const LinearParams& p, const Tensor& x);
void collect_linear(const std::string& prefix, const LinearParams& p, ParamMap& out);

}  // namespace qkcv
