#include "qkcv/gradcheck.hpp"

#include <cmath>
#include <random>

#include "qkcv/attention.hpp"
#include "qkcv/static_encoder.hpp"

namespace qkcv {

namespace {

std::vector<double> projection_weights(long n) {
    std::mt19937_64 rng(0x51CB0A75u);
    std::uniform_real_distribution<double> dist(0.5, 1.5);
    std::vector<double> w(n);
    for (auto& v : w) v = dist(rng);
    return w;
}

double project(const std::vector<double>& out, const std::vector<double>& w) {
    double s = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) s += w[i] * out[i];
    return s;
}

}  // namespace

double finite_difference_check(const TensorFn& f, const std::vector<Tensor>& inputs, double eps) {
    if (eps < 1e-7 || eps > 1e-3) {
        throw ContractError("finite_difference_check: eps " + std::to_string(eps) +
                            " outside [1e-7, 1e-3]");
    }
    std::vector<Tensor> checked;
    for (const auto& t : inputs) {
        if (!t.defined()) throw ContractError("finite_difference_check: undefined input");
        if (t.requires_grad()) {
            if (!t.is_leaf()) throw ContractError("finite_difference_check: grad input is not a leaf");
            checked.push_back(t);
        }
    }
    if (checked.empty()) throw ContractError("finite_difference_check: no input requires grad");

    {
        NoGradGuard off;
        const Tensor once = f(inputs);
        const Tensor twice = f(inputs);
        if (once.data() != twice.data()) {
            throw ContractError("finite_difference_check: function is not deterministic");
        }
    }

    const Tensor out = f(inputs);
    const std::vector<double> w = projection_weights(out.numel());
    const Tensor loss = sum_all(mul(out, Tensor::from_data(out.shape(), w)));
    const GradMap grads = grad_of(loss, checked);

    double worst = 0.0;
    for (auto& t : checked) {
        const Tensor analytic = grads.at(t);
        Tensor handle = t;
        for (long i = 0; i < t.numel(); ++i) {
            const double saved = handle.leaf_data()[i];
            double splus, sminus;
            {
                NoGradGuard off;
                handle.leaf_data()[i] = saved + eps;
                splus = project(f(inputs).data(), w);
                handle.leaf_data()[i] = saved - eps;
                sminus = project(f(inputs).data(), w);
                handle.leaf_data()[i] = saved;
            }
            const double central = (splus - sminus) / (2.0 * eps);
            const double rel = std::abs(analytic.data()[i] - central) / std::max(1.0, std::abs(central));
            worst = std::max(worst, rel);
        }
    }
    return worst;
}

std::vector<OpCheck> op_set_checks(unsigned long seed) {
    std::mt19937_64 rng(seed);
    auto rt = [&rng](Shape shape, double lo, double hi, bool rg = true) {
        std::uniform_real_distribution<double> dist(lo, hi);
        std::vector<double> data(shape_numel(shape));
        for (auto& v : data) v = dist(rng);
        return Tensor::from_data(std::move(shape), std::move(data), rg);
    };

    std::vector<OpCheck> checks;
    auto put = [&checks](std::string name, TensorFn fn, std::vector<Tensor> in) {
        checks.push_back({std::move(name), std::move(fn), std::move(in)});
    };

    put("matmul", [](const std::vector<Tensor>& x) { return matmul(x[0], x[1]); },
        {rt({3, 4}, -1, 1), rt({4, 2}, -1, 1)});
    put("batched_matmul", [](const std::vector<Tensor>& x) { return matmul(x[0], x[1]); },
        {rt({2, 3, 4}, -1, 1), rt({2, 4, 2}, -1, 1)});
    put("matmul_shared_rhs", [](const std::vector<Tensor>& x) { return matmul(x[0], x[1]); },
        {rt({2, 3, 4}, -1, 1), rt({4, 2}, -1, 1)});
    put("transpose", [](const std::vector<Tensor>& x) { return transpose(x[0], 0, 2); },
        {rt({2, 3, 4}, -1, 1)});
    put("permute", [](const std::vector<Tensor>& x) { return permute(x[0], {2, 0, 1}); },
        {rt({2, 3, 4}, -1, 1)});
    put("add_broadcast", [](const std::vector<Tensor>& x) { return add(x[0], x[1]); },
        {rt({2, 3}, -1, 1), rt({3}, -1, 1)});
    put("sub", [](const std::vector<Tensor>& x) { return sub(x[0], x[1]); },
        {rt({2, 3}, -1, 1), rt({2, 3}, -1, 1)});
    put("mul_broadcast", [](const std::vector<Tensor>& x) { return mul(x[0], x[1]); },
        {rt({2, 3, 1}, -1, 1), rt({1, 4}, -1, 1)});
    put("div", [](const std::vector<Tensor>& x) { return div(x[0], x[1]); },
        {rt({2, 3}, -1, 1), rt({2, 3}, 0.7, 1.7)});
    put("broadcast", [](const std::vector<Tensor>& x) { return broadcast_to(x[0], {3, 4}); },
        {rt({3, 1}, -1, 1)});
    put("scalar_scale", [](const std::vector<Tensor>& x) { return scale(x[0], 1.7); },
        {rt({2, 3}, -1, 1)});
    put("exp", [](const std::vector<Tensor>& x) { return exp(x[0]); }, {rt({2, 3}, -1, 1)});
    put("log", [](const std::vector<Tensor>& x) { return log(x[0]); }, {rt({2, 3}, 0.5, 2.0)});
    put("elu", [](const std::vector<Tensor>& x) { return elu(x[0]); }, {rt({2, 3}, -2, 2)});
    put("sigmoid", [](const std::vector<Tensor>& x) { return sigmoid(x[0]); }, {rt({2, 3}, -2, 2)});
    put("tanh", [](const std::vector<Tensor>& x) { return tanh_op(x[0]); }, {rt({2, 3}, -2, 2)});
    put("softmax_lastdim", [](const std::vector<Tensor>& x) { return softmax_lastdim(x[0]); },
        {rt({2, 5}, -2, 2)});
    put("layer_norm_lastdim", [](const std::vector<Tensor>& x) { return layer_norm_lastdim(x[0]); },
        {rt({2, 6}, -2, 2)});
    put("concat", [](const std::vector<Tensor>& x) { return concat({x[0], x[1]}, 1); },
        {rt({2, 2, 3}, -1, 1), rt({2, 1, 3}, -1, 1)});
    put("reshape", [](const std::vector<Tensor>& x) { return reshape(x[0], {4, 6}); },
        {rt({2, 3, 4}, -1, 1)});
    put("reduce_sum", [](const std::vector<Tensor>& x) { return reduce_sum(x[0], 1); },
        {rt({2, 3, 4}, -1, 1)});
    put("reduce_mean", [](const std::vector<Tensor>& x) { return reduce_mean(x[0], -1); },
        {rt({2, 3, 4}, -1, 1)});
    {
        Tensor mask = rt({3, 4}, 0, 1, false);
        for (auto& v : mask.leaf_data()) v = v > 0.5 ? 1.0 : 0.0;
        put("masked_fill",
            [](const std::vector<Tensor>& x) { return masked_fill(x[0], x[1], 0.9); },
            {rt({3, 4}, -1, 1), mask});
    }
    return checks;
}

std::vector<OpCheck> composite_checks(unsigned long seed) {
    std::mt19937_64 rng(seed ^ 0xC0123456789ABCDEull);
    auto rt = [&rng](Shape shape, double lo, double hi) {
        std::uniform_real_distribution<double> dist(lo, hi);
        std::vector<double> data(shape_numel(shape));
        for (auto& v : data) v = dist(rng);
        return Tensor::from_data(std::move(shape), std::move(data), true);
    };
    auto with_params = [](std::vector<Tensor> in, const ParamMap& pm) {
        for (const auto& [name, t] : pm) {
            (void)name;
            in.push_back(t);
        }
        return in;
    };

    std::vector<OpCheck> checks;
    {
        ParamInit init(seed * 31 + 1);
        GrnParams p = make_grn(5, 5, 0, init);
        ParamMap pm;
        collect_grn("g", p, pm);
        checks.push_back({"grn",
                          [p](const std::vector<Tensor>& x) { return grn_apply(p, x[0]); },
                          with_params({rt({3, 5}, -1, 1)}, pm)});
    }
    {
        // in != out so the skip projection participates; context on top
        ParamInit init(seed * 31 + 2);
        GrnParams p = make_grn(4, 6, 3, init);
        ParamMap pm;
        collect_grn("g", p, pm);
        checks.push_back({"grn_context",
                          [p](const std::vector<Tensor>& x) { return grn_apply(p, x[0], x[1]); },
                          with_params({rt({2, 4}, -1, 1), rt({2, 3}, -1, 1)}, pm)});
    }
    {
        ParamInit init(seed * 31 + 3);
        StaticEncoderConfig cfg;
        cfg.cardinalities = {3, 2};
        cfg.embed_dim = 4;
        cfg.mode = EncoderMode::sce;
        StaticEncoderParams p = make_static_encoder(cfg, init);
        ParamMap pm;
        collect_static_encoder("enc", p, pm);
        const std::vector<long> codes = {0, 1, 2, 0, 1, 1};  // three rows, two variables
        checks.push_back({"vsn",
                          [p, codes](const std::vector<Tensor>& x) {
                              (void)x;
                              return static_covariate_encode(p, codes, 3).encoding;
                          },
                          with_params({}, pm)});
    }
    for (Variant v : {Variant::vanilla, Variant::v1, Variant::v2, Variant::v3}) {
        ParamInit init(seed * 31 + 4 + static_cast<unsigned long>(v));
        AttentionConfig cfg;
        cfg.variant = v;
        cfg.heads = 2;
        cfg.head_dim = 2;
        MultiHeadParams p = make_multi_head(cfg, init);
        ParamMap pm;
        collect_multi_head("attn", p, cfg.variant, pm);
        const std::string name = std::string("attention_") + variant_name(v);
        if (v == Variant::vanilla) {
            checks.push_back({name,
                              [p, cfg](const std::vector<Tensor>& x) {
                                  return multi_head_qkcv(x[0], Tensor(), p, cfg).output;
                              },
                              with_params({rt({2, 3, 4}, -1, 1)}, pm)});
        } else {
            checks.push_back({name,
                              [p, cfg](const std::vector<Tensor>& x) {
                                  return multi_head_qkcv(x[0], x[1], p, cfg).output;
                              },
                              with_params({rt({2, 3, 4}, -1, 1), rt({2, 4}, -1, 1)}, pm)});
        }
    }
    return checks;
}

}  // namespace qkcv
