#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "qkcv/attention.hpp"
#include "qkcv/gradcheck.hpp"

using namespace qkcv;

namespace {

// Naive reference: per-element scores, plain exponentials, no vectorization.
// modulation == nullptr means the vanilla score.
struct NaiveResult {
    std::vector<double> alpha;  // [B,H,Lq,Lk]
    std::vector<double> out;    // [B,H,Lq,D]
};

NaiveResult naive_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            const Modulation* modulation, double divisor) {
    // q,k,v in [B,L,H,D]
    const long B = q.shape()[0], Lq = q.shape()[1], H = q.shape()[2], D = q.shape()[3];
    const long Lk = k.shape()[1];
    NaiveResult r;
    r.alpha.assign(B * H * Lq * Lk, 0.0);
    r.out.assign(B * H * Lq * D, 0.0);
    for (long b = 0; b < B; ++b) {
        for (long h = 0; h < H; ++h) {
            for (long i = 0; i < Lq; ++i) {
                std::vector<double> s(Lk, 0.0);
                for (long j = 0; j < Lk; ++j) {
                    for (long d = 0; d < D; ++d) {
                        double kv = k.at({b, j, h, d});
                        if (modulation != nullptr) {
                            const double m = modulation->values.at({b, j, h, d});
                            kv = modulation->mode == ModulationMode::multiplicative ? kv * m : kv + m;
                        }
                        s[j] += q.at({b, i, h, d}) * kv;
                    }
                    s[j] /= divisor;
                }
                double z = 0.0;
                for (long j = 0; j < Lk; ++j) z += std::exp(s[j]);
                for (long j = 0; j < Lk; ++j) {
                    r.alpha[((b * H + h) * Lq + i) * Lk + j] = std::exp(s[j]) / z;
                }
                for (long d = 0; d < D; ++d) {
                    double acc = 0.0;
                    for (long j = 0; j < Lk; ++j) {
                        acc += r.alpha[((b * H + h) * Lq + i) * Lk + j] * v.at({b, j, h, d});
                    }
                    r.out[((b * H + h) * Lq + i) * D + d] = acc;
                }
            }
        }
    }
    return r;
}

Tensor rand_t(ParamInit& init, Shape s) { return init.uniform(std::move(s), -1.0, 1.0); }

}  // namespace

TEST_CASE("two-key scalar attention matches the closed form") {
    const Tensor q = Tensor::from_data({1, 1, 1, 1}, {1.0});
    const Tensor k = Tensor::from_data({1, 1, 2, 1}, {1.0, 0.0});
    const Tensor v = Tensor::from_data({1, 1, 2, 1}, {1.0, 0.0});
    const AttentionResult r = dot_product_attention(q, k, v);
    CHECK(r.output.numel() == 1);
    CHECK(r.output.item() == doctest::Approx(0.73106).epsilon(1e-4));
}

TEST_CASE("all-zero keys give uniform weights and the column mean of V") {
    ParamInit init(1);
    const Tensor q = rand_t(init, {1, 2, 3, 2});
    const Tensor k = Tensor::zeros({1, 2, 4, 2});
    const Tensor v = rand_t(init, {1, 2, 4, 2});
    const AttentionResult r = dot_product_attention(q, k, v);
    for (double a : r.scores.values.data()) CHECK(a == 0.25);
    for (long h = 0; h < 2; ++h) {
        for (long i = 0; i < 3; ++i) {
            for (long d = 0; d < 2; ++d) {
                double mean = 0.0;
                for (long j = 0; j < 4; ++j) mean += 0.25 * v.at({0, h, j, d});
                CHECK(r.output.at({0, h, i, d}) == mean);
            }
        }
    }
}

TEST_CASE("attention rejects mismatched operand shapes") {
    CHECK_THROWS_AS(dot_product_attention(Tensor::zeros({1, 1, 2, 3}), Tensor::zeros({1, 1, 2, 4}),
                                          Tensor::zeros({1, 1, 2, 4})),
                    ShapeError);
    CHECK_THROWS_AS(dot_product_attention(Tensor::zeros({1, 1, 2, 3}), Tensor::zeros({1, 1, 2, 3}),
                                          Tensor::zeros({1, 1, 4, 3})),
                    ShapeError);
}

TEST_CASE("vanilla attention equals the naive per-element evaluation") {
    ParamInit init(2);
    const Tensor q = rand_t(init, {2, 4, 2, 3});
    const Tensor k = rand_t(init, {2, 4, 2, 3});
    const Tensor v = rand_t(init, {2, 4, 2, 3});
    AttentionConfig cfg{Variant::vanilla, 2, 3, false};
    const AttentionResult r = qkcv_attention(q, k, v, Tensor(), cfg);
    const NaiveResult n = naive_attention(q, k, v, nullptr, std::sqrt(3.0));
    for (long i = 0; i < r.scores.values.numel(); ++i) {
        CHECK(std::abs(r.scores.values.data()[i] - n.alpha[i]) < 1e-12);
    }
    for (long i = 0; i < r.output.numel(); ++i) {
        CHECK(std::abs(r.output.data()[i] - n.out[i]) < 1e-12);
    }
}

TEST_CASE("every modulated variant equals the naive per-element evaluation") {
    for (unsigned long seed = 0; seed < 3; ++seed) {
        ParamInit init(seed + 10);
        const Tensor q = rand_t(init, {2, 5, 2, 4});
        const Tensor k = rand_t(init, {2, 5, 2, 4});
        const Tensor v = rand_t(init, {2, 5, 2, 4});
        const Tensor enc = rand_t(init, {2, 8});
        const Tensor c = expand_static(enc, 5, 2, 4);
        GrnParams grn = make_grn(4, 4, 0, init);
        for (Variant variant : {Variant::v1, Variant::v2, Variant::v3}) {
            INFO("variant ", variant_name(variant), " seed ", seed);
            AttentionConfig cfg{variant, 2, 4, false};
            const CombineResult comb = combine_key_category(k, c, variant, &grn);
            const AttentionResult r = qkcv_attention(q, k, v, c, cfg, &grn);
            const NaiveResult n = naive_attention(q, k, v, &comb.modulation, comb.divisor);
            for (long i = 0; i < r.scores.values.numel(); ++i) {
                CHECK(std::abs(r.scores.values.data()[i] - n.alpha[i]) < 1e-12);
            }
            for (long i = 0; i < r.output.numel(); ++i) {
                CHECK(std::abs(r.output.data()[i] - n.out[i]) < 1e-12);
            }
        }
    }
}

TEST_CASE("multiplicative identity modulation leaves the key tensor alone") {
    ParamInit init(3);
    const Tensor k = rand_t(init, {1, 3, 2, 4});
    Modulation ones{ModulationMode::multiplicative, Tensor::full({1, 3, 2, 4}, 1.0)};
    const CombineResult r = combine_key_category(k, Tensor(), Variant::v1, nullptr, &ones);
    CHECK(r.k_mod.data() == k.data());
    CHECK(r.divisor == std::sqrt(4.0));
}

TEST_CASE("additive zero modulation keeps K and doubles the squared temperature") {
    ParamInit init(4);
    const Tensor k = rand_t(init, {1, 3, 2, 4});
    Modulation zeros{ModulationMode::additive, Tensor::zeros({1, 3, 2, 4})};
    const CombineResult r = combine_key_category(k, Tensor(), Variant::v3, nullptr, &zeros);
    CHECK(r.k_mod.data() == k.data());
    CHECK(r.divisor == std::sqrt(8.0));
    CHECK(r.divisor == doctest::Approx(2.82843).epsilon(1e-5));
}

TEST_CASE("sigmoid midpoint modulation halves the key") {
    const Tensor k = Tensor::from_data({1, 1, 1, 1}, {2.0});
    Modulation half{ModulationMode::multiplicative, Tensor::full({1, 1, 1, 1}, 0.5)};
    const CombineResult r = combine_key_category(k, Tensor(), Variant::v2, nullptr, &half);
    CHECK(r.k_mod.data() == std::vector<double>{1.0});
    CHECK(r.divisor == 1.0);
}

TEST_CASE("injected modulations are validated against the variant") {
    const Tensor k = Tensor::zeros({1, 1, 1, 2});
    Modulation wrong_mode{ModulationMode::additive, Tensor::zeros({1, 1, 1, 2})};
    CHECK_THROWS_AS(combine_key_category(k, Tensor(), Variant::v1, nullptr, &wrong_mode), ContractError);
    Modulation out_of_range{ModulationMode::multiplicative, Tensor::full({1, 1, 1, 2}, 1.5)};
    CHECK_THROWS_AS(combine_key_category(k, Tensor(), Variant::v2, nullptr, &out_of_range), ContractError);
    Modulation bad_shape{ModulationMode::multiplicative, Tensor::zeros({1, 1, 1, 3})};
    CHECK_THROWS_AS(combine_key_category(k, Tensor(), Variant::v1, nullptr, &bad_shape), ShapeError);
    CHECK_THROWS_AS(combine_key_category(k, Tensor(), Variant::vanilla, nullptr, nullptr), ContractError);
    CHECK_THROWS_AS(combine_key_category(k, Tensor::zeros({1, 1, 1, 2}), Variant::v1, nullptr, nullptr),
                    ContractError);
}

TEST_CASE("combining never mutates the key tensor") {
    ParamInit init(5);
    const Tensor k = rand_t(init, {2, 3, 2, 4});
    const std::vector<double> before = k.data();
    const Tensor c = expand_static(rand_t(init, {2, 8}), 3, 2, 4);
    GrnParams grn = make_grn(4, 4, 0, init);
    for (Variant variant : {Variant::v1, Variant::v2, Variant::v3}) {
        const CombineResult r = combine_key_category(k, c, variant, &grn);
        CHECK(k.data() == before);
        CHECK_FALSE(r.k_mod.same_storage(k));
    }
}

TEST_CASE("identity modulations collapse the modulated variants onto vanilla") {
    ParamInit init(6);
    const Tensor q = rand_t(init, {2, 4, 2, 3});
    const Tensor k = rand_t(init, {2, 4, 2, 3});
    const Tensor v = rand_t(init, {2, 4, 2, 3});
    AttentionConfig vanilla{Variant::vanilla, 2, 3, false};
    const AttentionResult base = qkcv_attention(q, k, v, Tensor(), vanilla);

    Modulation ones{ModulationMode::multiplicative, Tensor::full({2, 4, 2, 3}, 1.0)};
    for (Variant variant : {Variant::v1, Variant::v2}) {
        AttentionConfig cfg{variant, 2, 3, false};
        const AttentionResult r = qkcv_attention(q, k, v, Tensor(), cfg, nullptr, &ones);
        for (long i = 0; i < base.scores.values.numel(); ++i) {
            CHECK(std::abs(r.scores.values.data()[i] - base.scores.values.data()[i]) < 1e-10);
        }
    }

    // additive zeros rescale the logits by exactly 1/sqrt(2)
    Modulation zeros{ModulationMode::additive, Tensor::zeros({2, 4, 2, 3})};
    AttentionConfig cfg3{Variant::v3, 2, 3, false};
    const AttentionResult r3 = qkcv_attention(q, k, v, Tensor(), cfg3, nullptr, &zeros);
    const Tensor base_logits =
        scale(matmul(permute(q, {0, 2, 1, 3}), transpose(permute(k, {0, 2, 1, 3}))), 1.0 / std::sqrt(3.0));
    const Tensor want = softmax_lastdim(scale(base_logits, 1.0 / std::sqrt(2.0)));
    for (long i = 0; i < want.numel(); ++i) {
        CHECK(std::abs(r3.scores.values.data()[i] - want.data()[i]) < 1e-12);
    }
}

TEST_CASE("score rows are stochastic for every variant over random configurations") {
    long checked = 0;
    for (unsigned long seed = 0; seed < 5; ++seed) {
        ParamInit init(seed + 20);
        const long B = 1 + static_cast<long>(seed % 2);
        const long H = 1 + static_cast<long>(seed % 3);
        const long D = 2 + static_cast<long>(seed % 3);
        const long L = 3 + static_cast<long>(seed % 4);
        for (Variant variant : {Variant::vanilla, Variant::v1, Variant::v2, Variant::v3}) {
            const Tensor q = rand_t(init, {B, L, H, D});
            const Tensor k = rand_t(init, {B, L, H, D});
            const Tensor v = rand_t(init, {B, L, H, D});
            GrnParams grn = make_grn(D, D, 0, init);
            Tensor c;
            if (variant != Variant::vanilla) c = expand_static(rand_t(init, {B, H * D}), L, H, D);
            AttentionConfig cfg{variant, H, D, false};
            const AttentionResult r = qkcv_attention(q, k, v, c, cfg, &grn);
            const auto& a = r.scores.values;
            for (long row = 0; row < a.numel() / L; ++row) {
                double sum = 0.0;
                for (long j = 0; j < L; ++j) {
                    const double x = a.data()[row * L + j];
                    CHECK(x >= 0.0);
                    sum += x;
                }
                CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
                ++checked;
            }
        }
    }
    CHECK(checked > 100);
}

TEST_CASE("causal masking zeroes future positions and keeps rows stochastic") {
    ParamInit init(7);
    const Tensor q = rand_t(init, {1, 4, 1, 2});
    const Tensor k = rand_t(init, {1, 4, 1, 2});
    const Tensor v = rand_t(init, {1, 4, 1, 2});
    const Tensor mask = causal_mask(4, 4);
    AttentionConfig cfg{Variant::vanilla, 1, 2, true};
    const AttentionResult r = qkcv_attention(q, k, v, Tensor(), cfg, nullptr, nullptr, &mask);
    const auto& a = r.scores.values;
    for (long i = 0; i < 4; ++i) {
        double sum = 0.0;
        for (long j = 0; j < 4; ++j) {
            const double x = a.at({0, 0, i, j});
            if (j > i) CHECK(x == 0.0);
            sum += x;
        }
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
    }
}

TEST_CASE("a fully masked query row is rejected up front") {
    const Tensor q = Tensor::zeros({1, 1, 2, 2});
    const Tensor k = Tensor::zeros({1, 1, 2, 2});
    const Tensor mask = Tensor::from_data({2, 2}, {0, 0, 1, 1});
    CHECK_THROWS_WITH_AS(dot_product_attention(q, k, k, &mask), doctest::Contains("every key masked"),
                         ContractError);
}

TEST_CASE("batch permutation equivariance holds bitwise") {
    ParamInit init(8);
    AttentionConfig cfg{Variant::v1, 2, 3, false};
    const MultiHeadParams p = make_multi_head(cfg, init);
    const Tensor x = rand_t(init, {3, 4, 6});
    const Tensor enc = rand_t(init, {3, 6});

    const MultiHeadResult direct = multi_head_qkcv(x, enc, p, cfg);

    const std::vector<long> perm = {2, 0, 1};
    std::vector<double> xp(x.numel()), ep(enc.numel());
    for (long b = 0; b < 3; ++b) {
        std::copy(x.data().begin() + perm[b] * 24, x.data().begin() + (perm[b] + 1) * 24,
                  xp.begin() + b * 24);
        std::copy(enc.data().begin() + perm[b] * 6, enc.data().begin() + (perm[b] + 1) * 6,
                  ep.begin() + b * 6);
    }
    const MultiHeadResult permuted = multi_head_qkcv(Tensor::from_data({3, 4, 6}, xp),
                                                     Tensor::from_data({3, 6}, ep), p, cfg);
    for (long b = 0; b < 3; ++b) {
        for (long i = 0; i < 24; ++i) {
            CHECK(permuted.output.data()[b * 24 + i] == direct.output.data()[perm[b] * 24 + i]);
        }
    }
}

TEST_CASE("modulation is constant across key positions for a fixed entity") {
    ParamInit init(9);
    const Tensor k = rand_t(init, {2, 5, 2, 3});
    const Tensor c = expand_static(rand_t(init, {2, 6}), 5, 2, 3);
    GrnParams grn = make_grn(3, 3, 0, init);
    const CombineResult r = combine_key_category(k, c, Variant::v1, &grn);
    for (long b = 0; b < 2; ++b) {
        for (long j = 1; j < 5; ++j) {
            for (long h = 0; h < 2; ++h) {
                for (long d = 0; d < 3; ++d) {
                    CHECK(r.modulation.values.at({b, j, h, d}) == r.modulation.values.at({b, 0, h, d}));
                }
            }
        }
    }
}

TEST_CASE("gradient reaches the entity encoding through every modulated variant only") {
    ParamInit init(10);
    const Tensor x = rand_t(init, {2, 4, 6});
    for (Variant variant : {Variant::v1, Variant::v2, Variant::v3, Variant::vanilla}) {
        AttentionConfig cfg{variant, 2, 3, false};
        const MultiHeadParams p = make_multi_head(cfg, init);
        Tensor enc = rand_t(init, {2, 6});
        const Tensor c_arg = variant == Variant::vanilla ? Tensor() : enc;
        const MultiHeadResult r = multi_head_qkcv(x, c_arg, p, cfg);
        const GradMap g = grad_of(sum_all(mul(r.output, r.output)), {enc});
        if (variant == Variant::vanilla) {
            CHECK_FALSE(g.materialized(enc));
        } else {
            double mag = 0.0;
            const Tensor ge = g.at(enc);
            for (double v : ge.data()) mag += std::abs(v);
            INFO("variant ", variant_name(variant));
            CHECK(mag > 0.0);
        }
    }
}

TEST_CASE("multi-head output shapes hold across configurations") {
    const struct {
        long B, L, H, D;
    } cases[] = {{2, 8, 4, 16}, {1, 3, 1, 4}, {3, 5, 2, 2}, {2, 2, 3, 3}, {1, 6, 2, 5}};
    unsigned long seed = 30;
    for (const auto& cs : cases) {
        ParamInit init(seed++);
        AttentionConfig cfg{Variant::v2, cs.H, cs.D, false};
        const MultiHeadParams p = make_multi_head(cfg, init);
        const Tensor x = rand_t(init, {cs.B, cs.L, cs.H * cs.D});
        const Tensor enc = rand_t(init, {cs.B, cs.H * cs.D});
        const MultiHeadResult r = multi_head_qkcv(x, enc, p, cfg);
        CHECK(r.output.shape() == Shape{cs.B, cs.L, cs.H * cs.D});
        CHECK(r.scores.values.shape() == Shape{cs.B, cs.H, cs.L, cs.L});
    }
}

TEST_CASE("single-head wrapper equals the hand-composed attention call") {
    ParamInit init(40);
    AttentionConfig cfg{Variant::v1, 1, 4, false};
    const MultiHeadParams p = make_multi_head(cfg, init);
    const Tensor x = rand_t(init, {2, 3, 4});
    const Tensor enc = rand_t(init, {2, 4});
    const MultiHeadResult r = multi_head_qkcv(x, enc, p, cfg);

    const Tensor q = reshape(linear_apply(p.wq, x), {2, 3, 1, 4});
    const Tensor k = reshape(linear_apply(p.wk, x), {2, 3, 1, 4});
    const Tensor v = reshape(linear_apply(p.wv, x), {2, 3, 1, 4});
    const Tensor c = expand_static(enc, 3, 1, 4);
    const AttentionResult inner = qkcv_attention(q, k, v, c, cfg, &p.combiner);
    const Tensor want = linear_apply(p.wo, reshape(permute(inner.output, {0, 2, 1, 3}), {2, 3, 4}));
    for (long i = 0; i < want.numel(); ++i) {
        CHECK(std::abs(r.output.data()[i] - want.data()[i]) < 1e-12);
    }
}

TEST_CASE("full attention blocks pass the finite difference oracle") {
    for (unsigned long seed = 0; seed < 3; ++seed) {
        for (Variant variant : {Variant::v1, Variant::v2, Variant::v3}) {
            ParamInit init(seed + 50);
            AttentionConfig cfg{variant, 2, 3, false};
            GrnParams grn = make_grn(3, 3, 0, init);
            auto f = [&cfg, &grn](const std::vector<Tensor>& in) {
                const Tensor c = expand_static(in[3], 4, 2, 3);
                return qkcv_attention(in[0], in[1], in[2], c, cfg, &grn).output;
            };
            std::vector<Tensor> inputs = {rand_t(init, {2, 4, 2, 3}), rand_t(init, {2, 4, 2, 3}),
                                          rand_t(init, {2, 4, 2, 3}), rand_t(init, {2, 6}),
                                          grn.w2,
                                          grn.b2,
                                          grn.w1,
                                          grn.b1,
                                          grn.w4,
                                          grn.b4,
                                          grn.w5,
                                          grn.b5,
                                          grn.ln_gain,
                                          grn.ln_bias};
            INFO("variant ", variant_name(variant), " seed ", seed);
            CHECK(finite_difference_check(f, inputs, 1e-5) < 1e-4);
        }
    }
}

TEST_CASE("score and modulation exports are flat indexed csv") {
    ScoreMatrix s{Tensor::from_data({1, 1, 1, 2}, {0.25, 0.75})};
    const std::string csv = scores_to_csv(s);
    CHECK(csv == "index,value\n0,0.25\n1,0.75\n");
    Modulation m{ModulationMode::multiplicative, Tensor::from_data({1, 1, 1, 1}, {0.5})};
    CHECK(modulation_to_csv(m) == "index,value\n0,0.5\n");
}
