#include "qkcv/attention.hpp"

#include <cmath>
#include <cstdio>

namespace qkcv {

namespace {

constexpr double kMaskFill = -1e30;

void require_bhld(const Tensor& t, const char* name) {
    if (!t.defined() || t.ndim() != 4) {
        throw ShapeError(std::string("attention: ") + name + " must be rank 4");
    }
}

// Rejects query rows with no unmasked key before the fill value can turn a
// softmax row into garbage.
void check_mask_rows(const Tensor& mask, long lq, long lk) {
    const Shape target{lq, lk};
    broadcast_shapes(mask.shape(), target, "attention mask");
    std::vector<bool> any_open(lq, false);
    const auto& md = mask.data();
    const long mq = mask.ndim() >= 2 ? mask.shape()[mask.ndim() - 2] : 1;
    const long mk = mask.ndim() >= 1 ? mask.shape()[mask.ndim() - 1] : 1;
    for (long i = 0; i < lq; ++i) {
        for (long j = 0; j < lk; ++j) {
            const long mi = mq == 1 ? 0 : i;
            const long mj = mk == 1 ? 0 : j;
            if (md[mi * mk + mj] == 0.0) {
                any_open[i] = true;
                break;
            }
        }
    }
    for (long i = 0; i < lq; ++i) {
        if (!any_open[i]) {
            throw ContractError("attention: query position " + std::to_string(i) +
                                " has every key masked");
        }
    }
}

AttentionResult attention_core(const Tensor& qh, const Tensor& kh, const Tensor& vh, double divisor,
                               const Tensor* mask, const Tensor* score_dropout) {
    const long lq = qh.shape()[2];
    const long lk = kh.shape()[2];
    Tensor logits = scale(matmul(qh, transpose(kh)), 1.0 / divisor);
    if (mask != nullptr) {
        if (mask->ndim() > 2) {
            throw ShapeError("attention: mask rank " + std::to_string(mask->ndim()) +
                             " cannot broadcast to [Lq,Lk]");
        }
        check_mask_rows(*mask, lq, lk);
        logits = masked_fill(logits, *mask, kMaskFill);
    }
    const Tensor alpha = softmax_lastdim(logits);
    const Tensor used = score_dropout != nullptr ? mul(alpha, *score_dropout) : alpha;
    return {matmul(used, vh), {alpha}};
}

}  // namespace

const char* variant_name(Variant v) {
    switch (v) {
        case Variant::vanilla: return "vanilla";
        case Variant::v1: return "v1";
        case Variant::v2: return "v2";
        case Variant::v3: return "v3";
    }
    return "?";
}

Variant variant_from_name(const std::string& name) {
    if (name == "vanilla") return Variant::vanilla;
    if (name == "v1") return Variant::v1;
    if (name == "v2") return Variant::v2;
    if (name == "v3") return Variant::v3;
    throw ConfigError("unknown attention variant: " + name);
}

CombineResult combine_key_category(const Tensor& k, const Tensor& c, Variant variant,
                                   const GrnParams* grn, const Modulation* inject) {
    if (variant == Variant::vanilla) {
        throw ContractError("combine_key_category: vanilla has no category operand");
    }
    require_bhld(k, "K");
    const long d = k.shape()[3];
    const ModulationMode mode =
        variant == Variant::v3 ? ModulationMode::additive : ModulationMode::multiplicative;

    Modulation m;
    if (inject != nullptr) {
        if (!inject->values.defined() || !shapes_equal(inject->values.shape(), k.shape())) {
            throw ShapeError("combine_key_category: injected modulation must match K " +
                             shape_str(k.shape()));
        }
        if (inject->mode != mode) {
            throw ContractError("combine_key_category: injected modulation mode does not fit variant");
        }
        if (variant == Variant::v2) {
            for (double v : inject->values.data()) {
                if (v < 0.0 || v > 1.0) {
                    throw ContractError("combine_key_category: v2 modulation values must lie in [0,1]");
                }
            }
        }
        m = *inject;
    } else {
        require_bhld(c, "C");
        if (!shapes_equal(c.shape(), k.shape())) {
            throw ShapeError("combine_key_category: C " + shape_str(c.shape()) +
                             " not congruent with K " + shape_str(k.shape()));
        }
        if (grn == nullptr) {
            throw ContractError("combine_key_category: no combiner weights and no injected modulation");
        }
        const Tensor g = grn_apply(*grn, c);
        m.mode = mode;
        m.values = variant == Variant::v2 ? sigmoid(g) : g;
    }

    const double divisor =
        variant == Variant::v3 ? std::sqrt(2.0 * static_cast<double>(d)) : std::sqrt(static_cast<double>(d));
    const Tensor k_mod =
        m.mode == ModulationMode::multiplicative ? mul(k, m.values) : add(k, m.values);
    return {k_mod, divisor, m};
}

AttentionResult dot_product_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                      const Tensor* mask) {
    require_bhld(q, "Q");
    require_bhld(k, "K");
    require_bhld(v, "V");
    const long d = q.shape()[3];
    if (k.shape()[3] != d || v.shape()[3] != d) {
        throw ShapeError("attention: head dims disagree, Q " + shape_str(q.shape()) + " K " +
                         shape_str(k.shape()) + " V " + shape_str(v.shape()));
    }
    if (k.shape()[2] != v.shape()[2] || k.shape()[0] != q.shape()[0] || k.shape()[1] != q.shape()[1] ||
        v.shape()[0] != q.shape()[0] || v.shape()[1] != q.shape()[1]) {
        throw ShapeError("attention: batch/head/key extents disagree, Q " + shape_str(q.shape()) +
                         " K " + shape_str(k.shape()) + " V " + shape_str(v.shape()));
    }
    return attention_core(q, k, v, std::sqrt(static_cast<double>(d)), mask, nullptr);
}

AttentionResult qkcv_attention(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& c,
                               const AttentionConfig& cfg, const GrnParams* combiner,
                               const Modulation* inject, const Tensor* mask,
                               const Tensor* score_dropout) {
    require_bhld(q, "Q");
    require_bhld(k, "K");
    require_bhld(v, "V");

    Tensor k_used = k;
    double divisor = std::sqrt(static_cast<double>(k.shape()[3]));
    if (cfg.variant != Variant::vanilla) {
        if (!c.defined() && inject == nullptr) {
            throw ContractError(std::string("qkcv_attention: variant ") + variant_name(cfg.variant) +
                                " needs a category tensor");
        }
        const CombineResult comb = combine_key_category(k, c, cfg.variant, combiner, inject);
        k_used = comb.k_mod;
        divisor = comb.divisor;
    }

    // [B,L,H,D] -> [B,H,L,D] for the score products
    const Tensor qh = permute(q, {0, 2, 1, 3});
    const Tensor kh = permute(k_used, {0, 2, 1, 3});
    const Tensor vh = permute(v, {0, 2, 1, 3});
    return attention_core(qh, kh, vh, divisor, mask, score_dropout);
}

MultiHeadParams make_multi_head(const AttentionConfig& cfg, ParamInit& init) {
    if (cfg.heads <= 0 || cfg.head_dim <= 0) throw ConfigError("attention: heads and head_dim must be positive");
    const long e = cfg.heads * cfg.head_dim;
    MultiHeadParams p;
    p.wq = make_linear(e, e, init);
    p.wk = make_linear(e, e, init);
    p.wv = make_linear(e, e, init);
    p.wo = make_linear(e, e, init);
    if (cfg.variant != Variant::vanilla) {
        p.combiner = make_grn(cfg.head_dim, cfg.head_dim, 0, init);
        p.has_combiner = true;
    }
    return p;
}

void collect_multi_head(const std::string& prefix, const MultiHeadParams& p, Variant variant,
                        ParamMap& out) {
    collect_linear(prefix + ".wq", p.wq, out);
    collect_linear(prefix + ".wk", p.wk, out);
    collect_linear(prefix + ".wv", p.wv, out);
    collect_linear(prefix + ".wo", p.wo, out);
    if (variant != Variant::vanilla && p.has_combiner) {
        collect_grn(prefix + ".combiner", p.combiner, out);
    }
}

MultiHeadResult multi_head_qkcv(const Tensor& x, const Tensor& c_entity, const MultiHeadParams& p,
                                const AttentionConfig& cfg, const Tensor* score_dropout) {
    const long e = cfg.heads * cfg.head_dim;
    if (x.ndim() != 3 || x.shape()[2] != e) {
        throw ShapeError("multi_head: input " + shape_str(x.shape()) + " does not end in width " +
                         std::to_string(e));
    }
    const long b = x.shape()[0];
    const long l = x.shape()[1];

    const Tensor q = reshape(linear_apply(p.wq, x), {b, l, cfg.heads, cfg.head_dim});
    const Tensor k = reshape(linear_apply(p.wk, x), {b, l, cfg.heads, cfg.head_dim});
    const Tensor v = reshape(linear_apply(p.wv, x), {b, l, cfg.heads, cfg.head_dim});

    Tensor c;
    if (cfg.variant != Variant::vanilla) {
        if (!c_entity.defined()) {
            throw ContractError(std::string("multi_head: variant ") + variant_name(cfg.variant) +
                                " needs an entity encoding");
        }
        c = expand_static(c_entity, l, cfg.heads, cfg.head_dim);
    }

    Tensor mask;
    if (cfg.causal_mask) mask = causal_mask(l, l);
    const AttentionResult r =
        qkcv_attention(q, k, v, c, cfg, p.has_combiner ? &p.combiner : nullptr, nullptr,
                       cfg.causal_mask ? &mask : nullptr, score_dropout);

    const Tensor merged = reshape(permute(r.output, {0, 2, 1, 3}), {b, l, e});
    return {linear_apply(p.wo, merged), r.scores};
}

Tensor causal_mask(long lq, long lk) {
    if (lq <= 0 || lk <= 0) throw ShapeError("causal_mask: extents must be positive");
    std::vector<double> m(lq * lk, 0.0);
    for (long i = 0; i < lq; ++i) {
        for (long j = i + 1; j < lk; ++j) m[i * lk + j] = 1.0;
    }
    return Tensor::from_data({lq, lk}, std::move(m));
}

namespace {

std::string flat_csv(const Tensor& t) {
    std::string out = "index,value\n";
    char buf[64];
    for (long i = 0; i < t.numel(); ++i) {
        std::snprintf(buf, sizeof(buf), "%ld,%.17g", i, t.data()[i]);
        out += buf;
        out += "\n";
    }
    return out;
}

}  // namespace

std::string scores_to_csv(const ScoreMatrix& scores) { return flat_csv(scores.values); }
std::string modulation_to_csv(const Modulation& modulation) { return flat_csv(modulation.values); }

}  // namespace qkcv
