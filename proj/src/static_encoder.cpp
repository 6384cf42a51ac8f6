#include "qkcv/static_encoder.hpp"

#include <cmath>
#include <cstdio>

namespace qkcv {

long param_count(const ParamMap& params) {
    long n = 0;
    for (const auto& [name, t] : params) n += t.numel();
    return n;
}

Tensor find_param(const ParamMap& params, const std::string& name) {
    for (const auto& [n, t] : params) {
        if (n == name) return t;
    }
    throw ContractError("find_param: no parameter named " + name);
}

LinearParams make_linear(long in_dim, long out_dim, ParamInit& init) {
    return {init.glorot(in_dim, out_dim), init.zeros({out_dim})};
}

Tensor linear_apply(const LinearParams& p, const Tensor& x) { return linear(x, p.w, p.b); }

void collect_linear(const std::string& prefix, const LinearParams& p, ParamMap& out) {
    out.emplace_back(prefix + ".w", p.w);
    out.emplace_back(prefix + ".b", p.b);
}

GrnParams make_grn(long in_dim, long out_dim, long ctx_dim, ParamInit& init) {
    if (in_dim <= 0 || out_dim <= 0 || ctx_dim < 0) throw ConfigError("make_grn: bad widths");
    GrnParams p;
    p.in_dim = in_dim;
    p.out_dim = out_dim;
    p.ctx_dim = ctx_dim;
    p.w2 = init.glorot(in_dim, out_dim);
    p.b2 = init.zeros({out_dim});
    if (ctx_dim > 0) p.w3 = init.glorot(ctx_dim, out_dim);
    p.w1 = init.glorot(out_dim, out_dim);
    p.b1 = init.zeros({out_dim});
    p.w4 = init.glorot(out_dim, out_dim);
    p.b4 = init.zeros({out_dim});
    p.w5 = init.glorot(out_dim, out_dim);
    p.b5 = init.zeros({out_dim});
    if (in_dim != out_dim) p.skip_w = init.glorot(in_dim, out_dim);
    p.ln_gain = init.full({out_dim}, 1.0);
    p.ln_bias = init.zeros({out_dim});
    return p;
}

namespace {

Tensor grn_forward(const GrnParams& p, const Tensor& a, const Tensor* context) {
    if (a.ndim() < 1 || a.shape().back() != p.in_dim) {
        throw ShapeError("grn: input " + shape_str(a.shape()) + " does not end in width " +
                         std::to_string(p.in_dim));
    }
    if (context != nullptr) {
        if (p.ctx_dim == 0) throw ShapeError("grn: block has no context projection");
        if (context->shape().back() != p.ctx_dim) {
            throw ShapeError("grn: context " + shape_str(context->shape()) + " does not end in width " +
                             std::to_string(p.ctx_dim));
        }
    }
    Tensor pre = linear(a, p.w2, p.b2);
    if (context != nullptr) pre = add(pre, matmul(*context, p.w3));
    const Tensor eta = linear(elu(pre), p.w1, p.b1);
    const Tensor gated = mul(sigmoid(linear(eta, p.w4, p.b4)), linear(eta, p.w5, p.b5));
    const Tensor skip = p.in_dim == p.out_dim ? a : matmul(a, p.skip_w);
    return add(mul(layer_norm_lastdim(add(skip, gated)), p.ln_gain), p.ln_bias);
}

}  // namespace

Tensor grn_apply(const GrnParams& p, const Tensor& a) { return grn_forward(p, a, nullptr); }

Tensor grn_apply(const GrnParams& p, const Tensor& a, const Tensor& context) {
    return grn_forward(p, a, &context);
}

void collect_grn(const std::string& prefix, const GrnParams& p, ParamMap& out) {
    out.emplace_back(prefix + ".w2", p.w2);
    out.emplace_back(prefix + ".b2", p.b2);
    if (p.ctx_dim > 0) out.emplace_back(prefix + ".w3", p.w3);
    out.emplace_back(prefix + ".w1", p.w1);
    out.emplace_back(prefix + ".b1", p.b1);
    out.emplace_back(prefix + ".w4", p.w4);
    out.emplace_back(prefix + ".b4", p.b4);
    out.emplace_back(prefix + ".w5", p.w5);
    out.emplace_back(prefix + ".b5", p.b5);
    if (p.in_dim != p.out_dim) out.emplace_back(prefix + ".skip_w", p.skip_w);
    out.emplace_back(prefix + ".ln_gain", p.ln_gain);
    out.emplace_back(prefix + ".ln_bias", p.ln_bias);
}

void grn_set_constant_output(GrnParams& p, double value) {
    for (auto& v : p.ln_gain.leaf_data()) v = 0.0;
    for (auto& v : p.ln_bias.leaf_data()) v = value;
}

StaticEncoderParams make_static_encoder(const StaticEncoderConfig& cfg, ParamInit& init) {
    if (cfg.cardinalities.empty()) throw ConfigError("static encoder: no variables declared");
    for (long c : cfg.cardinalities) {
        if (c < 1) throw ConfigError("static encoder: cardinality must be positive");
    }
    if (cfg.embed_dim <= 0) throw ConfigError("static encoder: embed_dim must be positive");
    StaticEncoderParams p;
    p.cfg = cfg;
    if (p.cfg.mlp_hidden <= 0) p.cfg.mlp_hidden = cfg.embed_dim;
    const long F = static_cast<long>(cfg.cardinalities.size());
    const long E = cfg.embed_dim;
    for (long f = 0; f < F; ++f) {
        p.tables.push_back(init.table(cfg.cardinalities[f], E));
        p.var_grns.push_back(make_grn(E, E, 0, init));
    }
    p.selection_grn = make_grn(F * E, F, 0, init);
    p.fusion_grn = make_grn(E, E, 0, init);
    p.mlp1 = make_linear(F * E, p.cfg.mlp_hidden, init);
    p.mlp2 = make_linear(p.cfg.mlp_hidden, E, init);
    return p;
}

void collect_static_encoder(const std::string& prefix, const StaticEncoderParams& p, ParamMap& out) {
    for (std::size_t f = 0; f < p.tables.size(); ++f) {
        out.emplace_back(prefix + ".table" + std::to_string(f), p.tables[f]);
    }
    if (p.cfg.mode == EncoderMode::sce) {
        for (std::size_t f = 0; f < p.var_grns.size(); ++f) {
            collect_grn(prefix + ".var_grn" + std::to_string(f), p.var_grns[f], out);
        }
        collect_grn(prefix + ".selection_grn", p.selection_grn, out);
        collect_grn(prefix + ".fusion_grn", p.fusion_grn, out);
    } else if (p.cfg.mode == EncoderMode::mlp) {
        collect_linear(prefix + ".mlp1", p.mlp1, out);
        collect_linear(prefix + ".mlp2", p.mlp2, out);
    }
}

Tensor embed_codes(const Tensor& table, const std::vector<long>& codes, long variable_index) {
    const long rows = table.shape()[0];
    const long batch = static_cast<long>(codes.size());
    std::vector<double> onehot(batch * rows, 0.0);
    for (long b = 0; b < batch; ++b) {
        if (codes[b] < 0 || codes[b] >= rows) {
            throw DataError("static variable " + std::to_string(variable_index) + ": code " +
                            std::to_string(codes[b]) + " outside [0, " + std::to_string(rows) + ")");
        }
        onehot[b * rows + codes[b]] = 1.0;
    }
    return matmul(Tensor::from_data({batch, rows}, std::move(onehot)), table);
}

namespace {

std::vector<long> variable_column(const std::vector<long>& codes, long batch, long F, long f) {
    std::vector<long> col(batch);
    for (long b = 0; b < batch; ++b) col[b] = codes[b * F + f];
    return col;
}

void check_codes_shape(const StaticEncoderParams& p, const std::vector<long>& codes, long batch) {
    const long F = static_cast<long>(p.cfg.cardinalities.size());
    if (batch <= 0 || static_cast<long>(codes.size()) != batch * F) {
        throw ShapeError("static encoder: want " + std::to_string(batch) + "x" + std::to_string(F) +
                         " codes, got " + std::to_string(codes.size()));
    }
}

}  // namespace

StaticEncodeResult static_covariate_encode(const StaticEncoderParams& p, const std::vector<long>& codes,
                                           long batch) {
    if (p.cfg.mode != EncoderMode::sce) throw ContractError("static_covariate_encode: encoder mode is not sce");
    check_codes_shape(p, codes, batch);
    const long F = static_cast<long>(p.cfg.cardinalities.size());

    std::vector<Tensor> embeds(F), transformed(F);
    for (long f = 0; f < F; ++f) {
        embeds[f] = embed_codes(p.tables[f], variable_column(codes, batch, F, f), f);
        transformed[f] = grn_apply(p.var_grns[f], embeds[f]);
    }
    const Tensor weights = softmax_lastdim(grn_apply(p.selection_grn, concat(embeds, 1)));  // [B,F]

    const long E = p.cfg.embed_dim;
    std::vector<Tensor> stacked(F);
    for (long f = 0; f < F; ++f) stacked[f] = reshape(transformed[f], {batch, 1, E});
    const Tensor weighted = mul(concat(stacked, 1), reshape(weights, {batch, F, 1}));
    const Tensor combined = reduce_sum(weighted, 1);  // [B,E]
    return {grn_apply(p.fusion_grn, combined), weights};
}

Tensor mlp_encode(const StaticEncoderParams& p, const std::vector<long>& codes, long batch) {
    if (p.cfg.mode != EncoderMode::mlp) throw ContractError("mlp_encode: encoder mode is not mlp");
    check_codes_shape(p, codes, batch);
    const long F = static_cast<long>(p.cfg.cardinalities.size());
    std::vector<Tensor> embeds(F);
    for (long f = 0; f < F; ++f) {
        embeds[f] = embed_codes(p.tables[f], variable_column(codes, batch, F, f), f);
    }
    return linear_apply(p.mlp2, elu(linear_apply(p.mlp1, concat(embeds, 1))));
}

Tensor encode_statics(const StaticEncoderParams& p, const std::vector<long>& codes, long batch) {
    switch (p.cfg.mode) {
        case EncoderMode::sce:
            return static_covariate_encode(p, codes, batch).encoding;
        case EncoderMode::mlp:
            return mlp_encode(p, codes, batch);
        case EncoderMode::none:
            throw ContractError("encode_statics: encoder mode is none");
    }
    throw ContractError("encode_statics: unknown mode");
}

Tensor expand_static(const Tensor& encoding, long seq_len, long heads, long head_dim) {
    if (encoding.ndim() != 2) {
        throw ShapeError("expand_static: encoding must be [B,E], got " + shape_str(encoding.shape()));
    }
    const long B = encoding.shape()[0];
    const long E = encoding.shape()[1];
    if (E != heads * head_dim) {
        throw ConfigError("expand_static: E=" + std::to_string(E) + " != H*D=" +
                          std::to_string(heads) + "*" + std::to_string(head_dim));
    }
    if (seq_len <= 0) throw ConfigError("expand_static: seq_len must be positive");
    return broadcast_to(reshape(encoding, {B, 1, heads, head_dim}), {B, seq_len, heads, head_dim});
}

ImportanceReport feature_importance(const StaticEncoderParams& p, const std::vector<long>& codes,
                                    long n_samples, const std::vector<std::string>& names) {
    if (n_samples <= 0) throw ContractError("feature_importance: empty dataset");
    const long F = static_cast<long>(p.cfg.cardinalities.size());
    if (static_cast<long>(names.size()) != F) {
        throw ContractError("feature_importance: name count does not match variable count");
    }
    NoGradGuard off;
    const StaticEncodeResult enc = static_covariate_encode(p, codes, n_samples);
    ImportanceReport report;
    report.names = names;
    report.mean_weight.assign(F, 0.0);
    for (long b = 0; b < n_samples; ++b) {
        for (long f = 0; f < F; ++f) report.mean_weight[f] += enc.weights.data()[b * F + f];
    }
    for (auto& w : report.mean_weight) w /= static_cast<double>(n_samples);
    return report;
}

std::string importance_to_csv(const ImportanceReport& report) {
    std::string out = "variable_name,mean_weight\n";
    char buf[64];
    for (std::size_t f = 0; f < report.names.size(); ++f) {
        std::snprintf(buf, sizeof(buf), "%.17g", report.mean_weight[f]);
        out += report.names[f] + "," + buf + "\n";
    }
    return out;
}

}  // namespace qkcv
