// Static categorical pipeline: embedding tables, gated residual networks,
// variable selection, and the expansion that aligns an entity encoding with
// the key tensor of the attention stack.
#pragma once

#include <string>
#include <vector>

#include "qkcv/params.hpp"
#include "qkcv/tensor.hpp"

namespace qkcv {

// Gated residual block y = LayerNorm(skip(a) + GLU(W1 eta + b1)) with
// eta = ELU(W2 a + W3 c + b2) and GLU(x) = sigmoid(W4 x + b4) * (W5 x + b5).
// The normalization carries a learned gain and bias; the skip is the
// identity when widths agree and a bias-free linear map otherwise.
struct GrnParams {
    long in_dim = 0;
    long out_dim = 0;
    long ctx_dim = 0;  // 0 = unconditioned
    Tensor w2, b2;
    Tensor w3;  // context projection, bias shared with b2
    Tensor w1, b1;
    Tensor w4, b4;
    Tensor w5, b5;
    Tensor skip_w;  // only when in_dim != out_dim
    Tensor ln_gain, ln_bias;
};

GrnParams make_grn(long in_dim, long out_dim, long ctx_dim, ParamInit& init);
Tensor grn_apply(const GrnParams& p, const Tensor& a);
Tensor grn_apply(const GrnParams& p, const Tensor& a, const Tensor& context);
void collect_grn(const std::string& prefix, const GrnParams& p, ParamMap& out);

// Overwrites the normalization affine so the block emits `value` everywhere,
// regardless of input. Used to splice a new path into a trained model
// without disturbing its behavior.
void grn_set_constant_output(GrnParams& p, double value);

enum class EncoderMode { sce, mlp, none };

struct StaticEncoderConfig {
    std::vector<long> cardinalities;  // declared per variable, unknown slot included
    long embed_dim = 0;               // E, shared by every variable
    EncoderMode mode = EncoderMode::sce;
    long mlp_hidden = 0;  // defaults to embed_dim when 0
};

struct StaticEncoderParams {
    StaticEncoderConfig cfg;
    std::vector<Tensor> tables;       // [cardinality_f, E]
    std::vector<GrnParams> var_grns;  // E -> E, one per variable
    GrnParams selection_grn;          // F*E -> F
    GrnParams fusion_grn;             // E -> E
    LinearParams mlp1, mlp2;          // F*E -> hidden -> E
};

StaticEncoderParams make_static_encoder(const StaticEncoderConfig& cfg, ParamInit& init);
void collect_static_encoder(const std::string& prefix, const StaticEncoderParams& p, ParamMap& out);

// One-hot lookup so gradient reaches exactly the rows present in `codes`.
Tensor embed_codes(const Tensor& table, const std::vector<long>& codes, long variable_index);

struct StaticEncodeResult {
    Tensor encoding;  // [B, E]
    Tensor weights;   // [B, F] selection weights, rows on the simplex
};

// codes is row-major [batch x F]. Variable selection weights come from a
// softmax over a width-F gated block fed the flattened per-variable
// embeddings; the weighted sum of per-variable blocks is fused by one more
// gated block to form the entity encoding.
StaticEncodeResult static_covariate_encode(const StaticEncoderParams& p, const std::vector<long>& codes,
                                           long batch);

// Compressor ablation: embeddings concatenated, two affine layers with an
// ELU between, no selection weights.
Tensor mlp_encode(const StaticEncoderParams& p, const std::vector<long>& codes, long batch);

// Dispatches on p.cfg.mode.
Tensor encode_statics(const StaticEncoderParams& p, const std::vector<long>& codes, long batch);

// [B,E] -> [B,L,H,D] with result[b,l,h,d] = encoding[b, h*D+d] for every l.
Tensor expand_static(const Tensor& encoding, long seq_len, long heads, long head_dim);

struct ImportanceReport {
    std::vector<std::string> names;
    std::vector<double> mean_weight;  // per variable, averaged over samples
};

// Mean selection weight per variable over a dataset of code rows.
ImportanceReport feature_importance(const StaticEncoderParams& p, const std::vector<long>& codes,
                                    long n_samples, const std::vector<std::string>& names);

std::string importance_to_csv(const ImportanceReport& report);

}  // namespace qkcv
