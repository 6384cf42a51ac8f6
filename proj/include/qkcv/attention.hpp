// Scaled dot-product attention plus the key-modulation family that injects
// a static categorical embedding into the key path, with score extraction
// for heatmap export.
#pragma once

#include <string>

#include "qkcv/static_encoder.hpp"
#include "qkcv/tensor.hpp"

namespace qkcv {

enum class Variant { vanilla, v1, v2, v3 };

const char* variant_name(Variant v);
Variant variant_from_name(const std::string& name);

struct AttentionConfig {
    Variant variant = Variant::vanilla;
    long heads = 1;
    long head_dim = 1;  // d_k
    bool causal_mask = false;
};

// Post-softmax attention weights, [B,H,Lq,Lk]. Every (b,h,i,:) row lies on
// the probability simplex; masked positions are exactly zero.
struct ScoreMatrix {
    Tensor values;
};

enum class ModulationMode { multiplicative, additive };

// The element-wise operand combined with K, [B,L,H,D]. Multiplicative for
// the gated variants (v2 values live in [0,1]); additive for v3. Constant
// across L for a fixed entity by construction.
struct Modulation {
    ModulationMode mode = ModulationMode::multiplicative;
    Tensor values;
};

struct CombineResult {
    Tensor k_mod;     // same shape as K; K itself is never touched
    double divisor;   // score temperature: sqrt(d_k), or sqrt(2*d_k) for v3
    Modulation modulation;
};

// K, C in [B,L,H,D]. The combiner block maps the trailing D width and shares
// weights across batch, time and heads. `inject` is a testing hook that
// bypasses the learned block entirely: its values are used verbatim as the
// final operand.
//   v1: K * g,          divisor sqrt(D)
//   v2: K * sigmoid(g), divisor sqrt(D)   (injected values must be in [0,1])
//   v3: K + g,          divisor sqrt(2*D)
CombineResult combine_key_category(const Tensor& k, const Tensor& c, Variant variant,
                                   const GrnParams* grn, const Modulation* inject = nullptr);

struct AttentionResult {
    Tensor output;  // [B,H,Lq,D]
    ScoreMatrix scores;
};

// Plain softmax(Q K^T / sqrt(D)) V over [B,H,L,D] operands. `mask` (if any)
// broadcasts to [Lq,Lk]; nonzero entries are excluded from attention. A
// query row with every key masked is rejected.
AttentionResult dot_product_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                      const Tensor* mask = nullptr);

// Variant-aware attention over [B,L,H,D] operands (the layout C arrives in).
// vanilla ignores C and reproduces dot_product_attention bit for bit; v1-v3
// combine K with C first and score with the variant's divisor.
//
// score_dropout, when given, is an inverted-dropout keep mask broadcastable
// to the score shape; it multiplies the weights used for the value product
// while the returned ScoreMatrix stays the clean post-softmax distribution.
AttentionResult qkcv_attention(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& c,
                               const AttentionConfig& cfg, const GrnParams* combiner = nullptr,
                               const Modulation* inject = nullptr, const Tensor* mask = nullptr,
                               const Tensor* score_dropout = nullptr);

struct MultiHeadParams {
    LinearParams wq, wk, wv, wo;  // all [E,E]
    GrnParams combiner;           // D -> D, present unless variant is vanilla
    bool has_combiner = false;
};

MultiHeadParams make_multi_head(const AttentionConfig& cfg, ParamInit& init);
void collect_multi_head(const std::string& prefix, const MultiHeadParams& p, Variant variant,
                        ParamMap& out);

struct MultiHeadResult {
    Tensor output;  // [B,L,E]
    ScoreMatrix scores;
};

// x [B,L,E] -> projections -> per-head attention -> head concat -> output
// projection. c_entity [B,E] is expanded across L internally; pass an
// undefined tensor for the vanilla variant.
MultiHeadResult multi_head_qkcv(const Tensor& x, const Tensor& c_entity, const MultiHeadParams& p,
                                const AttentionConfig& cfg, const Tensor* score_dropout = nullptr);

// [Lq,Lk] mask with 1 at strictly-future key positions (j > i).
Tensor causal_mask(long lq, long lk);

// Flat CSV dumps for heatmap rendering: header + one (index, value) row per
// element, 17 significant digits.
std::string scores_to_csv(const ScoreMatrix& scores);
std::string modulation_to_csv(const Modulation& modulation);

}  // namespace qkcv
