#include "qkcv/finetune.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <unordered_map>
#include <unordered_set>

#include "qkcv/checkpoint.hpp"
#include "qkcv/errors.hpp"

namespace qkcv {

namespace {

bool starts_with(const std::string& s, const char* prefix) { return s.rfind(prefix, 0) == 0; }

bool is_patching(const std::string& name) { return starts_with(name, "patch_proj"); }
bool is_head(const std::string& name) { return starts_with(name, "head"); }
bool is_encoder(const std::string& name) { return starts_with(name, "encoder"); }
bool is_combiner(const std::string& name) { return name.find(".attn.combiner") != std::string::npos; }

void copy_named(const ParamMap& src, const ParamMap& dst, const std::string& name) {
    Tensor from, to;
    for (const auto& [n, p] : src) {
        if (n == name) from = p;
    }
    for (const auto& [n, p] : dst) {
        if (n == name) to = p;
    }
    if (!from.defined() || !to.defined()) {
        throw InternalError("attach: parameter " + name + " missing on one side of the copy");
    }
    if (!shapes_equal(from.shape(), to.shape())) {
        throw InternalError("attach: parameter " + name + " changed shape across the attach");
    }
    to.leaf_data() = from.data();
}

std::string fmt17(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace

const char* finetune_mode_name(FinetuneMode m) {
    switch (m) {
        case FinetuneMode::pl: return "PL";
        case FinetuneMode::fp: return "FP";
        case FinetuneMode::pl_qkcv: return "PL+QKCV";
        case FinetuneMode::fp_qkcv: return "FP+QKCV";
        case FinetuneMode::compressor_mlp: return "compressor-MLP";
        case FinetuneMode::compressor_sce: return "compressor-SCE";
    }
    return "?";
}

FinetuneMode finetune_mode_from_name(const std::string& name) {
    if (name == "PL") return FinetuneMode::pl;
    if (name == "FP") return FinetuneMode::fp;
    if (name == "PL+QKCV") return FinetuneMode::pl_qkcv;
    if (name == "FP+QKCV") return FinetuneMode::fp_qkcv;
    if (name == "compressor-MLP") return FinetuneMode::compressor_mlp;
    if (name == "compressor-SCE") return FinetuneMode::compressor_sce;
    throw ConfigError("unknown fine-tune mode: " + name);
}

PretrainedBase pretrain_base(const ModelConfig& cfg, unsigned long init_seed,
                             const WindowSet& train_set, const WindowSet& val_set,
                             const TrainConfig& tc) {
    if (cfg.variant != Variant::vanilla || cfg.encoder != EncoderMode::none) {
        throw ContractError("pretrain_base: the base must be variant=vanilla with no encoder");
    }
    PretrainedBase base;
    base.model = build_model(cfg, init_seed);
    train(base.model, train_set, val_set, tc);
    base.content_hash = model_content_hash(base.model);
    return base;
}

PretrainedBase base_from_checkpoint(const std::string& path) {
    PretrainedBase base;
    base.model = load_model(path);
    if (base.model.cfg.variant != Variant::vanilla || base.model.cfg.encoder != EncoderMode::none) {
        throw DataError("base checkpoint " + path + " already carries a category path");
    }
    base.content_hash = model_content_hash(base.model);
    return base;
}

Model attach_qkcv(const PretrainedBase& base, const std::vector<long>& cardinalities,
                  EncoderMode enc_mode, Variant variant, unsigned long seed) {
    if (variant == Variant::vanilla) {
        throw ContractError("attach_qkcv: vanilla leaves nothing to attach");
    }
    if (enc_mode == EncoderMode::none) {
        throw ContractError("attach_qkcv: the category path needs an encoder");
    }
    const ModelConfig& bc = base.model.cfg;
    if (bc.variant != Variant::vanilla || bc.encoder != EncoderMode::none) {
        throw ContractError("attach_qkcv: base already carries a category path");
    }

    ModelConfig cfg = bc;
    cfg.variant = variant;
    cfg.encoder = enc_mode;
    cfg.cardinalities = cardinalities;
    Model out = build_model(cfg, seed);
    out.scaler = base.model.scaler;

    const ParamMap src = base.model.params();
    const ParamMap dst = out.params();
    for (const auto& [name, p] : src) {
        (void)p;
        copy_named(src, dst, name);
    }

    // Constant combiner output keeps the attached path silent at first:
    // multiplicative variants want modulation 1 (v2 can only reach 1-eps
    // through its sigmoid), the additive variant wants 0.
    double at_init = 0.0;
    if (variant == Variant::v1) {
        at_init = 1.0;
    } else if (variant == Variant::v2) {
        const double eps = 1e-3;
        at_init = std::log((1.0 - eps) / eps);
    }
    for (auto& layer : out.layers) grn_set_constant_output(layer.attn.combiner, at_init);
    return out;
}

Model attach_compressor(const PretrainedBase& base, const std::vector<long>& cardinalities,
                        EncoderMode enc_mode, unsigned long seed) {
    if (enc_mode == EncoderMode::none) {
        throw ContractError("attach_compressor: pick the MLP or selection encoder");
    }
    const ModelConfig& bc = base.model.cfg;
    if (bc.variant != Variant::vanilla || bc.encoder != EncoderMode::none) {
        throw ContractError("attach_compressor: base already carries a category path");
    }

    ModelConfig cfg = bc;
    cfg.encoder = enc_mode;
    cfg.cardinalities = cardinalities;
    cfg.statics_to_input = true;
    Model out = build_model(cfg, seed);
    out.scaler = base.model.scaler;

    const ParamMap src = base.model.params();
    const ParamMap dst = out.params();
    for (const auto& [name, p] : src) {
        (void)p;
        if (name == "patch_proj.w") continue;
        copy_named(src, dst, name);
    }

    // Widened projection: base rows verbatim, encoder rows zero, so the
    // concatenated statics are invisible until training moves them.
    const Tensor bw = find_param(src, "patch_proj.w");
    Tensor ww = find_param(dst, "patch_proj.w");
    const long p_len = bc.patch_len;
    const long e = bc.embed_dim;
    std::vector<double>& wd = ww.leaf_data();
    std::fill(wd.begin(), wd.end(), 0.0);
    // named tensor keeps the source buffer alive across the row copy
    const std::vector<double>& bd = bw.data();
    for (long r = 0; r < p_len; ++r) {
        for (long c = 0; c < e; ++c) wd[r * e + c] = bd[r * e + c];
    }
    return out;
}

FreezePolicy partition_parameters(const Model& m, FinetuneMode mode) {
    const ModelConfig& cfg = m.cfg;
    const bool attached = cfg.variant != Variant::vanilla;
    switch (mode) {
        case FinetuneMode::pl:
        case FinetuneMode::fp:
            if (attached || m.has_encoder) {
                throw ContractError(std::string(finetune_mode_name(mode)) +
                                    " applies to the plain base; this model has a category path");
            }
            break;
        case FinetuneMode::pl_qkcv:
        case FinetuneMode::fp_qkcv:
            if (!attached || !m.has_encoder || cfg.statics_to_input) {
                throw ContractError(std::string(finetune_mode_name(mode)) +
                                    " needs the attention-path category attachment");
            }
            break;
        case FinetuneMode::compressor_mlp:
            if (!cfg.statics_to_input || cfg.encoder != EncoderMode::mlp) {
                throw ContractError("compressor-MLP needs statics_to_input with the MLP encoder");
            }
            break;
        case FinetuneMode::compressor_sce:
            if (!cfg.statics_to_input || cfg.encoder != EncoderMode::sce) {
                throw ContractError("compressor-SCE needs statics_to_input with the selection encoder");
            }
            break;
    }

    const bool all_trainable = mode == FinetuneMode::fp || mode == FinetuneMode::fp_qkcv;
    FreezePolicy policy;
    policy.mode = mode;
    for (const auto& [name, p] : m.params()) {
        bool trainable = all_trainable;
        if (!trainable) {
            trainable = is_patching(name) || is_head(name);
            if (mode == FinetuneMode::pl_qkcv) trainable = trainable || is_encoder(name) || is_combiner(name);
            if (mode == FinetuneMode::compressor_mlp || mode == FinetuneMode::compressor_sce) {
                trainable = trainable || is_encoder(name);
            }
        }
        (trainable ? policy.trainable : policy.frozen).push_back(name);
        (trainable ? policy.trainable_n : policy.frozen_n) += p.numel();
        policy.total_n += p.numel();
    }
    return policy;
}

FinetuneReport finetune_run(Model& m, const FreezePolicy& policy, const WindowSet& train_set,
                            const WindowSet& val_set, const WindowSet& test_set,
                            const TrainConfig& tc) {
    const ParamMap all = m.params();
    std::unordered_map<std::string, Tensor> by_name;
    for (const auto& [name, p] : all) by_name.emplace(name, p);

    std::unordered_set<std::string> seen;
    for (const auto& lists : {&policy.trainable, &policy.frozen}) {
        for (const std::string& name : *lists) {
            if (!by_name.count(name)) {
                throw InternalError("freeze policy names unknown parameter " + name);
            }
            if (!seen.insert(name).second) {
                throw InternalError("freeze policy lists parameter " + name + " twice");
            }
        }
    }
    if (seen.size() != all.size()) {
        throw InternalError("freeze policy does not cover every model parameter");
    }

    std::vector<std::pair<std::string, unsigned long long>> frozen_prints;
    frozen_prints.reserve(policy.frozen.size());
    for (const std::string& name : policy.frozen) {
        Tensor& p = by_name.at(name);
        frozen_prints.emplace_back(name, tensor_fingerprint(p));
        p.set_requires_grad(false);
    }

    ParamMap trainable;
    for (const auto& [name, p] : all) {
        if (std::find(policy.frozen.begin(), policy.frozen.end(), name) == policy.frozen.end()) {
            trainable.emplace_back(name, p);
        }
    }

    FinetuneReport report;
    report.mode = policy.mode;
    report.variant = m.cfg.variant;
    report.trainable_params = policy.trainable_n;
    report.total_params = policy.total_n;
    report.optimizer_state_bytes =
        static_cast<long long>(policy.trainable_n) * 2 * static_cast<long long>(sizeof(double));

    report.history = train(m, train_set, val_set, tc, &trainable);

    // One audited backward: a frozen parameter with a gradient buffer means
    // the freeze never reached the tape.
    {
        std::vector<long> idx;
        const long take = std::min<long>(train_set.size(), tc.batch_size);
        for (long i = 0; i < take; ++i) idx.push_back(i);
        const ForecastBatch batch = gather_batch(train_set, idx);
        const ForwardResult fr = model_forward_scaled(m, batch, false, nullptr);
        const Tensor loss = quantile_loss(fr.pred, scale_targets(m, batch), m.cfg.quantiles);
        std::vector<Tensor> every;
        for (const auto& [name, p] : all) {
            (void)name;
            every.push_back(p);
        }
        const GradMap g = grad_of(loss, every);
        for (const std::string& name : policy.frozen) {
            if (g.materialized(by_name.at(name))) {
                throw InternalError("tape leak: gradient materialized for frozen parameter " + name);
            }
        }
    }

    for (const auto& [name, print] : frozen_prints) {
        if (tensor_fingerprint(by_name.at(name)) != print) {
            throw InternalError("frozen parameter " + name + " changed during the fine-tune run");
        }
    }
    for (const std::string& name : policy.frozen) by_name.at(name).set_requires_grad(true);

    report.final = evaluate(m, test_set);
    return report;
}

std::string finetune_report_csv(const std::vector<FinetuneReport>& rows) {
    std::string out = "mode,variant,trainable_params,total_params,wpe,mae\n";
    for (const FinetuneReport& r : rows) {
        out += finetune_mode_name(r.mode);
        out += ",";
        out += variant_name(r.variant);
        out += "," + std::to_string(r.trainable_params);
        out += "," + std::to_string(r.total_params);
        out += "," + fmt17(r.final.wpe);
        out += "," + fmt17(r.final.mae);
        out += "\n";
    }
    return out;
}

}  // namespace qkcv
