// Fine-tuning regimes over a frozen pretrained base: attaching the category
// path, partitioning parameters into trainable and frozen sets, running
// constrained training, and reporting parameter budgets.
#pragma once

#include <string>
#include <vector>

#include "qkcv/forecaster.hpp"

namespace qkcv {

enum class FinetuneMode { pl, fp, pl_qkcv, fp_qkcv, compressor_mlp, compressor_sce };

const char* finetune_mode_name(FinetuneMode m);
FinetuneMode finetune_mode_from_name(const std::string& name);

// Disjoint cover of the model's parameter names; counts are element totals.
struct FreezePolicy {
    FinetuneMode mode = FinetuneMode::pl;
    std::vector<std::string> trainable;
    std::vector<std::string> frozen;
    long trainable_n = 0;
    long frozen_n = 0;
    long total_n = 0;
};

// A plain forecaster (variant=vanilla, encoder=none) standing in for a
// frozen foundation model; the hash pins the exact weights.
struct PretrainedBase {
    Model model;
    unsigned long long content_hash = 0;
};

PretrainedBase pretrain_base(const ModelConfig& cfg, unsigned long init_seed,
                             const WindowSet& train_set, const WindowSet& val_set,
                             const TrainConfig& tc);
PretrainedBase base_from_checkpoint(const std::string& path);

// Copies the base bitwise into an augmented model with an encoder and
// per-layer combiner blocks. The combiners start as constants chosen so the
// augmented forward reproduces the base: all-ones modulation for v1, a
// sigmoid pre-image of 1-1e-3 for v2, zero addend for v3 (which still
// rescores with the wider divisor).
Model attach_qkcv(const PretrainedBase& base, const std::vector<long>& cardinalities,
                  EncoderMode enc_mode, Variant variant, unsigned long seed);

// Compressor ablation: encoder output concatenated onto every input patch.
// The widened input projection keeps the base rows and zero-fills the new
// ones, so the initial forward also reproduces the base.
Model attach_compressor(const PretrainedBase& base, const std::vector<long>& cardinalities,
                        EncoderMode enc_mode, unsigned long seed);

FreezePolicy partition_parameters(const Model& m, FinetuneMode mode);

struct FinetuneReport {
    FinetuneMode mode = FinetuneMode::pl;
    Variant variant = Variant::vanilla;
    long trainable_params = 0;
    long total_params = 0;
    long long optimizer_state_bytes = 0;  // Adam moments for the trainable set
    MetricsReport final;
    TrainHistory history;
};

// Trains only the policy's trainable set, verifies the frozen set stayed
// bitwise identical and outside the tape, then scores the test split.
FinetuneReport finetune_run(Model& m, const FreezePolicy& policy, const WindowSet& train_set,
                            const WindowSet& val_set, const WindowSet& test_set,
                            const TrainConfig& tc);

std::string finetune_report_csv(const std::vector<FinetuneReport>& rows);

}  // namespace qkcv
