// Minimal multi-head transformer forecaster hosting the category-aware
// attention stack: patched input projection, n_layers of attention + gated
// feed-forward with residual normalization, quantile output heads, Adam
// training with early stopping, and the evaluation metrics.
#pragma once

#include <random>
#include <string>
#include <utility>
#include <vector>

#include "qkcv/attention.hpp"
#include "qkcv/static_encoder.hpp"

namespace qkcv {

struct ModelConfig {
    long input_len = 16;  // L_in, raw steps consumed per window
    long horizon = 8;     // L_out, steps predicted
    long embed_dim = 32;  // E = heads * head_dim
    long heads = 4;
    long head_dim = 8;
    long n_layers = 2;
    long patch_len = 1;   // P, input tokens = input_len / patch_len
    long ff_hidden = 0;   // 0 = 2*embed_dim
    Variant variant = Variant::vanilla;
    EncoderMode encoder = EncoderMode::none;
    std::vector<long> cardinalities;  // static variables, may be empty with encoder=none
    std::vector<double> quantiles = {0.5, 0.9};
    double dropout = 0.1;
    bool causal = false;
    // Compressor route: encoder output concatenated to every input patch
    // instead of entering the attention layers. Requires variant=vanilla.
    bool statics_to_input = false;
    // Per-layer toggle for the category path; empty = every layer. Entries
    // are 0/1 flags, size n_layers when present.
    std::vector<int> qkcv_layers;

    long tokens() const { return input_len / patch_len; }
    long ff_width() const { return ff_hidden > 0 ? ff_hidden : 2 * embed_dim; }
};

void validate_config(const ModelConfig& cfg);

// One optimization / evaluation slice of windows.
struct ForecastBatch {
    Tensor history;              // [B, L_in]
    std::vector<long> codes;     // row-major [B, F] static codes
    std::vector<long> entities;  // [B] entity index, drives target scaling
    Tensor future;               // [B, L_out], undefined for pure inference
};

// Flat window storage produced by the data pipeline.
struct WindowSet {
    long input_len = 0;
    long horizon = 0;
    long n_statics = 0;
    std::vector<double> history;  // [N, input_len]
    std::vector<double> future;   // [N, horizon]
    std::vector<long> codes;      // [N, n_statics]
    std::vector<long> entities;   // [N]

    long size() const { return static_cast<long>(entities.size()); }
    void push(const double* h, const double* f, const long* c, long entity);
};

ForecastBatch gather_batch(const WindowSet& set, const std::vector<long>& idx);

// Per-entity affine target scaling fitted on the training split. Empty
// tables act as the identity so an untrained model can be evaluated.
struct TargetScaler {
    std::vector<double> mean;
    std::vector<double> scale;  // floored at 1e-8 -> 1.0

    bool fitted() const { return !mean.empty(); }
    double entity_mean(long e) const;
    double entity_scale(long e) const;
};

TargetScaler fit_target_scaler(const WindowSet& train_set);

struct LayerParams {
    MultiHeadParams attn;
    Tensor ln1_gain, ln1_bias;
    LinearParams ff1, ff2;
    Tensor ln2_gain, ln2_bias;
};

// Copying a Model aliases its parameter storage (tensors share buffers);
// reload a checkpoint or attach from a base for independent weights.
struct Model {
    ModelConfig cfg;
    unsigned long seed = 0;
    bool has_encoder = false;
    StaticEncoderParams encoder;
    LinearParams patch_proj;  // [P (+E when statics_to_input), E]
    std::vector<LayerParams> layers;
    LinearParams head;  // [tokens*E, horizon*|quantiles|]
    TargetScaler scaler;

    // Named registry over every trainable tensor; handles share storage
    // with the fields above.
    ParamMap params() const;
};

Model build_model(const ModelConfig& cfg, unsigned long seed);

struct ForwardResult {
    Tensor pred;                       // [B, horizon, |quantiles|]
    std::vector<ScoreMatrix> scores;   // per layer
    Tensor selection_weights;          // [B, F] when the encoder selects, else undefined
};

// Forward pass in scaled target space. train_mode enables dropout, which
// draws its masks from dropout_rng; evaluation passes ignore both.
ForwardResult model_forward_scaled(const Model& m, const ForecastBatch& batch, bool train_mode = false,
                                   std::mt19937_64* dropout_rng = nullptr);

// Forward pass in raw target units: scales the history per entity, runs the
// network, and inverts the scaling on the predictions.
ForwardResult model_forward(const Model& m, const ForecastBatch& batch);

// Future values mapped into the model's scaled space, aligned with
// model_forward_scaled output.
Tensor scale_targets(const Model& m, const ForecastBatch& batch);

// Mean over elements of the summed pinball losses: pred [B,L,Qn], y [B,L].
Tensor quantile_loss(const Tensor& pred, const Tensor& y, const std::vector<double>& quantiles);

struct MetricsReport {
    double wpe = 0.0;
    double p50 = 0.0;
    double p90 = 0.0;
    double mae = 0.0;
    std::string note;  // set when a metric is undefined (all-zero targets)
};

MetricsReport metrics(const Tensor& pred_p50, const Tensor& pred_p90, const Tensor& y);

struct TrainConfig {
    double lr = 1e-3;
    long max_steps = 1000;
    long batch_size = 256;
    unsigned long seed = 0;
    long patience = 5;    // early-stop patience in validation evaluations
    long eval_every = 25;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct TrainHistory {
    std::vector<double> train_loss;            // one entry per step
    std::vector<std::pair<long, double>> val;  // (step, validation p50)
    long best_step = -1;
    double best_val = 0.0;
    bool early_stopped = false;
};

struct AdamState {
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
    long t = 0;
};

AdamState make_adam_state(const ParamMap& trainable);
void adam_step(ParamMap& trainable, const GradMap& grads, AdamState& st, const TrainConfig& cfg);

// Minibatch Adam over `trainable` (default: every model parameter). Fits the
// target scaler on train_set, shuffles windows each epoch from cfg.seed,
// evaluates on val_set every eval_every steps, and restores the parameters
// of the best validation p50. Divergence aborts with the step index and the
// last finite loss.
TrainHistory train(Model& m, const WindowSet& train_set, const WindowSet& val_set,
                   const TrainConfig& cfg, const ParamMap* trainable = nullptr);

// Gradient-free sweep over the whole split in fixed-size batches; raw-unit
// metrics. Empty split is a contract error.
MetricsReport evaluate(const Model& m, const WindowSet& set);

}  // namespace qkcv
