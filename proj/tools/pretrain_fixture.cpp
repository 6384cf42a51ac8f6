// Builds the committed pretrained-base checkpoint: a plain forecaster
// (variant=vanilla, no encoder) trained 2000 steps on category-free
// synthetic series. Rerunning reproduces the file byte for byte.
#include <cmath>
#include <cstdio>
#include <random>
#include <vector>

#include "qkcv/checkpoint.hpp"
#include "qkcv/finetune.hpp"

namespace {

constexpr double kTau = 6.283185307179586476925286766559;

// Per-entity random sine + trend + noise; nothing ties entities together,
// so categories carry no information the base could have absorbed.
void build_panels(qkcv::WindowSet& train_set, qkcv::WindowSet& val_set) {
    const long n_entities = 8;
    const long t_len = 120;
    const long l_in = 16;
    const long l_out = 4;
    const long train_end = 100;

    train_set.input_len = val_set.input_len = l_in;
    train_set.horizon = val_set.horizon = l_out;
    train_set.n_statics = val_set.n_statics = 0;

    std::mt19937_64 rng(20240817);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::normal_distribution<double> noise(0.0, 0.4);
    for (long e = 0; e < n_entities; ++e) {
        const double base = 6.0 + 14.0 * u(rng);
        const double amp = 1.0 + 3.0 * u(rng);
        const double period = 10.0 + 2.0 * static_cast<double>(rng() % 3);
        const double phase = 12.0 * u(rng);
        const double slope = -0.03 + 0.06 * u(rng);
        std::vector<double> y(t_len);
        for (long t = 0; t < t_len; ++t) {
            y[t] = base + amp * std::sin(kTau * (t + phase) / period) + slope * t + noise(rng);
        }
        for (long start = 0; start + l_in + l_out <= t_len; ++start) {
            const long fut_begin = start + l_in;
            if (fut_begin + l_out <= train_end) {
                train_set.push(y.data() + start, y.data() + fut_begin, nullptr, e);
            } else if (fut_begin >= train_end) {
                val_set.push(y.data() + start, y.data() + fut_begin, nullptr, e);
            }
            // windows whose future straddles the boundary are dropped
        }
    }
}

}  // namespace

int main(int argc, char** argv) {
    const char* path = argc > 1 ? argv[1] : "fixtures/pretrained_base.ckpt";

    qkcv::ModelConfig cfg;
    cfg.input_len = 16;
    cfg.horizon = 4;
    cfg.embed_dim = 32;
    cfg.heads = 4;
    cfg.head_dim = 8;
    cfg.n_layers = 2;
    cfg.patch_len = 2;

    qkcv::WindowSet train_set, val_set;
    build_panels(train_set, val_set);

    qkcv::TrainConfig tc;
    tc.max_steps = 2000;
    tc.batch_size = 64;
    tc.seed = 7;
    tc.eval_every = 100;
    tc.patience = 1000;  // the fixture runs its full budget

    const qkcv::PretrainedBase base = qkcv::pretrain_base(cfg, 424242, train_set, val_set, tc);
    qkcv::save_model(path, base.model);

    const qkcv::MetricsReport r = qkcv::evaluate(base.model, val_set);
    std::printf("wrote %s\n", path);
    std::printf("val wpe %.6f  p50 %.6f  p90 %.6f  hash %llx\n", r.wpe, r.p50, r.p90,
                base.content_hash);
    return 0;
}
