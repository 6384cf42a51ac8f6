#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "qkcv/errors.hpp"
#include "qkcv/forecaster.hpp"
#include "qkcv/gradcheck.hpp"

using namespace qkcv;

namespace {

// Sine panel with a per-category profile and per-entity trend; enough
// structure to memorize and, with codes attached, a cross-entity category
// signal the encoder can exploit.
WindowSet make_panel(unsigned long seed, long n_entities, long n_cats, long t_len, long l_in,
                     long l_out, double noise_sd, bool with_codes) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(0.0, noise_sd);
    WindowSet set;
    set.input_len = l_in;
    set.horizon = l_out;
    set.n_statics = with_codes ? 1 : 0;
    for (long e = 0; e < n_entities; ++e) {
        const long cat = e % n_cats;
        const double base = 8.0 + 3.0 * cat;
        const double amp = 1.5 + 0.8 * cat;
        const double phase = 1.7 * cat;
        const double slope = 0.01 * (e % 3);
        std::vector<double> y(t_len);
        for (long t = 0; t < t_len; ++t) {
            y[t] = base + amp * std::sin(2.0 * 3.14159265358979323846 * (t + phase) / 12.0) +
                   slope * t + noise(rng);
        }
        const long code = cat;
        for (long start = 0; start + l_in + l_out <= t_len; ++start) {
            set.push(y.data() + start, y.data() + start + l_in, &code, e);
        }
    }
    return set;
}

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.input_len = 8;
    cfg.horizon = 2;
    cfg.embed_dim = 8;
    cfg.heads = 2;
    cfg.head_dim = 4;
    cfg.n_layers = 1;
    cfg.dropout = 0.1;
    return cfg;
}

// Closed-form parameter counts, kept in sync with the architecture docs.
long grn_count(long n, long m, long ctx) {
    long c = n * m + 3 * m * m + 6 * m + ctx * m;
    if (n != m) c += n * m;
    return c;
}

long sce_count(const std::vector<long>& cards, long e) {
    const long f = static_cast<long>(cards.size());
    long c = 0;
    for (long card : cards) c += card * e;
    c += f * grn_count(e, e, 0);
    c += grn_count(f * e, f, 0);
    c += grn_count(e, e, 0);
    return c;
}

long model_count(const ModelConfig& cfg) {
    const long e = cfg.embed_dim;
    const long in_w = cfg.patch_len + (cfg.statics_to_input ? e : 0);
    long c = 0;
    if (cfg.encoder == EncoderMode::sce) c += sce_count(cfg.cardinalities, e);
    c += in_w * e + e;
    long layer = 4 * (e * e + e) + 4 * e + e * cfg.ff_width() + cfg.ff_width() +
                 cfg.ff_width() * e + e;
    if (cfg.variant != Variant::vanilla) layer += grn_count(cfg.head_dim, cfg.head_dim, 0);
    c += cfg.n_layers * layer;
    const long qn = static_cast<long>(cfg.quantiles.size());
    c += cfg.tokens() * e * cfg.horizon * qn + cfg.horizon * qn;
    return c;
}

bool params_bitwise_equal(const ParamMap& a, const ParamMap& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i].first != b[i].first) return false;
        const Tensor& ta = a[i].second;
        const Tensor& tb = b[i].second;
        if (!shapes_equal(ta.shape(), tb.shape())) return false;
        for (long j = 0; j < ta.numel(); ++j) {
            if (ta.data()[j] != tb.data()[j]) return false;
        }
    }
    return true;
}

}  // namespace

TEST_CASE("config validation rejects inconsistent settings") {
    ModelConfig cfg = tiny_config();
    CHECK_NOTHROW(validate_config(cfg));
    SUBCASE("embed dim must factor into heads") {
        cfg.embed_dim = 9;
        CHECK_THROWS_AS(validate_config(cfg), ConfigError);
    }
    SUBCASE("quantiles inside the open interval") {
        cfg.quantiles = {0.5, 1.0};
        CHECK_THROWS_AS(validate_config(cfg), ConfigError);
    }
    SUBCASE("quantiles strictly increasing") {
        cfg.quantiles = {0.9, 0.5};
        CHECK_THROWS_AS(validate_config(cfg), ConfigError);
    }
    SUBCASE("category variants need an encoder") {
        cfg.variant = Variant::v1;
        CHECK_THROWS_AS(validate_config(cfg), ConfigError);
    }
    SUBCASE("input compressor route is vanilla only") {
        cfg.encoder = EncoderMode::mlp;
        cfg.cardinalities = {4};
        cfg.statics_to_input = true;
        cfg.variant = Variant::v2;
        CHECK_THROWS_AS(validate_config(cfg), ConfigError);
    }
    SUBCASE("patch length must divide the input length") {
        cfg.patch_len = 3;
        CHECK_THROWS_AS(validate_config(cfg), ConfigError);
    }
    SUBCASE("layer toggle mask must cover every layer") {
        cfg.encoder = EncoderMode::sce;
        cfg.cardinalities = {4};
        cfg.variant = Variant::v1;
        cfg.qkcv_layers = {1, 0};
        CHECK_THROWS_AS(validate_config(cfg), ConfigError);
    }
}

TEST_CASE("same seed builds bitwise-identical parameters") {
    ModelConfig cfg = tiny_config();
    cfg.encoder = EncoderMode::sce;
    cfg.cardinalities = {5, 3};
    cfg.variant = Variant::v2;
    const Model a = build_model(cfg, 17);
    const Model b = build_model(cfg, 17);
    CHECK(params_bitwise_equal(a.params(), b.params()));
    const Model c = build_model(cfg, 18);
    CHECK_FALSE(params_bitwise_equal(a.params(), c.params()));
}

TEST_CASE("plain model carries no category-path weights") {
    const Model m = build_model(tiny_config(), 3);
    for (const auto& [name, p] : m.params()) {
        (void)p;
        CHECK(name.find("encoder") == std::string::npos);
        CHECK(name.find("combiner") == std::string::npos);
    }
}

TEST_CASE("layer toggle drops the combiner only where disabled") {
    ModelConfig cfg = tiny_config();
    cfg.n_layers = 2;
    cfg.encoder = EncoderMode::sce;
    cfg.cardinalities = {4};
    cfg.variant = Variant::v1;
    cfg.qkcv_layers = {1, 0};
    const Model m = build_model(cfg, 5);
    bool l0 = false, l1 = false;
    for (const auto& [name, p] : m.params()) {
        (void)p;
        if (name.find("layer.0.attn.combiner") != std::string::npos) l0 = true;
        if (name.find("layer.1.attn.combiner") != std::string::npos) l1 = true;
    }
    CHECK(l0);
    CHECK_FALSE(l1);

    const WindowSet panel = make_panel(2, 4, 2, 24, cfg.input_len, cfg.horizon, 0.3, true);
    const std::vector<long> idx = {0, 1, 2};
    const ForwardResult r = model_forward(m, gather_batch(panel, idx));
    CHECK(r.pred.shape() == Shape{3, cfg.horizon, 2});
}

TEST_CASE("parameter count matches the closed-form formula") {
    ModelConfig cfg;
    cfg.input_len = 16;
    cfg.horizon = 4;
    cfg.embed_dim = 32;
    cfg.heads = 4;
    cfg.head_dim = 8;
    cfg.n_layers = 2;
    cfg.encoder = EncoderMode::sce;
    cfg.cardinalities = {6, 5, 4};
    cfg.variant = Variant::v1;
    const Model m = build_model(cfg, 0);
    const long actual = param_count(m.params());
    CHECK(actual == model_count(cfg));
    CHECK(actual == 40117);

    SUBCASE("vanilla ablation removes exactly the category path") {
        ModelConfig plain = cfg;
        plain.encoder = EncoderMode::none;
        plain.cardinalities.clear();
        plain.variant = Variant::vanilla;
        const long base = param_count(build_model(plain, 0).params());
        CHECK(base == model_count(plain));
        CHECK(actual - base == sce_count(cfg.cardinalities, 32) + 2 * grn_count(8, 8, 0));
    }
}

TEST_CASE("pinball loss hits the hand-computed values") {
    SUBCASE("exact forecast is zero loss") {
        const Tensor pred = Tensor::from_data({1, 2, 2}, {3.0, 3.0, -1.0, -1.0});
        const Tensor y = Tensor::from_data({1, 2}, {3.0, -1.0});
        CHECK(quantile_loss(pred, y, {0.5, 0.9}).item() == 0.0);
    }
    SUBCASE("median pinball is half the absolute error") {
        const Tensor pred = Tensor::from_data({1, 1, 1}, {0.0});
        const Tensor y = Tensor::from_data({1, 1}, {2.0});
        CHECK(quantile_loss(pred, y, {0.5}).item() == doctest::Approx(1.0).epsilon(1e-12));
    }
    SUBCASE("q=0.9 penalizes under- and over-forecast asymmetrically") {
        const Tensor under = Tensor::from_data({1, 1, 1}, {0.0});
        const Tensor y1 = Tensor::from_data({1, 1}, {1.0});
        CHECK(quantile_loss(under, y1, {0.9}).item() == doctest::Approx(0.9).epsilon(1e-12));
        const Tensor over = Tensor::from_data({1, 1, 1}, {1.0});
        const Tensor y0 = Tensor::from_data({1, 1}, {0.0});
        CHECK(quantile_loss(over, y0, {0.9}).item() == doctest::Approx(0.1).epsilon(1e-12));
    }
    SUBCASE("quantile outside the open interval is rejected") {
        const Tensor pred = Tensor::from_data({1, 1, 1}, {0.0});
        const Tensor y = Tensor::from_data({1, 1}, {1.0});
        CHECK_THROWS_AS(quantile_loss(pred, y, {1.0}), ContractError);
        CHECK_THROWS_AS(quantile_loss(pred, y, {0.0}), ContractError);
        CHECK_THROWS_AS(quantile_loss(pred, y, {-0.1}), ContractError);
    }
    SUBCASE("loss is positive whenever any quantile misses") {
        const Tensor pred = Tensor::from_data({1, 2, 2}, {3.0, 3.0, -1.0, -0.5});
        const Tensor y = Tensor::from_data({1, 2}, {3.0, -1.0});
        CHECK(quantile_loss(pred, y, {0.5, 0.9}).item() > 0.0);
    }
    SUBCASE("shape mismatch is named") {
        const Tensor pred = Tensor::from_data({1, 2, 1}, {0.0, 0.0});
        const Tensor y = Tensor::from_data({1, 3}, {1.0, 1.0, 1.0});
        CHECK_THROWS_AS(quantile_loss(pred, y, {0.5}), ShapeError);
    }
}

TEST_CASE("metric formulas on hand-checked numbers") {
    SUBCASE("perfect forecast scores zero everywhere") {
        const Tensor y = Tensor::from_data({2, 2}, {3.0, 5.0, 1.0, 8.0});
        const MetricsReport r = metrics(y, y, y);
        CHECK(r.wpe == 0.0);
        CHECK(r.p50 == 0.0);
        CHECK(r.p90 == 0.0);
        CHECK(r.mae == 0.0);
        CHECK(r.note.empty());
    }
    SUBCASE("wpe and mae from pinned arithmetic") {
        const Tensor y = Tensor::from_data({1, 2}, {10.0, 10.0});
        const Tensor p = Tensor::from_data({1, 2}, {8.0, 12.0});
        const MetricsReport r = metrics(p, p, y);
        CHECK(r.wpe == doctest::Approx(0.2).epsilon(1e-15));
        CHECK(r.mae == doctest::Approx(2.0).epsilon(1e-15));
    }
    SUBCASE("relative metrics are scale invariant, mae doubles") {
        const Tensor y = Tensor::from_data({1, 3}, {4.0, 7.0, 2.0});
        const Tensor p50 = Tensor::from_data({1, 3}, {3.0, 8.0, 2.5});
        const Tensor p90 = Tensor::from_data({1, 3}, {5.0, 9.0, 3.0});
        const MetricsReport r1 = metrics(p50, p90, y);
        const MetricsReport r2 = metrics(scale(p50, 2.0), scale(p90, 2.0), scale(y, 2.0));
        CHECK(r2.wpe == doctest::Approx(r1.wpe).epsilon(1e-12));
        CHECK(r2.p50 == doctest::Approx(r1.p50).epsilon(1e-12));
        CHECK(r2.p90 == doctest::Approx(r1.p90).epsilon(1e-12));
        CHECK(r2.mae == doctest::Approx(2.0 * r1.mae).epsilon(1e-12));
    }
    SUBCASE("all-zero targets flag the undefined ratios") {
        const Tensor y = Tensor::zeros({1, 2});
        const Tensor p = Tensor::from_data({1, 2}, {1.0, -1.0});
        const MetricsReport r = metrics(p, p, y);
        CHECK(std::isnan(r.wpe));
        CHECK(std::isnan(r.p50));
        CHECK(std::isnan(r.p90));
        CHECK(r.mae == doctest::Approx(1.0));
        CHECK_FALSE(r.note.empty());
    }
}

TEST_CASE("target scaler statistics and lookup rules") {
    WindowSet set;
    set.input_len = 2;
    set.horizon = 1;
    set.n_statics = 0;
    const double h0[] = {2.0, 4.0};
    const double f0[] = {6.0};
    const double h1[] = {5.0, 5.0};
    const double f1[] = {5.0};
    set.push(h0, f0, nullptr, 0);
    set.push(h1, f1, nullptr, 1);
    const TargetScaler s = fit_target_scaler(set);
    CHECK(s.entity_mean(0) == doctest::Approx(4.0).epsilon(1e-15));
    CHECK(s.entity_scale(0) == doctest::Approx(std::sqrt(8.0 / 3.0)).epsilon(1e-12));
    // constant series falls back to unit scale
    CHECK(s.entity_mean(1) == doctest::Approx(5.0));
    CHECK(s.entity_scale(1) == 1.0);
    CHECK_THROWS_AS(s.entity_mean(2), DataError);

    const TargetScaler unfitted;
    CHECK(unfitted.entity_mean(99) == 0.0);
    CHECK(unfitted.entity_scale(99) == 1.0);
}

TEST_CASE("forward pass geometry and input checks") {
    ModelConfig cfg = tiny_config();
    cfg.patch_len = 2;
    const Model m = build_model(cfg, 11);
    const WindowSet panel = make_panel(4, 3, 2, 30, cfg.input_len, cfg.horizon, 0.2, false);
    const ForecastBatch batch = gather_batch(panel, {0, 5, 9});
    const ForwardResult r = model_forward(m, batch);
    CHECK(r.pred.shape() == Shape{3, 2, 2});
    REQUIRE(r.scores.size() == 1);
    // score matrix runs over patch tokens, not raw steps
    CHECK(r.scores[0].values.shape() == Shape{3, 2, 4, 4});

    ForecastBatch bad = batch;
    bad.history = Tensor::zeros({3, 5});
    CHECK_THROWS_AS(model_forward(m, bad), ShapeError);

    ModelConfig ec = tiny_config();
    ec.encoder = EncoderMode::sce;
    ec.cardinalities = {3};
    ec.variant = Variant::v1;
    const Model me = build_model(ec, 11);
    ForecastBatch no_codes = gather_batch(make_panel(4, 3, 2, 30, 8, 2, 0.2, false), {0, 1});
    CHECK_THROWS_AS(model_forward(me, no_codes), ShapeError);
}

TEST_CASE("plain model output is independent of the statics input") {
    const Model m = build_model(tiny_config(), 23);
    const WindowSet panel = make_panel(6, 4, 2, 26, 8, 2, 0.4, true);
    ForecastBatch a = gather_batch(panel, {0, 3, 7});
    ForecastBatch b = a;
    for (auto& c : b.codes) c = (c + 1) % 2;
    const ForwardResult ra = model_forward(m, a);
    const ForwardResult rb = model_forward(m, b);
    const Tensor pa = ra.pred;
    const Tensor pb = rb.pred;
    for (long i = 0; i < pa.numel(); ++i) CHECK(pa.data()[i] == pb.data()[i]);
}

TEST_CASE("input compressor route widens the projection and uses the codes") {
    ModelConfig cfg = tiny_config();
    cfg.encoder = EncoderMode::mlp;
    cfg.cardinalities = {4};
    cfg.statics_to_input = true;
    const Model m = build_model(cfg, 9);
    const Tensor w = find_param(m.params(), "patch_proj.w");
    CHECK(w.shape() == Shape{1 + cfg.embed_dim, cfg.embed_dim});

    const WindowSet panel = make_panel(8, 4, 4, 26, 8, 2, 0.2, true);
    ForecastBatch a = gather_batch(panel, {0, 2});
    ForecastBatch b = a;
    b.codes[0] = (b.codes[0] + 1) % 4;
    const ForwardResult ra = model_forward(m, a);
    const ForwardResult rb = model_forward(m, b);
    const Tensor pa = ra.pred;
    const Tensor pb = rb.pred;
    double diff = 0.0;
    for (long i = 0; i < pa.numel(); ++i) diff = std::max(diff, std::abs(pa.data()[i] - pb.data()[i]));
    CHECK(diff > 0.0);
}

TEST_CASE("zero learning rate leaves every parameter bitwise unchanged") {
    ModelConfig cfg = tiny_config();
    cfg.encoder = EncoderMode::sce;
    cfg.cardinalities = {2};
    cfg.variant = Variant::v3;
    Model m = build_model(cfg, 31);
    const WindowSet panel = make_panel(3, 4, 2, 24, 8, 2, 0.3, true);
    std::vector<std::vector<double>> before;
    for (const auto& [name, p] : m.params()) {
        (void)name;
        before.push_back(p.data());
    }
    TrainConfig tc;
    tc.lr = 0.0;
    tc.max_steps = 12;
    tc.batch_size = 8;
    tc.eval_every = 4;
    train(m, panel, panel, tc);
    const ParamMap after = m.params();
    for (std::size_t i = 0; i < after.size(); ++i) {
        const Tensor& p = after[i].second;
        for (long j = 0; j < p.numel(); ++j) REQUIRE(p.data()[j] == before[i][j]);
    }
}

TEST_CASE("memorization drives the loss down and never climbs over the window") {
    // one small fixed batch; loss at step 50 must not exceed step 0 in at
    // least 2 of 3 seeds, and 500 steps reach < 10% of the initial loss
    const WindowSet tiny = [] {
        WindowSet full = make_panel(12, 2, 2, 14, 8, 2, 0.1, false);
        WindowSet cut = full;
        cut.history.assign(full.history.begin(), full.history.begin() + 4 * 8);
        cut.future.assign(full.future.begin(), full.future.begin() + 4 * 2);
        cut.entities.assign(full.entities.begin(), full.entities.begin() + 4);
        return cut;
    }();

    long non_increasing = 0;
    for (unsigned long seed = 0; seed < 3; ++seed) {
        Model m = build_model(tiny_config(), seed);
        TrainConfig tc;
        tc.max_steps = 500;
        tc.batch_size = 64;
        tc.seed = seed;
        TrainHistory h = train(m, tiny, WindowSet{}, tc);
        REQUIRE(h.train_loss.size() == 500);
        if (h.train_loss[50] <= h.train_loss[0]) ++non_increasing;
        if (seed == 0) CHECK(h.train_loss.back() < 0.1 * h.train_loss.front());
    }
    CHECK(non_increasing >= 2);
}

TEST_CASE("training twice from one seed lands on the same loss") {
    const WindowSet panel = make_panel(5, 3, 3, 22, 8, 2, 0.3, false);
    double finals[2];
    for (int run = 0; run < 2; ++run) {
        Model m = build_model(tiny_config(), 7);
        TrainConfig tc;
        tc.max_steps = 40;
        tc.batch_size = 16;
        tc.seed = 99;
        tc.eval_every = 10;
        const TrainHistory h = train(m, panel, panel, tc);
        finals[run] = h.train_loss.back();
    }
    CHECK(std::abs(finals[0] - finals[1]) <= 1e-12);
}

TEST_CASE("divergence aborts with the step index and last finite loss") {
    Model m = build_model(tiny_config(), 2);
    const WindowSet panel = make_panel(9, 2, 2, 20, 8, 2, 0.2, false);
    // normalization keeps moderate blowups finite; the step must be large
    // enough that squaring inside the next forward overflows
    TrainConfig tc;
    tc.lr = 1e200;
    tc.max_steps = 10;
    tc.batch_size = 8;
    try {
        train(m, panel, WindowSet{}, tc);
        FAIL("expected a numeric abort");
    } catch (const NumericError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("diverged at step") != std::string::npos);
        CHECK(msg.find("last finite loss") != std::string::npos);
    }
}

TEST_CASE("evaluation is read-only, idempotent, and aggregates like the metric op") {
    ModelConfig cfg = tiny_config();
    const Model m = build_model(cfg, 13);
    const WindowSet panel = make_panel(21, 3, 2, 20, 8, 2, 0.3, false);

    SUBCASE("empty split is rejected") {
        CHECK_THROWS_AS(evaluate(m, WindowSet{}), ContractError);
    }
    SUBCASE("two calls agree exactly") {
        const MetricsReport a = evaluate(m, panel);
        const MetricsReport b = evaluate(m, panel);
        CHECK(a.wpe == b.wpe);
        CHECK(a.p50 == b.p50);
        CHECK(a.p90 == b.p90);
        CHECK(a.mae == b.mae);
    }
    SUBCASE("single batch equals the direct metric computation") {
        std::vector<long> idx(panel.size());
        for (long i = 0; i < panel.size(); ++i) idx[i] = i;
        const ForecastBatch batch = gather_batch(panel, idx);
        const ForwardResult fr = model_forward(m, batch);
        const long b = batch.history.shape()[0];
        const long l = cfg.horizon;
        std::vector<double> p50(b * l), p90(b * l);
        const Tensor pred = fr.pred;
        for (long r = 0; r < b * l; ++r) {
            p50[r] = pred.data()[r * 2 + 0];
            p90[r] = pred.data()[r * 2 + 1];
        }
        const MetricsReport direct = metrics(Tensor::from_data({b, l}, std::move(p50)),
                                             Tensor::from_data({b, l}, std::move(p90)), batch.future);
        const MetricsReport agg = evaluate(m, panel);
        CHECK(agg.wpe == direct.wpe);
        CHECK(agg.p50 == direct.p50);
        CHECK(agg.p90 == direct.p90);
        CHECK(agg.mae == direct.mae);
    }
    SUBCASE("untrained forecasts sit in the sanity band") {
        for (unsigned long seed = 0; seed < 3; ++seed) {
            const Model fresh = build_model(cfg, seed);
            const MetricsReport r = evaluate(fresh, panel);
            CHECK(r.wpe >= 0.5);
            CHECK(r.wpe <= 5.0);
        }
    }
}

TEST_CASE("trained quantile heads rarely cross") {
    const WindowSet panel = make_panel(33, 4, 2, 40, 8, 2, 0.8, false);
    Model m = build_model(tiny_config(), 1);
    TrainConfig tc;
    tc.max_steps = 300;
    tc.batch_size = 32;
    tc.seed = 5;
    train(m, panel, WindowSet{}, tc);

    NoGradGuard guard;
    std::vector<long> idx(panel.size());
    for (long i = 0; i < panel.size(); ++i) idx[i] = i;
    const ForwardResult fr = model_forward(m, gather_batch(panel, idx));
    const Tensor pred = fr.pred;
    long crossed = 0;
    const long positions = pred.numel() / 2;
    for (long r = 0; r < positions; ++r) {
        if (pred.data()[r * 2 + 1] < pred.data()[r * 2 + 0]) ++crossed;
    }
    CHECK(static_cast<double>(crossed) / static_cast<double>(positions) < 0.10);
}

TEST_CASE("full-model gradients match finite differences") {
    const WindowSet panel = make_panel(44, 3, 2, 16, 4, 2, 0.2, true);
    const std::vector<long> idx = {0, 4};

    for (Variant variant : {Variant::v1, Variant::v3}) {
        CAPTURE(variant_name(variant));
        ModelConfig cfg;
        cfg.input_len = 4;
        cfg.horizon = 2;
        cfg.embed_dim = 4;
        cfg.heads = 2;
        cfg.head_dim = 2;
        cfg.n_layers = 1;
        cfg.encoder = EncoderMode::sce;
        cfg.cardinalities = {3};
        cfg.variant = variant;
        cfg.dropout = 0.0;
        Model m = build_model(cfg, 77);
        const ForecastBatch batch = gather_batch(panel, idx);

        std::vector<Tensor> inputs;
        for (const auto& [name, p] : m.params()) {
            (void)name;
            inputs.push_back(p);
        }
        const TensorFn f = [&](const std::vector<Tensor>&) {
            const ForwardResult fr = model_forward_scaled(m, batch, false, nullptr);
            return quantile_loss(fr.pred, batch.future, m.cfg.quantiles);
        };
        CHECK(finite_difference_check(f, inputs) < 1e-4);
    }
}

TEST_CASE("dropout masks only act in training mode and follow the seed") {
    ModelConfig cfg = tiny_config();
    cfg.dropout = 0.4;
    const Model m = build_model(cfg, 3);
    const WindowSet panel = make_panel(14, 2, 2, 18, 8, 2, 0.2, false);
    const ForecastBatch batch = gather_batch(panel, {0, 1, 2});

    const Tensor eval1 = model_forward_scaled(m, batch, false, nullptr).pred;
    const Tensor eval2 = model_forward_scaled(m, batch, false, nullptr).pred;
    for (long i = 0; i < eval1.numel(); ++i) REQUIRE(eval1.data()[i] == eval2.data()[i]);

    std::mt19937_64 r1(42), r2(42), r3(43);
    const Tensor ta = model_forward_scaled(m, batch, true, &r1).pred;
    const Tensor tb = model_forward_scaled(m, batch, true, &r2).pred;
    const Tensor tc = model_forward_scaled(m, batch, true, &r3).pred;
    double same = 0.0, other = 0.0;
    for (long i = 0; i < ta.numel(); ++i) {
        same = std::max(same, std::abs(ta.data()[i] - tb.data()[i]));
        other = std::max(other, std::abs(ta.data()[i] - tc.data()[i]));
    }
    CHECK(same == 0.0);
    CHECK(other > 0.0);
}
