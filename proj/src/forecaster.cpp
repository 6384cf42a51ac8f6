#include "qkcv/forecaster.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "qkcv/errors.hpp"

namespace qkcv {

namespace {

Tensor ln_affine(const Tensor& x, const Tensor& gain, const Tensor& bias) {
    return add(mul(layer_norm_lastdim(x), gain), bias);
}

// Inverted-dropout keep mask: 0 with probability rate, else 1/(1-rate).
Tensor dropout_mask(Shape shape, double rate, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const double keep = 1.0 / (1.0 - rate);
    std::vector<double> data(shape_numel(shape));
    for (auto& v : data) v = u(rng) < rate ? 0.0 : keep;
    return Tensor::from_data(std::move(shape), std::move(data));
}

// Self-contained shuffle so the batch order depends only on the seed, not
// on the standard library build.
void fisher_yates(std::vector<long>& idx, std::mt19937_64& rng) {
    for (std::size_t i = idx.size(); i > 1; --i) {
        const std::size_t j = static_cast<std::size_t>(rng() % i);
        std::swap(idx[i - 1], idx[j]);
    }
}

struct MetricSums {
    double abs_err_p50 = 0.0;
    double abs_y = 0.0;
    double pinball_p50 = 0.0;
    double pinball_p90 = 0.0;
    long n = 0;
};

double pinball(double q, double y, double yhat) {
    const double d = y - yhat;
    return d >= 0.0 ? q * d : (q - 1.0) * d;
}

void accumulate_metric_sums(const std::vector<double>& p50, const std::vector<double>& p90,
                            const std::vector<double>& y, MetricSums& acc) {
    for (std::size_t i = 0; i < y.size(); ++i) {
        acc.abs_err_p50 += std::abs(p50[i] - y[i]);
        acc.abs_y += std::abs(y[i]);
        acc.pinball_p50 += pinball(0.5, y[i], p50[i]);
        acc.pinball_p90 += pinball(0.9, y[i], p90[i]);
    }
    acc.n += static_cast<long>(y.size());
}

MetricsReport report_from_sums(const MetricSums& acc) {
    MetricsReport r;
    r.mae = acc.abs_err_p50 / static_cast<double>(acc.n);
    if (acc.abs_y == 0.0) {
        const double undef = std::numeric_limits<double>::quiet_NaN();
        r.wpe = undef;
        r.p50 = undef;
        r.p90 = undef;
        r.note = "all targets are zero; WPE, P50 and P90 divide by sum |y| and are undefined";
        return r;
    }
    r.wpe = acc.abs_err_p50 / acc.abs_y;
    r.p50 = 2.0 * acc.pinball_p50 / acc.abs_y;
    r.p90 = 2.0 * acc.pinball_p90 / acc.abs_y;
    return r;
}

long quantile_index(const std::vector<double>& quantiles, double q) {
    for (std::size_t i = 0; i < quantiles.size(); ++i) {
        if (std::abs(quantiles[i] - q) < 1e-12) return static_cast<long>(i);
    }
    throw ContractError("metrics need quantile " + std::to_string(q) +
                        " in the model's quantile list");
}

}  // namespace

void validate_config(const ModelConfig& cfg) {
    if (cfg.input_len <= 0 || cfg.horizon <= 0) throw ConfigError("input_len and horizon must be positive");
    if (cfg.embed_dim <= 0 || cfg.heads <= 0 || cfg.head_dim <= 0) {
        throw ConfigError("embed_dim, heads and head_dim must be positive");
    }
    if (cfg.embed_dim != cfg.heads * cfg.head_dim) {
        throw ConfigError("embed_dim " + std::to_string(cfg.embed_dim) + " != heads*head_dim " +
                          std::to_string(cfg.heads * cfg.head_dim));
    }
    if (cfg.n_layers < 1) throw ConfigError("n_layers must be at least 1");
    if (cfg.patch_len <= 0 || cfg.input_len % cfg.patch_len != 0) {
        throw ConfigError("patch_len must divide input_len, got " + std::to_string(cfg.patch_len) +
                          " over " + std::to_string(cfg.input_len));
    }
    if (cfg.quantiles.empty()) throw ConfigError("quantile list is empty");
    for (std::size_t i = 0; i < cfg.quantiles.size(); ++i) {
        const double q = cfg.quantiles[i];
        if (q <= 0.0 || q >= 1.0) throw ConfigError("quantiles must lie strictly inside (0,1)");
        if (i > 0 && q <= cfg.quantiles[i - 1]) throw ConfigError("quantiles must be strictly increasing");
    }
    if (cfg.dropout < 0.0 || cfg.dropout >= 1.0) throw ConfigError("dropout rate must lie in [0,1)");
    if (cfg.encoder == EncoderMode::none) {
        if (cfg.variant != Variant::vanilla) {
            throw ConfigError(std::string("variant ") + variant_name(cfg.variant) +
                              " needs a static encoder");
        }
        if (cfg.statics_to_input) throw ConfigError("statics_to_input needs a static encoder");
    } else if (cfg.cardinalities.empty()) {
        throw ConfigError("encoder enabled but no static variables declared");
    }
    if (cfg.statics_to_input && cfg.variant != Variant::vanilla) {
        throw ConfigError("statics_to_input routes categories past attention; variant must be vanilla");
    }
    if (!cfg.qkcv_layers.empty() &&
        cfg.qkcv_layers.size() != static_cast<std::size_t>(cfg.n_layers)) {
        throw ConfigError("qkcv_layers mask size " + std::to_string(cfg.qkcv_layers.size()) +
                          " != n_layers " + std::to_string(cfg.n_layers));
    }
}

void WindowSet::push(const double* h, const double* f, const long* c, long entity) {
    history.insert(history.end(), h, h + input_len);
    future.insert(future.end(), f, f + horizon);
    if (n_statics > 0) codes.insert(codes.end(), c, c + n_statics);
    entities.push_back(entity);
}

ForecastBatch gather_batch(const WindowSet& set, const std::vector<long>& idx) {
    const long b = static_cast<long>(idx.size());
    if (b == 0) throw ContractError("gather_batch: empty index list");
    ForecastBatch out;
    std::vector<double> h(b * set.input_len);
    std::vector<double> f(b * set.horizon);
    out.codes.resize(b * set.n_statics);
    out.entities.resize(b);
    for (long r = 0; r < b; ++r) {
        const long w = idx[r];
        if (w < 0 || w >= set.size()) throw ContractError("gather_batch: window index out of range");
        std::copy_n(set.history.begin() + w * set.input_len, set.input_len, h.begin() + r * set.input_len);
        std::copy_n(set.future.begin() + w * set.horizon, set.horizon, f.begin() + r * set.horizon);
        std::copy_n(set.codes.begin() + w * set.n_statics, set.n_statics,
                    out.codes.begin() + r * set.n_statics);
        out.entities[r] = set.entities[w];
    }
    out.history = Tensor::from_data({b, set.input_len}, std::move(h));
    out.future = Tensor::from_data({b, set.horizon}, std::move(f));
    return out;
}

double TargetScaler::entity_mean(long e) const {
    if (!fitted()) return 0.0;
    if (e < 0 || e >= static_cast<long>(mean.size())) {
        throw DataError("target scaler has no entity index " + std::to_string(e));
    }
    return mean[e];
}

double TargetScaler::entity_scale(long e) const {
    if (!fitted()) return 1.0;
    if (e < 0 || e >= static_cast<long>(scale.size())) {
        throw DataError("target scaler has no entity index " + std::to_string(e));
    }
    return scale[e];
}

TargetScaler fit_target_scaler(const WindowSet& train_set) {
    if (train_set.size() == 0) throw ContractError("target scaler needs a non-empty training split");
    long n_entities = 0;
    for (long e : train_set.entities) n_entities = std::max(n_entities, e + 1);
    std::vector<double> sum(n_entities, 0.0), sumsq(n_entities, 0.0);
    std::vector<long> count(n_entities, 0);
    for (long w = 0; w < train_set.size(); ++w) {
        const long e = train_set.entities[w];
        auto absorb = [&](double v) {
            sum[e] += v;
            sumsq[e] += v * v;
            ++count[e];
        };
        for (long t = 0; t < train_set.input_len; ++t) absorb(train_set.history[w * train_set.input_len + t]);
        for (long t = 0; t < train_set.horizon; ++t) absorb(train_set.future[w * train_set.horizon + t]);
    }
    TargetScaler s;
    s.mean.assign(n_entities, 0.0);
    s.scale.assign(n_entities, 1.0);
    for (long e = 0; e < n_entities; ++e) {
        if (count[e] == 0) continue;
        const double m = sum[e] / count[e];
        const double var = std::max(0.0, sumsq[e] / count[e] - m * m);
        s.mean[e] = m;
        const double sd = std::sqrt(var);
        s.scale[e] = sd < 1e-8 ? 1.0 : sd;
    }
    return s;
}

Model build_model(const ModelConfig& cfg, unsigned long seed) {
    validate_config(cfg);
    Model m;
    m.cfg = cfg;
    m.seed = seed;
    ParamInit init(seed);

    if (cfg.encoder != EncoderMode::none) {
        StaticEncoderConfig ec;
        ec.cardinalities = cfg.cardinalities;
        ec.embed_dim = cfg.embed_dim;
        ec.mode = cfg.encoder;
        m.encoder = make_static_encoder(ec, init);
        m.has_encoder = true;
    }

    const long in_width = cfg.patch_len + (cfg.statics_to_input ? cfg.embed_dim : 0);
    m.patch_proj = make_linear(in_width, cfg.embed_dim, init);

    for (long i = 0; i < cfg.n_layers; ++i) {
        const bool uses_qkcv = cfg.qkcv_layers.empty() || cfg.qkcv_layers[i] != 0;
        AttentionConfig acfg;
        acfg.variant = uses_qkcv ? cfg.variant : Variant::vanilla;
        acfg.heads = cfg.heads;
        acfg.head_dim = cfg.head_dim;
        acfg.causal_mask = cfg.causal;
        LayerParams lp;
        lp.attn = make_multi_head(acfg, init);
        lp.ln1_gain = Tensor::full({cfg.embed_dim}, 1.0, true);
        lp.ln1_bias = Tensor::zeros({cfg.embed_dim}, true);
        lp.ff1 = make_linear(cfg.embed_dim, cfg.ff_width(), init);
        lp.ff2 = make_linear(cfg.ff_width(), cfg.embed_dim, init);
        lp.ln2_gain = Tensor::full({cfg.embed_dim}, 1.0, true);
        lp.ln2_bias = Tensor::zeros({cfg.embed_dim}, true);
        m.layers.push_back(std::move(lp));
    }

    m.head = make_linear(cfg.tokens() * cfg.embed_dim,
                         cfg.horizon * static_cast<long>(cfg.quantiles.size()), init);
    return m;
}

ParamMap Model::params() const {
    ParamMap out;
    if (has_encoder) collect_static_encoder("encoder", encoder, out);
    collect_linear("patch_proj", patch_proj, out);
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const std::string pre = "layer." + std::to_string(i);
        const bool uses_qkcv = cfg.qkcv_layers.empty() || cfg.qkcv_layers[i] != 0;
        collect_multi_head(pre + ".attn", layers[i].attn,
                           uses_qkcv ? cfg.variant : Variant::vanilla, out);
        out.emplace_back(pre + ".ln1.gain", layers[i].ln1_gain);
        out.emplace_back(pre + ".ln1.bias", layers[i].ln1_bias);
        collect_linear(pre + ".ff1", layers[i].ff1, out);
        collect_linear(pre + ".ff2", layers[i].ff2, out);
        out.emplace_back(pre + ".ln2.gain", layers[i].ln2_gain);
        out.emplace_back(pre + ".ln2.bias", layers[i].ln2_bias);
    }
    collect_linear("head", head, out);
    return out;
}

namespace {

void check_batch(const Model& m, const ForecastBatch& batch) {
    const ModelConfig& cfg = m.cfg;
    if (!batch.history.defined() || batch.history.ndim() != 2 ||
        batch.history.shape()[1] != cfg.input_len) {
        throw ShapeError("forecast batch history must be [B," + std::to_string(cfg.input_len) +
                         "], got " + (batch.history.defined() ? shape_str(batch.history.shape())
                                                              : std::string("undefined")));
    }
    const long b = batch.history.shape()[0];
    if (m.has_encoder) {
        const std::size_t f = cfg.cardinalities.size();
        if (batch.codes.size() != static_cast<std::size_t>(b) * f) {
            throw ShapeError("forecast batch carries " + std::to_string(batch.codes.size()) +
                             " codes, expected " + std::to_string(b * f));
        }
    }
    if (m.scaler.fitted() && batch.entities.size() != static_cast<std::size_t>(b)) {
        throw ShapeError("forecast batch needs one entity index per row for target scaling");
    }
}

// Per-row scaling constants shaped for broadcasting against [B,...].
Tensor row_stats(const Model& m, const std::vector<long>& entities, long b, bool means, long rank) {
    std::vector<double> v(b);
    for (long r = 0; r < b; ++r) {
        v[r] = means ? m.scaler.entity_mean(entities[r]) : m.scaler.entity_scale(entities[r]);
    }
    Shape s(rank, 1);
    s[0] = b;
    return Tensor::from_data(std::move(s), std::move(v));
}

}  // namespace

ForwardResult model_forward_scaled(const Model& m, const ForecastBatch& batch, bool train_mode,
                                   std::mt19937_64* dropout_rng) {
    check_batch(m, batch);
    const ModelConfig& cfg = m.cfg;
    const long b = batch.history.shape()[0];
    const long t = cfg.tokens();

    Tensor h = batch.history;
    if (m.scaler.fitted()) {
        h = div(sub(h, row_stats(m, batch.entities, b, true, 2)),
                row_stats(m, batch.entities, b, false, 2));
    }

    ForwardResult out;
    Tensor enc;
    if (m.has_encoder) {
        if (cfg.encoder == EncoderMode::sce) {
            const StaticEncodeResult r = static_covariate_encode(m.encoder, batch.codes, b);
            enc = r.encoding;
            out.selection_weights = r.weights;
        } else {
            enc = mlp_encode(m.encoder, batch.codes, b);
        }
    }

    Tensor x = reshape(h, {b, t, cfg.patch_len});
    if (cfg.statics_to_input) {
        const Tensor tiled = broadcast_to(reshape(enc, {b, 1, cfg.embed_dim}), {b, t, cfg.embed_dim});
        x = concat({x, tiled}, 2);
    }
    x = linear_apply(m.patch_proj, x);

    const bool drop = train_mode && cfg.dropout > 0.0 && dropout_rng != nullptr;
    for (std::size_t i = 0; i < m.layers.size(); ++i) {
        const LayerParams& lp = m.layers[i];
        const bool uses_qkcv = cfg.qkcv_layers.empty() || cfg.qkcv_layers[i] != 0;
        AttentionConfig acfg;
        acfg.variant = uses_qkcv ? cfg.variant : Variant::vanilla;
        acfg.heads = cfg.heads;
        acfg.head_dim = cfg.head_dim;
        acfg.causal_mask = cfg.causal;

        Tensor score_mask;
        if (drop) score_mask = dropout_mask({b, cfg.heads, t, t}, cfg.dropout, *dropout_rng);
        const Tensor c_arg = acfg.variant != Variant::vanilla ? enc : Tensor();
        const MultiHeadResult attn =
            multi_head_qkcv(x, c_arg, lp.attn, acfg, drop ? &score_mask : nullptr);
        out.scores.push_back(attn.scores);
        x = ln_affine(add(x, attn.output), lp.ln1_gain, lp.ln1_bias);

        Tensor f = elu(linear_apply(lp.ff1, x));
        if (drop) f = mul(f, dropout_mask({b, t, cfg.ff_width()}, cfg.dropout, *dropout_rng));
        f = linear_apply(lp.ff2, f);
        x = ln_affine(add(x, f), lp.ln2_gain, lp.ln2_bias);
    }

    const long qn = static_cast<long>(cfg.quantiles.size());
    out.pred = reshape(linear_apply(m.head, reshape(x, {b, t * cfg.embed_dim})),
                       {b, cfg.horizon, qn});
    return out;
}

ForwardResult model_forward(const Model& m, const ForecastBatch& batch) {
    ForwardResult r = model_forward_scaled(m, batch, false, nullptr);
    if (m.scaler.fitted()) {
        const long b = batch.history.shape()[0];
        r.pred = add(mul(r.pred, row_stats(m, batch.entities, b, false, 3)),
                     row_stats(m, batch.entities, b, true, 3));
    }
    return r;
}

Tensor scale_targets(const Model& m, const ForecastBatch& batch) {
    if (!batch.future.defined()) throw ContractError("scale_targets: batch has no future segment");
    if (!m.scaler.fitted()) return batch.future;
    const long b = batch.future.shape()[0];
    return div(sub(batch.future, row_stats(m, batch.entities, b, true, 2)),
               row_stats(m, batch.entities, b, false, 2));
}

Tensor quantile_loss(const Tensor& pred, const Tensor& y, const std::vector<double>& quantiles) {
    if (quantiles.empty()) throw ContractError("quantile_loss: empty quantile list");
    for (double q : quantiles) {
        if (q <= 0.0 || q >= 1.0) {
            throw ContractError("quantile_loss: quantile " + std::to_string(q) +
                                " outside (0,1)");
        }
    }
    const long qn = static_cast<long>(quantiles.size());
    if (pred.ndim() != 3 || y.ndim() != 2 || pred.shape()[0] != y.shape()[0] ||
        pred.shape()[1] != y.shape()[1] || pred.shape()[2] != qn) {
        throw ShapeError("quantile_loss: pred " + shape_str(pred.shape()) + " vs y " +
                         shape_str(y.shape()) + " with " + std::to_string(qn) + " quantiles");
    }
    const long b = y.shape()[0];
    const long l = y.shape()[1];

    std::vector<double> qv(quantiles.begin(), quantiles.end());
    std::vector<double> cv(qn);
    for (long i = 0; i < qn; ++i) cv[i] = 1.0 - qv[i];
    const Tensor qt = Tensor::from_data({qn}, std::move(qv));
    const Tensor ct = Tensor::from_data({qn}, std::move(cv));

    const Tensor diff = sub(reshape(y, {b, l, 1}), pred);
    const Tensor per = add(mul(qt, positive_part(diff)), mul(ct, positive_part(scale(diff, -1.0))));
    return scale(sum_all(per), 1.0 / static_cast<double>(b * l));
}

MetricsReport metrics(const Tensor& pred_p50, const Tensor& pred_p90, const Tensor& y) {
    if (!shapes_equal(pred_p50.shape(), y.shape()) || !shapes_equal(pred_p90.shape(), y.shape())) {
        throw ShapeError("metrics: prediction shapes " + shape_str(pred_p50.shape()) + " / " +
                         shape_str(pred_p90.shape()) + " must match targets " + shape_str(y.shape()));
    }
    if (y.numel() == 0) throw ContractError("metrics: empty targets");
    MetricSums acc;
    accumulate_metric_sums(pred_p50.data(), pred_p90.data(), y.data(), acc);
    return report_from_sums(acc);
}

AdamState make_adam_state(const ParamMap& trainable) {
    AdamState st;
    st.m.reserve(trainable.size());
    st.v.reserve(trainable.size());
    for (const auto& [name, p] : trainable) {
        (void)name;
        st.m.emplace_back(p.numel(), 0.0);
        st.v.emplace_back(p.numel(), 0.0);
    }
    return st;
}

void adam_step(ParamMap& trainable, const GradMap& grads, AdamState& st, const TrainConfig& cfg) {
    if (st.m.size() != trainable.size()) {
        throw ContractError("adam_step: optimizer state does not match the trainable set");
    }
    st.t += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.t));
    for (std::size_t i = 0; i < trainable.size(); ++i) {
        Tensor& p = trainable[i].second;
        const Tensor g = grads.at(p);
        const std::vector<double>& gd = g.data();
        std::vector<double>& pd = p.leaf_data();
        std::vector<double>& mi = st.m[i];
        std::vector<double>& vi = st.v[i];
        for (std::size_t j = 0; j < pd.size(); ++j) {
            mi[j] = cfg.beta1 * mi[j] + (1.0 - cfg.beta1) * gd[j];
            vi[j] = cfg.beta2 * vi[j] + (1.0 - cfg.beta2) * gd[j] * gd[j];
            const double mhat = mi[j] / bc1;
            const double vhat = vi[j] / bc2;
            pd[j] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
        }
    }
}

TrainHistory train(Model& m, const WindowSet& train_set, const WindowSet& val_set,
                   const TrainConfig& cfg, const ParamMap* trainable) {
    if (train_set.size() == 0) throw ContractError("train: empty training split");
    if (train_set.input_len != m.cfg.input_len || train_set.horizon != m.cfg.horizon) {
        throw ShapeError("train: window geometry [" + std::to_string(train_set.input_len) + "," +
                         std::to_string(train_set.horizon) + "] does not match the model config");
    }
    if (cfg.max_steps <= 0 || cfg.batch_size <= 0) throw ConfigError("train: max_steps and batch_size must be positive");

    m.scaler = fit_target_scaler(train_set);

    const ParamMap all = m.params();
    ParamMap tr = trainable != nullptr ? *trainable : all;
    std::vector<Tensor> tr_tensors;
    tr_tensors.reserve(tr.size());
    for (const auto& [name, p] : tr) {
        (void)name;
        tr_tensors.push_back(p);
    }

    AdamState opt = make_adam_state(tr);
    std::mt19937_64 data_rng(cfg.seed);
    std::mt19937_64 drop_rng(cfg.seed ^ 0x9E3779B97F4A7C15ULL);

    TrainHistory hist;
    std::vector<std::vector<double>> best;
    double best_val = std::numeric_limits<double>::infinity();
    long evals_since_best = 0;
    double last_finite = std::numeric_limits<double>::quiet_NaN();
    const bool has_val = val_set.size() > 0;

    std::vector<long> order(train_set.size());
    for (long i = 0; i < train_set.size(); ++i) order[i] = i;
    std::size_t cursor = order.size();  // forces a shuffle before the first batch

    for (long step = 0; step < cfg.max_steps; ++step) {
        if (cursor >= order.size()) {
            fisher_yates(order, data_rng);
            cursor = 0;
        }
        const std::size_t take =
            std::min<std::size_t>(cfg.batch_size, order.size() - cursor);
        const std::vector<long> idx(order.begin() + cursor, order.begin() + cursor + take);
        cursor += take;

        try {
            const ForecastBatch batch = gather_batch(train_set, idx);
            const ForwardResult fr = model_forward_scaled(m, batch, true, &drop_rng);
            const Tensor loss = quantile_loss(fr.pred, scale_targets(m, batch), m.cfg.quantiles);
            hist.train_loss.push_back(loss.item());
            const GradMap grads = grad_of(loss, tr_tensors);
            adam_step(tr, grads, opt, cfg);
            last_finite = hist.train_loss.back();
        } catch (const NumericError& e) {
            const std::string last = std::isnan(last_finite)
                                         ? std::string("none")
                                         : std::to_string(last_finite);
            throw NumericError("training diverged at step " + std::to_string(step) +
                               " (last finite loss: " + last + "): " + e.what());
        }

        const bool eval_now = has_val && ((step + 1) % cfg.eval_every == 0 || step + 1 == cfg.max_steps);
        if (eval_now) {
            const double v = evaluate(m, val_set).p50;
            hist.val.emplace_back(step, v);
            if (v < best_val) {
                best_val = v;
                hist.best_step = step;
                evals_since_best = 0;
                best.clear();
                for (const auto& [name, p] : tr) {
                    (void)name;
                    best.push_back(p.data());
                }
            } else if (++evals_since_best >= cfg.patience) {
                hist.early_stopped = true;
                break;
            }
        }
    }

    if (!best.empty()) {
        for (std::size_t i = 0; i < tr.size(); ++i) tr[i].second.leaf_data() = best[i];
        hist.best_val = best_val;
    } else {
        hist.best_step = static_cast<long>(hist.train_loss.size()) - 1;
        hist.best_val = hist.train_loss.empty() ? 0.0 : hist.train_loss.back();
    }
    return hist;
}

MetricsReport evaluate(const Model& m, const WindowSet& set) {
    if (set.size() == 0) throw ContractError("evaluate: empty split");
    const long i50 = quantile_index(m.cfg.quantiles, 0.5);
    const long i90 = quantile_index(m.cfg.quantiles, 0.9);
    const long qn = static_cast<long>(m.cfg.quantiles.size());
    const long kBatch = 256;

    NoGradGuard guard;
    MetricSums acc;
    for (long start = 0; start < set.size(); start += kBatch) {
        const long stop = std::min(set.size(), start + kBatch);
        std::vector<long> idx(stop - start);
        for (long i = start; i < stop; ++i) idx[i - start] = i;
        const ForecastBatch batch = gather_batch(set, idx);
        const ForwardResult fr = model_forward(m, batch);
        const std::vector<double>& pd = fr.pred.data();
        const long rows = (stop - start) * m.cfg.horizon;
        std::vector<double> p50(rows), p90(rows);
        for (long r = 0; r < rows; ++r) {
            p50[r] = pd[r * qn + i50];
            p90[r] = pd[r * qn + i90];
        }
        accumulate_metric_sums(p50, p90, batch.future.data(), acc);
    }
    return report_from_sums(acc);
}

}  // namespace qkcv
