#include "qkcv/run_config.hpp"

#include <fstream>
#include <sstream>

#include "qkcv/checkpoint.hpp"
#include "qkcv/errors.hpp"

namespace qkcv {

namespace {

void require_known_keys(const Json& user, const Json& schema, const std::string& path) {
    for (const auto& [key, value] : user.items()) {
        if (!schema.contains(key)) {
            throw ConfigError("config: unknown field '" + (path.empty() ? key : path + "." + key) +
                              "'");
        }
        if (value.is_object() && schema.at(key).is_object()) {
            require_known_keys(value, schema.at(key), path.empty() ? key : path + "." + key);
        }
    }
}

void merge_into(Json& base, const Json& user) {
    for (const auto& [key, value] : user.items()) {
        if (value.is_object() && base.at(key).is_object()) {
            merge_into(base.at(key), value);
        } else {
            base[key] = value;
        }
    }
}

}  // namespace

Json default_run_config() {
    Json j;
    j["seed"] = 0;
    j["checkpoint"] = "";

    j["model"] = Json::parse(model_config_to_json(ModelConfig{}));

    const TrainConfig tc;
    Json train;
    train["lr"] = tc.lr;
    train["max_steps"] = tc.max_steps;
    train["batch_size"] = tc.batch_size;
    train["seed"] = tc.seed;
    train["patience"] = tc.patience;
    train["eval_every"] = tc.eval_every;
    train["beta1"] = tc.beta1;
    train["beta2"] = tc.beta2;
    train["eps"] = tc.eps;
    j["train"] = train;

    const SyntheticSpec spec;
    Json synth;
    synth["cardinalities"] = spec.cardinalities;
    synth["n_entities"] = spec.n_entities;
    synth["t_len"] = spec.t_len;
    synth["base_lo"] = spec.base_lo;
    synth["base_hi"] = spec.base_hi;
    synth["amp_lo"] = spec.amp_lo;
    synth["amp_hi"] = spec.amp_hi;
    synth["period_lo"] = spec.period_lo;
    synth["period_hi"] = spec.period_hi;
    synth["slope_lo"] = spec.slope_lo;
    synth["slope_hi"] = spec.slope_hi;
    synth["noise_sd"] = spec.noise_sd;
    synth["seed"] = spec.seed;

    const DatasetSchema schema;
    Json csv;
    csv["path"] = "";
    csv["entity_col"] = schema.entity_col;
    csv["time_col"] = schema.time_col;
    csv["target_col"] = schema.target_col;
    csv["static_cols"] = schema.static_cols;
    csv["frequency"] = schema.frequency;

    Json data;
    data["source"] = "synthetic";
    data["synthetic"] = synth;
    data["csv"] = csv;
    data["train_end"] = -1;
    data["val_end"] = -1;
    j["data"] = data;

    Json ft;
    ft["mode"] = "PL";
    ft["variant"] = "v1";
    ft["encoder"] = "sce";
    ft["base"] = "";
    ft["seed"] = 1;
    j["finetune"] = ft;

    return j;
}

Json parse_run_config(const std::string& text) {
    Json j;
    try {
        j = Json::parse(text);
    } catch (const Json::exception& e) {
        throw ConfigError(std::string("config json: ") + e.what());
    }
    return validate_run_config(j);
}

Json load_run_config(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ConfigError("cannot open config '" + path + "'");
    std::ostringstream ss;
    ss << f.rdbuf();
    return parse_run_config(ss.str());
}

void apply_override(Json& config, const std::string& assignment) {
    const std::size_t eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) {
        throw ConfigError("override '" + assignment + "' is not key=value");
    }
    const std::string path = assignment.substr(0, eq);
    const std::string raw = assignment.substr(eq + 1);
    Json value;
    try {
        value = Json::parse(raw);
    } catch (const Json::exception&) {
        value = raw;  // bare strings need no quoting on the command line
    }
    Json* node = &config;
    std::size_t from = 0;
    while (true) {
        const std::size_t dot = path.find('.', from);
        const std::string key = path.substr(from, dot == std::string::npos ? dot : dot - from);
        if (key.empty()) throw ConfigError("override '" + assignment + "' has an empty path step");
        if (dot == std::string::npos) {
            (*node)[key] = value;
            return;
        }
        node = &(*node)[key];
        from = dot + 1;
    }
}

Json validate_run_config(const Json& config) {
    if (!config.is_object()) throw ConfigError("config: document root must be an object");
    Json merged = default_run_config();
    require_known_keys(config, merged, "");
    merge_into(merged, config);
    return merged;
}

ModelConfig model_config_from_run(const Json& config) {
    return model_config_from_json(config.at("model").dump());
}

TrainConfig train_config_from_run(const Json& config) {
    const Json& t = config.at("train");
    TrainConfig tc;
    try {
        tc.lr = t.at("lr").get<double>();
        tc.max_steps = t.at("max_steps").get<long>();
        tc.batch_size = t.at("batch_size").get<long>();
        tc.seed = t.at("seed").get<unsigned long>();
        tc.patience = t.at("patience").get<long>();
        tc.eval_every = t.at("eval_every").get<long>();
        tc.beta1 = t.at("beta1").get<double>();
        tc.beta2 = t.at("beta2").get<double>();
        tc.eps = t.at("eps").get<double>();
    } catch (const Json::exception& e) {
        throw ConfigError(std::string("config train section: ") + e.what());
    }
    return tc;
}

SyntheticSpec synthetic_spec_from_run(const Json& config) {
    const Json& s = config.at("data").at("synthetic");
    SyntheticSpec spec;
    try {
        spec.cardinalities = s.at("cardinalities").get<std::vector<long>>();
        spec.n_entities = s.at("n_entities").get<long>();
        spec.t_len = s.at("t_len").get<long>();
        spec.base_lo = s.at("base_lo").get<double>();
        spec.base_hi = s.at("base_hi").get<double>();
        spec.amp_lo = s.at("amp_lo").get<double>();
        spec.amp_hi = s.at("amp_hi").get<double>();
        spec.period_lo = s.at("period_lo").get<long>();
        spec.period_hi = s.at("period_hi").get<long>();
        spec.slope_lo = s.at("slope_lo").get<double>();
        spec.slope_hi = s.at("slope_hi").get<double>();
        spec.noise_sd = s.at("noise_sd").get<double>();
        spec.seed = s.at("seed").get<unsigned long>();
    } catch (const Json::exception& e) {
        throw ConfigError(std::string("config synthetic section: ") + e.what());
    }
    return spec;
}

DatasetSchema schema_from_run(const Json& config) {
    const Json& c = config.at("data").at("csv");
    DatasetSchema schema;
    try {
        schema.entity_col = c.at("entity_col").get<std::string>();
        schema.time_col = c.at("time_col").get<std::string>();
        schema.target_col = c.at("target_col").get<std::string>();
        schema.static_cols = c.at("static_cols").get<std::vector<std::string>>();
        schema.frequency = c.at("frequency").get<std::string>();
    } catch (const Json::exception& e) {
        throw ConfigError(std::string("config csv section: ") + e.what());
    }
    return schema;
}

LoadedData load_data_from_run(const Json& config) {
    const std::string source = config.at("data").at("source").get<std::string>();
    LoadedData out;
    if (source == "synthetic") {
        out.data = generate_synthetic(synthetic_spec_from_run(config)).data;
    } else if (source == "csv") {
        const std::string path = config.at("data").at("csv").at("path").get<std::string>();
        if (path.empty()) throw ConfigError("config: data.source is csv but data.csv.path is empty");
        out.data = load_csv(path, schema_from_run(config));
    } else {
        throw ConfigError("config: data.source '" + source + "' is not synthetic or csv");
    }
    const ModelConfig mc = model_config_from_run(config);
    long train_end = config.at("data").at("train_end").get<long>();
    long val_end = config.at("data").at("val_end").get<long>();
    const long t_len = out.data.t_len();
    if (train_end < 0) train_end = t_len * 8 / 10;
    if (val_end < 0) val_end = t_len * 9 / 10;
    out.splits = split_and_window(out.data, mc.input_len, mc.horizon, train_end, val_end);
    return out;
}

ModelConfig resolved_model_config(const Json& config, const Dataset& data) {
    ModelConfig mc = model_config_from_run(config);
    if (mc.encoder != EncoderMode::none || mc.statics_to_input) {
        const std::vector<long> cards = data.cardinalities();
        if (mc.cardinalities.empty()) {
            mc.cardinalities = cards;
        } else if (mc.cardinalities != cards) {
            throw ConfigError("config: model.cardinalities do not match the dataset's static columns");
        }
    }
    return mc;
}

std::string canonical_dump(const Json& config) { return config.dump(2) + "\n"; }

}  // namespace qkcv
