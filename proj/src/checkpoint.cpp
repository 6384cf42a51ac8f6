#include "qkcv/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <vector>

#include <json.hpp>

#include "qkcv/errors.hpp"

namespace qkcv {

namespace {

using nlohmann::json;

constexpr char kMagic[8] = {'Q', 'K', 'C', 'V', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kFormatVersion = 1;

std::string hash_hex(unsigned long long h) {
    std::ostringstream os;
    os << std::hex << h;
    return os.str();
}

json config_to_json_obj(const ModelConfig& cfg) {
    json j;
    j["input_len"] = cfg.input_len;
    j["horizon"] = cfg.horizon;
    j["embed_dim"] = cfg.embed_dim;
    j["heads"] = cfg.heads;
    j["head_dim"] = cfg.head_dim;
    j["n_layers"] = cfg.n_layers;
    j["patch_len"] = cfg.patch_len;
    j["ff_hidden"] = cfg.ff_hidden;
    j["variant"] = variant_name(cfg.variant);
    switch (cfg.encoder) {
        case EncoderMode::sce: j["encoder"] = "sce"; break;
        case EncoderMode::mlp: j["encoder"] = "mlp"; break;
        case EncoderMode::none: j["encoder"] = "none"; break;
    }
    j["cardinalities"] = cfg.cardinalities;
    j["quantiles"] = cfg.quantiles;
    j["dropout"] = cfg.dropout;
    j["causal"] = cfg.causal;
    j["statics_to_input"] = cfg.statics_to_input;
    j["qkcv_layers"] = cfg.qkcv_layers;
    return j;
}

ModelConfig config_from_json_obj(const json& j) {
    ModelConfig cfg;
    try {
        cfg.input_len = j.at("input_len").get<long>();
        cfg.horizon = j.at("horizon").get<long>();
        cfg.embed_dim = j.at("embed_dim").get<long>();
        cfg.heads = j.at("heads").get<long>();
        cfg.head_dim = j.at("head_dim").get<long>();
        cfg.n_layers = j.at("n_layers").get<long>();
        cfg.patch_len = j.at("patch_len").get<long>();
        cfg.ff_hidden = j.at("ff_hidden").get<long>();
        cfg.variant = variant_from_name(j.at("variant").get<std::string>());
        const std::string enc = j.at("encoder").get<std::string>();
        if (enc == "sce") {
            cfg.encoder = EncoderMode::sce;
        } else if (enc == "mlp") {
            cfg.encoder = EncoderMode::mlp;
        } else if (enc == "none") {
            cfg.encoder = EncoderMode::none;
        } else {
            throw ConfigError("unknown encoder mode: " + enc);
        }
        cfg.cardinalities = j.at("cardinalities").get<std::vector<long>>();
        cfg.quantiles = j.at("quantiles").get<std::vector<double>>();
        cfg.dropout = j.at("dropout").get<double>();
        cfg.causal = j.at("causal").get<bool>();
        cfg.statics_to_input = j.at("statics_to_input").get<bool>();
        cfg.qkcv_layers = j.at("qkcv_layers").get<std::vector<int>>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("model config json: ") + e.what());
    }
    return cfg;
}

void append_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void append_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint32_t read_u32(const std::string& buf, std::size_t at) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[at + i])) << (8 * i);
    return v;
}

std::uint64_t read_u64(const std::string& buf, std::size_t at) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[at + i])) << (8 * i);
    return v;
}

}  // namespace

unsigned long long fnv1a64(const void* data, std::size_t n) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    unsigned long long h = 14695981039346656037ULL;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ULL;
    }
    return h;
}

unsigned long long tensor_fingerprint(const Tensor& t) {
    const std::vector<double>& d = t.data();
    return fnv1a64(d.data(), d.size() * sizeof(double));
}

unsigned long long model_content_hash(const Model& m) {
    unsigned long long h = 14695981039346656037ULL;
    for (const auto& [name, p] : m.params()) {
        (void)name;
        const std::vector<double>& d = p.data();
        const unsigned char* bytes = reinterpret_cast<const unsigned char*>(d.data());
        for (std::size_t i = 0; i < d.size() * sizeof(double); ++i) {
            h ^= bytes[i];
            h *= 1099511628211ULL;
        }
    }
    return h;
}

std::string model_config_to_json(const ModelConfig& cfg) { return config_to_json_obj(cfg).dump(); }

ModelConfig model_config_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("model config json: ") + e.what());
    }
    return config_from_json_obj(j);
}

void save_model(const std::string& path, const Model& m) {
    const ParamMap params = m.params();
    json manifest;
    manifest["format_version"] = kFormatVersion;
    manifest["config"] = config_to_json_obj(m.cfg);
    manifest["seed"] = m.seed;
    json plist = json::array();
    for (const auto& [name, p] : params) {
        json e;
        e["name"] = name;
        e["shape"] = p.shape();
        plist.push_back(e);
    }
    manifest["params"] = plist;
    manifest["scaler"]["mean"] = m.scaler.mean;
    manifest["scaler"]["scale"] = m.scaler.scale;
    manifest["content_hash"] = hash_hex(model_content_hash(m));

    std::string out(kMagic, sizeof(kMagic));
    append_u32(out, kFormatVersion);
    const std::string mtext = manifest.dump();
    append_u64(out, mtext.size());
    out += mtext;
    for (const auto& [name, p] : params) {
        (void)name;
        const std::vector<double>& d = p.data();
        out.append(reinterpret_cast<const char*>(d.data()), d.size() * sizeof(double));
    }

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("checkpoint: cannot open " + path + " for writing");
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw DataError("checkpoint: short write to " + path);
}

Model load_model(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("checkpoint: cannot open " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    const std::string buf = ss.str();

    if (buf.size() < sizeof(kMagic) + 12 || std::memcmp(buf.data(), kMagic, sizeof(kMagic)) != 0) {
        throw DataError("checkpoint: " + path + " is not a model container");
    }
    const std::uint32_t version = read_u32(buf, sizeof(kMagic));
    if (version != kFormatVersion) {
        throw DataError("checkpoint: unsupported format version " + std::to_string(version));
    }
    const std::uint64_t mlen = read_u64(buf, sizeof(kMagic) + 4);
    const std::size_t mstart = sizeof(kMagic) + 12;
    if (mstart + mlen > buf.size()) throw DataError("checkpoint: truncated manifest in " + path);

    json manifest;
    try {
        manifest = json::parse(buf.substr(mstart, mlen));
    } catch (const json::exception& e) {
        throw DataError(std::string("checkpoint manifest: ") + e.what());
    }

    Model m;
    try {
        m = build_model(config_from_json_obj(manifest.at("config")),
                        manifest.at("seed").get<unsigned long>());
        m.scaler.mean = manifest.at("scaler").at("mean").get<std::vector<double>>();
        m.scaler.scale = manifest.at("scaler").at("scale").get<std::vector<double>>();
        if (m.scaler.mean.size() != m.scaler.scale.size()) {
            throw DataError("checkpoint: scaler mean/scale lengths disagree");
        }

        ParamMap params = m.params();
        std::size_t at = mstart + mlen;
        for (const auto& entry : manifest.at("params")) {
            const std::string name = entry.at("name").get<std::string>();
            const Shape shape = entry.at("shape").get<Shape>();
            Tensor target;
            for (const auto& [pname, p] : params) {
                if (pname == name) {
                    target = p;
                    break;
                }
            }
            if (!target.defined()) throw DataError("checkpoint: unknown parameter " + name);
            if (!shapes_equal(target.shape(), shape)) {
                throw DataError("checkpoint: parameter " + name + " has shape " + shape_str(shape) +
                                ", model expects " + shape_str(target.shape()));
            }
            const std::size_t bytes = static_cast<std::size_t>(target.numel()) * sizeof(double);
            if (at + bytes > buf.size()) throw DataError("checkpoint: truncated blob for " + name);
            std::memcpy(target.leaf_data().data(), buf.data() + at, bytes);
            at += bytes;
        }
        if (at != buf.size()) throw DataError("checkpoint: trailing bytes in " + path);

        const std::string want = manifest.at("content_hash").get<std::string>();
        if (hash_hex(model_content_hash(m)) != want) {
            throw DataError("checkpoint: content hash mismatch in " + path);
        }
    } catch (const json::exception& e) {
        throw DataError(std::string("checkpoint manifest: ") + e.what());
    }
    return m;
}

}  // namespace qkcv
