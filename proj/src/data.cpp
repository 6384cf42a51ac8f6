#include "qkcv/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <random>
#include <sstream>

#include "qkcv/errors.hpp"

namespace qkcv {

namespace {

constexpr double kPi = 3.14159265358979323846;

std::string fmt17(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

// std::shuffle is not pinned across standard libraries; this is.
template <typename T>
void fisher_yates(std::vector<T>& v, std::mt19937_64& rng) {
    for (std::size_t i = v.size(); i > 1; --i) {
        std::swap(v[i - 1], v[rng() % i]);
    }
}

void check_spec(const SyntheticSpec& spec) {
    if (spec.cardinalities.empty()) throw ConfigError("synthetic: no static variables declared");
    for (long card : spec.cardinalities) {
        if (card < 1) throw ConfigError("synthetic: cardinality " + std::to_string(card) + " < 1");
        if (spec.n_entities < 2 * card) {
            throw ConfigError("synthetic: " + std::to_string(spec.n_entities) +
                              " entities cannot cover cardinality " + std::to_string(card) +
                              " twice over");
        }
    }
    if (spec.t_len < 2) throw ConfigError("synthetic: series length must be at least 2");
    if (spec.period_lo < 2 || spec.period_hi < spec.period_lo) {
        throw ConfigError("synthetic: period range [" + std::to_string(spec.period_lo) + ", " +
                          std::to_string(spec.period_hi) + "] invalid");
    }
    if (spec.base_hi < spec.base_lo || spec.amp_hi < spec.amp_lo || spec.slope_hi < spec.slope_lo) {
        throw ConfigError("synthetic: empty parameter range");
    }
    if (spec.amp_lo < 0.0) throw ConfigError("synthetic: negative amplitude");
    if (spec.noise_sd < 0.0) throw ConfigError("synthetic: negative noise scale");
}

std::string padded(const char* stem, long i, int width) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%s%0*ld", stem, width, i);
    return buf;
}

// Howard Hinnant's civil-from-days inverse: days since 1970-01-01.
long days_from_civil(long y, long m, long d) {
    y -= m <= 2;
    const long era = (y >= 0 ? y : y - 399) / 400;
    const long yoe = y - era * 400;
    const long doy = (153 * (m + (m > 2 ? -3 : 9)) + 2) / 5 + d - 1;
    const long doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    return era * 146097 + doe - 719468;
}

bool parse_timestamp(const std::string& s, long& out) {
    if (s.empty()) return false;
    // ISO date
    if (s.size() == 10 && s[4] == '-' && s[7] == '-') {
        const auto digits = [&s](int from, int to) {
            long v = 0;
            for (int i = from; i < to; ++i) {
                if (s[i] < '0' || s[i] > '9') return -1L;
                v = v * 10 + (s[i] - '0');
            }
            return v;
        };
        const long y = digits(0, 4), m = digits(5, 7), d = digits(8, 10);
        if (y < 0 || m < 1 || m > 12 || d < 1 || d > 31) return false;
        out = days_from_civil(y, m, d);
        return true;
    }
    char* end = nullptr;
    const long v = std::strtol(s.c_str(), &end, 10);
    if (end == s.c_str() || *end != '\0') return false;
    out = v;
    return true;
}

struct CsvRow {
    std::vector<std::string> fields;
    long line = 0;
};

// RFC-4180: quoted fields may contain commas, doubled quotes, and newlines.
std::vector<CsvRow> parse_rows(const std::string& text) {
    std::vector<CsvRow> rows;
    CsvRow row;
    row.line = 1;
    std::string field;
    long line = 1;
    bool in_quotes = false;
    bool any = false;
    for (std::size_t i = 0; i < text.size(); ++i) {
        const char c = text[i];
        if (in_quotes) {
            if (c == '"') {
                if (i + 1 < text.size() && text[i + 1] == '"') {
                    field += '"';
                    ++i;
                } else {
                    in_quotes = false;
                }
            } else {
                field += c;
                if (c == '\n') ++line;
            }
            continue;
        }
        switch (c) {
            case '"':
                in_quotes = true;
                any = true;
                break;
            case ',':
                row.fields.push_back(std::move(field));
                field.clear();
                any = true;
                break;
            case '\r':
                break;
            case '\n':
                row.fields.push_back(std::move(field));
                field.clear();
                if (any) rows.push_back(row);  // fully blank lines are skipped
                row = CsvRow{};
                ++line;
                row.line = line;
                any = false;
                break;
            default:
                field += c;
                any = true;
        }
    }
    if (in_quotes) throw DataError("csv: unterminated quote at end of input");
    if (any || !field.empty()) {
        row.fields.push_back(std::move(field));
        rows.push_back(row);
    }
    return rows;
}

long column_index(const CsvRow& header, const std::string& name) {
    for (std::size_t i = 0; i < header.fields.size(); ++i) {
        if (header.fields[i] == name) return static_cast<long>(i);
    }
    throw ConfigError("csv schema: column '" + name + "' not in header");
}

}  // namespace

std::vector<long> Dataset::cardinalities() const {
    std::vector<long> out;
    for (const auto& v : vocabs) out.push_back(static_cast<long>(v.size()));
    return out;
}

SyntheticResult generate_synthetic(const SyntheticSpec& spec) {
    check_spec(spec);
    std::mt19937_64 rng(spec.seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const long f_vars = static_cast<long>(spec.cardinalities.size());
    const long card0 = spec.cardinalities[0];

    SyntheticResult out;
    SyntheticTruth& truth = out.truth;
    for (long c = 0; c < card0; ++c) {
        truth.base.push_back(spec.base_lo + unit(rng) * (spec.base_hi - spec.base_lo));
        truth.amp.push_back(spec.amp_lo + unit(rng) * (spec.amp_hi - spec.amp_lo));
        const long span = spec.period_hi - spec.period_lo + 1;
        truth.period.push_back(spec.period_lo + static_cast<long>(rng() % span));
        truth.phase.push_back(unit(rng) * static_cast<double>(truth.period.back()));
    }
    for (long e = 0; e < spec.n_entities; ++e) {
        truth.slope.push_back(spec.slope_lo + unit(rng) * (spec.slope_hi - spec.slope_lo));
    }

    // balanced assignment per variable, shuffled so entity order carries no
    // information; only variable 0 reaches the target formula
    std::vector<std::vector<long>> var_codes(f_vars);
    for (long f = 0; f < f_vars; ++f) {
        var_codes[f].resize(spec.n_entities);
        for (long e = 0; e < spec.n_entities; ++e) var_codes[f][e] = e % spec.cardinalities[f];
        fisher_yates(var_codes[f], rng);
    }

    Dataset& data = out.data;
    data.origin = 0;
    data.step = 1;
    for (long f = 0; f < f_vars; ++f) {
        data.static_columns.push_back(padded("s", f, 1));
        std::vector<std::string> vocab;
        for (long c = 0; c < spec.cardinalities[f]; ++c) vocab.push_back(padded("c", c, 2));
        data.vocabs.push_back(std::move(vocab));
    }
    std::normal_distribution<double> noise(0.0, spec.noise_sd);
    for (long e = 0; e < spec.n_entities; ++e) {
        data.entity_ids.push_back(padded("e", e, 3));
        std::vector<long> codes(f_vars);
        for (long f = 0; f < f_vars; ++f) codes[f] = var_codes[f][e];
        const long c = codes[0];
        std::vector<double> y(spec.t_len);
        for (long t = 0; t < spec.t_len; ++t) {
            double v = truth.base[c] +
                       truth.amp[c] * std::sin(2.0 * kPi * (t + truth.phase[c]) / truth.period[c]) +
                       truth.slope[e] * t + noise(rng);
            v = std::max(0.0, v);
            y[t] = static_cast<double>(std::llround(v));
        }
        data.codes.push_back(std::move(codes));
        data.values.push_back(std::move(y));
    }
    return out;
}

std::string dataset_to_csv(const Dataset& data) {
    std::ostringstream out;
    out << "entity_id,timestamp,target";
    for (const auto& col : data.static_columns) out << "," << col;
    out << "\n";
    for (long e = 0; e < data.n_entities(); ++e) {
        for (long t = 0; t < data.t_len(); ++t) {
            out << data.entity_ids[e] << "," << (data.origin + t * data.step) << ","
                << fmt17(data.values[e][t]);
            for (std::size_t f = 0; f < data.static_columns.size(); ++f) {
                out << "," << data.vocabs[f][data.codes[e][f]];
            }
            out << "\n";
        }
    }
    return out.str();
}

std::string truth_to_csv(const SyntheticTruth& truth) {
    std::ostringstream out;
    out << "kind,index,base,amp,phase,period,slope\n";
    for (std::size_t c = 0; c < truth.base.size(); ++c) {
        out << "category," << c << "," << fmt17(truth.base[c]) << "," << fmt17(truth.amp[c]) << ","
            << fmt17(truth.phase[c]) << "," << truth.period[c] << ",\n";
    }
    for (std::size_t e = 0; e < truth.slope.size(); ++e) {
        out << "entity," << e << ",,,,," << fmt17(truth.slope[e]) << "\n";
    }
    return out.str();
}

std::string vocabs_to_csv(const Dataset& data) {
    std::ostringstream out;
    out << "column,code,label\n";
    for (std::size_t f = 0; f < data.static_columns.size(); ++f) {
        for (std::size_t c = 0; c < data.vocabs[f].size(); ++c) {
            out << data.static_columns[f] << "," << c << "," << data.vocabs[f][c] << "\n";
        }
    }
    return out.str();
}

Dataset parse_csv_text(const std::string& text, const DatasetSchema& schema,
                       const std::vector<std::vector<std::string>>* vocabs) {
    long step = 0;
    if (schema.frequency == "daily") step = 1;
    else if (schema.frequency == "weekly") step = 7;
    else throw ConfigError("csv schema: frequency '" + schema.frequency + "' not daily or weekly");

    const std::vector<CsvRow> rows = parse_rows(text);
    if (rows.empty()) throw DataError("csv: no header row");
    const CsvRow& header = rows[0];
    const long e_col = column_index(header, schema.entity_col);
    const long t_col = column_index(header, schema.time_col);
    const long y_col = column_index(header, schema.target_col);
    std::vector<long> s_cols;
    for (const auto& name : schema.static_cols) s_cols.push_back(column_index(header, name));

    struct Obs {
        long ts;
        double y;
        long line;
    };
    std::map<std::string, std::vector<Obs>> series;
    std::map<std::string, std::vector<std::string>> labels;    // per entity, per static col
    std::map<std::string, long> first_line;                    // entity -> defining line
    std::map<std::pair<std::string, long>, long> seen;         // (entity, ts) -> line
    for (std::size_t r = 1; r < rows.size(); ++r) {
        const CsvRow& row = rows[r];
        if (row.fields.size() != header.fields.size()) {
            throw DataError("csv line " + std::to_string(row.line) + ": " +
                            std::to_string(row.fields.size()) + " fields, header has " +
                            std::to_string(header.fields.size()));
        }
        const std::string& entity = row.fields[e_col];
        long ts = 0;
        if (!parse_timestamp(row.fields[t_col], ts)) {
            throw DataError("csv line " + std::to_string(row.line) + ": bad timestamp '" +
                            row.fields[t_col] + "'");
        }
        char* end = nullptr;
        const double y = std::strtod(row.fields[y_col].c_str(), &end);
        if (end == row.fields[y_col].c_str() || *end != '\0') {
            throw DataError("csv line " + std::to_string(row.line) + ": bad target '" +
                            row.fields[y_col] + "'");
        }
        const auto key = std::make_pair(entity, ts);
        const auto dup = seen.find(key);
        if (dup != seen.end()) {
            throw DataError("csv: duplicate (entity, timestamp) (" + entity + ", " +
                            row.fields[t_col] + ") at lines " + std::to_string(dup->second) +
                            " and " + std::to_string(row.line));
        }
        seen.emplace(key, row.line);
        series[entity].push_back({ts, y, row.line});
        std::vector<std::string> statics;
        for (long col : s_cols) statics.push_back(row.fields[col]);
        const auto known = labels.find(entity);
        if (known == labels.end()) {
            labels.emplace(entity, std::move(statics));
            first_line.emplace(entity, row.line);
        } else if (known->second != statics) {
            throw DataError("csv: static columns for entity '" + entity + "' change between lines " +
                            std::to_string(first_line[entity]) + " and " + std::to_string(row.line));
        }
    }
    if (series.empty()) throw DataError("csv: no data rows");

    long origin = 0, last = 0;
    bool first = true;
    for (const auto& [entity, obs] : series) {
        (void)entity;
        for (const Obs& o : obs) {
            origin = first ? o.ts : std::min(origin, o.ts);
            last = first ? o.ts : std::max(last, o.ts);
            first = false;
        }
    }
    for (const auto& [entity, obs] : series) {
        (void)entity;
        for (const Obs& o : obs) {
            if ((o.ts - origin) % step != 0) {
                throw DataError("csv line " + std::to_string(o.line) + ": timestamp off the " +
                                schema.frequency + " grid anchored at " + std::to_string(origin));
            }
        }
    }
    const long t_len = (last - origin) / step + 1;

    Dataset data;
    data.origin = origin;
    data.step = step;
    data.static_columns = schema.static_cols;
    if (vocabs) {
        if (vocabs->size() != schema.static_cols.size()) {
            throw ConfigError("csv schema: " + std::to_string(vocabs->size()) +
                              " vocabularies for " + std::to_string(schema.static_cols.size()) +
                              " static columns");
        }
        data.vocabs = *vocabs;
    } else {
        // sorted distinct labels; the mapping is reproducible from the data alone
        for (std::size_t f = 0; f < s_cols.size(); ++f) {
            std::vector<std::string> distinct;
            for (const auto& [entity, st] : labels) {
                (void)entity;
                distinct.push_back(st[f]);
            }
            std::sort(distinct.begin(), distinct.end());
            distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
            data.vocabs.push_back(std::move(distinct));
        }
    }

    for (auto& [entity, obs] : series) {
        data.entity_ids.push_back(entity);
        std::sort(obs.begin(), obs.end(), [](const Obs& a, const Obs& b) { return a.ts < b.ts; });
        std::vector<double> grid(t_len, 0.0);
        std::size_t next = 0;
        double carried = 0.0;  // zero until the first observation
        for (long t = 0; t < t_len; ++t) {
            const long ts = origin + t * step;
            if (next < obs.size() && obs[next].ts == ts) {
                carried = obs[next].y;
                ++next;
            }
            grid[t] = carried;
        }
        data.values.push_back(std::move(grid));

        std::vector<long> codes;
        const std::vector<std::string>& st = labels[entity];
        for (std::size_t f = 0; f < st.size(); ++f) {
            const std::vector<std::string>& vocab = data.vocabs[f];
            const auto it = std::lower_bound(vocab.begin(), vocab.end(), st[f]);
            if (it == vocab.end() || *it != st[f]) {
                throw DataError("csv: label '" + st[f] + "' for entity '" + entity +
                                "' is not in the vocabulary of column " + schema.static_cols[f]);
            }
            codes.push_back(it - vocab.begin());
        }
        data.codes.push_back(std::move(codes));
    }
    return data;
}

Dataset load_csv(const std::string& path, const DatasetSchema& schema,
                 const std::vector<std::vector<std::string>>* vocabs) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open '" + path + "'");
    std::ostringstream ss;
    ss << f.rdbuf();
    return parse_csv_text(ss.str(), schema, vocabs);
}

SplitResult split_and_window(const Dataset& data, long input_len, long horizon, long train_end,
                             long val_end) {
    if (input_len < 1 || horizon < 1) throw ConfigError("split: window lengths must be positive");
    const long t_len = data.t_len();
    if (train_end < 0 || train_end > val_end || val_end > t_len) {
        throw ConfigError("split: boundaries (" + std::to_string(train_end) + ", " +
                          std::to_string(val_end) + ") outside grid of length " +
                          std::to_string(t_len));
    }
    SplitResult out;
    const long n_statics = static_cast<long>(data.static_columns.size());
    for (WindowSet* set : {&out.train, &out.val, &out.test}) {
        set->input_len = input_len;
        set->horizon = horizon;
        set->n_statics = n_statics;
    }
    const long window = input_len + horizon;
    const std::pair<long, long> segments[3] = {{0, train_end}, {train_end, val_end}, {val_end, t_len}};
    WindowSet* sets[3] = {&out.train, &out.val, &out.test};
    for (long e = 0; e < data.n_entities(); ++e) {
        const double* y = data.values[e].data();
        const long* codes = data.codes[e].data();
        long emitted = 0;
        for (int s = 0; s < 3; ++s) {
            const auto [lo, hi] = segments[s];
            for (long start = lo; start + window <= hi; ++start) {
                sets[s]->push(y + start, y + start + input_len, codes, e);
                ++emitted;
            }
        }
        if (emitted == 0) ++out.skipped_entities;
    }
    return out;
}

}  // namespace qkcv
