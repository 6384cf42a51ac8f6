#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>
#include <string>
#include <vector>

#include "qkcv/data.hpp"
#include "qkcv/errors.hpp"
#include "qkcv/run_config.hpp"

using namespace qkcv;

namespace {

SyntheticSpec flat_spec() {
    SyntheticSpec spec;
    spec.cardinalities = {2};
    spec.n_entities = 4;
    spec.t_len = 30;
    spec.base_lo = 5.0;
    spec.base_hi = 5.0;
    spec.amp_lo = 0.0;
    spec.amp_hi = 0.0;
    spec.slope_lo = 0.0;
    spec.slope_hi = 0.0;
    spec.noise_sd = 0.0;
    return spec;
}

double autocorr(const std::vector<double>& y, long lag) {
    const long n = static_cast<long>(y.size());
    double mean = 0.0;
    for (double v : y) mean += v / n;
    double num = 0.0, den = 0.0;
    for (long t = 0; t < n; ++t) den += (y[t] - mean) * (y[t] - mean);
    for (long t = 0; t + lag < n; ++t) num += (y[t] - mean) * (y[t + lag] - mean);
    return num / den;
}

}  // namespace

TEST_CASE("degenerate generator settings produce constant series at the base level") {
    const SyntheticResult r = generate_synthetic(flat_spec());
    REQUIRE(r.data.n_entities() == 4);
    for (long e = 0; e < 4; ++e) {
        const double want = std::llround(r.truth.base[r.data.codes[e][0]]);
        for (double v : r.data.values[e]) REQUIRE(v == want);
    }
}

TEST_CASE("entities sharing every code and slope get identical noise-free series") {
    SyntheticSpec spec = flat_spec();
    spec.cardinalities = {1};
    spec.n_entities = 2;
    spec.amp_lo = spec.amp_hi = 3.0;
    spec.base_lo = spec.base_hi = 20.0;
    const SyntheticResult r = generate_synthetic(spec);
    REQUIRE(r.data.values[0] == r.data.values[1]);
}

TEST_CASE("generation is deterministic per seed and sensitive to it") {
    SyntheticSpec spec;
    spec.cardinalities = {3};
    spec.n_entities = 6;
    spec.t_len = 40;
    spec.seed = 77;
    const SyntheticResult a = generate_synthetic(spec);
    const SyntheticResult b = generate_synthetic(spec);
    CHECK(a.data.values == b.data.values);
    CHECK(a.data.codes == b.data.codes);
    spec.seed = 78;
    const SyntheticResult c = generate_synthetic(spec);
    CHECK(a.data.values != c.data.values);
}

TEST_CASE("seasonal series echo at the true period, not at half of it") {
    SyntheticSpec spec;
    spec.cardinalities = {2};
    spec.n_entities = 4;
    spec.t_len = 96;
    spec.base_lo = 40.0;
    spec.base_hi = 40.0;
    spec.amp_lo = spec.amp_hi = 8.0;
    spec.period_lo = spec.period_hi = 12;
    spec.slope_lo = spec.slope_hi = 0.0;
    spec.noise_sd = 0.2;
    const SyntheticResult r = generate_synthetic(spec);
    for (long e = 0; e < r.data.n_entities(); ++e) {
        CHECK(autocorr(r.data.values[e], 12) > autocorr(r.data.values[e], 6));
    }
}

TEST_CASE("category truth is written alongside and matches the code assignment") {
    SyntheticSpec spec;
    spec.cardinalities = {4, 3};
    spec.n_entities = 8;
    spec.t_len = 50;
    spec.noise_sd = 0.0;
    spec.slope_lo = spec.slope_hi = 0.0;
    spec.base_lo = 30.0;
    spec.base_hi = 80.0;
    const SyntheticResult r = generate_synthetic(spec);
    REQUIRE(r.truth.base.size() == 4);
    REQUIRE(r.truth.slope.size() == 8);
    // noise-free series start where the truth formula says they must
    for (long e = 0; e < 8; ++e) {
        const long c = r.data.codes[e][0];
        const double t0 = r.truth.base[c] +
                          r.truth.amp[c] * std::sin(2.0 * 3.14159265358979323846 *
                                                    r.truth.phase[c] / r.truth.period[c]);
        CHECK(r.data.values[e][0] == std::llround(std::max(0.0, t0)));
    }
    // every category of every variable is represented
    for (std::size_t f = 0; f < 2; ++f) {
        std::set<long> seen;
        for (long e = 0; e < 8; ++e) seen.insert(r.data.codes[e][f]);
        CHECK(seen.size() == static_cast<std::size_t>(spec.cardinalities[f]));
    }
}

TEST_CASE("generator rejects malformed specs") {
    SyntheticSpec spec = flat_spec();
    spec.n_entities = 3;  // cannot cover cardinality 2 twice
    CHECK_THROWS_AS(generate_synthetic(spec), ConfigError);
    spec = flat_spec();
    spec.cardinalities = {};
    CHECK_THROWS_AS(generate_synthetic(spec), ConfigError);
    spec = flat_spec();
    spec.noise_sd = -1.0;
    CHECK_THROWS_AS(generate_synthetic(spec), ConfigError);
    spec = flat_spec();
    spec.period_lo = 1;
    CHECK_THROWS_AS(generate_synthetic(spec), ConfigError);
}

TEST_CASE("interior gaps are filled with the last observation") {
    DatasetSchema schema;
    schema.static_cols = {};
    schema.frequency = "weekly";
    const Dataset d = parse_csv_text(
        "entity_id,timestamp,target\n"
        "a,7,5\n"
        "a,21,7\n",
        schema);
    REQUIRE(d.t_len() == 3);
    CHECK(d.values[0] == std::vector<double>{5.0, 5.0, 7.0});
}

TEST_CASE("iso dates land on the weekly grid and fill the same way") {
    DatasetSchema schema;
    schema.frequency = "weekly";
    const Dataset d = parse_csv_text(
        "entity_id,timestamp,target\n"
        "a,2020-01-06,5\n"
        "a,2020-01-20,7\n",
        schema);
    REQUIRE(d.t_len() == 3);
    CHECK(d.values[0] == std::vector<double>{5.0, 5.0, 7.0});
    CHECK_THROWS_AS(parse_csv_text("entity_id,timestamp,target\n"
                                   "a,2020-01-06,5\n"
                                   "a,2020-01-15,7\n",  // nine days later
                                   schema),
                    DataError);
}

TEST_CASE("an entity first observed later gets leading zeros back to the panel origin") {
    DatasetSchema schema;
    const Dataset d = parse_csv_text(
        "entity_id,timestamp,target\n"
        "a,1,9\n"
        "a,2,9\n"
        "a,3,9\n"
        "a,4,9\n"
        "b,4,6\n"
        "b,5,2\n"
        "a,5,9\n",
        schema);
    REQUIRE(d.t_len() == 5);
    CHECK(d.entity_ids == std::vector<std::string>{"a", "b"});
    CHECK(d.values[1] == std::vector<double>{0.0, 0.0, 0.0, 6.0, 2.0});
    // trailing gap carries the last observation forward
    const Dataset d2 = parse_csv_text(
        "entity_id,timestamp,target\n"
        "a,1,9\n"
        "a,3,8\n"
        "b,1,1\n"
        "b,2,2\n",
        schema);
    CHECK(d2.values[1] == std::vector<double>{1.0, 2.0, 2.0});
}

TEST_CASE("duplicate (entity, timestamp) rows are refused with both line numbers") {
    DatasetSchema schema;
    try {
        parse_csv_text(
            "entity_id,timestamp,target\n"
            "a,1,5\n"
            "b,1,3\n"
            "a,1,6\n",
            schema);
        FAIL("expected DataError");
    } catch (const DataError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("duplicate") != std::string::npos);
        CHECK(msg.find("2") != std::string::npos);
        CHECK(msg.find("4") != std::string::npos);
    }
}

TEST_CASE("category labels map to sorted stable codes and vocabularies persist") {
    DatasetSchema schema;
    schema.static_cols = {"kind"};
    const std::string text =
        "entity_id,timestamp,target,kind\n"
        "a,1,5,melon\n"
        "b,1,3,apple\n"
        "c,1,2,melon\n";
    const Dataset d1 = parse_csv_text(text, schema);
    const Dataset d2 = parse_csv_text(text, schema);
    CHECK(d1.vocabs == d2.vocabs);
    CHECK(d1.codes == d2.codes);
    CHECK(d1.vocabs[0] == std::vector<std::string>{"apple", "melon"});
    CHECK(d1.codes[0][0] == 1);  // a -> melon
    CHECK(d1.codes[1][0] == 0);  // b -> apple

    // re-encoding with its own vocabulary is the identity
    const Dataset d3 = parse_csv_text(text, schema, &d1.vocabs);
    CHECK(d3.codes == d1.codes);

    // a vocabulary that lacks a label refuses the file
    const std::vector<std::vector<std::string>> foreign = {{"apple"}};
    CHECK_THROWS_AS(parse_csv_text(text, schema, &foreign), DataError);
}

TEST_CASE("schema problems are configuration errors") {
    DatasetSchema schema;
    schema.static_cols = {"nope"};
    CHECK_THROWS_AS(parse_csv_text("entity_id,timestamp,target\na,1,5\n", schema), ConfigError);
    schema = DatasetSchema{};
    schema.frequency = "hourly";
    CHECK_THROWS_AS(parse_csv_text("entity_id,timestamp,target\na,1,5\n", schema), ConfigError);
}

TEST_CASE("quoted fields carry commas and escaped quotes through intact") {
    DatasetSchema schema;
    schema.static_cols = {"kind"};
    const Dataset d = parse_csv_text(
        "entity_id,timestamp,target,kind\n"
        "\"a,1\",1,5,\"he said \"\"hi\"\"\"\n",
        schema);
    CHECK(d.entity_ids[0] == "a,1");
    CHECK(d.vocabs[0][0] == "he said \"hi\"");
}

TEST_CASE("window counts follow the closed formula per split") {
    SyntheticSpec spec = flat_spec();
    spec.t_len = 20;
    const Dataset d = generate_synthetic(spec).data;

    const SplitResult single = split_and_window(d, 6, 3, 20, 20);
    CHECK(single.train.size() == 4 * 12);  // 20 - 6 - 3 + 1 per entity
    CHECK(single.val.size() == 0);
    CHECK(single.test.size() == 0);
    CHECK(single.skipped_entities == 0);

    const SplitResult three = split_and_window(d, 4, 2, 10, 15);
    CHECK(three.train.size() == 4 * (10 - 4 - 2 + 1));
    CHECK(three.val.size() == 4 * 0);  // segment of 5 is shorter than 6
    CHECK(three.test.size() == 4 * 0);
    const SplitResult wide = split_and_window(d, 2, 1, 10, 16);
    CHECK(wide.train.size() == 4 * 8);
    CHECK(wide.val.size() == 4 * 4);
    CHECK(wide.test.size() == 4 * 2);
}

TEST_CASE("windows never cross their split boundaries in either direction") {
    SyntheticSpec spec;
    spec.cardinalities = {2};
    spec.n_entities = 4;
    spec.t_len = 60;
    spec.seed = 5;
    const Dataset d = generate_synthetic(spec).data;
    const long l_in = 6, l_out = 3, train_end = 30, val_end = 45;
    const SplitResult s = split_and_window(d, l_in, l_out, train_end, val_end);

    // recover each window's absolute start by matching its history against
    // the entity's series, then check full containment
    const auto scan = [&](const WindowSet& set, long lo, long hi) {
        for (long w = 0; w < set.size(); ++w) {
            const long e = set.entities[w];
            const double* h = set.history.data() + w * l_in;
            long start = -1;
            for (long cand = lo; cand + l_in + l_out <= hi; ++cand) {
                bool match = true;
                for (long i = 0; i < l_in && match; ++i) {
                    match = d.values[e][cand + i] == h[i];
                }
                if (match) {
                    bool fut = true;
                    for (long i = 0; i < l_out && fut; ++i) {
                        fut = d.values[e][cand + l_in + i] == set.future[w * l_out + i];
                    }
                    if (fut) {
                        start = cand;
                        break;
                    }
                }
            }
            REQUIRE(start >= lo);
            REQUIRE(start + l_in + l_out <= hi);
        }
    };
    scan(s.train, 0, train_end);
    scan(s.val, train_end, val_end);
    scan(s.test, val_end, 60);
    CHECK(s.train.size() + s.val.size() + s.test.size() > 0);
}

TEST_CASE("entities too short for a single window are counted as skipped") {
    SyntheticSpec spec = flat_spec();
    spec.t_len = 8;
    const Dataset d = generate_synthetic(spec).data;
    const SplitResult s = split_and_window(d, 6, 3, 8, 8);
    CHECK(s.train.size() == 0);
    CHECK(s.skipped_entities == 4);
    CHECK_THROWS_AS(split_and_window(d, 6, 3, 9, 9), ConfigError);
}

TEST_CASE("run config defaults, overrides, and unknown keys") {
    Json config = parse_run_config("{\"seed\": 9, \"model\": {\"embed_dim\": 16}}");
    CHECK(config.at("seed").get<long>() == 9);
    CHECK(config.at("model").at("embed_dim").get<long>() == 16);
    CHECK(config.at("model").at("heads").get<long>() == 4);  // untouched default

    apply_override(config, "model.variant=v2");
    apply_override(config, "train.lr=0.01");
    apply_override(config, "data.csv.path=panel.csv");
    config = validate_run_config(config);
    CHECK(model_config_from_run(config).variant == Variant::v2);
    CHECK(train_config_from_run(config).lr == 0.01);
    CHECK(config.at("data").at("csv").at("path").get<std::string>() == "panel.csv");

    CHECK_THROWS_AS(parse_run_config("{\"modl\": {}}"), ConfigError);
    CHECK_THROWS_AS(parse_run_config("{\"model\": {\"embd\": 3}}"), ConfigError);
    CHECK_THROWS_AS(parse_run_config("not json"), ConfigError);
    CHECK_THROWS_AS(apply_override(config, "no-equals-sign"), ConfigError);
}

TEST_CASE("csv round trip: generated panel survives serialization and reload") {
    SyntheticSpec spec;
    spec.cardinalities = {3, 2};
    spec.n_entities = 6;
    spec.t_len = 25;
    spec.seed = 31;
    const SyntheticResult r = generate_synthetic(spec);
    DatasetSchema schema;
    schema.static_cols = {"s0", "s1"};
    const Dataset back = parse_csv_text(dataset_to_csv(r.data), schema);
    CHECK(back.values == r.data.values);
    CHECK(back.codes == r.data.codes);
    CHECK(back.vocabs == r.data.vocabs);
    CHECK(back.entity_ids == r.data.entity_ids);
}
