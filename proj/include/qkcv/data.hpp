// Synthetic panel generation, CSV ingestion with gap regularization, and
// chronological split + sliding-window construction.
#pragma once

#include <string>
#include <vector>

#include "qkcv/forecaster.hpp"

namespace qkcv {

// A rectangular panel: every entity holds one value per grid point. The grid
// runs from `origin` in increments of `step` (both in the timestamp's own
// units, plain integers or epoch days).
struct Dataset {
    std::vector<std::string> static_columns;
    std::vector<std::vector<std::string>> vocabs;  // per column, code -> label
    std::vector<std::string> entity_ids;           // sorted, defines entity index order
    std::vector<std::vector<long>> codes;          // per entity, one code per static column
    std::vector<std::vector<double>> values;       // per entity, grid-aligned
    long origin = 0;
    long step = 1;

    long n_entities() const { return static_cast<long>(entity_ids.size()); }
    long t_len() const { return values.empty() ? 0 : static_cast<long>(values[0].size()); }
    std::vector<long> cardinalities() const;
};

// Sinusoid-plus-trend panel. Variable 0 is the informative one: its category
// picks the level, amplitude, phase and period of the seasonal component.
// Remaining variables get balanced but shuffled category assignments that
// never touch the target, so they act as pure noise covariates.
struct SyntheticSpec {
    std::vector<long> cardinalities = {8};  // one per static variable
    long n_entities = 64;
    long t_len = 200;
    double base_lo = 10.0, base_hi = 60.0;
    double amp_lo = 2.0, amp_hi = 9.0;
    long period_lo = 8, period_hi = 16;
    double slope_lo = 0.0, slope_hi = 0.05;
    double noise_sd = 1.0;
    unsigned long seed = 0;
};

// Generator ground truth, written alongside the data so tests can verify the
// category signal exists without trusting the model.
struct SyntheticTruth {
    std::vector<double> base, amp, phase;  // per category of variable 0
    std::vector<long> period;
    std::vector<double> slope;  // per entity
};

struct SyntheticResult {
    Dataset data;
    SyntheticTruth truth;
};

// y_t = base_c + amp_c*sin(2*pi*(t+phase_c)/period_c) + slope_e*t + noise,
// clipped at zero and rounded to whole units. Deterministic per spec.seed.
SyntheticResult generate_synthetic(const SyntheticSpec& spec);

std::string dataset_to_csv(const Dataset& data);
std::string truth_to_csv(const SyntheticTruth& truth);
std::string vocabs_to_csv(const Dataset& data);

struct DatasetSchema {
    std::string entity_col = "entity_id";
    std::string time_col = "timestamp";
    std::string target_col = "target";
    std::vector<std::string> static_cols;
    std::string frequency = "daily";  // daily | weekly
};

// RFC-4180 CSV with a header row. Timestamps are integers or ISO dates
// (YYYY-MM-DD, converted to days); the grid spans the panel-wide range at
// the declared frequency. Per entity: values before the first observation
// become 0, every later gap repeats the last observation. Category labels
// map to codes by sorted order; pass `vocabs` to reuse an existing mapping
// (labels outside it are data errors).
Dataset load_csv(const std::string& path, const DatasetSchema& schema,
                 const std::vector<std::vector<std::string>>* vocabs = nullptr);

Dataset parse_csv_text(const std::string& text, const DatasetSchema& schema,
                       const std::vector<std::vector<std::string>>* vocabs = nullptr);

struct SplitResult {
    WindowSet train, val, test;
    long skipped_entities = 0;  // entities that produced no window at all
};

// Stride-1 windows assigned to the split that fully contains them, history
// and future both: train covers grid [0, train_end), val [train_end,
// val_end), test [val_end, T). Per entity and split the window count is
// max(0, segment_len - input_len - horizon + 1), so nothing an entity
// contributes to one split ever overlaps another split's targets.
SplitResult split_and_window(const Dataset& data, long input_len, long horizon, long train_end,
                             long val_end);

}  // namespace qkcv
