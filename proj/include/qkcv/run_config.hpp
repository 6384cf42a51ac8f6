// One structured document per run: sections for the model, the optimizer,
// and the data source, with dotted-path overrides from the command line.
#pragma once

#include <string>

#include <json.hpp>

#include "qkcv/data.hpp"
#include "qkcv/forecaster.hpp"

namespace qkcv {

using Json = nlohmann::json;

// The complete schema with every field at its default. Run documents may
// state any subset; unknown keys are configuration errors.
Json default_run_config();

Json parse_run_config(const std::string& text);
Json load_run_config(const std::string& path);

// "section.field=value"; the value is parsed as a JSON literal when it is
// one, otherwise taken as a string. Validation happens on the merged result.
void apply_override(Json& config, const std::string& assignment);

// Fills defaults, rejects unknown keys, returns the merged document.
Json validate_run_config(const Json& config);

ModelConfig model_config_from_run(const Json& config);
TrainConfig train_config_from_run(const Json& config);
SyntheticSpec synthetic_spec_from_run(const Json& config);
DatasetSchema schema_from_run(const Json& config);

struct LoadedData {
    Dataset data;
    SplitResult splits;
};

// Builds the dataset named by data.source and windows it with the model's
// lengths. Boundaries of -1 place train_end at 80% and val_end at 90% of
// the grid.
LoadedData load_data_from_run(const Json& config);

// Model config with cardinalities resolved against the dataset: an empty
// list inherits the data's, a stated list must match it.
ModelConfig resolved_model_config(const Json& config, const Dataset& data);

// Stable two-space rendering used for manifests and hashing.
std::string canonical_dump(const Json& config);

}  // namespace qkcv
