#pragma once

#include <string>
#include <utility>
#include <vector>

#include "balab/model.hpp"
#include "balab/sampling.hpp"
#include "balab/tasks.hpp"
#include "balab/train.hpp"

namespace balab {

// Flat, typed key-value config with dotted section prefixes, e.g.
//   model.enc_layers = 8
//   model.adapter.family = bottleneck
//   task.kind = mixed
// '#' starts a comment. Unknown keys are rejected with the key named.
struct LabConfig {
    ModelConfig model;
    TrainConfig train;
    SampleConfig sample;
    TaskSpec task;
    std::string output_dir = "runs";
    std::string run_name = "run";

    void validate() const;
    std::string serialize() const;
    std::vector<std::pair<std::string, std::string>> serialize_pairs() const;
    uint64_t fingerprint() const { return model.fingerprint(train.seed); }

    static LabConfig from_string(const std::string& text);
    static LabConfig from_file(const std::string& path);
};

// throws ConfigError naming the key on unknown keys or unparsable values
void set_config_key(LabConfig& cfg, const std::string& key, const std::string& value);
std::string get_config_key(const LabConfig& cfg, const std::string& key);

// comment/blank-stripped "key = value" pairs in file order
std::vector<std::pair<std::string, std::string>> parse_kv_lines(const std::string& text);

std::string format_double(double v);  // shortest exact round-trip decimal

}  // namespace balab
