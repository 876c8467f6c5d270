#pragma once

#include <string>
#include <utility>
#include <vector>

#include "balab/config.hpp"

namespace balab {

// Grid file = base config lines, then one or more [sweep] sections. Each
// sweep lists axes as comma-separated values over config keys; its points
// are the cartesian product, and the run is the concatenation of all sweeps:
//
//   model.adapter.family = bottleneck
//   [sweep]
//   model.adapter.bottleneck_dim = 4,8,16,32
//   model.adapter.groups = 2
//   [sweep]
//   model.adapter.bottleneck_dim = 16
//   model.adapter.groups = 4

struct SweepAxis {
    std::string key;
    std::vector<std::string> values;
};

struct Sweep {
    std::vector<SweepAxis> axes;
};

struct GridPoint {
    LabConfig config;
    std::vector<std::pair<std::string, std::string>> assignment;
};

struct AblationGrid {
    LabConfig base;
    std::vector<Sweep> sweeps;

    static AblationGrid from_string(const std::string& text);
    static AblationGrid from_file(const std::string& path);

    std::vector<std::string> axis_keys() const;  // first-appearance order
    std::vector<GridPoint> points() const;       // validated configs
};

struct AblateRow {
    std::string run_name;
    std::vector<std::pair<std::string, std::string>> axes;
    int64_t trainable_params = 0;
    int64_t total_params = 0;
    double overall_acc = 0.0;
    double text_acc = 0.0;
    double image_acc = 0.0;
    double seconds = 0.0;
    std::string status = "ok";  // "ok" or "failed: <reason>"
    bool ok() const { return status == "ok"; }
};

struct AblateResult {
    std::vector<std::string> axis_keys;
    std::vector<AblateRow> rows;
    bool any_failed = false;
};

// Trains every grid point. jobs > 1 forks one process per point (capped by
// the BA_LAB_THREADS environment variable); results merge through files.
AblateResult run_ablation(const AblationGrid& grid, const std::string& out_dir, int jobs);

void write_ablation_csv(const AblateResult& result, const std::string& path);
void write_ablation_json(const AblateResult& result, const std::string& path);

}  // namespace balab
