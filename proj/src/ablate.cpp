#include "balab/ablate.hpp"

#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "balab/train.hpp"

namespace balab {

namespace fs = std::filesystem;

AblationGrid AblationGrid::from_string(const std::string& text) {
    AblationGrid grid;
    std::vector<std::string> segments;
    {
        std::istringstream is(text);
        std::string line, current;
        while (std::getline(is, line)) {
            std::string probe = line;
            const size_t hash = probe.find('#');
            if (hash != std::string::npos) probe = probe.substr(0, hash);
            probe.erase(0, probe.find_first_not_of(" \t\r"));
            if (!probe.empty() && probe.back() == '\r') probe.pop_back();
            while (!probe.empty() && (probe.back() == ' ' || probe.back() == '\t'))
                probe.pop_back();
            if (probe == "[sweep]") {
                segments.push_back(current);
                current.clear();
            } else {
                current += line;
                current += "\n";
            }
        }
        segments.push_back(current);
    }
    grid.base = LabConfig::from_string(segments[0]);
    for (size_t i = 1; i < segments.size(); ++i) {
        Sweep sweep;
        for (const auto& [key, value] : parse_kv_lines(segments[i])) {
            SweepAxis axis;
            axis.key = key;
            std::istringstream vs(value);
            std::string item;
            while (std::getline(vs, item, ',')) {
                const size_t a = item.find_first_not_of(" \t");
                const size_t b = item.find_last_not_of(" \t");
                if (a == std::string::npos) continue;
                axis.values.push_back(item.substr(a, b - a + 1));
            }
            if (axis.values.empty())
                throw ConfigError("sweep axis '" + key + "' lists no values");
            sweep.axes.push_back(std::move(axis));
        }
        if (sweep.axes.empty()) throw ConfigError("empty [sweep] section in grid file");
        grid.sweeps.push_back(std::move(sweep));
    }
    if (grid.sweeps.empty()) throw ConfigError("grid file declares no [sweep] section");
    return grid;
}

AblationGrid AblationGrid::from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open grid file '" + path + "'");
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return from_string(text);
}

std::vector<std::string> AblationGrid::axis_keys() const {
    std::vector<std::string> keys;
    for (const Sweep& sweep : sweeps)
        for (const SweepAxis& axis : sweep.axes)
            if (std::find(keys.begin(), keys.end(), axis.key) == keys.end())
                keys.push_back(axis.key);
    return keys;
}

std::vector<GridPoint> AblationGrid::points() const {
    std::vector<GridPoint> out;
    for (const Sweep& sweep : sweeps) {
        std::vector<size_t> idx(sweep.axes.size(), 0);
        for (;;) {
            GridPoint point;
            point.config = base;
            for (size_t a = 0; a < sweep.axes.size(); ++a) {
                const SweepAxis& axis = sweep.axes[a];
                const std::string& value = axis.values[idx[a]];
                set_config_key(point.config, axis.key, value);
                point.assignment.emplace_back(axis.key, value);
            }
            point.config.run_name = "p" + std::to_string(out.size());
            point.config.validate();
            out.push_back(std::move(point));
            // odometer, last axis fastest
            size_t a = sweep.axes.size();
            while (a > 0) {
                --a;
                if (++idx[a] < sweep.axes[a].values.size()) break;
                idx[a] = 0;
                if (a == 0) goto sweep_done;
            }
        }
    sweep_done:;
    }
    return out;
}

namespace {

AblateRow run_point(const GridPoint& point, const std::vector<std::string>& axis_keys,
                    const std::string& out_dir) {
    AblateRow row;
    row.run_name = point.config.run_name;
    for (const std::string& key : axis_keys) {
        std::string value = get_config_key(point.config, key);
        row.axes.emplace_back(key, value);
    }
    try {
        const Dataset data = make_dataset(point.config.task, point.config.model.vocab);
        Model model = Model::build(point.config.model, DType::f32, point.config.train.seed);
        row.trainable_params = model.trainable_param_count();
        row.total_params = model.total_param_count();
        const TrainReport report = train(model, data, point.config.train);
        row.overall_acc = report.final_overall_acc;
        row.text_acc = report.final_text_acc;
        row.image_acc = report.final_image_acc;
        row.seconds = report.wall_seconds;
        const fs::path dir = fs::path(out_dir) / "points" / point.config.run_name;
        fs::create_directories(dir);
        report.write_jsonl((dir / "report.jsonl").string());
        std::ofstream cfg_out(dir / "config.txt");
        cfg_out << point.config.serialize();
    } catch (const std::exception& e) {
        row.status = std::string("failed: ") + e.what();
    }
    return row;
}

nlohmann::json row_to_json(const AblateRow& row) {
    nlohmann::json j;
    j["run_name"] = row.run_name;
    for (const auto& [k, v] : row.axes) j["axes"][k] = v;
    j["trainable_params"] = row.trainable_params;
    j["total_params"] = row.total_params;
    j["overall_acc"] = row.overall_acc;
    j["text_acc"] = row.text_acc;
    j["image_acc"] = row.image_acc;
    j["seconds"] = row.seconds;
    j["status"] = row.status;
    return j;
}

AblateRow row_from_json(const nlohmann::json& j, const std::vector<std::string>& axis_keys) {
    AblateRow row;
    row.run_name = j.at("run_name").get<std::string>();
    for (const std::string& key : axis_keys)
        row.axes.emplace_back(key, j.at("axes").at(key).get<std::string>());
    row.trainable_params = j.at("trainable_params").get<int64_t>();
    row.total_params = j.at("total_params").get<int64_t>();
    row.overall_acc = j.at("overall_acc").get<double>();
    row.text_acc = j.at("text_acc").get<double>();
    row.image_acc = j.at("image_acc").get<double>();
    row.seconds = j.at("seconds").get<double>();
    row.status = j.at("status").get<std::string>();
    return row;
}

int env_thread_cap() {
    const char* env = std::getenv("BA_LAB_THREADS");
    if (env == nullptr) return 0;
    const int v = std::atoi(env);
    return v > 0 ? v : 0;
}

}  // namespace

AblateResult run_ablation(const AblationGrid& grid, const std::string& out_dir, int jobs) {
    AblateResult result;
    result.axis_keys = grid.axis_keys();
    const std::vector<GridPoint> pts = grid.points();
    fs::create_directories(out_dir);

    const int cap = env_thread_cap();
    if (cap > 0) jobs = std::min(jobs, cap);
    if (jobs < 1) jobs = 1;

    if (jobs == 1) {
        for (const GridPoint& point : pts)
            result.rows.push_back(run_point(point, result.axis_keys, out_dir));
    } else {
        // one forked process per point; results merge through files only
        const fs::path results_dir = fs::path(out_dir) / "results";
        fs::create_directories(results_dir);
        std::vector<pid_t> running;
        auto reap_one = [&] {
            int status = 0;
            const pid_t done = waitpid(-1, &status, 0);
            running.erase(std::remove(running.begin(), running.end(), done), running.end());
        };
        for (size_t i = 0; i < pts.size(); ++i) {
            while (static_cast<int>(running.size()) >= jobs) reap_one();
            const pid_t pid = fork();
            if (pid < 0) throw InputError("fork failed while launching sweep points");
            if (pid == 0) {
                AblateRow row = run_point(pts[i], result.axis_keys, out_dir);
                std::ofstream out(results_dir / (pts[i].config.run_name + ".json"));
                out << row_to_json(row).dump();
                out.close();
                _exit(row.ok() ? 0 : 1);
            }
            running.push_back(pid);
        }
        while (!running.empty()) reap_one();
        for (const GridPoint& point : pts) {
            const fs::path file = results_dir / (point.config.run_name + ".json");
            std::ifstream in(file);
            if (!in) {
                AblateRow row;
                row.run_name = point.config.run_name;
                for (const std::string& key : result.axis_keys)
                    row.axes.emplace_back(key, get_config_key(point.config, key));
                row.status = "failed: worker produced no result";
                result.rows.push_back(std::move(row));
                continue;
            }
            nlohmann::json j;
            in >> j;
            result.rows.push_back(row_from_json(j, result.axis_keys));
        }
    }
    for (const AblateRow& row : result.rows)
        if (!row.ok()) result.any_failed = true;
    return result;
}

void write_ablation_csv(const AblateResult& result, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw InputError("cannot open '" + path + "' for writing");
    for (const std::string& key : result.axis_keys) out << key << ",";
    out << "trainable_params,total_params,overall_acc,text_acc,image_acc,seconds,status\n";
    for (const AblateRow& row : result.rows) {
        for (const auto& [key, value] : row.axes) out << value << ",";
        out << row.trainable_params << "," << row.total_params << "," << format_double(row.overall_acc)
            << "," << format_double(row.text_acc) << "," << format_double(row.image_acc) << ","
            << format_double(row.seconds) << "," << (row.ok() ? "ok" : "failed") << "\n";
    }
}

void write_ablation_json(const AblateResult& result, const std::string& path) {
    nlohmann::json arr = nlohmann::json::array();
    for (const AblateRow& row : result.rows) arr.push_back(row_to_json(row));
    std::ofstream out(path);
    if (!out) throw InputError("cannot open '" + path + "' for writing");
    out << arr.dump(2) << "\n";
}

}  // namespace balab
