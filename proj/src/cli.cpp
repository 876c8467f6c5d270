#include "balab/cli.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "balab/ablate.hpp"
#include "balab/checkpoint.hpp"
#include "balab/config.hpp"
#include "balab/gradcheck.hpp"
#include "balab/sampling.hpp"
#include "balab/train.hpp"

namespace balab {

namespace fs = std::filesystem;

namespace {

struct CliOptions {
    std::string config_path;
    std::string grid_path;
    std::string checkpoint_path;
    std::string out;
    std::string prompt;
    int sample_index = -1;
    int jobs = 1;
    std::optional<uint64_t> seed;
    bool corrupt_backward = false;
};

LabConfig load_config(const CliOptions& opt) {
    if (opt.config_path.empty()) throw ConfigError("--config is required");
    LabConfig cfg = LabConfig::from_file(opt.config_path);
    if (opt.seed) {
        cfg.train.seed = *opt.seed;
        cfg.sample.seed = *opt.seed;
        cfg.task.seed = cfg.task.seed;  // the dataset stays tied to the config
    }
    if (!opt.out.empty()) cfg.output_dir = opt.out;
    cfg.validate();
    return cfg;
}

std::string percent(double v) {
    std::ostringstream os;
    os.precision(2);
    os << std::fixed << v * 100.0 << "%";
    return os.str();
}

int cmd_train(const CliOptions& opt) {
    LabConfig cfg = load_config(opt);
    const fs::path run_dir = fs::path(cfg.output_dir) / cfg.run_name;
    if (fs::exists(run_dir))
        throw ConfigError("run.name collision: '" + run_dir.string() + "' already exists");
    fs::create_directories(run_dir);

    const Dataset data = make_dataset(cfg.task, cfg.model.vocab);
    Model model = Model::build(cfg.model, DType::f32, cfg.train.seed);
    const TrainReport report = train(model, data, cfg.train);

    std::ofstream cfg_out(run_dir / "config.txt");
    cfg_out << cfg.serialize();
    report.write_jsonl((run_dir / "report.jsonl").string());
    save_model_checkpoint((run_dir / "checkpoint.balb").string(), model);
    fs::create_directories(run_dir / "dataset");
    export_jsonl(data.train, (run_dir / "dataset" / "train.jsonl").string());
    export_jsonl(data.eval, (run_dir / "dataset" / "eval.jsonl").string());

    std::ostringstream summary;
    summary << "run: " << cfg.run_name << "\n"
            << "epochs: " << report.epochs.size() << "\n"
            << "final_loss: " << format_double(report.epochs.back().mean_loss) << "\n"
            << "eval_overall: " << percent(report.final_overall_acc) << "\n"
            << "eval_text_only: " << percent(report.final_text_acc) << "\n"
            << "eval_text_image: " << percent(report.final_image_acc) << "\n"
            << "trainable_params: " << report.trainable_params << "\n"
            << "total_params: " << report.total_params << "\n"
            << "trainable_fraction: "
            << percent(static_cast<double>(report.trainable_params) / report.total_params) << "\n"
            << "wall_seconds: " << format_double(report.wall_seconds) << "\n"
            << "checkpoint: " << (run_dir / "checkpoint.balb").string() << "\n";
    std::ofstream sum_out(run_dir / "summary.txt");
    sum_out << summary.str();
    std::cout << summary.str();
    return kExitOk;
}

int cmd_eval(const CliOptions& opt) {
    LabConfig cfg = load_config(opt);
    if (opt.checkpoint_path.empty()) throw ConfigError("--checkpoint is required");
    Model model = Model::build(cfg.model, DType::f32, cfg.train.seed);
    load_model_checkpoint(opt.checkpoint_path, model);
    const Dataset data = make_dataset(cfg.task, cfg.model.vocab);
    const EvalAccuracy acc = evaluate_greedy(model, data.eval, cfg.sample.max_new_tokens);
    std::cout << "eval_overall: " << percent(acc.overall) << "\n"
              << "eval_text_only: " << percent(acc.text_only) << " (" << acc.n_text << " samples)\n"
              << "eval_text_image: " << percent(acc.text_image) << " (" << acc.n_image
              << " samples)\n";
    for (const auto& [kind, hits_total] : acc.by_kind)
        std::cout << "eval_kind_" << task_kind_name(kind) << ": " << hits_total.first << "/"
                  << hits_total.second << "\n";
    if (!opt.out.empty()) {
        nlohmann::json j = {{"overall", acc.overall},
                            {"text_only", acc.text_only},
                            {"text_image", acc.text_image},
                            {"n_text", acc.n_text},
                            {"n_image", acc.n_image}};
        std::ofstream out(opt.out);
        out << j.dump(2) << "\n";
    }
    return kExitOk;
}

int cmd_ablate(const CliOptions& opt) {
    if (opt.grid_path.empty()) throw ConfigError("--grid is required");
    AblationGrid grid = AblationGrid::from_file(opt.grid_path);
    if (opt.seed) grid.base.train.seed = *opt.seed;
    const std::string out_dir = !opt.out.empty()
                                    ? opt.out
                                    : (fs::path(grid.base.output_dir) /
                                       (grid.base.run_name + "_ablate"))
                                          .string();
    if (fs::exists(out_dir))
        throw ConfigError("ablation output '" + out_dir + "' already exists");
    const AblateResult result = run_ablation(grid, out_dir, opt.jobs);
    write_ablation_csv(result, (fs::path(out_dir) / "results.csv").string());
    write_ablation_json(result, (fs::path(out_dir) / "results.json").string());

    for (const std::string& key : result.axis_keys) std::cout << key << ",";
    std::cout << "trainable_params,overall_acc,status\n";
    for (const AblateRow& row : result.rows) {
        for (const auto& [k, v] : row.axes) std::cout << v << ",";
        std::cout << row.trainable_params << "," << format_double(row.overall_acc) << ","
                  << (row.ok() ? "ok" : "failed") << "\n";
    }
    std::cout << "results: " << (fs::path(out_dir) / "results.csv").string() << "\n";
    return result.any_failed ? kExitFailure : kExitOk;
}

int cmd_gradcheck(const CliOptions& opt) {
    if (!opt.config_path.empty()) load_config(opt);  // validated, fixtures stay fixed-size
    const GradcheckReport report = run_gradcheck(opt.corrupt_backward);
    for (const GradcheckRow& row : report.rows)
        std::cout << (row.pass ? "PASS " : "FAIL ") << row.component << " max_rel_err "
                  << format_double(row.max_rel_err) << "\n";
    if (!report.all_pass) {
        std::cerr << "gradient check failed: " << report.first_failure()->component << " at "
                  << format_double(report.first_failure()->max_rel_err) << " (threshold "
                  << format_double(report.threshold) << ")\n";
        return kExitGradcheck;
    }
    std::cout << "all " << report.rows.size() << " components below "
              << format_double(report.threshold) << "\n";
    return kExitOk;
}

int cmd_params(const CliOptions& opt) {
    LabConfig cfg = load_config(opt);
    ModelConfig float_cfg = cfg.model;
    float_cfg.quantize_backbone = false;
    Model model = Model::build(float_cfg, DType::f32, cfg.train.seed);
    const int64_t total = model.total_param_count();
    const int64_t trainable = model.trainable_param_count();
    int64_t float_bytes = 0;
    for (const ParamRef& p : model.params)
        float_bytes += static_cast<int64_t>(p.tensor.numel() * dtype_size(p.tensor.dtype()));
    const MemoryReport mem = model.quantize();
    int64_t quant_bytes = 0;
    for (const ParamRef& p : model.params)
        quant_bytes += static_cast<int64_t>(p.tensor.numel() * dtype_size(p.tensor.dtype()));

    std::cout << "total_params: " << total << "\n"
              << "trainable_params: " << trainable << "\n"
              << "trainable_fraction: " << percent(static_cast<double>(trainable) / total) << "\n"
              << "float_bytes: " << float_bytes << "\n"
              << "quantized_bytes: " << quant_bytes << "\n"
              << "backbone_weight_bytes_float: " << mem.float_weight_bytes << "\n"
              << "backbone_weight_bytes_quant: " << mem.quant_weight_bytes << "\n"
              << "backbone_weight_reduction: " << format_double(mem.reduction_ratio()) << "x\n";
    if (!opt.out.empty()) {
        nlohmann::json j = {{"total_params", total},
                            {"trainable_params", trainable},
                            {"trainable_fraction", static_cast<double>(trainable) / total},
                            {"float_bytes", float_bytes},
                            {"quantized_bytes", quant_bytes},
                            {"backbone_weight_bytes_float", mem.float_weight_bytes},
                            {"backbone_weight_bytes_quant", mem.quant_weight_bytes}};
        std::ofstream out(opt.out);
        out << j.dump(2) << "\n";
    }
    return kExitOk;
}

int cmd_generate(const CliOptions& opt) {
    LabConfig cfg = load_config(opt);
    if (opt.checkpoint_path.empty()) throw ConfigError("--checkpoint is required");
    if (!fs::exists(opt.checkpoint_path))
        throw InputError("checkpoint '" + opt.checkpoint_path + "' does not exist");
    Model model = Model::build(cfg.model, DType::f32, cfg.train.seed);
    load_model_checkpoint(opt.checkpoint_path, model);

    Sample sample;
    std::vector<int> gold;
    if (!opt.prompt.empty()) {
        sample.modality = Modality::text_only;
        sample.instruction = tokenize(opt.prompt);
        if (sample.instruction.empty() || sample.instruction.back() != kAnsId)
            sample.instruction.push_back(kAnsId);
    } else if (opt.sample_index >= 0) {
        const Dataset data = make_dataset(cfg.task, cfg.model.vocab);
        if (opt.sample_index >= static_cast<int>(data.eval.size()))
            throw InputError("--sample-index " + std::to_string(opt.sample_index) +
                             " is out of range (eval split holds " +
                             std::to_string(data.eval.size()) + " samples)");
        sample = data.eval[static_cast<size_t>(opt.sample_index)];
        gold = sample.answer;
    } else {
        throw ConfigError("generate needs either --prompt or --sample-index");
    }

    SampleConfig sampler = cfg.sample;
    if (opt.seed) sampler.seed = *opt.seed;
    Rng rng(sampler.seed);
    const std::vector<int> out_ids = generate(model, sample, sampler, rng);
    std::cout << "prompt: " << detokenize(sample.instruction) << "\n"
              << "output: " << detokenize(out_ids) << "\n";
    if (!gold.empty()) std::cout << "gold: " << detokenize(gold) << "\n";
    return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args) {
    CLI::App app{"desk-scale lab for parameter-efficient multimodal adapter tuning"};
    app.require_subcommand(1);
    CliOptions opt;

    auto add_common = [&](CLI::App* cmd, bool with_config) {
        if (with_config) cmd->add_option("--config", opt.config_path, "config file");
        cmd->add_option("--seed", opt.seed, "override train/sample seed");
        cmd->add_option("--out", opt.out, "output override");
        return cmd;
    };

    CLI::App* train_cmd = add_common(app.add_subcommand("train", "train from a config"), true);
    CLI::App* eval_cmd = add_common(app.add_subcommand("eval", "evaluate a checkpoint"), true);
    eval_cmd->add_option("--checkpoint", opt.checkpoint_path, "checkpoint file");
    CLI::App* ablate_cmd = add_common(app.add_subcommand("ablate", "run a sweep grid"), false);
    ablate_cmd->add_option("--grid", opt.grid_path, "grid file");
    ablate_cmd->add_option("--jobs", opt.jobs, "parallel worker processes");
    CLI::App* gradcheck_cmd =
        add_common(app.add_subcommand("gradcheck", "verify gradients against central differences"),
                   true);
    gradcheck_cmd->add_flag("--corrupt-backward", opt.corrupt_backward,
                            "insert a wrong-gradient fixture (negative control)");
    CLI::App* params_cmd = add_common(app.add_subcommand("params", "parameter and byte budget"), true);
    CLI::App* generate_cmd = add_common(app.add_subcommand("generate", "decode from a checkpoint"), true);
    generate_cmd->add_option("--checkpoint", opt.checkpoint_path, "checkpoint file");
    generate_cmd->add_option("--prompt", opt.prompt, "text-only instruction words");
    generate_cmd->add_option("--sample-index", opt.sample_index, "eval sample to prompt with");

    std::vector<const char*> argv;
    argv.push_back("balab");
    for (const std::string& a : args) argv.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitConfig;
    }

    try {
        if (train_cmd->parsed()) return cmd_train(opt);
        if (eval_cmd->parsed()) return cmd_eval(opt);
        if (ablate_cmd->parsed()) return cmd_ablate(opt);
        if (gradcheck_cmd->parsed()) return cmd_gradcheck(opt);
        if (params_cmd->parsed()) return cmd_params(opt);
        if (generate_cmd->parsed()) return cmd_generate(opt);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const SpecError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const InputError& e) {
        std::cerr << "input error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const DivergenceError& e) {
        std::cerr << "divergence: " << e.what() << "\n";
        return kExitDiverged;
    } catch (const FingerprintError& e) {
        std::cerr << "fingerprint mismatch: " << e.what() << "\n";
        return kExitFingerprint;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitFailure;
    }
    return kExitFailure;
}

}  // namespace balab
