#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <string>

#include "balab/adapters.hpp"
#include "balab/cli.hpp"
#include "balab/config.hpp"

using namespace balab;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag) : path(fs::path("/tmp") / ("balab_cli_" + tag)) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string str(const std::string& rel = "") const { return (path / rel).string(); }
};

std::string tiny_config_text(const std::string& out_dir, const std::string& run_name) {
    return "run.name = " + run_name + "\n" +
           "run.output_dir = " + out_dir + "\n" +
           "model.enc_layers = 4\n"
           "model.enc_dim = 16\n"
           "model.enc_heads = 2\n"
           "model.patch_size = 4\n"
           "model.image_size = 8\n"
           "model.lm_layers = 2\n"
           "model.lm_dim = 16\n"
           "model.lm_heads = 2\n"
           "model.vocab = 64\n"
           "model.max_seq = 48\n"
           "model.cls_stride = 2\n"
           "model.neck_dim = 8\n"
           "model.adapter.bottleneck_dim = 4\n"
           "model.adapter.groups = 2\n"
           "train.epochs = 2\n"
           "train.seed = 11\n"
           "task.kind = copy_text\n"
           "task.train_size = 10\n"
           "task.eval_size = 3\n"
           "task.seed = 4\n";
}

std::string write_file(const std::string& path, const std::string& text) {
    std::ofstream out(path);
    out << text;
    return path;
}

int count_lines(const std::string& path) {
    std::ifstream in(path);
    int n = 0;
    std::string line;
    while (std::getline(in, line)) ++n;
    return n;
}

}  // namespace

TEST_CASE("cli train writes a run directory and reports per epoch") {
    TempDir tmp("train");
    const std::string cfg = write_file(tmp.str("lab.cfg"), tiny_config_text(tmp.str("runs"), "demo"));
    CHECK(run_cli({"train", "--config", cfg}) == kExitOk);
    CHECK(fs::exists(tmp.str("runs/demo/checkpoint.balb")));
    CHECK(fs::exists(tmp.str("runs/demo/config.txt")));
    CHECK(fs::exists(tmp.str("runs/demo/summary.txt")));
    CHECK(count_lines(tmp.str("runs/demo/report.jsonl")) == 2);  // one record per epoch

    // rerunning the same run name collides
    CHECK(run_cli({"train", "--config", cfg}) == kExitConfig);
}

TEST_CASE("cli rejects invalid configs with exit 2") {
    TempDir tmp("badcfg");
    std::string text = tiny_config_text(tmp.str("runs"), "bad");
    text += "model.adapter.groups = 3\n";  // does not divide bottleneck_dim
    const std::string cfg = write_file(tmp.str("bad.cfg"), text);
    CHECK(run_cli({"train", "--config", cfg}) == kExitConfig);
    CHECK(run_cli({"train", "--config", tmp.str("missing.cfg")}) == kExitConfig);
    CHECK(run_cli({"train"}) == kExitConfig);
    CHECK(run_cli({"frobnicate"}) == kExitConfig);
}

TEST_CASE("cli eval, params and generate against a trained checkpoint") {
    TempDir tmp("evalgen");
    const std::string cfg = write_file(tmp.str("lab.cfg"), tiny_config_text(tmp.str("runs"), "run1"));
    REQUIRE(run_cli({"train", "--config", cfg}) == kExitOk);
    const std::string ck = tmp.str("runs/run1/checkpoint.balb");

    CHECK(run_cli({"eval", "--config", cfg, "--checkpoint", ck, "--out", tmp.str("eval.json")}) ==
          kExitOk);
    CHECK(fs::exists(tmp.str("eval.json")));

    CHECK(run_cli({"params", "--config", cfg, "--out", tmp.str("params.json")}) == kExitOk);
    CHECK(fs::exists(tmp.str("params.json")));

    CHECK(run_cli({"generate", "--config", cfg, "--checkpoint", ck, "--prompt", "copy a b"}) ==
          kExitOk);
    CHECK(run_cli({"generate", "--config", cfg, "--checkpoint", ck, "--sample-index", "0"}) ==
          kExitOk);
    CHECK(run_cli({"generate", "--config", cfg, "--checkpoint", ck, "--sample-index", "999"}) ==
          kExitConfig);
    CHECK(run_cli({"generate", "--config", cfg, "--checkpoint", tmp.str("none.balb"), "--prompt",
                   "copy a"}) == kExitConfig);

    // a checkpoint trained under another seed has a different fingerprint
    std::string other = tiny_config_text(tmp.str("runs"), "run2");
    other += "train.seed = 12\n";  // later assignment wins
    const std::string cfg2 = write_file(tmp.str("lab2.cfg"), other);
    REQUIRE(run_cli({"train", "--config", cfg2}) == kExitOk);
    CHECK(run_cli({"generate", "--config", cfg, "--checkpoint", tmp.str("runs/run2/checkpoint.balb"),
                   "--prompt", "copy a"}) == kExitFingerprint);
}

TEST_CASE("cli gradcheck exits 0 normally and 4 under the negative control") {
    CHECK(run_cli({"gradcheck"}) == kExitOk);
    CHECK(run_cli({"gradcheck", "--corrupt-backward"}) == kExitGradcheck);
}

TEST_CASE("cli ablate emits one csv row per grid point") {
    TempDir tmp("ablate");
    std::string grid = tiny_config_text(tmp.str("runs"), "sweep");
    grid += "train.epochs = 1\ntask.train_size = 6\ntask.eval_size = 2\n";
    grid += "[sweep]\nmodel.adapter.bottleneck_dim = 4,8\nmodel.adapter.groups = 2\n";
    const std::string grid_path = write_file(tmp.str("grid.cfg"), grid);

    CHECK(run_cli({"ablate", "--grid", grid_path, "--out", tmp.str("sweep_out")}) == kExitOk);
    const std::string csv = tmp.str("sweep_out/results.csv");
    REQUIRE(fs::exists(csv));
    CHECK(count_lines(csv) == 3);  // header + 2 points

    std::ifstream in(csv);
    std::string header;
    std::getline(in, header);
    CHECK(header ==
          "model.adapter.bottleneck_dim,model.adapter.groups,trainable_params,total_params,"
          "overall_acc,text_acc,image_acc,seconds,status");

    // parameter column matches the adapter-count oracle plus the shared head
    std::string row;
    std::getline(in, row);
    const size_t c1 = row.find(',');
    const size_t c2 = row.find(',', c1 + 1);
    const long long trainable = std::stoll(row.substr(c2 + 1));
    AdapterSpec spec;
    spec.channel_dim = 16;
    spec.bottleneck_dim = 4;
    spec.groups = 2;
    // 4 encoder sites + 2 lm sites, plus neck and two prefixes
    const long long neck = 16 * 8 + 8 + 8 * 16 + 16;
    const long long expect = 10 * count_params(spec) + neck + 2 * 16;
    CHECK(trainable == expect);

    // reusing the output directory collides
    CHECK(run_cli({"ablate", "--grid", grid_path, "--out", tmp.str("sweep_out")}) == kExitConfig);
}

TEST_CASE("cli ablate forks workers when jobs exceed one") {
    TempDir tmp("ablatefork");
    std::string grid = tiny_config_text(tmp.str("runs"), "sweepf");
    grid += "train.epochs = 1\ntask.train_size = 4\ntask.eval_size = 2\n";
    grid += "[sweep]\nmodel.adapter.bottleneck_dim = 4,8\n";
    const std::string grid_path = write_file(tmp.str("grid.cfg"), grid);
    CHECK(run_cli({"ablate", "--grid", grid_path, "--jobs", "2", "--out", tmp.str("out")}) ==
          kExitOk);
    CHECK(count_lines(tmp.str("out/results.csv")) == 3);
}
