#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "balab/model.hpp"
#include "balab/tasks.hpp"

namespace balab {

struct TrainConfig {
    double lr = 0.009;
    double weight_decay = 0.02;
    int epochs = 20;
    int batch_size = 1;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    uint64_t seed = 0;
    std::optional<double> grad_clip;

    void validate() const;  // throws ConfigError
};

// AdamW with decoupled weight decay:
//   theta <- theta - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * theta
// Moments kept in double; parameters updated in their own dtype. Parameters
// without a grad buffer this step are skipped.
class AdamW {
  public:
    AdamW(std::vector<ParamRef> trainables, const TrainConfig& cfg);

    void step();
    void zero_grads();
    int64_t steps_taken() const { return t_; }

  private:
    struct Moments {
        std::vector<double> m, v;
        int64_t t = 0;
    };
    std::vector<ParamRef> params_;
    std::vector<Moments> state_;
    TrainConfig cfg_;
    int64_t t_ = 0;
};

struct EpochStat {
    int epoch = 0;
    double mean_loss = 0.0;
    double eval_acc = 0.0;
    double seconds = 0.0;
};

struct TrainReport {
    std::vector<EpochStat> epochs;
    double final_overall_acc = 0.0;
    double final_text_acc = 0.0;
    double final_image_acc = 0.0;
    int64_t trainable_params = 0;
    int64_t total_params = 0;
    double wall_seconds = 0.0;

    // one JSON record per epoch: epoch, mean_loss, eval_acc, seconds
    void write_jsonl(const std::string& path) const;
};

struct EvalAccuracy {
    double overall = 0.0;
    double text_only = 0.0;
    double text_image = 0.0;
    int n_text = 0;
    int n_image = 0;
    // per task kind: {hits, total}
    std::vector<std::pair<TaskKind, std::pair<int, int>>> by_kind;
};

EvalAccuracy evaluate_greedy(const Model& model, const std::vector<Sample>& eval_set,
                             int max_new_tokens = 4);

// Fixed-lr AdamW loop over the dataset: epochs x passes, deterministic order
// given the seed, per-epoch greedy eval. Throws DivergenceError on non-finite
// loss.
TrainReport train(Model& model, const Dataset& data, const TrainConfig& cfg);

}  // namespace balab
