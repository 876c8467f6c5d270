#include "balab/train.hpp"

#include <chrono>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "balab/ops.hpp"
#include "balab/rng.hpp"
#include "balab/sampling.hpp"

namespace balab {

void TrainConfig::validate() const {
    if (lr <= 0.0) throw ConfigError("train.lr must be positive");
    if (weight_decay < 0.0) throw ConfigError("train.weight_decay must be non-negative");
    if (epochs < 1) throw ConfigError("train.epochs must be at least 1");
    if (batch_size < 1) throw ConfigError("train.batch_size must be at least 1");
    if (beta1 <= 0.0 || beta1 >= 1.0 || beta2 <= 0.0 || beta2 >= 1.0)
        throw ConfigError("train.beta1/train.beta2 must lie in (0, 1)");
    if (eps <= 0.0) throw ConfigError("train.eps must be positive");
    if (grad_clip && *grad_clip <= 0.0) throw ConfigError("train.grad_clip must be positive");
}

AdamW::AdamW(std::vector<ParamRef> trainables, const TrainConfig& cfg)
    : params_(std::move(trainables)), cfg_(cfg) {
    cfg_.validate();
    state_.resize(params_.size());
    for (size_t i = 0; i < params_.size(); ++i) {
        state_[i].m.assign(params_[i].tensor.numel(), 0.0);
        state_[i].v.assign(params_[i].tensor.numel(), 0.0);
    }
}

void AdamW::zero_grads() {
    for (ParamRef& p : params_) p.tensor.zero_grad();
}

void AdamW::step() {
    ++t_;
    for (size_t pi = 0; pi < params_.size(); ++pi) {
        ParamRef& p = params_[pi];
        if (!p.tensor.has_grad()) continue;  // untouched this step
        Moments& st = state_[pi];
        // bias correction tracks this tensor's own update count
        ++st.t;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(st.t));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(st.t));
        const size_t n = p.tensor.numel();
        auto update = [&](auto* theta, const auto* grad) {
            for (size_t i = 0; i < n; ++i) {
                const double g = static_cast<double>(grad[i]);
                if (!std::isfinite(g))
                    throw NumericError("non-finite gradient in parameter '" + p.name + "'");
                st.m[i] = cfg_.beta1 * st.m[i] + (1.0 - cfg_.beta1) * g;
                st.v[i] = cfg_.beta2 * st.v[i] + (1.0 - cfg_.beta2) * g * g;
                const double m_hat = st.m[i] / bc1;
                const double v_hat = st.v[i] / bc2;
                const double theta0 = static_cast<double>(theta[i]);
                const double next =
                    theta0 - cfg_.lr * m_hat / (std::sqrt(v_hat) + cfg_.eps) -
                    cfg_.lr * cfg_.weight_decay * theta0;
                theta[i] = static_cast<std::remove_reference_t<decltype(theta[i])>>(next);
            }
        };
        if (p.tensor.dtype() == DType::f32)
            update(p.tensor.mutable_data<float>().data(), p.tensor.grad<float>().data());
        else
            update(p.tensor.mutable_data<double>().data(), p.tensor.grad<double>().data());
    }
}

EvalAccuracy evaluate_greedy(const Model& model, const std::vector<Sample>& eval_set,
                             int max_new_tokens) {
    EvalAccuracy acc;
    int hit_text = 0, hit_image = 0;
    auto kind_slot = [&](TaskKind k) -> std::pair<int, int>& {
        for (auto& [kind, hits_total] : acc.by_kind)
            if (kind == k) return hits_total;
        acc.by_kind.emplace_back(k, std::pair<int, int>{0, 0});
        return acc.by_kind.back().second;
    };
    for (const Sample& s : eval_set) {
        const std::vector<int> pred = generate_greedy(model, s, max_new_tokens);
        const bool ok = exact_match(pred, s.answer);
        auto& [hits, total] = kind_slot(s.meta.kind);
        ++total;
        hits += ok;
        if (s.modality == Modality::text_image) {
            ++acc.n_image;
            hit_image += ok;
        } else {
            ++acc.n_text;
            hit_text += ok;
        }
    }
    acc.text_only = acc.n_text > 0 ? static_cast<double>(hit_text) / acc.n_text : 0.0;
    acc.text_image = acc.n_image > 0 ? static_cast<double>(hit_image) / acc.n_image : 0.0;
    const int total = acc.n_text + acc.n_image;
    acc.overall = total > 0 ? static_cast<double>(hit_text + hit_image) / total : 0.0;
    return acc;
}

namespace {

double grad_global_norm(const std::vector<ParamRef>& params) {
    double sq = 0.0;
    for (const ParamRef& p : params) {
        if (!p.tensor.has_grad()) continue;
        if (p.tensor.dtype() == DType::f32) {
            for (float v : p.tensor.grad<float>()) sq += static_cast<double>(v) * v;
        } else {
            for (double v : p.tensor.grad<double>()) sq += v * v;
        }
    }
    return std::sqrt(sq);
}

void scale_grads(std::vector<ParamRef>& params, double factor) {
    for (ParamRef& p : params) {
        if (!p.tensor.has_grad()) continue;
        if (p.tensor.dtype() == DType::f32) {
            for (float& v : p.tensor.grad<float>()) v = static_cast<float>(v * factor);
        } else {
            for (double& v : p.tensor.grad<double>()) v *= factor;
        }
    }
}

}  // namespace

TrainReport train(Model& model, const Dataset& data, const TrainConfig& cfg) {
    cfg.validate();
    if (data.train.empty()) throw ContractError("train: dataset is empty");
    const auto wall_start = std::chrono::steady_clock::now();

    std::vector<ParamRef> trainables = model.trainable_params();
    AdamW opt(trainables, cfg);

    TrainReport report;
    report.trainable_params = model.trainable_param_count();
    report.total_params = model.total_param_count();

    const int n = static_cast<int>(data.train.size());
    std::vector<int> order(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto epoch_start = std::chrono::steady_clock::now();
        // deterministic per-epoch shuffle
        Rng shuffle_rng(cfg.seed ^ fnv1a64("epoch." + std::to_string(epoch)));
        for (int i = n - 1; i > 0; --i)
            std::swap(order[static_cast<size_t>(i)],
                      order[static_cast<size_t>(shuffle_rng.uniform_int(i + 1))]);

        double loss_sum = 0.0;
        int in_batch = 0;
        opt.zero_grads();
        for (int idx = 0; idx < n; ++idx) {
            const Sample& s = data.train[static_cast<size_t>(order[static_cast<size_t>(idx)])];
            Graph g;
            Tensor loss = model.sample_loss(g, s);
            if (cfg.batch_size > 1) loss = scale(g, loss, 1.0 / cfg.batch_size);
            const double value = loss.item() * (cfg.batch_size > 1 ? cfg.batch_size : 1);
            if (!std::isfinite(value))
                throw DivergenceError("training diverged: non-finite loss at epoch " +
                                      std::to_string(epoch + 1) + ", step " + std::to_string(idx));
            loss_sum += value;
            g.backward(loss);
            if (++in_batch == cfg.batch_size || idx == n - 1) {
                if (cfg.grad_clip) {
                    const double norm = grad_global_norm(trainables);
                    if (norm > *cfg.grad_clip) scale_grads(trainables, *cfg.grad_clip / norm);
                }
                opt.step();
                opt.zero_grads();
                in_batch = 0;
            }
        }

        const EvalAccuracy acc = evaluate_greedy(model, data.eval);
        EpochStat stat;
        stat.epoch = epoch + 1;
        stat.mean_loss = loss_sum / n;
        stat.eval_acc = acc.overall;
        stat.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - epoch_start)
                           .count();
        report.epochs.push_back(stat);
    }

    const EvalAccuracy final_acc = evaluate_greedy(model, data.eval);
    report.final_overall_acc = final_acc.overall;
    report.final_text_acc = final_acc.text_only;
    report.final_image_acc = final_acc.text_image;
    report.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - wall_start).count();
    return report;
}

void TrainReport::write_jsonl(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw InputError("cannot open '" + path + "' for writing");
    for (const EpochStat& e : epochs) {
        nlohmann::json rec = {{"epoch", e.epoch},
                              {"mean_loss", e.mean_loss},
                              {"eval_acc", e.eval_acc},
                              {"seconds", e.seconds}};
        out << rec.dump() << "\n";
    }
}

}  // namespace balab
