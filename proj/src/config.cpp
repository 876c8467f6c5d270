#include "balab/config.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

namespace balab {

std::string format_double(double v) {
    char buf[64];
    if (v == static_cast<long long>(v) && std::abs(v) < 1e15) {
        std::snprintf(buf, sizeof(buf), "%lld", static_cast<long long>(v));
        return buf;
    }
    for (int prec = 1; prec <= 17; ++prec) {
        std::snprintf(buf, sizeof(buf), "%.*g", prec, v);
        if (std::strtod(buf, nullptr) == v) return buf;
    }
    return buf;
}

namespace {

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

int parse_int(const std::string& key, const std::string& v) {
    try {
        size_t used = 0;
        const int n = std::stoi(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return n;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': '" + v + "' is not an integer");
    }
}

uint64_t parse_u64(const std::string& key, const std::string& v) {
    try {
        size_t used = 0;
        const unsigned long long n = std::stoull(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return n;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': '" + v + "' is not an unsigned integer");
    }
}

double parse_double(const std::string& key, const std::string& v) {
    char* end = nullptr;
    const double d = std::strtod(v.c_str(), &end);
    if (end != v.c_str() + v.size() || v.empty())
        throw ConfigError("config key '" + key + "': '" + v + "' is not a number");
    return d;
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("config key '" + key + "': '" + v + "' is not a boolean");
}

}  // namespace

std::vector<std::pair<std::string, std::string>> parse_kv_lines(const std::string& text) {
    std::vector<std::pair<std::string, std::string>> out;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(lineno) + " is not 'key = value': " +
                              line);
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + " has an empty key");
        out.emplace_back(key, value);
    }
    return out;
}

void set_config_key(LabConfig& cfg, const std::string& key, const std::string& value) {
    auto& m = cfg.model;
    auto& t = cfg.train;
    auto& s = cfg.sample;
    auto& k = cfg.task;
    if (key == "run.name") cfg.run_name = value;
    else if (key == "run.output_dir") cfg.output_dir = value;
    else if (key == "model.enc_layers") m.enc_layers = parse_int(key, value);
    else if (key == "model.enc_dim") m.enc_dim = parse_int(key, value);
    else if (key == "model.enc_heads") m.enc_heads = parse_int(key, value);
    else if (key == "model.patch_size") m.patch_size = parse_int(key, value);
    else if (key == "model.image_size") m.image_size = parse_int(key, value);
    else if (key == "model.lm_layers") m.lm_layers = parse_int(key, value);
    else if (key == "model.lm_dim") m.lm_dim = parse_int(key, value);
    else if (key == "model.lm_heads") m.lm_heads = parse_int(key, value);
    else if (key == "model.vocab") m.vocab = parse_int(key, value);
    else if (key == "model.max_seq") m.max_seq = parse_int(key, value);
    else if (key == "model.cls_stride") m.cls_stride = parse_int(key, value);
    else if (key == "model.neck_dim") m.neck_dim = parse_int(key, value);
    else if (key == "model.quantize_backbone") m.quantize_backbone = parse_bool(key, value);
    else if (key == "model.placement.lm_before_block") m.placement.lm_before_block = parse_bool(key, value);
    else if (key == "model.placement.vit_before_mha") m.placement.vit_before_mha = parse_bool(key, value);
    else if (key == "model.placement.vit_before_ffn") m.placement.vit_before_ffn = parse_bool(key, value);
    else if (key == "model.adapter.family") {
        try {
            m.adapter.family = family_from_string(value);
        } catch (const ConfigError&) {
            throw ConfigError("config key '" + key + "': unknown adapter family '" + value + "'");
        }
    } else if (key == "model.adapter.bottleneck_dim") m.adapter.bottleneck_dim = parse_int(key, value);
    else if (key == "model.adapter.groups") m.adapter.groups = parse_int(key, value);
    else if (key == "model.adapter.rank") m.adapter.rank = parse_int(key, value);
    else if (key == "model.adapter.route_temperature") m.adapter.route_temperature = parse_double(key, value);
    else if (key == "train.lr") t.lr = parse_double(key, value);
    else if (key == "train.weight_decay") t.weight_decay = parse_double(key, value);
    else if (key == "train.epochs") t.epochs = parse_int(key, value);
    else if (key == "train.batch_size") t.batch_size = parse_int(key, value);
    else if (key == "train.beta1") t.beta1 = parse_double(key, value);
    else if (key == "train.beta2") t.beta2 = parse_double(key, value);
    else if (key == "train.eps") t.eps = parse_double(key, value);
    else if (key == "train.seed") t.seed = parse_u64(key, value);
    else if (key == "train.grad_clip") {
        if (value == "none") t.grad_clip.reset();
        else t.grad_clip = parse_double(key, value);
    } else if (key == "sample.temperature") s.temperature = parse_double(key, value);
    else if (key == "sample.top_p") s.top_p = parse_double(key, value);
    else if (key == "sample.max_new_tokens") s.max_new_tokens = parse_int(key, value);
    else if (key == "sample.seed") s.seed = parse_u64(key, value);
    else if (key == "task.kind") {
        try {
            k.kind = task_kind_from_string(value);
        } catch (const ConfigError&) {
            throw ConfigError("config key '" + key + "': unknown task kind '" + value + "'");
        }
    } else if (key == "task.train_size") k.train_size = parse_int(key, value);
    else if (key == "task.eval_size") k.eval_size = parse_int(key, value);
    else if (key == "task.seed") k.seed = parse_u64(key, value);
    else throw ConfigError("unknown config key '" + key + "'");
}

std::vector<std::pair<std::string, std::string>> LabConfig::serialize_pairs() const {
    std::vector<std::pair<std::string, std::string>> p;
    auto b = [](bool v) { return v ? std::string("true") : std::string("false"); };
    p.emplace_back("run.name", run_name);
    p.emplace_back("run.output_dir", output_dir);
    p.emplace_back("model.enc_layers", std::to_string(model.enc_layers));
    p.emplace_back("model.enc_dim", std::to_string(model.enc_dim));
    p.emplace_back("model.enc_heads", std::to_string(model.enc_heads));
    p.emplace_back("model.patch_size", std::to_string(model.patch_size));
    p.emplace_back("model.image_size", std::to_string(model.image_size));
    p.emplace_back("model.lm_layers", std::to_string(model.lm_layers));
    p.emplace_back("model.lm_dim", std::to_string(model.lm_dim));
    p.emplace_back("model.lm_heads", std::to_string(model.lm_heads));
    p.emplace_back("model.vocab", std::to_string(model.vocab));
    p.emplace_back("model.max_seq", std::to_string(model.max_seq));
    p.emplace_back("model.cls_stride", std::to_string(model.cls_stride));
    p.emplace_back("model.neck_dim", std::to_string(model.neck_dim));
    p.emplace_back("model.quantize_backbone", b(model.quantize_backbone));
    p.emplace_back("model.placement.lm_before_block", b(model.placement.lm_before_block));
    p.emplace_back("model.placement.vit_before_mha", b(model.placement.vit_before_mha));
    p.emplace_back("model.placement.vit_before_ffn", b(model.placement.vit_before_ffn));
    p.emplace_back("model.adapter.family", family_name(model.adapter.family));
    p.emplace_back("model.adapter.bottleneck_dim", std::to_string(model.adapter.bottleneck_dim));
    p.emplace_back("model.adapter.groups", std::to_string(model.adapter.groups));
    p.emplace_back("model.adapter.rank", std::to_string(model.adapter.rank));
    p.emplace_back("model.adapter.route_temperature", format_double(model.adapter.route_temperature));
    p.emplace_back("train.lr", format_double(train.lr));
    p.emplace_back("train.weight_decay", format_double(train.weight_decay));
    p.emplace_back("train.epochs", std::to_string(train.epochs));
    p.emplace_back("train.batch_size", std::to_string(train.batch_size));
    p.emplace_back("train.beta1", format_double(train.beta1));
    p.emplace_back("train.beta2", format_double(train.beta2));
    p.emplace_back("train.eps", format_double(train.eps));
    p.emplace_back("train.seed", std::to_string(train.seed));
    p.emplace_back("train.grad_clip", train.grad_clip ? format_double(*train.grad_clip) : "none");
    p.emplace_back("sample.temperature", format_double(sample.temperature));
    p.emplace_back("sample.top_p", format_double(sample.top_p));
    p.emplace_back("sample.max_new_tokens", std::to_string(sample.max_new_tokens));
    p.emplace_back("sample.seed", std::to_string(sample.seed));
    p.emplace_back("task.kind", task_kind_name(task.kind));
    p.emplace_back("task.train_size", std::to_string(task.train_size));
    p.emplace_back("task.eval_size", std::to_string(task.eval_size));
    p.emplace_back("task.seed", std::to_string(task.seed));
    return p;
}

std::string LabConfig::serialize() const {
    std::ostringstream os;
    for (const auto& [key, value] : serialize_pairs()) os << key << " = " << value << "\n";
    return os.str();
}

std::string get_config_key(const LabConfig& cfg, const std::string& key) {
    for (const auto& [k, v] : cfg.serialize_pairs())
        if (k == key) return v;
    throw ConfigError("unknown config key '" + key + "'");
}

void LabConfig::validate() const {
    model.validate();
    train.validate();
    sample.validate();
    task.validate();
    if (model.vocab < vocab_required())
        throw ConfigError("model.vocab " + std::to_string(model.vocab) +
                          " is smaller than the task vocabulary (" +
                          std::to_string(vocab_required()) + ")");
    if (run_name.empty() || run_name.find('/') != std::string::npos)
        throw ConfigError("run.name must be a non-empty name without '/'");
}

LabConfig LabConfig::from_string(const std::string& text) {
    LabConfig cfg;
    for (const auto& [key, value] : parse_kv_lines(text)) set_config_key(cfg, key, value);
    return cfg;
}

LabConfig LabConfig::from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file '" + path + "'");
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return from_string(text);
}

}  // namespace balab
