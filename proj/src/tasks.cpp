#include "balab/tasks.hpp"

#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "balab/rng.hpp"

namespace balab {

const std::vector<std::string>& vocab_words() {
    static const std::vector<std::string> words = {
        "<eos>", "=",      "what",  "shape", "at",   "count", "is",    "copy",  "parity", "?",
        "red",   "green",  "blue",  "square", "cross", "diamond", "none", "yes", "no",    "even",
        "odd",   "0",      "1",     "2",     "3",    "a",     "b",     "c",     "d",      "e",
        "f",     "g",      "h",     "i",     "j",    "k",     "l"};
    return words;
}

int vocab_required() { return static_cast<int>(vocab_words().size()); }

int token_id(const std::string& word) {
    const auto& words = vocab_words();
    for (size_t i = 0; i < words.size(); ++i)
        if (words[i] == word) return static_cast<int>(i);
    throw InputError("word '" + word + "' is not in the task vocabulary");
}

std::vector<int> tokenize(const std::string& text) {
    std::vector<int> ids;
    std::istringstream is(text);
    std::string word;
    while (is >> word) ids.push_back(token_id(word));
    return ids;
}

std::string detokenize(const std::vector<int>& ids) {
    const auto& words = vocab_words();
    std::string out;
    for (size_t i = 0; i < ids.size(); ++i) {
        const int id = ids[i];
        if (i) out += ' ';
        if (id >= 0 && static_cast<size_t>(id) < words.size())
            out += words[static_cast<size_t>(id)];
        else
            out += "<" + std::to_string(id) + ">";
    }
    return out;
}

namespace {

constexpr int kDigit0 = 21;   // token id of "0"
constexpr int kLetterA = 25;  // token id of "a"
constexpr int kNumLetters = 12;

// 8-pixel glyphs on a 4x4 cell, as (dy, dx) pairs
const int kGlyphs[3][8][2] = {
    // square: ring of the top-left 3x3
    {{0, 0}, {0, 1}, {0, 2}, {1, 0}, {1, 2}, {2, 0}, {2, 1}, {2, 2}},
    // cross: diagonals
    {{0, 0}, {0, 3}, {1, 1}, {1, 2}, {2, 1}, {2, 2}, {3, 0}, {3, 3}},
    // diamond: rhombus outline
    {{0, 1}, {0, 2}, {1, 0}, {1, 3}, {2, 0}, {2, 3}, {3, 1}, {3, 2}},
};

int shape_token(ShapeKind s) { return token_id("square") + static_cast<int>(s); }
int color_token(ColorKind c) { return token_id("red") + static_cast<int>(c); }

}  // namespace

std::vector<float> render_image(const Scene& scene) {
    if (scene.shapes.size() > 3) throw SpecError("scene holds more than 3 shapes");
    std::vector<float> img(static_cast<size_t>(kImageValues), 0.0f);
    std::set<std::pair<int, int>> used;
    for (const Placed& p : scene.shapes) {
        if (p.cell_r < 0 || p.cell_r >= kGridCells || p.cell_c < 0 || p.cell_c >= kGridCells)
            throw SpecError("scene cell out of the 4x4 grid");
        if (!used.insert({p.cell_r, p.cell_c}).second) throw SpecError("scene cells overlap");
        const int y0 = p.cell_r * 4, x0 = p.cell_c * 4;
        const int ch = static_cast<int>(p.color);
        for (const auto& px : kGlyphs[static_cast<int>(p.shape)]) {
            const int y = y0 + px[0], x = x0 + px[1];
            img[(static_cast<size_t>(y) * kImageSize + static_cast<size_t>(x)) * 3 +
                static_cast<size_t>(ch)] = 1.0f;
        }
    }
    return img;
}

const char* task_kind_name(TaskKind k) {
    switch (k) {
        case TaskKind::shape_at: return "shape_at";
        case TaskKind::count_color: return "count_color";
        case TaskKind::shape_exists: return "shape_exists";
        case TaskKind::copy_text: return "copy_text";
        case TaskKind::parity_text: return "parity_text";
        case TaskKind::mixed: return "mixed";
    }
    return "?";
}

TaskKind task_kind_from_string(const std::string& s) {
    for (TaskKind k : {TaskKind::shape_at, TaskKind::count_color, TaskKind::shape_exists,
                       TaskKind::copy_text, TaskKind::parity_text, TaskKind::mixed})
        if (s == task_kind_name(k)) return k;
    throw ConfigError("unknown task kind '" + s + "'");
}

void TaskSpec::validate() const {
    if (train_size < 1) throw ConfigError("task.train_size must be at least 1");
    if (eval_size < 1) throw ConfigError("task.eval_size must be at least 1");
}

bool exact_match(const std::vector<int>& pred, const std::vector<int>& gold) {
    return pred == gold;
}

namespace {

struct GenState {
    uint64_t seed;
    std::set<std::string> used_keys;
    // per-kind answer-class cursors keep classes balanced
    int cursor[5] = {0, 0, 0, 0, 0};
};

std::string sample_key(const Sample& s) {
    std::string key;
    if (!s.image.empty()) {
        key.resize(s.image.size() * sizeof(float));
        std::memcpy(key.data(), s.image.data(), key.size());
    }
    key += '\x1f';
    for (int id : s.instruction) {
        key += static_cast<char>(id & 0xff);
        key += static_cast<char>((id >> 8) & 0xff);
    }
    return key;
}

Placed random_placed(Rng& rng, std::set<std::pair<int, int>>& used) {
    for (;;) {
        const int r = rng.uniform_int(kGridCells), c = rng.uniform_int(kGridCells);
        if (used.insert({r, c}).second)
            return Placed{static_cast<ShapeKind>(rng.uniform_int(3)),
                          static_cast<ColorKind>(rng.uniform_int(3)), r, c};
    }
}

Placed random_placed_colored(Rng& rng, std::set<std::pair<int, int>>& used, ColorKind color) {
    Placed p = random_placed(rng, used);
    p.color = color;
    return p;
}

Sample gen_shape_at(int cls, Rng& rng) {
    Sample s;
    s.modality = Modality::text_image;
    Scene scene;
    std::set<std::pair<int, int>> used;
    int qr, qc;
    // every shape in a scene gets its own color channel, so the pooled [cls]
    // summary can carry each (shape, cell) pair in a separate subspace
    int colors[3] = {0, 1, 2};
    for (int i = 2; i > 0; --i) std::swap(colors[i], colors[rng.uniform_int(i + 1)]);
    if (cls < 3) {
        Placed target = random_placed_colored(rng, used, static_cast<ColorKind>(colors[0]));
        target.shape = static_cast<ShapeKind>(cls);
        scene.shapes.push_back(target);
        const int extra = rng.uniform_int(3);
        for (int i = 0; i < extra; ++i)
            scene.shapes.push_back(
                random_placed_colored(rng, used, static_cast<ColorKind>(colors[1 + i])));
        qr = target.cell_r;
        qc = target.cell_c;
        s.answer = {shape_token(target.shape)};
    } else {
        const int n = 1 + rng.uniform_int(2);
        for (int i = 0; i < n; ++i)
            scene.shapes.push_back(
                random_placed_colored(rng, used, static_cast<ColorKind>(colors[i])));
        for (;;) {
            qr = rng.uniform_int(kGridCells);
            qc = rng.uniform_int(kGridCells);
            if (!used.count({qr, qc})) break;
        }
        s.answer = {token_id("none")};
    }
    s.image = render_image(scene);
    s.instruction = {token_id("what"), token_id("shape"), token_id("at"), kDigit0 + qr,
                     kDigit0 + qc,     token_id("?"),     kAnsId};
    return s;
}

Sample gen_count_color(int cls, Rng& rng) {
    Sample s;
    s.modality = Modality::text_image;
    // mono-color scenes: the count is a global glyph-mass feature and the
    // query reduces to one color-match gate (zero when the colors differ)
    const ColorKind queried = static_cast<ColorKind>(rng.uniform_int(3));
    ColorKind scene_color = queried;
    int shapes = cls;
    if (cls == 0) {
        do {
            scene_color = static_cast<ColorKind>(rng.uniform_int(3));
        } while (scene_color == queried);
        shapes = 1 + rng.uniform_int(3);
    }
    Scene scene;
    std::set<std::pair<int, int>> used;
    for (int i = 0; i < shapes; ++i)
        scene.shapes.push_back(random_placed_colored(rng, used, scene_color));
    s.image = render_image(scene);
    s.instruction = {token_id("count"), color_token(queried), token_id("?"), kAnsId};
    s.answer = {kDigit0 + cls};
    return s;
}

Sample gen_shape_exists(int cls, Rng& rng) {
    Sample s;
    s.modality = Modality::text_image;
    // mono-kind scenes: existence reduces to matching the queried kind
    // against the scene's global shape identity
    const ShapeKind queried = static_cast<ShapeKind>(rng.uniform_int(3));
    ShapeKind scene_kind = queried;
    if (cls == 0) {
        do {
            scene_kind = static_cast<ShapeKind>(rng.uniform_int(3));
        } while (scene_kind == queried);
    }
    Scene scene;
    std::set<std::pair<int, int>> used;
    const int n = 1 + rng.uniform_int(3);
    for (int i = 0; i < n; ++i) {
        Placed p = random_placed(rng, used);
        p.shape = scene_kind;
        scene.shapes.push_back(p);
    }
    s.image = render_image(scene);
    s.instruction = {token_id("is"), shape_token(queried), token_id("?"), kAnsId};
    s.answer = {cls == 1 ? token_id("yes") : token_id("no")};
    return s;
}

Sample gen_copy_text(int cls, Rng& rng) {
    Sample s;
    s.modality = Modality::text_only;
    const int len = rng.uniform() < 0.3 ? 2 : 3;  // mostly 3; enough space for disjoint splits
    s.instruction = {token_id("copy")};
    s.answer.clear();
    for (int i = 0; i < len; ++i) {
        const int letter = i == 0 ? kLetterA + cls : kLetterA + rng.uniform_int(kNumLetters);
        s.instruction.push_back(letter);
        s.answer.push_back(letter);
    }
    s.instruction.push_back(kAnsId);
    return s;
}

Sample gen_parity_text(int cls, Rng& rng) {
    Sample s;
    s.modality = Modality::text_only;
    // answer is the parity of how many binary digits are shown; bit values are
    // free, which keeps train/eval splits disjoint while the rule stays learnable
    const int len = cls == 0 ? 2 + 2 * rng.uniform_int(4) : 3 + 2 * rng.uniform_int(4);
    s.instruction = {token_id("parity")};
    for (int i = 0; i < len; ++i) s.instruction.push_back(kDigit0 + rng.uniform_int(2));
    s.instruction.push_back(kAnsId);
    s.answer = {cls == 0 ? token_id("even") : token_id("odd")};
    return s;
}

int kind_classes(TaskKind k) {
    switch (k) {
        case TaskKind::shape_at: return 4;
        case TaskKind::count_color: return 4;
        case TaskKind::shape_exists: return 2;
        case TaskKind::copy_text: return kNumLetters;
        case TaskKind::parity_text: return 2;
        default: return 1;
    }
}

TaskKind kind_for_index(TaskKind requested, int i) {
    if (requested != TaskKind::mixed) return requested;
    // alternate modality; cycle kinds inside each modality
    if (i % 2 == 0) {
        static const TaskKind img[] = {TaskKind::shape_at, TaskKind::count_color,
                                       TaskKind::shape_exists};
        return img[(i / 2) % 3];
    }
    static const TaskKind txt[] = {TaskKind::copy_text, TaskKind::parity_text};
    return txt[(i / 2) % 2];
}

Sample generate_one(TaskKind kind, int cls, Rng& rng) {
    switch (kind) {
        case TaskKind::shape_at: return gen_shape_at(cls, rng);
        case TaskKind::count_color: return gen_count_color(cls, rng);
        case TaskKind::shape_exists: return gen_shape_exists(cls, rng);
        case TaskKind::copy_text: return gen_copy_text(cls, rng);
        case TaskKind::parity_text: return gen_parity_text(cls, rng);
        default: throw ContractError("generate_one: mixed is not a concrete kind");
    }
}

std::vector<Sample> generate_split(const TaskSpec& spec, int count, int split_tag, GenState& st) {
    std::vector<Sample> out;
    out.reserve(static_cast<size_t>(count));
    for (int i = 0; i < count; ++i) {
        const TaskKind kind = kind_for_index(spec.kind, i);
        const int ki = static_cast<int>(kind);
        const int cls = st.cursor[ki] % kind_classes(kind);
        st.cursor[ki]++;
        bool placed = false;
        for (int attempt = 0; attempt < 20000 && !placed; ++attempt) {
            const uint64_t sample_seed =
                fnv1a64(std::to_string(st.seed) + "|" + std::to_string(split_tag) + "|" +
                        std::to_string(i) + "|" + std::to_string(attempt));
            Rng rng(sample_seed);
            Sample s = generate_one(kind, cls, rng);
            s.meta.kind = kind;
            s.meta.seed = sample_seed;
            const std::string key = sample_key(s);
            if (st.used_keys.insert(key).second) {
                out.push_back(std::move(s));
                placed = true;
            }
        }
        if (!placed)
            throw ConfigError("task space exhausted for kind " +
                              std::string(task_kind_name(kind)) +
                              "; reduce task.train_size/task.eval_size");
    }
    return out;
}

}  // namespace

Dataset make_dataset(const TaskSpec& spec, int vocab_size) {
    spec.validate();
    if (vocab_size < vocab_required())
        throw SpecError("model vocab " + std::to_string(vocab_size) +
                        " is smaller than the task vocabulary (" + std::to_string(vocab_required()) +
                        ")");
    GenState st;
    st.seed = spec.seed;
    Dataset ds;
    ds.train = generate_split(spec, spec.train_size, 0, st);
    ds.eval = generate_split(spec, spec.eval_size, 1, st);
    return ds;
}

std::string base64_encode(const unsigned char* data, size_t len) {
    static const char* alphabet = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
    std::string out;
    out.reserve((len + 2) / 3 * 4);
    for (size_t i = 0; i < len; i += 3) {
        uint32_t chunk = static_cast<uint32_t>(data[i]) << 16;
        if (i + 1 < len) chunk |= static_cast<uint32_t>(data[i + 1]) << 8;
        if (i + 2 < len) chunk |= static_cast<uint32_t>(data[i + 2]);
        out += alphabet[(chunk >> 18) & 63];
        out += alphabet[(chunk >> 12) & 63];
        out += i + 1 < len ? alphabet[(chunk >> 6) & 63] : '=';
        out += i + 2 < len ? alphabet[chunk & 63] : '=';
    }
    return out;
}

void export_jsonl(const std::vector<Sample>& samples, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw InputError("cannot open '" + path + "' for writing");
    for (const Sample& s : samples) {
        nlohmann::json rec;
        if (s.has_image())
            rec["image_b64"] = base64_encode(reinterpret_cast<const unsigned char*>(s.image.data()),
                                             s.image.size() * sizeof(float));
        else
            rec["image_b64"] = nullptr;
        rec["instruction"] = s.instruction;
        rec["answer"] = s.answer;
        rec["modality"] = s.modality == Modality::text_image ? "text_image" : "text_only";
        rec["meta"] = {{"kind", task_kind_name(s.meta.kind)}, {"seed", s.meta.seed}};
        out << rec.dump() << "\n";
    }
}

}  // namespace balab
