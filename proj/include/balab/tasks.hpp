#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "balab/errors.hpp"

namespace balab {

// Token conventions shared by the dataset generator and the model: id 0 ends
// generation, id 1 marks where the answer starts. Every instruction emitted
// by the generator ends with the answer marker.
constexpr int kEosId = 0;
constexpr int kAnsId = 1;

const std::vector<std::string>& vocab_words();
int vocab_required();  // smallest vocab size the generator supports
int token_id(const std::string& word);
std::vector<int> tokenize(const std::string& text);
std::string detokenize(const std::vector<int>& ids);

constexpr int kImageSize = 16;  // pixels per side
constexpr int kGridCells = 4;   // scene cells per side, 4x4 px each
constexpr int kImageValues = kImageSize * kImageSize * 3;

enum class ShapeKind { square, cross, diamond };
enum class ColorKind { red, green, blue };

struct Placed {
    ShapeKind shape;
    ColorKind color;
    int cell_r, cell_c;
};

struct Scene {
    std::vector<Placed> shapes;  // at most 3, distinct cells
};

// Deterministic rasterization: pure channel colors on a black background,
// every glyph covers exactly 8 pixels of its 4x4 cell.
std::vector<float> render_image(const Scene& scene);

enum class TaskKind { shape_at, count_color, shape_exists, copy_text, parity_text, mixed };

const char* task_kind_name(TaskKind k);
TaskKind task_kind_from_string(const std::string& s);  // throws ConfigError

enum class Modality { text_image, text_only };

struct SampleMeta {
    TaskKind kind = TaskKind::mixed;
    uint64_t seed = 0;
};

struct Sample {
    std::vector<float> image;      // kImageValues floats, empty for text_only
    std::vector<int> instruction;  // ends with kAnsId
    std::vector<int> answer;       // 1..3 ids, no terminator
    Modality modality = Modality::text_only;
    SampleMeta meta;
    bool has_image() const { return !image.empty(); }
};

struct TaskSpec {
    TaskKind kind = TaskKind::mixed;
    int train_size = 1000;
    int eval_size = 200;
    uint64_t seed = 1;

    void validate() const;  // throws ConfigError
};

struct Dataset {
    std::vector<Sample> train;
    std::vector<Sample> eval;
};

// Pure function of the spec. Train and eval are disjoint as multisets of
// (image bytes, instruction) pairs; answer classes are balanced per kind.
Dataset make_dataset(const TaskSpec& spec, int vocab_size);

bool exact_match(const std::vector<int>& pred, const std::vector<int>& gold);

// one JSON record per line: base-64 raw image bytes or null, token id lists,
// modality tag, meta
void export_jsonl(const std::vector<Sample>& samples, const std::string& path);

std::string base64_encode(const unsigned char* data, size_t len);

}  // namespace balab
