#include <doctest.h>

#include <cstring>
#include <fstream>
#include <map>
#include <set>

#include <json.hpp>

#include "balab/tasks.hpp"

using namespace balab;

namespace {

// Independent rule-based oracle: reads pixels and instruction text only.
// Glyph masks are written out by hand here, separate from the generator.
const char* kOracleGlyphs[3][4] = {
    {"###.", "#.#.", "###.", "...."},  // square
    {"#..#", ".##.", ".##.", "#..#"},  // cross
    {".##.", "#..#", "#..#", ".##."},  // diamond
};

struct CellInfo {
    bool occupied = false;
    int shape = -1;
    int color = -1;
};

CellInfo decode_cell(const std::vector<float>& img, int cell_r, int cell_c) {
    CellInfo info;
    for (int ch = 0; ch < 3; ++ch) {
        char mask[4][5];
        bool any = false;
        for (int dy = 0; dy < 4; ++dy) {
            for (int dx = 0; dx < 4; ++dx) {
                const int y = cell_r * 4 + dy, x = cell_c * 4 + dx;
                const float v = img[(static_cast<size_t>(y) * kImageSize + x) * 3 + ch];
                mask[dy][dx] = v > 0.5f ? '#' : '.';
                any = any || v > 0.5f;
            }
            mask[dy][4] = '\0';
        }
        if (!any) continue;
        for (int s = 0; s < 3; ++s) {
            bool match = true;
            for (int dy = 0; dy < 4; ++dy)
                if (std::strcmp(mask[dy], kOracleGlyphs[s][dy]) != 0) match = false;
            if (match) {
                info.occupied = true;
                info.shape = s;
                info.color = ch;
                return info;
            }
        }
        FAIL("cell holds pixels that match no glyph");
    }
    return info;
}

std::vector<std::string> split_words(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : text) {
        if (c == ' ') {
            if (!cur.empty()) out.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

std::vector<int> oracle_answer(const Sample& s) {
    const std::vector<std::string> w = split_words(detokenize(s.instruction));
    auto tok = [](const std::string& word) { return token_id(word); };
    if (w[0] == "what") {
        const int r = w[3][0] - '0', c = w[4][0] - '0';
        const CellInfo cell = decode_cell(s.image, r, c);
        if (!cell.occupied) return {tok("none")};
        static const char* shapes[] = {"square", "cross", "diamond"};
        return {tok(shapes[cell.shape])};
    }
    if (w[0] == "count") {
        const int want = w[1] == "red" ? 0 : (w[1] == "green" ? 1 : 2);
        int n = 0;
        for (int r = 0; r < kGridCells; ++r)
            for (int c = 0; c < kGridCells; ++c) {
                const CellInfo cell = decode_cell(s.image, r, c);
                if (cell.occupied && cell.color == want) ++n;
            }
        return {tok(std::string(1, static_cast<char>('0' + n)))};
    }
    if (w[0] == "is") {
        const int want = w[1] == "square" ? 0 : (w[1] == "cross" ? 1 : 2);
        for (int r = 0; r < kGridCells; ++r)
            for (int c = 0; c < kGridCells; ++c) {
                const CellInfo cell = decode_cell(s.image, r, c);
                if (cell.occupied && cell.shape == want) return {tok("yes")};
            }
        return {tok("no")};
    }
    if (w[0] == "copy") {
        std::vector<int> out;
        for (size_t i = 1; i + 1 < w.size(); ++i) out.push_back(tok(w[i]));  // up to "="
        return out;
    }
    if (w[0] == "parity") {
        int bits = 0;
        for (size_t i = 1; i + 1 < w.size(); ++i) ++bits;
        return {tok(bits % 2 == 0 ? "even" : "odd")};
    }
    FAIL("unknown instruction form");
    return {};
}

}  // namespace

TEST_CASE("vocabulary fits the model budget") {
    CHECK(vocab_required() <= 64);
    CHECK(token_id("<eos>") == kEosId);
    CHECK(token_id("=") == kAnsId);
    CHECK(detokenize(tokenize("count red ?")) == "count red ?");
    CHECK_THROWS_AS(token_id("zebra"), InputError);
}

TEST_CASE("render_image construction") {
    Scene empty;
    const std::vector<float> img0 = render_image(empty);
    for (float v : img0) CHECK(v == 0.0f);

    Scene one;
    one.shapes.push_back(Placed{ShapeKind::square, ColorKind::red, 0, 0});
    const std::vector<float> img = render_image(one);
    int on = 0;
    for (int y = 0; y < kImageSize; ++y)
        for (int x = 0; x < kImageSize; ++x)
            for (int ch = 0; ch < 3; ++ch) {
                const float v = img[(static_cast<size_t>(y) * kImageSize + x) * 3 + ch];
                if (v != 0.0f) {
                    CHECK(y < 4);
                    CHECK(x < 4);
                    CHECK(ch == 0);
                    ++on;
                }
            }
    CHECK(on == 8);  // every glyph covers exactly 8 pixels

    CHECK(render_image(one) == img);  // deterministic

    Scene overlap;
    overlap.shapes.push_back(Placed{ShapeKind::square, ColorKind::red, 1, 1});
    overlap.shapes.push_back(Placed{ShapeKind::cross, ColorKind::blue, 1, 1});
    CHECK_THROWS_AS(render_image(overlap), SpecError);
}

TEST_CASE("dataset generation is a pure function of the spec") {
    TaskSpec spec;
    spec.kind = TaskKind::mixed;
    spec.train_size = 60;
    spec.eval_size = 20;
    spec.seed = 99;
    Dataset a = make_dataset(spec, 64);
    Dataset b = make_dataset(spec, 64);
    REQUIRE(a.train.size() == 60);
    REQUIRE(a.eval.size() == 20);
    for (size_t i = 0; i < a.train.size(); ++i) {
        CHECK(a.train[i].image == b.train[i].image);
        CHECK(a.train[i].instruction == b.train[i].instruction);
        CHECK(a.train[i].answer == b.train[i].answer);
    }
}

TEST_CASE("train and eval splits are disjoint") {
    TaskSpec spec;
    spec.kind = TaskKind::mixed;
    spec.train_size = 300;
    spec.eval_size = 80;
    spec.seed = 5;
    Dataset ds = make_dataset(spec, 64);
    auto key = [](const Sample& s) {
        std::string k;
        k.resize(s.image.size() * sizeof(float));
        if (!s.image.empty()) std::memcpy(k.data(), s.image.data(), k.size());
        k += '|';
        for (int id : s.instruction) k += std::to_string(id) + ",";
        return k;
    };
    std::set<std::string> train_keys;
    for (const Sample& s : ds.train) CHECK(train_keys.insert(key(s)).second);
    for (const Sample& s : ds.eval) CHECK(train_keys.count(key(s)) == 0);
}

TEST_CASE("every answer is recomputable by the independent oracle") {
    TaskSpec spec;
    spec.kind = TaskKind::mixed;
    spec.train_size = 400;
    spec.eval_size = 100;
    spec.seed = 12;
    Dataset ds = make_dataset(spec, 64);
    for (const auto* split : {&ds.train, &ds.eval})
        for (const Sample& s : *split) {
            CHECK((s.modality == Modality::text_image) == s.has_image());
            CHECK(oracle_answer(s) == s.answer);
            CHECK(s.answer.size() >= 1);
            CHECK(s.answer.size() <= 3);
            CHECK(s.instruction.back() == kAnsId);
            for (int id : s.instruction) CHECK(id < 64);
        }
}

TEST_CASE("answer classes stay near uniform per kind") {
    TaskSpec spec;
    spec.kind = TaskKind::mixed;
    spec.train_size = 1000;
    spec.eval_size = 1;
    spec.seed = 31;
    Dataset ds = make_dataset(spec, 64);

    std::map<TaskKind, std::map<int, int>> tallies;
    std::map<TaskKind, int> totals;
    for (const Sample& s : ds.train) {
        int cls = s.answer[0];
        tallies[s.meta.kind][cls]++;
        totals[s.meta.kind]++;
    }
    auto check_kind = [&](TaskKind k, int classes) {
        const double expected = static_cast<double>(totals[k]) / classes;
        CHECK(tallies[k].size() == static_cast<size_t>(classes));
        for (const auto& [cls, n] : tallies[k]) {
            CHECK(n >= 0.8 * expected);
            CHECK(n <= 1.2 * expected);
        }
    };
    check_kind(TaskKind::shape_at, 4);
    check_kind(TaskKind::count_color, 4);
    check_kind(TaskKind::shape_exists, 2);
    check_kind(TaskKind::parity_text, 2);
    check_kind(TaskKind::copy_text, 12);  // balanced over the leading letter
}

TEST_CASE("exact match") {
    CHECK(exact_match({5}, {5}));
    CHECK_FALSE(exact_match({5}, {6}));
    CHECK_FALSE(exact_match({5, 7}, {5}));
}

TEST_CASE("vocab overflow is rejected") {
    TaskSpec spec;
    spec.train_size = 2;
    spec.eval_size = 1;
    CHECK_THROWS_AS(make_dataset(spec, 16), SpecError);
}

TEST_CASE("jsonl export round trip") {
    TaskSpec spec;
    spec.kind = TaskKind::mixed;
    spec.train_size = 10;
    spec.eval_size = 2;
    spec.seed = 8;
    Dataset ds = make_dataset(spec, 64);
    const std::string path = "/tmp/balab_test_export.jsonl";
    export_jsonl(ds.train, path);

    std::ifstream in(path);
    std::string line;
    int rows = 0, with_image = 0;
    while (std::getline(in, line)) {
        const auto rec = nlohmann::json::parse(line);
        CHECK(rec.contains("instruction"));
        CHECK(rec.contains("answer"));
        CHECK(rec.contains("modality"));
        CHECK(rec["meta"].contains("kind"));
        if (!rec["image_b64"].is_null()) ++with_image;
        const Sample& s = ds.train[static_cast<size_t>(rows)];
        CHECK(rec["instruction"].get<std::vector<int>>() == s.instruction);
        CHECK(rec["answer"].get<std::vector<int>>() == s.answer);
        ++rows;
    }
    CHECK(rows == 10);
    CHECK(with_image == 5);  // mixed curriculum alternates modalities
}
