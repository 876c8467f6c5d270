#pragma once

#include <string>
#include <vector>

namespace balab {

struct GradcheckRow {
    std::string component;
    double max_rel_err = 0.0;
    bool pass = false;
};

struct GradcheckReport {
    std::vector<GradcheckRow> rows;
    double threshold = 1e-4;
    bool all_pass = true;
    const GradcheckRow* first_failure() const {
        for (const GradcheckRow& r : rows)
            if (!r.pass) return &r;
        return nullptr;
    }
};

// Central-difference verification in float64 over every adapter family, the
// visual neck, one encoder block, one LM block, and the end-to-end loss.
// corrupt_backward adds a fixture op with a deliberately wrong gradient rule
// as a negative control.
GradcheckReport run_gradcheck(bool corrupt_backward = false);

}  // namespace balab
