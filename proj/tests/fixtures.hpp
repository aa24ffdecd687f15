#pragma once

#include <vector>

#include "sct/expression.hpp"

// The worked 2-cell / 10-gene normalized matrix used across the masking and
// packing suites:
//   C1: 0.3 2.1 0 4.5 0   7.3 8.9 0 3.4 2.5
//   C2: 1.1 0   0 3.4 2.3 0.7 0   0 2.9 0
inline sct::SparseExpressionMatrix example_two_cell_matrix() {
    sct::SparseExpressionMatrix m;
    m.n_cells = 2;
    m.n_genes = 10;
    m.stage = sct::Stage::normalized;
    m.entries = {
        {0, 0, 0.3}, {0, 1, 2.1}, {0, 3, 4.5}, {0, 5, 7.3}, {0, 6, 8.9}, {0, 8, 3.4}, {0, 9, 2.5},
        {1, 0, 1.1}, {1, 3, 3.4}, {1, 4, 2.3}, {1, 5, 0.7}, {1, 8, 2.9},
    };
    m.finalize();
    return m;
}
