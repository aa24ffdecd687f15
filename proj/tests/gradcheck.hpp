#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "sct/autodiff.hpp"

namespace sct::testing {

struct GradCheckResult {
    double worst_gap = 0.0;
    std::string worst_param;
};

// Central-difference check of every entry of every parameter against the
// tape gradient. make_loss must rebuild the full forward pass on the tape it
// is handed and return a 1x1 loss. The gap is relative for O(1) gradients
// and absolute below 1e-2 so FD noise on near-zero slopes cannot dominate.
template <typename MakeLoss>
GradCheckResult check_gradients(const std::vector<ad::Parameter*>& params, MakeLoss make_loss,
                                double h = 1e-5) {
    for (ad::Parameter* p : params) {
        p->zero_grad();
    }
    {
        ad::Tape t;
        t.backward(make_loss(t));
    }
    auto eval = [&]() {
        ad::Tape t;
        return make_loss(t).value()(0, 0);
    };
    GradCheckResult r;
    for (ad::Parameter* p : params) {
        for (long j = 0; j < p->value.size(); ++j) {
            const double saved = p->value.data()[j];
            p->value.data()[j] = saved + h;
            const double up = eval();
            p->value.data()[j] = saved - h;
            const double down = eval();
            p->value.data()[j] = saved;
            const double fd = (up - down) / (2.0 * h);
            const double an = p->grad.data()[j];
            const double gap = std::abs(fd - an) / std::max(1e-2, std::abs(fd) + std::abs(an));
            if (gap > r.worst_gap) {
                r.worst_gap = gap;
                r.worst_param = p->name + "[" + std::to_string(j) + "]";
            }
        }
    }
    return r;
}

} // namespace sct::testing
