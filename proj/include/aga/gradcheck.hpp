#pragma once

#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "aga/autodiff.hpp"

namespace aga {

/// Builds a scalar loss on the given tape from the current parameter values.
using LossBuilder = std::function<DiffTensor(Tape&)>;

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::string worst_param;
    std::size_t worst_index = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    std::size_t checked = 0;
};

inline double evaluate_loss(const LossBuilder& f) {
    Tape tape;
    const double v = f(tape).item();
    if (!std::isfinite(v)) throw NumericError("finite_difference_check: loss is not finite");
    return v;
}

/// Central-difference comparison of every entry of `params` against backward().
/// Relative error per entry is |a - n| / max(|a|, |n|, floor). The default
/// floor only guards against division by zero; a larger floor discounts
/// entries whose magnitude sits at the finite-difference noise level.
inline GradCheckReport check_gradients(const LossBuilder& f, std::span<Parameter* const> params,
                                       double h = 1e-5, double floor = 1e-12) {
    for (auto* p : params) p->zero_grad();
    {
        Tape tape;
        auto loss = f(tape);
        if (!std::isfinite(loss.item())) throw NumericError("finite_difference_check: loss is not finite");
        tape.backward(loss);
    }
    GradCheckReport rep;
    for (auto* p : params) {
        std::vector<double> analytic = p->grad;
        if (analytic.size() != p->size()) analytic.assign(p->size(), 0.0);
        for (std::size_t i = 0; i < p->size(); ++i) {
            const double saved = p->data[i];
            p->data[i] = saved + h;
            const double up = evaluate_loss(f);
            p->data[i] = saved - h;
            const double down = evaluate_loss(f);
            p->data[i] = saved;
            const double numeric = (up - down) / (2.0 * h);
            const double a = analytic[i];
            const double err =
                std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
            ++rep.checked;
            if (err > rep.max_rel_error || rep.checked == 1) {
                rep.max_rel_error = err;
                rep.worst_param = p->name;
                rep.worst_index = i;
                rep.worst_analytic = a;
                rep.worst_numeric = numeric;
            }
        }
    }
    return rep;
}

inline double finite_difference_check(const LossBuilder& f, std::span<Parameter* const> params,
                                      double h = 1e-5) {
    return check_gradients(f, params, h).max_rel_error;
}

}  // namespace aga
