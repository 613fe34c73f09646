#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "anyad/optim.hpp"

namespace anyad {

struct GradCheckEntry {
    std::string name;
    double max_rel_err = 0.0;
    std::int64_t worst_index = -1;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    double tol = 0.0;
    bool pass = true;

    double worst() const {
        double w = 0.0;
        for (const auto& e : entries) w = std::max(w, e.max_rel_err);
        return w;
    }
};

// Central-difference gradient check in 64-bit mode.
//
// `objective` rebuilds the computation from the current parameter values and
// returns the scalar loss; when `with_grad` is true it must also run backward
// so the parameters' grad buffers hold d(loss)/d(param). The objective must be
// deterministic. Relative error uses a 1e-6 denominator floor so near-zero
// gradients are compared absolutely.
inline GradCheckReport finite_diff_check(const std::function<double(bool with_grad)>& objective,
                                         NamedParams<double>& params, double h = 1e-5, double tol = 1e-4) {
    GradCheckReport report;
    report.tol = tol;
    params.zero_grad();
    objective(true);

    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.items.size());
    for (auto& [name, p] : params.items) {
        if (p->grad.size() != p->data.size())
            throw ContractError("finite_diff_check: parameter '" + name + "' has no gradient after backward");
        analytic.push_back(p->grad);
    }

    for (std::size_t pi = 0; pi < params.items.size(); ++pi) {
        auto& [name, p] = params.items[pi];
        GradCheckEntry entry;
        entry.name = name;
        for (std::size_t j = 0; j < p->data.size(); ++j) {
            const double keep = p->data[j];
            p->data[j] = keep + h;
            const double fp = objective(false);
            p->data[j] = keep - h;
            const double fm = objective(false);
            p->data[j] = keep;
            const double numeric = (fp - fm) / (2.0 * h);
            const double a = analytic[pi][j];
            const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-6});
            if (rel > entry.max_rel_err) {
                entry.max_rel_err = rel;
                entry.worst_index = static_cast<std::int64_t>(j);
            }
        }
        if (entry.max_rel_err > tol) report.pass = false;
        report.entries.push_back(std::move(entry));
    }
    return report;
}

}  // namespace anyad
