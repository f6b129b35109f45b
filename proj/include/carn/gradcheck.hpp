#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "carn/autodiff.hpp"
#include "carn/model.hpp"

namespace carn {

struct GradcheckOptions {
    double step = 3e-4;        // h of the central stencil f(x±h), f(x±2h)
    int shrink_attempts = 3;   // h, h/10, h/100 when a kink is in the way
    double tolerance = 1e-4;   // on the relative error
    double floor = 1e-6;       // denominator floor, see relative_error()
    std::size_t max_probes = 24;  // elements probed per tensor (all if fewer)
    std::uint64_t seed = 7;
};

/// |a - n| / max(|a|, |n|, floor)
double relative_error(double analytic, double numeric, double floor);

struct GradcheckEntry {
    std::string scope;
    std::string name;
    std::size_t probes = 0;
    std::size_t skipped = 0;  // probes whose stencil crossed a kink
    double max_rel_error = 0;
    double max_abs_error = 0;
    bool passed = false;
};

struct GradcheckReport {
    std::vector<GradcheckEntry> entries;
    double seconds = 0;

    bool passed() const;
    double worst() const;
    std::string text() const;
};

using ScalarFunction = std::function<Var<double>()>;

/// Compares backward() of `f` against a fourth-order central difference for
/// each named input. `f` must rebuild its graph from the inputs' current
/// values on every call. When a stencil point makes a different piecewise
/// decision (relu sign, pool argmax, |x| sign) than the unperturbed point the
/// step is shrunk; a probe that never fits between kinks is skipped, not
/// failed.
std::vector<GradcheckEntry> check_gradients(const std::string& scope,
                                            const std::vector<std::pair<std::string, Var<double>>>& inputs,
                                            const ScalarFunction& f, const GradcheckOptions& options);

/// Names accepted as single-op scopes.
const std::vector<std::string>& gradcheck_op_names();

/// 64x64 input, stem 4, schedule 4,4,4,4,4,4, head 8.
CARNConfig gradcheck_model_config(Variant variant = Variant::carn);

/// scope: an op name, "ops", "au", "model", "loss" or "all".
GradcheckReport gradcheck(const std::string& scope, const GradcheckOptions& options = {});

}  // namespace carn
