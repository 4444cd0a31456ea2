#include "dcv/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "dcv/error.hpp"
#include "dcv/tape.hpp"

namespace dcv {

GradCheckResult grad_check(const ScalarFunction& fn, std::span<const Tensor> params, double step) {
    if (!(step > 0.0)) throw ArgumentError("grad_check step must be positive");

    std::vector<Tensor> analytic;
    {
        Tape tape;
        TapeScope scope(tape);
        std::vector<Tensor> leaves;
        leaves.reserve(params.size());
        for (const auto& p : params) leaves.push_back(tape.leaf(p.detach()));
        const Tensor loss = fn(leaves);
        const GradientMap grads = tape.backward(loss);
        for (const auto& leaf : leaves) {
            auto it = grads.find(*leaf.node());
            analytic.push_back(it != grads.end() ? it->second : Tensor(leaf.shape(), 0.0));
        }
    }

    NoGradScope no_grad;
    std::vector<Tensor> probe;
    probe.reserve(params.size());
    for (const auto& p : params) probe.push_back(p.detach());

    GradCheckResult result;
    for (std::size_t pi = 0; pi < probe.size(); ++pi) {
        for (std::size_t ei = 0; ei < probe[pi].size(); ++ei) {
            const double original = probe[pi][ei];
            double f_plus = 0.0;
            double f_minus = 0.0;
            try {
                probe[pi][ei] = original + step;
                f_plus = fn(probe).item();
                probe[pi][ei] = original - step;
                f_minus = fn(probe).item();
            } catch (const NumericError& e) {
                throw NumericError("grad_check: parameter " + std::to_string(pi) + " element " + std::to_string(ei) +
                                   ": " + e.what());
            }
            probe[pi][ei] = original;
            if (!std::isfinite(f_plus) || !std::isfinite(f_minus)) {
                throw NumericError("grad_check: non-finite value perturbing parameter " + std::to_string(pi) +
                                   " element " + std::to_string(ei));
            }
            const double numeric = (f_plus - f_minus) / (2.0 * step);
            const double a = analytic[pi][ei];
            const double denom = std::max({std::abs(a), std::abs(numeric), 1e-12});
            const double err = std::abs(a - numeric) / denom;
            if (err > result.max_rel_error) {
                result = GradCheckResult{err, pi, ei, a, numeric};
            }
        }
    }
    return result;
}

} // namespace dcv
