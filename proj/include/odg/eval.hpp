#ifndef ODG_EVAL_HPP
#define ODG_EVAL_HPP

#include "odg/datagen.hpp"
#include "odg/tensor.hpp"

#include <cstddef>
#include <optional>
#include <vector>

namespace odg {

// Prediction value meaning "none of the known classes".
constexpr int kUnknownPrediction = -1;

struct EvalResult {
    double acc_known = 0.0;           // correct known-class predictions / known samples
    double acc_unknown_detect = 0.0;  // unknown-predicted / unknown samples
    double h_score = 0.0;             // harmonic mean of the two accuracies
    std::optional<double> tier_acc_major;   // absent when the spec has no such tier
    std::optional<double> tier_acc_middle;
    std::optional<double> tier_acc_minor;
    // (|C|+1) x (|C|+1) counts; row = true class index with the extra
    // last row/column standing for unknown.
    std::vector<std::vector<std::size_t>> confusion;
    double delta_used = 0.0;
};

// 2ab/(a+b), defined as 0 when a + b = 0.
double h_score(double a, double b);

// Eq.-style open-set rule on row-stochastic probabilities: a row maps to
// kUnknownPrediction iff every class probability is strictly below delta,
// otherwise to the argmax column (ties to the lowest index). delta must lie
// in (0, 1).
std::vector<int> predict_class(const Tensor& probs, double delta);

// Nearest-rank percentile of the row-max probabilities, clamped into
// (1/|C| + 1e-6, 1 - 1e-6). Percentile must lie strictly between 0 and 100
// and probs must be non-empty. Intended for source validation outputs: a low
// percentile accepts almost all confidently classified validation rows.
double calibrate_delta(const Tensor& probs, double percentile);

// Scores open-set predictions (known-class indices or kUnknownPrediction)
// against true labels drawn from the known and unknown class sets.
// `delta_used` is carried through into the result untouched.
EvalResult evaluate(const std::vector<int>& predictions, const std::vector<int>& truth,
                    const ClassSpaceSpec& spec, double delta_used = 0.0);

}  // namespace odg

#endif  // ODG_EVAL_HPP
