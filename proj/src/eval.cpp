#include "odg/eval.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace odg {

namespace {

constexpr double kRowSumTol = 1e-6;
constexpr double kClampEps = 1e-6;

void check_row_stochastic(const Tensor& probs) {
    for (std::size_t r = 0; r < probs.rows(); ++r) {
        double sum = 0.0;
        for (std::size_t c = 0; c < probs.cols(); ++c) {
            const double v = probs.at(r, c);
            if (v < 0.0) {
                throw std::invalid_argument("predict: probability below 0 in row " +
                                            std::to_string(r));
            }
            sum += v;
        }
        if (std::abs(sum - 1.0) > kRowSumTol) {
            throw std::invalid_argument("predict: row " + std::to_string(r) +
                                        " does not sum to 1");
        }
    }
}

}  // namespace

double h_score(double a, double b) {
    if (a + b == 0.0) return 0.0;
    return 2.0 * a * b / (a + b);
}

std::vector<int> predict_class(const Tensor& probs, double delta) {
    if (!(delta > 0.0 && delta < 1.0)) {
        throw std::invalid_argument("predict_class: delta must lie in (0, 1)");
    }
    if (probs.rows() == 0 || probs.cols() == 0) {
        throw std::invalid_argument("predict_class: empty probability matrix");
    }
    check_row_stochastic(probs);

    std::vector<int> out(probs.rows(), kUnknownPrediction);
    for (std::size_t r = 0; r < probs.rows(); ++r) {
        std::size_t arg = 0;
        bool all_below = true;
        for (std::size_t c = 0; c < probs.cols(); ++c) {
            if (probs.at(r, c) > probs.at(r, arg)) arg = c;
            if (!(probs.at(r, c) < delta)) all_below = false;
        }
        out[r] = all_below ? kUnknownPrediction : static_cast<int>(arg);
    }
    return out;
}

double calibrate_delta(const Tensor& probs, double percentile) {
    if (!(percentile > 0.0 && percentile < 100.0)) {
        throw std::invalid_argument(
            "calibrate_delta: percentile must lie strictly between 0 and 100");
    }
    if (probs.rows() == 0 || probs.cols() == 0) {
        throw std::invalid_argument("calibrate_delta: empty probability matrix");
    }
    if (probs.cols() < 2) {
        throw std::invalid_argument(
            "calibrate_delta: need at least two known classes to place a threshold");
    }
    check_row_stochastic(probs);

    std::vector<double> maxes;
    maxes.reserve(probs.rows());
    for (std::size_t r = 0; r < probs.rows(); ++r) {
        double m = probs.at(r, 0);
        for (std::size_t c = 1; c < probs.cols(); ++c) m = std::max(m, probs.at(r, c));
        maxes.push_back(m);
    }
    std::sort(maxes.begin(), maxes.end());
    const std::size_t n = maxes.size();
    const std::size_t k = static_cast<std::size_t>(
        std::ceil(percentile / 100.0 * static_cast<double>(n)));
    double delta = maxes[std::max<std::size_t>(k, 1) - 1];

    const double lo = 1.0 / static_cast<double>(probs.cols()) + kClampEps;
    const double hi = 1.0 - kClampEps;
    return std::clamp(delta, lo, hi);
}

EvalResult evaluate(const std::vector<int>& predictions, const std::vector<int>& truth,
                    const ClassSpaceSpec& spec, double delta_used) {
    if (predictions.size() != truth.size()) {
        throw std::invalid_argument("evaluate: " + std::to_string(predictions.size()) +
                                    " predictions vs " + std::to_string(truth.size()) +
                                    " truth labels");
    }
    const std::size_t c = spec.num_known();
    const int n_classes = static_cast<int>(c);

    EvalResult res;
    res.delta_used = delta_used;
    res.confusion.assign(c + 1, std::vector<std::size_t>(c + 1, 0));

    std::size_t known_total = 0;
    std::size_t known_correct = 0;
    std::size_t unknown_total = 0;
    std::size_t unknown_detected = 0;

    struct TierCount {
        std::size_t total = 0;
        std::size_t correct = 0;
    };
    TierCount major, middle, minor;

    for (std::size_t i = 0; i < truth.size(); ++i) {
        const int label = truth[i];
        const int true_idx = spec.class_index(label);
        if (true_idx < 0 && !spec.is_unknown(label)) {
            throw std::invalid_argument("evaluate: truth label " + std::to_string(label) +
                                        " is outside the class space");
        }
        const int pred = predictions[i];
        if (pred != kUnknownPrediction && (pred < 0 || pred >= n_classes)) {
            throw std::invalid_argument("evaluate: prediction " + std::to_string(pred) +
                                        " is not a known-class index or unknown");
        }

        const std::size_t row = true_idx >= 0 ? static_cast<std::size_t>(true_idx) : c;
        const std::size_t col = pred == kUnknownPrediction ? c : static_cast<std::size_t>(pred);
        ++res.confusion[row][col];

        if (true_idx >= 0) {
            ++known_total;
            const bool correct = pred == true_idx;
            if (correct) ++known_correct;
            const auto in = [&](const std::vector<int>& tier) {
                return std::binary_search(tier.begin(), tier.end(), label);
            };
            if (in(spec.major_classes)) {
                ++major.total;
                if (correct) ++major.correct;
            } else if (in(spec.middle_classes)) {
                ++middle.total;
                if (correct) ++middle.correct;
            } else if (in(spec.minor_classes)) {
                ++minor.total;
                if (correct) ++minor.correct;
            }
        } else {
            ++unknown_total;
            if (pred == kUnknownPrediction) ++unknown_detected;
        }
    }

    res.acc_known = known_total == 0
                        ? 0.0
                        : static_cast<double>(known_correct) / static_cast<double>(known_total);
    res.acc_unknown_detect =
        unknown_total == 0
            ? 0.0
            : static_cast<double>(unknown_detected) / static_cast<double>(unknown_total);
    res.h_score = h_score(res.acc_known, res.acc_unknown_detect);

    const auto tier_value = [](const std::vector<int>& tier,
                               const TierCount& tc) -> std::optional<double> {
        if (tier.empty()) return std::nullopt;
        if (tc.total == 0) return 0.0;
        return static_cast<double>(tc.correct) / static_cast<double>(tc.total);
    };
    res.tier_acc_major = tier_value(spec.major_classes, major);
    res.tier_acc_middle = tier_value(spec.middle_classes, middle);
    res.tier_acc_minor = tier_value(spec.minor_classes, minor);

    return res;
}

}  // namespace odg
