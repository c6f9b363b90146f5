#ifndef ODG_LOSSES_HPP
#define ODG_LOSSES_HPP

#include "odg/datagen.hpp"
#include "odg/model.hpp"
#include "odg/tensor.hpp"

#include <random>
#include <utility>
#include <vector>

namespace odg {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct DirichletParams {
    std::vector<double> alpha;  // all entries > 0
};

// Which regularizer aligns the per-domain feature distributions.
enum class RegKind { none, coral, mmd };

// Sum-of-Gaussians kernel for the distribution-distance loss. By default each
// call derives a base bandwidth from the median pairwise squared distance of
// the joint batch (floored at 1e-6) and spreads it by `factors`; fixed
// bandwidths are available for closed-form tests.
struct KernelSpec {
    bool median_heuristic = true;
    std::vector<double> factors = {0.5, 1.0, 2.0};
    std::vector<double> fixed_sigma_sqs = {1.0};  // used when median_heuristic is off

    std::vector<double> resolve(const std::vector<Tensor>& features) const;
};

// Per-member loss weighting: w_j scales domain j's cross-entropy, gamma
// scales the alignment regularizer, and the temperature softens peer outputs
// during distillation (never the student's).
struct LossWeights {
    std::vector<double> w;  // length M; empty selects the 3-on-own / 1-elsewhere default
    double gamma = 1.0;
    double distill_temperature = 2.0;
};

// The default w for member `i`: `own` at position i, `cross` elsewhere.
std::vector<double> member_weights(std::size_t m, std::size_t i, double own = 3.0,
                                   double cross = 1.0);

// ---------------------------------------------------------------------------
// Core losses
// ---------------------------------------------------------------------------

// Mean over rows of -sum_c target_c * log softmax(logits)_c. Targets may be
// soft (mixup or distillation labels) but each row must sum to 1.
Tensor cross_entropy(const Tensor& targets, const Tensor& logits);

// Mean squared Frobenius gap between the unbiased feature covariance matrices
// of all ordered domain pairs, averaged over M^2. Needs >= 2 rows per domain.
Tensor coral_loss(const std::vector<Tensor>& features);

// Mean biased MMD^2 between all ordered domain pairs, averaged over M^2,
// under the summed Gaussian kernel.
Tensor mmd_loss(const std::vector<Tensor>& features, const KernelSpec& kernel = {});

// ---------------------------------------------------------------------------
// Mixup and distillation ingredients
// ---------------------------------------------------------------------------

// Normalized independent Gamma draws; valid for any alpha > 0 including the
// sub-1 shapes used by feature mixup.
std::vector<double> sample_dirichlet(const DirichletParams& params, std::mt19937_64& rng);

// Convex combination of M row-aligned feature batches and label batches.
// Zero-weight terms are skipped, so a one-hot lambda returns that domain's
// batch bit-exactly.
std::pair<Tensor, Tensor> dir_mixup(const std::vector<Tensor>& features,
                                    const std::vector<Tensor>& labels,
                                    const std::vector<double>& lambda);

// Soft labels from peer models: sum_j lambda_j * softmax(peer_j(x) / T).
// Evaluated without recording, so no gradient ever reaches a peer.
Tensor distill_label(const std::vector<const DomainModel*>& peers, const Tensor& x,
                     const std::vector<double>& lambda, double temperature);

// ---------------------------------------------------------------------------
// Per-member training objectives
// ---------------------------------------------------------------------------

// Member i's base objective: sum_j w_j * ce(y_j, M_i(x_j)) + gamma * reg over
// the features F_i extracts from every domain's batch.
Tensor ensemble_loss(std::size_t i, const ModelEnsemble& e, const std::vector<Batch>& batches,
                     const LossWeights& weights, RegKind reg, const KernelSpec& kernel = {});

// Where the mixed features come from: `own` runs each domain's batch through
// its own (frozen) extractor, `peer` runs every batch through member i.
enum class MixupFeatures { own, peer };

struct MixupConfig {
    double alpha_own = 0.6;    // Dirichlet weight on the member's own domain
    double alpha_cross = 0.2;  // weight on every other domain
    MixupFeatures features = MixupFeatures::own;
    double extra_weight = 1.0;          // coefficient on the added mixup term
    std::vector<double> forced_lambda;  // test hook; empty means sample fresh
};

// Base objective plus a Dirichlet-mixup cross-entropy term through member i's
// classifier head. Batches must share a common row count.
Tensor l_dir(std::size_t i, const ModelEnsemble& e, const std::vector<Batch>& batches,
             const LossWeights& weights, RegKind reg, std::mt19937_64& rng,
             const MixupConfig& mix = {}, const KernelSpec& kernel = {});

struct DistillConfig {
    double extra_weight = 1.0;          // coefficient on the added distillation term
    std::vector<double> forced_lambda;  // test hook; length M-1 when set
};

// Base objective plus cross-entropy against peer-distilled soft labels on the
// member's own domain. With a single member the extra term vanishes.
Tensor l_dst(std::size_t i, const ModelEnsemble& e, const std::vector<Batch>& batches,
             const LossWeights& weights, RegKind reg, std::mt19937_64& rng,
             const DistillConfig& dst = {}, const KernelSpec& kernel = {});

}  // namespace odg

#endif  // ODG_LOSSES_HPP
