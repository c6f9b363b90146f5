#ifndef ODG_TRAIN_HPP
#define ODG_TRAIN_HPP

#include "odg/datagen.hpp"
#include "odg/losses.hpp"
#include "odg/model.hpp"

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

namespace odg {

// ---------------------------------------------------------------------------
// Methods
// ---------------------------------------------------------------------------

enum class Method {
    erm,
    coral,
    mmd,
    e_coral,
    e_mmd,
    edir_coral,
    edir_mmd,
    edst_coral,
    edst_mmd,
};

// Throws std::invalid_argument listing the valid names on a miss.
Method method_from_string(const std::string& name);
std::string method_name(Method m);
const std::vector<Method>& all_methods();

bool is_ensemble_method(Method m);       // e_*, edir_*, edst_*
RegKind method_reg(Method m);            // which alignment loss the method uses
bool uses_mixup(Method m);               // edir_*
bool uses_distillation(Method m);        // edst_*

// ---------------------------------------------------------------------------
// Configuration and reports
// ---------------------------------------------------------------------------

struct TrainConfig {
    double learning_rate = 0.001;
    double momentum = 0.9;
    std::size_t batch_size = 32;
    std::size_t max_epochs = 100;
    std::size_t patience = 10;  // epochs without validation improvement before stopping
    std::uint64_t seed = 0;
    Method method = Method::erm;

    // Per-member seed overrides for ensemble training (batch order and any
    // loss-level sampling). Empty derives one stream per member from `seed`;
    // identical entries give members identical data streams.
    std::vector<std::uint64_t> member_seeds;

    LossWeights weights;    // gamma, distill temperature, optional explicit w
    MixupConfig mixup;      // Dirichlet alphas and feature provenance for edir_*
    DistillConfig distill;  // extra-term coefficient for edst_*
    KernelSpec kernel;      // bandwidths for the distribution-distance loss

    // Ensemble execution. Members always synchronize at epoch boundaries;
    // `member_workers` > 1 trains them on that many threads with identical
    // numerics. Per-step snapshot refresh implies serial member order.
    std::size_t member_workers = 1;
    bool per_step_snapshots = false;

    // Model selection. Default: each member early-stops on its own pooled
    // validation accuracy; the alternatives mirror open protocol choices.
    bool member_weighted_val = false;  // weight validation toward the member's own domain
    bool global_early_stop = false;    // stop all members on the ensemble's accuracy

    std::ostream* progress = nullptr;  // one JSON line per epoch when set

    // Test hook: replaces the measured validation accuracy (epoch is 1-based).
    std::function<double(std::size_t epoch, double measured)> val_acc_hook;
};

struct TrainReport {
    std::size_t epochs_run = 0;
    std::size_t best_epoch = 0;  // 1-based; parameters are restored to it
    double best_val_acc = 0.0;
    std::vector<double> epoch_seconds;    // training portion only, per epoch
    std::vector<double> epoch_mean_loss;  // mean per-step loss, per epoch
    std::vector<double> epoch_val_acc;    // accuracy after each epoch
};

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

// Classical momentum: v <- momentum*v + g; theta <- theta - lr*v. Gradients
// are read from the params' grad buffers (missing grads count as zero) and
// left in place; the caller zeroes them between steps. `velocity` is
// allocated on first use and must stay aligned with `params` afterwards.
void sgd_step(std::vector<Tensor>& params, std::vector<std::vector<double>>& velocity,
              double lr, double momentum);

// ---------------------------------------------------------------------------
// Accuracy helpers (plain argmax over known classes, no unknown threshold)
// ---------------------------------------------------------------------------

enum class SplitPart { train, validation };

// Pooled accuracy of one model over the chosen split of every dataset.
// Optional per-domain weights turn it into a weighted accuracy.
double known_class_accuracy(const DomainModel& model, const std::vector<DomainDataset>& ds,
                            const ClassSpaceSpec& space, SplitPart part,
                            const std::vector<double>* domain_weights = nullptr);

// Same, but predictions come from the averaged ensemble output.
double ensemble_known_class_accuracy(const ModelEnsemble& e,
                                     const std::vector<DomainDataset>& ds,
                                     const ClassSpaceSpec& space, SplitPart part);

// ---------------------------------------------------------------------------
// Training loops
// ---------------------------------------------------------------------------

// Single shared model minimizing pooled cross-entropy plus the method's
// alignment loss over per-domain features (erm, coral, mmd). The model is
// left holding its best-epoch parameters.
TrainReport train_single(DomainModel& model, const std::vector<DomainDataset>& sources,
                         const ClassSpaceSpec& space, const TrainConfig& cfg);

// One model per source domain minimizing the per-member objective (e_*,
// edir_*, edst_*). Members synchronize at epoch boundaries, where peer
// snapshots are refreshed; a member that stops early freezes at its best
// parameters and keeps serving those to its peers.
std::vector<TrainReport> train_ensemble(ModelEnsemble& e,
                                        const std::vector<DomainDataset>& sources,
                                        const ClassSpaceSpec& space, const TrainConfig& cfg);

}  // namespace odg

#endif  // ODG_TRAIN_HPP
