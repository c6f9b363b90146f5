#include "odg/train.hpp"

#include "json.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <exception>
#include <limits>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <thread>
#include <utility>

namespace odg {

namespace {

struct MethodRow {
    Method m;
    const char* name;
    RegKind reg;
    bool ensemble;
    bool mixup;
    bool distill;
};

constexpr MethodRow kMethodRows[] = {
    {Method::erm, "erm", RegKind::none, false, false, false},
    {Method::coral, "coral", RegKind::coral, false, false, false},
    {Method::mmd, "mmd", RegKind::mmd, false, false, false},
    {Method::e_coral, "e_coral", RegKind::coral, true, false, false},
    {Method::e_mmd, "e_mmd", RegKind::mmd, true, false, false},
    {Method::edir_coral, "edir_coral", RegKind::coral, true, true, false},
    {Method::edir_mmd, "edir_mmd", RegKind::mmd, true, true, false},
    {Method::edst_coral, "edst_coral", RegKind::coral, true, false, true},
    {Method::edst_mmd, "edst_mmd", RegKind::mmd, true, false, true},
};

const MethodRow& row_of(Method m) {
    for (const auto& r : kMethodRows) {
        if (r.m == m) return r;
    }
    throw std::invalid_argument("unknown method enum value");
}

void validate_common(const TrainConfig& cfg) {
    if (!(cfg.learning_rate > 0.0)) {
        throw std::invalid_argument("train: learning_rate must be > 0");
    }
    if (!(cfg.momentum >= 0.0 && cfg.momentum < 1.0)) {
        throw std::invalid_argument("train: momentum must lie in [0, 1)");
    }
    if (cfg.batch_size == 0) throw std::invalid_argument("train: batch_size must be >= 1");
    if (cfg.max_epochs == 0) throw std::invalid_argument("train: max_epochs must be >= 1");
    if (cfg.patience == 0) throw std::invalid_argument("train: patience must be >= 1");
}

void check_train_splits(const std::vector<DomainDataset>& sources) {
    for (const auto& ds : sources) {
        if (ds.train_idx.empty()) {
            throw std::invalid_argument("train: domain " + std::to_string(ds.domain_id) +
                                        " has an empty train split");
        }
    }
}

// Every domain contributes ceil(largest train split / batch) steps per epoch;
// smaller domains simply wrap their permutation early.
std::size_t steps_per_epoch(const std::vector<DomainDataset>& sources, std::size_t batch) {
    std::size_t largest = 0;
    for (const auto& ds : sources) largest = std::max(largest, ds.train_idx.size());
    return (largest + batch - 1) / batch;
}

std::vector<std::vector<double>> snapshot_values(const std::vector<Tensor>& params) {
    std::vector<std::vector<double>> out;
    out.reserve(params.size());
    for (const auto& p : params) out.push_back(p.values());
    return out;
}

void restore_values(std::vector<Tensor>& params, const std::vector<std::vector<double>>& vals) {
    for (std::size_t i = 0; i < params.size(); ++i) params[i].values() = vals[i];
}

double elapsed_seconds(std::chrono::steady_clock::time_point t0) {
    const auto dt = std::chrono::steady_clock::now() - t0;
    // 1 ns floor so downstream per-epoch ratios stay finite on coarse clocks.
    return std::max(std::chrono::duration<double>(dt).count(), 1e-9);
}

std::string progress_line(std::size_t epoch, std::optional<std::size_t> member, double loss,
                          double val_acc, double seconds) {
    nlohmann::json j;
    j["epoch"] = epoch;
    if (member) j["member"] = *member;
    j["train_loss"] = loss;
    j["val_acc"] = val_acc;
    j["seconds"] = seconds;
    return j.dump();
}

double accuracy_over(const DomainDataset& ds, const std::vector<std::size_t>& idx,
                     const ClassSpaceSpec& space, const Tensor& scores, double* weight_rows) {
    std::size_t correct = 0;
    for (std::size_t r = 0; r < idx.size(); ++r) {
        std::size_t arg = 0;
        for (std::size_t c = 1; c < scores.cols(); ++c) {
            if (scores.at(r, c) > scores.at(r, arg)) arg = c;
        }
        if (static_cast<int>(arg) == space.class_index(ds.labels[idx[r]])) ++correct;
    }
    *weight_rows = static_cast<double>(idx.size());
    return static_cast<double>(correct);
}

}  // namespace

Method method_from_string(const std::string& name) {
    for (const auto& r : kMethodRows) {
        if (name == r.name) return r.m;
    }
    std::string valid;
    for (const auto& r : kMethodRows) {
        if (!valid.empty()) valid += ", ";
        valid += r.name;
    }
    throw std::invalid_argument("unknown method '" + name + "' (valid: " + valid + ")");
}

std::string method_name(Method m) { return row_of(m).name; }

const std::vector<Method>& all_methods() {
    static const std::vector<Method> all = [] {
        std::vector<Method> v;
        for (const auto& r : kMethodRows) v.push_back(r.m);
        return v;
    }();
    return all;
}

bool is_ensemble_method(Method m) { return row_of(m).ensemble; }
RegKind method_reg(Method m) { return row_of(m).reg; }
bool uses_mixup(Method m) { return row_of(m).mixup; }
bool uses_distillation(Method m) { return row_of(m).distill; }

void sgd_step(std::vector<Tensor>& params, std::vector<std::vector<double>>& velocity,
              double lr, double momentum) {
    if (!(lr > 0.0)) throw std::invalid_argument("sgd_step: lr must be > 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) {
        throw std::invalid_argument("sgd_step: momentum must lie in [0, 1)");
    }
    if (velocity.empty()) velocity.resize(params.size());
    if (velocity.size() != params.size()) {
        throw std::invalid_argument("sgd_step: velocity count does not match params");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& p = params[i];
        std::vector<double>& vals = p.values();
        std::vector<double>& v = velocity[i];
        if (v.empty()) v.assign(vals.size(), 0.0);
        if (v.size() != vals.size()) {
            throw std::invalid_argument("sgd_step: velocity " + std::to_string(i) +
                                        " does not match its parameter's size");
        }
        const bool has_g = p.has_grad();
        const std::vector<double>* g = has_g ? &std::as_const(p).grad() : nullptr;
        for (std::size_t k = 0; k < vals.size(); ++k) {
            const double gk = g ? (*g)[k] : 0.0;
            v[k] = momentum * v[k] + gk;
            vals[k] -= lr * v[k];
        }
    }
}

double known_class_accuracy(const DomainModel& model, const std::vector<DomainDataset>& ds,
                            const ClassSpaceSpec& space, SplitPart part,
                            const std::vector<double>* domain_weights) {
    if (domain_weights && domain_weights->size() != ds.size()) {
        throw std::invalid_argument("known_class_accuracy: one weight per domain required");
    }
    NoTapeGuard guard;
    double num = 0.0;
    double den = 0.0;
    for (std::size_t j = 0; j < ds.size(); ++j) {
        const auto& idx = part == SplitPart::train ? ds[j].train_idx : ds[j].val_idx;
        if (idx.empty()) continue;
        std::vector<int> labels;
        const Tensor x = ds[j].gather(idx, &labels);
        const Tensor lg = model.logits(x);
        double rows = 0.0;
        const double correct = accuracy_over(ds[j], idx, space, lg, &rows);
        const double w = domain_weights ? (*domain_weights)[j] : 1.0;
        num += w * correct;
        den += w * rows;
    }
    return den == 0.0 ? 0.0 : num / den;
}

double ensemble_known_class_accuracy(const ModelEnsemble& e,
                                     const std::vector<DomainDataset>& ds,
                                     const ClassSpaceSpec& space, SplitPart part) {
    NoTapeGuard guard;
    double num = 0.0;
    double den = 0.0;
    for (const auto& d : ds) {
        const auto& idx = part == SplitPart::train ? d.train_idx : d.val_idx;
        if (idx.empty()) continue;
        std::vector<int> labels;
        const Tensor x = d.gather(idx, &labels);
        const Tensor probs = ensemble_predict(e, x);
        double rows = 0.0;
        num += accuracy_over(d, idx, space, probs, &rows);
        den += rows;
    }
    return den == 0.0 ? 0.0 : num / den;
}

TrainReport train_single(DomainModel& model, const std::vector<DomainDataset>& sources,
                         const ClassSpaceSpec& space, const TrainConfig& cfg) {
    if (sources.empty()) throw std::invalid_argument("train_single: no source datasets");
    if (is_ensemble_method(cfg.method)) {
        throw std::invalid_argument("train_single: method '" + method_name(cfg.method) +
                                    "' trains an ensemble; use train_ensemble");
    }
    validate_common(cfg);
    check_train_splits(sources);

    const RegKind reg = method_reg(cfg.method);
    const double gamma = cfg.weights.gamma;
    const std::size_t steps = steps_per_epoch(sources, cfg.batch_size);

    std::vector<BatchSampler> samplers;
    samplers.reserve(sources.size());
    for (std::size_t d = 0; d < sources.size(); ++d) {
        samplers.emplace_back(sources[d], space, cfg.batch_size,
                              mix_seed({cfg.seed, hash_str("sampler"), d}));
    }

    std::vector<Tensor> params = model.parameters();
    std::vector<std::vector<double>> velocity;
    std::vector<std::vector<double>> best_params = snapshot_values(params);

    TrainReport report;
    double best = -1.0;  // any measured accuracy (>= 0) improves on this
    std::size_t since_best = 0;

    for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        double loss_sum = 0.0;
        for (std::size_t step = 0; step < steps; ++step) {
            std::vector<Batch> batches;
            batches.reserve(sources.size());
            std::size_t min_rows = std::numeric_limits<std::size_t>::max();
            for (auto& s : samplers) {
                batches.push_back(s.next());
                min_rows = std::min(min_rows, batches.back().size());
            }
            {
                Tape tape;
                double total_rows = 0.0;
                for (const auto& b : batches) total_rows += static_cast<double>(b.size());
                std::optional<Tensor> loss;
                for (const auto& b : batches) {
                    const Tensor term = scale(cross_entropy(b.one_hot, model.logits(b.inputs)),
                                              static_cast<double>(b.size()) / total_rows);
                    loss = loss ? add(*loss, term) : term;
                }
                // The covariance penalty needs two or more rows per domain, so
                // a trailing one-row batch runs without the alignment term.
                const bool reg_ok = reg != RegKind::none && gamma != 0.0 &&
                                    (reg != RegKind::coral || min_rows >= 2);
                if (reg_ok) {
                    std::vector<Tensor> feats;
                    feats.reserve(batches.size());
                    for (const auto& b : batches) feats.push_back(model.features(b.inputs));
                    const Tensor r = reg == RegKind::coral ? coral_loss(feats)
                                                           : mmd_loss(feats, cfg.kernel);
                    loss = add(*loss, scale(r, gamma));
                }
                loss_sum += loss->item();
                tape.backward(*loss);
            }
            sgd_step(params, velocity, cfg.learning_rate, cfg.momentum);
            for (auto& p : params) p.zero_grad();
        }
        const double seconds = elapsed_seconds(t0);

        double acc = known_class_accuracy(model, sources, space, SplitPart::validation);
        if (cfg.val_acc_hook) acc = cfg.val_acc_hook(epoch, acc);

        report.epochs_run = epoch;
        report.epoch_seconds.push_back(seconds);
        report.epoch_mean_loss.push_back(loss_sum / static_cast<double>(steps));
        report.epoch_val_acc.push_back(acc);
        if (cfg.progress) {
            *cfg.progress << progress_line(epoch, std::nullopt, report.epoch_mean_loss.back(),
                                           acc, seconds)
                          << '\n';
        }

        if (acc > best) {
            best = acc;
            report.best_epoch = epoch;
            best_params = snapshot_values(params);
            since_best = 0;
        } else if (++since_best >= cfg.patience) {
            break;
        }
    }

    report.best_val_acc = best;
    restore_values(params, best_params);
    return report;
}

namespace {

struct MemberState {
    std::size_t index = 0;
    std::vector<BatchSampler> samplers;
    std::mt19937_64 loss_rng;
    std::vector<Tensor> params;
    std::vector<std::vector<double>> velocity;
    std::vector<std::vector<double>> best_params;
    double best_val = -1.0;
    std::size_t since_best = 0;
    bool stopped = false;
    TrainReport report;
    // scratch for the current epoch, filled inside the worker
    double epoch_loss = 0.0;
    double epoch_acc = 0.0;
    double epoch_secs = 0.0;
};

}  // namespace

std::vector<TrainReport> train_ensemble(ModelEnsemble& e,
                                        const std::vector<DomainDataset>& sources,
                                        const ClassSpaceSpec& space, const TrainConfig& cfg) {
    const std::size_t m = e.size();
    if (m == 0) throw std::invalid_argument("train_ensemble: empty ensemble");
    if (sources.size() != m) {
        throw std::invalid_argument("train_ensemble: " + std::to_string(m) + " members vs " +
                                    std::to_string(sources.size()) + " source domains");
    }
    if (!is_ensemble_method(cfg.method)) {
        throw std::invalid_argument("train_ensemble: method '" + method_name(cfg.method) +
                                    "' trains one model; use train_single");
    }
    validate_common(cfg);
    check_train_splits(sources);

    const RegKind reg = method_reg(cfg.method);
    const bool mixup = uses_mixup(cfg.method);
    const bool distill = uses_distillation(cfg.method);
    const std::size_t steps = steps_per_epoch(sources, cfg.batch_size);
    // Per-step snapshot refresh interleaves members step by step, which only
    // has a defined order serially.
    const std::size_t workers =
        cfg.per_step_snapshots ? 1 : std::max<std::size_t>(1, cfg.member_workers);

    if (!cfg.member_seeds.empty() && cfg.member_seeds.size() != m) {
        throw std::invalid_argument("train_ensemble: member_seeds must have one entry per member");
    }

    std::vector<MemberState> ms(m);
    for (std::size_t i = 0; i < m; ++i) {
        ms[i].index = i;
        const std::uint64_t base = cfg.member_seeds.empty()
                                       ? mix_seed({cfg.seed, hash_str("member"), i})
                                       : cfg.member_seeds[i];
        ms[i].samplers.reserve(sources.size());
        for (std::size_t d = 0; d < sources.size(); ++d) {
            ms[i].samplers.emplace_back(sources[d], space, cfg.batch_size,
                                        mix_seed({base, hash_str("sampler"), d}));
        }
        ms[i].loss_rng.seed(mix_seed({base, hash_str("loss")}));
        ms[i].params = e.members[i].parameters();
        ms[i].best_params = snapshot_values(ms[i].params);
    }

    std::vector<DomainModel> snaps;
    snaps.reserve(m);
    for (std::size_t i = 0; i < m; ++i) snaps.push_back(e.members[i].clone_frozen());

    const auto member_view = [&](std::size_t i) {
        ModelEnsemble view;
        view.members.reserve(m);
        for (std::size_t j = 0; j < m; ++j) {
            view.members.push_back(j == i ? e.members[i] : snaps[j]);
        }
        return view;
    };

    const auto member_step = [&](MemberState& s) {
        std::vector<Batch> batches;
        batches.reserve(sources.size());
        std::size_t min_rows = std::numeric_limits<std::size_t>::max();
        for (auto& sampler : s.samplers) {
            batches.push_back(sampler.next());
            min_rows = std::min(min_rows, batches.back().size());
        }
        if (mixup) {
            // The mixed term needs row-aligned batches across domains.
            for (auto& b : batches) {
                if (b.size() > min_rows) b = truncate_batch(b, min_rows);
            }
        }
        if (cfg.per_step_snapshots) {
            for (std::size_t j = 0; j < m; ++j) {
                if (j != s.index) snaps[j] = e.members[j].clone_frozen();
            }
        }
        const ModelEnsemble view = member_view(s.index);
        const RegKind step_reg =
            (reg == RegKind::coral && min_rows < 2) ? RegKind::none : reg;
        {
            Tape tape;
            Tensor loss = mixup ? l_dir(s.index, view, batches, cfg.weights, step_reg,
                                        s.loss_rng, cfg.mixup, cfg.kernel)
                          : distill ? l_dst(s.index, view, batches, cfg.weights, step_reg,
                                            s.loss_rng, cfg.distill, cfg.kernel)
                                    : ensemble_loss(s.index, view, batches, cfg.weights,
                                                    step_reg, cfg.kernel);
            s.epoch_loss += loss.item();
            tape.backward(loss);
        }
        sgd_step(s.params, s.velocity, cfg.learning_rate, cfg.momentum);
        for (auto& p : s.params) p.zero_grad();
    };

    const auto member_epoch = [&](MemberState& s) {
        s.epoch_loss = 0.0;
        const auto t0 = std::chrono::steady_clock::now();
        for (std::size_t step = 0; step < steps; ++step) member_step(s);
        s.epoch_secs = elapsed_seconds(t0);

        double acc;
        if (cfg.member_weighted_val) {
            const std::vector<double> w = member_weights(m, s.index);
            acc = known_class_accuracy(e.members[s.index], sources, space,
                                       SplitPart::validation, &w);
        } else {
            acc = known_class_accuracy(e.members[s.index], sources, space,
                                       SplitPart::validation);
        }
        const std::size_t epoch = s.report.epochs_run + 1;
        if (cfg.val_acc_hook) acc = cfg.val_acc_hook(epoch, acc);
        s.epoch_acc = acc;
    };

    // Global-stop bookkeeping: snapshots of every member at the ensemble's
    // best epoch so all of them can be restored together.
    double global_best = -1.0;
    std::size_t global_best_epoch = 0;
    std::size_t global_since_best = 0;
    std::vector<std::vector<std::vector<double>>> global_best_params;

    std::size_t epoch = 0;
    bool all_stopped = false;
    while (epoch < cfg.max_epochs && !all_stopped) {
        ++epoch;
        std::vector<std::size_t> active;
        for (std::size_t i = 0; i < m; ++i) {
            if (!ms[i].stopped) active.push_back(i);
        }

        if (workers <= 1 || active.size() <= 1) {
            for (std::size_t i : active) member_epoch(ms[i]);
        } else {
            std::atomic<std::size_t> next{0};
            std::vector<std::exception_ptr> errors(active.size());
            std::vector<std::thread> pool;
            const std::size_t n_threads = std::min(workers, active.size());
            for (std::size_t t = 0; t < n_threads; ++t) {
                pool.emplace_back([&] {
                    for (std::size_t k = next.fetch_add(1); k < active.size();
                         k = next.fetch_add(1)) {
                        try {
                            member_epoch(ms[active[k]]);
                        } catch (...) {
                            errors[k] = std::current_exception();
                        }
                    }
                });
            }
            for (auto& th : pool) th.join();
            for (const auto& err : errors) {
                if (err) std::rethrow_exception(err);
            }
        }

        // Everything below the barrier is serial, so selection decisions and
        // progress output are identical for any worker count.
        for (std::size_t i : active) {
            MemberState& s = ms[i];
            s.report.epochs_run = epoch;
            s.report.epoch_seconds.push_back(s.epoch_secs);
            s.report.epoch_mean_loss.push_back(s.epoch_loss / static_cast<double>(steps));
            s.report.epoch_val_acc.push_back(s.epoch_acc);
            if (cfg.progress) {
                *cfg.progress << progress_line(epoch, i, s.report.epoch_mean_loss.back(),
                                               s.epoch_acc, s.epoch_secs)
                              << '\n';
            }
        }

        if (cfg.global_early_stop) {
            const double eacc =
                ensemble_known_class_accuracy(e, sources, space, SplitPart::validation);
            if (eacc > global_best) {
                global_best = eacc;
                global_best_epoch = epoch;
                global_since_best = 0;
                global_best_params.clear();
                for (auto& s : ms) global_best_params.push_back(snapshot_values(s.params));
            } else if (++global_since_best >= cfg.patience) {
                all_stopped = true;
            }
        } else {
            for (std::size_t i : active) {
                MemberState& s = ms[i];
                if (s.epoch_acc > s.best_val) {
                    s.best_val = s.epoch_acc;
                    s.report.best_epoch = epoch;
                    s.best_params = snapshot_values(s.params);
                    s.since_best = 0;
                } else if (++s.since_best >= cfg.patience) {
                    s.stopped = true;
                    // Freeze at the best parameters; peers keep reading them.
                    restore_values(s.params, s.best_params);
                }
            }
            all_stopped = true;
            for (const auto& s : ms) {
                if (!s.stopped) all_stopped = false;
            }
        }

        if (!cfg.per_step_snapshots && (!all_stopped || cfg.global_early_stop)) {
            for (std::size_t j = 0; j < m; ++j) snaps[j] = e.members[j].clone_frozen();
        }
    }

    std::vector<TrainReport> reports;
    reports.reserve(m);
    if (cfg.global_early_stop) {
        for (std::size_t i = 0; i < m; ++i) {
            restore_values(ms[i].params, global_best_params[i]);
            ms[i].report.best_epoch = global_best_epoch;
            ms[i].report.best_val_acc = global_best;
            reports.push_back(std::move(ms[i].report));
        }
    } else {
        for (std::size_t i = 0; i < m; ++i) {
            restore_values(ms[i].params, ms[i].best_params);
            ms[i].report.best_val_acc = ms[i].best_val;
            reports.push_back(std::move(ms[i].report));
        }
    }
    return reports;
}

}  // namespace odg
