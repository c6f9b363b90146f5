// Acceptance gate: one check per release criterion, one verdict line each.
// Runs standalone (no test framework) so the output reads as a checklist;
// exits nonzero if any criterion fails.

#include "odg/losses.hpp"
#include "odg/runner.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

using namespace odg;

namespace {

int g_failures = 0;

void verdict(int idx, const std::string& title, bool pass, const std::string& detail) {
    std::printf("[%s] criterion %2d: %s%s%s\n", pass ? "PASS" : "FAIL", idx, title.c_str(),
                detail.empty() ? "" : " -- ", detail.c_str());
    std::fflush(stdout);
    if (!pass) ++g_failures;
}

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

Tensor random_tensor(std::size_t rows, std::size_t cols, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::vector<double> v(rows * cols);
    for (auto& x : v) x = gauss(rng);
    return Tensor::from_values(rows, cols, v);
}

// Row-stochastic rows from normalized uniform draws.
Tensor random_prob_rows(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> unif(0.01, 1.0);
    std::vector<double> v(rows * cols);
    for (std::size_t r = 0; r < rows; ++r) {
        double sum = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            v[r * cols + c] = unif(rng);
            sum += v[r * cols + c];
        }
        for (std::size_t c = 0; c < cols; ++c) v[r * cols + c] /= sum;
    }
    return Tensor::from_values(rows, cols, v);
}

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.4g", v);
    return buf;
}

// A small two-source open-domain problem plus ensemble, used by the member
// objective gradient checks.
struct MemberFixture {
    ClassSpaceSpec space;
    OpenDomainProblem problem;
    ModelEnsemble ensemble;
    std::vector<Batch> batches;
    LossWeights weights;
};

MemberFixture member_fixture(std::uint64_t seed) {
    MemberFixture fx;
    fx.space = custom_space({{0, 1}, {1, 2}}, {3});
    std::vector<DomainShiftSpec> shifts(3);
    shifts[1].rotation = 0.3;
    fx.problem = generate_problem(fx.space, shifts, 6, 4, seed, 1.0);
    fx.ensemble = init_ensemble(2, {4, 5}, fx.space.num_known(), seed + 1);
    for (std::size_t d = 0; d < 2; ++d) {
        BatchSampler s(fx.problem.sources[d], fx.space, 4, seed + 2 + d);
        fx.batches.push_back(s.next());
    }
    const std::size_t n = std::min(fx.batches[0].size(), fx.batches[1].size());
    for (auto& b : fx.batches) b = truncate_batch(b, n);
    fx.weights.gamma = 0.3;
    return fx;
}

// ---------------------------------------------------------------------------
// 1. Gradient suite
// ---------------------------------------------------------------------------

void criterion_gradients() {
    const auto t0 = Clock::now();
    std::size_t checks = 0;
    std::size_t passed = 0;
    double worst = 0.0;
    const auto run = [&](const GradCheckReport& r) {
        ++checks;
        if (r.pass) ++passed;
        worst = std::max(worst, r.max_rel_err);
    };

    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        {
            std::mt19937_64 rng(seed);
            const Tensor targets = random_prob_rows(4, 3, rng);
            run(grad_check([targets](const Tensor& x) { return cross_entropy(targets, x); },
                           random_tensor(4, 3, seed + 10)));
        }
        {
            const Tensor fixed = random_tensor(5, 3, seed + 20);
            run(grad_check([fixed](const Tensor& x) { return coral_loss({x, fixed}); },
                           random_tensor(4, 3, seed + 30)));
        }
        {
            const Tensor fixed = random_tensor(5, 3, seed + 40);
            KernelSpec kernel;
            kernel.median_heuristic = false;
            kernel.fixed_sigma_sqs = {0.5, 1.0, 2.0};
            run(grad_check(
                [fixed, kernel](const Tensor& x) { return mmd_loss({x, fixed}, kernel); },
                random_tensor(4, 3, seed + 50)));
        }
        const auto fx = member_fixture(100 + seed);
        const Tensor probe = fx.ensemble.members[0].f.weights[0].detach();
        run(grad_check(
            [&fx](const Tensor& x) {
                ModelEnsemble e = fx.ensemble;
                e.members[0].f.weights[0] = x;
                return ensemble_loss(0, e, fx.batches, fx.weights, RegKind::coral);
            },
            probe));
        run(grad_check(
            [&fx](const Tensor& x) {
                ModelEnsemble e = fx.ensemble;
                e.members[0].f.weights[0] = x;
                std::mt19937_64 rng(9);
                MixupConfig mix;
                mix.forced_lambda = {0.7, 0.3};
                return l_dir(0, e, fx.batches, fx.weights, RegKind::coral, rng, mix);
            },
            probe));
        run(grad_check(
            [&fx](const Tensor& x) {
                ModelEnsemble e = fx.ensemble;
                e.members[0].f.weights[0] = x;
                std::mt19937_64 rng(9);
                DistillConfig dst;
                dst.forced_lambda = {1.0};
                // Fixed bandwidths: the median heuristic is held constant in
                // backward, so finite differences must not move it either.
                KernelSpec kernel;
                kernel.median_heuristic = false;
                kernel.fixed_sigma_sqs = {0.5, 1.0, 2.0};
                return l_dst(0, e, fx.batches, fx.weights, RegKind::mmd, rng, dst, kernel);
            },
            probe));
    }
    const double secs = seconds_since(t0);
    verdict(1, "finite-difference gradients for every loss", passed == checks && secs < 60.0,
            std::to_string(passed) + "/" + std::to_string(checks) + " checks at rtol 1e-4, " +
                fmt(secs) + "s, worst rel err " + fmt(worst));
}

// ---------------------------------------------------------------------------
// 2. Loss oracles
// ---------------------------------------------------------------------------

void criterion_loss_oracles() {
    const Tensor b1 = Tensor::from_rows({{1.0, 0.0}, {-1.0, 0.0}});
    const Tensor b2 = Tensor::from_rows({{0.0, 1.0}, {0.0, -1.0}});
    const double coral_val = coral_loss({b1, b2}).item();
    const bool coral_ok = std::abs(coral_val - 4.0) <= 1e-12;

    KernelSpec unit;
    unit.median_heuristic = false;
    unit.fixed_sigma_sqs = {1.0};
    const Tensor z = Tensor::from_rows({{0.0, 0.0}});
    const Tensor x = Tensor::from_rows({{1.0, 1.0}});
    // Per ordered pair the squared distance is 2 - 2 e^{-1}; the loss averages
    // the two nonzero ordered pairs over all M^2 = 4 cells.
    const double per_pair = 2.0 - 2.0 * std::exp(-1.0);
    const double mmd_val = mmd_loss({z, x}, unit).item();
    const bool mmd_ok = std::abs(mmd_val - per_pair * 2.0 / 4.0) <= 1e-12;

    const Tensor f = random_tensor(5, 3, 7);
    const bool zero_ok =
        coral_loss({f, f}).item() == 0.0 && mmd_loss({f, f}, unit).item() == 0.0;

    verdict(2, "hand-computed loss values", coral_ok && mmd_ok && zero_ok,
            "coral " + fmt(coral_val) + " vs 4, mmd " + fmt(mmd_val) + " vs (2-2e^-1)/2" +
                (zero_ok ? ", identical batches give exact 0" : ", nonzero on identical"));
}

// ---------------------------------------------------------------------------
// 3. Simplex properties
// ---------------------------------------------------------------------------

void criterion_simplex() {
    DirichletParams params;
    params.alpha = {0.6, 0.2, 0.2};
    std::mt19937_64 rng(777);
    std::vector<double> mean(3, 0.0);
    double worst_sum_gap = 0.0;
    const std::size_t draws = 10000;
    for (std::size_t k = 0; k < draws; ++k) {
        const auto lam = sample_dirichlet(params, rng);
        double s = 0.0;
        for (std::size_t i = 0; i < 3; ++i) {
            mean[i] += lam[i];
            s += lam[i];
        }
        worst_sum_gap = std::max(worst_sum_gap, std::abs(s - 1.0));
    }
    bool mean_ok = true;
    double worst_mean_gap = 0.0;
    const std::vector<double> expect = {0.6, 0.2, 0.2};
    for (std::size_t i = 0; i < 3; ++i) {
        mean[i] /= static_cast<double>(draws);
        worst_mean_gap = std::max(worst_mean_gap, std::abs(mean[i] - expect[i]));
        mean_ok = mean_ok && std::abs(mean[i] - expect[i]) <= 0.02;
    }

    // Row-stochastic mixes and pseudo-labels over 100 random instances.
    bool stochastic_ok = worst_sum_gap <= 1e-9;
    const DomainModel peer_a = init_model({4, 5}, 3, 31);
    const DomainModel peer_b = init_model({4, 5}, 3, 32);
    const std::vector<const DomainModel*> peers = {&peer_a, &peer_b};
    DirichletParams two;
    two.alpha = {0.5, 0.5};
    for (int inst = 0; inst < 100; ++inst) {
        std::vector<Tensor> feats, labels;
        for (int d = 0; d < 3; ++d) {
            feats.push_back(random_tensor(4, 3, 1000 + 10 * inst + d));
            labels.push_back(random_prob_rows(4, 5, rng));
        }
        const auto lam = sample_dirichlet(params, rng);
        const auto [mx, ml] = dir_mixup(feats, labels, lam);
        for (std::size_t r = 0; r < ml.rows(); ++r) {
            double s = 0.0;
            for (std::size_t c = 0; c < ml.cols(); ++c) s += ml.at(r, c);
            stochastic_ok = stochastic_ok && std::abs(s - 1.0) <= 1e-9;
        }
        const Tensor q = distill_label(peers, random_tensor(3, 4, 2000 + inst),
                                       sample_dirichlet(two, rng), 2.0);
        for (std::size_t r = 0; r < q.rows(); ++r) {
            double s = 0.0;
            for (std::size_t c = 0; c < q.cols(); ++c) s += q.at(r, c);
            stochastic_ok = stochastic_ok && std::abs(s - 1.0) <= 1e-9;
        }
    }

    // One-hot lambda hands back member k's batch untouched.
    bool onehot_ok = true;
    {
        std::vector<Tensor> feats, labels;
        for (int d = 0; d < 3; ++d) {
            feats.push_back(random_tensor(4, 3, 3000 + d));
            labels.push_back(random_prob_rows(4, 5, rng));
        }
        for (std::size_t k = 0; k < 3; ++k) {
            std::vector<double> lam(3, 0.0);
            lam[k] = 1.0;
            const auto [mx, ml] = dir_mixup(feats, labels, lam);
            onehot_ok = onehot_ok && mx.values() == feats[k].values() &&
                        ml.values() == labels[k].values();
        }
    }

    verdict(3, "Dirichlet draws and convex mixes", mean_ok && stochastic_ok && onehot_ok,
            "10000-draw mean gap " + fmt(worst_mean_gap) + " (<=0.02), row sums within 1e-9, " +
                std::string(onehot_ok ? "one-hot lambda exact" : "one-hot lambda DRIFTS"));
}

// ---------------------------------------------------------------------------
// 4. Unknown-aware prediction and metrics
// ---------------------------------------------------------------------------

void criterion_prediction() {
    std::mt19937_64 rng(404);
    const Tensor probs = random_prob_rows(1000, 6, rng);
    // Boundary value: a row's exact maximum, where the strict inequality
    // must keep the row classified as known.
    double row0_max = 0.0;
    for (std::size_t c = 0; c < 6; ++c) row0_max = std::max(row0_max, probs.at(0, c));
    const std::vector<double> deltas = {1e-6, 0.05, 1.0 / 6.0, 0.2,      0.3,
                                        0.45, 0.6,  0.9,       row0_max, 1.0 - 1e-9};
    bool predict_ok = true;
    for (double delta : deltas) {
        const auto got = predict_class(probs, delta);
        for (std::size_t r = 0; r < probs.rows(); ++r) {
            double best = probs.at(r, 0);
            int arg = 0;
            for (int c = 1; c < 6; ++c) {
                if (probs.at(r, static_cast<std::size_t>(c)) > best) {
                    best = probs.at(r, static_cast<std::size_t>(c));
                    arg = c;
                }
            }
            const int want = best < delta ? kUnknownPrediction : arg;
            predict_ok = predict_ok && got[r] == want;
        }
    }

    const bool h_ok = h_score(0.6, 0.4) == 0.48;

    // evaluate() against a plain confusion recount on random instances.
    bool eval_ok = true;
    const auto space = pacs_like_space();
    std::uniform_int_distribution<int> any_label(0, 6);  // six known plus label 6 unknown
    for (int inst = 0; inst < 5; ++inst) {
        const Tensor p = random_prob_rows(200, 6, rng);
        const auto preds = predict_class(p, 0.3);
        std::vector<int> truth(200);
        for (auto& t : truth) t = any_label(rng);
        const auto ev = evaluate(preds, truth, space, 0.3);

        std::size_t known_n = 0, known_hit = 0, unk_n = 0, unk_hit = 0;
        std::vector<std::vector<std::size_t>> confusion(8, std::vector<std::size_t>(8, 0));
        for (std::size_t s = 0; s < truth.size(); ++s) {
            const bool unknown = truth[s] == 6;
            const std::size_t row = unknown ? 6 : static_cast<std::size_t>(truth[s]);
            const std::size_t col =
                preds[s] == kUnknownPrediction ? 6 : static_cast<std::size_t>(preds[s]);
            confusion[row][col]++;
            if (unknown) {
                ++unk_n;
                if (preds[s] == kUnknownPrediction) ++unk_hit;
            } else {
                ++known_n;
                if (preds[s] == truth[s]) ++known_hit;
            }
        }
        const double acc = known_n ? double(known_hit) / double(known_n) : 0.0;
        const double det = unk_n ? double(unk_hit) / double(unk_n) : 0.0;
        eval_ok = eval_ok && ev.acc_known == acc && ev.acc_unknown_detect == det &&
                  ev.h_score == h_score(acc, det);
        for (std::size_t r = 0; r < 7; ++r) {
            for (std::size_t c = 0; c < 7; ++c) {
                eval_ok = eval_ok && ev.confusion[r][c] == confusion[r][c];
            }
        }
    }

    verdict(4, "unknown thresholding and metric recount", predict_ok && h_ok && eval_ok,
            "1000 rows x 10 deltas vs brute force, h(0.6,0.4)==0.48 exact, 5 recounts");
}

// ---------------------------------------------------------------------------
// 5. ERM reduction
// ---------------------------------------------------------------------------

void criterion_erm_reduction() {
    bool ok = true;
    const auto space = custom_space({{0, 1, 2}}, {3});
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        std::vector<DomainShiftSpec> shifts(2);
        const auto problem = generate_problem(space, shifts, 5, 3, 500 + seed, 1.0);
        const auto ens = init_ensemble(1, {3, 6}, space.num_known(), 600 + seed);
        BatchSampler sampler(problem.sources[0], space, 8, 700 + seed);
        const Batch b = sampler.next();
        LossWeights w;
        w.w = {1.0};
        w.gamma = 0.0;
        const double lhs = ensemble_loss(0, ens, {b}, w, RegKind::none).item();
        const double rhs = cross_entropy(b.one_hot, ens.members[0].logits(b.inputs)).item();
        ok = ok && lhs == rhs;
    }
    verdict(5, "single-member objective collapses to cross-entropy", ok,
            "bit-for-bit over 20 random batches");
}

// ---------------------------------------------------------------------------
// 6. Determinism and parallel equivalence
// ---------------------------------------------------------------------------

bool same_metrics(const ResultRecord& a, const ResultRecord& b) {
    return a.method == b.method && a.trial == b.trial && a.target_domain == b.target_domain &&
           a.acc == b.acc && a.h_score == b.h_score && a.tier_major == b.tier_major &&
           a.tier_middle == b.tier_middle && a.tier_minor == b.tier_minor &&
           a.source_acc == b.source_acc && a.delta == b.delta && a.seed == b.seed;
}

bool same_parameters(const ModelEnsemble& a, const ModelEnsemble& b) {
    const auto pa = a.parameters();
    const auto pb = b.parameters();
    if (pa.size() != pb.size()) return false;
    for (std::size_t i = 0; i < pa.size(); ++i) {
        if (pa[i].values() != pb[i].values()) return false;
    }
    return true;
}

void criterion_determinism() {
    auto cfg = demo_config();
    cfg.out_dir = (std::filesystem::temp_directory_path() / "odg_accept_demo1").string();
    const auto run1 = run_experiment(cfg);
    cfg.out_dir = (std::filesystem::temp_directory_path() / "odg_accept_demo2").string();
    const auto run2 = run_experiment(cfg);
    bool demo_ok = run1.size() == run2.size() && !run1.empty();
    for (std::size_t k = 0; demo_ok && k < run1.size(); ++k) {
        demo_ok = same_metrics(run1[k], run2[k]);
    }
    std::filesystem::remove_all((std::filesystem::temp_directory_path() / "odg_accept_demo1"));
    std::filesystem::remove_all((std::filesystem::temp_directory_path() / "odg_accept_demo2"));

    // e_coral: one worker vs three must land on bit-identical members.
    ProblemConfig pc;
    pc.preset = "pacs_like";
    pc.domains = default_domains();
    pc.n_per_class = 8;
    pc.dim = 4;
    const auto problem = build_problem(pc, 0, 909);
    TrainConfig tc;
    tc.method = Method::e_coral;
    tc.learning_rate = 0.01;
    tc.batch_size = 8;
    tc.max_epochs = 4;
    tc.patience = 4;
    tc.seed = 55;
    tc.weights.gamma = 0.01;
    const auto base = init_ensemble(3, {4, 8}, problem.space.num_known(), 77);
    ModelEnsemble serial = base.clone();
    ModelEnsemble threaded = base.clone();
    tc.member_workers = 1;
    train_ensemble(serial, problem.sources, problem.space, tc);
    tc.member_workers = 3;
    train_ensemble(threaded, problem.sources, problem.space, tc);
    const bool parallel_ok = same_parameters(serial, threaded);

    verdict(6, "repeatable runs and worker-count invariance", demo_ok && parallel_ok,
            std::string(demo_ok ? "demo records identical" : "demo records DIFFER") +
                (parallel_ok ? ", e_coral 1 vs 3 workers bit-identical"
                             : ", e_coral workers DIVERGE"));
}

// ---------------------------------------------------------------------------
// 7-9. Shared training grid on the default synthetic problem
// ---------------------------------------------------------------------------

struct GridResults {
    ExperimentConfig cfg;
    std::vector<ResultRecord> records;
    // Trained models for the alignment comparison, keyed by method name,
    // in (trial, rotation) order.
    std::map<std::string, std::vector<ModelEnsemble>> models;
    double seconds = 0.0;
};

double mean_of(const std::vector<double>& xs) {
    return std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
}

double mean_field(const std::vector<ResultRecord>& records, const std::string& method,
                  double ResultRecord::* field) {
    std::vector<double> xs;
    for (const auto& r : records) {
        if (r.method == method) xs.push_back(r.*field);
    }
    return mean_of(xs);
}

GridResults run_grid() {
    GridResults g;
    ExperimentConfig& cfg = g.cfg;
    cfg.problem.preset = "pacs_like";
    cfg.problem.domains = default_domains();  // rotations 0/10/20/30 degrees
    cfg.problem.n_per_class = 80;
    cfg.problem.dim = 8;
    cfg.methods = all_methods();
    cfg.trials = 3;
    cfg.seed = 0;
    cfg.hidden = {64, 64};
    cfg.train.learning_rate = 0.01;
    cfg.train.batch_size = 32;
    cfg.train.max_epochs = 100;
    cfg.train.patience = 10;
    // Feature-scale-adjusted penalty weights: the covariance gap is O(100)
    // on these raw features while the kernel distance is O(0.1), so the two
    // coefficients bracket the configured default of 1 from opposite sides.
    cfg.gamma_coral = 0.005;
    cfg.gamma_mmd = 2.0;
    cfg.delta.percentile = 15.0;

    const auto t0 = Clock::now();
    const std::set<std::string> keep = {"erm", "coral", "mmd"};
    for (Method m : cfg.methods) {
        std::fprintf(stderr, "  [grid] training %s ...\n", method_name(m).c_str());
        for (std::size_t t = 0; t < cfg.trials; ++t) {
            for (std::size_t r = 0; r < rotation_count(cfg.problem); ++r) {
                auto cell = run_cell(cfg, m, t, r);
                if (keep.count(cell.record.method)) {
                    g.models[cell.record.method].push_back(std::move(cell.model));
                }
                g.records.push_back(std::move(cell.record));
            }
        }
    }
    g.seconds = seconds_since(t0);
    return g;
}

// Alignment loss over held-out (validation) source features of a model.
double validation_alignment(const DomainModel& model, const OpenDomainProblem& problem,
                            RegKind kind) {
    NoTapeGuard guard;
    std::vector<Tensor> feats;
    for (const auto& ds : problem.sources) {
        std::vector<int> labels;
        feats.push_back(model.features(ds.gather(ds.val_idx, &labels)));
    }
    return kind == RegKind::coral ? coral_loss(feats).item() : mmd_loss(feats).item();
}

void criterion_alignment(const GridResults& g) {
    const std::size_t rotations = rotation_count(g.cfg.problem);
    bool h_primary = true;
    bool dist_mean = true;
    bool dist_every_trial = true;
    std::string detail;
    for (const std::string aligned : {"coral", "mmd"}) {
        const RegKind kind = aligned == "coral" ? RegKind::coral : RegKind::mmd;
        // Per-trial across-rotation means of H and of the alignment value.
        std::vector<double> h_align, h_erm, d_align, d_erm;
        for (std::size_t t = 0; t < g.cfg.trials; ++t) {
            std::vector<double> ha, he, da, de;
            for (std::size_t r = 0; r < rotations; ++r) {
                const std::size_t cell = t * rotations + r;
                const auto problem = build_problem(
                    g.cfg.problem, r, mix_seed({g.cfg.seed, hash_str("data"), t, r}));
                da.push_back(validation_alignment(g.models.at(aligned)[cell].members[0],
                                                  problem, kind));
                de.push_back(
                    validation_alignment(g.models.at("erm")[cell].members[0], problem, kind));
                for (const auto& rec : g.records) {
                    if (rec.trial == t && rec.target_domain == static_cast<int>(r)) {
                        if (rec.method == aligned) ha.push_back(rec.h_score);
                        if (rec.method == "erm") he.push_back(rec.h_score);
                    }
                }
            }
            h_align.push_back(mean_of(ha));
            h_erm.push_back(mean_of(he));
            d_align.push_back(mean_of(da));
            d_erm.push_back(mean_of(de));
            dist_every_trial = dist_every_trial && d_align.back() <= 0.8 * d_erm.back();
        }
        h_primary = h_primary && mean_of(h_align) > mean_of(h_erm);
        dist_mean = dist_mean && mean_of(d_align) <= 0.8 * mean_of(d_erm);
        detail += aligned + " H " + fmt(mean_of(h_align)) + " vs erm " + fmt(mean_of(h_erm)) +
                  ", align cut";
        for (std::size_t t = 0; t < d_align.size(); ++t) {
            detail += " " + fmt(100.0 * (1.0 - d_align[t] / d_erm[t])) + "%";
        }
        detail += "; ";
    }
    const bool primary = h_primary && dist_mean;
    const bool pass = primary || dist_every_trial;
    detail += primary ? "primary path" : (pass ? "fallback: >=20% per trial" : "NEITHER path");
    detail += ", grid " + fmt(g.seconds) + "s";
    verdict(7, "alignment beats plain pooling on the shifted target", pass && g.seconds < 600.0,
            detail);
}

void criterion_source_accuracy(const GridResults& g) {
    const double c = mean_field(g.records, "coral", &ResultRecord::source_acc);
    const double ec = mean_field(g.records, "e_coral", &ResultRecord::source_acc);
    const double m = mean_field(g.records, "mmd", &ResultRecord::source_acc);
    const double em = mean_field(g.records, "e_mmd", &ResultRecord::source_acc);
    const bool pass = ec >= c - 0.01 && em >= m - 0.01;
    verdict(8, "ensembles hold source validation accuracy", pass,
            "e_coral " + fmt(ec) + " vs coral " + fmt(c) + ", e_mmd " + fmt(em) + " vs mmd " +
                fmt(m) + " (tolerance 1pp)");
}

void criterion_timing(const GridResults& g) {
    std::map<std::string, double> sec;
    for (const auto& [name, s] : time_epochs(g.records)) sec[name] = s;
    struct Pair {
        const char* slow;
        const char* fast;
    };
    const std::vector<Pair> orderings = {
        {"coral", "erm"},          {"mmd", "erm"},         {"e_coral", "coral"},
        {"e_mmd", "mmd"},          {"edir_coral", "e_coral"}, {"edir_mmd", "e_mmd"},
        {"edst_coral", "e_coral"}, {"edst_mmd", "e_mmd"},
    };
    bool pass = true;
    std::string detail;
    for (const auto& p : orderings) {
        const bool ok = sec.at(p.slow) >= sec.at(p.fast);
        pass = pass && ok;
        if (!ok) detail += std::string(p.slow) + " < " + p.fast + "! ";
    }
    for (const auto& [name, s] : sec) detail += name + " " + fmt(s * 1e3) + "ms ";
    verdict(9, "per-epoch cost ordering", pass, detail);
}

// ---------------------------------------------------------------------------
// 10. Tier reporting
// ---------------------------------------------------------------------------

void criterion_tiers(const GridResults& g) {
    bool pacs_ok = !g.records.empty();
    for (const auto& r : g.records) {
        pacs_ok = pacs_ok && !r.tier_major.has_value() && r.tier_middle.has_value() &&
                  r.tier_minor.has_value();
    }

    ExperimentConfig oh = g.cfg;
    oh.problem.preset = "officehome_like";
    oh.trials = 1;
    oh.problem.n_per_class = 12;
    oh.train.max_epochs = 5;
    const auto cell = run_cell(oh, Method::erm, 0, 0);
    const bool oh_ok = cell.record.tier_major.has_value() &&
                       cell.record.tier_middle.has_value() &&
                       cell.record.tier_minor.has_value();

    verdict(10, "tier columns follow the class structure", pacs_ok && oh_ok,
            std::string(pacs_ok ? "pacs_like: major absent, middle+minor present"
                                : "pacs_like tiers WRONG") +
                (oh_ok ? "; officehome_like: all three present" : "; officehome tiers MISSING"));
}

}  // namespace

int main() {
    std::printf("acceptance checks\n=================\n");
    const auto t0 = Clock::now();

    try {
        criterion_gradients();
    } catch (const std::exception& e) {
        verdict(1, "finite-difference gradients for every loss", false,
                std::string("exception: ") + e.what());
    }
    try {
        criterion_loss_oracles();
    } catch (const std::exception& e) {
        verdict(2, "hand-computed loss values", false, std::string("exception: ") + e.what());
    }
    try {
        criterion_simplex();
    } catch (const std::exception& e) {
        verdict(3, "Dirichlet draws and convex mixes", false,
                std::string("exception: ") + e.what());
    }
    try {
        criterion_prediction();
    } catch (const std::exception& e) {
        verdict(4, "unknown thresholding and metric recount", false,
                std::string("exception: ") + e.what());
    }
    try {
        criterion_erm_reduction();
    } catch (const std::exception& e) {
        verdict(5, "single-member objective collapses to cross-entropy", false,
                std::string("exception: ") + e.what());
    }
    try {
        criterion_determinism();
    } catch (const std::exception& e) {
        verdict(6, "repeatable runs and worker-count invariance", false,
                std::string("exception: ") + e.what());
    }
    try {
        const GridResults grid = run_grid();
        try {
            criterion_alignment(grid);
        } catch (const std::exception& e) {
            verdict(7, "alignment beats plain pooling on the shifted target", false,
                    std::string("exception: ") + e.what());
        }
        try {
            criterion_source_accuracy(grid);
        } catch (const std::exception& e) {
            verdict(8, "ensembles hold source validation accuracy", false,
                    std::string("exception: ") + e.what());
        }
        try {
            criterion_timing(grid);
        } catch (const std::exception& e) {
            verdict(9, "per-epoch cost ordering", false, std::string("exception: ") + e.what());
        }
        try {
            criterion_tiers(grid);
        } catch (const std::exception& e) {
            verdict(10, "tier columns follow the class structure", false,
                    std::string("exception: ") + e.what());
        }
    } catch (const std::exception& e) {
        const std::string why = std::string("training grid failed: ") + e.what();
        verdict(7, "alignment beats plain pooling on the shifted target", false, why);
        verdict(8, "ensembles hold source validation accuracy", false, why);
        verdict(9, "per-epoch cost ordering", false, why);
        verdict(10, "tier columns follow the class structure", false, why);
    }

    std::printf("=================\n%s (%d of 10 criteria failed, %.1fs total)\n",
                g_failures == 0 ? "ALL CRITERIA PASS" : "FAILURES PRESENT", g_failures,
                seconds_since(t0));
    return g_failures == 0 ? 0 : 1;
}
