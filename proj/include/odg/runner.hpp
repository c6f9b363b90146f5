#ifndef ODG_RUNNER_HPP
#define ODG_RUNNER_HPP

#include "odg/datagen.hpp"
#include "odg/eval.hpp"
#include "odg/model.hpp"
#include "odg/train.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace odg {

// ---------------------------------------------------------------------------
// Experiment configuration
// ---------------------------------------------------------------------------

// One physical domain's distortion, as written in config files (degrees).
struct DomainShiftConfig {
    double rotation_deg = 0.0;
    double scale = 1.0;
    std::vector<double> translation;
    double noise_std = 0.1;
};

// What data the experiment runs on. Presets draw synthetic domains (one
// DomainShiftConfig per physical domain; each rotation makes one of them the
// target and the rest the sources). The "files" preset reads one flat file
// per domain; the list order defines the rotation order and each file's label
// set defines its class space.
struct ProblemConfig {
    std::string preset = "pacs_like";  // pacs_like | officehome_like | files
    int oh_major = 2;                  // officehome_like tier sizes
    int oh_middle = 2;
    int oh_minor = 2;
    int oh_unknown = 3;
    std::size_t n_per_class = 40;
    std::size_t dim = 8;
    double class_sigma = 1.0;
    double val_fraction = 0.2;
    std::vector<DomainShiftConfig> domains;  // synthetic presets; M+1 entries
    std::vector<std::string> files;          // files preset; >= 2 paths
};

struct DeltaPolicy {
    bool calibrate = true;     // percentile of source validation confidence
    double percentile = 5.0;
    double fixed = 0.5;        // used when calibrate is off
};

struct ExperimentConfig {
    ProblemConfig problem;
    std::vector<Method> methods = {Method::erm};
    std::size_t trials = 1;
    std::uint64_t seed = 0;
    std::string out_dir = "results";
    std::size_t parallel = 1;  // experiment cells run on this many workers
    bool verbose = false;      // stream per-epoch progress lines to stderr
    std::vector<std::size_t> hidden = {64, 64};  // feature extractor widths
    TrainConfig train;      // per-cell fields (method, seed, gamma) are filled in
    double gamma_coral = 1.0;
    double gamma_mmd = 1.0;
    DeltaPolicy delta;
};

// Parse a JSON config (strict: unknown keys are rejected so typos surface).
ExperimentConfig parse_config(const std::string& json_text);
ExperimentConfig load_config(const std::string& path);

// Small built-in experiment on the default synthetic problem.
ExperimentConfig demo_config();

// The default four-domain synthetic layout: rotations 0/10/20/30 degrees
// with light noise, shared by the demo and the smoke checks.
std::vector<DomainShiftConfig> default_domains();

// ---------------------------------------------------------------------------
// Running
// ---------------------------------------------------------------------------

struct ResultRecord {
    std::string method;
    std::size_t trial = 0;
    int target_domain = 0;
    double acc = 0.0;      // known-class accuracy on the target domain
    double h_score = 0.0;  // with unknown-detection, Eq.-8 style
    std::optional<double> tier_major;
    std::optional<double> tier_middle;
    std::optional<double> tier_minor;
    double source_acc = 0.0;     // pooled source validation accuracy
    double sec_per_epoch = 0.0;  // training wall time per epoch (members summed)
    double delta = 0.0;          // unknown-detection threshold used
    std::uint64_t seed = 0;      // the cell's derived training seed
};

// Number of leave-one-domain-out rotations the config defines.
std::size_t rotation_count(const ProblemConfig& pc);

// Rotation r's problem: domain r is the target, the rest are sources in
// order. Data depends on (config, data_seed, rotation) only — never on the
// method — so every method sees identical splits.
OpenDomainProblem build_problem(const ProblemConfig& pc, std::size_t rotation,
                                std::uint64_t data_seed);

struct CellResult {
    ResultRecord record;
    ModelEnsemble model;  // single-method cells hold one member
};

// Train and evaluate one (method, trial, rotation) cell.
CellResult run_cell(const ExperimentConfig& cfg, Method method, std::size_t trial,
                    std::size_t rotation);

// All cells (methods x trials x rotations), optionally on cfg.parallel
// workers; records come back sorted by (method, trial, target) and are
// written to out_dir/results.csv and out_dir/summary.csv.
std::vector<ResultRecord> run_experiment(const ExperimentConfig& cfg);

// ---------------------------------------------------------------------------
// Persistence and reporting
// ---------------------------------------------------------------------------

void write_results_csv(const std::string& path, const std::vector<ResultRecord>& records);
std::vector<ResultRecord> read_results_csv(const std::string& path);

// Per-(method, target) means and population stds over trials, plus one "avg"
// row per method: the across-target average per trial, averaged over trials
// (its std is across trials, so a single trial reports 0 everywhere).
void write_summary_csv(const std::string& path, const std::vector<ResultRecord>& records);

// Aligned text table of mean Acc / H per target and their across-target
// average; per column the best method is marked '*' and the second best '+'.
std::string summary_table(const std::vector<ResultRecord>& records);

// Mean training seconds per epoch for each method, sorted by method name.
std::vector<std::pair<std::string, double>> time_epochs(
    const std::vector<ResultRecord>& records);

// Column markers: '*' on the maximum value(s), '+' on the second-largest
// distinct value(s), ' ' elsewhere.
std::vector<char> rank_markers(const std::vector<double>& values);

// ---------------------------------------------------------------------------
// Gradient spot-check suite (CLI `gradcheck`)
// ---------------------------------------------------------------------------

struct GradCheckCase {
    std::string name;
    GradCheckReport report;
};

// Finite-difference checks for every loss surface on seeded instances.
std::vector<GradCheckCase> gradcheck_suite();

}  // namespace odg

#endif  // ODG_RUNNER_HPP
