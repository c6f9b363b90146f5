#include "odg/runner.hpp"

#include "odg/losses.hpp"

#include "json.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>
#include <thread>
#include <tuple>

namespace odg {

namespace {

using nlohmann::json;

constexpr double kPi = 3.14159265358979323846;

[[noreturn]] void config_error(const std::string& msg) {
    throw std::runtime_error("config: " + msg);
}

void check_keys(const json& j, const std::string& where,
                std::initializer_list<const char*> allowed) {
    if (!j.is_object()) config_error(where + " must be an object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool ok = false;
        for (const char* a : allowed) {
            if (it.key() == a) {
                ok = true;
                break;
            }
        }
        if (!ok) config_error("unknown key '" + it.key() + "' in " + where);
    }
}

DomainShiftConfig parse_domain(const json& j, const std::string& where) {
    check_keys(j, where, {"rotation_deg", "scale", "translation", "noise_std"});
    DomainShiftConfig d;
    d.rotation_deg = j.value("rotation_deg", d.rotation_deg);
    d.scale = j.value("scale", d.scale);
    d.noise_std = j.value("noise_std", d.noise_std);
    if (j.contains("translation")) {
        d.translation = j.at("translation").get<std::vector<double>>();
    }
    return d;
}

ProblemConfig parse_problem(const json& j) {
    check_keys(j, "problem",
               {"preset", "officehome", "n_per_class", "dim", "class_sigma", "val_fraction",
                "domains", "files"});
    ProblemConfig pc;
    pc.preset = j.value("preset", pc.preset);
    if (pc.preset != "pacs_like" && pc.preset != "officehome_like" && pc.preset != "files") {
        config_error("unknown problem preset '" + pc.preset +
                     "' (valid: pacs_like, officehome_like, files)");
    }
    if (j.contains("officehome")) {
        const json& oh = j.at("officehome");
        check_keys(oh, "problem.officehome", {"major", "middle", "minor", "unknown"});
        pc.oh_major = oh.value("major", pc.oh_major);
        pc.oh_middle = oh.value("middle", pc.oh_middle);
        pc.oh_minor = oh.value("minor", pc.oh_minor);
        pc.oh_unknown = oh.value("unknown", pc.oh_unknown);
    }
    pc.n_per_class = j.value("n_per_class", pc.n_per_class);
    pc.dim = j.value("dim", pc.dim);
    pc.class_sigma = j.value("class_sigma", pc.class_sigma);
    pc.val_fraction = j.value("val_fraction", pc.val_fraction);
    if (j.contains("domains")) {
        std::size_t k = 0;
        for (const json& d : j.at("domains")) {
            pc.domains.push_back(parse_domain(d, "problem.domains[" + std::to_string(k) + "]"));
            ++k;
        }
    }
    if (j.contains("files")) pc.files = j.at("files").get<std::vector<std::string>>();
    return pc;
}

void parse_train(const json& j, ExperimentConfig& cfg) {
    check_keys(j, "train",
               {"learning_rate", "momentum", "batch_size", "max_epochs", "patience",
                "member_workers", "member_weighted_val", "global_early_stop",
                "per_step_snapshots", "distill_temperature", "mixup_alpha_own",
                "mixup_alpha_cross", "mixup_features", "mixup_weight", "distill_weight", "w"});
    TrainConfig& t = cfg.train;
    t.learning_rate = j.value("learning_rate", t.learning_rate);
    t.momentum = j.value("momentum", t.momentum);
    t.batch_size = j.value("batch_size", t.batch_size);
    t.max_epochs = j.value("max_epochs", t.max_epochs);
    t.patience = j.value("patience", t.patience);
    t.member_workers = j.value("member_workers", t.member_workers);
    t.member_weighted_val = j.value("member_weighted_val", t.member_weighted_val);
    t.global_early_stop = j.value("global_early_stop", t.global_early_stop);
    t.per_step_snapshots = j.value("per_step_snapshots", t.per_step_snapshots);
    t.weights.distill_temperature =
        j.value("distill_temperature", t.weights.distill_temperature);
    t.mixup.alpha_own = j.value("mixup_alpha_own", t.mixup.alpha_own);
    t.mixup.alpha_cross = j.value("mixup_alpha_cross", t.mixup.alpha_cross);
    t.mixup.extra_weight = j.value("mixup_weight", t.mixup.extra_weight);
    t.distill.extra_weight = j.value("distill_weight", t.distill.extra_weight);
    if (j.contains("mixup_features")) {
        const std::string mode = j.at("mixup_features").get<std::string>();
        if (mode == "own") {
            t.mixup.features = MixupFeatures::own;
        } else if (mode == "peer") {
            t.mixup.features = MixupFeatures::peer;
        } else {
            config_error("train.mixup_features must be 'own' or 'peer'");
        }
    }
    if (j.contains("w")) t.weights.w = j.at("w").get<std::vector<double>>();
}

std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

double parse_double_field(const std::string& s, const std::string& what) {
    double v = 0.0;
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || p != s.data() + s.size()) {
        throw std::runtime_error("results csv: bad " + what + " value '" + s + "'");
    }
    return v;
}

std::uint64_t parse_u64_field(const std::string& s, const std::string& what) {
    std::uint64_t v = 0;
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || p != s.data() + s.size()) {
        throw std::runtime_error("results csv: bad " + what + " value '" + s + "'");
    }
    return v;
}

const char* kResultsHeader =
    "method,trial,target,acc,h_score,tier_major,tier_middle,tier_minor,"
    "source_acc,sec_per_epoch,delta,seed";

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : line) {
        if (ch == ',') {
            out.push_back(cur);
            cur.clear();
        } else {
            cur += ch;
        }
    }
    out.push_back(cur);
    return out;
}

struct Stats {
    double mean = 0.0;
    double stddev = 0.0;  // population
};

Stats stats_of(const std::vector<double>& xs) {
    Stats s;
    if (xs.empty()) return s;
    s.mean = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
    double acc = 0.0;
    for (double x : xs) acc += (x - s.mean) * (x - s.mean);
    s.stddev = std::sqrt(acc / static_cast<double>(xs.size()));
    return s;
}

// Sorted unique method names / target ids present in a record set.
std::vector<std::string> methods_in(const std::vector<ResultRecord>& records) {
    std::set<std::string> s;
    for (const auto& r : records) s.insert(r.method);
    return {s.begin(), s.end()};
}

std::vector<int> targets_in(const std::vector<ResultRecord>& records) {
    std::set<int> s;
    for (const auto& r : records) s.insert(r.target_domain);
    return {s.begin(), s.end()};
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

std::vector<DomainShiftConfig> default_domains() {
    std::vector<DomainShiftConfig> out(4);
    for (std::size_t i = 0; i < 4; ++i) {
        out[i].rotation_deg = 10.0 * static_cast<double>(i);
        out[i].noise_std = 0.1;
    }
    return out;
}

ExperimentConfig parse_config(const std::string& json_text) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::parse_error& e) {
        config_error(std::string("invalid JSON: ") + e.what());
    }
    check_keys(j, "config",
               {"problem", "methods", "trials", "seed", "out_dir", "parallel", "verbose",
                "model", "train", "gamma", "delta"});

    ExperimentConfig cfg;
    if (j.contains("problem")) cfg.problem = parse_problem(j.at("problem"));
    if (cfg.problem.domains.empty()) cfg.problem.domains = default_domains();

    if (j.contains("methods")) {
        cfg.methods.clear();
        for (const json& m : j.at("methods")) {
            try {
                cfg.methods.push_back(method_from_string(m.get<std::string>()));
            } catch (const std::invalid_argument& e) {
                config_error(e.what());
            }
        }
    }
    if (cfg.methods.empty()) config_error("methods list is empty");

    cfg.trials = j.value("trials", cfg.trials);
    if (cfg.trials == 0) config_error("trials must be >= 1");
    cfg.seed = j.value("seed", cfg.seed);
    cfg.out_dir = j.value("out_dir", cfg.out_dir);
    cfg.parallel = j.value("parallel", cfg.parallel);
    cfg.verbose = j.value("verbose", cfg.verbose);

    if (j.contains("model")) {
        check_keys(j.at("model"), "model", {"hidden"});
        if (j.at("model").contains("hidden")) {
            cfg.hidden = j.at("model").at("hidden").get<std::vector<std::size_t>>();
        }
        if (cfg.hidden.empty()) config_error("model.hidden must list at least one width");
    }
    if (j.contains("train")) parse_train(j.at("train"), cfg);
    if (j.contains("gamma")) {
        check_keys(j.at("gamma"), "gamma", {"coral", "mmd"});
        cfg.gamma_coral = j.at("gamma").value("coral", cfg.gamma_coral);
        cfg.gamma_mmd = j.at("gamma").value("mmd", cfg.gamma_mmd);
    }
    if (j.contains("delta")) {
        const json& d = j.at("delta");
        check_keys(d, "delta", {"policy", "percentile", "value"});
        if (d.contains("policy")) {
            const std::string p = d.at("policy").get<std::string>();
            if (p == "calibrate") {
                cfg.delta.calibrate = true;
            } else if (p == "fixed") {
                cfg.delta.calibrate = false;
            } else {
                config_error("delta.policy must be 'calibrate' or 'fixed'");
            }
        }
        cfg.delta.percentile = d.value("percentile", cfg.delta.percentile);
        cfg.delta.fixed = d.value("value", cfg.delta.fixed);
    }
    return cfg;
}

ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read config file '" + path + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_config(buf.str());
}

ExperimentConfig demo_config() {
    ExperimentConfig cfg;
    cfg.problem.preset = "pacs_like";
    cfg.problem.domains = default_domains();
    cfg.problem.n_per_class = 24;
    cfg.problem.dim = 6;
    cfg.methods = {Method::erm, Method::coral, Method::mmd, Method::e_coral};
    cfg.trials = 1;
    cfg.seed = 0;
    cfg.out_dir = "demo_results";
    cfg.hidden = {16};
    cfg.train.learning_rate = 0.01;
    cfg.train.batch_size = 16;
    cfg.train.max_epochs = 10;
    cfg.train.patience = 10;
    // The covariance penalty runs on raw-scale features here, two orders of
    // magnitude above a bounded-kernel distance, so its coefficient shrinks
    // accordingly.
    cfg.gamma_coral = 0.01;
    cfg.gamma_mmd = 1.0;
    // With only ten epochs the confidence gap is narrow; a higher calibration
    // percentile makes the unknown column informative in the demo table.
    cfg.delta.percentile = 15.0;
    return cfg;
}

// ---------------------------------------------------------------------------
// Problems and cells
// ---------------------------------------------------------------------------

std::size_t rotation_count(const ProblemConfig& pc) {
    return pc.preset == "files" ? pc.files.size() : pc.domains.size();
}

namespace {

DomainShiftSpec to_shift(const DomainShiftConfig& d) {
    DomainShiftSpec s;
    s.rotation = d.rotation_deg * kPi / 180.0;
    s.scale = d.scale;
    s.translation = d.translation;
    s.noise_std = d.noise_std;
    return s;
}

OpenDomainProblem build_synthetic(const ProblemConfig& pc, std::size_t rotation,
                                  std::uint64_t data_seed) {
    const ClassSpaceSpec space =
        pc.preset == "pacs_like"
            ? pacs_like_space()
            : officehome_like_space(pc.oh_major, pc.oh_middle, pc.oh_minor, pc.oh_unknown);
    const std::size_t m = space.num_domains();
    if (pc.domains.size() != m + 1) {
        config_error("preset '" + pc.preset + "' needs " + std::to_string(m + 1) +
                     " domain entries (" + std::to_string(m) +
                     " sources plus one target per rotation), got " +
                     std::to_string(pc.domains.size()));
    }
    if (rotation >= pc.domains.size()) {
        throw std::invalid_argument("rotation " + std::to_string(rotation) + " out of range");
    }
    std::vector<DomainShiftSpec> shifts;
    shifts.reserve(m + 1);
    for (std::size_t d = 0; d < pc.domains.size(); ++d) {
        if (d != rotation) shifts.push_back(to_shift(pc.domains[d]));
    }
    shifts.push_back(to_shift(pc.domains[rotation]));
    return generate_problem(space, shifts, pc.n_per_class, pc.dim, data_seed, pc.class_sigma,
                            pc.val_fraction);
}

OpenDomainProblem build_from_files(const ProblemConfig& pc, std::size_t rotation,
                                   std::uint64_t data_seed) {
    if (pc.files.size() < 2) config_error("files preset needs at least two dataset paths");
    if (rotation >= pc.files.size()) {
        throw std::invalid_argument("rotation " + std::to_string(rotation) + " out of range");
    }
    std::vector<DomainDataset> all;
    all.reserve(pc.files.size());
    for (std::size_t i = 0; i < pc.files.size(); ++i) {
        all.push_back(load_dataset(pc.files[i], static_cast<int>(i), pc.val_fraction,
                                   mix_seed({data_seed, hash_str("split"), i})));
    }

    OpenDomainProblem p;
    std::set<int> known;
    std::vector<std::vector<int>> source_sets;
    for (std::size_t i = 0; i < all.size(); ++i) {
        if (i == rotation) continue;
        std::set<int> labels(all[i].labels.begin(), all[i].labels.end());
        source_sets.emplace_back(labels.begin(), labels.end());
        known.insert(labels.begin(), labels.end());
        p.sources.push_back(all[i]);
    }
    std::set<int> unknown;
    for (int l : all[rotation].labels) {
        if (!known.count(l)) unknown.insert(l);
    }
    if (unknown.empty()) {
        config_error("files preset: '" + pc.files[rotation] +
                     "' holds no classes unseen in the other files, so rotation " +
                     std::to_string(rotation) + " has no unknown class to detect");
    }
    p.space = custom_space(std::move(source_sets), {unknown.begin(), unknown.end()});
    p.target = all[rotation];
    return p;
}

// Probabilities of every source validation row under the trained model.
Tensor source_validation_probs(const ModelEnsemble& e, const OpenDomainProblem& p) {
    NoTapeGuard guard;
    std::vector<double> vals;
    std::size_t rows = 0;
    std::size_t cols = 0;
    for (const auto& ds : p.sources) {
        if (ds.val_idx.empty()) continue;
        std::vector<int> labels;
        const Tensor x = ds.gather(ds.val_idx, &labels);
        const Tensor probs = ensemble_predict(e, x);
        cols = probs.cols();
        rows += probs.rows();
        vals.insert(vals.end(), probs.values().begin(), probs.values().end());
    }
    if (rows == 0) throw std::runtime_error("no source validation rows to calibrate on");
    return Tensor::from_values(rows, cols, std::move(vals));
}

}  // namespace

OpenDomainProblem build_problem(const ProblemConfig& pc, std::size_t rotation,
                                std::uint64_t data_seed) {
    return pc.preset == "files" ? build_from_files(pc, rotation, data_seed)
                                : build_synthetic(pc, rotation, data_seed);
}

CellResult run_cell(const ExperimentConfig& cfg, Method method, std::size_t trial,
                    std::size_t rotation) {
    // Data depends on (trial, rotation) only; training additionally on the method.
    const std::uint64_t data_seed = mix_seed({cfg.seed, hash_str("data"), trial, rotation});
    const std::uint64_t train_seed = mix_seed(
        {cfg.seed, hash_str("train"), hash_str(method_name(method)), trial, rotation});

    OpenDomainProblem problem = build_problem(cfg.problem, rotation, data_seed);
    const std::size_t m = problem.space.num_domains();

    TrainConfig tc = cfg.train;
    tc.method = method;
    tc.seed = mix_seed({train_seed, hash_str("loop")});
    switch (method_reg(method)) {
        case RegKind::coral: tc.weights.gamma = cfg.gamma_coral; break;
        case RegKind::mmd: tc.weights.gamma = cfg.gamma_mmd; break;
        case RegKind::none: tc.weights.gamma = 0.0; break;
    }
    if (cfg.verbose && cfg.parallel <= 1) tc.progress = &std::cerr;

    std::vector<std::size_t> f_dims;
    f_dims.push_back(problem.target.dim());
    f_dims.insert(f_dims.end(), cfg.hidden.begin(), cfg.hidden.end());
    const std::uint64_t init_seed = mix_seed({train_seed, hash_str("init")});

    CellResult out;
    double sec_per_epoch = 0.0;
    if (is_ensemble_method(method)) {
        out.model = init_ensemble(m, f_dims, problem.space.num_known(), init_seed);
        const auto reports = train_ensemble(out.model, problem.sources, problem.space, tc);
        double total = 0.0;
        std::size_t epochs = 0;
        for (const auto& r : reports) {
            total += std::accumulate(r.epoch_seconds.begin(), r.epoch_seconds.end(), 0.0);
            epochs = std::max(epochs, r.epochs_run);
        }
        sec_per_epoch = total / static_cast<double>(epochs);
    } else {
        DomainModel model = init_model(f_dims, problem.space.num_known(), init_seed);
        const TrainReport report = train_single(model, problem.sources, problem.space, tc);
        out.model.members.push_back(std::move(model));
        sec_per_epoch =
            std::accumulate(report.epoch_seconds.begin(), report.epoch_seconds.end(), 0.0) /
            static_cast<double>(report.epochs_run);
    }

    const double delta =
        cfg.delta.calibrate
            ? calibrate_delta(source_validation_probs(out.model, problem), cfg.delta.percentile)
            : cfg.delta.fixed;

    NoTapeGuard guard;
    const Tensor target_probs = ensemble_predict(out.model, problem.target.inputs);
    const auto preds = predict_class(target_probs, delta);
    const EvalResult ev = evaluate(preds, problem.target.labels, problem.space, delta);

    ResultRecord& rec = out.record;
    rec.method = method_name(method);
    rec.trial = trial;
    rec.target_domain = static_cast<int>(rotation);
    rec.acc = ev.acc_known;
    rec.h_score = ev.h_score;
    rec.tier_major = ev.tier_acc_major;
    rec.tier_middle = ev.tier_acc_middle;
    rec.tier_minor = ev.tier_acc_minor;
    rec.source_acc = ensemble_known_class_accuracy(out.model, problem.sources, problem.space,
                                                   SplitPart::validation);
    rec.sec_per_epoch = sec_per_epoch;
    rec.delta = delta;
    rec.seed = train_seed;
    return out;
}

std::vector<ResultRecord> run_experiment(const ExperimentConfig& cfg) {
    struct Cell {
        Method method;
        std::size_t trial;
        std::size_t rotation;
    };
    std::vector<Cell> cells;
    const std::size_t rotations = rotation_count(cfg.problem);
    if (rotations < 2) config_error("need at least two domains to rotate a target");
    for (Method m : cfg.methods) {
        for (std::size_t t = 0; t < cfg.trials; ++t) {
            for (std::size_t r = 0; r < rotations; ++r) cells.push_back({m, t, r});
        }
    }

    std::vector<ResultRecord> records(cells.size());
    const auto run_one = [&](std::size_t k) {
        records[k] = run_cell(cfg, cells[k].method, cells[k].trial, cells[k].rotation).record;
        if (cfg.verbose) {
            std::ostringstream line;
            line << "cell done: " << records[k].method << " trial " << records[k].trial
                 << " target " << records[k].target_domain << " acc "
                 << records[k].acc << " h " << records[k].h_score << '\n';
            std::cerr << line.str();
        }
    };

    const std::size_t workers = std::max<std::size_t>(1, cfg.parallel);
    if (workers == 1 || cells.size() <= 1) {
        for (std::size_t k = 0; k < cells.size(); ++k) run_one(k);
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::exception_ptr> errors(cells.size());
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < std::min(workers, cells.size()); ++w) {
            pool.emplace_back([&] {
                for (std::size_t k = next.fetch_add(1); k < cells.size();
                     k = next.fetch_add(1)) {
                    try {
                        run_one(k);
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

    std::sort(records.begin(), records.end(), [](const ResultRecord& a, const ResultRecord& b) {
        return std::tie(a.method, a.trial, a.target_domain) <
               std::tie(b.method, b.trial, b.target_domain);
    });

    std::filesystem::create_directories(cfg.out_dir);
    write_results_csv(cfg.out_dir + "/results.csv", records);
    write_summary_csv(cfg.out_dir + "/summary.csv", records);
    return records;
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

void write_results_csv(const std::string& path, const std::vector<ResultRecord>& records) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write '" + path + "'");
    out << kResultsHeader << '\n';
    const auto opt = [](const std::optional<double>& v) {
        return v ? format_double(*v) : std::string();
    };
    for (const auto& r : records) {
        out << r.method << ',' << r.trial << ',' << r.target_domain << ','
            << format_double(r.acc) << ',' << format_double(r.h_score) << ','
            << opt(r.tier_major) << ',' << opt(r.tier_middle) << ',' << opt(r.tier_minor)
            << ',' << format_double(r.source_acc) << ',' << format_double(r.sec_per_epoch)
            << ',' << format_double(r.delta) << ',' << r.seed << '\n';
    }
    if (!out) throw std::runtime_error("cannot write '" + path + "'");
}

std::vector<ResultRecord> read_results_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read '" + path + "'");
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("results csv: '" + path + "' is empty");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != kResultsHeader) {
        throw std::runtime_error("results csv: unexpected header in '" + path + "'");
    }
    std::vector<ResultRecord> records;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto f = split_csv_line(line);
        if (f.size() != 12) {
            throw std::runtime_error("results csv: line " + std::to_string(lineno) + " has " +
                                     std::to_string(f.size()) + " fields, expected 12");
        }
        ResultRecord r;
        r.method = f[0];
        r.trial = static_cast<std::size_t>(parse_u64_field(f[1], "trial"));
        r.target_domain = static_cast<int>(parse_double_field(f[2], "target"));
        r.acc = parse_double_field(f[3], "acc");
        r.h_score = parse_double_field(f[4], "h_score");
        if (!f[5].empty()) r.tier_major = parse_double_field(f[5], "tier_major");
        if (!f[6].empty()) r.tier_middle = parse_double_field(f[6], "tier_middle");
        if (!f[7].empty()) r.tier_minor = parse_double_field(f[7], "tier_minor");
        r.source_acc = parse_double_field(f[8], "source_acc");
        r.sec_per_epoch = parse_double_field(f[9], "sec_per_epoch");
        r.delta = parse_double_field(f[10], "delta");
        r.seed = parse_u64_field(f[11], "seed");
        records.push_back(std::move(r));
    }
    return records;
}

// ---------------------------------------------------------------------------
// Summaries
// ---------------------------------------------------------------------------

namespace {

std::vector<const ResultRecord*> select(const std::vector<ResultRecord>& records,
                                        const std::string& method, int target) {
    std::vector<const ResultRecord*> out;
    for (const auto& r : records) {
        if (r.method == method && (target < 0 || r.target_domain == target)) {
            out.push_back(&r);
        }
    }
    return out;
}

// Across-target average of a field, one value per trial.
std::vector<double> per_trial_averages(const std::vector<ResultRecord>& records,
                                       const std::string& method,
                                       double ResultRecord::* field) {
    std::map<std::size_t, std::vector<double>> by_trial;
    for (const auto& r : records) {
        if (r.method == method) by_trial[r.trial].push_back(r.*field);
    }
    std::vector<double> out;
    for (const auto& [trial, xs] : by_trial) out.push_back(stats_of(xs).mean);
    return out;
}

}  // namespace

void write_summary_csv(const std::string& path, const std::vector<ResultRecord>& records) {
    if (records.empty()) throw std::invalid_argument("summary: no records");
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write '" + path + "'");
    out << "method,target,trials,acc_mean,acc_std,h_mean,h_std,source_acc_mean,"
           "sec_per_epoch_mean\n";
    for (const auto& method : methods_in(records)) {
        for (int target : targets_in(records)) {
            const auto rs = select(records, method, target);
            if (rs.empty()) continue;
            std::vector<double> acc, h, src, sec;
            for (const auto* r : rs) {
                acc.push_back(r->acc);
                h.push_back(r->h_score);
                src.push_back(r->source_acc);
                sec.push_back(r->sec_per_epoch);
            }
            out << method << ',' << target << ',' << rs.size() << ','
                << format_double(stats_of(acc).mean) << ',' << format_double(stats_of(acc).stddev)
                << ',' << format_double(stats_of(h).mean) << ','
                << format_double(stats_of(h).stddev) << ',' << format_double(stats_of(src).mean)
                << ',' << format_double(stats_of(sec).mean) << '\n';
        }
        // The headline row: each trial's across-target average, summarized
        // over trials (a single trial therefore shows zero spread).
        const auto acc_avgs = per_trial_averages(records, method, &ResultRecord::acc);
        const auto h_avgs = per_trial_averages(records, method, &ResultRecord::h_score);
        const auto src_avgs = per_trial_averages(records, method, &ResultRecord::source_acc);
        const auto sec_avgs = per_trial_averages(records, method, &ResultRecord::sec_per_epoch);
        out << method << ",avg," << acc_avgs.size() << ','
            << format_double(stats_of(acc_avgs).mean) << ','
            << format_double(stats_of(acc_avgs).stddev) << ','
            << format_double(stats_of(h_avgs).mean) << ','
            << format_double(stats_of(h_avgs).stddev) << ','
            << format_double(stats_of(src_avgs).mean) << ','
            << format_double(stats_of(sec_avgs).mean) << '\n';
    }
    if (!out) throw std::runtime_error("cannot write '" + path + "'");
}

std::vector<char> rank_markers(const std::vector<double>& values) {
    std::vector<char> marks(values.size(), ' ');
    if (values.empty()) return marks;
    double best = *std::max_element(values.begin(), values.end());
    double second = -std::numeric_limits<double>::infinity();
    bool has_second = false;
    for (double v : values) {
        if (v < best && v > second) {
            second = v;
            has_second = true;
        }
    }
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (values[i] == best) {
            marks[i] = '*';
        } else if (has_second && values[i] == second) {
            marks[i] = '+';
        }
    }
    return marks;
}

std::string summary_table(const std::vector<ResultRecord>& records) {
    if (records.empty()) throw std::invalid_argument("summary: no records");
    const auto methods = methods_in(records);
    const auto targets = targets_in(records);

    // Column values: per target then the across-target average, Acc and H.
    const std::size_t n_cols = 2 * (targets.size() + 1);
    std::vector<std::vector<double>> cols(n_cols, std::vector<double>(methods.size(), 0.0));
    for (std::size_t mi = 0; mi < methods.size(); ++mi) {
        for (std::size_t ti = 0; ti < targets.size(); ++ti) {
            const auto rs = select(records, methods[mi], targets[ti]);
            std::vector<double> acc, h;
            for (const auto* r : rs) {
                acc.push_back(r->acc);
                h.push_back(r->h_score);
            }
            cols[2 * ti][mi] = stats_of(acc).mean;
            cols[2 * ti + 1][mi] = stats_of(h).mean;
        }
        cols[2 * targets.size()][mi] =
            stats_of(per_trial_averages(records, methods[mi], &ResultRecord::acc)).mean;
        cols[2 * targets.size() + 1][mi] =
            stats_of(per_trial_averages(records, methods[mi], &ResultRecord::h_score)).mean;
    }

    std::vector<std::vector<char>> marks;
    marks.reserve(n_cols);
    for (const auto& c : cols) marks.push_back(rank_markers(c));

    std::ostringstream out;
    std::size_t name_w = 6;
    for (const auto& m : methods) name_w = std::max(name_w, m.size());
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%-*s", static_cast<int>(name_w), "method");
    out << buf;
    for (std::size_t ti = 0; ti <= targets.size(); ++ti) {
        const std::string tag =
            ti < targets.size() ? "t" + std::to_string(targets[ti]) : std::string("avg");
        std::snprintf(buf, sizeof(buf), "  %8s  %8s", (tag + ":Acc").c_str(),
                      (tag + ":H").c_str());
        out << buf;
    }
    out << '\n';
    for (std::size_t mi = 0; mi < methods.size(); ++mi) {
        std::snprintf(buf, sizeof(buf), "%-*s", static_cast<int>(name_w), methods[mi].c_str());
        out << buf;
        for (std::size_t c = 0; c < n_cols; ++c) {
            std::snprintf(buf, sizeof(buf), "  %7.4f%c", cols[c][mi], marks[c][mi]);
            out << buf;
        }
        out << '\n';
    }
    return out.str();
}

std::vector<std::pair<std::string, double>> time_epochs(
    const std::vector<ResultRecord>& records) {
    std::map<std::string, std::vector<double>> by_method;
    for (const auto& r : records) by_method[r.method].push_back(r.sec_per_epoch);
    std::vector<std::pair<std::string, double>> out;
    out.reserve(by_method.size());
    for (const auto& [m, xs] : by_method) out.emplace_back(m, stats_of(xs).mean);
    return out;
}

// ---------------------------------------------------------------------------
// Gradient spot checks
// ---------------------------------------------------------------------------

std::vector<GradCheckCase> gradcheck_suite() {
    std::vector<GradCheckCase> cases;
    std::mt19937_64 rng(20260823);
    std::normal_distribution<double> gauss(0.0, 1.0);
    const auto randn = [&](std::size_t r, std::size_t c) {
        std::vector<double> v(r * c);
        for (auto& x : v) x = gauss(rng);
        return Tensor::from_values(r, c, v);
    };

    {
        std::vector<double> t(5 * 4, 0.0);
        for (std::size_t r = 0; r < 5; ++r) t[r * 4 + r % 4] = 1.0;
        const Tensor targets = Tensor::from_values(5, 4, t);
        cases.push_back({"cross_entropy",
                         grad_check([targets](const Tensor& x) {
                             return cross_entropy(targets, x);
                         }, randn(5, 4))});
    }
    {
        const Tensor other = randn(6, 3);
        cases.push_back({"coral_loss", grad_check([other](const Tensor& x) {
                             return coral_loss({x, other});
                         }, randn(5, 3))});
    }
    {
        const Tensor other = randn(6, 3);
        KernelSpec kernel;
        kernel.median_heuristic = false;
        kernel.fixed_sigma_sqs = {0.5, 1.0, 2.0};
        cases.push_back({"mmd_loss", grad_check([other, kernel](const Tensor& x) {
                             return mmd_loss({x, other}, kernel);
                         }, randn(5, 3))});
    }

    // Small two-domain ensemble for the member objectives.
    auto space = custom_space({{0, 1}, {1, 2}}, {3});
    std::vector<DomainShiftSpec> shifts(3);
    shifts[1].rotation = 0.3;
    auto problem = generate_problem(space, shifts, 6, 4, 77, 1.0);
    ModelEnsemble ens = init_ensemble(2, {4, 5}, space.num_known(), 13);
    std::vector<Batch> batches;
    for (std::size_t d = 0; d < 2; ++d) {
        BatchSampler s(problem.sources[d], space, 4, d + 1);
        batches.push_back(s.next());
    }
    LossWeights weights;
    weights.gamma = 0.3;

    const auto member_loss_check = [&](const char* name, auto make_loss) {
        const Tensor w0 = ens.members[0].f.weights[0];
        cases.push_back({name, grad_check([&, make_loss](const Tensor& x) {
                             ModelEnsemble probe = ens;
                             probe.members[0].f.weights[0] = x;
                             return make_loss(probe);
                         }, w0.detach())});
    };
    member_loss_check("ensemble_loss", [&](const ModelEnsemble& e) {
        return ensemble_loss(0, e, batches, weights, RegKind::coral);
    });
    member_loss_check("dir_mixup_loss", [&](const ModelEnsemble& e) {
        std::mt19937_64 r(5);
        MixupConfig mix;
        mix.forced_lambda = {0.7, 0.3};
        std::vector<Batch> eq = batches;
        const std::size_t n = std::min(eq[0].size(), eq[1].size());
        for (auto& b : eq) b = truncate_batch(b, n);
        return l_dir(0, e, eq, weights, RegKind::coral, r, mix);
    });
    member_loss_check("distill_loss", [&](const ModelEnsemble& e) {
        std::mt19937_64 r(6);
        DistillConfig dst;
        dst.forced_lambda = {1.0};
        return l_dst(0, e, batches, weights, RegKind::coral, r, dst);
    });
    return cases;
}

}  // namespace odg
