#include "odg/datagen.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numbers>
#include <set>
#include <stdexcept>

namespace odg {

// ---------------------------------------------------------------------------
// Seed plumbing
// ---------------------------------------------------------------------------

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

std::uint64_t mix_seed(std::initializer_list<std::uint64_t> parts) {
    std::uint64_t acc = 0x6a09e667f3bcc908ULL;  // arbitrary non-zero start
    for (std::uint64_t p : parts) acc = splitmix64(acc ^ splitmix64(p));
    return acc;
}

std::uint64_t hash_str(std::string_view s) {
    std::uint64_t h = 14695981039346656037ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

// ---------------------------------------------------------------------------
// ClassSpaceSpec
// ---------------------------------------------------------------------------

namespace {

void sort_dedup(std::vector<int>& v) {
    std::sort(v.begin(), v.end());
    v.erase(std::unique(v.begin(), v.end()), v.end());
}

}  // namespace

void ClassSpaceSpec::finalize() {
    if (source_classes.empty())
        throw std::invalid_argument("class space: need at least one source domain");
    std::map<int, int> counts;
    for (auto& s : source_classes) {
        sort_dedup(s);
        if (s.empty()) throw std::invalid_argument("class space: empty source label set");
        for (int label : s) {
            if (label < 0)
                throw std::invalid_argument("class space: negative label " +
                                            std::to_string(label));
            ++counts[label];
        }
    }
    target_known.clear();
    for (const auto& [label, n] : counts) target_known.push_back(label);

    sort_dedup(target_unknown);
    for (int label : target_unknown) {
        if (label < 0)
            throw std::invalid_argument("class space: negative label " + std::to_string(label));
        if (counts.count(label) != 0)
            throw std::invalid_argument("class space: unknown class " + std::to_string(label) +
                                        " also appears in a source set");
    }

    major_classes.clear();
    middle_classes.clear();
    minor_classes.clear();
    for (const auto& [label, n] : counts) {
        if (n >= 3)
            major_classes.push_back(label);
        else if (n == 2)
            middle_classes.push_back(label);
        else
            minor_classes.push_back(label);
    }
}

int ClassSpaceSpec::class_index(int label) const {
    auto it = std::lower_bound(target_known.begin(), target_known.end(), label);
    if (it == target_known.end() || *it != label) return -1;
    return static_cast<int>(it - target_known.begin());
}

bool ClassSpaceSpec::is_unknown(int label) const {
    return std::binary_search(target_unknown.begin(), target_unknown.end(), label);
}

ClassSpaceSpec pacs_like_space() {
    ClassSpaceSpec s;
    s.source_classes = {{0, 1, 3}, {0, 2, 4}, {1, 2, 5}};
    s.target_unknown = {6};
    s.finalize();
    return s;
}

ClassSpaceSpec officehome_like_space(int major, int middle, int minor, int unknown) {
    if (major < 1 || middle < 1 || minor < 1 || unknown < 1)
        throw std::invalid_argument("officehome_like_space: all tier counts must be >= 1");
    ClassSpaceSpec s;
    s.source_classes.assign(3, {});
    int next = 0;
    for (int k = 0; k < major; ++k, ++next)
        for (int d = 0; d < 3; ++d) s.source_classes[static_cast<std::size_t>(d)].push_back(next);
    const int pairs[3][2] = {{0, 1}, {0, 2}, {1, 2}};
    for (const auto& pr : pairs)
        for (int k = 0; k < middle; ++k, ++next) {
            s.source_classes[static_cast<std::size_t>(pr[0])].push_back(next);
            s.source_classes[static_cast<std::size_t>(pr[1])].push_back(next);
        }
    for (int d = 0; d < 3; ++d)
        for (int k = 0; k < minor; ++k, ++next)
            s.source_classes[static_cast<std::size_t>(d)].push_back(next);
    for (int k = 0; k < unknown; ++k, ++next) s.target_unknown.push_back(next);
    s.finalize();
    return s;
}

ClassSpaceSpec custom_space(std::vector<std::vector<int>> sources, std::vector<int> unknown) {
    if (unknown.empty())
        throw std::invalid_argument("custom_space: unknown label set must be non-empty");
    ClassSpaceSpec s;
    s.source_classes = std::move(sources);
    s.target_unknown = std::move(unknown);
    s.finalize();
    return s;
}

// ---------------------------------------------------------------------------
// Synthetic problem generation
// ---------------------------------------------------------------------------

Tensor DomainDataset::gather(const std::vector<std::size_t>& idx,
                             std::vector<int>* labels_out) const {
    if (idx.empty()) throw std::invalid_argument("gather: empty index set");
    Tensor out(idx.size(), inputs.cols());
    if (labels_out != nullptr) labels_out->clear();
    for (std::size_t r = 0; r < idx.size(); ++r) {
        if (idx[r] >= size())
            throw std::invalid_argument("gather: index " + std::to_string(idx[r]) +
                                        " out of range");
        for (std::size_t c = 0; c < inputs.cols(); ++c) out.at(r, c) = inputs.at(idx[r], c);
        if (labels_out != nullptr) labels_out->push_back(labels[idx[r]]);
    }
    return out;
}

namespace {

constexpr double kPrototypeRadius = 4.0;

void make_split(DomainDataset& ds, double val_fraction, std::uint64_t seed) {
    std::vector<std::size_t> order(ds.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
    const auto n_val = static_cast<std::size_t>(val_fraction * static_cast<double>(ds.size()));
    ds.val_idx.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
    ds.train_idx.assign(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
    std::sort(ds.val_idx.begin(), ds.val_idx.end());
    std::sort(ds.train_idx.begin(), ds.train_idx.end());
}

DomainDataset make_domain(int domain_id, const std::vector<int>& classes,
                          const std::vector<double> (&prototypes)[2],
                          const std::vector<int>& all_classes,
                          const DomainShiftSpec& shift, std::size_t n_per_class,
                          std::size_t dim, std::uint64_t seed, double sigma,
                          double val_fraction) {
    DomainDataset ds;
    ds.domain_id = domain_id;
    const std::size_t n = classes.size() * n_per_class;
    ds.inputs = Tensor(n, dim);
    ds.labels.reserve(n);

    const double cr = std::cos(shift.rotation), sr = std::sin(shift.rotation);
    std::size_t row = 0;
    for (int cls : classes) {
        const auto rank = static_cast<std::size_t>(
            std::lower_bound(all_classes.begin(), all_classes.end(), cls) -
            all_classes.begin());
        // The base draw depends only on (seed, class): two domains sharing a
        // class start from bit-identical samples and differ only by shift.
        std::mt19937_64 base_rng(mix_seed({seed, hash_str("class"), static_cast<std::uint64_t>(cls)}));
        std::mt19937_64 noise_rng(mix_seed({seed, hash_str("noise"),
                                            static_cast<std::uint64_t>(domain_id),
                                            static_cast<std::uint64_t>(cls)}));
        std::normal_distribution<double> base(0.0, sigma);
        std::normal_distribution<double> noise(0.0, shift.noise_std);
        for (std::size_t k = 0; k < n_per_class; ++k, ++row) {
            ds.labels.push_back(cls);
            std::vector<double> x(dim, 0.0);
            x[0] = prototypes[0][rank];
            x[1] = prototypes[1][rank];
            for (std::size_t c = 0; c < dim; ++c) x[c] += base(base_rng);
            // Shift: rotate the first two coordinates, scale, translate, noise.
            const double x0 = x[0] * cr - x[1] * sr;
            const double x1 = x[0] * sr + x[1] * cr;
            x[0] = x0;
            x[1] = x1;
            for (std::size_t c = 0; c < dim; ++c) {
                x[c] *= shift.scale;
                if (c < shift.translation.size()) x[c] += shift.translation[c];
                if (shift.noise_std > 0.0) x[c] += noise(noise_rng);
                ds.inputs.at(row, c) = x[c];
            }
        }
    }
    make_split(ds, val_fraction,
               mix_seed({seed, hash_str("split"), static_cast<std::uint64_t>(domain_id)}));
    return ds;
}

}  // namespace

OpenDomainProblem generate_problem(const ClassSpaceSpec& space,
                                   const std::vector<DomainShiftSpec>& shifts,
                                   std::size_t n_per_class, std::size_t dim, std::uint64_t seed,
                                   double class_sigma, double val_fraction) {
    const std::size_t m = space.num_domains();
    if (dim < 2) throw std::invalid_argument("generate_problem: dim must be >= 2");
    if (n_per_class < 4) throw std::invalid_argument("generate_problem: n_per_class must be >= 4");
    if (shifts.size() != m + 1)
        throw std::invalid_argument("generate_problem: need " + std::to_string(m + 1) +
                                    " shifts (sources + target), got " +
                                    std::to_string(shifts.size()));
    if (!(class_sigma > 0.0))
        throw std::invalid_argument("generate_problem: class_sigma must be positive");
    if (val_fraction < 0.0 || val_fraction >= 1.0)
        throw std::invalid_argument("generate_problem: val_fraction must be in [0, 1)");
    for (const auto& sh : shifts) {
        if (!(sh.scale > 0.0))
            throw std::invalid_argument("generate_problem: shift scale must be positive");
        if (sh.noise_std < 0.0)
            throw std::invalid_argument("generate_problem: noise_std must be non-negative");
        if (sh.translation.size() > dim)
            throw std::invalid_argument("generate_problem: translation longer than dim");
    }

    // Global class list (known then unknown merged sorted) and prototypes on
    // a circle in the first two coordinates, rotated by a seeded offset.
    std::vector<int> all_classes = space.target_known;
    all_classes.insert(all_classes.end(), space.target_unknown.begin(),
                       space.target_unknown.end());
    std::sort(all_classes.begin(), all_classes.end());

    std::mt19937_64 proto_rng(mix_seed({seed, hash_str("prototypes")}));
    const double offset =
        std::uniform_real_distribution<double>(0.0, 2.0 * std::numbers::pi)(proto_rng);
    std::vector<double> prototypes[2];
    for (std::size_t q = 0; q < all_classes.size(); ++q) {
        const double angle =
            offset + 2.0 * std::numbers::pi * static_cast<double>(q) /
                         static_cast<double>(all_classes.size());
        prototypes[0].push_back(kPrototypeRadius * std::cos(angle));
        prototypes[1].push_back(kPrototypeRadius * std::sin(angle));
    }

    OpenDomainProblem problem;
    problem.space = space;
    for (std::size_t d = 0; d < m; ++d)
        problem.sources.push_back(make_domain(static_cast<int>(d), space.source_classes[d],
                                              prototypes, all_classes, shifts[d], n_per_class,
                                              dim, seed, class_sigma, val_fraction));
    problem.target =
        make_domain(static_cast<int>(m), all_classes, prototypes, all_classes, shifts[m],
                    n_per_class, dim, seed, class_sigma, val_fraction);
    return problem;
}

// ---------------------------------------------------------------------------
// Batch sampling
// ---------------------------------------------------------------------------

Tensor one_hot_labels(const std::vector<int>& labels, const ClassSpaceSpec& space) {
    if (labels.empty()) throw std::invalid_argument("one_hot_labels: empty label list");
    Tensor out(labels.size(), space.num_known());
    for (std::size_t r = 0; r < labels.size(); ++r) {
        const int idx = space.class_index(labels[r]);
        if (idx < 0)
            throw std::invalid_argument("one_hot_labels: label " + std::to_string(labels[r]) +
                                        " is not a known class");
        out.at(r, static_cast<std::size_t>(idx)) = 1.0;
    }
    return out;
}

namespace {
constexpr std::size_t kNeverDrawn = static_cast<std::size_t>(-1);
}  // namespace

BatchSampler::BatchSampler(const DomainDataset& ds, const ClassSpaceSpec& space,
                           std::size_t batch_size, std::uint64_t seed)
    : ds_(&ds), space_(&space), batch_size_(batch_size), rng_(seed) {
    if (batch_size_ == 0) throw std::invalid_argument("BatchSampler: batch_size must be >= 1");
    if (ds.train_idx.empty()) throw std::invalid_argument("BatchSampler: empty train split");
    order_ = ds.train_idx;
    cursor_ = kNeverDrawn;  // first draw triggers the first shuffle
}

std::size_t BatchSampler::batches_per_epoch() const {
    return (order_.size() + batch_size_ - 1) / batch_size_;
}

void BatchSampler::reset_epoch() {
    cursor_ = order_.size();
}

Batch BatchSampler::next() {
    if (cursor_ >= order_.size()) {
        std::shuffle(order_.begin(), order_.end(), rng_);
        if (cursor_ != kNeverDrawn) ++epoch_;
        cursor_ = 0;
    }
    const std::size_t take = std::min(batch_size_, order_.size() - cursor_);
    Batch b;
    b.indices.assign(order_.begin() + static_cast<std::ptrdiff_t>(cursor_),
                     order_.begin() + static_cast<std::ptrdiff_t>(cursor_ + take));
    cursor_ += take;
    b.inputs = ds_->gather(b.indices, &b.labels);
    b.one_hot = one_hot_labels(b.labels, *space_);
    return b;
}

Batch truncate_batch(const Batch& b, std::size_t n) {
    if (n == 0 || n > b.size())
        throw std::invalid_argument("truncate_batch: cannot keep " + std::to_string(n) +
                                    " of " + std::to_string(b.size()) + " rows");
    if (n == b.size()) return b;
    Batch out;
    out.labels.assign(b.labels.begin(), b.labels.begin() + static_cast<std::ptrdiff_t>(n));
    out.indices.assign(b.indices.begin(), b.indices.begin() + static_cast<std::ptrdiff_t>(n));
    out.inputs = Tensor(n, b.inputs.cols());
    out.one_hot = Tensor(n, b.one_hot.cols());
    for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t c = 0; c < b.inputs.cols(); ++c)
            out.inputs.at(r, c) = b.inputs.at(r, c);
        for (std::size_t c = 0; c < b.one_hot.cols(); ++c)
            out.one_hot.at(r, c) = b.one_hot.at(r, c);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Flat files
// ---------------------------------------------------------------------------

namespace {

std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r'))
        s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r'))
        s.remove_suffix(1);
    return s;
}

[[noreturn]] void parse_error(const std::string& path, std::size_t line,
                              const std::string& what) {
    throw std::runtime_error(path + ":" + std::to_string(line) + ": " + what);
}

double parse_double(std::string_view field, const std::string& path, std::size_t line) {
    double v = 0.0;
    const char* b = field.data();
    const char* e = b + field.size();
    auto [p, ec] = std::from_chars(b, e, v);
    if (ec != std::errc() || p != e)
        parse_error(path, line, "expected a number, got '" + std::string(field) + "'");
    return v;
}

}  // namespace

DomainDataset load_dataset(const std::string& path, int domain_id, double val_fraction,
                           std::uint64_t split_seed) {
    if (val_fraction < 0.0 || val_fraction >= 1.0)
        throw std::invalid_argument("load_dataset: val_fraction must be in [0, 1)");
    std::ifstream in(path);
    if (!in) throw std::runtime_error("load_dataset: cannot open " + path);

    std::vector<double> values;
    std::vector<int> labels;
    std::size_t width = 0;  // feature count, fixed by the first sample line
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::string_view s = trim(line);
        if (s.empty() || s.front() == '#') continue;

        std::vector<std::string_view> fields;
        std::size_t start = 0;
        while (true) {
            const std::size_t comma = s.find(',', start);
            fields.push_back(trim(s.substr(start, comma - start)));
            if (comma == std::string_view::npos) break;
            start = comma + 1;
        }
        if (fields.size() < 2)
            parse_error(path, lineno, "expected `label,feat_1,...`, got '" + std::string(s) + "'");

        int label = 0;
        {
            const char* b = fields[0].data();
            const char* e = b + fields[0].size();
            auto [p, ec] = std::from_chars(b, e, label);
            if (ec != std::errc() || p != e)
                parse_error(path, lineno,
                            "expected an integer label, got '" + std::string(fields[0]) + "'");
            if (label < 0) parse_error(path, lineno, "negative label");
        }

        const std::size_t d = fields.size() - 1;
        if (width == 0)
            width = d;
        else if (d != width)
            parse_error(path, lineno, "expected " + std::to_string(width) + " features, got " +
                                          std::to_string(d));
        labels.push_back(label);
        for (std::size_t j = 1; j < fields.size(); ++j)
            values.push_back(parse_double(fields[j], path, lineno));
    }
    if (labels.empty()) throw std::runtime_error("load_dataset: no samples in " + path);

    DomainDataset ds;
    ds.domain_id = domain_id;
    ds.inputs = Tensor::from_values(labels.size(), width, std::move(values));
    ds.labels = std::move(labels);
    make_split(ds, val_fraction, split_seed);
    return ds;
}

void save_dataset(const std::string& path, const DomainDataset& ds) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("save_dataset: cannot open " + path + " for writing");
    char buf[64];
    for (std::size_t i = 0; i < ds.size(); ++i) {
        out << ds.labels[i];
        for (std::size_t c = 0; c < ds.dim(); ++c) {
            std::snprintf(buf, sizeof(buf), "%.17g", ds.inputs.at(i, c));
            out << ',' << buf;
        }
        out << '\n';
    }
    if (!out) throw std::runtime_error("save_dataset: write failed for " + path);
}

}  // namespace odg
