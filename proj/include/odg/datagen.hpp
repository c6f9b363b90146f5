#ifndef ODG_DATAGEN_HPP
#define ODG_DATAGEN_HPP

#include "odg/tensor.hpp"

#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace odg {

// ---------------------------------------------------------------------------
// Seed plumbing. Every stream of randomness in the harness is derived from
// one root seed plus a handful of integer tags, so runs are reproducible and
// independent pieces (domains, members, trials) never share a stream.
// ---------------------------------------------------------------------------

std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t mix_seed(std::initializer_list<std::uint64_t> parts);
std::uint64_t hash_str(std::string_view s);  // FNV-1a, for tagging streams by name

// ---------------------------------------------------------------------------
// Class spaces
// ---------------------------------------------------------------------------

// Per-domain label sets for an open-domain problem: M source label sets, the
// union of known classes, and target-only unknown classes. Tier membership
// (major / middle / minor) counts how many source domains carry a label:
// three or more, exactly two, exactly one.
struct ClassSpaceSpec {
    std::vector<std::vector<int>> source_classes;  // C_1..C_M, each sorted
    std::vector<int> target_known;                 // C = union of the above, sorted
    std::vector<int> target_unknown;               // C_u, sorted, disjoint from C

    std::vector<int> major_classes;   // in >= 3 source sets
    std::vector<int> middle_classes;  // in exactly 2
    std::vector<int> minor_classes;   // in exactly 1

    std::size_t num_domains() const { return source_classes.size(); }
    std::size_t num_known() const { return target_known.size(); }

    // Column of `label` in one-hot / probability rows over C, or -1.
    int class_index(int label) const;
    bool is_unknown(int label) const;

    // Sorts, dedups, recomputes the union and tiers, and validates
    // disjointness. Throws std::invalid_argument on an inconsistent spec.
    void finalize();
};

// Exact analog of the three-source seven-class layout: sources {0,1,3},
// {0,2,4}, {1,2,5}, known classes 0..5, unknown {6}.
ClassSpaceSpec pacs_like_space();

// Scaled-down analog of the 65-class layout: `major` classes shared by all
// three sources, `middle` classes per source pair, `minor` classes private to
// each source, `unknown` target-only classes. All counts must be >= 1.
ClassSpaceSpec officehome_like_space(int major, int middle, int minor, int unknown);

// Arbitrary layout; every source set and the unknown set must be non-empty
// and unknown must not intersect any source set.
ClassSpaceSpec custom_space(std::vector<std::vector<int>> sources, std::vector<int> unknown);

// ---------------------------------------------------------------------------
// Synthetic multi-domain data
// ---------------------------------------------------------------------------

// Affine distortion applied by one domain on top of the shared class
// prototypes: rotate the first two coordinates, scale everything, translate,
// then add Gaussian pixel noise.
struct DomainShiftSpec {
    double rotation = 0.0;  // radians
    double scale = 1.0;
    std::vector<double> translation;  // padded with zeros up to dim
    double noise_std = 0.0;
};

struct DomainDataset {
    int domain_id = -1;
    Tensor inputs;            // n x d
    std::vector<int> labels;  // length n
    std::vector<std::size_t> train_idx;
    std::vector<std::size_t> val_idx;

    std::size_t size() const { return labels.size(); }
    std::size_t dim() const { return inputs.cols(); }

    // Rows of `inputs` restricted to an index set, with matching labels out.
    Tensor gather(const std::vector<std::size_t>& idx, std::vector<int>* labels_out) const;
};

struct OpenDomainProblem {
    ClassSpaceSpec space;
    std::vector<DomainDataset> sources;  // domain ids 0..M-1
    DomainDataset target;                // domain id M, includes unknown classes
};

// Draws every domain's samples around shared per-class Gaussian prototypes
// (radius-4 circle in the first two coordinates, unit class sigma) and then
// applies that domain's shift. The base draw for a class is seeded by the
// class alone, so with identity shifts two domains sharing a class hold
// bit-identical samples; shifts are the only cross-domain difference.
// `shifts` must have M+1 entries, the last one for the target.
OpenDomainProblem generate_problem(const ClassSpaceSpec& space,
                                   const std::vector<DomainShiftSpec>& shifts,
                                   std::size_t n_per_class, std::size_t dim, std::uint64_t seed,
                                   double class_sigma = 1.0, double val_fraction = 0.2);

// ---------------------------------------------------------------------------
// Mini-batch sampling
// ---------------------------------------------------------------------------

struct Batch {
    Tensor inputs;                    // b x d
    Tensor one_hot;                   // b x |C|, rows sum to 1
    std::vector<int> labels;          // length b
    std::vector<std::size_t> indices; // positions in the source dataset
    std::size_t size() const { return labels.size(); }
};

// Without-replacement sampler over a dataset's train split: the split is
// reshuffled at each epoch boundary and handed out in consecutive chunks.
// The final short chunk of an epoch is returned rather than dropped, and a
// batch size above the split size yields one full-permutation batch.
class BatchSampler {
public:
    BatchSampler(const DomainDataset& ds, const ClassSpaceSpec& space, std::size_t batch_size,
                 std::uint64_t seed);

    Batch next();
    std::size_t batches_per_epoch() const;
    std::size_t epoch() const { return epoch_; }
    void reset_epoch();  // forces a reshuffle before the next draw

private:
    const DomainDataset* ds_;
    const ClassSpaceSpec* space_;
    std::size_t batch_size_;
    std::mt19937_64 rng_;
    std::vector<std::size_t> order_;
    std::size_t cursor_ = 0;
    std::size_t epoch_ = 0;
};

// One-hot rows over the known class space for a label list; labels outside C
// are rejected.
Tensor one_hot_labels(const std::vector<int>& labels, const ClassSpaceSpec& space);

// First `n` rows of a batch; used to align per-domain batches when a loss
// needs row-matched samples across domains.
Batch truncate_batch(const Batch& b, std::size_t n);

// ---------------------------------------------------------------------------
// Flat-file ingestion
// ---------------------------------------------------------------------------

// Reads `label,feat_1,...,feat_d` lines ('#' starts a comment, '.' decimal
// separator regardless of locale) and splits train/validation by a seeded
// shuffle. Malformed input raises std::runtime_error naming the line.
DomainDataset load_dataset(const std::string& path, int domain_id, double val_fraction,
                           std::uint64_t split_seed);

// Writes the same format with round-trip-exact doubles.
void save_dataset(const std::string& path, const DomainDataset& ds);

}  // namespace odg

#endif  // ODG_DATAGEN_HPP
