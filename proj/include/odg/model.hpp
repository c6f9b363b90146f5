#ifndef ODG_MODEL_HPP
#define ODG_MODEL_HPP

#include "odg/tensor.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace odg {

// Fully connected net with relu between layers and a linear last layer.
// Weights are Glorot-uniform at init, biases zero; every parameter tensor has
// requires_grad set so a live Tape picks it up.
struct Mlp {
    std::vector<std::size_t> dims;  // input, hidden..., output
    std::vector<Tensor> weights;    // dims[i] x dims[i+1]
    std::vector<Tensor> biases;     // 1 x dims[i+1]

    Tensor forward(const Tensor& x) const;
    std::vector<Tensor> parameters() const;  // shallow handles, shared storage
    std::size_t parameter_count() const;

    Mlp clone() const;         // deep copy, keeps requires_grad
    Mlp clone_frozen() const;  // deep copy with requires_grad off (peer snapshots)
};

Mlp init_mlp(const std::vector<std::size_t>& dims, std::uint64_t seed);

// One ensemble member: feature extractor F (input -> feature space) and
// classifier head G (single linear layer over the global known class space).
struct DomainModel {
    Mlp f;
    Mlp g;

    Tensor features(const Tensor& x) const { return f.forward(x); }
    Tensor logits_from_features(const Tensor& z) const { return g.forward(z); }
    Tensor logits(const Tensor& x) const { return g.forward(f.forward(x)); }

    std::size_t input_dim() const { return f.dims.front(); }
    std::size_t feature_dim() const { return f.dims.back(); }
    std::size_t num_classes() const { return g.dims.back(); }

    std::vector<Tensor> parameters() const;
    DomainModel clone() const;
    DomainModel clone_frozen() const;
};

// `f_dims` runs from the input width to the feature width, e.g. {d, 64, 64};
// the classifier is a single feature_dim -> num_classes linear layer.
DomainModel init_model(const std::vector<std::size_t>& f_dims, std::size_t num_classes,
                       std::uint64_t seed);

struct ModelEnsemble {
    std::vector<DomainModel> members;

    std::size_t size() const { return members.size(); }
    std::vector<Tensor> parameters() const;  // all members' parameters
    ModelEnsemble clone() const;
    ModelEnsemble clone_frozen() const;
};

// M members with identical architecture and independently seeded parameters.
ModelEnsemble init_ensemble(std::size_t m, const std::vector<std::size_t>& f_dims,
                            std::size_t num_classes, std::uint64_t seed);

// Mean of the members' tempered softmax outputs: rows are probability
// distributions over the known classes. Temperature 1 is plain softmax.
Tensor ensemble_predict(const ModelEnsemble& e, const Tensor& x, double temperature = 1.0);

// Text checkpoints with hex-float payloads: round-trip exact for doubles.
void save_checkpoint(const std::string& path, const ModelEnsemble& e);
ModelEnsemble load_checkpoint(const std::string& path);

}  // namespace odg

#endif  // ODG_MODEL_HPP
