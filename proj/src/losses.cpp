#include "odg/losses.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace odg {

// ---------------------------------------------------------------------------
// Weights and kernels
// ---------------------------------------------------------------------------

std::vector<double> member_weights(std::size_t m, std::size_t i, double own, double cross) {
    if (i >= m) throw std::invalid_argument("member_weights: member index out of range");
    std::vector<double> w(m, cross);
    w[i] = own;
    return w;
}

std::vector<double> KernelSpec::resolve(const std::vector<Tensor>& features) const {
    if (!median_heuristic) {
        if (fixed_sigma_sqs.empty())
            throw std::invalid_argument("KernelSpec: empty fixed bandwidth set");
        for (double s : fixed_sigma_sqs)
            if (!(s > 0.0)) throw std::invalid_argument("KernelSpec: non-positive bandwidth");
        return fixed_sigma_sqs;
    }
    if (factors.empty()) throw std::invalid_argument("KernelSpec: empty factor set");
    for (double f : factors)
        if (!(f > 0.0)) throw std::invalid_argument("KernelSpec: non-positive factor");

    // Median pairwise squared distance over the joint batch, strictly below
    // the diagonal so self-distances never drag the median to zero.
    std::vector<const Tensor*> parts;
    std::size_t total = 0;
    for (const Tensor& f : features) {
        parts.push_back(&f);
        total += f.rows();
    }
    std::vector<double> d2;
    d2.reserve(total * (total - 1) / 2);
    const std::size_t width = features.front().cols();
    auto row_of = [&](std::size_t global, std::size_t* local) -> const Tensor* {
        for (const Tensor* p : parts) {
            if (global < p->rows()) {
                *local = global;
                return p;
            }
            global -= p->rows();
        }
        return nullptr;
    };
    for (std::size_t a = 0; a < total; ++a) {
        std::size_t ra = 0;
        const Tensor* ta = row_of(a, &ra);
        for (std::size_t b = a + 1; b < total; ++b) {
            std::size_t rb = 0;
            const Tensor* tb = row_of(b, &rb);
            double d = 0.0;
            for (std::size_t c = 0; c < width; ++c) {
                const double diff = ta->at(ra, c) - tb->at(rb, c);
                d += diff * diff;
            }
            d2.push_back(d);
        }
    }
    double base = 1.0;
    if (!d2.empty()) {
        const std::size_t mid = d2.size() / 2;
        std::nth_element(d2.begin(), d2.begin() + static_cast<std::ptrdiff_t>(mid), d2.end());
        base = std::max(d2[mid], 1e-6);
    }
    std::vector<double> sigma_sqs;
    for (double f : factors) sigma_sqs.push_back(base * f);
    return sigma_sqs;
}

// ---------------------------------------------------------------------------
// Core losses
// ---------------------------------------------------------------------------

Tensor cross_entropy(const Tensor& targets, const Tensor& logits) {
    if (targets.rows() != logits.rows() || targets.cols() != logits.cols())
        throw std::invalid_argument("cross_entropy: targets " + targets.shape_str() +
                                    " vs logits " + logits.shape_str());
    for (std::size_t r = 0; r < targets.rows(); ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < targets.cols(); ++c) s += targets.at(r, c);
        if (std::abs(s - 1.0) > 1e-6)
            throw std::invalid_argument("cross_entropy: target row " + std::to_string(r) +
                                        " sums to " + std::to_string(s) + ", expected 1");
    }
    Tensor logp = odg::log(softmax_rows(logits));
    return scale(sum(mul(targets, logp)), -1.0 / static_cast<double>(targets.rows()));
}

namespace {

void check_feature_list(const char* op, const std::vector<Tensor>& features,
                        std::size_t min_rows) {
    if (features.empty()) throw std::invalid_argument(std::string(op) + ": no feature batches");
    const std::size_t width = features.front().cols();
    for (const Tensor& f : features) {
        if (f.cols() != width)
            throw std::invalid_argument(std::string(op) + ": feature widths differ (" +
                                        std::to_string(width) + " vs " +
                                        std::to_string(f.cols()) + ")");
        if (f.rows() < min_rows)
            throw std::invalid_argument(std::string(op) + ": batch of " +
                                        std::to_string(f.rows()) + " rows, need >= " +
                                        std::to_string(min_rows));
    }
}

Tensor covariance(const Tensor& f) {
    Tensor centered = sub(f, row_mean(f));
    return scale(matmul(transpose(centered), centered),
                 1.0 / static_cast<double>(f.rows() - 1));
}

}  // namespace

Tensor coral_loss(const std::vector<Tensor>& features) {
    check_feature_list("coral_loss", features, 2);
    const std::size_t m = features.size();
    if (m == 1) return Tensor::scalar(0.0);

    std::vector<Tensor> covs;
    for (const Tensor& f : features) covs.push_back(covariance(f));

    Tensor acc;
    bool first = true;
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = i + 1; j < m; ++j) {
            Tensor diff = sub(covs[i], covs[j]);
            Tensor term = sum(mul(diff, diff));
            acc = first ? term : add(acc, term);
            first = false;
        }
    // Ordered pairs double the upper triangle; the diagonal contributes 0.
    return scale(acc, 2.0 / static_cast<double>(m * m));
}

Tensor mmd_loss(const std::vector<Tensor>& features, const KernelSpec& kernel) {
    check_feature_list("mmd_loss", features, 1);
    const std::size_t m = features.size();
    if (m == 1) return Tensor::scalar(0.0);
    const std::vector<double> sigma_sqs = kernel.resolve(features);

    // Cache the self-kernel means; each cross pair is computed once.
    std::vector<Tensor> self_means;
    for (const Tensor& f : features)
        self_means.push_back(mean(gaussian_kernel(f, f, sigma_sqs)));

    Tensor acc;
    bool first = true;
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = i + 1; j < m; ++j) {
            Tensor cross = mean(gaussian_kernel(features[i], features[j], sigma_sqs));
            Tensor term = add(add(self_means[i], self_means[j]), scale(cross, -2.0));
            acc = first ? term : add(acc, term);
            first = false;
        }
    return scale(acc, 2.0 / static_cast<double>(m * m));
}

// ---------------------------------------------------------------------------
// Dirichlet sampling, mixup, distillation
// ---------------------------------------------------------------------------

std::vector<double> sample_dirichlet(const DirichletParams& params, std::mt19937_64& rng) {
    if (params.alpha.empty()) throw std::invalid_argument("sample_dirichlet: empty alpha");
    for (double a : params.alpha)
        if (!(a > 0.0)) throw std::invalid_argument("sample_dirichlet: alpha must be positive");
    std::vector<double> draws(params.alpha.size());
    for (int attempt = 0; attempt < 8; ++attempt) {
        double total = 0.0;
        for (std::size_t k = 0; k < draws.size(); ++k) {
            std::gamma_distribution<double> gamma(params.alpha[k], 1.0);
            draws[k] = gamma(rng);
            total += draws[k];
        }
        if (total > 0.0) {
            for (double& d : draws) d /= total;
            return draws;
        }
    }
    // All draws underflowed to zero (vanishingly rare): fall back to uniform.
    std::fill(draws.begin(), draws.end(), 1.0 / static_cast<double>(draws.size()));
    return draws;
}

namespace {

void check_simplex(const char* op, const std::vector<double>& lambda, std::size_t expect) {
    if (lambda.size() != expect)
        throw std::invalid_argument(std::string(op) + ": lambda has " +
                                    std::to_string(lambda.size()) + " entries, expected " +
                                    std::to_string(expect));
    double total = 0.0;
    for (double l : lambda) {
        if (l < -1e-12)
            throw std::invalid_argument(std::string(op) + ": negative lambda entry");
        total += l;
    }
    if (std::abs(total - 1.0) > 1e-9)
        throw std::invalid_argument(std::string(op) + ": lambda sums to " +
                                    std::to_string(total) + ", expected 1");
}

}  // namespace

std::pair<Tensor, Tensor> dir_mixup(const std::vector<Tensor>& features,
                                    const std::vector<Tensor>& labels,
                                    const std::vector<double>& lambda) {
    if (features.empty() || features.size() != labels.size())
        throw std::invalid_argument("dir_mixup: need matching feature and label lists");
    check_simplex("dir_mixup", lambda, features.size());
    const std::size_t n = features.front().rows();
    const std::size_t p = features.front().cols();
    const std::size_t c = labels.front().cols();
    for (std::size_t k = 0; k < features.size(); ++k) {
        if (features[k].rows() != n || features[k].cols() != p)
            throw std::invalid_argument("dir_mixup: feature batch " + std::to_string(k) +
                                        " is " + features[k].shape_str() + ", expected " +
                                        std::to_string(n) + "x" + std::to_string(p));
        if (labels[k].rows() != n || labels[k].cols() != c)
            throw std::invalid_argument("dir_mixup: label batch " + std::to_string(k) +
                                        " shape mismatch");
    }

    Tensor z, y;
    bool first = true;
    for (std::size_t k = 0; k < features.size(); ++k) {
        if (lambda[k] == 0.0) continue;  // keeps simplex vertices bit-exact
        Tensor zk = scale(features[k], lambda[k]);
        Tensor yk = scale(labels[k], lambda[k]);
        z = first ? zk : add(z, zk);
        y = first ? yk : add(y, yk);
        first = false;
    }
    if (first) throw std::invalid_argument("dir_mixup: lambda is all zero");
    return {z, y};
}

Tensor distill_label(const std::vector<const DomainModel*>& peers, const Tensor& x,
                     const std::vector<double>& lambda, double temperature) {
    if (peers.empty()) throw std::invalid_argument("distill_label: no peers");
    check_simplex("distill_label", lambda, peers.size());
    if (!(temperature > 0.0))
        throw std::invalid_argument("distill_label: temperature must be positive");

    // Peer outputs are constants: suspend recording entirely so peer
    // parameters never join the graph (their grads stay untouched).
    NoTapeGuard no_tape;
    Tensor y;
    bool first = true;
    for (std::size_t j = 0; j < peers.size(); ++j) {
        if (lambda[j] == 0.0) continue;
        Tensor p = softmax_rows(scale(peers[j]->logits(x), 1.0 / temperature));
        Tensor term = scale(p, lambda[j]);
        y = first ? term : add(y, term);
        first = false;
    }
    if (first) throw std::invalid_argument("distill_label: lambda is all zero");
    return y;
}

// ---------------------------------------------------------------------------
// Per-member objectives
// ---------------------------------------------------------------------------

namespace {

struct MemberForward {
    std::vector<Tensor> feats;  // F_i applied to every domain's batch
    Tensor weighted_ce;         // sum_j w_j * ce_j
};

void check_member_call(std::size_t i, const ModelEnsemble& e, const std::vector<Batch>& batches,
                       const LossWeights& weights) {
    if (e.size() == 0) throw std::invalid_argument("ensemble_loss: empty ensemble");
    if (i >= e.size()) throw std::invalid_argument("ensemble_loss: member index out of range");
    if (batches.size() != e.size())
        throw std::invalid_argument("ensemble_loss: " + std::to_string(batches.size()) +
                                    " batches for " + std::to_string(e.size()) + " members");
    if (!weights.w.empty() && weights.w.size() != e.size())
        throw std::invalid_argument("ensemble_loss: weight vector length mismatch");
    for (double w : weights.w)
        if (w < 0.0) throw std::invalid_argument("ensemble_loss: negative domain weight");
    if (weights.gamma < 0.0) throw std::invalid_argument("ensemble_loss: negative gamma");
}

MemberForward member_forward(std::size_t i, const ModelEnsemble& e,
                             const std::vector<Batch>& batches, const std::vector<double>& w) {
    const DomainModel& model = e.members[i];
    MemberForward fwd;
    bool first = true;
    for (std::size_t j = 0; j < batches.size(); ++j) {
        Tensor z = model.features(batches[j].inputs);
        fwd.feats.push_back(z);
        if (w[j] == 0.0) continue;
        Tensor ce = cross_entropy(batches[j].one_hot, model.logits_from_features(z));
        Tensor term = scale(ce, w[j]);
        fwd.weighted_ce = first ? term : add(fwd.weighted_ce, term);
        first = false;
    }
    if (first) throw std::invalid_argument("ensemble_loss: all domain weights are zero");
    return fwd;
}

Tensor finish_member_loss(const MemberForward& fwd, const LossWeights& weights, RegKind reg,
                          const KernelSpec& kernel) {
    if (reg == RegKind::none || weights.gamma == 0.0) return fwd.weighted_ce;
    Tensor r;
    switch (reg) {
        case RegKind::coral: r = coral_loss(fwd.feats); break;
        case RegKind::mmd: r = mmd_loss(fwd.feats, kernel); break;
        default: throw std::invalid_argument("ensemble_loss: unknown regularizer kind");
    }
    return add(fwd.weighted_ce, scale(r, weights.gamma));
}

}  // namespace

Tensor ensemble_loss(std::size_t i, const ModelEnsemble& e, const std::vector<Batch>& batches,
                     const LossWeights& weights, RegKind reg, const KernelSpec& kernel) {
    check_member_call(i, e, batches, weights);
    const std::vector<double> w =
        weights.w.empty() ? member_weights(e.size(), i) : weights.w;
    MemberForward fwd = member_forward(i, e, batches, w);
    return finish_member_loss(fwd, weights, reg, kernel);
}

Tensor l_dir(std::size_t i, const ModelEnsemble& e, const std::vector<Batch>& batches,
             const LossWeights& weights, RegKind reg, std::mt19937_64& rng,
             const MixupConfig& mix, const KernelSpec& kernel) {
    check_member_call(i, e, batches, weights);
    const std::size_t n = batches.front().size();
    for (const Batch& b : batches)
        if (b.size() != n)
            throw std::invalid_argument(
                "l_dir: batches must share a common size (truncate first)");

    const std::vector<double> w =
        weights.w.empty() ? member_weights(e.size(), i) : weights.w;
    MemberForward fwd = member_forward(i, e, batches, w);
    Tensor base = finish_member_loss(fwd, weights, reg, kernel);

    std::vector<double> lambda = mix.forced_lambda;
    if (lambda.empty()) {
        if (!(mix.alpha_own > 0.0) || !(mix.alpha_cross > 0.0))
            throw std::invalid_argument("l_dir: mixup alphas must be positive");
        DirichletParams params;
        params.alpha.assign(e.size(), mix.alpha_cross);
        params.alpha[i] = mix.alpha_own;
        lambda = sample_dirichlet(params, rng);
    }
    check_simplex("l_dir", lambda, e.size());

    std::vector<Tensor> zs, ys;
    for (std::size_t k = 0; k < e.size(); ++k) {
        ys.push_back(batches[k].one_hot);
        if (k == i) {
            zs.push_back(fwd.feats[i]);  // live, differentiable
        } else if (mix.features == MixupFeatures::peer) {
            zs.push_back(e.members[i].features(batches[k].inputs));  // also member i
        } else {
            // Own extractors are peers here: constants by contract.
            NoTapeGuard no_tape;
            zs.push_back(e.members[k].features(batches[k].inputs));
        }
    }
    auto [z_mix, y_mix] = dir_mixup(zs, ys, lambda);
    Tensor extra = cross_entropy(y_mix, e.members[i].logits_from_features(z_mix));
    return add(base, scale(extra, mix.extra_weight));
}

Tensor l_dst(std::size_t i, const ModelEnsemble& e, const std::vector<Batch>& batches,
             const LossWeights& weights, RegKind reg, std::mt19937_64& rng,
             const DistillConfig& dst, const KernelSpec& kernel) {
    check_member_call(i, e, batches, weights);
    const std::vector<double> w =
        weights.w.empty() ? member_weights(e.size(), i) : weights.w;
    MemberForward fwd = member_forward(i, e, batches, w);
    Tensor base = finish_member_loss(fwd, weights, reg, kernel);
    if (e.size() == 1) return base;  // no peers to distill from

    std::vector<const DomainModel*> peers;
    for (std::size_t j = 0; j < e.size(); ++j)
        if (j != i) peers.push_back(&e.members[j]);

    std::vector<double> lambda = dst.forced_lambda;
    if (lambda.empty()) {
        DirichletParams params;
        params.alpha.assign(peers.size(), 1.0);
        lambda = sample_dirichlet(params, rng);
    }
    Tensor y_distill =
        distill_label(peers, batches[i].inputs, lambda, weights.distill_temperature);
    Tensor extra = cross_entropy(y_distill, e.members[i].logits_from_features(fwd.feats[i]));
    return add(base, scale(extra, dst.extra_weight));
}

}  // namespace odg
