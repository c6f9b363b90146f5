#include "odg/model.hpp"

#include "odg/datagen.hpp"  // seed mixing

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>

namespace odg {

// ---------------------------------------------------------------------------
// Mlp
// ---------------------------------------------------------------------------

Tensor Mlp::forward(const Tensor& x) const {
    if (x.cols() != dims.front())
        throw std::invalid_argument("Mlp::forward: input width " + std::to_string(x.cols()) +
                                    " does not match layer width " +
                                    std::to_string(dims.front()));
    Tensor h = x;
    for (std::size_t l = 0; l < weights.size(); ++l) {
        h = add(matmul(h, weights[l]), biases[l]);
        if (l + 1 < weights.size()) h = relu(h);
    }
    return h;
}

std::vector<Tensor> Mlp::parameters() const {
    std::vector<Tensor> ps;
    for (std::size_t l = 0; l < weights.size(); ++l) {
        ps.push_back(weights[l]);
        ps.push_back(biases[l]);
    }
    return ps;
}

std::size_t Mlp::parameter_count() const {
    std::size_t n = 0;
    for (const Tensor& p : parameters()) n += p.size();
    return n;
}

namespace {

Mlp clone_impl(const Mlp& m, bool keep_grad_flag) {
    Mlp out;
    out.dims = m.dims;
    for (const Tensor& w : m.weights) {
        Tensor c = w.detach();
        c.set_requires_grad(keep_grad_flag && w.requires_grad());
        out.weights.push_back(c);
    }
    for (const Tensor& b : m.biases) {
        Tensor c = b.detach();
        c.set_requires_grad(keep_grad_flag && b.requires_grad());
        out.biases.push_back(c);
    }
    return out;
}

}  // namespace

Mlp Mlp::clone() const {
    return clone_impl(*this, true);
}

Mlp Mlp::clone_frozen() const {
    return clone_impl(*this, false);
}

Mlp init_mlp(const std::vector<std::size_t>& dims, std::uint64_t seed) {
    if (dims.size() < 2) throw std::invalid_argument("init_mlp: need at least two layer dims");
    for (std::size_t d : dims)
        if (d == 0) throw std::invalid_argument("init_mlp: zero layer width");
    Mlp m;
    m.dims = dims;
    std::mt19937_64 rng(mix_seed({seed, hash_str("init")}));
    for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
        const std::size_t fan_in = dims[l], fan_out = dims[l + 1];
        const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
        std::uniform_real_distribution<double> dist(-bound, bound);
        Tensor w(fan_in, fan_out, 0.0, true);
        for (double& v : w.values()) v = dist(rng);
        m.weights.push_back(w);
        m.biases.emplace_back(1, fan_out, 0.0, true);
    }
    return m;
}

// ---------------------------------------------------------------------------
// DomainModel / ModelEnsemble
// ---------------------------------------------------------------------------

std::vector<Tensor> DomainModel::parameters() const {
    std::vector<Tensor> ps = f.parameters();
    for (const Tensor& p : g.parameters()) ps.push_back(p);
    return ps;
}

DomainModel DomainModel::clone() const {
    return DomainModel{f.clone(), g.clone()};
}

DomainModel DomainModel::clone_frozen() const {
    return DomainModel{f.clone_frozen(), g.clone_frozen()};
}

DomainModel init_model(const std::vector<std::size_t>& f_dims, std::size_t num_classes,
                       std::uint64_t seed) {
    if (num_classes == 0) throw std::invalid_argument("init_model: num_classes must be >= 1");
    DomainModel m;
    m.f = init_mlp(f_dims, mix_seed({seed, hash_str("extractor")}));
    m.g = init_mlp({f_dims.back(), num_classes}, mix_seed({seed, hash_str("classifier")}));
    return m;
}

std::vector<Tensor> ModelEnsemble::parameters() const {
    std::vector<Tensor> ps;
    for (const DomainModel& m : members)
        for (const Tensor& p : m.parameters()) ps.push_back(p);
    return ps;
}

ModelEnsemble ModelEnsemble::clone() const {
    ModelEnsemble e;
    for (const DomainModel& m : members) e.members.push_back(m.clone());
    return e;
}

ModelEnsemble ModelEnsemble::clone_frozen() const {
    ModelEnsemble e;
    for (const DomainModel& m : members) e.members.push_back(m.clone_frozen());
    return e;
}

ModelEnsemble init_ensemble(std::size_t m, const std::vector<std::size_t>& f_dims,
                            std::size_t num_classes, std::uint64_t seed) {
    if (m == 0) throw std::invalid_argument("init_ensemble: need at least one member");
    ModelEnsemble e;
    for (std::size_t i = 0; i < m; ++i)
        e.members.push_back(
            init_model(f_dims, num_classes, mix_seed({seed, hash_str("member"), i})));
    return e;
}

Tensor ensemble_predict(const ModelEnsemble& e, const Tensor& x, double temperature) {
    if (e.size() == 0) throw std::invalid_argument("ensemble_predict: empty ensemble");
    if (!(temperature > 0.0))
        throw std::invalid_argument("ensemble_predict: temperature must be positive");
    Tensor acc;
    for (std::size_t i = 0; i < e.size(); ++i) {
        Tensor p = softmax_rows(scale(e.members[i].logits(x), 1.0 / temperature));
        acc = (i == 0) ? p : add(acc, p);
    }
    return e.size() == 1 ? acc : scale(acc, 1.0 / static_cast<double>(e.size()));
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {

void write_tensor(std::ostream& out, const Tensor& t) {
    out << t.rows() << ' ' << t.cols();
    char buf[64];
    for (double v : t.values()) {
        std::snprintf(buf, sizeof(buf), "%a", v);
        out << ' ' << buf;
    }
    out << '\n';
}

double parse_hex_double(const std::string& tok) {
    std::string_view s = tok;
    bool neg = false;
    if (!s.empty() && (s.front() == '-' || s.front() == '+')) {
        neg = s.front() == '-';
        s.remove_prefix(1);
    }
    if (s.size() >= 2 && s[0] == '0' && (s[1] == 'x' || s[1] == 'X')) s.remove_prefix(2);
    double v = 0.0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v, std::chars_format::hex);
    if (ec != std::errc() || p != s.data() + s.size())
        throw std::runtime_error("checkpoint: bad float token '" + tok + "'");
    return neg ? -v : v;
}

Tensor read_tensor(std::istream& in, bool requires_grad) {
    std::size_t rows = 0, cols = 0;
    if (!(in >> rows >> cols)) throw std::runtime_error("checkpoint: truncated tensor header");
    std::vector<double> values(rows * cols);
    std::string tok;
    for (double& v : values) {
        if (!(in >> tok)) throw std::runtime_error("checkpoint: truncated tensor payload");
        v = parse_hex_double(tok);
    }
    return Tensor::from_values(rows, cols, std::move(values), requires_grad);
}

void write_mlp(std::ostream& out, const Mlp& m) {
    out << "mlp " << m.dims.size();
    for (std::size_t d : m.dims) out << ' ' << d;
    out << '\n';
    for (std::size_t l = 0; l < m.weights.size(); ++l) {
        write_tensor(out, m.weights[l]);
        write_tensor(out, m.biases[l]);
    }
}

Mlp read_mlp(std::istream& in) {
    std::string tag;
    std::size_t ndims = 0;
    if (!(in >> tag >> ndims) || tag != "mlp")
        throw std::runtime_error("checkpoint: expected an mlp section");
    Mlp m;
    m.dims.resize(ndims);
    for (std::size_t& d : m.dims)
        if (!(in >> d)) throw std::runtime_error("checkpoint: truncated dims");
    for (std::size_t l = 0; l + 1 < ndims; ++l) {
        m.weights.push_back(read_tensor(in, true));
        m.biases.push_back(read_tensor(in, true));
        if (m.weights.back().rows() != m.dims[l] || m.weights.back().cols() != m.dims[l + 1])
            throw std::runtime_error("checkpoint: weight shape does not match dims");
    }
    return m;
}

}  // namespace

void save_checkpoint(const std::string& path, const ModelEnsemble& e) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path);
    out << "odg-ensemble v1 " << e.size() << '\n';
    for (const DomainModel& m : e.members) {
        write_mlp(out, m.f);
        write_mlp(out, m.g);
    }
    if (!out) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

ModelEnsemble load_checkpoint(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);
    std::string magic, version;
    std::size_t m = 0;
    if (!(in >> magic >> version >> m) || magic != "odg-ensemble" || version != "v1")
        throw std::runtime_error("load_checkpoint: not an ensemble checkpoint: " + path);
    ModelEnsemble e;
    for (std::size_t i = 0; i < m; ++i) {
        DomainModel dm;
        dm.f = read_mlp(in);
        dm.g = read_mlp(in);
        e.members.push_back(std::move(dm));
    }
    return e;
}

}  // namespace odg
