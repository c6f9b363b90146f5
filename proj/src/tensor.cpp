#include "odg/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <utility>

namespace odg {

namespace {

thread_local Tape* tl_current_tape = nullptr;

[[noreturn]] void shape_error(const std::string& op, const Tensor& a, const Tensor& b) {
    throw std::invalid_argument(op + ": incompatible shapes " + a.shape_str() + " and " +
                                b.shape_str());
}

bool should_record(const std::vector<Tensor>& parents) {
    if (tl_current_tape == nullptr) return false;
    for (const auto& p : parents)
        if (p.requires_grad()) return true;
    return false;
}

// Marks `out` as a recorded node and registers the pull closure, or leaves it
// as a plain untracked value when nothing upstream wants gradients.
Tensor finish(std::vector<Tensor> parents, Tensor out, std::function<void()> pull) {
    if (should_record(parents)) detail::record(std::move(parents), out, std::move(pull));
    return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

Tensor::Tensor(std::size_t rows, std::size_t cols, double fill, bool requires_grad)
    : d_(std::make_shared<detail::TensorData>()) {
    if (rows == 0 || cols == 0)
        throw std::invalid_argument("Tensor: dimensions must be positive, got " +
                                    std::to_string(rows) + "x" + std::to_string(cols));
    d_->rows = rows;
    d_->cols = cols;
    d_->values.assign(rows * cols, fill);
    d_->requires_grad = requires_grad;
}

Tensor Tensor::scalar(double v, bool requires_grad) {
    Tensor t(1, 1, v, requires_grad);
    return t;
}

Tensor Tensor::from_rows(std::initializer_list<std::initializer_list<double>> rows,
                         bool requires_grad) {
    if (rows.size() == 0) throw std::invalid_argument("Tensor::from_rows: empty row list");
    std::size_t cols = rows.begin()->size();
    Tensor t(rows.size(), cols, 0.0, requires_grad);
    std::size_t r = 0;
    for (const auto& row : rows) {
        if (row.size() != cols)
            throw std::invalid_argument("Tensor::from_rows: ragged rows");
        std::size_t c = 0;
        for (double v : row) t.at(r, c++) = v;
        ++r;
    }
    return t;
}

Tensor Tensor::from_values(std::size_t rows, std::size_t cols, std::vector<double> values,
                           bool requires_grad) {
    if (values.size() != rows * cols)
        throw std::invalid_argument("Tensor::from_values: " + std::to_string(values.size()) +
                                    " values for shape " + std::to_string(rows) + "x" +
                                    std::to_string(cols));
    Tensor t(rows, cols, 0.0, requires_grad);
    t.d_->values = std::move(values);
    return t;
}

std::string Tensor::shape_str() const {
    return std::to_string(rows()) + "x" + std::to_string(cols());
}

double Tensor::item() const {
    if (rows() != 1 || cols() != 1)
        throw std::invalid_argument("Tensor::item: tensor is " + shape_str() + ", not scalar");
    return d_->values[0];
}

std::vector<double>& Tensor::grad() {
    if (d_->grad.empty()) d_->grad.assign(d_->values.size(), 0.0);
    return d_->grad;
}

const std::vector<double>& Tensor::grad() const {
    if (d_->grad.empty())
        throw std::logic_error("Tensor::grad: no gradient present (did backward run?)");
    return d_->grad;
}

void Tensor::zero_grad() {
    d_->grad.assign(d_->values.size(), 0.0);
}

Tensor Tensor::detach() const {
    Tensor t(rows(), cols());
    t.d_->values = d_->values;
    return t;
}

Tensor Tensor::clone() const {
    Tensor t(rows(), cols(), 0.0, d_->requires_grad);
    t.d_->values = d_->values;
    return t;
}

bool Tensor::all_finite() const {
    for (double v : d_->values)
        if (!std::isfinite(v)) return false;
    for (double g : d_->grad)
        if (!std::isfinite(g)) return false;
    return true;
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

Tape::Tape() : prev_(tl_current_tape) {
    tl_current_tape = this;
}

Tape::~Tape() {
    tl_current_tape = prev_;
}

Tape* Tape::current() {
    return tl_current_tape;
}

NoTapeGuard::NoTapeGuard() : prev_(tl_current_tape) {
    tl_current_tape = nullptr;
}

NoTapeGuard::~NoTapeGuard() {
    tl_current_tape = prev_;
}

void detail::record(std::vector<Tensor> parents, const Tensor& out, std::function<void()> pull) {
    Tape* t = tl_current_tape;
    if (t == nullptr) throw std::logic_error("record: no active tape");
    out.d_->requires_grad = true;
    out.d_->node_id = static_cast<int>(t->nodes_.size());
    out.d_->tape = t;
    t->nodes_.push_back(Tape::Node{std::move(parents), out, std::move(pull)});
}

void Tape::backward(const Tensor& loss) {
    if (loss.rows() != 1 || loss.cols() != 1)
        throw std::invalid_argument("backward: loss must be scalar, got " + loss.shape_str());
    if (loss.node_id() < 0) {
        // Loss is a leaf: the only gradient is d loss / d loss.
        if (loss.requires_grad()) {
            Tensor l = loss;  // shallow handle to drop constness
            l.grad()[0] += 1.0;
        }
        return;
    }
    if (loss.d_->tape != this)
        throw std::invalid_argument("backward: loss was not produced by this graph");

    const int last = loss.node_id();
    // Non-leaf grads are scratch space for this sweep; leaf grads accumulate.
    for (int k = 0; k <= last; ++k) nodes_[static_cast<std::size_t>(k)].out.zero_grad();
    loss.d_->grad[0] = 1.0;
    for (int k = last; k >= 0; --k) nodes_[static_cast<std::size_t>(k)].pull();
}

// ---------------------------------------------------------------------------
// Ops
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.cols() != b.rows()) shape_error("matmul", a, b);
    const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
    Tensor out(n, m);
    const double* pa = a.values().data();
    const double* pb = b.values().data();
    double* po = out.values().data();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t l = 0; l < k; ++l) {
            const double av = pa[i * k + l];
            if (av == 0.0) continue;
            for (std::size_t j = 0; j < m; ++j) po[i * m + j] += av * pb[l * m + j];
        }
    return finish({a, b}, out, [a = a, b = b, out]() mutable {
        const auto& g = out.grad();
        const std::size_t n2 = a.rows(), k2 = a.cols(), m2 = b.cols();
        if (a.requires_grad()) {
            auto& ga = a.grad();
            for (std::size_t i = 0; i < n2; ++i)
                for (std::size_t j = 0; j < m2; ++j) {
                    const double gv = g[i * m2 + j];
                    if (gv == 0.0) continue;
                    for (std::size_t l = 0; l < k2; ++l)
                        ga[i * k2 + l] += gv * b.at(l, j);
                }
        }
        if (b.requires_grad()) {
            auto& gb = b.grad();
            for (std::size_t i = 0; i < n2; ++i)
                for (std::size_t l = 0; l < k2; ++l) {
                    const double av = a.at(i, l);
                    if (av == 0.0) continue;
                    for (std::size_t j = 0; j < m2; ++j)
                        gb[l * m2 + j] += av * g[i * m2 + j];
                }
        }
    });
}

namespace {

enum class PairKind { same, row_broadcast };

PairKind pair_kind(const char* op, const Tensor& a, const Tensor& b) {
    if (a.rows() == b.rows() && a.cols() == b.cols()) return PairKind::same;
    if (b.rows() == 1 && b.cols() == a.cols()) return PairKind::row_broadcast;
    shape_error(op, a, b);
}

Tensor add_sub(const char* name, const Tensor& a, const Tensor& b, double sign) {
    const PairKind kind = pair_kind(name, a, b);
    Tensor out(a.rows(), a.cols());
    const std::size_t n = a.rows(), m = a.cols();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) {
            const double bv = (kind == PairKind::same) ? b.at(i, j) : b.at(0, j);
            out.at(i, j) = a.at(i, j) + sign * bv;
        }
    return finish({a, b}, out, [a = a, b = b, out, kind, sign]() mutable {
        const auto& g = out.grad();
        if (a.requires_grad()) {
            auto& ga = a.grad();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (b.requires_grad()) {
            auto& gb = b.grad();
            const std::size_t n2 = out.rows(), m2 = out.cols();
            if (kind == PairKind::same) {
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += sign * g[i];
            } else {
                for (std::size_t i = 0; i < n2; ++i)
                    for (std::size_t j = 0; j < m2; ++j) gb[j] += sign * g[i * m2 + j];
            }
        }
    });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    return add_sub("add", a, b, +1.0);
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return add_sub("sub", a, b, -1.0);
}

Tensor mul(const Tensor& a, const Tensor& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) shape_error("mul", a, b);
    Tensor out(a.rows(), a.cols());
    for (std::size_t i = 0; i < out.size(); ++i)
        out.values()[i] = a.values()[i] * b.values()[i];
    return finish({a, b}, out, [a = a, b = b, out]() mutable {
        const auto& g = out.grad();
        if (a.requires_grad()) {
            auto& ga = a.grad();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b.values()[i];
        }
        if (b.requires_grad()) {
            auto& gb = b.grad();
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a.values()[i];
        }
    });
}

Tensor scale(const Tensor& a, double s) {
    Tensor out(a.rows(), a.cols());
    for (std::size_t i = 0; i < out.size(); ++i) out.values()[i] = a.values()[i] * s;
    return finish({a}, out, [a = a, out, s]() mutable {
        if (!a.requires_grad()) return;
        const auto& g = out.grad();
        auto& ga = a.grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
    });
}

Tensor relu(const Tensor& a) {
    Tensor out(a.rows(), a.cols());
    for (std::size_t i = 0; i < out.size(); ++i)
        out.values()[i] = a.values()[i] > 0.0 ? a.values()[i] : 0.0;
    return finish({a}, out, [a = a, out]() mutable {
        if (!a.requires_grad()) return;
        const auto& g = out.grad();
        auto& ga = a.grad();
        for (std::size_t i = 0; i < g.size(); ++i)
            if (a.values()[i] > 0.0) ga[i] += g[i];
    });
}

Tensor exp(const Tensor& a) {
    Tensor out(a.rows(), a.cols());
    for (std::size_t i = 0; i < out.size(); ++i) out.values()[i] = std::exp(a.values()[i]);
    return finish({a}, out, [a = a, out]() mutable {
        if (!a.requires_grad()) return;
        const auto& g = out.grad();
        auto& ga = a.grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * out.values()[i];
    });
}

Tensor log(const Tensor& a) {
    Tensor out(a.rows(), a.cols());
    for (std::size_t i = 0; i < out.size(); ++i)
        out.values()[i] = std::log(std::max(a.values()[i], kLogFloor));
    return finish({a}, out, [a = a, out]() mutable {
        if (!a.requires_grad()) return;
        const auto& g = out.grad();
        auto& ga = a.grad();
        for (std::size_t i = 0; i < g.size(); ++i)
            ga[i] += g[i] / std::max(a.values()[i], kLogFloor);
    });
}

Tensor transpose(const Tensor& a) {
    Tensor out(a.cols(), a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) out.at(j, i) = a.at(i, j);
    return finish({a}, out, [a = a, out]() mutable {
        if (!a.requires_grad()) return;
        auto& ga = a.grad();
        for (std::size_t i = 0; i < a.rows(); ++i)
            for (std::size_t j = 0; j < a.cols(); ++j)
                ga[i * a.cols() + j] += out.grad()[j * a.rows() + i];
    });
}

namespace {

void check_nonempty(const char* op, const Tensor& a) {
    if (a.size() == 0) throw std::invalid_argument(std::string(op) + ": empty tensor");
}

}  // namespace

Tensor sum(const Tensor& a) {
    check_nonempty("sum", a);
    double s = 0.0;
    for (double v : a.values()) s += v;
    Tensor out = Tensor::scalar(s);
    return finish({a}, out, [a = a, out]() mutable {
        if (!a.requires_grad()) return;
        const double g = out.grad()[0];
        auto& ga = a.grad();
        for (double& gi : ga) gi += g;
    });
}

Tensor mean(const Tensor& a) {
    check_nonempty("mean", a);
    double s = 0.0;
    for (double v : a.values()) s += v;
    const double inv_n = 1.0 / static_cast<double>(a.size());
    Tensor out = Tensor::scalar(s * inv_n);
    return finish({a}, out, [a = a, out, inv_n]() mutable {
        if (!a.requires_grad()) return;
        const double g = out.grad()[0] * inv_n;
        auto& ga = a.grad();
        for (double& gi : ga) gi += g;
    });
}

Tensor row_mean(const Tensor& a) {
    check_nonempty("row_mean", a);
    const std::size_t n = a.rows(), m = a.cols();
    const double inv_n = 1.0 / static_cast<double>(n);
    Tensor out(1, m);
    for (std::size_t j = 0; j < m; ++j) {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += a.at(i, j);
        out.at(0, j) = s * inv_n;
    }
    return finish({a}, out, [a = a, out, inv_n]() mutable {
        if (!a.requires_grad()) return;
        const auto& g = out.grad();
        auto& ga = a.grad();
        const std::size_t n2 = a.rows(), m2 = a.cols();
        for (std::size_t i = 0; i < n2; ++i)
            for (std::size_t j = 0; j < m2; ++j) ga[i * m2 + j] += g[j] * inv_n;
    });
}

Tensor softmax_rows(const Tensor& a) {
    check_nonempty("softmax_rows", a);
    const std::size_t n = a.rows(), m = a.cols();
    Tensor out(n, m);
    for (std::size_t i = 0; i < n; ++i) {
        double mx = a.at(i, 0);
        for (std::size_t j = 1; j < m; ++j) mx = std::max(mx, a.at(i, j));
        double z = 0.0;
        for (std::size_t j = 0; j < m; ++j) {
            const double e = std::exp(a.at(i, j) - mx);
            out.at(i, j) = e;
            z += e;
        }
        for (std::size_t j = 0; j < m; ++j) out.at(i, j) /= z;
    }
    return finish({a}, out, [a = a, out]() mutable {
        if (!a.requires_grad()) return;
        const auto& g = out.grad();
        auto& ga = a.grad();
        const std::size_t n2 = out.rows(), m2 = out.cols();
        for (std::size_t i = 0; i < n2; ++i) {
            double dot = 0.0;
            for (std::size_t j = 0; j < m2; ++j) dot += g[i * m2 + j] * out.at(i, j);
            for (std::size_t j = 0; j < m2; ++j)
                ga[i * m2 + j] += out.at(i, j) * (g[i * m2 + j] - dot);
        }
    });
}

Tensor gaussian_kernel(const Tensor& a, const Tensor& b, const std::vector<double>& sigma_sqs) {
    if (a.cols() != b.cols()) shape_error("gaussian_kernel", a, b);
    if (sigma_sqs.empty())
        throw std::invalid_argument("gaussian_kernel: empty bandwidth set");
    for (double s : sigma_sqs)
        if (!(s > 0.0))
            throw std::invalid_argument("gaussian_kernel: non-positive bandwidth " +
                                        std::to_string(s));
    const std::size_t n = a.rows(), m = b.rows(), p = a.cols();
    // Squared distances are shared by forward and backward.
    auto d2 = std::make_shared<std::vector<double>>(n * m);
    Tensor out(n, m);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) {
            double d = 0.0;
            for (std::size_t c = 0; c < p; ++c) {
                const double diff = a.at(i, c) - b.at(j, c);
                d += diff * diff;
            }
            (*d2)[i * m + j] = d;
            double k = 0.0;
            for (double s : sigma_sqs) k += std::exp(-d / (2.0 * s));
            out.at(i, j) = k;
        }
    return finish({a, b}, out, [a = a, b = b, out, d2, sigma_sqs]() mutable {
        const auto& g = out.grad();
        const std::size_t n2 = a.rows(), m2 = b.rows(), p2 = a.cols();
        const bool wa = a.requires_grad(), wb = b.requires_grad();
        if (!wa && !wb) return;
        for (std::size_t i = 0; i < n2; ++i)
            for (std::size_t j = 0; j < m2; ++j) {
                const double gv = g[i * m2 + j];
                if (gv == 0.0) continue;
                double w = 0.0;  // sum_s k_s / sigma_s
                for (double s : sigma_sqs) w += std::exp(-(*d2)[i * m2 + j] / (2.0 * s)) / s;
                for (std::size_t c = 0; c < p2; ++c) {
                    const double diff = a.at(i, c) - b.at(j, c);
                    if (wa) a.grad()[i * p2 + c] += gv * w * (-diff);
                    if (wb) b.grad()[j * p2 + c] += gv * w * diff;
                }
            }
    });
}

// ---------------------------------------------------------------------------
// grad_check
// ---------------------------------------------------------------------------

GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                           double eps, double tol) {
    if (!(eps > 0.0)) throw std::invalid_argument("grad_check: eps must be positive");

    std::vector<double> autodiff_grad;
    {
        Tape tape;
        Tensor xt = x.detach();
        xt.set_requires_grad(true);
        Tensor loss = f(xt);
        if (loss.rows() != 1 || loss.cols() != 1)
            throw std::invalid_argument("grad_check: f must return a scalar");
        tape.backward(loss);
        autodiff_grad = xt.has_grad() ? xt.grad() : std::vector<double>(x.size(), 0.0);
    }

    // Finite differences run without a tape, so f builds no graph here.
    Tensor probe = x.detach();
    GradCheckReport report;
    report.max_rel_err = 0.0;
    for (std::size_t i = 0; i < probe.size(); ++i) {
        const double orig = probe.values()[i];
        probe.values()[i] = orig + eps;
        const double fp = f(probe).item();
        probe.values()[i] = orig - eps;
        const double fm = f(probe).item();
        probe.values()[i] = orig;
        const double fd = (fp - fm) / (2.0 * eps);
        const double ad = autodiff_grad[i];
        const double denom = std::max({std::abs(ad), std::abs(fd), 1e-8});
        report.max_rel_err = std::max(report.max_rel_err, std::abs(ad - fd) / denom);
    }
    report.pass = report.max_rel_err <= tol;
    return report;
}

}  // namespace odg
