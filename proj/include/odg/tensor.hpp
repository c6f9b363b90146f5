#ifndef ODG_TENSOR_HPP
#define ODG_TENSOR_HPP

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

namespace odg {

class Tensor;
class Tape;

namespace detail {

struct TensorData {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> values;   // row-major
    std::vector<double> grad;     // empty until materialized, same shape as values
    bool requires_grad = false;
    int node_id = -1;             // index into the recording tape, -1 for leaves
    Tape* tape = nullptr;         // tape that recorded this tensor, if any
};

// Low-level recording hook shared by all differentiable ops. `pull` reads the
// gradient of `out` and accumulates into the parents. Exposed so tests can
// build ops with deliberately wrong adjoints.
void record(std::vector<Tensor> parents, const Tensor& out, std::function<void()> pull);

}  // namespace detail

// Dense 2-D tensor of doubles. Copies are shallow: they share storage, so a
// parameter held by a model and by a tape node are the same buffer. Scalars
// are 1x1 tensors.
class Tensor {
public:
    Tensor() : d_(std::make_shared<detail::TensorData>()) {}
    Tensor(std::size_t rows, std::size_t cols, double fill = 0.0, bool requires_grad = false);

    static Tensor scalar(double v, bool requires_grad = false);
    static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows,
                            bool requires_grad = false);
    static Tensor from_values(std::size_t rows, std::size_t cols, std::vector<double> values,
                              bool requires_grad = false);

    std::size_t rows() const { return d_->rows; }
    std::size_t cols() const { return d_->cols; }
    std::size_t size() const { return d_->values.size(); }
    std::string shape_str() const;

    double& at(std::size_t r, std::size_t c) { return d_->values[r * d_->cols + c]; }
    double at(std::size_t r, std::size_t c) const { return d_->values[r * d_->cols + c]; }
    std::vector<double>& values() { return d_->values; }
    const std::vector<double>& values() const { return d_->values; }

    // Scalar extraction; throws unless the tensor is 1x1.
    double item() const;

    bool requires_grad() const { return d_->requires_grad; }
    void set_requires_grad(bool v) { d_->requires_grad = v; }
    int node_id() const { return d_->node_id; }

    bool has_grad() const { return !d_->grad.empty(); }
    std::vector<double>& grad();              // materializes zeros on first use
    const std::vector<double>& grad() const;  // throws if absent
    void zero_grad();
    void drop_grad() { d_->grad.clear(); }

    // Deep copy of the values as an untracked leaf.
    Tensor detach() const;
    // Deep copy preserving requires_grad (fresh leaf storage, no graph link).
    Tensor clone() const;

    bool same_storage(const Tensor& other) const { return d_ == other.d_; }
    bool all_finite() const;

private:
    std::shared_ptr<detail::TensorData> d_;
    friend void detail::record(std::vector<Tensor>, const Tensor&, std::function<void()>);
    friend class Tape;
};

// Reverse-mode tape. Constructing a Tape makes it the active graph for the
// current thread; destruction restores the previous one. Ops record onto the
// active tape only when some operand requires grad, so inference code that
// runs without a live Tape (or on frozen tensors) builds no graph at all.
// Each worker thread owns its tapes privately; there is no shared state.
class Tape {
public:
    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* current();

    // Reverse sweep from `loss` (a scalar recorded on this tape). Non-leaf
    // gradients are reset each call; leaf gradients accumulate additively, so
    // the caller zeroes parameter grads between optimization steps.
    void backward(const Tensor& loss);

    std::size_t node_count() const { return nodes_.size(); }

private:
    struct Node {
        std::vector<Tensor> parents;
        Tensor out;
        std::function<void()> pull;
    };
    std::vector<Node> nodes_;
    Tape* prev_ = nullptr;
    friend void detail::record(std::vector<Tensor>, const Tensor&, std::function<void()>);
};

// Suspends recording on the current thread for its lifetime: ops built inside
// are pure forward evaluation even when an outer Tape is live and operands
// require grad. Used for peer-model evaluation whose outputs must act as
// constants (stop-gradient) and for validation passes inside training.
class NoTapeGuard {
public:
    NoTapeGuard();
    ~NoTapeGuard();
    NoTapeGuard(const NoTapeGuard&) = delete;
    NoTapeGuard& operator=(const NoTapeGuard&) = delete;

private:
    Tape* prev_;
};

// ---------------------------------------------------------------------------
// Differentiable ops. Shape mismatches throw std::invalid_argument naming the
// offending shapes. add/sub also accept a 1 x cols second operand, broadcast
// over rows (needed for bias terms and mean-centering).
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor relu(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);  // argument clamped to >= 1e-12 before the log
Tensor transpose(const Tensor& a);

Tensor sum(const Tensor& a);       // 1x1
Tensor mean(const Tensor& a);      // 1x1
Tensor row_mean(const Tensor& a);  // 1 x cols, mean over rows per column

// Row-stochastic softmax with max-subtraction; rows sum to 1 within 1e-9.
Tensor softmax_rows(const Tensor& a);

// Sum-of-Gaussians kernel matrix K[i][j] = sum_s exp(-|a_i - b_j|^2 / (2 s)),
// with `sigma_sqs` the bandwidth set (each entry a variance, > 0).
Tensor gaussian_kernel(const Tensor& a, const Tensor& b, const std::vector<double>& sigma_sqs);

inline constexpr double kLogFloor = 1e-12;

// ---------------------------------------------------------------------------
// Finite-difference gradient checking
// ---------------------------------------------------------------------------

struct GradCheckReport {
    double max_rel_err = 0.0;
    bool pass = false;
};

// Central-difference check of d f(x) / dx against the tape gradient. `f` must
// build a scalar from the tensor it is handed (substituting it for a model
// parameter is fine, since tensors share storage). Relative error uses a
// max(|a|, |b|, 1e-8) denominator.
GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                           double eps = 1e-5, double tol = 1e-4);

}  // namespace odg

#endif  // ODG_TENSOR_HPP
