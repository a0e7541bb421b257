#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace mifi {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct Node;
using NodePtr = std::shared_ptr<Node>;

struct GradContext;
using BackwardFn = std::function<void(const GradContext&)>;

struct Node {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;
    bool requires_grad = false;
    std::uint64_t seq = 0;
    const char* op = "leaf";
    std::vector<NodePtr> inputs;
    BackwardFn backward;
};

}  // namespace detail

/// Row-major float64 N-d array. Copies share storage (handle semantics);
/// use clone() for a deep copy.
class Tensor {
   public:
    Tensor();

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);
    static Tensor vector(std::vector<double> values, bool requires_grad = false);

    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t numel() const;
    std::size_t dim(std::size_t axis) const;

    std::span<const double> data() const;
    // Mutating a tensor that already feeds a recorded graph invalidates that graph.
    std::span<double> mutable_data();
    double item() const;
    double operator[](std::size_t flat) const { return data()[flat]; }

    bool requires_grad() const;
    void set_requires_grad(bool on);
    bool has_grad() const;
    std::span<const double> grad() const;
    std::span<double> mutable_grad();
    void zero_grad();

    Tensor detach() const;
    Tensor clone() const;
    bool same_storage(const Tensor& other) const { return node_ == other.node_; }

    const detail::NodePtr& node() const { return node_; }
    explicit Tensor(detail::NodePtr node);

   private:
    detail::NodePtr node_;
};

namespace detail {

struct GradContext {
    std::span<const double> out_grad;
    const std::vector<NodePtr>* inputs;

    // Empty span when input i does not take part in differentiation.
    std::span<double> input_grad(std::size_t i) const;
};

}  // namespace detail

/// Registers a differentiable result. `backward` receives the output gradient
/// and accumulates into the gradients of `inputs`. Throws std::domain_error
/// if `values` contains a non-finite entry.
Tensor record_op(const char* name, Shape shape, std::vector<double> values,
                 const std::vector<Tensor>& inputs, detail::BackwardFn backward);

/// Disables graph recording on this thread while alive.
class NoGradGuard {
   public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

   private:
    bool previous_;
};

bool grad_enabled();

/// Operations reachable from a scalar root in reverse registration order.
class GradTape {
   public:
    static GradTape collect(const Tensor& root);

    std::size_t size() const { return nodes_.size(); }
    // Seeds d(root)/d(root)=1, runs every backward closure, then drops them.
    void run();

   private:
    detail::NodePtr root_;
    std::vector<detail::NodePtr> nodes_;
};

void backward(const Tensor& root);

// ---- elementwise ---------------------------------------------------------
// Binary ops require equal shapes; a rank-0 operand broadcasts.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);
Tensor neg(const Tensor& a);
Tensor square(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);

// ---- reductions ----------------------------------------------------------
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor sum_axis(const Tensor& a, std::size_t axis);
Tensor mean_axis(const Tensor& a, std::size_t axis);

// ---- shape ---------------------------------------------------------------
Tensor reshape(const Tensor& a, Shape shape);
Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes);
Tensor transpose(const Tensor& a);  // swaps the last two axes
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
std::vector<Tensor> split(const Tensor& a, std::size_t axis, const std::vector<std::size_t>& sizes);
/// Repeats extent-1 axes up to `shape`; ranks must match.
Tensor expand(const Tensor& a, Shape shape);
/// out[i] = a[index[i]], or 0 where index[i] < 0. Gradient scatters back.
Tensor gather(const Tensor& a, std::vector<std::int64_t> index, Shape shape);

// ---- linear algebra ------------------------------------------------------
/// [..., m, k] x [..., k, n] with identical leading extents.
Tensor matmul(const Tensor& a, const Tensor& b);
/// x: [in] or [L, in]; weight: [out, in]; bias: [out].
Tensor linear(const Tensor& x, const Tensor& weight, const std::optional<Tensor>& bias = std::nullopt);

// ---- volumes [C, H, W, D] -------------------------------------------------
/// Cross-correlation with an odd cubic kernel [C_out, C_in, k, k, k].
Tensor conv3d(const Tensor& x, const Tensor& kernel, std::size_t stride, std::size_t pad,
              const std::optional<Tensor>& bias = std::nullopt);
Tensor max_pool3d(const Tensor& x, std::size_t window, std::size_t stride);
Tensor nearest_upsample3d(const Tensor& x, std::size_t factor);

// ---- normalisation / attention -------------------------------------------
Tensor softmax(const Tensor& x, std::size_t axis);
Tensor log_softmax(const Tensor& x, std::size_t axis);
/// Normalises over the last axis, then applies gamma/beta of that extent.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

struct AttentionWeights {
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    // Sequence-axis projections [k, L_kv] for low-rank (Linformer) attention.
    std::optional<Tensor> proj_k, proj_v;
};

struct AttentionTrace {
    Tensor weights;  // [heads, L_q, L_kv or k]
};

/// q: [L_q, E]; k, v: [L_kv, E]. Scaled dot-product attention per head,
/// heads concatenated and output-projected.
Tensor multihead_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                           const AttentionWeights& w, std::size_t heads,
                           AttentionTrace* trace = nullptr);

// ---- optimisation --------------------------------------------------------
struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    std::int64_t step = 0;
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
};

/// One bias-corrected Adam update from each parameter's accumulated grad.
/// Parameters without a grad are treated as having a zero gradient.
void adam_step(std::span<Tensor> params, AdamState& state, const AdamConfig& cfg);

// ---- initialisation ------------------------------------------------------
using Rng = std::mt19937_64;

Tensor kaiming_uniform(Shape shape, std::size_t fan_in, Rng& rng);
Tensor normal(Shape shape, double mean, double stddev, Rng& rng);

}  // namespace mifi
