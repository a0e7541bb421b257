#include "mifi/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace mifi {

namespace {

std::atomic<std::uint64_t> g_next_seq{1};
thread_local bool t_grad_enabled = true;

detail::NodePtr make_node(Shape shape, std::vector<double> values, bool requires_grad) {
    if (shape_numel(shape) != values.size()) {
        throw std::invalid_argument("tensor: shape " + shape_str(shape) + " holds " +
                                    std::to_string(shape_numel(shape)) + " values, got " +
                                    std::to_string(values.size()));
    }
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->data = std::move(values);
    node->requires_grad = requires_grad;
    node->seq = g_next_seq.fetch_add(1, std::memory_order_relaxed);
    return node;
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto e : shape) n *= e;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

Tensor::Tensor() : node_(make_node({}, {0.0}, false)) {}

Tensor::Tensor(detail::NodePtr node) : node_(std::move(node)) {}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    auto n = shape_numel(shape);
    return Tensor(make_node(std::move(shape), std::vector<double>(n, 0.0), requires_grad));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    auto n = shape_numel(shape);
    return Tensor(make_node(std::move(shape), std::vector<double>(n, value), requires_grad));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
    for (double v : values) {
        if (!std::isfinite(v)) throw std::domain_error("tensor: non-finite value in input");
    }
    return Tensor(make_node(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return from({}, {value}, requires_grad);
}

Tensor Tensor::vector(std::vector<double> values, bool requires_grad) {
    Shape s{values.size()};
    return from(std::move(s), std::move(values), requires_grad);
}

const Shape& Tensor::shape() const { return node_->shape; }
std::size_t Tensor::numel() const { return node_->data.size(); }

std::size_t Tensor::dim(std::size_t axis) const {
    if (axis >= rank()) {
        throw std::out_of_range("tensor: axis " + std::to_string(axis) + " out of range for " +
                                shape_str(shape()));
    }
    return node_->shape[axis];
}

std::span<const double> Tensor::data() const { return node_->data; }
std::span<double> Tensor::mutable_data() { return node_->data; }

double Tensor::item() const {
    if (numel() != 1) throw std::invalid_argument("item: tensor " + shape_str(shape()) + " is not a scalar");
    return node_->data[0];
}

bool Tensor::requires_grad() const { return node_->requires_grad; }
void Tensor::set_requires_grad(bool on) { node_->requires_grad = on; }
bool Tensor::has_grad() const { return !node_->grad.empty(); }
std::span<const double> Tensor::grad() const { return node_->grad; }

std::span<double> Tensor::mutable_grad() {
    if (node_->grad.empty()) node_->grad.assign(node_->data.size(), 0.0);
    return node_->grad;
}

void Tensor::zero_grad() { node_->grad.clear(); }

Tensor Tensor::detach() const {
    return Tensor(make_node(node_->shape, node_->data, false));
}

Tensor Tensor::clone() const {
    return Tensor(make_node(node_->shape, node_->data, node_->requires_grad));
}

std::span<double> detail::GradContext::input_grad(std::size_t i) const {
    auto& node = *(*inputs)[i];
    if (!node.requires_grad) return {};
    if (node.grad.empty()) node.grad.assign(node.data.size(), 0.0);
    return node.grad;
}

Tensor record_op(const char* name, Shape shape, std::vector<double> values,
                 const std::vector<Tensor>& inputs, detail::BackwardFn backward) {
    for (double v : values) {
        if (!std::isfinite(v)) {
            throw std::domain_error(std::string(name) + ": non-finite value in output " + shape_str(shape));
        }
    }
    auto node = make_node(std::move(shape), std::move(values), false);
    node->op = name;
    if (!t_grad_enabled) return Tensor(node);
    bool any = std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
    if (any) {
        node->requires_grad = true;
        node->inputs.reserve(inputs.size());
        for (const auto& t : inputs) node->inputs.push_back(t.node());
        node->backward = std::move(backward);
    }
    return Tensor(node);
}

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }
bool grad_enabled() { return t_grad_enabled; }

GradTape GradTape::collect(const Tensor& root) {
    if (root.numel() != 1) {
        throw std::invalid_argument("backward: root must be a scalar, got " + shape_str(root.shape()));
    }
    GradTape tape;
    tape.root_ = root.node();
    std::unordered_set<const detail::Node*> seen;
    std::vector<detail::NodePtr> stack{root.node()};
    while (!stack.empty()) {
        auto node = std::move(stack.back());
        stack.pop_back();
        if (!node->requires_grad || !seen.insert(node.get()).second) continue;
        for (const auto& in : node->inputs) stack.push_back(in);
        tape.nodes_.push_back(std::move(node));
    }
    std::sort(tape.nodes_.begin(), tape.nodes_.end(),
              [](const detail::NodePtr& a, const detail::NodePtr& b) { return a->seq > b->seq; });
    return tape;
}

void GradTape::run() {
    if (!root_ || !root_->requires_grad) return;
    if (root_->grad.empty()) root_->grad.assign(1, 0.0);
    root_->grad[0] += 1.0;
    for (auto& node : nodes_) {
        if (!node->backward) continue;
        if (node->grad.empty()) node->grad.assign(node->data.size(), 0.0);
        detail::GradContext ctx{node->grad, &node->inputs};
        node->backward(ctx);
    }
    for (auto& node : nodes_) {
        if (!node->backward) continue;
        node->backward = nullptr;
        node->inputs.clear();
    }
    nodes_.clear();
}

void backward(const Tensor& root) { GradTape::collect(root).run(); }

Tensor kaiming_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    std::vector<double> values(shape_numel(shape));
    for (auto& v : values) v = dist(rng);
    return Tensor::from(std::move(shape), std::move(values), true);
}

Tensor normal(Shape shape, double mean, double stddev, Rng& rng) {
    std::normal_distribution<double> dist(mean, stddev);
    std::vector<double> values(shape_numel(shape));
    for (auto& v : values) v = dist(rng);
    return Tensor::from(std::move(shape), std::move(values), false);
}

void adam_step(std::span<Tensor> params, AdamState& state, const AdamConfig& cfg) {
    if (state.m.empty() && state.v.empty()) {
        for (const auto& p : params) {
            state.m.emplace_back(p.numel(), 0.0);
            state.v.emplace_back(p.numel(), 0.0);
        }
    }
    if (state.m.size() != params.size() || state.v.size() != params.size()) {
        throw std::invalid_argument("adam_step: state holds " + std::to_string(state.m.size()) +
                                    " slots for " + std::to_string(params.size()) + " parameters");
    }
    state.step += 1;
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i];
        auto& m = state.m[i];
        auto& v = state.v[i];
        if (m.size() != p.numel() || v.size() != p.numel()) {
            throw std::invalid_argument("adam_step: state slot " + std::to_string(i) + " has " +
                                        std::to_string(m.size()) + " entries, parameter " +
                                        shape_str(p.shape()) + " needs " + std::to_string(p.numel()));
        }
        auto g = p.grad();
        auto w = p.mutable_data();
        for (std::size_t j = 0; j < w.size(); ++j) {
            const double gj = g.empty() ? 0.0 : g[j];
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            const double mhat = m[j] / c1;
            const double vhat = v[j] / c2;
            w[j] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
        }
    }
}

}  // namespace mifi
