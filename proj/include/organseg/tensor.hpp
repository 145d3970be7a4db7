#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace organseg {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

// One node of a dynamically built reverse-mode graph. Progress through the
// graph is value-only until backward() walks it; grad buffers are allocated
// on first touch.
struct Node {
    std::vector<double> val;
    std::vector<double> grad;  // empty until needed; sized like val
    Shape shape;
    bool requires_grad = false;
    std::string name;  // set for parameters
    std::vector<std::shared_ptr<Node>> parents;
    // Accumulates into parents' grads; reads this node's val/grad.
    std::function<void(Node&)> backprop;

    double* grad_data() {
        if (grad.empty()) grad.assign(val.size(), 0.0);
        return grad.data();
    }
};

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<Node> n) : n_(std::move(n)) {}

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from_values(Shape shape, std::vector<double> values,
                              bool requires_grad = false);

    bool defined() const { return static_cast<bool>(n_); }
    const Shape& shape() const { return n_->shape; }
    std::int64_t numel() const { return static_cast<std::int64_t>(n_->val.size()); }
    std::int64_t dim(int i) const { return n_->shape[static_cast<std::size_t>(i)]; }

    double* data() { return n_->val.data(); }
    const double* data() const { return n_->val.data(); }
    std::vector<double>& values() { return n_->val; }
    const std::vector<double>& values() const { return n_->val; }

    bool requires_grad() const { return n_->requires_grad; }
    void set_requires_grad(bool v) { n_->requires_grad = v; }
    const std::string& name() const { return n_->name; }
    void set_name(std::string v) { n_->name = std::move(v); }

    // Gradient buffer (allocated zero on first access).
    double* grad() { return n_->grad_data(); }
    const std::vector<double>& grad_values() const { return n_->grad; }
    bool has_grad() const { return !n_->grad.empty(); }
    void zero_grad() { n_->grad.clear(); }

    double item() const { return n_->val.at(0); }

    Node* node() const { return n_.get(); }
    const std::shared_ptr<Node>& ptr() const { return n_; }

private:
    std::shared_ptr<Node> n_;
};

// Reverse-mode sweep from a scalar loss. Seeds d(loss)/d(loss) = 1 and runs
// each node's backprop in reverse topological order. Nodes that do not
// require grad are skipped entirely.
void backward(const Tensor& loss);

// Value copy that blocks gradient flow.
Tensor detach(const Tensor& t);

}  // namespace organseg
