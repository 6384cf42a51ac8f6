// Dense double-precision tensors with reverse-mode differentiation.
//
// A Tensor is a shared handle to an immutable-shape buffer of doubles.
// Every differentiable op records its inputs and a backward closure on the
// produced tensor, so the graph of a computation hangs off its result and
// is replayed in reverse by grad_of(). There is no global tape: independent
// computations in different threads never share state.
#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "qkcv/errors.hpp"

namespace qkcv {

using Shape = std::vector<long>;

long shape_numel(const Shape& s);
std::string shape_str(const Shape& s);
bool shapes_equal(const Shape& a, const Shape& b);

// NumPy-style broadcast of two shapes; throws ShapeError if incompatible.
Shape broadcast_shapes(const Shape& a, const Shape& b, const char* op);

class GradStore;
struct TensorImpl;

using BackwardFn =
    std::function<void(const TensorImpl& self, const std::vector<double>& dself, GradStore& store)>;

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<TensorImpl>> parents;
    BackwardFn backward;

    long numel() const { return static_cast<long>(data.size()); }
    bool is_leaf() const { return parents.empty(); }
};

class Tensor {
  public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    long ndim() const { return static_cast<long>(impl_->shape.size()); }
    long numel() const { return impl_->numel(); }
    long extent(long axis) const;
    bool requires_grad() const { return impl_->requires_grad; }
    bool is_leaf() const { return impl_->is_leaf(); }

    // Freezing / unfreezing is only meaningful on leaves (parameters).
    void set_requires_grad(bool value);

    const std::vector<double>& data() const { return impl_->data; }
    // In-place mutation of a leaf's storage (optimizer updates, checkpoint load).
    std::vector<double>& leaf_data();

    double item() const;
    double at(const std::vector<long>& index) const;

    // Copy of the values with no graph attached.
    Tensor detach(bool requires_grad = false) const;

    const TensorImpl* id() const { return impl_.get(); }
    bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

    const std::shared_ptr<TensorImpl>& impl() const { return impl_; }
    static Tensor wrap(std::shared_ptr<TensorImpl> impl) { return Tensor(std::move(impl)); }

  private:
    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
    std::shared_ptr<TensorImpl> impl_;
};

// Scoped suppression of graph recording, e.g. around evaluation passes.
class NoGradGuard {
  public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

bool grad_recording_enabled();

// ---- primitive ops --------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);

// matmul: [n,k]x[k,m], batched [..,n,k]x[..,k,m] (equal leading dims), or
// [..,n,k]x[k,m] with the right-hand side shared across the batch.
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor transpose(const Tensor& a, long axis_a = -2, long axis_b = -1);
Tensor permute(const Tensor& a, const std::vector<long>& axes);
Tensor reshape(const Tensor& a, Shape shape);  // one extent may be -1
Tensor broadcast_to(const Tensor& a, const Shape& shape);

Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor elu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor tanh_op(const Tensor& a);

Tensor softmax_lastdim(const Tensor& a);
Tensor layer_norm_lastdim(const Tensor& a, double eps = 1e-5);

Tensor concat(const std::vector<Tensor>& parts, long axis);
Tensor reduce_sum(const Tensor& a, long axis, bool keepdim = false);
Tensor reduce_mean(const Tensor& a, long axis, bool keepdim = false);
Tensor sum_all(const Tensor& a);  // rank-0 result

// Fill positions where mask is nonzero with `value`; mask broadcasts to a's
// shape and never receives gradient.
Tensor masked_fill(const Tensor& a, const Tensor& mask, double value);

// relu via masked_fill; used by pinball-style losses.
Tensor positive_part(const Tensor& a);

// y = x W + b with b broadcast over leading dims.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator*(const Tensor& a, double s) { return scale(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }

// ---- reverse-mode pass ----------------------------------------------------

class GradStore {
  public:
    std::vector<double>& accumulate(const std::shared_ptr<TensorImpl>& t);
    bool has(const TensorImpl* t) const { return bufs_.count(t) != 0; }
    const std::vector<double>& at(const TensorImpl* t) const { return bufs_.at(t); }

  private:
    friend class GradMap;
    std::unordered_map<const TensorImpl*, std::vector<double>> bufs_;
};

// Result of a backward pass. at() yields an explicit zero tensor for
// parameters the loss never touched; materialized() reports whether the
// pass ever allocated a gradient buffer for a tensor, which is how freeze
// policies assert that frozen parameters stay outside the tape.
class GradMap {
  public:
    Tensor at(const Tensor& param) const;
    bool materialized(const Tensor& param) const;
    std::size_t materialized_count() const { return grads_.size(); }

  private:
    friend GradMap grad_of(const Tensor&, const std::vector<Tensor>&);
    std::unordered_map<const TensorImpl*, Tensor> grads_;
};

// d(loss)/d(param) for every param. loss must be scalar; params detached
// from the loss graph get exact zeros.
GradMap grad_of(const Tensor& loss, const std::vector<Tensor>& params);

}  // namespace qkcv
