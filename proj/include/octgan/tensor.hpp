#ifndef OCTGAN_TENSOR_HPP
#define OCTGAN_TENSOR_HPP

#include <functional>
#include <initializer_list>
#include <memory>
#include <random>
#include <utility>

#include <Eigen/Dense>

#include "octgan/common.hpp"

namespace octgan {

namespace detail {

template <typename S>
struct TensorStorage {
    Shape shape;
    Eigen::Array<S, Eigen::Dynamic, 1> data;
    Eigen::Array<S, Eigen::Dynamic, 1> grad;  // empty until touched
    bool requires_grad = false;
};

}  // namespace detail

// Dense n-dimensional array of scalars, row-major, with optional gradient
// tracking. Copies are shallow handles onto shared storage; ops always
// return fresh storage and never write through their inputs' values.
template <typename S>
class Tensor {
public:
    using Scalar = S;
    using Array = Eigen::Array<S, Eigen::Dynamic, 1>;

    Tensor() = default;

    static Tensor zeros(Shape shape) {
        Tensor t;
        const Extent n = shape_numel(shape);
        t.st_ = std::make_shared<detail::TensorStorage<S>>();
        t.st_->shape = std::move(shape);
        t.st_->data = Array::Zero(n);
        return t;
    }

    static Tensor ones(Shape shape) { return constant(std::move(shape), S(1)); }

    static Tensor constant(Shape shape, S value) {
        Tensor t = zeros(std::move(shape));
        t.st_->data.setConstant(value);
        return t;
    }

    static Tensor normal(Shape shape, S mean, S stddev, std::uint64_t seed) {
        if (stddev < S(0)) throw InvalidConfig("normal fill needs stddev >= 0");
        Tensor t = zeros(std::move(shape));
        std::mt19937_64 rng(seed);
        std::normal_distribution<double> dist(static_cast<double>(mean),
                                              static_cast<double>(stddev));
        for (Extent i = 0; i < t.size(); ++i) t.st_->data[i] = static_cast<S>(dist(rng));
        return t;
    }

    static Tensor from_array(Shape shape, Array values) {
        const Extent n = shape_numel(shape);
        if (values.size() != n)
            throw InvalidShape("from_array: " + std::to_string(values.size()) +
                               " values for shape " + shape_str(shape));
        Tensor t;
        t.st_ = std::make_shared<detail::TensorStorage<S>>();
        t.st_->shape = std::move(shape);
        t.st_->data = std::move(values);
        return t;
    }

    static Tensor from_values(Shape shape, std::initializer_list<S> values) {
        Array a(static_cast<Extent>(values.size()));
        Extent i = 0;
        for (S v : values) a[i++] = v;
        return from_array(std::move(shape), std::move(a));
    }

    static Tensor scalar(S value) { return constant({1}, value); }

    bool defined() const { return static_cast<bool>(st_); }
    const Shape& shape() const { return st_->shape; }
    int rank() const { return static_cast<int>(st_->shape.size()); }
    Extent dim(int i) const { return st_->shape.at(static_cast<std::size_t>(i)); }
    Extent size() const { return st_->data.size(); }

    Array& values() { return st_->data; }
    const Array& values() const { return st_->data; }
    S* data() { return st_->data.data(); }
    const S* data() const { return st_->data.data(); }
    S operator[](Extent i) const { return st_->data[i]; }

    S item() const {
        if (size() != 1) throw NotScalar("item() on tensor of shape " + shape_str(shape()));
        return st_->data[0];
    }

    bool requires_grad() const { return st_ && st_->requires_grad; }
    Tensor& set_requires_grad(bool v) {
        st_->requires_grad = v;
        return *this;
    }

    // Gradient accumulator; allocated as zeros on first access.
    Array& grad() {
        if (st_->grad.size() == 0) st_->grad = Array::Zero(st_->data.size());
        return st_->grad;
    }
    const Array& grad() const { return const_cast<Tensor*>(this)->grad(); }
    bool grad_allocated() const { return st_->grad.size() != 0; }

    void zero_grad() {
        if (st_->grad.size() != 0) st_->grad.setZero();
    }

    // Same values, fresh storage, cut off from gradient tracking.
    Tensor detach() const {
        Tensor t = zeros(shape());
        t.st_->data = st_->data;
        return t;
    }

    Tensor clone() const {
        Tensor t = detach();
        t.st_->requires_grad = st_->requires_grad;
        return t;
    }

    bool all_finite() const { return st_->data.isFinite().all(); }

    bool same_storage(const Tensor& other) const { return st_ == other.st_; }

private:
    std::shared_ptr<detail::TensorStorage<S>> st_;
};

// Ordered record of the primitives executed while the tape was active on
// this thread. backward() replays the record once, in reverse, then clears
// it. One tape per thread; tapes nest (inner shadows outer).
template <typename S>
class GradTape {
public:
    GradTape() : prev_(active_ref()) { active_ref() = this; }
    ~GradTape() { active_ref() = prev_; }
    GradTape(const GradTape&) = delete;
    GradTape& operator=(const GradTape&) = delete;

    static GradTape* active() { return active_ref(); }

    void record(std::function<void()> backward_fn) {
        nodes_.push_back(std::move(backward_fn));
    }

    std::size_t recorded_ops() const { return nodes_.size(); }

    void backward(Tensor<S> loss) {
        if (loss.size() != 1)
            throw NotScalar("backward needs a scalar loss, got shape " + shape_str(loss.shape()));
        loss.grad()[0] += S(1);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
        nodes_.clear();
    }

private:
    static GradTape*& active_ref() {
        thread_local GradTape* current = nullptr;
        return current;
    }

    std::vector<std::function<void()>> nodes_;
    GradTape* prev_;
};

// Runs backward from `loss` on the thread's active tape.
template <typename S>
void backward(const Tensor<S>& loss) {
    GradTape<S>* tape = GradTape<S>::active();
    if (!tape) throw Error("backward called with no active GradTape");
    tape->backward(loss);
}

namespace detail {

// An op output joins the tape when gradients can flow into it.
template <typename S>
bool track(const Tensor<S>& t) {
    return GradTape<S>::active() != nullptr && t.requires_grad();
}

template <typename S>
void record_op(std::function<void()> fn) {
    GradTape<S>::active()->record(std::move(fn));
}

}  // namespace detail

}  // namespace octgan

#endif
