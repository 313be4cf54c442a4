#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace anyseg::ad {

// Extents of a dense row-major array. An empty shape is a rank-0 scalar
// holding exactly one element.
using Shape = std::vector<int>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) os << ", ";
        os << s[i];
    }
    os << ")";
    return os.str();
}

inline void check_shape_valid(const Shape& s, const char* who) {
    for (int d : s) {
        if (d <= 0) {
            throw std::invalid_argument(std::string(who) + ": non-positive extent in shape " + shape_str(s));
        }
    }
}

enum class OpKind {
    Matmul,
    Add,
    Sub,
    Mul,
    ScalarScale,
    Relu,
    Gelu,
    MeanAxes,
    SumAxes,
    Reshape,
    Transpose,
    Concat,
    Softmax,
    LogSoftmax,
    LogClamped,
    NearestUpsample2d,
    PatchMerge2d,
    CosineSimilarity,
};

template <typename S>
class Graph;

// Dense n-dimensional array with an optional gradient buffer. Copies share
// the underlying storage; forward ops always allocate fresh outputs.
template <typename S>
class Tensor {
  public:
    Tensor() = default;

    static Tensor zeros(Shape shape) { return filled(std::move(shape), S(0)); }

    static Tensor filled(Shape shape, S value) {
        check_shape_valid(shape, "tensor");
        Tensor t;
        t.impl_ = std::make_shared<Impl>();
        t.impl_->shape = std::move(shape);
        t.impl_->values.assign(static_cast<size_t>(shape_numel(t.impl_->shape)), value);
        return t;
    }

    static Tensor from_values(Shape shape, std::vector<S> values) {
        check_shape_valid(shape, "tensor");
        if (shape_numel(shape) != static_cast<int64_t>(values.size())) {
            throw std::invalid_argument("tensor: shape " + shape_str(shape) + " does not match buffer of " +
                                        std::to_string(values.size()) + " values");
        }
        Tensor t;
        t.impl_ = std::make_shared<Impl>();
        t.impl_->shape = std::move(shape);
        t.impl_->values = std::move(values);
        return t;
    }

    static Tensor scalar(S value) { return filled(Shape{}, value); }

    // Tensors are shared handles: const on the handle does not make the
    // underlying buffers immutable, same as a smart pointer.
    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return checked()->shape; }
    int rank() const { return static_cast<int>(checked()->shape.size()); }
    int64_t size() const { return static_cast<int64_t>(checked()->values.size()); }
    bool is_scalar() const { return size() == 1; }

    S item() const {
        if (!is_scalar()) {
            throw std::invalid_argument("tensor: item() on non-scalar shape " + shape_str(shape()));
        }
        return checked()->values[0];
    }

    std::vector<S>& values() const { return checked()->values; }

    bool requires_grad() const { return checked()->requires_grad; }
    const Tensor& set_requires_grad(bool b = true) const {
        checked()->requires_grad = b;
        return *this;
    }

    bool has_grad() const { return !checked()->grad.empty(); }

    std::vector<S>& grad() const {
        Impl* im = checked();
        if (im->grad.empty()) {
            throw std::runtime_error("tensor: gradient not populated");
        }
        return im->grad;
    }

    // Allocates (zero-filled) on first use; backward accumulates into it.
    std::vector<S>& ensure_grad() const {
        Impl* im = checked();
        if (im->grad.empty()) im->grad.assign(im->values.size(), S(0));
        return im->grad;
    }

    void clear_grad() const { checked()->grad.clear(); }

    // Same values in a fresh storage, detached from any graph.
    Tensor clone_detached() const {
        return from_values(shape(), values());
    }

    template <typename T>
    Tensor<T> cast() const {
        std::vector<T> v(checked()->values.size());
        for (size_t i = 0; i < v.size(); ++i) v[i] = static_cast<T>(checked()->values[i]);
        return Tensor<T>::from_values(shape(), std::move(v));
    }

    bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

  private:
    friend class Graph<S>;

    struct Impl {
        Shape shape;
        std::vector<S> values;
        std::vector<S> grad;  // empty until touched by backward
        bool requires_grad = false;
        const Graph<S>* producer = nullptr;
    };

    Impl* checked() const {
        if (!impl_) throw std::runtime_error("tensor: use of undefined tensor");
        return impl_.get();
    }

    std::shared_ptr<Impl> impl_;
};

// Tape of operation records in forward (topological) order. While a graph is
// active on the current thread, every op whose operands require gradients
// appends a record; backward() replays the tape in reverse.
template <typename S>
class Graph {
  public:
    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    class Scope {
      public:
        explicit Scope(Graph* g) : graph_(g) { stack().push_back(g); }
        ~Scope() {
            if (graph_) stack().pop_back();
        }
        Scope(Scope&& o) noexcept : graph_(o.graph_) { o.graph_ = nullptr; }
        Scope(const Scope&) = delete;
        Scope& operator=(const Scope&) = delete;
        Scope& operator=(Scope&&) = delete;

      private:
        Graph* graph_;
    };

    [[nodiscard]] Scope activate() { return Scope(this); }

    static Graph* active() {
        auto& s = stack();
        return s.empty() ? nullptr : s.back();
    }

    size_t node_count() const { return records_.size(); }

    void record(OpKind kind, Tensor<S> output, std::function<void()> vjp) {
        output.impl_->producer = this;
        records_.push_back(Record{kind, std::move(output), std::move(vjp)});
    }

    bool contains(const Tensor<S>& t) const { return t.defined() && t.impl_->producer == this; }

    // Seeds d(loss)/d(loss) = 1 and accumulates gradients into every
    // requires_grad tensor reachable from the loss. Fan-out sums naturally
    // because records add into shared gradient buffers.
    void backward(const Tensor<S>& loss) {
        if (!loss.defined() || !loss.is_scalar()) {
            throw std::invalid_argument("backward: loss must be scalar, got " +
                                        (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
        }
        if (!contains(loss)) {
            throw std::invalid_argument("backward: loss tensor was not produced by this graph");
        }
        Tensor<S> l = loss;
        l.ensure_grad()[0] += S(1);
        for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
            if (!it->output.has_grad()) continue;
            it->vjp();
        }
    }

  private:
    struct Record {
        OpKind kind;
        Tensor<S> output;
        std::function<void()> vjp;
    };

    static std::vector<Graph*>& stack() {
        thread_local std::vector<Graph*> s;
        return s;
    }

    std::vector<Record> records_;
};

namespace detail {

// Appends a record when a graph is active and any operand carries gradients.
// Outputs are marked requires_grad so downstream ops keep recording.
template <typename S>
void maybe_record(OpKind kind, const std::vector<Tensor<S>>& inputs, Tensor<S>& out, std::function<void()> vjp) {
    Graph<S>* g = Graph<S>::active();
    if (!g) return;
    bool any = false;
    for (const auto& t : inputs) {
        if (t.requires_grad()) {
            any = true;
            break;
        }
    }
    if (!any) return;
    out.set_requires_grad(true);
    g->record(kind, out, std::move(vjp));
}

}  // namespace detail

}  // namespace anyseg::ad
