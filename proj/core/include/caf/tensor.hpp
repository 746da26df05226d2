#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "caf/errors.hpp"

namespace caf {

using Shape = std::vector<int>;

std::string shape_str(const Shape& s);
int64_t shape_numel(const Shape& s);

// Dense row-major tensor of 64-bit reals. Copies are handles to shared
// storage; ops allocate fresh outputs. Gradients live next to the data and
// accumulate until zero_grad().
class Tensor {
  public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);
    static Tensor from(std::vector<double> values, Shape shape, bool requires_grad = false);
    // Uniform on [lo, hi).
    static Tensor rand_uniform(Shape shape, std::mt19937_64& rng, double lo, double hi,
                               bool requires_grad = false);
    static Tensor rand_normal(Shape shape, std::mt19937_64& rng, double mean, double stddev,
                              bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const;
    int dim(int i) const;
    int rank() const;
    int64_t numel() const;
    bool is_scalar() const { return numel() == 1; }

    std::span<double> data();
    std::span<const double> data() const;
    double item() const;  // numel()==1 only
    double& at(int64_t i);
    double at(int64_t i) const;
    // Row-major 2-D access.
    double& at(int r, int c);
    double at(int r, int c) const;

    bool requires_grad() const;
    void set_requires_grad(bool v);
    bool has_grad() const;
    std::span<double> grad();                 // allocates zeros on first touch
    std::span<const double> grad() const;     // requires has_grad()
    void zero_grad();

    Tensor clone() const;  // deep copy of data (grad not copied)
    bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }
    bool all_finite() const;

  private:
    struct Impl {
        Shape shape;
        std::vector<double> data;
        std::vector<double> grad;  // empty until first backward touch
        bool requires_grad = false;
    };
    std::shared_ptr<Impl> impl_;

    explicit Tensor(std::shared_ptr<Impl> impl) : impl_(std::move(impl)) {}
    Impl& impl();
    const Impl& impl() const;
    friend class Graph;
};

// Append-only tape of recorded operations. Forward calls append one backward
// rule per op, in topological order by construction; backward(loss) seeds the
// loss gradient and replays the rules in reverse, visiting each node once.
//
// Gradients accumulate across backward calls until the owner zeros them.
// A non-recording graph runs forward-only (inference) and keeps no tape.
class Graph {
  public:
    explicit Graph(bool recording = true) : recording_(recording) {}

    bool recording() const { return recording_; }
    size_t size() const { return nodes_.size(); }
    void clear() { nodes_.clear(); }

    // Backward-rule hook for composite ops defined outside this class.
    void record(std::function<void()> backward_rule);
    // Test-only fault injection: scales the input gradients an op of the
    // given name produces. Used to prove the finite-difference checker
    // actually catches broken backward rules.
    void inject_grad_fault(const std::string& op_name, double scale);
    double grad_fault(const char* op_name) const;

    void backward(const Tensor& loss);

    // --- elementwise ---
    Tensor add(const Tensor& a, const Tensor& b);   // equal shapes or scalar+tensor
    Tensor mul(const Tensor& a, const Tensor& b);   // equal shapes or scalar+tensor
    Tensor scale(const Tensor& x, double c);
    Tensor silu(const Tensor& x);
    Tensor sigmoid(const Tensor& x);
    Tensor softplus(const Tensor& x);
    Tensor exp(const Tensor& x);

    // --- linear algebra ---
    Tensor matmul(const Tensor& a, const Tensor& b);              // [m,k]x[k,n]
    Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);  // rows of x, optional b

    // --- sequence ops ---
    // Zero-padded "same" convolution, kernel [w,Cin,Cout] with odd w.
    Tensor conv1d(const Tensor& x, const Tensor& kernel, const Tensor& bias);
    // Depthwise causal convolution, kernel [w,C]; pads w-1 on the left.
    Tensor causal_depthwise_conv1d(const Tensor& x, const Tensor& kernel, const Tensor& bias);
    Tensor mean_pool_time(const Tensor& x);  // [L,C] -> [C]
    Tensor softmax(const Tensor& x);         // 1-D, max-subtracted
    Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                      double eps = 1e-5);    // per row of [L,C]

    // --- structure ---
    Tensor concat(const std::vector<Tensor>& xs, int axis);
    Tensor slice_cols(const Tensor& x, int c0, int c1);  // [L,C] -> [L,c1-c0]
    Tensor select(const Tensor& x, int64_t index);       // -> scalar
    Tensor sum(const Tensor& x);                         // -> scalar
    Tensor reshape(const Tensor& x, Shape shape);        // same numel

    Tensor mark(Tensor t, bool requires_grad);

  private:
    bool recording_ = true;
    std::vector<std::function<void()>> nodes_;
    std::unordered_map<std::string, double> grad_faults_;

    bool track(std::initializer_list<const Tensor*> inputs) const;
    Tensor binary_pointwise(const Tensor& a, const Tensor& b, bool is_add, const char* name);
};

// Max over coordinates of |analytic - central difference| scaled by
// max(1, |analytic|, |numeric|). `f` must rebuild the loss from the current
// parameter values on every call.
struct GradCheckResult {
    double max_rel_err = 0.0;
    size_t worst_param = 0;
    int64_t worst_coord = 0;
};

GradCheckResult grad_check(const std::function<Tensor(Graph&)>& f, std::span<Tensor> params,
                           double h = 1e-5);

// Sums a handful of doubles in a value-canonical order, so the result does
// not depend on how the inputs were permuted. Slot reductions in the fusion
// stages rely on this for exact modality-relabeling equivariance.
double reduce_canonical(std::span<double> values);

}  // namespace caf
