#include "caf/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

namespace caf {

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) os << ',';
        os << s[i];
    }
    os << ']';
    return os.str();
}

int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

static void check_shape_positive(const Shape& s) {
    for (int d : s) {
        if (d <= 0) throw DimensionError("non-positive extent in shape " + shape_str(s));
    }
}

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    check_shape_positive(shape);
    auto impl = std::make_shared<Impl>();
    impl->data.assign(static_cast<size_t>(shape_numel(shape)), 0.0);
    impl->shape = std::move(shape);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.data().begin(), t.data().end(), value);
    return t;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return full({1}, value, requires_grad);
}

Tensor Tensor::from(std::vector<double> values, Shape shape, bool requires_grad) {
    check_shape_positive(shape);
    if (static_cast<int64_t>(values.size()) != shape_numel(shape)) {
        throw DimensionError("value count " + std::to_string(values.size()) +
                             " does not fill shape " + shape_str(shape));
    }
    auto impl = std::make_shared<Impl>();
    impl->shape = std::move(shape);
    impl->data = std::move(values);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::rand_uniform(Shape shape, std::mt19937_64& rng, double lo, double hi,
                            bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::uniform_real_distribution<double> dist(lo, hi);
    for (double& v : t.data()) v = dist(rng);
    return t;
}

Tensor Tensor::rand_normal(Shape shape, std::mt19937_64& rng, double mean, double stddev,
                           bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::normal_distribution<double> dist(mean, stddev);
    for (double& v : t.data()) v = dist(rng);
    return t;
}

Tensor::Impl& Tensor::impl() {
    if (!impl_) throw ContractError("use of an empty tensor");
    return *impl_;
}

const Tensor::Impl& Tensor::impl() const {
    if (!impl_) throw ContractError("use of an empty tensor");
    return *impl_;
}

const Shape& Tensor::shape() const { return impl().shape; }

int Tensor::dim(int i) const {
    const Shape& s = shape();
    if (i < 0 || i >= static_cast<int>(s.size()))
        throw DimensionError("dim index " + std::to_string(i) + " out of rank " +
                             std::to_string(s.size()));
    return s[i];
}

int Tensor::rank() const { return static_cast<int>(shape().size()); }

int64_t Tensor::numel() const { return static_cast<int64_t>(impl().data.size()); }

std::span<double> Tensor::data() { return impl().data; }
std::span<const double> Tensor::data() const { return impl().data; }

double Tensor::item() const {
    if (numel() != 1) throw ContractError("item() on non-scalar tensor " + shape_str(shape()));
    return impl().data[0];
}

double& Tensor::at(int64_t i) { return impl().data.at(static_cast<size_t>(i)); }
double Tensor::at(int64_t i) const { return impl().data.at(static_cast<size_t>(i)); }

double& Tensor::at(int r, int c) {
    const Shape& s = shape();
    if (s.size() != 2) throw DimensionError("2-D access on tensor of shape " + shape_str(s));
    return impl().data[static_cast<size_t>(r) * s[1] + c];
}

double Tensor::at(int r, int c) const { return const_cast<Tensor*>(this)->at(r, c); }

bool Tensor::requires_grad() const { return impl().requires_grad; }
void Tensor::set_requires_grad(bool v) { impl().requires_grad = v; }
bool Tensor::has_grad() const { return !impl().grad.empty(); }

std::span<double> Tensor::grad() {
    Impl& im = impl();
    if (im.grad.empty()) im.grad.assign(im.data.size(), 0.0);
    return im.grad;
}

std::span<const double> Tensor::grad() const {
    const Impl& im = impl();
    if (im.grad.empty()) throw ContractError("grad read before any backward pass");
    return im.grad;
}

void Tensor::zero_grad() {
    Impl& im = impl();
    if (!im.grad.empty()) std::fill(im.grad.begin(), im.grad.end(), 0.0);
}

Tensor Tensor::clone() const {
    const Impl& im = impl();
    auto copy = std::make_shared<Impl>();
    copy->shape = im.shape;
    copy->data = im.data;
    copy->requires_grad = im.requires_grad;
    return Tensor(std::move(copy));
}

bool Tensor::all_finite() const {
    for (double v : impl().data)
        if (!std::isfinite(v)) return false;
    return true;
}

// ---------------------------------------------------------------------------
// Graph

void Graph::record(std::function<void()> backward_rule) {
    if (recording_) nodes_.push_back(std::move(backward_rule));
}

void Graph::inject_grad_fault(const std::string& op_name, double scale) {
    grad_faults_[op_name] = scale;
}

double Graph::grad_fault(const char* op_name) const {
    auto it = grad_faults_.find(op_name);
    return it == grad_faults_.end() ? 1.0 : it->second;
}

void Graph::backward(const Tensor& loss) {
    if (!recording_) throw ContractError("backward() on a non-recording graph");
    if (loss.numel() != 1)
        throw ContractError("backward() needs a scalar loss, got shape " +
                            shape_str(loss.shape()));
    Tensor seed = loss;  // shared storage
    seed.grad()[0] += 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
}

bool Graph::track(std::initializer_list<const Tensor*> inputs) const {
    if (!recording_) return false;
    for (const Tensor* t : inputs)
        if (t->requires_grad()) return true;
    return false;
}

Tensor Graph::mark(Tensor t, bool requires_grad) {
    t.set_requires_grad(requires_grad);
    return t;
}

// ---------------------------------------------------------------------------
// elementwise

Tensor Graph::binary_pointwise(const Tensor& a, const Tensor& b, bool is_add, const char* name) {
    const bool a_scalar = a.numel() == 1;
    const bool b_scalar = b.numel() == 1;
    if (!(a.shape() == b.shape() || a_scalar || b_scalar)) {
        throw DimensionError(std::string(name) + ": shapes " + shape_str(a.shape()) + " and " +
                             shape_str(b.shape()) + " are neither equal nor scalar-broadcast");
    }
    const Tensor& big = (b_scalar && !a_scalar) ? a : (a_scalar && !b_scalar ? b : a);
    Tensor out = Tensor::zeros(big.shape());
    auto pa = a.data();
    auto pb = b.data();
    auto po = out.data();
    const int64_t n = out.numel();
    for (int64_t i = 0; i < n; ++i) {
        const double x = pa[a_scalar ? 0 : i];
        const double y = pb[b_scalar ? 0 : i];
        po[i] = is_add ? x + y : x * y;
    }
    if (track({&a, &b})) {
        out.set_requires_grad(true);
        Tensor ta = a, tb = b, to = out;
        record([ta, tb, to, a_scalar, b_scalar, is_add, n]() mutable {
            auto g = to.grad();
            if (ta.requires_grad()) {
                auto ga = ta.grad();
                for (int64_t i = 0; i < n; ++i) {
                    const double contrib = is_add ? g[i] : g[i] * tb.data()[b_scalar ? 0 : i];
                    ga[a_scalar ? 0 : i] += contrib;
                }
            }
            if (tb.requires_grad()) {
                auto gb = tb.grad();
                for (int64_t i = 0; i < n; ++i) {
                    const double contrib = is_add ? g[i] : g[i] * ta.data()[a_scalar ? 0 : i];
                    gb[b_scalar ? 0 : i] += contrib;
                }
            }
        });
    }
    return out;
}

Tensor Graph::add(const Tensor& a, const Tensor& b) { return binary_pointwise(a, b, true, "add"); }
Tensor Graph::mul(const Tensor& a, const Tensor& b) { return binary_pointwise(a, b, false, "mul"); }

Tensor Graph::scale(const Tensor& x, double c) {
    Tensor out = Tensor::zeros(x.shape());
    auto px = x.data();
    auto po = out.data();
    for (int64_t i = 0; i < x.numel(); ++i) po[i] = px[i] * c;
    if (track({&x})) {
        out.set_requires_grad(true);
        Tensor tx = x, to = out;
        record([tx, to, c]() mutable {
            auto g = to.grad();
            auto gx = tx.grad();
            for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * c;
        });
    }
    return out;
}

namespace {

double sigmoid_stable(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

double softplus_stable(double x) {
    // ln(1+e^x); linear asymptote for large x, e^x branch for very negative x.
    if (x > 30.0) return x + std::log1p(std::exp(-x));
    if (x < -30.0) return std::exp(x);
    return std::log1p(std::exp(x));
}

}  // namespace

Tensor Graph::silu(const Tensor& x) {
    Tensor out = Tensor::zeros(x.shape());
    auto px = x.data();
    auto po = out.data();
    for (int64_t i = 0; i < x.numel(); ++i) po[i] = px[i] * sigmoid_stable(px[i]);
    if (track({&x})) {
        out.set_requires_grad(true);
        Tensor tx = x, to = out;
        const double fault = grad_fault("silu");
        record([tx, to, fault]() mutable {
            auto g = to.grad();
            auto gx = tx.grad();
            auto px = tx.data();
            for (size_t i = 0; i < g.size(); ++i) {
                const double s = sigmoid_stable(px[i]);
                gx[i] += fault * g[i] * s * (1.0 + px[i] * (1.0 - s));
            }
        });
    }
    return out;
}

Tensor Graph::sigmoid(const Tensor& x) {
    Tensor out = Tensor::zeros(x.shape());
    auto px = x.data();
    auto po = out.data();
    for (int64_t i = 0; i < x.numel(); ++i) po[i] = sigmoid_stable(px[i]);
    if (track({&x})) {
        out.set_requires_grad(true);
        Tensor tx = x, to = out;
        record([tx, to]() mutable {
            auto g = to.grad();
            auto gx = tx.grad();
            auto po = to.data();
            for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * po[i] * (1.0 - po[i]);
        });
    }
    return out;
}

Tensor Graph::softplus(const Tensor& x) {
    Tensor out = Tensor::zeros(x.shape());
    auto px = x.data();
    auto po = out.data();
    for (int64_t i = 0; i < x.numel(); ++i) po[i] = softplus_stable(px[i]);
    if (track({&x})) {
        out.set_requires_grad(true);
        Tensor tx = x, to = out;
        record([tx, to]() mutable {
            auto g = to.grad();
            auto gx = tx.grad();
            auto px = tx.data();
            for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * sigmoid_stable(px[i]);
        });
    }
    return out;
}

Tensor Graph::exp(const Tensor& x) {
    Tensor out = Tensor::zeros(x.shape());
    auto px = x.data();
    auto po = out.data();
    for (int64_t i = 0; i < x.numel(); ++i) po[i] = std::exp(px[i]);
    if (track({&x})) {
        out.set_requires_grad(true);
        Tensor tx = x, to = out;
        record([tx, to]() mutable {
            auto g = to.grad();
            auto gx = tx.grad();
            auto po = to.data();
            for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * po[i];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// linear algebra

static void require_matrix(const Tensor& t, const char* who) {
    if (t.rank() != 2)
        throw DimensionError(std::string(who) + " expects a matrix, got " + shape_str(t.shape()));
}

Tensor Graph::matmul(const Tensor& a, const Tensor& b) {
    require_matrix(a, "matmul");
    require_matrix(b, "matmul");
    const int m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
    if (k != k2)
        throw DimensionError("matmul: inner dims differ, " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    Tensor out = Tensor::zeros({m, n});
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    double* po = out.data().data();
    for (int i = 0; i < m; ++i) {
        double* orow = po + static_cast<int64_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const double av = pa[static_cast<int64_t>(i) * k + p];
            const double* brow = pb + static_cast<int64_t>(p) * n;
            for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    if (track({&a, &b})) {
        out.set_requires_grad(true);
        Tensor ta = a, tb = b, to = out;
        const double fault = grad_fault("matmul");
        record([ta, tb, to, m, k, n, fault]() mutable {
            const double* g = to.grad().data();
            if (ta.requires_grad()) {
                double* ga = ta.grad().data();
                const double* pb = tb.data().data();
                // ga += g . b^T
                for (int i = 0; i < m; ++i)
                    for (int p = 0; p < k; ++p) {
                        double acc = 0.0;
                        const double* grow = g + static_cast<int64_t>(i) * n;
                        const double* brow = pb + static_cast<int64_t>(p) * n;
                        for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
                        ga[static_cast<int64_t>(i) * k + p] += fault * acc;
                    }
            }
            if (tb.requires_grad()) {
                double* gb = tb.grad().data();
                const double* pa = ta.data().data();
                // gb += a^T . g
                for (int p = 0; p < k; ++p)
                    for (int i = 0; i < m; ++i) {
                        const double av = pa[static_cast<int64_t>(i) * k + p];
                        const double* grow = g + static_cast<int64_t>(i) * n;
                        double* brow = gb + static_cast<int64_t>(p) * n;
                        for (int j = 0; j < n; ++j) brow[j] += fault * av * grow[j];
                    }
            }
        });
    }
    return out;
}

Tensor Graph::linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    Tensor out = matmul(x, w);
    if (!b.defined()) return out;
    const int n = w.dim(1);
    if (b.rank() != 1 || b.dim(0) != n)
        throw DimensionError("linear: bias " + shape_str(b.shape()) + " does not match width " +
                             std::to_string(n));
    const int m = out.dim(0);
    double* po = out.data().data();
    const double* pb = b.data().data();
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) po[static_cast<int64_t>(i) * n + j] += pb[j];
    if (track({&b})) {
        out.set_requires_grad(true);
        Tensor tb = b, to = out;
        record([tb, to, m, n]() mutable {
            if (!tb.requires_grad()) return;
            const double* g = to.grad().data();
            double* gb = tb.grad().data();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) gb[j] += g[static_cast<int64_t>(i) * n + j];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// sequence ops

Tensor Graph::conv1d(const Tensor& x, const Tensor& kernel, const Tensor& bias) {
    require_matrix(x, "conv1d");
    if (kernel.rank() != 3)
        throw DimensionError("conv1d kernel must be [w,Cin,Cout], got " +
                             shape_str(kernel.shape()));
    const int w = kernel.dim(0), cin = kernel.dim(1), cout = kernel.dim(2);
    if (w % 2 == 0)
        throw ConfigError("conv1d: even kernel width " + std::to_string(w) +
                          " cannot preserve length with same-padding");
    if (x.dim(1) != cin)
        throw DimensionError("conv1d: input channels " + shape_str(x.shape()) +
                             " do not match kernel " + shape_str(kernel.shape()));
    if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != cout))
        throw DimensionError("conv1d: bias " + shape_str(bias.shape()) + " wants [" +
                             std::to_string(cout) + "]");
    const int L = x.dim(0), r = w / 2;
    Tensor out = Tensor::zeros({L, cout});
    const double* px = x.data().data();
    const double* pk = kernel.data().data();
    double* po = out.data().data();
    for (int t = 0; t < L; ++t) {
        double* orow = po + static_cast<int64_t>(t) * cout;
        if (bias.defined())
            for (int o = 0; o < cout; ++o) orow[o] = bias.data()[o];
        for (int dt = -r; dt <= r; ++dt) {
            const int s = t + dt;
            if (s < 0 || s >= L) continue;
            const double* xrow = px + static_cast<int64_t>(s) * cin;
            const double* kslab = pk + static_cast<int64_t>(dt + r) * cin * cout;
            for (int i = 0; i < cin; ++i) {
                const double xv = xrow[i];
                const double* krow = kslab + static_cast<int64_t>(i) * cout;
                for (int o = 0; o < cout; ++o) orow[o] += xv * krow[o];
            }
        }
    }
    if (track({&x, &kernel, bias.defined() ? &bias : &x})) {
        out.set_requires_grad(true);
        Tensor tx = x, tk = kernel, tb = bias, to = out;
        record([tx, tk, tb, to, L, w, cin, cout, r]() mutable {
            const double* g = to.grad().data();
            const bool need_x = tx.requires_grad();
            const bool need_k = tk.requires_grad();
            double* gx = need_x ? tx.grad().data() : nullptr;
            double* gk = need_k ? tk.grad().data() : nullptr;
            const double* px = tx.data().data();
            const double* pk = tk.data().data();
            for (int t = 0; t < L; ++t) {
                const double* grow = g + static_cast<int64_t>(t) * cout;
                for (int dt = -r; dt <= r; ++dt) {
                    const int s = t + dt;
                    if (s < 0 || s >= L) continue;
                    const double* kslab = pk + static_cast<int64_t>(dt + r) * cin * cout;
                    for (int i = 0; i < cin; ++i) {
                        const double* krow = kslab + static_cast<int64_t>(i) * cout;
                        if (need_x) {
                            double acc = 0.0;
                            for (int o = 0; o < cout; ++o) acc += grow[o] * krow[o];
                            gx[static_cast<int64_t>(s) * cin + i] += acc;
                        }
                        if (need_k) {
                            const double xv = px[static_cast<int64_t>(s) * cin + i];
                            double* gkrow =
                                gk + static_cast<int64_t>(dt + r) * cin * cout +
                                static_cast<int64_t>(i) * cout;
                            for (int o = 0; o < cout; ++o) gkrow[o] += xv * grow[o];
                        }
                    }
                }
            }
            if (tb.defined() && tb.requires_grad()) {
                double* gb = tb.grad().data();
                for (int t = 0; t < L; ++t)
                    for (int o = 0; o < cout; ++o)
                        gb[o] += g[static_cast<int64_t>(t) * cout + o];
            }
        });
    }
    return out;
}

Tensor Graph::causal_depthwise_conv1d(const Tensor& x, const Tensor& kernel, const Tensor& bias) {
    require_matrix(x, "causal_depthwise_conv1d");
    require_matrix(kernel, "causal_depthwise_conv1d");
    const int L = x.dim(0), C = x.dim(1), w = kernel.dim(0);
    if (kernel.dim(1) != C)
        throw DimensionError("depthwise conv: channels " + shape_str(x.shape()) + " vs kernel " +
                             shape_str(kernel.shape()));
    if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != C))
        throw DimensionError("depthwise conv: bias " + shape_str(bias.shape()) + " wants [" +
                             std::to_string(C) + "]");
    Tensor out = Tensor::zeros({L, C});
    const double* px = x.data().data();
    const double* pk = kernel.data().data();
    double* po = out.data().data();
    for (int t = 0; t < L; ++t) {
        double* orow = po + static_cast<int64_t>(t) * C;
        if (bias.defined())
            for (int c = 0; c < C; ++c) orow[c] = bias.data()[c];
        for (int j = 0; j < w; ++j) {
            const int s = t - (w - 1) + j;
            if (s < 0) continue;
            const double* xrow = px + static_cast<int64_t>(s) * C;
            const double* krow = pk + static_cast<int64_t>(j) * C;
            for (int c = 0; c < C; ++c) orow[c] += xrow[c] * krow[c];
        }
    }
    if (track({&x, &kernel, bias.defined() ? &bias : &x})) {
        out.set_requires_grad(true);
        Tensor tx = x, tk = kernel, tb = bias, to = out;
        record([tx, tk, tb, to, L, C, w]() mutable {
            const double* g = to.grad().data();
            const bool need_x = tx.requires_grad();
            const bool need_k = tk.requires_grad();
            double* gx = need_x ? tx.grad().data() : nullptr;
            double* gk = need_k ? tk.grad().data() : nullptr;
            const double* px = tx.data().data();
            const double* pk = tk.data().data();
            for (int t = 0; t < L; ++t) {
                const double* grow = g + static_cast<int64_t>(t) * C;
                for (int j = 0; j < w; ++j) {
                    const int s = t - (w - 1) + j;
                    if (s < 0) continue;
                    if (need_x) {
                        double* gxrow = gx + static_cast<int64_t>(s) * C;
                        const double* krow = pk + static_cast<int64_t>(j) * C;
                        for (int c = 0; c < C; ++c) gxrow[c] += grow[c] * krow[c];
                    }
                    if (need_k) {
                        const double* xrow = px + static_cast<int64_t>(s) * C;
                        double* gkrow = gk + static_cast<int64_t>(j) * C;
                        for (int c = 0; c < C; ++c) gkrow[c] += grow[c] * xrow[c];
                    }
                }
            }
            if (tb.defined() && tb.requires_grad()) {
                double* gb = tb.grad().data();
                for (int t = 0; t < L; ++t)
                    for (int c = 0; c < C; ++c) gb[c] += g[static_cast<int64_t>(t) * C + c];
            }
        });
    }
    return out;
}

Tensor Graph::mean_pool_time(const Tensor& x) {
    require_matrix(x, "mean_pool_time");
    const int L = x.dim(0), C = x.dim(1);
    if (L < 1) throw DimensionError("mean_pool_time: empty sequence");
    Tensor out = Tensor::zeros({C});
    const double* px = x.data().data();
    double* po = out.data().data();
    for (int t = 0; t < L; ++t)
        for (int c = 0; c < C; ++c) po[c] += px[static_cast<int64_t>(t) * C + c];
    for (int c = 0; c < C; ++c) po[c] /= L;
    if (track({&x})) {
        out.set_requires_grad(true);
        Tensor tx = x, to = out;
        record([tx, to, L, C]() mutable {
            const double* g = to.grad().data();
            double* gx = tx.grad().data();
            for (int t = 0; t < L; ++t)
                for (int c = 0; c < C; ++c) gx[static_cast<int64_t>(t) * C + c] += g[c] / L;
        });
    }
    return out;
}

Tensor Graph::softmax(const Tensor& x) {
    if (x.rank() != 1)
        throw DimensionError("softmax expects a vector, got " + shape_str(x.shape()));
    const int n = x.dim(0);
    Tensor out = Tensor::zeros({n});
    const double* px = x.data().data();
    double* po = out.data().data();
    double mx = px[0];
    for (int i = 1; i < n; ++i) mx = std::max(mx, px[i]);
    double z = 0.0;
    for (int i = 0; i < n; ++i) {
        po[i] = std::exp(px[i] - mx);
        z += po[i];
    }
    for (int i = 0; i < n; ++i) po[i] /= z;
    if (track({&x})) {
        out.set_requires_grad(true);
        Tensor tx = x, to = out;
        const double fault = grad_fault("softmax");
        record([tx, to, n, fault]() mutable {
            const double* g = to.grad().data();
            const double* s = to.data().data();
            double* gx = tx.grad().data();
            double dot = 0.0;
            for (int i = 0; i < n; ++i) dot += g[i] * s[i];
            for (int i = 0; i < n; ++i) gx[i] += fault * s[i] * (g[i] - dot);
        });
    }
    return out;
}

Tensor Graph::layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    require_matrix(x, "layer_norm");
    const int L = x.dim(0), C = x.dim(1);
    if (gamma.rank() != 1 || gamma.dim(0) != C || beta.rank() != 1 || beta.dim(0) != C)
        throw DimensionError("layer_norm: scale/shift must be [" + std::to_string(C) + "], got " +
                             shape_str(gamma.shape()) + " and " + shape_str(beta.shape()));
    Tensor out = Tensor::zeros({L, C});
    std::vector<double> inv_std(L), xhat(static_cast<size_t>(L) * C);
    const double* px = x.data().data();
    const double* pg = gamma.data().data();
    const double* pb = beta.data().data();
    double* po = out.data().data();
    for (int t = 0; t < L; ++t) {
        const double* row = px + static_cast<int64_t>(t) * C;
        double mean = 0.0;
        for (int c = 0; c < C; ++c) mean += row[c];
        mean /= C;
        double var = 0.0;
        for (int c = 0; c < C; ++c) {
            const double d = row[c] - mean;
            var += d * d;
        }
        var /= C;
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std[t] = is;
        for (int c = 0; c < C; ++c) {
            const double h = (row[c] - mean) * is;
            xhat[static_cast<size_t>(t) * C + c] = h;
            po[static_cast<int64_t>(t) * C + c] = h * pg[c] + pb[c];
        }
    }
    if (track({&x, &gamma, &beta})) {
        out.set_requires_grad(true);
        Tensor tx = x, tg = gamma, tb = beta, to = out;
        auto istd = std::make_shared<std::vector<double>>(std::move(inv_std));
        auto xh = std::make_shared<std::vector<double>>(std::move(xhat));
        record([tx, tg, tb, to, istd, xh, L, C]() mutable {
            const double* g = to.grad().data();
            const double* pg = tg.data().data();
            const bool need_x = tx.requires_grad();
            double* gx = need_x ? tx.grad().data() : nullptr;
            double* gg = tg.requires_grad() ? tg.grad().data() : nullptr;
            double* gb = tb.requires_grad() ? tb.grad().data() : nullptr;
            for (int t = 0; t < L; ++t) {
                const double* grow = g + static_cast<int64_t>(t) * C;
                const double* hrow = xh->data() + static_cast<size_t>(t) * C;
                if (gg || gb) {
                    for (int c = 0; c < C; ++c) {
                        if (gg) gg[c] += grow[c] * hrow[c];
                        if (gb) gb[c] += grow[c];
                    }
                }
                if (need_x) {
                    double sum_dy = 0.0, sum_dy_h = 0.0;
                    for (int c = 0; c < C; ++c) {
                        const double dy = grow[c] * pg[c];
                        sum_dy += dy;
                        sum_dy_h += dy * hrow[c];
                    }
                    const double is = (*istd)[t];
                    for (int c = 0; c < C; ++c) {
                        const double dy = grow[c] * pg[c];
                        gx[static_cast<int64_t>(t) * C + c] +=
                            is * (dy - sum_dy / C - hrow[c] * sum_dy_h / C);
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// structure

Tensor Graph::concat(const std::vector<Tensor>& xs, int axis) {
    if (xs.empty()) throw DimensionError("concat of zero tensors");
    const int rank = xs[0].rank();
    if (axis < 0 || axis >= rank)
        throw DimensionError("concat axis " + std::to_string(axis) + " out of rank " +
                             std::to_string(rank));
    Shape out_shape = xs[0].shape();
    for (size_t i = 1; i < xs.size(); ++i) {
        const Shape& s = xs[i].shape();
        if (static_cast<int>(s.size()) != rank)
            throw DimensionError("concat: rank mismatch " + shape_str(s) + " vs " +
                                 shape_str(out_shape));
        for (int d = 0; d < rank; ++d) {
            if (d == axis) continue;
            if (s[d] != out_shape[d])
                throw DimensionError("concat: non-axis dims differ, " + shape_str(s) + " vs " +
                                     shape_str(xs[0].shape()));
        }
        out_shape[axis] += s[axis];
    }
    Tensor out = Tensor::zeros(out_shape);
    // outer = product of dims before axis, inner = product after
    int64_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= out_shape[d];
    for (int d = axis + 1; d < rank; ++d) inner *= out_shape[d];
    const int64_t out_axis_stride = static_cast<int64_t>(out_shape[axis]) * inner;
    double* po = out.data().data();
    int64_t offset = 0;
    bool any_grad = false;
    for (const Tensor& x : xs) {
        const int64_t ax = x.dim(axis);
        const double* px = x.data().data();
        for (int64_t u = 0; u < outer; ++u)
            std::memcpy(po + u * out_axis_stride + offset * inner, px + u * ax * inner,
                        static_cast<size_t>(ax) * inner * sizeof(double));
        offset += ax;
        any_grad = any_grad || x.requires_grad();
    }
    if (recording_ && any_grad) {
        out.set_requires_grad(true);
        std::vector<Tensor> txs = xs;
        Tensor to = out;
        record([txs, to, outer, inner, out_axis_stride, axis]() mutable {
            const double* g = to.grad().data();
            int64_t offset = 0;
            for (Tensor& x : txs) {
                const int64_t ax = x.dim(axis);
                if (x.requires_grad()) {
                    double* gx = x.grad().data();
                    for (int64_t u = 0; u < outer; ++u) {
                        const double* src = g + u * out_axis_stride + offset * inner;
                        double* dst = gx + u * ax * inner;
                        for (int64_t i = 0; i < ax * inner; ++i) dst[i] += src[i];
                    }
                }
                offset += ax;
            }
        });
    }
    return out;
}

Tensor Graph::slice_cols(const Tensor& x, int c0, int c1) {
    require_matrix(x, "slice_cols");
    const int L = x.dim(0), C = x.dim(1);
    if (c0 < 0 || c1 > C || c0 >= c1)
        throw DimensionError("slice_cols [" + std::to_string(c0) + "," + std::to_string(c1) +
                             ") out of width " + std::to_string(C));
    const int W = c1 - c0;
    Tensor out = Tensor::zeros({L, W});
    const double* px = x.data().data();
    double* po = out.data().data();
    for (int t = 0; t < L; ++t)
        std::memcpy(po + static_cast<int64_t>(t) * W, px + static_cast<int64_t>(t) * C + c0,
                    static_cast<size_t>(W) * sizeof(double));
    if (track({&x})) {
        out.set_requires_grad(true);
        Tensor tx = x, to = out;
        record([tx, to, L, C, W, c0]() mutable {
            const double* g = to.grad().data();
            double* gx = tx.grad().data();
            for (int t = 0; t < L; ++t)
                for (int j = 0; j < W; ++j)
                    gx[static_cast<int64_t>(t) * C + c0 + j] += g[static_cast<int64_t>(t) * W + j];
        });
    }
    return out;
}

Tensor Graph::select(const Tensor& x, int64_t index) {
    if (index < 0 || index >= x.numel())
        throw DimensionError("select index " + std::to_string(index) + " out of numel " +
                             std::to_string(x.numel()));
    Tensor out = Tensor::scalar(x.data()[static_cast<size_t>(index)]);
    if (track({&x})) {
        out.set_requires_grad(true);
        Tensor tx = x, to = out;
        record([tx, to, index]() mutable {
            tx.grad()[static_cast<size_t>(index)] += to.grad()[0];
        });
    }
    return out;
}

Tensor Graph::reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.numel())
        throw DimensionError("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape) +
                             " changes element count");
    Tensor out = Tensor::zeros(shape);
    std::memcpy(out.data().data(), x.data().data(), static_cast<size_t>(x.numel()) * sizeof(double));
    if (track({&x})) {
        out.set_requires_grad(true);
        Tensor tx = x, to = out;
        record([tx, to]() mutable {
            const double* g = to.grad().data();
            double* gx = tx.grad().data();
            for (int64_t i = 0; i < tx.numel(); ++i) gx[i] += g[i];
        });
    }
    return out;
}

Tensor Graph::sum(const Tensor& x) {
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    Tensor out = Tensor::scalar(acc);
    if (track({&x})) {
        out.set_requires_grad(true);
        Tensor tx = x, to = out;
        record([tx, to]() mutable {
            const double g = to.grad()[0];
            auto gx = tx.grad();
            for (size_t i = 0; i < gx.size(); ++i) gx[i] += g;
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// finite-difference checker

GradCheckResult grad_check(const std::function<Tensor(Graph&)>& f, std::span<Tensor> params,
                           double h) {
    if (h <= 0.0) throw ContractError("grad_check: step must be positive");
    for (Tensor& p : params) p.zero_grad();
    Graph g;
    Tensor loss = f(g);
    if (loss.numel() != 1) throw ContractError("grad_check: f must produce a scalar");
    g.backward(loss);

    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (Tensor& p : params) {
        auto gp = p.grad();
        analytic.emplace_back(gp.begin(), gp.end());
    }

    auto eval = [&]() {
        Graph fwd(false);  // forward only, no tape
        return f(fwd).item();
    };

    GradCheckResult result;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        Tensor& p = params[pi];
        auto pd = p.data();
        for (int64_t i = 0; i < p.numel(); ++i) {
            const double keep = pd[i];
            pd[i] = keep + h;
            const double up = eval();
            pd[i] = keep - h;
            const double down = eval();
            pd[i] = keep;
            const double numeric = (up - down) / (2.0 * h);
            const double exact = analytic[pi][static_cast<size_t>(i)];
            const double scale = std::max({1.0, std::fabs(exact), std::fabs(numeric)});
            const double err = std::fabs(exact - numeric) / scale;
            if (err > result.max_rel_err) {
                result.max_rel_err = err;
                result.worst_param = pi;
                result.worst_coord = i;
            }
        }
    }
    return result;
}

double reduce_canonical(std::span<double> values) {
    std::sort(values.begin(), values.end());
    double acc = 0.0;
    for (double v : values) acc += v;
    return acc;
}

}  // namespace caf
