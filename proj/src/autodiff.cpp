#include "aimsim/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "aimsim/core_types.hpp"
#include "aimsim/errors.hpp"

namespace aimsim::ad {

namespace {

std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        out += (i ? "," : "") + std::to_string(s[i]);
    }
    return out + "]";
}

void require(bool cond, const char* op, const std::string& what) {
    if (!cond) {
        throw ContractError(std::string(op) + ": " + what);
    }
}

// Broadcast helper for binary elementwise ops.
struct Broadcast {
    int n;
    bool a_scalar;
    bool b_scalar;
    Shape shape;
};

Broadcast broadcast(const Tensor& a, const Tensor& b, const char* op) {
    if (a.numel() == b.numel()) {
        return {a.numel(), false, false, a.shape().size() >= b.shape().size() ? a.shape() : b.shape()};
    }
    if (a.numel() == 1) return {b.numel(), true, false, b.shape()};
    if (b.numel() == 1) return {a.numel(), false, true, a.shape()};
    throw ContractError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                        shape_str(b.shape()));
}

// Elementwise unary op given value and derivative-from-(x, y) functions.
template <class F, class D>
Tensor unary(const Tensor& a, F f, D dfdx) {
    std::vector<double> out(static_cast<std::size_t>(a.numel()));
    auto x = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i]);
    auto result_vals = out;
    return Tape::record(a.shape(), std::move(out), {&a},
                        [a, y = std::move(result_vals), dfdx](std::span<const double> g, GradSink& sink) {
                            auto ga = sink(a);
                            if (ga.empty()) return;
                            auto xv = a.data();
                            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * dfdx(xv[i], y[i]);
                        });
}

}  // namespace

int shape_numel(const Shape& shape) {
    int n = 1;
    for (int d : shape) {
        if (d < 0) throw ContractError("negative dimension in shape " + shape_str(shape));
        n *= d;
    }
    return n;
}

Tensor::Tensor() : shape_{1}, data_(std::make_shared<const std::vector<double>>(1, 0.0)) {}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)) {
    if (shape_numel(shape_) != static_cast<int>(values.size())) {
        throw ContractError("Tensor: data length " + std::to_string(values.size()) + " does not match shape " +
                            shape_str(shape_));
    }
    data_ = std::make_shared<const std::vector<double>>(std::move(values));
}

Tensor Tensor::scalar(double value) { return Tensor({1}, {value}); }

Tensor Tensor::zeros(Shape shape) {
    const int n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), 0.0));
}

Tensor Tensor::vector(std::vector<double> values) {
    const int n = static_cast<int>(values.size());
    return Tensor({n}, std::move(values));
}

double Tensor::item() const {
    if (numel() != 1) throw ContractError("item: tensor has " + std::to_string(numel()) + " elements");
    return (*data_)[0];
}

Tensor Tensor::detach() const {
    Tensor t = *this;
    t.tape_ = nullptr;
    t.node_ = -1;
    return t;
}

std::span<double> GradSink::operator()(const Tensor& input) {
    if (input.tape() == nullptr) return {};
    if (input.tape() != &tape_) throw ContractError("backward: tensor from a different tape");
    auto& g = grads_[static_cast<std::size_t>(input.node())];
    if (g.empty()) g.assign(static_cast<std::size_t>(tape_.node_numel(input.node())), 0.0);
    return g;
}

std::vector<double> Gradients::of(const Tensor& t) const {
    if (t.tape() == nullptr || t.tape() != tape_) {
        return std::vector<double>(static_cast<std::size_t>(t.numel()), 0.0);
    }
    const auto& g = grads_[static_cast<std::size_t>(t.node())];
    if (g.empty()) return std::vector<double>(static_cast<std::size_t>(t.numel()), 0.0);
    return g;
}

Tensor Tape::leaf(const Tensor& value) {
    Tensor t = value.detach();
    t.tape_ = this;
    t.node_ = static_cast<int>(nodes_.size());
    nodes_.push_back(Node{t.numel(), {}});
    return t;
}

Tensor Tape::record(Shape shape, std::vector<double> values, std::initializer_list<const Tensor*> inputs,
                    BackwardFn backward) {
    return record(std::move(shape), std::move(values), std::vector<const Tensor*>(inputs), std::move(backward));
}

Tensor Tape::record(Shape shape, std::vector<double> values, const std::vector<const Tensor*>& inputs,
                    BackwardFn backward) {
    for (double v : values) {
        if (!std::isfinite(v)) throw NumericError("non-finite value produced by a tensor op");
    }
    Tape* tape = nullptr;
    for (const Tensor* in : inputs) {
        if (in->tape() == nullptr) continue;
        if (tape != nullptr && tape != in->tape()) throw ContractError("op mixes tensors from different tapes");
        tape = in->tape();
    }
    Tensor t(std::move(shape), std::move(values));
    if (tape != nullptr) {
        t.tape_ = tape;
        t.node_ = static_cast<int>(tape->nodes_.size());
        tape->nodes_.push_back(Node{t.numel(), std::move(backward)});
    }
    return t;
}

Gradients Tape::backward(const Tensor& loss) const {
    if (loss.numel() != 1) throw ContractError("backward: loss must be a single element");
    if (loss.tape() != this) throw ContractError("backward: loss is not recorded on this tape");
    Gradients out;
    out.tape_ = this;
    out.grads_.resize(nodes_.size());
    out.grads_[static_cast<std::size_t>(loss.node())] = {1.0};
    GradSink sink(out.grads_, *this);
    for (int i = loss.node(); i >= 0; --i) {
        const auto& node = nodes_[static_cast<std::size_t>(i)];
        if (!node.backward) continue;
        // The sink only allocates buffers of earlier nodes, so this reference stays valid.
        const auto& g = out.grads_[static_cast<std::size_t>(i)];
        if (g.empty()) continue;
        node.backward(g, sink);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Elementwise binary ops

Tensor add(const Tensor& a, const Tensor& b) {
    auto bc = broadcast(a, b, "add");
    std::vector<double> out(static_cast<std::size_t>(bc.n));
    auto x = a.data();
    auto y = b.data();
    for (int i = 0; i < bc.n; ++i) out[i] = x[bc.a_scalar ? 0 : i] + y[bc.b_scalar ? 0 : i];
    return Tape::record(bc.shape, std::move(out), {&a, &b}, [a, b, bc](std::span<const double> g, GradSink& sink) {
        if (auto ga = sink(a); !ga.empty())
            for (int i = 0; i < bc.n; ++i) ga[bc.a_scalar ? 0 : i] += g[i];
        if (auto gb = sink(b); !gb.empty())
            for (int i = 0; i < bc.n; ++i) gb[bc.b_scalar ? 0 : i] += g[i];
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    auto bc = broadcast(a, b, "sub");
    std::vector<double> out(static_cast<std::size_t>(bc.n));
    auto x = a.data();
    auto y = b.data();
    for (int i = 0; i < bc.n; ++i) out[i] = x[bc.a_scalar ? 0 : i] - y[bc.b_scalar ? 0 : i];
    return Tape::record(bc.shape, std::move(out), {&a, &b}, [a, b, bc](std::span<const double> g, GradSink& sink) {
        if (auto ga = sink(a); !ga.empty())
            for (int i = 0; i < bc.n; ++i) ga[bc.a_scalar ? 0 : i] += g[i];
        if (auto gb = sink(b); !gb.empty())
            for (int i = 0; i < bc.n; ++i) gb[bc.b_scalar ? 0 : i] -= g[i];
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    auto bc = broadcast(a, b, "mul");
    std::vector<double> out(static_cast<std::size_t>(bc.n));
    auto x = a.data();
    auto y = b.data();
    for (int i = 0; i < bc.n; ++i) out[i] = x[bc.a_scalar ? 0 : i] * y[bc.b_scalar ? 0 : i];
    return Tape::record(bc.shape, std::move(out), {&a, &b}, [a, b, bc](std::span<const double> g, GradSink& sink) {
        auto x = a.data();
        auto y = b.data();
        if (auto ga = sink(a); !ga.empty())
            for (int i = 0; i < bc.n; ++i) ga[bc.a_scalar ? 0 : i] += g[i] * y[bc.b_scalar ? 0 : i];
        if (auto gb = sink(b); !gb.empty())
            for (int i = 0; i < bc.n; ++i) gb[bc.b_scalar ? 0 : i] += g[i] * x[bc.a_scalar ? 0 : i];
    });
}

Tensor div(const Tensor& a, const Tensor& b) {
    auto bc = broadcast(a, b, "div");
    std::vector<double> out(static_cast<std::size_t>(bc.n));
    auto x = a.data();
    auto y = b.data();
    for (int i = 0; i < bc.n; ++i) out[i] = x[bc.a_scalar ? 0 : i] / y[bc.b_scalar ? 0 : i];
    return Tape::record(bc.shape, std::move(out), {&a, &b}, [a, b, bc](std::span<const double> g, GradSink& sink) {
        auto x = a.data();
        auto y = b.data();
        if (auto ga = sink(a); !ga.empty())
            for (int i = 0; i < bc.n; ++i) ga[bc.a_scalar ? 0 : i] += g[i] / y[bc.b_scalar ? 0 : i];
        if (auto gb = sink(b); !gb.empty())
            for (int i = 0; i < bc.n; ++i) {
                const double yi = y[bc.b_scalar ? 0 : i];
                gb[bc.b_scalar ? 0 : i] -= g[i] * x[bc.a_scalar ? 0 : i] / (yi * yi);
            }
    });
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor scale(const Tensor& a, double s) {
    return unary(a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& a, double s) {
    return unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

// ---------------------------------------------------------------------------
// Unary math

Tensor sin(const Tensor& a) {
    return unary(a, [](double x) { return std::sin(x); }, [](double x, double) { return std::cos(x); });
}
Tensor cos(const Tensor& a) {
    return unary(a, [](double x) { return std::cos(x); }, [](double x, double) { return -std::sin(x); });
}
Tensor tan(const Tensor& a) {
    return unary(a, [](double x) { return std::tan(x); }, [](double, double y) { return 1.0 + y * y; });
}
Tensor atan(const Tensor& a) {
    return unary(a, [](double x) { return std::atan(x); }, [](double x, double) { return 1.0 / (1.0 + x * x); });
}
Tensor tanh(const Tensor& a) {
    return unary(a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}
Tensor sigmoid(const Tensor& a) {
    return unary(
        a,
        [](double x) {
            return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
        },
        [](double, double y) { return y * (1.0 - y); });
}
Tensor exp(const Tensor& a) {
    return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}
Tensor log(const Tensor& a) {
    return unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}
Tensor relu(const Tensor& a) {
    return unary(a, [](double x) { return x > 0 ? x : 0.0; }, [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}
Tensor square(const Tensor& a) {
    return unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
    require(lo <= hi, "clamp", "lo > hi");
    return unary(
        a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
        [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

Tensor wrap_angle(const Tensor& a) {
    return unary(a, [](double x) { return normalize_angle(x); }, [](double, double) { return 1.0; });
}

// ---------------------------------------------------------------------------
// Reductions and reshaping

Tensor sum(const Tensor& a) {
    auto x = a.data();
    const double s = std::accumulate(x.begin(), x.end(), 0.0);
    return Tape::record({1}, {s}, {&a}, [a](std::span<const double> g, GradSink& sink) {
        if (auto ga = sink(a); !ga.empty())
            for (double& v : ga) v += g[0];
    });
}

Tensor mean(const Tensor& a) {
    require(a.numel() > 0, "mean", "empty tensor");
    return scale(sum(a), 1.0 / a.numel());
}

Tensor concat(const std::vector<Tensor>& parts) {
    std::vector<double> out;
    std::vector<const Tensor*> inputs;
    for (const auto& p : parts) {
        out.insert(out.end(), p.data().begin(), p.data().end());
        inputs.push_back(&p);
    }
    const int n = static_cast<int>(out.size());
    return Tape::record({n}, std::move(out), inputs, [parts](std::span<const double> g, GradSink& sink) {
        std::size_t off = 0;
        for (const auto& p : parts) {
            if (auto gp = sink(p); !gp.empty())
                for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g[off + i];
            off += static_cast<std::size_t>(p.numel());
        }
    });
}

Tensor slice(const Tensor& a, int start, int count) {
    require(start >= 0 && count >= 0 && start + count <= a.numel(), "slice", "range out of bounds");
    std::vector<double> out(a.data().begin() + start, a.data().begin() + start + count);
    return Tape::record({count}, std::move(out), {&a}, [a, start](std::span<const double> g, GradSink& sink) {
        if (auto ga = sink(a); !ga.empty())
            for (std::size_t i = 0; i < g.size(); ++i) ga[static_cast<std::size_t>(start) + i] += g[i];
    });
}

Tensor reshape(const Tensor& a, Shape shape) {
    require(shape_numel(shape) == a.numel(), "reshape", "element count mismatch " + shape_str(a.shape()) + " -> " +
                                                             shape_str(shape));
    std::vector<double> out(a.data().begin(), a.data().end());
    return Tape::record(std::move(shape), std::move(out), {&a}, [a](std::span<const double> g, GradSink& sink) {
        if (auto ga = sink(a); !ga.empty())
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
}

Tensor gather(const Tensor& a, std::vector<int> indices) {
    std::vector<double> out(indices.size());
    auto x = a.data();
    for (std::size_t i = 0; i < indices.size(); ++i) {
        require(indices[i] >= 0 && indices[i] < a.numel(), "gather", "index out of range");
        out[i] = x[static_cast<std::size_t>(indices[i])];
    }
    const int n = static_cast<int>(out.size());
    return Tape::record({n}, std::move(out), {&a},
                        [a, idx = std::move(indices)](std::span<const double> g, GradSink& sink) {
                            if (auto ga = sink(a); !ga.empty())
                                for (std::size_t i = 0; i < idx.size(); ++i)
                                    ga[static_cast<std::size_t>(idx[i])] += g[i];
                        });
}

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
    require(a.shape().size() == 2, "matmul", "lhs must be 2-D, got " + shape_str(a.shape()));
    const int m = a.dim(0);
    const int k = a.dim(1);
    const bool vec = b.shape().size() == 1;
    require(vec || b.shape().size() == 2, "matmul", "rhs must be 1-D or 2-D");
    require(b.dim(0) == k, "matmul", "inner dimension mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    const int n = vec ? 1 : b.dim(1);
    std::vector<double> out(static_cast<std::size_t>(m) * n, 0.0);
    auto A = a.data();
    auto B = b.data();
    for (int i = 0; i < m; ++i) {
        for (int p = 0; p < k; ++p) {
            const double aip = A[i * k + p];
            if (aip == 0.0) continue;
            for (int j = 0; j < n; ++j) out[i * n + j] += aip * B[p * n + j];
        }
    }
    Shape shape = vec ? Shape{m} : Shape{m, n};
    return Tape::record(std::move(shape), std::move(out), {&a, &b},
                        [a, b, m, k, n](std::span<const double> g, GradSink& sink) {
                            auto A = a.data();
                            auto B = b.data();
                            if (auto ga = sink(a); !ga.empty()) {
                                for (int i = 0; i < m; ++i)
                                    for (int p = 0; p < k; ++p) {
                                        double acc = 0.0;
                                        for (int j = 0; j < n; ++j) acc += g[i * n + j] * B[p * n + j];
                                        ga[i * k + p] += acc;
                                    }
                            }
                            if (auto gb = sink(b); !gb.empty()) {
                                for (int i = 0; i < m; ++i)
                                    for (int p = 0; p < k; ++p) {
                                        const double aip = A[i * k + p];
                                        for (int j = 0; j < n; ++j) gb[p * n + j] += aip * g[i * n + j];
                                    }
                            }
                        });
}

// ---------------------------------------------------------------------------
// Images

Tensor bilinear_sample(const Tensor& image, const Tensor& coords) {
    require(image.shape().size() == 3, "bilinear_sample", "image must be [H,W,C]");
    require(coords.shape().size() == 2 && coords.dim(1) == 2, "bilinear_sample", "coords must be [P,2]");
    const int H = image.dim(0);
    const int W = image.dim(1);
    const int C = image.dim(2);
    const int P = coords.dim(0);
    require(H > 0 && W > 0, "bilinear_sample", "empty image");

    // Per-point lattice cell and weights, shared by forward and backward.
    struct Tap {
        int x0, x1, y0, y1;
        double fx, fy;
        bool clamp_x, clamp_y;
    };
    std::vector<Tap> taps(static_cast<std::size_t>(P));
    auto cd = coords.data();
    auto img = image.data();
    std::vector<double> out(static_cast<std::size_t>(P) * C);
    for (int p = 0; p < P; ++p) {
        double u = cd[2 * p];
        double v = cd[2 * p + 1];
        Tap t{};
        t.clamp_x = u <= 0.0 || u >= W - 1;
        t.clamp_y = v <= 0.0 || v >= H - 1;
        u = std::clamp(u, 0.0, static_cast<double>(W - 1));
        v = std::clamp(v, 0.0, static_cast<double>(H - 1));
        t.x0 = std::min(static_cast<int>(std::floor(u)), std::max(W - 2, 0));
        t.y0 = std::min(static_cast<int>(std::floor(v)), std::max(H - 2, 0));
        t.x1 = std::min(t.x0 + 1, W - 1);
        t.y1 = std::min(t.y0 + 1, H - 1);
        t.fx = u - t.x0;
        t.fy = v - t.y0;
        taps[p] = t;
        for (int c = 0; c < C; ++c) {
            const double v00 = img[(t.y0 * W + t.x0) * C + c];
            const double v01 = img[(t.y0 * W + t.x1) * C + c];
            const double v10 = img[(t.y1 * W + t.x0) * C + c];
            const double v11 = img[(t.y1 * W + t.x1) * C + c];
            out[p * C + c] = (1 - t.fy) * ((1 - t.fx) * v00 + t.fx * v01) + t.fy * ((1 - t.fx) * v10 + t.fx * v11);
        }
    }
    return Tape::record({P, C}, std::move(out), {&image, &coords},
                        [image, coords, taps = std::move(taps), W, C](std::span<const double> g, GradSink& sink) {
                            auto gi = sink(image);
                            auto gc = sink(coords);
                            auto img = image.data();
                            for (std::size_t p = 0; p < taps.size(); ++p) {
                                const Tap& t = taps[p];
                                for (int c = 0; c < C; ++c) {
                                    const double go = g[p * C + c];
                                    const int i00 = (t.y0 * W + t.x0) * C + c;
                                    const int i01 = (t.y0 * W + t.x1) * C + c;
                                    const int i10 = (t.y1 * W + t.x0) * C + c;
                                    const int i11 = (t.y1 * W + t.x1) * C + c;
                                    if (!gi.empty()) {
                                        gi[i00] += go * (1 - t.fy) * (1 - t.fx);
                                        gi[i01] += go * (1 - t.fy) * t.fx;
                                        gi[i10] += go * t.fy * (1 - t.fx);
                                        gi[i11] += go * t.fy * t.fx;
                                    }
                                    if (!gc.empty()) {
                                        if (!t.clamp_x)
                                            gc[2 * p] += go * ((1 - t.fy) * (img[i01] - img[i00]) +
                                                               t.fy * (img[i11] - img[i10]));
                                        if (!t.clamp_y)
                                            gc[2 * p + 1] += go * ((1 - t.fx) * (img[i10] - img[i00]) +
                                                                   t.fx * (img[i11] - img[i01]));
                                    }
                                }
                            }
                        });
}

Tensor hwc_to_chw(const Tensor& image) {
    require(image.shape().size() == 3, "hwc_to_chw", "image must be [H,W,C]");
    const int H = image.dim(0);
    const int W = image.dim(1);
    const int C = image.dim(2);
    std::vector<double> out(static_cast<std::size_t>(image.numel()));
    auto x = image.data();
    for (int y = 0; y < H; ++y)
        for (int xx = 0; xx < W; ++xx)
            for (int c = 0; c < C; ++c) out[(c * H + y) * W + xx] = x[(y * W + xx) * C + c];
    return Tape::record({C, H, W}, std::move(out), {&image},
                        [image, H, W, C](std::span<const double> g, GradSink& sink) {
                            if (auto gi = sink(image); !gi.empty())
                                for (int y = 0; y < H; ++y)
                                    for (int xx = 0; xx < W; ++xx)
                                        for (int c = 0; c < C; ++c)
                                            gi[(y * W + xx) * C + c] += g[(c * H + y) * W + xx];
                        });
}

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, int stride, int padding) {
    require(input.shape().size() == 3, "conv2d", "input must be [C,H,W], got " + shape_str(input.shape()));
    require(weight.shape().size() == 4, "conv2d", "weight must be [O,C,K,K]");
    require(stride > 0 && padding >= 0, "conv2d", "invalid stride/padding");
    const int C = input.dim(0);
    const int H = input.dim(1);
    const int W = input.dim(2);
    const int O = weight.dim(0);
    const int K = weight.dim(2);
    require(weight.dim(1) == C && weight.dim(3) == K, "conv2d",
            "weight " + shape_str(weight.shape()) + " incompatible with input " + shape_str(input.shape()));
    require(bias.numel() == O, "conv2d", "bias must have O elements");
    const int Ho = (H + 2 * padding - K) / stride + 1;
    const int Wo = (W + 2 * padding - K) / stride + 1;
    require(Ho > 0 && Wo > 0, "conv2d", "kernel larger than padded input");

    auto in = input.data();
    auto w = weight.data();
    auto b = bias.data();
    std::vector<double> out(static_cast<std::size_t>(O) * Ho * Wo);
    for (int o = 0; o < O; ++o) {
        for (int oy = 0; oy < Ho; ++oy) {
            for (int ox = 0; ox < Wo; ++ox) {
                double acc = b[o];
                for (int c = 0; c < C; ++c) {
                    for (int ky = 0; ky < K; ++ky) {
                        const int iy = oy * stride - padding + ky;
                        if (iy < 0 || iy >= H) continue;
                        const double* wrow = &w[((o * C + c) * K + ky) * K];
                        const double* irow = &in[(c * H + iy) * W];
                        for (int kx = 0; kx < K; ++kx) {
                            const int ix = ox * stride - padding + kx;
                            if (ix < 0 || ix >= W) continue;
                            acc += wrow[kx] * irow[ix];
                        }
                    }
                }
                out[(o * Ho + oy) * Wo + ox] = acc;
            }
        }
    }
    return Tape::record(
        {O, Ho, Wo}, std::move(out), {&input, &weight, &bias},
        [input, weight, bias, C, H, W, O, K, Ho, Wo, stride, padding](std::span<const double> g, GradSink& sink) {
            auto gin = sink(input);
            auto gw = sink(weight);
            auto gb = sink(bias);
            auto in = input.data();
            auto w = weight.data();
            for (int o = 0; o < O; ++o) {
                for (int oy = 0; oy < Ho; ++oy) {
                    for (int ox = 0; ox < Wo; ++ox) {
                        const double go = g[(o * Ho + oy) * Wo + ox];
                        if (go == 0.0) continue;
                        if (!gb.empty()) gb[o] += go;
                        for (int c = 0; c < C; ++c) {
                            for (int ky = 0; ky < K; ++ky) {
                                const int iy = oy * stride - padding + ky;
                                if (iy < 0 || iy >= H) continue;
                                const int wbase = ((o * C + c) * K + ky) * K;
                                const int ibase = (c * H + iy) * W;
                                for (int kx = 0; kx < K; ++kx) {
                                    const int ix = ox * stride - padding + kx;
                                    if (ix < 0 || ix >= W) continue;
                                    if (!gw.empty()) gw[wbase + kx] += go * in[ibase + ix];
                                    if (!gin.empty()) gin[ibase + ix] += go * w[wbase + kx];
                                }
                            }
                        }
                    }
                }
            }
        });
}

Tensor max_pool(const Tensor& input, int kernel, int stride) {
    require(input.shape().size() == 3, "max_pool", "input must be [C,H,W]");
    require(kernel > 0 && stride > 0, "max_pool", "invalid kernel/stride");
    const int C = input.dim(0);
    const int H = input.dim(1);
    const int W = input.dim(2);
    const int Ho = (H - kernel) / stride + 1;
    const int Wo = (W - kernel) / stride + 1;
    require(Ho > 0 && Wo > 0, "max_pool", "kernel larger than input");
    auto in = input.data();
    std::vector<double> out(static_cast<std::size_t>(C) * Ho * Wo);
    std::vector<int> argmax(out.size());
    for (int c = 0; c < C; ++c)
        for (int oy = 0; oy < Ho; ++oy)
            for (int ox = 0; ox < Wo; ++ox) {
                double best = -std::numeric_limits<double>::infinity();
                int best_i = -1;
                for (int ky = 0; ky < kernel; ++ky)
                    for (int kx = 0; kx < kernel; ++kx) {
                        const int i = (c * H + oy * stride + ky) * W + ox * stride + kx;
                        if (in[i] > best) {
                            best = in[i];
                            best_i = i;
                        }
                    }
                const int o = (c * Ho + oy) * Wo + ox;
                out[o] = best;
                argmax[o] = best_i;
            }
    return Tape::record({C, Ho, Wo}, std::move(out), {&input},
                        [input, am = std::move(argmax)](std::span<const double> g, GradSink& sink) {
                            if (auto gi = sink(input); !gi.empty())
                                for (std::size_t o = 0; o < am.size(); ++o) gi[static_cast<std::size_t>(am[o])] += g[o];
                        });
}

// ---------------------------------------------------------------------------
// Gaussian helpers

Tensor reparameterize(const Tensor& mu, const Tensor& log_sigma, const Tensor& noise) {
    require(mu.numel() == log_sigma.numel() && mu.numel() == noise.numel(), "reparameterize", "shape mismatch");
    return add(mu, mul(exp(log_sigma), noise.detach()));
}

Tensor kl_diag_gaussians(const Tensor& mu_q, const Tensor& log_sigma_q) {
    require(mu_q.numel() == log_sigma_q.numel(), "kl_diag_gaussians", "shape mismatch");
    const int n = mu_q.numel();
    auto m = mu_q.data();
    auto ls = log_sigma_q.data();
    double kl = 0.0;
    for (int i = 0; i < n; ++i) {
        // expm1 keeps the value exactly nonnegative near the prior.
        const double t = std::expm1(2.0 * ls[i]) - 2.0 * ls[i];
        kl += 0.5 * (t + m[i] * m[i]);
    }
    return Tape::record({1}, {kl}, {&mu_q, &log_sigma_q},
                        [mu_q, log_sigma_q](std::span<const double> g, GradSink& sink) {
                            auto m = mu_q.data();
                            auto ls = log_sigma_q.data();
                            if (auto gm = sink(mu_q); !gm.empty())
                                for (std::size_t i = 0; i < gm.size(); ++i) gm[i] += g[0] * m[i];
                            if (auto gl = sink(log_sigma_q); !gl.empty())
                                for (std::size_t i = 0; i < gl.size(); ++i)
                                    gl[i] += g[0] * (std::exp(2.0 * ls[i]) - 1.0);
                        });
}

}  // namespace aimsim::ad
