#pragma once

#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <vector>

namespace aimsim::ad {

using Shape = std::vector<int>;

class Tape;

/// Dense row-major array of doubles. A tensor either is a constant or is
/// linked to a node of exactly one Tape, in which case gradients flow to it.
/// Values are immutable once created, so copies are cheap and shareable.
class Tensor {
public:
    Tensor();
    Tensor(Shape shape, std::vector<double> values);

    static Tensor scalar(double value);
    static Tensor zeros(Shape shape);
    static Tensor vector(std::vector<double> values);

    const Shape& shape() const { return shape_; }
    int numel() const { return static_cast<int>(data_->size()); }
    int dim(int axis) const { return shape_.at(static_cast<std::size_t>(axis)); }
    std::span<const double> data() const { return *data_; }
    double operator[](int i) const { return (*data_)[static_cast<std::size_t>(i)]; }
    /// Value of a single-element tensor.
    double item() const;

    bool requires_grad() const { return tape_ != nullptr; }
    Tape* tape() const { return tape_; }
    int node() const { return node_; }

    /// Same values, no tape link.
    Tensor detach() const;

private:
    friend class Tape;
    Shape shape_;
    std::shared_ptr<const std::vector<double>> data_;
    Tape* tape_ = nullptr;
    int node_ = -1;
};

int shape_numel(const Shape& shape);

/// Receives output gradients during the backward sweep and hands out
/// writable gradient buffers for an op's inputs.
class GradSink {
public:
    /// Gradient buffer for `input`, or an empty span when it is a constant.
    std::span<double> operator()(const Tensor& input);

private:
    friend class Tape;
    explicit GradSink(std::vector<std::vector<double>>& grads, const Tape& tape) : grads_(grads), tape_(tape) {}
    std::vector<std::vector<double>>& grads_;
    const Tape& tape_;
};

using BackwardFn = std::function<void(std::span<const double> out_grad, GradSink& sink)>;

/// Gradients of one backward sweep, indexed by tape node.
class Gradients {
public:
    /// dLoss/dTensor for a tensor on the swept tape; zeros if it did not
    /// influence the loss.
    std::vector<double> of(const Tensor& t) const;

private:
    friend class Tape;
    std::vector<std::vector<double>> grads_;
    const Tape* tape_ = nullptr;
};

/// Append-only record of differentiable operations. One tape per rollout;
/// confined to a single thread.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Registers `value` as a leaf that requires gradients.
    Tensor leaf(const Tensor& value);

    /// Reverse sweep from a single-element loss tensor recorded on this tape.
    Gradients backward(const Tensor& loss) const;

    std::size_t size() const { return nodes_.size(); }
    int node_numel(int node) const { return nodes_.at(static_cast<std::size_t>(node)).numel; }

    /// Builds the result of an op. When no input is on a tape the result is a
    /// constant and `backward` is discarded. Throws NumericError on non-finite
    /// values and ContractError when inputs live on different tapes.
    static Tensor record(Shape shape, std::vector<double> values, std::initializer_list<const Tensor*> inputs,
                         BackwardFn backward);
    static Tensor record(Shape shape, std::vector<double> values, const std::vector<const Tensor*>& inputs,
                         BackwardFn backward);

private:
    struct Node {
        int numel = 0;
        BackwardFn backward;  // empty for leaves
    };
    std::vector<Node> nodes_;
};

// Elementwise arithmetic. Operands must have equal element counts, or one of
// them must be a single element which is broadcast.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }
inline Tensor operator*(const Tensor& a, double s) { return scale(a, s); }
inline Tensor operator+(const Tensor& a, double s) { return add_scalar(a, s); }
inline Tensor operator+(double s, const Tensor& a) { return add_scalar(a, s); }
inline Tensor operator-(const Tensor& a, double s) { return add_scalar(a, -s); }
inline Tensor operator-(double s, const Tensor& a) { return add_scalar(neg(a), s); }

/// [m,k] x [k,n] -> [m,n]; [m,k] x [k] -> [m].
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor sin(const Tensor& a);
Tensor cos(const Tensor& a);
Tensor tan(const Tensor& a);
Tensor atan(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor square(const Tensor& a);

/// Subgradient zero outside [lo, hi].
Tensor clamp(const Tensor& a, double lo, double hi);
/// Wraps angles into (-pi, pi]; gradient is the identity.
Tensor wrap_angle(const Tensor& a);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

/// Flattens and concatenates.
Tensor concat(const std::vector<Tensor>& parts);
/// Flat slice [start, start + count).
Tensor slice(const Tensor& a, int start, int count);
Tensor reshape(const Tensor& a, Shape shape);
/// out[i] = a[indices[i]] over the flattened tensor.
Tensor gather(const Tensor& a, std::vector<int> indices);

/// image [H,W,C], coords [P,2] as (column, row) with texel centers on the
/// integer lattice. Coordinates outside the image clamp to the border texel.
/// Returns [P,C]; differentiable w.r.t. both image and coords.
Tensor bilinear_sample(const Tensor& image, const Tensor& coords);

/// [H,W,C] -> [C,H,W].
Tensor hwc_to_chw(const Tensor& image);

/// input [C,H,W], weight [O,C,K,K], bias [O]; zero padding.
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, int stride, int padding);

/// input [C,H,W] -> [C,H',W'] with a KxK window.
Tensor max_pool(const Tensor& input, int kernel, int stride);

/// mu + exp(log_sigma) * noise, where noise is a constant of standard normal draws.
Tensor reparameterize(const Tensor& mu, const Tensor& log_sigma, const Tensor& noise);

/// KL(N(mu, diag(exp(2 log_sigma))) || N(0, I)) summed over dimensions.
Tensor kl_diag_gaussians(const Tensor& mu_q, const Tensor& log_sigma_q);

}  // namespace aimsim::ad
