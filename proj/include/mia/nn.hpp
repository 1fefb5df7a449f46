#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "mia/rng.hpp"

namespace mia::nn {

// Row-major dense matrix of doubles. Deliberately minimal: the training code
// below owns every multiply, so gradients stay auditable.
struct DenseMatrix {
    int rows = 0, cols = 0;
    std::vector<double> data;

    DenseMatrix() = default;
    DenseMatrix(int r, int c) : rows(r), cols(c), data(static_cast<std::size_t>(r) * c, 0.0) {}

    double& operator()(int r, int c) { return data[static_cast<std::size_t>(r) * cols + c]; }
    double operator()(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }
    double* row(int r) { return data.data() + static_cast<std::size_t>(r) * cols; }
    const double* row(int r) const { return data.data() + static_cast<std::size_t>(r) * cols; }
};

// Y = X * W^T + b, with W stored (out x in).
DenseMatrix linear_forward(const DenseMatrix& x, const DenseMatrix& w,
                           const std::vector<double>& b);

// ---------------------------------------------------------------------------
// Fully connected network: ReLU hidden layers, identity or 2-way-softmax head.
// ---------------------------------------------------------------------------

enum class OutputHead { kIdentity, kSoftmax2 };

struct MlpSpec {
    std::vector<int> widths;  // input, hidden..., output; at least one hidden
    OutputHead head = OutputHead::kIdentity;
};

struct LinearParams {
    DenseMatrix w;           // out x in
    std::vector<double> b;   // out
};

struct Mlp {
    MlpSpec spec;
    std::vector<LinearParams> layers;
};

// Glorot-uniform weights (+-sqrt(6/(fan_in+fan_out))), zero biases.
Mlp make_mlp(const MlpSpec& spec, Rng& rng);

// Forward pass cache: inputs to each layer plus pre-activations, enough to
// replay the chain rule backwards.
struct MlpCache {
    std::vector<DenseMatrix> inputs;   // input to layer l (post-activation of l-1)
    std::vector<DenseMatrix> preacts;  // x W^T + b per layer
    DenseMatrix output;                // after the head
};

MlpCache mlp_forward(const Mlp& mlp, const DenseMatrix& x);

struct MlpGrads {
    std::vector<LinearParams> layers;  // same shapes as the parameters
    DenseMatrix input;                 // dLoss/dX
};

// upstream is dLoss/dOutput (after the head); the softmax Jacobian is folded
// in here so callers differentiate losses in probability space.
MlpGrads mlp_backward(const Mlp& mlp, const MlpCache& cache, const DenseMatrix& upstream);

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

struct BceResult {
    double value = 0.0;
    std::vector<double> per_sample;  // unweighted per-row loss
    DenseMatrix grad_probs;          // d(total)/d(probs), weights folded in
};

// Weighted two-column cross entropy: -sum_i w_i (y_i log p_i1 + (1-y_i) log p_i2),
// probabilities clamped to [1e-12, 1-1e-12] inside the logs.
BceResult bce_loss(const DenseMatrix& probs, const std::vector<int>& labels,
                   const std::vector<double>& weights);

// ---------------------------------------------------------------------------
// Optimizers over flat parameter views
// ---------------------------------------------------------------------------

struct ParamRef {
    double* value = nullptr;
    const double* grad = nullptr;
    std::size_t n = 0;
};

// Collects refs over every tensor of an Mlp (order: layer 0 W, b, layer 1 ...).
std::vector<ParamRef> param_refs(Mlp& mlp, const MlpGrads& grads);

enum class OptKind { kSgdMomentum, kAdam };

struct OptimizerSpec {
    OptKind kind = OptKind::kSgdMomentum;
    double lr = 0.01;
    double momentum = 0.7;      // SGD
    double beta1 = 0.9;         // Adam
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Per-parameter state buffers, lazily sized on first step. A state instance
// must always be fed the same parameter layout.
struct OptState {
    std::vector<std::vector<double>> m;  // momentum / first moment
    std::vector<std::vector<double>> v;  // second moment (Adam)
    long t = 0;
};

void optimizer_step(const OptimizerSpec& spec, OptState& state,
                    const std::vector<ParamRef>& params);

// ---------------------------------------------------------------------------
// Checkpoint container: named tensors, little-endian f64 payload with a JSON
// text header (names, shapes, offsets). Format documented in the README.
// ---------------------------------------------------------------------------

struct NamedTensor {
    std::string name;
    std::vector<int> shape;
    std::vector<double> data;
};

void save_tensors(const std::string& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> load_tensors(const std::string& path);

// Mlp <-> named tensors under a prefix ("<prefix>.0.w", "<prefix>.0.b", ...).
std::vector<NamedTensor> mlp_tensors(const Mlp& mlp, const std::string& prefix);
void mlp_from_tensors(Mlp& mlp, const std::vector<NamedTensor>& tensors,
                      const std::string& prefix);

}  // namespace mia::nn
