#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "o2o/common.hpp"

namespace o2o::nn {

enum class Activation { relu, tanh };

std::string to_string(Activation a);
Activation activation_from_string(const std::string& s);

struct MlpShape {
    std::vector<int> widths;  // input, hidden..., output
    Activation activation = Activation::relu;
    // Normalizes every hidden layer's post-activation output (no learned gain/bias).
    bool layer_norm = false;
};

/**
 * Fully connected network with hand-written backpropagation.
 *
 * Parameters live in one flat vector, layer by layer: the weight matrix
 * (out x in, column-major) followed by the bias. Inputs are batched with one
 * sample per column. The output layer is linear.
 */
class Mlp {
public:
    /// Intermediate values recorded by a forward pass and consumed by backward().
    struct Tape {
        Matrix input;
        std::vector<Matrix> hidden;    // layer outputs fed to the next layer
        std::vector<Matrix> pre;       // pre-activation values
        std::vector<Vector> inv_std;   // layer-norm 1/sigma per column
    };

    Mlp() = default;
    Mlp(MlpShape shape, Rng& rng);
    Mlp(MlpShape shape, Vector params);

    static Eigen::Index count_params(const std::vector<int>& widths);

    Matrix forward(const Matrix& x) const;
    Matrix forward(const Matrix& x, Tape& tape) const;
    std::vector<double> forward(std::span<const double> x) const;

    /// Accumulates d(loss)/d(params) into `grad` and returns d(loss)/d(input).
    Matrix backward(const Tape& tape, const Matrix& dy, Vector& grad) const;
    /// d(loss)/d(input) only.
    Matrix input_grad(const Tape& tape, const Matrix& dy) const;

    const MlpShape& shape() const { return shape_; }
    int input_dim() const { return shape_.widths.front(); }
    int output_dim() const { return shape_.widths.back(); }
    Eigen::Index num_params() const { return params_.size(); }

    Vector& params() { return params_; }
    const Vector& params() const { return params_; }

    /// target <- (1 - rate) * target + rate * source
    void soft_update_from(const Mlp& source, double rate);

private:
    int num_layers() const { return static_cast<int>(shape_.widths.size()) - 1; }
    void check_input(const Matrix& x) const;
    Matrix backprop(const Tape& tape, const Matrix& dy, Vector* grad) const;
    Eigen::Map<const Matrix> weight(int layer) const;
    Eigen::Map<const Vector> bias(int layer) const;

    MlpShape shape_;
    Vector params_;
    std::vector<Eigen::Index> offsets_;
};

inline constexpr double kLayerNormEps = 1e-5;

struct AdamState {
    Vector m;
    Vector v;
    long step = 0;
    double lr = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

AdamState make_adam(Eigen::Index n, double lr);

/// Bias-corrected Adam. Throws NumericalError on a non-finite gradient.
void adam_step(Vector& params, const Vector& grad, AdamState& state);

// ---------------------------------------------------------------------------
// Squashed (tanh) diagonal Gaussian.

inline constexpr double kLogStdMin = -5.0;
inline constexpr double kLogStdMax = 2.0;
inline constexpr double kLogProbFloor = -50.0;
inline constexpr double kHalfLog2Pi = 0.91893853320467274178;

/// Partial derivatives of a (floored) squashed-Gaussian log-density for one sample.
struct LogProbGrad {
    double value = 0.0;
    bool floored = false;
    Vector d_pre;      // w.r.t. the pre-squash action u
    Vector d_mean;
    Vector d_log_std;
};

/// log pi(a) where a = tanh(u), u ~ N(mean, exp(log_std)^2), floored at -50.
/// `log_std` must already be clamped.
double squashed_log_prob_pre(const Vector& mean, const Vector& log_std, const Vector& pre);
LogProbGrad squashed_log_prob_pre_grad(const Vector& mean, const Vector& log_std, const Vector& pre);

/// Same density evaluated at a squashed action; components at or beyond +-1 are
/// pulled inside before the inverse tanh so the result stays finite.
double squashed_log_prob(const Vector& mean, const Vector& log_std, const Vector& action);
Vector atanh_clamped(const Vector& action);

/// log(1 - tanh(u)^2) computed without cancellation.
double log1m_tanh_sq(double u);

double clamp_log_std(double raw);

// ---------------------------------------------------------------------------
// Checkpoints: u32 header length, JSON header, little-endian f32 parameter blob.

void write_checkpoint(const std::filesystem::path& path, const std::string& kind, std::uint64_t seed,
                      const std::vector<std::pair<std::string, const Mlp*>>& nets,
                      const nlohmann::json& extra);

struct LoadedCheckpoint {
    std::string kind;
    std::uint64_t seed = 0;
    std::vector<std::string> names;
    std::vector<Mlp> nets;
    std::string extra_json;

    const Mlp& net(const std::string& name) const;
};

LoadedCheckpoint read_checkpoint(const std::filesystem::path& path);

}  // namespace o2o::nn
