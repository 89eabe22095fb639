#pragma once

#include <array>
#include <filesystem>
#include <vector>

#include "o2o/nn.hpp"

namespace o2o {

struct NetConfig {
    std::vector<int> hidden{256, 256};
    nn::Activation activation = nn::Activation::relu;
};

/// Stochastic actor: an MLP emitting mean and raw log-std, squashed through tanh.
class GaussianActor {
public:
    struct Heads {
        Matrix mean;
        Matrix log_std;      // clamped to [kLogStdMin, kLogStdMax]
        Matrix raw_log_std;
    };

    struct Sample {
        Heads heads;
        Matrix eps;
        Matrix pre;      // mean + std * eps
        Matrix action;   // tanh(pre)
        Vector log_prob;
        nn::Mlp::Tape tape;
    };

    GaussianActor() = default;
    GaussianActor(int state_dim, int action_dim, const NetConfig& cfg, Rng& rng);
    explicit GaussianActor(nn::Mlp net);

    Heads heads(const Matrix& states) const;
    Heads heads(const Matrix& states, nn::Mlp::Tape& tape) const;

    /// Deterministic mode: tanh of the mean.
    Matrix mean_action(const Matrix& states) const;
    Sample sample(const Matrix& states, Rng& rng) const;
    Vector log_prob(const Matrix& states, const Matrix& actions) const;

    /**
     * Gradient of a per-sample loss  ext(u) + coef * log pi(u)  through the
     * reparameterized sample u = mean + std * eps.  `ext_du` is d ext / d u.
     * Returns d loss / d mean and d loss / d log_std for backward().
     */
    std::pair<Matrix, Matrix> reparam_grad(const Sample& s, const Matrix& ext_du, const Vector& coef) const;

    /// Pushes head gradients through the network into `grad`.
    void backward(const nn::Mlp::Tape& tape, const Heads& heads, const Matrix& d_mean, const Matrix& d_log_std,
                  Vector& grad) const;

    int state_dim() const { return net_.input_dim(); }
    int action_dim() const { return net_.output_dim() / 2; }
    nn::Mlp& net() { return net_; }
    const nn::Mlp& net() const { return net_; }

private:
    nn::Mlp net_;
};

/// Deterministic actor: tanh of an MLP output.
class DeterministicActor {
public:
    DeterministicActor() = default;
    DeterministicActor(int state_dim, int action_dim, const NetConfig& cfg, Rng& rng);
    explicit DeterministicActor(nn::Mlp net);

    Matrix act(const Matrix& states) const;
    Matrix act(const Matrix& states, nn::Mlp::Tape& tape) const;
    /// `d_action` is d loss / d action for the actions returned by act(states, tape).
    void backward(const nn::Mlp::Tape& tape, const Matrix& actions, const Matrix& d_action, Vector& grad) const;

    int state_dim() const { return net_.input_dim(); }
    int action_dim() const { return net_.output_dim(); }
    nn::Mlp& net() { return net_; }
    const nn::Mlp& net() const { return net_; }

private:
    nn::Mlp net_;
};

Matrix join_state_action(const Matrix& states, const Matrix& actions);

/// Double Q-network with target copies.
class TwinCritic {
public:
    TwinCritic() = default;
    TwinCritic(int state_dim, int action_dim, const NetConfig& cfg, bool layer_norm, Rng& rng);
    TwinCritic(std::array<nn::Mlp, 2> online, std::array<nn::Mlp, 2> target, int state_dim);

    Vector value(int i, const Matrix& states, const Matrix& actions) const;
    Vector min_value(const Matrix& states, const Matrix& actions) const;
    Vector target_min(const Matrix& states, const Matrix& actions) const;
    Vector target_value(int i, const Matrix& states, const Matrix& actions) const;

    /// d/da of sum_j w_j * min_i Q_i(s_j, a_j)   (or of Q_1 only when `first_only`).
    Matrix action_grad(const Matrix& states, const Matrix& actions, const Vector& weights,
                       bool first_only = false) const;

    void soft_update(double rate);
    void sync_targets();

    int state_dim() const { return state_dim_; }
    int action_dim() const { return q[0].input_dim() - state_dim_; }

    std::array<nn::Mlp, 2> q;
    std::array<nn::Mlp, 2> target;

private:
    int state_dim_ = 0;
};

/// Adam states for both heads of a twin critic.
struct TwinOptimizer {
    std::array<nn::AdamState, 2> adam;
    static TwinOptimizer make(const TwinCritic& c, double lr);
};

/// One Adam step on  mean_j (Q_i(s_j,a_j) - y_j)^2  for both Q heads; returns the mean loss.
double regress_twin(TwinCritic& critic, TwinOptimizer& opt, const Matrix& states, const Matrix& actions,
                    const Vector& targets);

/// One Adam step on mean squared error of a scalar-output net; returns the loss.
double regress_scalar(nn::Mlp& net, nn::AdamState& opt, const Matrix& inputs, const Vector& targets);

class ValueCritic {
public:
    ValueCritic() = default;
    ValueCritic(int state_dim, const NetConfig& cfg, bool layer_norm, Rng& rng);
    explicit ValueCritic(nn::Mlp net) : net_(std::move(net)) {}

    Vector value(const Matrix& states) const;
    nn::Mlp& net() { return net_; }
    const nn::Mlp& net() const { return net_; }

private:
    nn::Mlp net_;
};

double parameter_checksum(const nn::Mlp& net);

// Checkpoint helpers; kinds are "gaussian_actor", "deterministic_actor", "twin_critic", "value_critic".
void save_actor(const std::filesystem::path& path, const GaussianActor& actor, std::uint64_t seed);
void save_actor(const std::filesystem::path& path, const DeterministicActor& actor, std::uint64_t seed);
void save_critic(const std::filesystem::path& path, const TwinCritic& critic, std::uint64_t seed);
void save_critic(const std::filesystem::path& path, const ValueCritic& critic, std::uint64_t seed);
GaussianActor load_gaussian_actor(const std::filesystem::path& path);
DeterministicActor load_deterministic_actor(const std::filesystem::path& path);
TwinCritic load_twin_critic(const std::filesystem::path& path);
ValueCritic load_value_critic(const std::filesystem::path& path);
std::string checkpoint_kind(const std::filesystem::path& path);

}  // namespace o2o
