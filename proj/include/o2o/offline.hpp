#pragma once

#include <optional>
#include <string>

#include "o2o/agents.hpp"
#include "o2o/data.hpp"
#include "o2o/models.hpp"

namespace o2o::offline {

enum class Algo { bc, td3bc, cql };

std::string to_string(Algo a);
Algo algo_from_string(const std::string& s);

struct BcConfig {
    NetConfig net;
    int steps = 20000;
    int batch_size = 256;
    double lr = 3e-4;
    double entropy_coef = 0.0;  // weight of the policy entropy bonus
    double holdout_fraction = 0.1;
    std::uint64_t seed = 0;
};

struct BcResult {
    GaussianActor actor;
    double train_nll = 0.0;
    double heldout_log_likelihood = 0.0;  // mean floored log pi(a|s) on held-out trajectories
    double mean_entropy = 0.0;            // mean pre-squash Gaussian entropy on dataset states
};

/// Maximum likelihood with an optional entropy bonus on the pre-squash Gaussian.
BcResult train_bc(const data::OfflineDataset& ds, const BcConfig& cfg);

struct Td3BcConfig {
    NetConfig actor_net;
    NetConfig critic_net;
    bool critic_layer_norm = true;
    int steps = 20000;
    int batch_size = 256;
    double actor_lr = 3e-4;
    double critic_lr = 3e-4;
    double alpha = 2.5;  // Q weight numerator; 0 gives pure behavior cloning
    double gamma = 0.99;
    double polyak = 0.005;
    double policy_noise = 0.2;
    double noise_clip = 0.5;
    int policy_delay = 2;
    std::uint64_t seed = 0;
};

struct Td3BcResult {
    DeterministicActor actor;
    TwinCritic critic;
    double train_residual = 0.0;
    double heldout_residual = 0.0;
};

TwinCritic make_critic(int state_dim, int action_dim, const NetConfig& net, bool layer_norm, Rng& rng);

Td3BcResult train_td3_bc(const data::OfflineDataset& ds, const Td3BcConfig& cfg);

struct CqlConfig {
    NetConfig actor_net;
    NetConfig critic_net;
    bool critic_layer_norm = true;
    int steps = 20000;
    int batch_size = 256;
    double actor_lr = 3e-4;
    double critic_lr = 3e-4;
    double cql_alpha = 1.0;
    int num_sampled_actions = 10;  // per state, for each of the uniform and policy proposals
    double entropy_alpha = 0.2;    // initial temperature
    bool learn_entropy = true;
    int bc_warmup_steps = 0;  // initial actor steps on the behavior-cloning loss instead of the SAC loss
    double gamma = 0.99;
    double polyak = 0.005;
    std::uint64_t seed = 0;
};

struct CqlResult {
    GaussianActor actor;
    TwinCritic critic;
    double train_residual = 0.0;
    double heldout_residual = 0.0;
    double final_temperature = 0.0;
};

/// Critic loss: Bellman error plus cql_alpha * (logsumexp_a Q(s,a) - Q(s,a_data)); actor loss is SAC's.
CqlResult train_cql_lite(const data::OfflineDataset& ds, const CqlConfig& cfg);

/// Mean squared one-step TD error of a twin critic under the SAC (Gaussian) or TD3 (deterministic) target.
double bellman_residual(const TwinCritic& critic, const GaussianActor& actor, const data::Batch& b, double gamma,
                        double alpha, Rng& rng);
double bellman_residual(const TwinCritic& critic, const DeterministicActor& actor, const data::Batch& b, double gamma);

/// Mean Q on uniformly random actions and on dataset actions at the same states.
struct QGap {
    double random_actions = 0.0;
    double data_actions = 0.0;
};
QGap q_gap(const TwinCritic& critic, const data::Batch& b, Rng& rng);

/**
 * Fraction of states where some perturbation pi(s) + delta (|delta_k| <= radius, `samples` draws)
 * has a higher Q_1 than pi(s). A nonzero rate means the critic's ranking disagrees with the actor.
 */
double improvement_mismatch_rate(const TwinCritic& critic, const DeterministicActor& actor, const Matrix& states,
                                 double radius, int samples, Rng& rng);

}  // namespace o2o::offline
