#pragma once

#include <vector>

#include "o2o/data.hpp"
#include "o2o/envs.hpp"
#include "o2o/models.hpp"

namespace o2o::reeval {

struct ReevalConfig {
    int iterations = 50000;  // gradient steps K
    double polyak = 0.005;
    int batch_size = 256;
    double alpha = 0.2;  // entropy temperature, SAC target only
    double gamma = 0.99;
    double lr = 3e-4;
    NetConfig net;
    bool layer_norm = true;
    double policy_noise = 0.2;  // TD3 target smoothing
    double noise_clip = 0.5;
    // Early stop once the probe residual improves by less than this fraction over `patience` checks (0 disables).
    double plateau_tol = 1e-3;
    int check_every = 1000;
    int patience = 5;
    std::uint64_t seed = 0;

    void validate() const;
};

struct FqeReport {
    int steps_run = 0;
    std::vector<double> residuals;  // probe Bellman residual at each check
};

/// Fresh twin critic trained on  r + gamma (min target Q(s',a') - alpha log pi_off(a'|s')),  a' ~ pi_off.
/// `init`, when given, replaces the fresh initialization (used by diagnostics, not by re-evaluation).
TwinCritic fqe_sac(const data::OfflineDataset& ds, const GaussianActor& actor, const ReevalConfig& cfg,
                   FqeReport* report = nullptr, const TwinCritic* init = nullptr);

/// Fresh twin critic trained on the smoothed TD3 target with pi_off supplying a'.
TwinCritic fqe_td3(const data::OfflineDataset& ds, const DeterministicActor& actor, const ReevalConfig& cfg,
                   FqeReport* report = nullptr, const TwinCritic* init = nullptr);

struct ValueFitConfig {
    int steps = 20000;
    int batch_size = 256;
    double lr = 1e-3;
    double gamma = 0.99;
    double holdout_fraction = 0.1;
    NetConfig net;
    bool layer_norm = true;
    std::uint64_t seed = 0;
};

struct ValueFitResult {
    ValueCritic critic;
    double train_mse = 0.0;
    double heldout_mse = 0.0;
};

/// Regresses V onto discounted return-to-go. This approximates the behavior value, not the policy's.
ValueFitResult fit_returns(const data::OfflineDataset& ds, const ValueFitConfig& cfg);

// ---------------------------------------------------------------------------
// Tabular counterparts used against the exact linear-solve oracle.

struct TabularTransition {
    int s = 0;
    int a = 0;
    double r = 0.0;
    int s2 = 0;
    bool done = false;
};

/// `per_pair` sampled transitions for every (s, a).
std::vector<TabularTransition> tabular_dataset(const envs::TabularMdp& mdp, int per_pair, std::uint64_t seed);

struct TabularFqeResult {
    Matrix q;
    std::vector<double> error_trace;  // max-abs error to `oracle` after each iteration, when given
};

/// Fitted Q iteration with a soft successor value  sum_a' pi(a'|s') (Q(s',a') - alpha log pi(a'|s')).
TabularFqeResult fqe_sac_tabular(const std::vector<TabularTransition>& data, int n_states, int n_actions,
                                 const Matrix& policy, double gamma, double alpha, int iterations,
                                 const Matrix* oracle = nullptr);

/// Fitted Q iteration for a deterministic policy (no target smoothing in the discrete case).
TabularFqeResult fqe_td3_tabular(const std::vector<TabularTransition>& data, int n_states, int n_actions,
                                 const std::vector<int>& policy, double gamma, int iterations,
                                 const Matrix* oracle = nullptr);

}  // namespace o2o::reeval
