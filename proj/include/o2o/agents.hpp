#pragma once

#include "o2o/data.hpp"
#include "o2o/envs.hpp"
#include "o2o/models.hpp"

namespace o2o::agents {

/// Learned entropy temperature; minimizes -log_alpha * (log pi + target_entropy).
class Temperature {
public:
    Temperature(double alpha, double target_entropy, bool learn, double lr = 3e-4);

    double alpha() const;
    void update(const Vector& log_probs);
    bool learning() const { return learn_; }

private:
    Vector log_alpha_;
    nn::AdamState opt_;
    double target_entropy_;
    bool learn_;
};

struct ActorStats {
    double loss = 0.0;
    double mean_log_prob = 0.0;
    double mean_q = 0.0;
    double penalty_mean = 0.0;  // mean log pi - log pi_ref (SAC) or per-dim squared gap (TD3)
};

/**
 * One reparameterized step on  mean[ (alpha + lambda) log pi(a|s) - min_i Q_i(s,a) - lambda log pi_ref(a|s) ].
 * Without a reference (or with lambda = 0) this is the plain SAC actor loss.
 */
ActorStats sac_actor_step(GaussianActor& actor, nn::AdamState& opt, const TwinCritic& critic, const Matrix& states,
                          double alpha, Rng& rng, const GaussianActor* ref = nullptr, double lambda = 0.0);

/// r + gamma (1 - done) [ min target Q(s',a') - alpha log pi(a'|s') - lambda (log pi(a'|s') - log pi_ref(a'|s')) ].
Vector sac_target(const TwinCritic& critic, const GaussianActor& actor, const data::Batch& b, double gamma,
                  double alpha, Rng& rng, const GaussianActor* ref = nullptr, double lambda = 0.0);

/// Target-policy smoothing: clip(pi(s) + clip(N(0, noise), -clip, clip), -1, 1).
Matrix smoothed_actions(const DeterministicActor& actor, const Matrix& states, double noise, double clip, Rng& rng);

/// Per-column squared distance averaged over action dimensions.
Vector mean_sq_gap(const Matrix& a, const Matrix& b);

/// r + gamma (1 - done) [ min target Q(s', a~) - lambda * gap(pi(s'), pi_ref(s')) ], a~ smoothed from `target_actor`.
Vector td3_target(const TwinCritic& critic, const DeterministicActor& target_actor, const data::Batch& b, double gamma,
                  double noise, double clip, Rng& rng, const DeterministicActor* current = nullptr,
                  const DeterministicActor* ref = nullptr, double lambda = 0.0);

/**
 * One step on  -q_weight * mean Q_1(s, pi(s)) + anchor_weight * mean gap(pi(s), anchor).
 * `anchors` may be null when anchor_weight is 0.
 */
ActorStats td3_actor_step(DeterministicActor& actor, nn::AdamState& opt, const TwinCritic& critic,
                          const Matrix& states, double q_weight, const Matrix* anchors, double anchor_weight);

/// Deterministic-mode policies for evaluation and data collection.
envs::Policy greedy_policy(const GaussianActor& actor);
envs::Policy greedy_policy(const DeterministicActor& actor);

/// Evaluation returns converted to normalized scores.
struct Score {
    double mean = 0.0;
    double std = 0.0;
    double raw_mean = 0.0;
};
Score evaluate_score(const envs::ContinuousEnv& env, const envs::Policy& policy, int episodes, std::uint64_t seed);

}  // namespace o2o::agents
