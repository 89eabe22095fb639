#pragma once

#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "o2o/align.hpp"
#include "o2o/data.hpp"
#include "o2o/envs.hpp"
#include "o2o/models.hpp"

namespace o2o::cft {

// ---------------------------------------------------------------------------
// Constraint primitives

/// Per-sample log pi(u|s) - log pi_ref(u|s) at pre-squash actions `pre` (log-likelihoods floored).
Vector kl_penalty(const GaussianActor& pi, const GaussianActor& ref, const Matrix& states, const Matrix& pre);

/// Per-sample squared gap of deterministic actions, averaged over action dimensions.
Vector mse_penalty(const DeterministicActor& pi, const DeterministicActor& ref, const Matrix& states);

struct TauSchedule {
    double lo = 0.0;
    double hi = 0.0;
    int horizon = 1;

    /// Linear from lo at step 0 to hi at `horizon`, constant afterwards.
    double at(long step) const;
};

double tau_schedule(double lo, double hi, long step, int horizon);

/// Endpoints for mode "o2sac" / "o2td3" and dataset quality "medium" / "expert".
TauSchedule tau_preset(const std::string& mode, const std::string& quality, int horizon);

struct ConstraintState {
    double lambda = 2.0;
    double lr = 3e-4;
    double high_weight = 0.7;  // weight of samples whose penalty exceeds tau; the rest get 1 - high_weight

    void validate() const;
};

/// lambda <- max(0, lambda + lr * mean_i w_i (f_i - tau)). Returns the new lambda.
double lambda_step(ConstraintState& cs, const Vector& penalties, double tau);

enum class RefMode { best_so_far, fixed_interval };

RefMode ref_mode_from_string(const std::string& s);
std::string to_string(RefMode m);

/// Snapshot of the reference policy and the rule deciding when it is replaced.
template <class Actor>
class ReferencePolicy {
public:
    ReferencePolicy(Actor initial, double initial_score, RefMode mode, int interval)
        : actor_(std::move(initial)), best_(initial_score), mode_(mode), interval_(interval) {
        if (mode == RefMode::fixed_interval && interval < 1) throw ConfigError("reference interval must be >= 1");
    }

    /// Returns true when the snapshot was replaced.
    bool maybe_update(const Actor& candidate, double score, long step) {
        if (mode_ == RefMode::best_so_far) {
            if (!(score > best_)) return false;
            actor_ = candidate;
            best_ = score;
            return true;
        }
        best_ = std::max(best_, score);
        if (step % interval_ != 0) return false;
        actor_ = candidate;
        return true;
    }

    const Actor& actor() const { return actor_; }
    double best_score() const { return best_; }
    RefMode mode() const { return mode_; }

private:
    Actor actor_;
    double best_;
    RefMode mode_;
    int interval_;
};

// ---------------------------------------------------------------------------
// Metrics

struct MetricsRow {
    long step = 0;
    double eval_return_mean = 0.0;
    double eval_return_std = 0.0;
    double lambda = 0.0;
    double tau = 0.0;
    double penalty_mean = 0.0;
    double q_mean_dataset = 0.0;
    double alpha = 0.0;
    double beta = 0.0;
};

/// Header plus one line per row, full double precision. Throws on NaN or non-increasing steps.
void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricsRow>& rows);
std::vector<MetricsRow> read_metrics_csv(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Online loops

struct FinetuneConfig {
    long steps = 100000;
    int batch_size = 256;
    double actor_lr = 3e-4;
    double critic_lr = 3e-4;
    double gamma = 0.99;
    double polyak = 0.005;
    int utd = 1;
    int eval_every = 1000;
    int eval_episodes = 10;
    std::size_t replay_capacity = 1000000;

    bool constrained = true;  // false forces lambda = 0 and skips its updates
    ConstraintState constraint;
    TauSchedule tau{0.125, 2.0, 100000};
    RefMode ref_mode = RefMode::best_so_far;
    int ref_interval = 1000;

    // O2SAC
    double alpha = 0.2;
    bool learn_alpha = true;

    // O2TD3
    double exploration_noise = 0.1;
    double policy_noise = 0.2;
    double noise_clip = 0.5;
    int policy_delay = 2;
    double reward_shift = 0.0;  // added to every online reward before storage
    double q_normalizer = 0.0;  // > 0 scales the actor's Q term by q_normalizer / mean |Q_1(s, pi(s))|

    std::uint64_t seed = 0;

    void validate() const;
};

template <class Actor>
struct FinetuneResult {
    Actor actor;
    TwinCritic critic;
    std::vector<MetricsRow> metrics;
    double final_lambda = 0.0;
};

/// Called after every evaluation with the current (finite) actor; used for last-good checkpoints.
template <class Actor>
using CheckpointHook = std::function<void(const Actor&, long step)>;

FinetuneResult<GaussianActor> finetune_o2sac(const envs::ContinuousEnv& env, const GaussianActor& pi_on,
                                             const TwinCritic& q_on,
                                             std::shared_ptr<const data::OfflineDataset> offline,
                                             const FinetuneConfig& cfg,
                                             const CheckpointHook<GaussianActor>& hook = {});

FinetuneResult<DeterministicActor> finetune_o2td3(const envs::ContinuousEnv& env, const DeterministicActor& pi_on,
                                                  const TwinCritic& q_on,
                                                  std::shared_ptr<const data::OfflineDataset> offline,
                                                  const FinetuneConfig& cfg,
                                                  const CheckpointHook<DeterministicActor>& hook = {});

// ---------------------------------------------------------------------------
// O2PPO

struct PpoConfig {
    long steps = 100000;
    int rollout_length = 2048;
    int epochs = 10;
    int minibatch = 64;
    double clip = 0.2;
    double actor_lr = 3e-4;
    double value_lr = 1e-3;
    double gamma = 0.99;
    double gae_lambda = 0.95;
    align::AuxAdvantageConfig aux;
    long beta_horizon = 0;  // steps over which beta anneals 1 -> 0; 0 uses `steps`
    int eval_every = 2048;
    int eval_episodes = 10;
    RefMode ref_mode = RefMode::best_so_far;
    int ref_interval = 10000;
    std::uint64_t seed = 0;

    void validate() const;
};

/// GAE over one rollout. `next_values[i]` is V of transition i's successor;
/// `dones` marks terminals (no bootstrap) and `ends` marks any episode boundary.
Vector gae(const Vector& rewards, const Vector& values, const Vector& next_values, const Vector& dones,
           const Vector& ends, double gamma, double lambda);

/// Linear anneal from 1 at step 0 to 0 at `horizon`.
double beta_schedule(long step, long horizon);

/**
 * Gradient (w.r.t. actor parameters) of the clipped surrogate loss
 * -mean min(r A, clip(r) A), r = pi(u|s) / exp(old_logp), at stored pre-squash actions u.
 */
Vector ppo_surrogate_grad(const GaussianActor& actor, const Matrix& states, const Matrix& pre,
                          const Vector& old_logp, const Vector& adv, double clip, double* loss = nullptr);

/// Gradient of mean_s CE(pi(.|s), ref(.|s)) of the pre-squash Gaussians w.r.t. actor parameters.
Vector gaussian_cross_entropy_grad(const GaussianActor& actor, const GaussianActor& ref, const Matrix& states);

struct PpoResult {
    GaussianActor actor;
    ValueCritic value;
    std::vector<MetricsRow> metrics;
};

PpoResult finetune_o2ppo(const envs::ContinuousEnv& env, const GaussianActor& pi_on, const ValueCritic& v,
                         const PpoConfig& cfg, const CheckpointHook<GaussianActor>& hook = {});

// ---------------------------------------------------------------------------
// Tabular constrained learner

struct TabularCftConfig {
    int iterations = 20000;
    double policy_lr = 0.5;
    ConstraintState constraint{2.0, 0.01, 0.7};
    TauSchedule tau{0.05, 0.2, 20000};
    std::uint64_t seed = 0;
};

struct TabularCftResult {
    Matrix policy;
    std::vector<double> lambda_trace;
    std::vector<double> return_trace;
    double final_lambda = 0.0;
};

/**
 * Softmax policy ascent on  E_pi[Q^pi] - lambda KL(pi || pi_ref)  with exact Q^pi, projected lambda updates,
 * and a best-so-far reference. Starts from a random softmax policy.
 */
TabularCftResult tabular_constrained_learner(const envs::TabularMdp& mdp, const TabularCftConfig& cfg);

}  // namespace o2o::cft
