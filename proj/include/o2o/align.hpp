#pragma once

#include <vector>

#include "o2o/data.hpp"
#include "o2o/models.hpp"

namespace o2o::align {

// ---------------------------------------------------------------------------
// Closed-form calibration targets

/// min(Q_anchor - alpha (logp_anchor - logp_a), Q_fqe)
double o2sac_target(double q_anchor, double logp_anchor, double logp_a, double q_fqe, double alpha);

/// ||a - a_dot|| / sqrt(dim), uncapped.
double o2td3_distance(const Vector& a, const Vector& a_dot);

/**
 * Gaussian-shaped suppression around the anchor.  With m = 1 + k max(min(d, sigma)^2, sigma^2):
 * positive anchors give min(Q_fqe, Q_anchor / m); negative anchors give min(Q_fqe, Q_anchor * m).
 */
double o2td3_target(double q_anchor, double d, double k, double sigma, double q_fqe);

// ---------------------------------------------------------------------------
// Critic alignment loops

struct SacAlignConfig {
    double alpha = 0.2;
    int steps = 20000;
    int batch_size = 256;
    double actor_lr = 3e-4;
    double critic_lr = 3e-4;
    int critic_warmup_steps = 0;  // leading steps that update only the critic
    int check_every = 1000;
    int min_steps = 0;
    double stop_pass_rate = 0.95;  // early stop on the rank audit; > 1 disables
    int audit_states = 512;
    int audit_actions = 8;
    std::uint64_t seed = 0;

    void validate() const;
};

struct TdAlignConfig {
    double k = 1.0;
    double sigma = 0.2;  // smoothing scale and distance cap
    double noise_clip = 0.5;
    int steps = 20000;
    int batch_size = 256;
    double actor_lr = 3e-4;
    double critic_lr = 3e-4;
    int check_every = 1000;
    int min_steps = 0;
    double stop_pass_rate = 0.95;
    int audit_states = 512;
    int audit_actions = 8;
    std::uint64_t seed = 0;

    void validate() const;
};

struct AlignReport {
    int steps_run = 0;
    std::vector<double> pass_rates;  // audit pass rate at each check
    std::vector<double> losses;      // mean critic loss over each check window
};

struct SacAligned {
    GaussianActor actor;
    TwinCritic critic;
};

struct TdAligned {
    DeterministicActor actor;
    TwinCritic critic;
};

/**
 * Alternates a SAC policy step against the current critic with a critic step that regresses sampled
 * actions onto o2sac_target and anchor actions onto their pre-alignment values. The calibration
 * reference is a frozen copy of `critic`. Returned critics have targets synced to the online nets.
 */
SacAligned o2sac_align(const data::OfflineDataset& ds, const TwinCritic& critic, const GaussianActor& pi_off,
                       const SacAlignConfig& cfg, AlignReport* report = nullptr);

/// TD3 counterpart: perturbed actions pi(s) + delta are regressed onto o2td3_target.
TdAligned o2td3_align(const data::OfflineDataset& ds, const TwinCritic& critic, const DeterministicActor& pi_off,
                      const TdAlignConfig& cfg, AlignReport* report = nullptr);

// ---------------------------------------------------------------------------
// Audits

/// Fraction of (s, a ~ pi_off) with Q(s, a_dot) >= Q(s, a) - alpha (log pi_off(a_dot|s) - log pi_off(a|s)).
double sac_rank_audit(const TwinCritic& critic, const GaussianActor& pi_off, const Matrix& states, double alpha,
                      int samples, Rng& rng);

/// Fraction of (s, delta) with Q(s, a_dot) >= Q(s, clip(a_dot + delta)), delta clipped Gaussian noise.
double td3_argmax_audit(const TwinCritic& critic, const DeterministicActor& pi_off, const Matrix& states, double sigma,
                        double noise_clip, int samples, Rng& rng);

/// Mean Q over random directions at each normalized distance d from a_dot.
std::vector<double> shell_means(const TwinCritic& critic, const DeterministicActor& pi_off, const Matrix& states,
                                const std::vector<double>& radii, int samples, Rng& rng);

/// mean |Q_after(s, a_dot) - Q_before(s, a_dot)| / mean |Q_before(s, a_dot)|.
double anchor_drift(const TwinCritic& before, const TwinCritic& after, const Matrix& states, const Matrix& anchors);

struct SandwichAudit {
    double pass_rate = 0.0;
    Vector v_fqe, v_align, v_anchor;
};

/**
 * V_align = MC mean over a ~ pi_on of Q_on - alpha log pi_on; V_anchor = Q_on(s, a_dot) - alpha log pi_on(a_dot|s);
 * V_fqe uses Q_fqe on the same samples, restricted to those whose soft value does not exceed V_anchor
 * (all samples' minimum if none qualify). Passes when V_fqe - eps <= V_align <= V_anchor + eps, eps = slack |V_anchor|.
 */
SandwichAudit sandwich_audit(const TwinCritic& q_fqe, const TwinCritic& q_on, const GaussianActor& pi_on,
                             const GaussianActor& pi_off, const Matrix& states, double alpha, int samples,
                             double slack, Rng& rng);

/**
 * Fraction of sampled action pairs at each state whose pi log-likelihood order disagrees with the critic's
 * Q order. Pairs with equal log-likelihood are skipped.
 */
double rank_disagreement_rate(const TwinCritic& critic, const GaussianActor& actor, const Matrix& states, int pairs,
                              Rng& rng);

/// Deterministic counterpart: of two perturbations pi(s) + N(0, sigma), the closer one should score higher.
double rank_disagreement_rate(const TwinCritic& critic, const DeterministicActor& actor, const Matrix& states,
                              int pairs, double sigma, Rng& rng);

// ---------------------------------------------------------------------------
// Auxiliary advantage

struct AuxAdvantageConfig {
    double alpha = 1.0;
    double clip_offset = 4.0;
    double weight_factor = 2.0;  // multiple of std(A_gae)
};

/// Per-dimension raw advantage alpha (1 - z^2) / 2, z = (u - mean) / std in pre-squash space.
Matrix aux_advantage_raw(const Matrix& mean, const Matrix& log_std, const Matrix& pre, double alpha);

/// softplus(x + c) - c, elementwise.
double softplus_clip(double x, double offset);

/// Sum over dimensions of the softplus-clipped raw advantage.
Vector aux_advantage_clipped(const Matrix& raw, double offset);

/// Batch weight: factor * std(a_gae), or 1 when the batch has no spread.
double aux_weight(const Vector& a_gae, double factor);

/// A_gae + beta * weight * A_aux.
Vector mixed_advantage(const Vector& a_gae, const Vector& a_aux, double beta, double weight = 1.0);
double mixed_advantage(double a_gae, double a_aux, double beta);

/// Discrete analogue: alpha log p_off(a) + alpha H(p_off).
Vector discrete_aux_advantage(const Vector& p_off, double alpha);

}  // namespace o2o::align
