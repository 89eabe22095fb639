#include "o2o/reeval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "o2o/agents.hpp"

namespace o2o::reeval {

void ReevalConfig::validate() const {
    if (iterations < 1) throw ConfigError("reeval iterations must be >= 1");
    if (!(polyak > 0.0 && polyak <= 1.0)) throw ConfigError("reeval polyak must lie in (0, 1]");
    if (batch_size < 1) throw ConfigError("reeval batch_size must be >= 1");
    if (!(gamma >= 0.0 && gamma < 1.0)) throw ConfigError("reeval gamma must lie in [0, 1)");
    if (alpha < 0.0) throw ConfigError("reeval alpha must be >= 0");
}

namespace {

/// Shared FQE loop; `target(critic, batch, rng)` supplies the regression targets.
template <class TargetFn>
TwinCritic run_fqe(const data::OfflineDataset& ds, const ReevalConfig& cfg, const nn::Mlp& actor_net,
                   FqeReport* report, const TwinCritic* init, TargetFn target) {
    cfg.validate();
    if (ds.empty()) throw ConfigError("re-evaluation needs a non-empty dataset");
    const auto& m = ds.meta();
    Rng rng = fork_rng(cfg.seed, 11);
    TwinCritic critic = init != nullptr ? *init : TwinCritic(m.state_dim, m.action_dim, cfg.net, cfg.layer_norm, rng);
    if (critic.state_dim() != m.state_dim || critic.action_dim() != m.action_dim)
        throw DimensionError("initial critic does not match the dataset");
    auto opt = TwinOptimizer::make(critic, cfg.lr);
    const double checksum = parameter_checksum(actor_net);

    Rng probe_rng = fork_rng(cfg.seed, 12);
    const auto probe = ds.gather(data::sample_indices(ds.size(), std::min<std::size_t>(ds.size(), 1024), probe_rng));
    FqeReport local;
    FqeReport& rep = report != nullptr ? *report : local;
    rep = {};
    int stale = 0;
    for (int step = 1; step <= cfg.iterations; ++step) {
        const auto b = ds.gather(data::sample_indices(ds.size(), cfg.batch_size, rng));
        const Vector y = target(critic, b, rng);
        regress_twin(critic, opt, b.states, b.actions, y);
        critic.soft_update(cfg.polyak);
        rep.steps_run = step;
        if (cfg.check_every > 0 && step % cfg.check_every == 0) {
            Rng r2 = fork_rng(cfg.seed, 13);
            const Vector yp = target(critic, probe, r2);
            const double res = (critic.value(0, probe.states, probe.actions) - yp).squaredNorm() /
                               static_cast<double>(probe.size());
            if (!std::isfinite(res)) throw NumericalError("FQE residual is not finite at step " + std::to_string(step));
            if (!rep.residuals.empty() && cfg.plateau_tol > 0.0) {
                const double prev = rep.residuals.back();
                stale = (prev - res) < cfg.plateau_tol * prev ? stale + 1 : 0;
            }
            rep.residuals.push_back(res);
            if (cfg.plateau_tol > 0.0 && stale >= cfg.patience) break;
        }
    }
    if (parameter_checksum(actor_net) != checksum) throw NumericalError("actor changed during re-evaluation");
    return critic;
}

}  // namespace

TwinCritic fqe_sac(const data::OfflineDataset& ds, const GaussianActor& actor, const ReevalConfig& cfg,
                   FqeReport* report, const TwinCritic* init) {
    return run_fqe(ds, cfg, actor.net(), report, init, [&](const TwinCritic& c, const data::Batch& b, Rng& rng) {
        return agents::sac_target(c, actor, b, cfg.gamma, cfg.alpha, rng);
    });
}

TwinCritic fqe_td3(const data::OfflineDataset& ds, const DeterministicActor& actor, const ReevalConfig& cfg,
                   FqeReport* report, const TwinCritic* init) {
    return run_fqe(ds, cfg, actor.net(), report, init, [&](const TwinCritic& c, const data::Batch& b, Rng& rng) {
        return agents::td3_target(c, actor, b, cfg.gamma, cfg.policy_noise, cfg.noise_clip, rng);
    });
}

// ---------------------------------------------------------------------------

namespace {

/// Rewrites the linear output layer so that net(x) becomes scale * net(x) + shift.
void fold_output_affine(nn::Mlp& net, double scale, double shift) {
    const auto& w = net.shape().widths;
    const Eigen::Index in = w[w.size() - 2];
    Vector& p = net.params();
    const Eigen::Index last = p.size() - 1;
    p.segment(last - in, in) *= scale;
    p[last] = p[last] * scale + shift;
}

}  // namespace

ValueFitResult fit_returns(const data::OfflineDataset& ds, const ValueFitConfig& cfg) {
    if (ds.empty()) throw ConfigError("return fitting needs a non-empty dataset");
    const auto& m = ds.meta();
    Rng rng = fork_rng(cfg.seed, 14);
    ValueCritic v(m.state_dim, cfg.net, cfg.layer_norm, rng);
    auto opt = nn::make_adam(v.net().num_params(), cfg.lr);
    const auto returns = data::compute_returns(ds, cfg.gamma);
    auto [train, held] = data::split_by_trajectory(ds, cfg.holdout_fraction, cfg.seed);
    if (held.empty()) held = train;

    // Targets are standardized during training and the scale folded back into the output layer.
    double mean = 0.0, sq = 0.0;
    for (auto i : train) mean += returns[i];
    mean /= static_cast<double>(train.size());
    for (auto i : train) sq += (returns[i] - mean) * (returns[i] - mean);
    const double scale = std::max(std::sqrt(sq / static_cast<double>(train.size())), 1e-8);

    std::uniform_int_distribution<std::size_t> pick(0, train.size() - 1);
    std::vector<std::size_t> idx(cfg.batch_size);
    for (int step = 0; step < cfg.steps; ++step) {
        for (auto& i : idx) i = train[pick(rng)];
        const auto b = ds.gather(idx);
        Vector y(idx.size());
        for (std::size_t k = 0; k < idx.size(); ++k) y[k] = (returns[idx[k]] - mean) / scale;
        regress_scalar(v.net(), opt, b.states, y);
    }
    fold_output_affine(v.net(), scale, mean);

    auto mse = [&](const std::vector<std::size_t>& pool) {
        const auto b = ds.gather(pool);
        const Vector pred = v.value(b.states);
        double s = 0.0;
        for (std::size_t k = 0; k < pool.size(); ++k) s += (pred[k] - returns[pool[k]]) * (pred[k] - returns[pool[k]]);
        return s / static_cast<double>(pool.size());
    };
    ValueFitResult res;
    res.train_mse = mse(train);
    res.heldout_mse = mse(held);
    res.critic = std::move(v);
    return res;
}

// ---------------------------------------------------------------------------

std::vector<TabularTransition> tabular_dataset(const envs::TabularMdp& mdp, int per_pair, std::uint64_t seed) {
    mdp.validate();
    if (per_pair < 1) throw ConfigError("per_pair must be >= 1");
    Rng rng = fork_rng(seed, 15);
    std::vector<TabularTransition> out;
    for (int s = 0; s < mdp.n_states; ++s)
        for (int a = 0; a < mdp.n_actions; ++a)
            for (int k = 0; k < per_pair; ++k) out.push_back({s, a, mdp.reward(s, a), mdp.step(s, a, rng), false});
    return out;
}

namespace {

/// Each iteration replaces Q(s,a) by the least-squares fit (the cell mean) of r + gamma * next(s').
template <class NextValue>
TabularFqeResult fitted_q_tabular(const std::vector<TabularTransition>& data, int n_states, int n_actions,
                                  double gamma, int iterations, const Matrix* oracle, NextValue next_value) {
    if (iterations < 1) throw ConfigError("iterations must be >= 1");
    Matrix count = Matrix::Zero(n_states, n_actions);
    for (const auto& t : data) {
        if (t.s < 0 || t.s >= n_states || t.s2 < 0 || t.s2 >= n_states || t.a < 0 || t.a >= n_actions)
            throw DimensionError("tabular transition out of range");
        count(t.s, t.a) += 1.0;
    }
    TabularFqeResult res;
    res.q = Matrix::Zero(n_states, n_actions);
    Vector v(n_states);
    for (int it = 0; it < iterations; ++it) {
        for (int s = 0; s < n_states; ++s) v[s] = next_value(res.q, s);
        Matrix sum = Matrix::Zero(n_states, n_actions);
        for (const auto& t : data) sum(t.s, t.a) += t.r + (t.done ? 0.0 : gamma * v[t.s2]);
        for (int s = 0; s < n_states; ++s)
            for (int a = 0; a < n_actions; ++a)
                if (count(s, a) > 0) res.q(s, a) = sum(s, a) / count(s, a);
        if (oracle != nullptr) res.error_trace.push_back((res.q - *oracle).cwiseAbs().maxCoeff());
    }
    return res;
}

}  // namespace

TabularFqeResult fqe_sac_tabular(const std::vector<TabularTransition>& data, int n_states, int n_actions,
                                 const Matrix& policy, double gamma, double alpha, int iterations,
                                 const Matrix* oracle) {
    if (policy.rows() != n_states || policy.cols() != n_actions) throw DimensionError("policy table shape");
    return fitted_q_tabular(data, n_states, n_actions, gamma, iterations, oracle, [&](const Matrix& q, int s) {
        double v = 0.0;
        for (int a = 0; a < n_actions; ++a) {
            const double p = policy(s, a);
            if (p > 0.0) v += p * (q(s, a) - alpha * std::log(p));
        }
        return v;
    });
}

TabularFqeResult fqe_td3_tabular(const std::vector<TabularTransition>& data, int n_states, int n_actions,
                                 const std::vector<int>& policy, double gamma, int iterations, const Matrix* oracle) {
    if (static_cast<int>(policy.size()) != n_states) throw DimensionError("policy length");
    return fitted_q_tabular(data, n_states, n_actions, gamma, iterations, oracle,
                            [&](const Matrix& q, int s) { return q(s, policy[s]); });
}

}  // namespace o2o::reeval
