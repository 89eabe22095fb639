#include "o2o/offline.hpp"

#include <algorithm>
#include <cmath>

namespace o2o::offline {

std::string to_string(Algo a) {
    switch (a) {
        case Algo::bc: return "bc";
        case Algo::td3bc: return "td3bc";
        case Algo::cql: return "cql";
    }
    return "?";
}

Algo algo_from_string(const std::string& s) {
    if (s == "bc") return Algo::bc;
    if (s == "td3bc") return Algo::td3bc;
    if (s == "cql") return Algo::cql;
    throw ConfigError("unknown offline algorithm '" + s + "' (expected bc, td3bc or cql)");
}

namespace {

constexpr double kBcActionEdge = 1.0 - 1e-3;

void check_nonempty(const data::OfflineDataset& ds) {
    if (ds.empty()) throw ConfigError("offline training needs a non-empty dataset");
}

void check_finite(double v, const char* what, int step) {
    if (!std::isfinite(v))
        throw NumericalError(std::string(what) + " diverged at step " + std::to_string(step));
}

std::vector<std::size_t> pick(const std::vector<std::size_t>& pool, int n, Rng& rng) {
    std::vector<std::size_t> out(n);
    std::uniform_int_distribution<std::size_t> d(0, pool.size() - 1);
    for (auto& i : out) i = pool[d(rng)];
    return out;
}

/// Training pool is the whole dataset when it holds a single trajectory.
struct Split {
    std::vector<std::size_t> train, held;
};

Split make_split(const data::OfflineDataset& ds, double fraction, std::uint64_t seed) {
    auto [train, held] = data::split_by_trajectory(ds, fraction, seed);
    if (held.empty()) held = train;
    return {train, held};
}

data::Batch probe_batch(const data::OfflineDataset& ds, const std::vector<std::size_t>& pool, int n, Rng& rng) {
    return ds.gather(pick(pool, std::min<int>(n, static_cast<int>(std::max<std::size_t>(pool.size(), 1))), rng));
}

/// One step on the pre-squash Gaussian NLL of dataset actions minus an entropy bonus; returns the NLL.
double bc_step(GaussianActor& actor, nn::AdamState& opt, const data::Batch& b, double entropy_coef) {
    const Matrix u =
        b.actions.unaryExpr([](double a) { return std::atanh(std::clamp(a, -kBcActionEdge, kBcActionEdge)); });
    nn::Mlp::Tape tape;
    const auto h = actor.heads(b.states, tape);
    const double n = static_cast<double>(b.size());
    const Matrix sigma = h.log_std.array().exp();
    const Matrix z = ((u - h.mean).array() / sigma.array()).matrix();
    const double nll = (0.5 * z.array().square() + h.log_std.array() + nn::kHalfLog2Pi).sum() / n;
    if (!std::isfinite(nll)) return nll;
    const Matrix d_mean = (-(z.array() / sigma.array()) / n).matrix();
    const Matrix d_log_std = ((1.0 - z.array().square() - entropy_coef) / n).matrix();
    Vector grad = Vector::Zero(actor.net().num_params());
    actor.backward(tape, h, d_mean, d_log_std, grad);
    nn::adam_step(actor.net().params(), grad, opt);
    return nll;
}

}  // namespace

TwinCritic make_critic(int state_dim, int action_dim, const NetConfig& net, bool layer_norm, Rng& rng) {
    return TwinCritic(state_dim, action_dim, net, layer_norm, rng);
}

// ---------------------------------------------------------------------------

BcResult train_bc(const data::OfflineDataset& ds, const BcConfig& cfg) {
    check_nonempty(ds);
    if (cfg.entropy_coef < 0.0) throw ConfigError("entropy_coef must be >= 0");
    const auto& m = ds.meta();
    Rng rng = fork_rng(cfg.seed, 1);
    GaussianActor actor(m.state_dim, m.action_dim, cfg.net, rng);
    auto opt = nn::make_adam(actor.net().num_params(), cfg.lr);
    const Split split = make_split(ds, cfg.holdout_fraction, cfg.seed);

    BcResult res;
    for (int step = 0; step < cfg.steps; ++step) {
        const auto b = ds.gather(pick(split.train, cfg.batch_size, rng));
        res.train_nll = bc_step(actor, opt, b, cfg.entropy_coef);
        check_finite(res.train_nll, "behavior cloning loss", step);
    }

    const auto held = ds.gather(split.held);
    res.heldout_log_likelihood = actor.log_prob(held.states, held.actions).mean();
    const auto all = actor.heads(ds.all().states);
    res.mean_entropy = (all.log_std.array() + 0.5 + nn::kHalfLog2Pi).colwise().sum().mean();
    res.actor = std::move(actor);
    return res;
}

// ---------------------------------------------------------------------------

double bellman_residual(const TwinCritic& critic, const GaussianActor& actor, const data::Batch& b, double gamma,
                        double alpha, Rng& rng) {
    const Vector y = agents::sac_target(critic, actor, b, gamma, alpha, rng);
    return (critic.value(0, b.states, b.actions) - y).squaredNorm() / static_cast<double>(b.size());
}

double bellman_residual(const TwinCritic& critic, const DeterministicActor& actor, const data::Batch& b, double gamma) {
    Rng unused(0);
    const Vector y = agents::td3_target(critic, actor, b, gamma, 0.0, 0.0, unused);
    return (critic.value(0, b.states, b.actions) - y).squaredNorm() / static_cast<double>(b.size());
}

Td3BcResult train_td3_bc(const data::OfflineDataset& ds, const Td3BcConfig& cfg) {
    check_nonempty(ds);
    if (cfg.policy_delay < 1) throw ConfigError("policy_delay must be >= 1");
    const auto& m = ds.meta();
    Rng rng = fork_rng(cfg.seed, 2);
    DeterministicActor actor(m.state_dim, m.action_dim, cfg.actor_net, rng);
    DeterministicActor actor_target = actor;
    TwinCritic critic = make_critic(m.state_dim, m.action_dim, cfg.critic_net, cfg.critic_layer_norm, rng);
    auto actor_opt = nn::make_adam(actor.net().num_params(), cfg.actor_lr);
    auto critic_opt = TwinOptimizer::make(critic, cfg.critic_lr);
    const Split split = make_split(ds, 0.1, cfg.seed);

    for (int step = 0; step < cfg.steps; ++step) {
        const auto b = ds.gather(pick(split.train, cfg.batch_size, rng));
        const Vector y = agents::td3_target(critic, actor_target, b, cfg.gamma, cfg.policy_noise, cfg.noise_clip, rng);
        check_finite(regress_twin(critic, critic_opt, b.states, b.actions, y), "TD3+BC critic", step);
        if (step % cfg.policy_delay == 0) {
            double q_weight = 0.0;
            if (cfg.alpha > 0.0) {
                const double scale = critic.value(0, b.states, actor.act(b.states)).cwiseAbs().mean();
                q_weight = cfg.alpha / std::max(scale, 1e-6);
            }
            const auto st = agents::td3_actor_step(actor, actor_opt, critic, b.states, q_weight, &b.actions, 1.0);
            check_finite(st.loss, "TD3+BC actor", step);
            critic.soft_update(cfg.polyak);
            actor_target.net().soft_update_from(actor.net(), cfg.polyak);
        }
    }

    Td3BcResult res{actor, critic, 0.0, 0.0};
    Rng probe(cfg.seed ^ 0x5eed);
    res.train_residual = bellman_residual(critic, actor_target, probe_batch(ds, split.train, 2048, probe), cfg.gamma);
    res.heldout_residual = bellman_residual(critic, actor_target, probe_batch(ds, split.held, 2048, probe), cfg.gamma);
    return res;
}

// ---------------------------------------------------------------------------

namespace {

/// One CQL critic step on head i; returns the Bellman part of the loss.
double cql_critic_step(nn::Mlp& q, nn::AdamState& opt, const data::Batch& b, const Vector& y, const Matrix& rand_a,
                       const Matrix& pi_a, const Vector& pi_logp, double cql_alpha, int n_samp) {
    const Eigen::Index B = b.size();
    const Eigen::Index sd = b.states.rows(), ad = b.actions.rows();
    const Eigen::Index N = n_samp;
    const Eigen::Index total = B + 2 * B * N;
    Matrix in(sd + ad, total);
    in.topLeftCorner(sd, B) = b.states;
    in.bottomLeftCorner(ad, B) = b.actions;
    for (Eigen::Index j = 0; j < B; ++j)
        for (Eigen::Index k = 0; k < N; ++k) {
            const Eigen::Index r = B + j * N + k, p = B + B * N + j * N + k;
            in.block(0, r, sd, 1) = b.states.col(j);
            in.block(sd, r, ad, 1) = rand_a.col(j * N + k);
            in.block(0, p, sd, 1) = b.states.col(j);
            in.block(sd, p, ad, 1) = pi_a.col(j * N + k);
        }
    nn::Mlp::Tape tape;
    const Matrix out = q.forward(in, tape);
    const double inv_b = 1.0 / static_cast<double>(B);
    const double log_unif = -static_cast<double>(ad) * std::log(2.0);
    Matrix dy = Matrix::Zero(1, total);
    double bellman = 0.0;
    for (Eigen::Index j = 0; j < B; ++j) {
        const double diff = out(0, j) - y[j];
        bellman += diff * diff;
        dy(0, j) = 2.0 * diff * inv_b - cql_alpha * inv_b;
        if (cql_alpha == 0.0) continue;
        Vector logits(2 * N);
        for (Eigen::Index k = 0; k < N; ++k) {
            logits[k] = out(0, B + j * N + k) - log_unif;
            logits[N + k] = out(0, B + B * N + j * N + k) - pi_logp[j * N + k];
        }
        const double mx = logits.maxCoeff();
        const Vector w = (logits.array() - mx).exp();
        const Vector soft = w / w.sum();
        for (Eigen::Index k = 0; k < N; ++k) {
            dy(0, B + j * N + k) = cql_alpha * inv_b * soft[k];
            dy(0, B + B * N + j * N + k) = cql_alpha * inv_b * soft[N + k];
        }
    }
    Vector grad = Vector::Zero(q.num_params());
    q.backward(tape, dy, grad);
    nn::adam_step(q.params(), grad, opt);
    return bellman * inv_b;
}

}  // namespace

CqlResult train_cql_lite(const data::OfflineDataset& ds, const CqlConfig& cfg) {
    check_nonempty(ds);
    if (cfg.cql_alpha < 0.0) throw ConfigError("cql_alpha must be >= 0");
    if (cfg.num_sampled_actions < 1) throw ConfigError("num_sampled_actions must be >= 1");
    if (cfg.bc_warmup_steps < 0) throw ConfigError("bc_warmup_steps must be >= 0");
    const auto& m = ds.meta();
    Rng rng = fork_rng(cfg.seed, 3);
    GaussianActor actor(m.state_dim, m.action_dim, cfg.actor_net, rng);
    TwinCritic critic = make_critic(m.state_dim, m.action_dim, cfg.critic_net, cfg.critic_layer_norm, rng);
    auto actor_opt = nn::make_adam(actor.net().num_params(), cfg.actor_lr);
    auto critic_opt = TwinOptimizer::make(critic, cfg.critic_lr);
    agents::Temperature temp(cfg.entropy_alpha, -static_cast<double>(m.action_dim), cfg.learn_entropy, cfg.actor_lr);
    const Split split = make_split(ds, 0.1, cfg.seed);
    const int N = cfg.num_sampled_actions;

    for (int step = 0; step < cfg.steps; ++step) {
        const auto b = ds.gather(pick(split.train, cfg.batch_size, rng));
        const double alpha = temp.alpha();
        const Vector y = agents::sac_target(critic, actor, b, cfg.gamma, alpha, rng);

        const Eigen::Index B = b.size();
        Matrix rep(m.state_dim, B * N);
        for (Eigen::Index j = 0; j < B; ++j)
            for (int k = 0; k < N; ++k) rep.col(j * N + k) = b.states.col(j);
        Matrix rand_a(m.action_dim, B * N);
        for (Eigen::Index k = 0; k < rand_a.size(); ++k) rand_a.data()[k] = uniform(rng, -1.0, 1.0);
        const auto pi = actor.sample(rep, rng);
        for (int i = 0; i < 2; ++i) {
            const double l = cql_critic_step(critic.q[i], critic_opt.adam[i], b, y, rand_a, pi.action, pi.log_prob,
                                             cfg.cql_alpha, N);
            check_finite(l, "CQL critic", step);
        }
        if (step < cfg.bc_warmup_steps) {
            check_finite(bc_step(actor, actor_opt, b, 0.0), "CQL warm-up actor", step);
        } else {
            const auto st = agents::sac_actor_step(actor, actor_opt, critic, b.states, alpha, rng);
            check_finite(st.loss, "CQL actor", step);
            Vector lp(1);
            lp[0] = st.mean_log_prob;
            temp.update(lp);
        }
        critic.soft_update(cfg.polyak);
    }

    CqlResult res{actor, critic, 0.0, 0.0, temp.alpha()};
    Rng probe(cfg.seed ^ 0x5eed);
    res.train_residual =
        bellman_residual(critic, actor, probe_batch(ds, split.train, 2048, probe), cfg.gamma, temp.alpha(), probe);
    res.heldout_residual =
        bellman_residual(critic, actor, probe_batch(ds, split.held, 2048, probe), cfg.gamma, temp.alpha(), probe);
    return res;
}

// ---------------------------------------------------------------------------

QGap q_gap(const TwinCritic& critic, const data::Batch& b, Rng& rng) {
    Matrix rand_a(b.actions.rows(), b.size());
    for (Eigen::Index k = 0; k < rand_a.size(); ++k) rand_a.data()[k] = uniform(rng, -1.0, 1.0);
    return {critic.min_value(b.states, rand_a).mean(), critic.min_value(b.states, b.actions).mean()};
}

double improvement_mismatch_rate(const TwinCritic& critic, const DeterministicActor& actor, const Matrix& states,
                                 double radius, int samples, Rng& rng) {
    const Matrix a = actor.act(states);
    const Vector base = critic.value(0, states, a);
    Eigen::Index disagree = 0;
    for (Eigen::Index j = 0; j < states.cols(); ++j) {
        Matrix s = states.col(j).replicate(1, samples);
        Matrix p = a.col(j).replicate(1, samples);
        for (Eigen::Index k = 0; k < p.size(); ++k)
            p.data()[k] = std::clamp(p.data()[k] + uniform(rng, -radius, radius), -1.0, 1.0);
        if (critic.value(0, s, p).maxCoeff() > base[j]) ++disagree;
    }
    return static_cast<double>(disagree) / static_cast<double>(states.cols());
}

}  // namespace o2o::offline
