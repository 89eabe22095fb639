#include "o2o/cft.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "o2o/agents.hpp"

namespace o2o::cft {

Vector kl_penalty(const GaussianActor& pi, const GaussianActor& ref, const Matrix& states, const Matrix& pre) {
    if (pre.cols() != states.cols() || pre.rows() != pi.action_dim()) throw DimensionError("kl_penalty: shape");
    const auto hp = pi.heads(states);
    const auto hr = ref.heads(states);
    Vector out(states.cols());
    for (Eigen::Index j = 0; j < out.size(); ++j)
        out[j] = nn::squashed_log_prob_pre(hp.mean.col(j), hp.log_std.col(j), pre.col(j)) -
                 nn::squashed_log_prob_pre(hr.mean.col(j), hr.log_std.col(j), pre.col(j));
    return out;
}

Vector mse_penalty(const DeterministicActor& pi, const DeterministicActor& ref, const Matrix& states) {
    return agents::mean_sq_gap(pi.act(states), ref.act(states));
}

double tau_schedule(double lo, double hi, long step, int horizon) {
    if (horizon < 1) throw ConfigError("tau horizon must be >= 1");
    if (step <= 0) return lo;
    if (step >= horizon) return hi;
    return lo + (hi - lo) * static_cast<double>(step) / static_cast<double>(horizon);
}

double TauSchedule::at(long step) const { return tau_schedule(lo, hi, step, horizon); }

TauSchedule tau_preset(const std::string& mode, const std::string& quality, int horizon) {
    const bool expert = quality == "expert";
    if (!expert && quality != "medium") throw ConfigError("no tau preset for dataset quality '" + quality + "'");
    if (mode == "o2sac") return expert ? TauSchedule{0.005, 0.125, horizon} : TauSchedule{0.125, 2.0, horizon};
    if (mode == "o2td3") return expert ? TauSchedule{0.000025, 0.000625, horizon} : TauSchedule{0.0025, 0.01, horizon};
    throw ConfigError("no tau preset for mode '" + mode + "'");
}

void ConstraintState::validate() const {
    if (!(lambda >= 0.0)) throw ConfigError("lambda must be >= 0");
    if (!(lr > 0.0)) throw ConfigError("lambda learning rate must be positive");
    if (!(high_weight >= 0.0 && high_weight <= 1.0)) throw ConfigError("lambda weight must lie in [0, 1]");
}

double lambda_step(ConstraintState& cs, const Vector& penalties, double tau) {
    if (penalties.size() == 0) return cs.lambda;
    double g = 0.0;
    for (double f : penalties) g += (f > tau ? cs.high_weight : 1.0 - cs.high_weight) * (f - tau);
    g /= static_cast<double>(penalties.size());
    cs.lambda = std::max(0.0, cs.lambda + cs.lr * g);
    return cs.lambda;
}

RefMode ref_mode_from_string(const std::string& s) {
    if (s == "best" || s == "best_so_far") return RefMode::best_so_far;
    if (s == "interval" || s == "fixed_interval") return RefMode::fixed_interval;
    throw ConfigError("unknown reference mode '" + s + "'");
}

std::string to_string(RefMode m) { return m == RefMode::best_so_far ? "best_so_far" : "fixed_interval"; }

// ---------------------------------------------------------------------------

namespace {
const char* const kMetricsHeader = "step,eval_return_mean,eval_return_std,lambda,tau,penalty_mean,q_mean_dataset,alpha,beta";
}

void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricsRow>& rows) {
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto& r = rows[i];
        for (double v : {r.eval_return_mean, r.eval_return_std, r.lambda, r.tau, r.penalty_mean, r.q_mean_dataset,
                         r.alpha, r.beta})
            if (!std::isfinite(v)) throw NumericalError("metrics row " + std::to_string(i) + " is not finite");
        if (i > 0 && r.step <= rows[i - 1].step) throw ConfigError("metrics steps must be strictly increasing");
    }
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << kMetricsHeader << '\n' << std::setprecision(17);
    for (const auto& r : rows)
        out << r.step << ',' << r.eval_return_mean << ',' << r.eval_return_std << ',' << r.lambda << ',' << r.tau
            << ',' << r.penalty_mean << ',' << r.q_mean_dataset << ',' << r.alpha << ',' << r.beta << '\n';
}

std::vector<MetricsRow> read_metrics_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    std::string line;
    if (!std::getline(in, line) || line != kMetricsHeader) throw FormatError("unexpected metrics header", 0);
    std::vector<MetricsRow> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::replace(line.begin(), line.end(), ',', ' ');
        std::istringstream ss(line);
        MetricsRow r;
        if (!(ss >> r.step >> r.eval_return_mean >> r.eval_return_std >> r.lambda >> r.tau >> r.penalty_mean >>
              r.q_mean_dataset >> r.alpha >> r.beta))
            throw FormatError("malformed metrics row", 0);
        rows.push_back(r);
    }
    return rows;
}

// ---------------------------------------------------------------------------

void FinetuneConfig::validate() const {
    if (steps < 1) throw ConfigError("finetune steps must be >= 1");
    if (batch_size < 2 || batch_size % 2 != 0) throw ConfigError("finetune batch_size must be even and >= 2");
    if (utd < 1) throw ConfigError("utd must be >= 1");
    if (eval_every < 1 || eval_episodes < 1) throw ConfigError("evaluation settings must be >= 1");
    if (!(gamma >= 0.0 && gamma < 1.0)) throw ConfigError("gamma must lie in [0, 1)");
    if (!(polyak > 0.0 && polyak <= 1.0)) throw ConfigError("polyak must lie in (0, 1]");
    if (!(alpha > 0.0)) throw ConfigError("alpha must be positive");
    if (policy_delay < 1) throw ConfigError("policy_delay must be >= 1");
    if (tau.hi < tau.lo) throw ConfigError("tau schedule must be non-decreasing");
    if (replay_capacity < 1) throw ConfigError("replay_capacity must be >= 1");
    if (q_normalizer < 0.0) throw ConfigError("q_normalizer must be >= 0");
    constraint.validate();
}

namespace {

struct EvalStats {
    double mean = 0.0;
    double std = 0.0;
};

EvalStats run_eval(const envs::ContinuousEnv& env, const envs::Policy& policy, int episodes, std::uint64_t seed) {
    const auto r = envs::evaluate_policy(env, policy, episodes, seed);
    return {r.mean, r.std};
}

/// Steps one environment instance, resetting at terminals and at the horizon.
class Interactor {
public:
    Interactor(const envs::ContinuousEnv& env, std::uint64_t seed) : env_(env), seed_(seed) { reset(); }

    const Vector& state() const { return state_; }

    data::Transition step(const Vector& action, double reward_shift) {
        const auto r = env_.step(state_, action);
        data::Transition t{state_, action.cwiseMax(-1.0).cwiseMin(1.0), r.reward + reward_shift, r.next_state,
                           r.terminal};
        ++t_;
        if (r.terminal || t_ >= env_.horizon())
            reset();
        else
            state_ = r.next_state;
        return t;
    }

private:
    void reset() {
        Rng rng = fork_rng(seed_, 1000 + episode_++);
        state_ = env_.reset(rng);
        t_ = 0;
    }

    const envs::ContinuousEnv& env_;
    std::uint64_t seed_;
    std::uint64_t episode_ = 0;
    int t_ = 0;
    Vector state_;
};

Matrix probe_states(const data::OfflineDataset& ds, std::uint64_t seed) {
    Rng rng = fork_rng(seed, 31);
    return ds.gather(data::sample_indices(ds.size(), std::min<std::size_t>(ds.size(), 256), rng)).states;
}

void require_finite(double v, const char* what, long step) {
    if (!std::isfinite(v)) throw NumericalError(std::string(what) + " is not finite at step " + std::to_string(step));
}

}  // namespace

FinetuneResult<GaussianActor> finetune_o2sac(const envs::ContinuousEnv& env, const GaussianActor& pi_on,
                                             const TwinCritic& q_on,
                                             std::shared_ptr<const data::OfflineDataset> offline,
                                             const FinetuneConfig& cfg, const CheckpointHook<GaussianActor>& hook) {
    cfg.validate();
    if (!offline || offline->empty()) throw ConfigError("fine-tuning needs the offline dataset");
    FinetuneResult<GaussianActor> res{pi_on, q_on, {}, 0.0};
    res.critic.sync_targets();
    GaussianActor& pi = res.actor;
    TwinCritic& critic = res.critic;
    auto aopt = nn::make_adam(pi.net().num_params(), cfg.actor_lr);
    auto copt = TwinOptimizer::make(critic, cfg.critic_lr);
    agents::Temperature temp(cfg.alpha, -static_cast<double>(pi.action_dim()), cfg.learn_alpha, cfg.actor_lr);
    ConstraintState cs = cfg.constraint;
    if (!cfg.constrained) cs.lambda = 0.0;

    data::ReplayBuffer buf(offline, cfg.replay_capacity, fork_rng(cfg.seed, 32)());
    Interactor io(env, fork_rng(cfg.seed, 33)());
    Rng rng = fork_rng(cfg.seed, 34);
    const std::uint64_t eval_seed = fork_rng(cfg.seed, 35)();
    const Matrix probe = probe_states(*offline, cfg.seed);

    auto row = [&](long step, double pen) {
        const auto ev = run_eval(env, agents::greedy_policy(pi), cfg.eval_episodes, eval_seed);
        MetricsRow r{step, ev.mean, ev.std, cs.lambda, cfg.tau.at(step), pen,
                     critic.min_value(probe, pi.mean_action(probe)).mean(), temp.alpha(), 0.0};
        require_finite(r.eval_return_mean, "evaluation return", step);
        require_finite(r.q_mean_dataset, "dataset Q", step);
        res.metrics.push_back(r);
        if (hook) hook(pi, step);
        return ev.mean;
    };
    ReferencePolicy<GaussianActor> ref(pi, row(0, 0.0), cfg.ref_mode, cfg.ref_interval);

    double pen_sum = 0.0;
    long pen_n = 0;
    for (long t = 1; t <= cfg.steps; ++t) {
        const auto a = pi.sample(io.state(), rng);
        buf.add(io.step(a.action.col(0), 0.0));
        const double tau = cfg.tau.at(t);
        for (int u = 0; u < cfg.utd; ++u) {
            const auto b = buf.sample_symmetric(cfg.batch_size);
            const auto smp = pi.sample(b.states, rng);
            temp.update(smp.log_prob);
            const double alpha = temp.alpha();
            const GaussianActor* rp = cfg.constrained ? &ref.actor() : nullptr;
            if (u == 0) {
                const Vector f = kl_penalty(pi, ref.actor(), b.states, smp.pre);
                pen_sum += f.mean();
                ++pen_n;
                if (cfg.constrained) lambda_step(cs, f, tau);
            }
            const Vector y = agents::sac_target(critic, pi, b, cfg.gamma, alpha, rng, rp, cs.lambda);
            require_finite(regress_twin(critic, copt, b.states, b.actions, y), "critic loss", t);
            const auto st = agents::sac_actor_step(pi, aopt, critic, b.states, alpha, rng, rp, cs.lambda);
            require_finite(st.loss, "actor loss", t);
            critic.soft_update(cfg.polyak);
        }
        if (t % cfg.eval_every == 0 || t == cfg.steps) {
            const double score = row(t, pen_n > 0 ? pen_sum / static_cast<double>(pen_n) : 0.0);
            ref.maybe_update(pi, score, t);
            pen_sum = 0.0;
            pen_n = 0;
        }
    }
    res.final_lambda = cs.lambda;
    return res;
}

FinetuneResult<DeterministicActor> finetune_o2td3(const envs::ContinuousEnv& env, const DeterministicActor& pi_on,
                                                  const TwinCritic& q_on,
                                                  std::shared_ptr<const data::OfflineDataset> offline,
                                                  const FinetuneConfig& cfg,
                                                  const CheckpointHook<DeterministicActor>& hook) {
    cfg.validate();
    if (!offline || offline->empty()) throw ConfigError("fine-tuning needs the offline dataset");
    FinetuneResult<DeterministicActor> res{pi_on, q_on, {}, 0.0};
    res.critic.sync_targets();
    DeterministicActor& pi = res.actor;
    DeterministicActor target_pi = pi_on;
    TwinCritic& critic = res.critic;
    auto aopt = nn::make_adam(pi.net().num_params(), cfg.actor_lr);
    auto copt = TwinOptimizer::make(critic, cfg.critic_lr);
    ConstraintState cs = cfg.constraint;
    if (!cfg.constrained) cs.lambda = 0.0;

    data::ReplayBuffer buf(offline, cfg.replay_capacity, fork_rng(cfg.seed, 32)());
    Interactor io(env, fork_rng(cfg.seed, 33)());
    Rng rng = fork_rng(cfg.seed, 34);
    const std::uint64_t eval_seed = fork_rng(cfg.seed, 35)();
    const Matrix probe = probe_states(*offline, cfg.seed);

    auto row = [&](long step, double pen) {
        const auto ev = run_eval(env, agents::greedy_policy(pi), cfg.eval_episodes, eval_seed);
        MetricsRow r{step, ev.mean, ev.std, cs.lambda, cfg.tau.at(step), pen,
                     critic.min_value(probe, pi.act(probe)).mean(), 0.0, 0.0};
        require_finite(r.eval_return_mean, "evaluation return", step);
        require_finite(r.q_mean_dataset, "dataset Q", step);
        res.metrics.push_back(r);
        if (hook) hook(pi, step);
        return ev.mean;
    };
    ReferencePolicy<DeterministicActor> ref(pi, row(0, 0.0), cfg.ref_mode, cfg.ref_interval);

    double pen_sum = 0.0;
    long pen_n = 0;
    long updates = 0;
    for (long t = 1; t <= cfg.steps; ++t) {
        Vector a = pi.act(io.state()).col(0);
        for (Eigen::Index k = 0; k < a.size(); ++k)
            a[k] = std::clamp(a[k] + cfg.exploration_noise * standard_normal(rng), -1.0, 1.0);
        buf.add(io.step(a, cfg.reward_shift));
        const double tau = cfg.tau.at(t);
        for (int u = 0; u < cfg.utd; ++u) {
            const auto b = buf.sample_symmetric(cfg.batch_size);
            const DeterministicActor* rp = cfg.constrained ? &ref.actor() : nullptr;
            const Matrix ref_a = ref.actor().act(b.states);
            if (u == 0) {
                const Vector f = agents::mean_sq_gap(pi.act(b.states), ref_a);
                pen_sum += f.mean();
                ++pen_n;
                if (cfg.constrained) lambda_step(cs, f, tau);
            }
            const Vector y = agents::td3_target(critic, target_pi, b, cfg.gamma, cfg.policy_noise, cfg.noise_clip, rng,
                                                &pi, rp, cs.lambda);
            require_finite(regress_twin(critic, copt, b.states, b.actions, y), "critic loss", t);
            if (++updates % cfg.policy_delay == 0) {
                double qw = 1.0;
                if (cfg.q_normalizer > 0.0)
                    qw = cfg.q_normalizer /
                         std::max(critic.value(0, b.states, pi.act(b.states)).cwiseAbs().mean(), 1e-6);
                const auto st = agents::td3_actor_step(pi, aopt, critic, b.states, qw, cfg.constrained ? &ref_a : nullptr,
                                                       cs.lambda);
                require_finite(st.loss, "actor loss", t);
                critic.soft_update(cfg.polyak);
                target_pi.net().soft_update_from(pi.net(), cfg.polyak);
            }
        }
        if (t % cfg.eval_every == 0 || t == cfg.steps) {
            const double score = row(t, pen_n > 0 ? pen_sum / static_cast<double>(pen_n) : 0.0);
            ref.maybe_update(pi, score, t);
            pen_sum = 0.0;
            pen_n = 0;
        }
    }
    res.final_lambda = cs.lambda;
    return res;
}

// ---------------------------------------------------------------------------

void PpoConfig::validate() const {
    if (steps < 1 || rollout_length < 2 || epochs < 1 || minibatch < 1) throw ConfigError("PPO sizes must be >= 1");
    if (!(clip > 0.0)) throw ConfigError("PPO clip must be positive");
    if (!(gamma >= 0.0 && gamma <= 1.0) || !(gae_lambda >= 0.0 && gae_lambda <= 1.0))
        throw ConfigError("gamma and gae_lambda must lie in [0, 1]");
    if (!(aux.alpha > 0.0)) throw ConfigError("aux alpha must be positive");
    if (eval_every < 1 || eval_episodes < 1) throw ConfigError("evaluation settings must be >= 1");
}

Vector gae(const Vector& rewards, const Vector& values, const Vector& next_values, const Vector& dones,
           const Vector& ends, double gamma, double lambda) {
    const Eigen::Index n = rewards.size();
    if (values.size() != n || next_values.size() != n || dones.size() != n || ends.size() != n)
        throw DimensionError("gae: length mismatch");
    Vector adv(n);
    double running = 0.0;
    for (Eigen::Index i = n - 1; i >= 0; --i) {
        const double boot = dones[i] > 0.5 ? 0.0 : gamma * next_values[i];
        const double delta = rewards[i] + boot - values[i];
        if (ends[i] > 0.5 || i == n - 1) running = 0.0;
        running = delta + (dones[i] > 0.5 ? 0.0 : gamma * lambda * running);
        adv[i] = running;
    }
    return adv;
}

double beta_schedule(long step, long horizon) {
    if (horizon <= 0) return 0.0;
    return std::clamp(1.0 - static_cast<double>(step) / static_cast<double>(horizon), 0.0, 1.0);
}

Vector ppo_surrogate_grad(const GaussianActor& actor, const Matrix& states, const Matrix& pre, const Vector& old_logp,
                          const Vector& adv, double clip, double* loss) {
    const Eigen::Index n = states.cols();
    if (pre.cols() != n || old_logp.size() != n || adv.size() != n) throw DimensionError("ppo: batch mismatch");
    nn::Mlp::Tape tape;
    const auto h = actor.heads(states, tape);
    Matrix d_mean = Matrix::Zero(h.mean.rows(), n), d_log_std = Matrix::Zero(h.mean.rows(), n);
    const double inv_n = 1.0 / static_cast<double>(n);
    double total = 0.0;
    for (Eigen::Index j = 0; j < n; ++j) {
        const auto g = nn::squashed_log_prob_pre_grad(h.mean.col(j), h.log_std.col(j), pre.col(j));
        const double r = std::exp(g.value - old_logp[j]);
        const double s1 = r * adv[j];
        const double s2 = std::clamp(r, 1.0 - clip, 1.0 + clip) * adv[j];
        total -= std::min(s1, s2);
        if (s1 <= s2 && !g.floored) {
            const double dl = -adv[j] * r * inv_n;
            d_mean.col(j) = dl * g.d_mean;
            d_log_std.col(j) = dl * g.d_log_std;
        }
    }
    if (loss != nullptr) *loss = total * inv_n;
    Vector grad = Vector::Zero(actor.net().num_params());
    actor.backward(tape, h, d_mean, d_log_std, grad);
    return grad;
}

Vector gaussian_cross_entropy_grad(const GaussianActor& actor, const GaussianActor& ref, const Matrix& states) {
    nn::Mlp::Tape tape;
    const auto h = actor.heads(states, tape);
    const auto hr = ref.heads(states);
    const double inv_n = 1.0 / static_cast<double>(states.cols());
    const Matrix var_r = (2.0 * hr.log_std.array()).exp().matrix();
    const Matrix d_mean = ((h.mean - hr.mean).array() / var_r.array() * inv_n).matrix();
    const Matrix d_log_std = ((2.0 * h.log_std.array()).exp() / var_r.array() * inv_n).matrix();
    Vector grad = Vector::Zero(actor.net().num_params());
    actor.backward(tape, h, d_mean, d_log_std, grad);
    return grad;
}

PpoResult finetune_o2ppo(const envs::ContinuousEnv& env, const GaussianActor& pi_on, const ValueCritic& v,
                         const PpoConfig& cfg, const CheckpointHook<GaussianActor>& hook) {
    cfg.validate();
    if (pi_on.state_dim() != env.state_dim() || pi_on.action_dim() != env.action_dim())
        throw DimensionError("actor does not match the environment");
    PpoResult res{pi_on, v, {}};
    GaussianActor& pi = res.actor;
    auto aopt = nn::make_adam(pi.net().num_params(), cfg.actor_lr);
    auto vopt = nn::make_adam(res.value.net().num_params(), cfg.value_lr);
    Interactor io(env, fork_rng(cfg.seed, 33)());
    Rng rng = fork_rng(cfg.seed, 36);
    const std::uint64_t eval_seed = fork_rng(cfg.seed, 35)();
    const long beta_h = cfg.beta_horizon > 0 ? cfg.beta_horizon : cfg.steps;
    const int sd = env.state_dim(), ad = env.action_dim();

    double last_pen = 0.0;
    auto row = [&](long step) {
        const auto ev = run_eval(env, agents::greedy_policy(pi), cfg.eval_episodes, eval_seed);
        MetricsRow r{step, ev.mean, ev.std, 0.0, 0.0, last_pen, 0.0, cfg.aux.alpha, beta_schedule(step, beta_h)};
        require_finite(r.eval_return_mean, "evaluation return", step);
        res.metrics.push_back(r);
        if (hook) hook(pi, step);
        return ev.mean;
    };
    ReferencePolicy<GaussianActor> ref(pi, row(0), cfg.ref_mode, cfg.ref_interval);

    const int T = cfg.rollout_length;
    long t = 0;
    long next_eval = cfg.eval_every;
    while (t < cfg.steps) {
        const int len = static_cast<int>(std::min<long>(T, cfg.steps - t));
        Matrix S(sd, len), S2(sd, len), U(ad, len);
        Vector old_lp(len), r(len), dones(len), ends(len);
        for (int i = 0; i < len; ++i) {
            const auto smp = pi.sample(io.state(), rng);
            S.col(i) = io.state();
            U.col(i) = smp.pre.col(0);
            old_lp[i] = smp.log_prob[0];
            const auto tr = io.step(smp.action.col(0), 0.0);
            S2.col(i) = tr.next_state;
            r[i] = tr.reward;
            dones[i] = tr.done ? 1.0 : 0.0;
            ends[i] = (tr.done || io.state() != tr.next_state) ? 1.0 : 0.0;
        }
        const long t_start = t;
        t += len;

        const Vector vals = res.value.value(S);
        const Vector adv = gae(r, vals, res.value.value(S2), dones, ends, cfg.gamma, cfg.gae_lambda);
        const Vector returns = adv + vals;
        const auto hr = ref.actor().heads(S);
        const Vector aux =
            align::aux_advantage_clipped(align::aux_advantage_raw(hr.mean, hr.log_std, U, cfg.aux.alpha),
                                         cfg.aux.clip_offset);
        const double beta = beta_schedule(t_start, beta_h);
        Vector mixed = align::mixed_advantage(adv, aux, beta, align::aux_weight(adv, cfg.aux.weight_factor));
        const double m = mixed.mean();
        const double sdv = std::sqrt((mixed.array() - m).square().mean());
        mixed = ((mixed.array() - m) / (sdv > 1e-8 ? sdv : 1.0)).matrix();
        last_pen = -aux.mean();

        std::vector<Eigen::Index> order(len);
        for (int i = 0; i < len; ++i) order[i] = i;
        for (int e = 0; e < cfg.epochs; ++e) {
            std::shuffle(order.begin(), order.end(), rng);
            for (int start = 0; start < len; start += cfg.minibatch) {
                const int nb = std::min(cfg.minibatch, len - start);
                Matrix ms(sd, nb), mu(ad, nb);
                Vector mlp(nb), madv(nb), mret(nb);
                for (int k = 0; k < nb; ++k) {
                    const auto i = order[start + k];
                    ms.col(k) = S.col(i);
                    mu.col(k) = U.col(i);
                    mlp[k] = old_lp[i];
                    madv[k] = mixed[i];
                    mret[k] = returns[i];
                }
                const Vector g = ppo_surrogate_grad(pi, ms, mu, mlp, madv, cfg.clip);
                nn::adam_step(pi.net().params(), g, aopt);
                require_finite(regress_scalar(res.value.net(), vopt, ms, mret), "value loss", t);
            }
        }
        if (t >= next_eval || t >= cfg.steps) {
            ref.maybe_update(pi, row(t), t);
            while (next_eval <= t) next_eval += cfg.eval_every;
        }
    }
    return res;
}

// ---------------------------------------------------------------------------

namespace {

Matrix softmax_rows(const Matrix& logits) {
    Matrix p(logits.rows(), logits.cols());
    for (Eigen::Index s = 0; s < logits.rows(); ++s) {
        const double mx = logits.row(s).maxCoeff();
        p.row(s) = (logits.row(s).array() - mx).exp();
        p.row(s) /= p.row(s).sum();
    }
    return p;
}

}  // namespace

TabularCftResult tabular_constrained_learner(const envs::TabularMdp& mdp, const TabularCftConfig& cfg) {
    mdp.validate();
    if (cfg.iterations < 1) throw ConfigError("iterations must be >= 1");
    cfg.constraint.validate();
    Rng rng = fork_rng(cfg.seed, 37);
    Matrix logits = 0.1 * gaussian_matrix(mdp.n_states, mdp.n_actions, rng);
    Matrix pi = softmax_rows(logits);
    ConstraintState cs = cfg.constraint;
    ReferencePolicy<Matrix> ref(pi, envs::tabular_return(mdp, pi), RefMode::best_so_far, 1);
    TabularCftResult res;
    for (int it = 0; it < cfg.iterations; ++it) {
        const Matrix q = envs::exact_policy_eval(mdp, pi);
        const Matrix& pr = ref.actor();
        Vector kl(mdp.n_states);
        for (int s = 0; s < mdp.n_states; ++s) {
            Vector g(mdp.n_actions);
            kl[s] = 0.0;
            for (int a = 0; a < mdp.n_actions; ++a) {
                const double lr = std::log(pi(s, a)) - std::log(pr(s, a));
                kl[s] += pi(s, a) * lr;
                g[a] = q(s, a) - cs.lambda * lr;
            }
            const double base = pi.row(s).dot(g);
            for (int a = 0; a < mdp.n_actions; ++a) logits(s, a) += cfg.policy_lr * pi(s, a) * (g[a] - base);
        }
        lambda_step(cs, kl, cfg.tau.at(it));
        pi = softmax_rows(logits);
        const double j = envs::tabular_return(mdp, pi);
        ref.maybe_update(pi, j, it);
        res.lambda_trace.push_back(cs.lambda);
        res.return_trace.push_back(j);
    }
    res.policy = pi;
    res.final_lambda = cs.lambda;
    return res;
}

}  // namespace o2o::cft
