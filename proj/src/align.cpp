#include "o2o/align.hpp"

#include <algorithm>
#include <cmath>

#include "o2o/agents.hpp"

namespace o2o::align {

double o2sac_target(double q_anchor, double logp_anchor, double logp_a, double q_fqe, double alpha) {
    return std::min(q_anchor - alpha * (logp_anchor - logp_a), q_fqe);
}

double o2td3_distance(const Vector& a, const Vector& a_dot) {
    if (a.size() != a_dot.size() || a.size() == 0) throw DimensionError("o2td3_distance: action sizes differ");
    return (a - a_dot).norm() / std::sqrt(static_cast<double>(a.size()));
}

double o2td3_target(double q_anchor, double d, double k, double sigma, double q_fqe) {
    const double dc = std::min(d, sigma);
    const double m = 1.0 + k * std::max(dc * dc, sigma * sigma);
    const double shaped = q_anchor > 0.0 ? q_anchor / m : q_anchor * m;
    return std::min(q_fqe, shaped);
}

namespace {

void check_common(int steps, int batch, int check_every, double actor_lr, double critic_lr, int audit_states,
                  int audit_actions) {
    if (steps < 1) throw ConfigError("alignment steps must be >= 1");
    if (batch < 1) throw ConfigError("alignment batch_size must be >= 1");
    if (check_every < 1) throw ConfigError("alignment check_every must be >= 1");
    if (!(actor_lr > 0.0) || !(critic_lr > 0.0)) throw ConfigError("alignment learning rates must be positive");
    if (audit_states < 1 || audit_actions < 1) throw ConfigError("alignment audit sizes must be >= 1");
}

Matrix batch_states(const data::OfflineDataset& ds, std::size_t n, Rng& rng) {
    return ds.gather(data::sample_indices(ds.size(), n, rng)).states;
}

Matrix hcat(const Matrix& a, const Matrix& b) {
    Matrix out(a.rows(), a.cols() + b.cols());
    out << a, b;
    return out;
}

Vector vcat(const Vector& a, const Vector& b) {
    Vector out(a.size() + b.size());
    out << a, b;
    return out;
}

Matrix repeat_cols(const Matrix& m, int times) {
    Matrix out(m.rows(), m.cols() * times);
    for (Eigen::Index j = 0; j < m.cols(); ++j)
        for (int k = 0; k < times; ++k) out.col(j * times + k) = m.col(j);
    return out;
}

/// Shared loop; `critic_step` returns the loss of one calibration step, `audit` the current pass rate.
template <class StepFn, class AuditFn>
void run_alignment(int steps, int check_every, int min_steps, double stop_rate, AlignReport* report, StepFn step_fn,
                   AuditFn audit) {
    AlignReport local;
    AlignReport& rep = report != nullptr ? *report : local;
    rep = {};
    double window = 0.0;
    int count = 0;
    for (int step = 1; step <= steps; ++step) {
        const double loss = step_fn();
        if (!std::isfinite(loss)) throw NumericalError("alignment diverged at step " + std::to_string(step));
        window += loss;
        ++count;
        rep.steps_run = step;
        if (step % check_every == 0 || step == steps) {
            rep.losses.push_back(window / count);
            window = 0.0;
            count = 0;
            const double rate = audit();
            rep.pass_rates.push_back(rate);
            if (step >= min_steps && rate > stop_rate) break;
        }
    }
}

}  // namespace

void SacAlignConfig::validate() const {
    if (!(alpha > 0.0)) throw ConfigError("alignment alpha must be positive");
    if (critic_warmup_steps < 0) throw ConfigError("critic_warmup_steps must be >= 0");
    check_common(steps, batch_size, check_every, actor_lr, critic_lr, audit_states, audit_actions);
}

void TdAlignConfig::validate() const {
    if (!(k > 0.0)) throw ConfigError("alignment k must be positive");
    if (!(sigma > 0.0)) throw ConfigError("alignment sigma must be positive");
    if (!(noise_clip > 0.0)) throw ConfigError("alignment noise_clip must be positive");
    check_common(steps, batch_size, check_every, actor_lr, critic_lr, audit_states, audit_actions);
}

SacAligned o2sac_align(const data::OfflineDataset& ds, const TwinCritic& critic, const GaussianActor& pi_off,
                       const SacAlignConfig& cfg, AlignReport* report) {
    cfg.validate();
    if (ds.empty()) throw ConfigError("alignment needs a non-empty dataset");
    if (critic.state_dim() != pi_off.state_dim() || critic.action_dim() != pi_off.action_dim())
        throw DimensionError("critic and actor dimensions differ");

    TwinCritic ref = critic;
    ref.sync_targets();
    SacAligned out{pi_off, ref};
    auto aopt = nn::make_adam(out.actor.net().num_params(), cfg.actor_lr);
    auto copt = TwinOptimizer::make(out.critic, cfg.critic_lr);
    Rng rng = fork_rng(cfg.seed, 21);
    Rng audit_rng = fork_rng(cfg.seed, 22);
    const Matrix audit_states = batch_states(ds, static_cast<std::size_t>(cfg.audit_states), audit_rng);

    int step = 0;
    auto step_fn = [&]() {
        const Matrix s = batch_states(ds, static_cast<std::size_t>(cfg.batch_size), rng);
        if (++step > cfg.critic_warmup_steps) agents::sac_actor_step(out.actor, aopt, out.critic, s, cfg.alpha, rng);
        const auto smp = out.actor.sample(s, rng);
        const Matrix a_dot = pi_off.mean_action(s);
        const Vector lp_a = pi_off.log_prob(s, smp.action);
        const Vector lp_dot = pi_off.log_prob(s, a_dot);
        const Vector q_dot = ref.target_min(s, a_dot);
        const Vector q_fqe = ref.target_min(s, smp.action);
        Vector y(s.cols());
        for (Eigen::Index j = 0; j < y.size(); ++j)
            y[j] = o2sac_target(q_dot[j], lp_dot[j], lp_a[j], q_fqe[j], cfg.alpha);
        return regress_twin(out.critic, copt, hcat(s, s), hcat(smp.action, a_dot), vcat(y, q_dot));
    };
    auto audit = [&]() {
        Rng r = fork_rng(cfg.seed, 23);
        return sac_rank_audit(out.critic, pi_off, audit_states, cfg.alpha, cfg.audit_actions, r);
    };
    run_alignment(cfg.steps, cfg.check_every, cfg.min_steps, cfg.stop_pass_rate, report, step_fn, audit);
    out.critic.sync_targets();
    return out;
}

TdAligned o2td3_align(const data::OfflineDataset& ds, const TwinCritic& critic, const DeterministicActor& pi_off,
                      const TdAlignConfig& cfg, AlignReport* report) {
    cfg.validate();
    if (ds.empty()) throw ConfigError("alignment needs a non-empty dataset");
    if (critic.state_dim() != pi_off.state_dim() || critic.action_dim() != pi_off.action_dim())
        throw DimensionError("critic and actor dimensions differ");

    TwinCritic ref = critic;
    ref.sync_targets();
    TdAligned out{pi_off, ref};
    auto aopt = nn::make_adam(out.actor.net().num_params(), cfg.actor_lr);
    auto copt = TwinOptimizer::make(out.critic, cfg.critic_lr);
    Rng rng = fork_rng(cfg.seed, 24);
    Rng audit_rng = fork_rng(cfg.seed, 25);
    const Matrix audit_states = batch_states(ds, static_cast<std::size_t>(cfg.audit_states), audit_rng);

    auto step_fn = [&]() {
        const Matrix s = batch_states(ds, static_cast<std::size_t>(cfg.batch_size), rng);
        agents::td3_actor_step(out.actor, aopt, out.critic, s, 1.0, nullptr, 0.0);
        const Matrix a_t = agents::smoothed_actions(out.actor, s, cfg.sigma, cfg.noise_clip, rng);
        const Matrix a_dot = pi_off.act(s);
        const Vector q_dot = ref.target_min(s, a_dot);
        const Vector q_fqe = ref.target_min(s, a_t);
        Vector y(s.cols());
        for (Eigen::Index j = 0; j < y.size(); ++j)
            y[j] = o2td3_target(q_dot[j], o2td3_distance(a_t.col(j), a_dot.col(j)), cfg.k, cfg.sigma, q_fqe[j]);
        return regress_twin(out.critic, copt, hcat(s, s), hcat(a_t, a_dot), vcat(y, q_dot));
    };
    auto audit = [&]() {
        Rng r = fork_rng(cfg.seed, 26);
        return td3_argmax_audit(out.critic, pi_off, audit_states, cfg.sigma, cfg.noise_clip, cfg.audit_actions, r);
    };
    run_alignment(cfg.steps, cfg.check_every, cfg.min_steps, cfg.stop_pass_rate, report, step_fn, audit);
    out.critic.sync_targets();
    return out;
}

// ---------------------------------------------------------------------------

double sac_rank_audit(const TwinCritic& critic, const GaussianActor& pi_off, const Matrix& states, double alpha,
                      int samples, Rng& rng) {
    const Matrix a_dot = pi_off.mean_action(states);
    const Vector q_dot = critic.min_value(states, a_dot);
    const Vector lp_dot = pi_off.log_prob(states, a_dot);
    const Matrix rs = repeat_cols(states, samples);
    const auto smp = pi_off.sample(rs, rng);
    const Vector q = critic.min_value(rs, smp.action);
    const Vector lp = pi_off.log_prob(rs, smp.action);
    Eigen::Index pass = 0;
    for (Eigen::Index i = 0; i < rs.cols(); ++i) {
        const Eigen::Index j = i / samples;
        if (q_dot[j] >= q[i] - alpha * (lp_dot[j] - lp[i])) ++pass;
    }
    return static_cast<double>(pass) / static_cast<double>(rs.cols());
}

double td3_argmax_audit(const TwinCritic& critic, const DeterministicActor& pi_off, const Matrix& states, double sigma,
                        double noise_clip, int samples, Rng& rng) {
    const Matrix a_dot = pi_off.act(states);
    const Vector q_dot = critic.min_value(states, a_dot);
    const Matrix rs = repeat_cols(states, samples);
    Matrix a = repeat_cols(a_dot, samples);
    for (Eigen::Index k = 0; k < a.size(); ++k)
        a.data()[k] = std::clamp(a.data()[k] + std::clamp(sigma * standard_normal(rng), -noise_clip, noise_clip), -1.0,
                                 1.0);
    const Vector q = critic.min_value(rs, a);
    Eigen::Index pass = 0;
    for (Eigen::Index i = 0; i < rs.cols(); ++i)
        if (q_dot[i / samples] >= q[i]) ++pass;
    return static_cast<double>(pass) / static_cast<double>(rs.cols());
}

std::vector<double> shell_means(const TwinCritic& critic, const DeterministicActor& pi_off, const Matrix& states,
                                const std::vector<double>& radii, int samples, Rng& rng) {
    const Matrix a_dot = pi_off.act(states);
    const Matrix rs = repeat_cols(states, samples);
    const Matrix base = repeat_cols(a_dot, samples);
    const double scale = std::sqrt(static_cast<double>(a_dot.rows()));
    std::vector<double> out;
    for (double r : radii) {
        Matrix dir = gaussian_matrix(base.rows(), base.cols(), rng);
        for (Eigen::Index j = 0; j < dir.cols(); ++j) dir.col(j) /= std::max(dir.col(j).norm(), 1e-12);
        const Matrix a = (base + r * scale * dir).cwiseMax(-1.0).cwiseMin(1.0);
        out.push_back(critic.min_value(rs, a).mean());
    }
    return out;
}

double anchor_drift(const TwinCritic& before, const TwinCritic& after, const Matrix& states, const Matrix& anchors) {
    const Vector qb = before.min_value(states, anchors);
    const Vector qa = after.min_value(states, anchors);
    const double denom = qb.cwiseAbs().mean();
    if (!(denom > 0.0)) throw NumericalError("anchor_drift: pre-alignment anchor values are all zero");
    return (qa - qb).cwiseAbs().mean() / denom;
}

SandwichAudit sandwich_audit(const TwinCritic& q_fqe, const TwinCritic& q_on, const GaussianActor& pi_on,
                             const GaussianActor& pi_off, const Matrix& states, double alpha, int samples,
                             double slack, Rng& rng) {
    const Eigen::Index n = states.cols();
    const Matrix a_dot = pi_off.mean_action(states);
    SandwichAudit out;
    out.v_anchor = q_on.min_value(states, a_dot) - alpha * pi_on.log_prob(states, a_dot);
    const Matrix rs = repeat_cols(states, samples);
    const auto smp = pi_on.sample(rs, rng);
    const Vector soft_on = q_on.min_value(rs, smp.action) - alpha * smp.log_prob;
    const Vector soft_fqe = q_fqe.min_value(rs, smp.action) - alpha * smp.log_prob;
    out.v_align.resize(n);
    out.v_fqe.resize(n);
    Eigen::Index pass = 0;
    for (Eigen::Index j = 0; j < n; ++j) {
        const auto on = soft_on.segment(j * samples, samples);
        const auto fq = soft_fqe.segment(j * samples, samples);
        out.v_align[j] = on.mean();
        double sum = 0.0;
        int cnt = 0;
        for (int k = 0; k < samples; ++k)
            if (fq[k] <= out.v_anchor[j]) {
                sum += fq[k];
                ++cnt;
            }
        out.v_fqe[j] = cnt > 0 ? sum / cnt : fq.minCoeff();
        const double eps = slack * std::abs(out.v_anchor[j]);
        if (out.v_fqe[j] - eps <= out.v_align[j] && out.v_align[j] <= out.v_anchor[j] + eps) ++pass;
    }
    out.pass_rate = static_cast<double>(pass) / static_cast<double>(n);
    return out;
}

double rank_disagreement_rate(const TwinCritic& critic, const GaussianActor& actor, const Matrix& states, int pairs,
                              Rng& rng) {
    if (critic.state_dim() != actor.state_dim() || critic.action_dim() != actor.action_dim())
        throw DimensionError("critic and actor dimensions differ");
    if (pairs < 1) throw ConfigError("pairs must be >= 1");
    const Matrix rs = repeat_cols(states, 2 * pairs);
    const auto smp = actor.sample(rs, rng);
    const Vector q = critic.min_value(rs, smp.action);
    const Vector lp = actor.log_prob(rs, smp.action);
    Eigen::Index counted = 0, disagree = 0;
    for (Eigen::Index i = 0; i + 1 < rs.cols(); i += 2) {
        const double dl = lp[i] - lp[i + 1];
        if (dl == 0.0) continue;
        ++counted;
        if ((dl > 0.0) != (q[i] - q[i + 1] > 0.0)) ++disagree;
    }
    return counted == 0 ? 0.0 : static_cast<double>(disagree) / static_cast<double>(counted);
}

double rank_disagreement_rate(const TwinCritic& critic, const DeterministicActor& actor, const Matrix& states,
                              int pairs, double sigma, Rng& rng) {
    if (critic.state_dim() != actor.state_dim() || critic.action_dim() != actor.action_dim())
        throw DimensionError("critic and actor dimensions differ");
    if (pairs < 1) throw ConfigError("pairs must be >= 1");
    if (!(sigma > 0.0)) throw ConfigError("sigma must be positive");
    const Matrix rs = repeat_cols(states, 2 * pairs);
    const Matrix center = actor.act(rs);
    const Matrix a = (center + sigma * gaussian_matrix(center.rows(), center.cols(), rng)).cwiseMax(-1.0).cwiseMin(1.0);
    const Vector q = critic.min_value(rs, a);
    const Vector dist = (a - center).colwise().squaredNorm().transpose();
    Eigen::Index counted = 0, disagree = 0;
    for (Eigen::Index i = 0; i + 1 < rs.cols(); i += 2) {
        const double dd = dist[i + 1] - dist[i];
        if (dd == 0.0) continue;
        ++counted;
        if ((dd > 0.0) != (q[i] - q[i + 1] > 0.0)) ++disagree;
    }
    return counted == 0 ? 0.0 : static_cast<double>(disagree) / static_cast<double>(counted);
}

// ---------------------------------------------------------------------------

Matrix aux_advantage_raw(const Matrix& mean, const Matrix& log_std, const Matrix& pre, double alpha) {
    if (mean.rows() != pre.rows() || mean.cols() != pre.cols() || log_std.rows() != pre.rows() ||
        log_std.cols() != pre.cols())
        throw DimensionError("aux_advantage_raw: shape mismatch");
    const Matrix z = ((pre - mean).array() / log_std.array().exp()).matrix();
    return (0.5 * alpha * (1.0 - z.array().square())).matrix();
}

double softplus_clip(double x, double offset) {
    const double t = x + offset;
    const double sp = t > 30.0 ? t : std::log1p(std::exp(t));
    return sp - offset;
}

Vector aux_advantage_clipped(const Matrix& raw, double offset) {
    Vector out = Vector::Zero(raw.cols());
    for (Eigen::Index j = 0; j < raw.cols(); ++j)
        for (Eigen::Index i = 0; i < raw.rows(); ++i) out[j] += softplus_clip(raw(i, j), offset);
    return out;
}

double aux_weight(const Vector& a_gae, double factor) {
    if (a_gae.size() < 2) return 1.0;
    const double m = a_gae.mean();
    const double sd = std::sqrt((a_gae.array() - m).square().sum() / static_cast<double>(a_gae.size()));
    return sd > 0.0 ? factor * sd : 1.0;
}

Vector mixed_advantage(const Vector& a_gae, const Vector& a_aux, double beta, double weight) {
    if (a_gae.size() != a_aux.size()) throw DimensionError("mixed_advantage: length mismatch");
    if (!(beta >= 0.0 && beta <= 1.0)) throw ConfigError("beta must lie in [0, 1]");
    return a_gae + beta * weight * a_aux;
}

double mixed_advantage(double a_gae, double a_aux, double beta) {
    if (!(beta >= 0.0 && beta <= 1.0)) throw ConfigError("beta must lie in [0, 1]");
    return a_gae + beta * a_aux;
}

Vector discrete_aux_advantage(const Vector& p_off, double alpha) {
    double h = 0.0;
    for (Eigen::Index a = 0; a < p_off.size(); ++a) {
        if (!(p_off[a] > 0.0)) throw ConfigError("discrete_aux_advantage: probabilities must be positive");
        h -= p_off[a] * std::log(p_off[a]);
    }
    Vector out(p_off.size());
    for (Eigen::Index a = 0; a < p_off.size(); ++a) out[a] = alpha * (std::log(p_off[a]) + h);
    return out;
}

}  // namespace o2o::align
