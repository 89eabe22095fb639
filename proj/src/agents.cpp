#include "o2o/agents.hpp"

#include <algorithm>
#include <cmath>

namespace o2o::agents {

Temperature::Temperature(double alpha, double target_entropy, bool learn, double lr)
    : log_alpha_(Vector::Constant(1, std::log(alpha))),
      opt_(nn::make_adam(1, lr)),
      target_entropy_(target_entropy),
      learn_(learn) {
    if (!(alpha > 0.0)) throw ConfigError("temperature must be positive");
}

double Temperature::alpha() const { return std::exp(log_alpha_[0]); }

void Temperature::update(const Vector& log_probs) {
    if (!learn_) return;
    Vector grad(1);
    grad[0] = -(log_probs.array() + target_entropy_).mean();
    nn::adam_step(log_alpha_, grad, opt_);
}

ActorStats sac_actor_step(GaussianActor& actor, nn::AdamState& opt, const TwinCritic& critic, const Matrix& states,
                          double alpha, Rng& rng, const GaussianActor* ref, double lambda) {
    const Eigen::Index n = states.cols();
    const double inv_n = 1.0 / static_cast<double>(n);
    const auto s = actor.sample(states, rng);
    const Vector q = critic.min_value(states, s.action);
    const Matrix dq_da = critic.action_grad(states, s.action, Vector::Constant(n, inv_n));

    Matrix ext_du = -(dq_da.array() * (1.0 - s.action.array().square())).matrix();
    ActorStats st;
    if (ref != nullptr && lambda != 0.0) {
        const auto rh = ref->heads(states);
        double pen = 0.0;
        for (Eigen::Index j = 0; j < n; ++j) {
            const auto g = nn::squashed_log_prob_pre_grad(rh.mean.col(j), rh.log_std.col(j), s.pre.col(j));
            ext_du.col(j) -= lambda * inv_n * g.d_pre;
            pen += s.log_prob[j] - g.value;
        }
        st.penalty_mean = pen * inv_n;
    } else if (ref != nullptr) {
        const auto rh = ref->heads(states);
        double pen = 0.0;
        for (Eigen::Index j = 0; j < n; ++j)
            pen += s.log_prob[j] - nn::squashed_log_prob_pre(rh.mean.col(j), rh.log_std.col(j), s.pre.col(j));
        st.penalty_mean = pen * inv_n;
    }

    const Vector coef = Vector::Constant(n, (alpha + lambda) * inv_n);
    const auto [d_mean, d_log_std] = actor.reparam_grad(s, ext_du, coef);
    Vector grad = Vector::Zero(actor.net().num_params());
    actor.backward(s.tape, s.heads, d_mean, d_log_std, grad);
    nn::adam_step(actor.net().params(), grad, opt);

    st.mean_log_prob = s.log_prob.mean();
    st.mean_q = q.mean();
    st.loss = alpha * st.mean_log_prob - st.mean_q + lambda * st.penalty_mean;
    return st;
}

Vector sac_target(const TwinCritic& critic, const GaussianActor& actor, const data::Batch& b, double gamma,
                  double alpha, Rng& rng, const GaussianActor* ref, double lambda) {
    const auto s = actor.sample(b.next_states, rng);
    Vector next = critic.target_min(b.next_states, s.action) - alpha * s.log_prob;
    if (ref != nullptr && lambda != 0.0) {
        const auto rh = ref->heads(b.next_states);
        for (Eigen::Index j = 0; j < next.size(); ++j)
            next[j] -= lambda * (s.log_prob[j] -
                                 nn::squashed_log_prob_pre(rh.mean.col(j), rh.log_std.col(j), s.pre.col(j)));
    }
    Vector y = b.rewards + gamma * (1.0 - b.dones.array()).matrix().cwiseProduct(next);
    if (!y.allFinite()) throw NumericalError("non-finite SAC target");
    return y;
}

Matrix smoothed_actions(const DeterministicActor& actor, const Matrix& states, double noise, double clip, Rng& rng) {
    Matrix a = actor.act(states);
    if (noise <= 0.0) return a;
    for (Eigen::Index k = 0; k < a.size(); ++k) {
        const double eps = std::clamp(noise * standard_normal(rng), -clip, clip);
        a.data()[k] = std::clamp(a.data()[k] + eps, -1.0, 1.0);
    }
    return a;
}

Vector mean_sq_gap(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) throw DimensionError("action batches differ in shape");
    return (a - b).colwise().squaredNorm().transpose() / static_cast<double>(a.rows());
}

Vector td3_target(const TwinCritic& critic, const DeterministicActor& target_actor, const data::Batch& b, double gamma,
                  double noise, double clip, Rng& rng, const DeterministicActor* current, const DeterministicActor* ref,
                  double lambda) {
    const Matrix a = smoothed_actions(target_actor, b.next_states, noise, clip, rng);
    Vector next = critic.target_min(b.next_states, a);
    if (ref != nullptr && current != nullptr && lambda != 0.0)
        next -= lambda * mean_sq_gap(current->act(b.next_states), ref->act(b.next_states));
    Vector y = b.rewards + gamma * (1.0 - b.dones.array()).matrix().cwiseProduct(next);
    if (!y.allFinite()) throw NumericalError("non-finite TD3 target");
    return y;
}

ActorStats td3_actor_step(DeterministicActor& actor, nn::AdamState& opt, const TwinCritic& critic,
                          const Matrix& states, double q_weight, const Matrix* anchors, double anchor_weight) {
    const Eigen::Index n = states.cols();
    const double inv_n = 1.0 / static_cast<double>(n);
    nn::Mlp::Tape tape;
    const Matrix a = actor.act(states, tape);
    Matrix d_action = Matrix::Zero(a.rows(), n);
    ActorStats st;
    if (q_weight != 0.0) {
        d_action = -q_weight * critic.action_grad(states, a, Vector::Constant(n, inv_n), true);
        st.mean_q = critic.value(0, states, a).mean();
    }
    if (anchors != nullptr) {
        const Matrix diff = a - *anchors;
        st.penalty_mean = diff.squaredNorm() * inv_n / static_cast<double>(a.rows());
        d_action += (2.0 * anchor_weight * inv_n / static_cast<double>(a.rows())) * diff;
    }
    Vector grad = Vector::Zero(actor.net().num_params());
    actor.backward(tape, a, d_action, grad);
    nn::adam_step(actor.net().params(), grad, opt);
    st.loss = -q_weight * st.mean_q + anchor_weight * st.penalty_mean;
    return st;
}

envs::Policy greedy_policy(const GaussianActor& actor) {
    return [actor](const Vector& s) -> Vector { return actor.mean_action(s).col(0); };
}

envs::Policy greedy_policy(const DeterministicActor& actor) {
    return [actor](const Vector& s) -> Vector { return actor.act(s).col(0); };
}

Score evaluate_score(const envs::ContinuousEnv& env, const envs::Policy& policy, int episodes, std::uint64_t seed) {
    const auto r = envs::evaluate_policy(env, policy, episodes, seed);
    Score sc;
    sc.raw_mean = r.mean;
    double sum = 0.0, sq = 0.0;
    for (double x : r.returns) {
        const double v = envs::normalized_score(env.id(), x);
        sum += v;
        sq += v * v;
    }
    const double n = static_cast<double>(r.returns.size());
    sc.mean = sum / n;
    sc.std = std::sqrt(std::max(0.0, sq / n - sc.mean * sc.mean));
    return sc;
}

}  // namespace o2o::agents
