#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "o2o/envs.hpp"

using namespace o2o;
using namespace o2o::envs;

TEST(Pendulum, ResetIsDeterministicPerSeed) {
    Pendulum env;
    Rng a(42), b(42);
    EXPECT_EQ(env.reset(a), env.reset(b));
}

TEST(Pendulum, RewardAtUprightRestIsZero) {
    Pendulum env;
    auto r = env.step(Pendulum::from_angle(0.0, 0.0), Vector::Zero(1));
    EXPECT_EQ(r.reward, 0.0);
    EXPECT_FALSE(r.terminal);
}

TEST(Pendulum, RewardHangingDown) {
    Pendulum env;
    auto r = env.step(Pendulum::from_angle(std::numbers::pi, 0.0), Vector::Zero(1));
    EXPECT_NEAR(r.reward, -std::numbers::pi * std::numbers::pi, 1e-12);
}

TEST(Pendulum, DynamicsMatchHandIntegration) {
    Pendulum env;
    const double th = 0.3, thd = -0.5, a = 0.4;
    auto r = env.step(Pendulum::from_angle(th, thd), Vector::Constant(1, a));
    double u = 2.0 * a;
    double thdd = 1.5 * 10.0 * std::sin(th) + 3.0 * u;
    double thd2 = thd + thdd * 0.05;
    double th2 = th + thd2 * 0.05;
    EXPECT_NEAR(Pendulum::angle(r.next_state), th2, 1e-12);
    EXPECT_NEAR(r.next_state[2], thd2, 1e-12);
    EXPECT_NEAR(r.reward, -(th * th + 0.1 * thd * thd + 0.001 * u * u), 1e-12);
}

TEST(Pendulum, OutOfBoundsActionIsClamped) {
    Pendulum env;
    auto s = Pendulum::from_angle(0.2, 0.0);
    auto big = env.step(s, Vector::Constant(1, 5.0));
    auto one = env.step(s, Vector::Constant(1, 1.0));
    EXPECT_TRUE(big.clamped);
    EXPECT_FALSE(one.clamped);
    EXPECT_EQ(big.next_state, one.next_state);
}

TEST(Pendulum, ZeroTorqueBeatsMaxTorqueNearUpright) {
    Pendulum env;
    env.horizon_ = 50;
    double zero_total = 0.0, max_total = 0.0;
    for (int i = 0; i < 10; ++i) {
        Rng rng(i);
        Vector s0 = Pendulum::from_angle(uniform(rng, -0.1, 0.1), 0.0);
        auto roll = [&](double a) {
            Vector s = s0;
            double ret = 0.0;
            for (int t = 0; t < env.horizon(); ++t) {
                auto r = env.step(s, Vector::Constant(1, a));
                ret += r.reward;
                s = r.next_state;
            }
            return ret;
        };
        zero_total += roll(0.0);
        max_total += roll(1.0);
    }
    EXPECT_GT(zero_total, max_total);
}

TEST(Pendulum, RewardNeverPositive) {
    Pendulum env;
    Rng rng(1);
    for (int i = 0; i < 1000; ++i) {
        Vector s = env.reset(rng);
        s[2] = uniform(rng, -8, 8);
        EXPECT_LE(env.step(s, Vector::Constant(1, uniform(rng, -1, 1))).reward, 0.0);
    }
}

TEST(PointNav, ResetInsideStartRegion) {
    PointNav env;
    Rng rng(5);
    for (int i = 0; i < 100; ++i) EXPECT_TRUE(PointNav::in_start_region(env.reset(rng)));
}

TEST(PointNav, GoalGivesRewardAndDone) {
    PointNav env;
    Vector s(4);
    s << 3.0, 3.0, 0.0, 0.0;
    auto r = env.step(s, Vector::Zero(2));
    EXPECT_EQ(r.reward, 1.0);
    EXPECT_TRUE(r.terminal);
    Vector far(4);
    far << 0.0, 0.0, 0.0, 0.0;
    auto r2 = env.step(far, Vector::Zero(2));
    EXPECT_EQ(r2.reward, 0.0);
    EXPECT_FALSE(r2.terminal);
}

TEST(Envs, StepIsPure) {
    for (auto id : {"pendulum", "pointnav"}) {
        auto env = make_env(id);
        Rng rng(9);
        Vector s = env->reset(rng);
        Vector a = Vector::Constant(env->action_dim(), 0.3);
        auto r1 = env->step(s, a), r2 = env->step(s, a);
        EXPECT_EQ(r1.next_state, r2.next_state);
        EXPECT_EQ(r1.reward, r2.reward);
    }
    EXPECT_THROW(make_env("mujoco"), ConfigError);
}

TEST(Evaluate, DeterministicAndSingleEpisode) {
    Pendulum env;
    auto pol = scripted_policy("pendulum", "medium");
    auto a = evaluate_policy(env, pol, 3, 11);
    auto b = evaluate_policy(env, pol, 3, 11);
    EXPECT_EQ(a.returns, b.returns);
    auto one = evaluate_policy(env, pol, 1, 11);
    EXPECT_EQ(one.returns.size(), 1u);
    EXPECT_EQ(one.mean, one.returns[0]);
    EXPECT_EQ(one.returns[0], a.returns[0]);
}

TEST(Evaluate, ScriptedQualityOrdering) {
    Pendulum env;
    double rnd = evaluate_policy(env, scripted_policy("pendulum", "random", 1), 20, 3).mean;
    double med = evaluate_policy(env, scripted_policy("pendulum", "medium"), 20, 3).mean;
    double exp = evaluate_policy(env, scripted_policy("pendulum", "expert"), 20, 3).mean;
    EXPECT_LT(rnd, med);
    EXPECT_LT(med, exp);
}

TEST(Tabular, ChainIsValid) {
    auto mdp = make_chain(8, 0.9, 0.1);
    EXPECT_NO_THROW(mdp.validate());
    EXPECT_EQ(mdp.reset(), 0);
    auto bad = mdp;
    bad.p(0, 0, 0) += 0.1;
    EXPECT_THROW(bad.validate(), ConfigError);
    EXPECT_EQ(make_chain_from_id("chain-16", 0.9).n_states, 16);
}

TEST(Tabular, ZeroDiscountGivesReward) {
    auto mdp = make_chain(5, 0.0);
    Matrix pi = Matrix::Constant(5, 2, 0.5);
    EXPECT_LT((exact_policy_eval(mdp, pi) - mdp.reward).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(Tabular, TwoStateHandSolution) {
    TabularMdp mdp;
    mdp.n_states = 2;
    mdp.n_actions = 1;
    mdp.gamma = 0.5;
    mdp.transition = {0, 1, 0, 1};  // both states move to the absorbing state 1
    mdp.reward = Matrix(2, 1);
    mdp.reward << 1, 0;
    Matrix q = exact_policy_eval(mdp, Matrix::Ones(2, 1));
    EXPECT_NEAR(q(0, 0), 1.0, 1e-14);
    EXPECT_NEAR(q(1, 0), 0.0, 1e-14);
}

TEST(Tabular, ResidualTinyAndUnitDiscountRejected) {
    auto mdp = make_chain(12, 0.95, 0.2);
    Rng rng(2);
    Matrix pi(12, 2);
    for (int s = 0; s < 12; ++s) {
        double p = uniform(rng, 0, 1);
        pi(s, 0) = p;
        pi(s, 1) = 1 - p;
    }
    Matrix q = exact_policy_eval(mdp, pi);
    EXPECT_LT(bellman_residual(mdp, pi, q), 1e-10);
    mdp.gamma = 1.0;
    EXPECT_THROW(exact_policy_eval(mdp, pi), ConfigError);
}

TEST(Tabular, UniformPolicySymmetricUnderRelabeling) {
    // Symmetric ring: mirror s -> n-1-s swaps the two actions.
    const int n = 6;
    TabularMdp mdp;
    mdp.n_states = n;
    mdp.n_actions = 2;
    mdp.gamma = 0.9;
    mdp.transition.assign(n * 2 * n, 0.0);
    mdp.reward = Matrix::Zero(n, 2);
    for (int s = 0; s < n; ++s) {
        mdp.p(s, 0, std::max(s - 1, 0)) = 1.0;
        mdp.p(s, 1, std::min(s + 1, n - 1)) = 1.0;
    }
    mdp.reward(0, 0) = 1.0;
    mdp.reward(n - 1, 1) = 1.0;
    Matrix q = exact_policy_eval(mdp, Matrix::Constant(n, 2, 0.5));
    for (int s = 0; s < n; ++s) EXPECT_NEAR(q(s, 0), q(n - 1 - s, 1), 1e-12);
}

TEST(Tabular, ValueIterationGreedyOnChain) {
    auto mdp = make_chain(8, 0.9);
    auto vi = value_iteration(mdp);
    for (int s = 0; s < 8; ++s) EXPECT_EQ(vi.greedy[s], 1);
    Matrix pi = Matrix::Zero(8, 2);
    pi.col(1).setOnes();
    EXPECT_LT((exact_policy_eval(mdp, pi) - vi.q).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Tabular, SoftEvalReducesToPlainAtZeroTemperature) {
    auto mdp = make_chain(6, 0.8, 0.1);
    Matrix pi = Matrix::Constant(6, 2, 0.5);
    EXPECT_LT((exact_soft_policy_eval(mdp, pi, 0.0) - exact_policy_eval(mdp, pi)).cwiseAbs().maxCoeff(), 1e-12);
    Matrix soft = exact_soft_policy_eval(mdp, pi, 0.2);
    // Uniform policy entropy log 2 is added at every successor: shift = gamma * 0.2 log2 / (1 - gamma).
    Matrix plain = exact_policy_eval(mdp, pi);
    double shift = 0.8 * 0.2 * std::log(2.0) / (1 - 0.8);
    EXPECT_LT((soft - plain).array().abs().matrix().cwiseAbs().maxCoeff() - shift, 1e-9);
    EXPECT_NEAR((soft - plain)(0, 0), shift, 1e-9);
}
