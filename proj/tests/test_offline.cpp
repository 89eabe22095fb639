#include <gtest/gtest.h>

#include <cmath>

#include "o2o/agents.hpp"
#include "o2o/offline.hpp"

using namespace o2o;
using namespace o2o::offline;

namespace {

const NetConfig kSmall{{32, 32}, nn::Activation::relu};

data::OfflineDataset pendulum_data(const std::string& quality, std::size_t n, double noise, std::uint64_t seed = 1) {
    envs::Pendulum env;
    return data::generate_dataset(env, envs::scripted_policy("pendulum", quality), noise, n, seed, quality, quality);
}

data::OfflineDataset single_pair(const Vector& s, const Vector& a, int copies) {
    data::OfflineDataset ds({"pendulum", 3, 1, "fixed", "expert", 0.99});
    ds.begin_trajectory();
    for (int i = 0; i < copies; ++i) ds.append({s, a, 0.0, s, false});
    return ds;
}

double mean_episode_return(const data::OfflineDataset& ds, int horizon) {
    double sum = 0.0;
    int count = 0;
    for (std::size_t k = 0; k < ds.num_trajectories(); ++k) {
        auto [a, b] = ds.trajectory(k);
        if (static_cast<int>(b - a) != horizon) continue;
        for (std::size_t i = a; i < b; ++i) sum += ds.at(i).reward;
        ++count;
    }
    return sum / count;
}

}  // namespace

TEST(Bc, SinglePairIsImitated) {
    Vector s(3), a(1);
    s << 0.6, 0.8, -0.3;
    a << 0.42;
    BcConfig cfg;
    cfg.net = kSmall;
    cfg.steps = 1500;
    cfg.batch_size = 32;
    cfg.lr = 1e-3;
    auto r = train_bc(single_pair(s, a, 64), cfg);
    EXPECT_NEAR(r.actor.mean_action(s)(0, 0), 0.42, 0.05);
}

TEST(Bc, ExpertCloneReachesNinetyPercent) {
    envs::Pendulum env;
    auto ds = pendulum_data("expert", 10000, 0.1);
    BcConfig cfg;
    cfg.net = NetConfig{{64, 64}, nn::Activation::relu};
    cfg.steps = 10000;
    cfg.lr = 1e-3;
    auto r = train_bc(ds, cfg);
    const double clone = agents::evaluate_score(env, agents::greedy_policy(r.actor), 10, 5).mean;
    const double behavior = agents::evaluate_score(env, envs::scripted_policy("pendulum", "expert"), 10, 5).mean;
    EXPECT_GE(clone, 0.9 * behavior);
}

TEST(Bc, EntropyBonusWidensPolicy) {
    auto ds = pendulum_data("medium", 3000, 0.3);
    BcConfig cfg;
    cfg.net = kSmall;
    cfg.steps = 800;
    const double plain = train_bc(ds, cfg).mean_entropy;
    cfg.entropy_coef = 0.5;
    const double bonus = train_bc(ds, cfg).mean_entropy;
    EXPECT_GT(bonus, plain);
}

TEST(Bc, DeterministicPerSeed) {
    auto ds = pendulum_data("medium", 500, 0.3);
    BcConfig cfg;
    cfg.net = kSmall;
    cfg.steps = 50;
    EXPECT_EQ(train_bc(ds, cfg).actor.net().params(), train_bc(ds, cfg).actor.net().params());
}

TEST(Td3Bc, ZeroQWeightIsBehaviorCloning) {
    Vector s(3), a(1);
    s << -0.2, 0.98, 1.1;
    a << -0.6;
    Td3BcConfig cfg;
    cfg.actor_net = cfg.critic_net = kSmall;
    cfg.alpha = 0.0;
    cfg.steps = 3000;
    cfg.batch_size = 32;
    cfg.actor_lr = 1e-3;
    auto r = train_td3_bc(single_pair(s, a, 64), cfg);
    EXPECT_NEAR(r.actor.act(s)(0, 0), -0.6, 0.05);
}

class Td3BcMedium : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        ds_ = new data::OfflineDataset(pendulum_data("medium", 10000, 0.3));
        Td3BcConfig cfg;
        cfg.actor_net = cfg.critic_net = NetConfig{{64, 64}, nn::Activation::relu};
        cfg.steps = 3000;
        res_ = new Td3BcResult(train_td3_bc(*ds_, cfg));
    }
    static void TearDownTestSuite() {
        delete ds_;
        delete res_;
    }
    static data::OfflineDataset* ds_;
    static Td3BcResult* res_;
};
data::OfflineDataset* Td3BcMedium::ds_ = nullptr;
Td3BcResult* Td3BcMedium::res_ = nullptr;

TEST_F(Td3BcMedium, BeatsDatasetAverageReturn) {
    envs::Pendulum env;
    const double offline = envs::evaluate_policy(env, agents::greedy_policy(res_->actor), 10, 3).mean;
    EXPECT_GT(offline, mean_episode_return(*ds_, env.horizon()));
}

TEST_F(Td3BcMedium, HeldOutResidualBounded) {
    EXPECT_TRUE(std::isfinite(res_->train_residual));
    EXPECT_LT(res_->heldout_residual, 10.0 * res_->train_residual);
}

TEST_F(Td3BcMedium, ImprovementMismatchIsPresent) {
    Rng rng(4);
    const Matrix s = ds_->gather(data::sample_indices(ds_->size(), 256, rng)).states;
    EXPECT_GT(improvement_mismatch_rate(res_->critic, res_->actor, s, 0.2, 16, rng), 0.0);
}

class Cql : public ::testing::Test {
protected:
    static CqlResult train(double cql_alpha) {
        CqlConfig cfg;
        cfg.actor_net = cfg.critic_net = kSmall;
        cfg.steps = 600;
        cfg.num_sampled_actions = 4;
        cfg.cql_alpha = cql_alpha;
        cfg.seed = 2;
        return train_cql_lite(*ds_, cfg);
    }
    static void SetUpTestSuite() {
        ds_ = new data::OfflineDataset(pendulum_data("medium", 4000, 0.3));
        pess_ = new CqlResult(train(1.0));
        plain_ = new CqlResult(train(0.0));
    }
    static void TearDownTestSuite() {
        delete ds_;
        delete pess_;
        delete plain_;
    }
    static double gap(const CqlResult& r) {
        Rng rng(8);
        const auto b = ds_->gather(data::sample_indices(ds_->size(), 1024, rng));
        const auto g = q_gap(r.critic, b, rng);
        return g.data_actions - g.random_actions;
    }
    static data::OfflineDataset* ds_;
    static CqlResult* pess_;
    static CqlResult* plain_;
};
data::OfflineDataset* Cql::ds_ = nullptr;
CqlResult* Cql::pess_ = nullptr;
CqlResult* Cql::plain_ = nullptr;

TEST_F(Cql, PenaltyMakesRandomActionsLookWorse) { EXPECT_GT(gap(*pess_), 0.0); }

TEST_F(Cql, ZeroPenaltyRemovesPessimism) { EXPECT_GT(gap(*pess_), gap(*plain_)); }

TEST_F(Cql, HeldOutResidualBounded) { EXPECT_LT(pess_->heldout_residual, 10.0 * pess_->train_residual); }

TEST_F(Cql, DeterministicPerSeed) {
    auto again = train(1.0);
    EXPECT_EQ(again.actor.net().params(), pess_->actor.net().params());
    EXPECT_EQ(again.critic.q[0].params(), pess_->critic.q[0].params());
}

TEST(Offline, AlgoNamesRoundTrip) {
    for (auto a : {Algo::bc, Algo::td3bc, Algo::cql}) EXPECT_EQ(algo_from_string(to_string(a)), a);
    EXPECT_THROW(algo_from_string("iql"), ConfigError);
}

TEST(Offline, EmptyDatasetRejected) {
    data::OfflineDataset empty({"pendulum", 3, 1, "none", "medium", 0.99});
    EXPECT_ANY_THROW(train_bc(empty, BcConfig{}));
    EXPECT_ANY_THROW(train_td3_bc(empty, Td3BcConfig{}));
    EXPECT_ANY_THROW(train_cql_lite(empty, CqlConfig{}));
}
