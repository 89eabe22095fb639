#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "o2o/models.hpp"
#include "o2o/nn.hpp"

using namespace o2o;
using nn::Activation;
using nn::Mlp;

namespace {

// Dense reference forward pass written independently of Mlp internals.
Matrix oracle_forward(const Mlp& net, const Matrix& x) {
    const auto& w = net.shape().widths;
    const Vector& p = net.params();
    Matrix h = x;
    Eigen::Index off = 0;
    for (std::size_t l = 0; l + 1 < w.size(); ++l) {
        Matrix W(w[l + 1], w[l]);
        for (int c = 0; c < w[l]; ++c)
            for (int r = 0; r < w[l + 1]; ++r) W(r, c) = p[off + c * w[l + 1] + r];
        off += static_cast<Eigen::Index>(w[l]) * w[l + 1];
        Vector b = p.segment(off, w[l + 1]);
        off += w[l + 1];
        Matrix z(w[l + 1], h.cols());
        for (Eigen::Index j = 0; j < h.cols(); ++j)
            for (int r = 0; r < w[l + 1]; ++r) {
                double acc = b[r];
                for (int c = 0; c < w[l]; ++c) acc += W(r, c) * h(c, j);
                z(r, j) = acc;
            }
        if (l + 2 < w.size()) {
            for (Eigen::Index k = 0; k < z.size(); ++k)
                z.data()[k] = net.shape().activation == Activation::relu ? std::max(0.0, z.data()[k])
                                                                         : std::tanh(z.data()[k]);
            if (net.shape().layer_norm) {
                for (Eigen::Index j = 0; j < z.cols(); ++j) {
                    double mu = z.col(j).mean();
                    double var = (z.col(j).array() - mu).square().mean();
                    z.col(j) = ((z.col(j).array() - mu) / std::sqrt(var + nn::kLayerNormEps)).matrix();
                }
            }
        }
        h = z;
    }
    return h;
}

double sq_loss(const Mlp& net, const Matrix& x, const Matrix& y) { return 0.5 * (net.forward(x) - y).squaredNorm(); }

}  // namespace

TEST(Mlp, IdentityNet) {
    Vector p(6);
    p << 1, 0, 0, 1, 0, 0;
    Mlp net({{2, 2}, Activation::relu, false}, p);
    Matrix x(2, 1);
    x << 1, 2;
    EXPECT_EQ(net.forward(x), x);
}

TEST(Mlp, ZeroWeightsGiveBias) {
    Vector p = Vector::Zero(Mlp::count_params({3, 2}));
    p.tail(2) << 0.5, -1.5;
    Mlp net({{3, 2}, Activation::tanh, false}, p);
    Rng rng(1);
    Matrix x = gaussian_matrix(3, 4, rng);
    Matrix y = net.forward(x);
    for (Eigen::Index j = 0; j < 4; ++j) {
        EXPECT_EQ(y(0, j), 0.5);
        EXPECT_EQ(y(1, j), -1.5);
    }
}

TEST(Mlp, ParameterCount) {
    EXPECT_EQ(Mlp::count_params({2, 16, 1}), (2 + 1) * 16 + (16 + 1) * 1);
    Rng rng(0);
    Mlp net({{5, 7, 3, 2}, Activation::relu, false}, rng);
    EXPECT_EQ(net.num_params(), 6 * 7 + 8 * 3 + 4 * 2);
}

TEST(Mlp, MatchesDenseOracle) {
    Rng rng(7);
    for (bool ln : {false, true})
        for (auto act : {Activation::relu, Activation::tanh}) {
            Mlp net({{2, 16, 1}, act, ln}, rng);
            Matrix x = gaussian_matrix(2, 9, rng);
            EXPECT_LT((net.forward(x) - oracle_forward(net, x)).cwiseAbs().maxCoeff(), 1e-6);
        }
}

TEST(Mlp, SpanForwardMatchesBatch) {
    Rng rng(3);
    Mlp net({{3, 8, 2}, Activation::tanh, true}, rng);
    std::vector<double> x{0.1, -0.4, 2.0};
    auto y = net.forward(std::span<const double>(x));
    Matrix xm = Eigen::Map<Matrix>(x.data(), 3, 1);
    Matrix ym = net.forward(xm);
    EXPECT_DOUBLE_EQ(y[0], ym(0, 0));
    EXPECT_DOUBLE_EQ(y[1], ym(1, 0));
}

TEST(Mlp, DimensionMismatchThrows) {
    Rng rng(3);
    Mlp net({{3, 4, 1}, Activation::relu, false}, rng);
    EXPECT_THROW(net.forward(Matrix::Zero(2, 1)), DimensionError);
}

TEST(Mlp, LayerNormNormalizesHiddenColumns) {
    Rng rng(11);
    Mlp net({{4, 32, 1}, Activation::tanh, true}, rng);
    Mlp::Tape tape;
    net.forward(gaussian_matrix(4, 6, rng), tape);
    const Matrix& h = tape.hidden.at(0);
    for (Eigen::Index j = 0; j < h.cols(); ++j) {
        EXPECT_NEAR(h.col(j).mean(), 0.0, 1e-9);
        EXPECT_NEAR(h.col(j).array().square().mean(), 1.0, 1e-3);
    }
}

TEST(Grad, ConstantLossZeroGradient) {
    Rng rng(5);
    Mlp net({{3, 6, 2}, Activation::relu, true}, rng);
    Mlp::Tape tape;
    Matrix x = gaussian_matrix(3, 4, rng);
    net.forward(x, tape);
    Vector g = Vector::Zero(net.num_params());
    Matrix dx = net.backward(tape, Matrix::Zero(2, 4), g);
    EXPECT_EQ(g.cwiseAbs().maxCoeff(), 0.0);
    EXPECT_EQ(dx.cwiseAbs().maxCoeff(), 0.0);
}

TEST(Grad, MatchesCentralDifferences) {
    Rng rng(2024);
    for (int trial = 0; trial < 12; ++trial) {
        const bool ln = trial % 2 == 1;
        const auto act = trial % 3 == 0 ? Activation::relu : Activation::tanh;
        Mlp net({{3, 7, 5, 2}, act, ln}, rng);
        Matrix x = gaussian_matrix(3, 5, rng);
        Matrix y = gaussian_matrix(2, 5, rng);
        Mlp::Tape tape;
        Matrix out = net.forward(x, tape);
        Vector g = Vector::Zero(net.num_params());
        Matrix dx = net.backward(tape, out - y, g);
        const double h = 1e-5;
        for (Eigen::Index k = 0; k < net.num_params(); ++k) {
            Mlp plus = net, minus = net;
            plus.params()[k] += h;
            minus.params()[k] -= h;
            double fd = (sq_loss(plus, x, y) - sq_loss(minus, x, y)) / (2 * h);
            EXPECT_NEAR(g[k], fd, 1e-4 * std::max(1.0, std::abs(fd))) << "param " << k;
        }
        for (Eigen::Index k = 0; k < x.size(); ++k) {
            Matrix xp = x, xm = x;
            xp.data()[k] += h;
            xm.data()[k] -= h;
            double fd = (sq_loss(net, xp, y) - sq_loss(net, xm, y)) / (2 * h);
            EXPECT_NEAR(dx.data()[k], fd, 1e-4 * std::max(1.0, std::abs(fd)));
        }
        Matrix dx_only = net.input_grad(tape, out - y);
        EXPECT_LT((dx_only - dx).cwiseAbs().maxCoeff(), 1e-12);
    }
}

TEST(Adam, ZeroGradientLeavesParams) {
    Vector p(3);
    p << 1, -2, 3;
    Vector before = p;
    auto st = nn::make_adam(3, 1e-2);
    nn::adam_step(p, Vector::Zero(3), st);
    EXPECT_EQ(p, before);
    EXPECT_EQ(st.step, 1);
}

TEST(Adam, FirstStepIsSignScaled) {
    Vector p = Vector::Zero(3);
    Vector g(3);
    g << 0.5, -3.0, 1e-3;
    auto st = nn::make_adam(3, 0.1);
    nn::adam_step(p, g, st);
    for (int i = 0; i < 3; ++i) EXPECT_NEAR(p[i], -0.1 * g[i] / (std::abs(g[i]) + 1e-8), 1e-9);
}

TEST(Adam, DescendsQuadratic) {
    Vector theta(1);
    theta << 1.0;
    auto st = nn::make_adam(1, 0.05);
    double prev = 1.0;
    for (int i = 0; i < 10; ++i) {
        Vector g = 2.0 * theta;
        nn::adam_step(theta, g, st);
        EXPECT_LT(std::abs(theta[0]), prev);
        prev = std::abs(theta[0]);
    }
}

TEST(Adam, NonFiniteGradientThrows) {
    Vector p = Vector::Zero(2);
    Vector g(2);
    g << 1.0, std::nan("");
    auto st = nn::make_adam(2, 0.1);
    EXPECT_THROW(nn::adam_step(p, g, st), NumericalError);
}

TEST(Adam, DeterministicTrajectory) {
    auto run = [] {
        Rng rng(99);
        Mlp net({{2, 8, 1}, Activation::tanh, true}, rng);
        auto st = nn::make_adam(net.num_params(), 1e-2);
        Matrix x = gaussian_matrix(2, 16, rng);
        Vector y = x.row(0).transpose();
        for (int i = 0; i < 20; ++i) regress_scalar(net, st, x, y);
        return net.params();
    };
    EXPECT_EQ(run(), run());
}

TEST(LogProb, StandardNormalAtMean) {
    Vector m = Vector::Zero(1), ls = Vector::Zero(1), u = Vector::Zero(1);
    EXPECT_NEAR(nn::squashed_log_prob_pre(m, ls, u), -0.9189385332, 1e-9);
}

TEST(LogProb, FloorAtMinusFifty) {
    Vector m = Vector::Zero(1), ls = Vector::Constant(1, -5.0), u = Vector::Constant(1, 0.1);
    // raw Gaussian term is about -(0.1/e^-5)^2/2 = -110
    EXPECT_EQ(nn::squashed_log_prob_pre(m, ls, u), -50.0);
    Vector a = Vector::Constant(1, 1.0);
    EXPECT_GE(nn::squashed_log_prob(m, ls, a), -50.0);
    EXPECT_TRUE(std::isfinite(nn::squashed_log_prob(m, Vector::Zero(1), a)));
}

TEST(LogProb, SymmetricActions) {
    Vector m = Vector::Zero(2), ls(2);
    ls << -0.3, 0.4;
    Vector a(2);
    a << 0.3, -0.7;
    EXPECT_NEAR(nn::squashed_log_prob(m, ls, a), nn::squashed_log_prob(m, ls, -a), 1e-12);
}

TEST(LogProb, TanhCorrectionStable) {
    for (double u : {0.0, 0.5, -3.0, 20.0, -40.0}) {
        double direct = std::log(4.0) - 2.0 * std::abs(u) - 2.0 * std::log1p(std::exp(-2.0 * std::abs(u)));
        EXPECT_NEAR(nn::log1m_tanh_sq(u), direct, 1e-12);
    }
}

TEST(LogProb, GradientMatchesFiniteDifference) {
    Rng rng(4);
    for (int t = 0; t < 20; ++t) {
        Vector m = gaussian_matrix(3, 1, rng) * 0.5, ls = gaussian_matrix(3, 1, rng) * 0.3,
               u = gaussian_matrix(3, 1, rng);
        auto g = nn::squashed_log_prob_pre_grad(m, ls, u);
        if (g.floored) continue;
        const double h = 1e-6;
        for (int k = 0; k < 3; ++k) {
            auto fd = [&](Vector& v) {
                v[k] += h;
                double up = nn::squashed_log_prob_pre(m, ls, u);
                v[k] -= 2 * h;
                double dn = nn::squashed_log_prob_pre(m, ls, u);
                v[k] += h;
                return (up - dn) / (2 * h);
            };
            EXPECT_NEAR(g.d_pre[k], fd(u), 1e-5);
            EXPECT_NEAR(g.d_mean[k], fd(m), 1e-5);
            EXPECT_NEAR(g.d_log_std[k], fd(ls), 1e-5);
        }
    }
}

TEST(GaussianActor, SampledActionsInsideBox) {
    Rng rng(8);
    GaussianActor actor(3, 2, NetConfig{{16, 16}}, rng);
    auto s = actor.sample(gaussian_matrix(3, 200, rng) * 3.0, rng);
    EXPECT_LT(s.action.cwiseAbs().maxCoeff(), 1.0);
    EXPECT_GE(s.log_prob.minCoeff(), -50.0);
}

TEST(GaussianActor, ReparamGradientMatchesFiniteDifference) {
    // loss = sum_j c * u_j^2 + coef * log pi(u_j) with fixed noise.
    Rng rng(17);
    GaussianActor actor(2, 2, NetConfig{{8}, Activation::tanh}, rng);
    Matrix states = gaussian_matrix(2, 4, rng);
    Rng noise_rng(3);
    auto s = actor.sample(states, noise_rng);
    Vector coef = Vector::Constant(4, 0.3);
    auto loss_of = [&](const GaussianActor& a) {
        auto h = a.heads(states);
        double total = 0.0;
        for (Eigen::Index j = 0; j < 4; ++j) {
            Vector u = h.mean.col(j) + (h.log_std.col(j).array().exp() * s.eps.col(j).array()).matrix();
            total += 0.7 * u.squaredNorm() + coef[j] * nn::squashed_log_prob_pre(h.mean.col(j), h.log_std.col(j), u);
        }
        return total;
    };
    auto [dm, dls] = actor.reparam_grad(s, 1.4 * s.pre, coef);
    Vector g = Vector::Zero(actor.net().num_params());
    actor.backward(s.tape, s.heads, dm, dls, g);
    const double h = 1e-6;
    for (Eigen::Index k = 0; k < g.size(); ++k) {
        GaussianActor p = actor, m = actor;
        p.net().params()[k] += h;
        m.net().params()[k] -= h;
        double fd = (loss_of(p) - loss_of(m)) / (2 * h);
        EXPECT_NEAR(g[k], fd, 1e-4 * std::max(1.0, std::abs(fd)));
    }
}

TEST(TwinCritic, ActionGradMatchesFiniteDifference) {
    Rng rng(21);
    TwinCritic c(3, 2, NetConfig{{16, 16}}, true, rng);
    Matrix s = gaussian_matrix(3, 5, rng), a = gaussian_matrix(2, 5, rng) * 0.5;
    Vector w = Vector::Constant(5, 1.0);
    Matrix g = c.action_grad(s, a, w);
    const double h = 1e-6;
    for (Eigen::Index k = 0; k < a.size(); ++k) {
        Matrix ap = a, am = a;
        ap.data()[k] += h;
        am.data()[k] -= h;
        double fd = (c.min_value(s, ap).sum() - c.min_value(s, am).sum()) / (2 * h);
        EXPECT_NEAR(g.data()[k], fd, 1e-5);
    }
}

TEST(Checkpoint, RoundTripAndCorruption) {
    Rng rng(31);
    TwinCritic c(3, 1, NetConfig{{8, 8}}, true, rng);
    auto path = std::filesystem::temp_directory_path() / "o2o_test_critic.ckpt";
    save_critic(path, c, 31);
    EXPECT_EQ(checkpoint_kind(path), "twin_critic");
    TwinCritic back = load_twin_critic(path);
    Matrix s = gaussian_matrix(3, 4, rng), a = gaussian_matrix(1, 4, rng);
    // Parameters are stored in single precision.
    EXPECT_LT((back.value(0, s, a) - c.value(0, s, a)).cwiseAbs().maxCoeff(), 1e-5);
    EXPECT_EQ(back.state_dim(), 3);
    EXPECT_TRUE(back.q[0].shape().layer_norm);

    auto size = std::filesystem::file_size(path);
    std::filesystem::resize_file(path, size - 1);
    EXPECT_THROW(load_twin_critic(path), FormatError);
    std::filesystem::remove(path);
}

TEST(Checkpoint, ActorKindsAreChecked) {
    Rng rng(32);
    GaussianActor g(2, 1, NetConfig{{4}}, rng);
    auto path = std::filesystem::temp_directory_path() / "o2o_test_actor.ckpt";
    save_actor(path, g, 1);
    EXPECT_NO_THROW(load_gaussian_actor(path));
    EXPECT_THROW(load_deterministic_actor(path), FormatError);
    std::filesystem::remove(path);
}
