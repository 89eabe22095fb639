// Acceptance suite: one PASS/FAIL line per criterion, exit status 0 iff all pass.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "align_fixtures.hpp"
#include "o2o/pipeline.hpp"

using namespace o2o;
using nlohmann::json;

namespace {

double cpu_seconds() { return static_cast<double>(std::clock()) / CLOCKS_PER_SEC; }

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, auto... xs) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, xs...);
    return buf;
}

// ---------------------------------------------------------------------------
// 1

double rel_err(double a, double b) { return std::abs(a - b) / std::max(1e-6, std::abs(a) + std::abs(b)); }

Outcome gradient_check() {
    const double t0 = cpu_seconds();
    Rng rng(101);
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<int> widths{1 + static_cast<int>(rng() % 5)};
        const int depth = 1 + static_cast<int>(rng() % 3);
        for (int l = 0; l < depth; ++l) widths.push_back(2 + static_cast<int>(rng() % 7));
        widths.push_back(1 + static_cast<int>(rng() % 3));
        const auto act = trial % 2 ? nn::Activation::tanh : nn::Activation::relu;
        const nn::Mlp net({widths, act, trial % 3 == 0}, rng);
        const Matrix x = gaussian_matrix(widths.front(), 4, rng);
        const Matrix y = gaussian_matrix(widths.back(), 4, rng);
        const int kind = trial % 3;

        // loss(out) and dloss/dout for three loss families
        auto loss = [&](const Matrix& out) {
            if (kind == 0) return 0.5 * (out - y).squaredNorm();
            if (kind == 1) {
                double l = 0.0;
                for (Eigen::Index j = 0; j < out.cols(); ++j) {
                    const double m = out.col(j).maxCoeff();
                    l += m + std::log((out.col(j).array() - m).exp().sum()) - out.col(j).dot(y.col(j));
                }
                return l;
            }
            return (out.array().tanh() * y.array()).sum();
        };
        auto dloss = [&](const Matrix& out) -> Matrix {
            if (kind == 0) return out - y;
            if (kind == 1) {
                Matrix d(out.rows(), out.cols());
                for (Eigen::Index j = 0; j < out.cols(); ++j) {
                    const Vector e = (out.col(j).array() - out.col(j).maxCoeff()).exp();
                    d.col(j) = e / e.sum() - y.col(j);
                }
                return d;
            }
            return ((1.0 - out.array().tanh().square()) * y.array()).matrix();
        };

        nn::Mlp::Tape tape;
        const Matrix out = net.forward(x, tape);
        Vector g = Vector::Zero(net.num_params());
        const Matrix dx = net.backward(tape, dloss(out), g);
        const double h = 1e-5;
        for (Eigen::Index k = 0; k < net.num_params(); ++k) {
            nn::Mlp p = net, m = net;
            p.params()[k] += h;
            m.params()[k] -= h;
            worst = std::max(worst, rel_err(g[k], (loss(p.forward(x)) - loss(m.forward(x))) / (2 * h)));
        }
        for (Eigen::Index k = 0; k < x.size(); ++k) {
            Matrix xp = x, xm = x;
            xp.data()[k] += h;
            xm.data()[k] -= h;
            worst = std::max(worst, rel_err(dx.data()[k], (loss(net.forward(xp)) - loss(net.forward(xm))) / (2 * h)));
        }
    }
    const double secs = cpu_seconds() - t0;
    return {worst < 1e-3 && secs < 10.0, fmt("max rel err %.2e over 100 nets, %.1fs", worst, secs)};
}

// ---------------------------------------------------------------------------
// 2

Outcome tabular_fqe() {
    const double t0 = cpu_seconds();
    Rng rng(202);
    double worst = 0.0;
    for (auto [n, gamma] : {std::pair{8, 0.9}, std::pair{16, 0.95}, std::pair{32, 0.99}}) {
        const auto mdp = envs::make_chain(n, gamma);
        const auto data = reeval::tabular_dataset(mdp, 1, 3);
        Matrix pi(n, 2);
        std::vector<int> det(n);
        Matrix onehot = Matrix::Zero(n, 2);
        for (int s = 0; s < n; ++s) {
            pi(s, 0) = uniform(rng, 0.1, 0.9);
            pi(s, 1) = 1.0 - pi(s, 0);
            det[s] = static_cast<int>(rng() % 2);
            onehot(s, det[s]) = 1.0;
        }
        worst = std::max(worst, (reeval::fqe_sac_tabular(data, n, 2, pi, gamma, 0.0, 4000).q -
                                 envs::exact_policy_eval(mdp, pi)).cwiseAbs().maxCoeff());
        worst = std::max(worst, (reeval::fqe_td3_tabular(data, n, 2, det, gamma, 4000).q -
                                 envs::exact_policy_eval(mdp, onehot)).cwiseAbs().maxCoeff());
    }
    const double secs = cpu_seconds() - t0;
    return {worst < 1e-2 && secs < 120.0, fmt("max |Q - Q_exact| %.2e on chains 8/16/32, %.1fs", worst, secs)};
}

// ---------------------------------------------------------------------------
// 4

Outcome cross_entropy_identity() {
    Rng rng(404);
    double worst = 0.0;
    for (int trial = 0; trial < 200; ++trial) {
        const int n = 2 + static_cast<int>(rng() % 15);
        Vector p_off(n);
        for (int a = 0; a < n; ++a) p_off[a] = uniform(rng, 0.01, 1.0);
        p_off /= p_off.sum();
        const Vector adv = align::discrete_aux_advantage(p_off, 1.0);
        double c0 = NAN;
        for (int k = 0; k < 10; ++k) {
            Vector p(n);
            for (int a = 0; a < n; ++a) p[a] = uniform(rng, 0.001, 1.0);
            p /= p.sum();
            double ce = 0.0;
            for (int a = 0; a < n; ++a) ce -= p[a] * std::log(p_off[a]);
            const double c = -p.dot(adv) - ce;
            if (std::isnan(c0)) c0 = c;
            worst = std::max(worst, std::abs(c - c0));
        }
    }
    return {worst < 1e-6, fmt("max variation of C(s) across policies %.2e (200 distributions x 10 policies)", worst)};
}

// ---------------------------------------------------------------------------
// 5

Outcome alignment_formulas() {
    double worst = 0.0;
    int cases = 0;
    for (const auto& c : fixtures::kSacCases) {
        worst = std::max(worst, std::abs(align::o2sac_target(c.q_anchor, c.logp_anchor, c.logp_a, c.q_fqe, c.alpha) -
                                         c.expected));
        ++cases;
    }
    for (const auto& c : fixtures::kTdCases) {
        worst = std::max(worst, std::abs(align::o2td3_target(c.q_anchor, c.d, c.k, c.sigma, c.q_fqe) - c.expected));
        ++cases;
    }
    Rng rng(505);
    long violations = 0;
    for (int i = 0; i < 10000; ++i) {
        const double qa = uniform(rng, -200, 200), qf = uniform(rng, -200, 200), alpha = uniform(rng, 0.01, 1.0);
        const double la = uniform(rng, -10, 3), lp = uniform(rng, -50, 3), lp2 = lp - uniform(rng, 0, 5);
        const double t1 = align::o2sac_target(qa, la, lp, qf, alpha), t2 = align::o2sac_target(qa, la, lp2, qf, alpha);
        if (t1 > qf || t2 > t1) ++violations;
        const double k = uniform(rng, 0.1, 3), sigma = uniform(rng, 0.05, 0.5);
        const double d1 = uniform(rng, 0, 1), d2 = d1 + uniform(rng, 0, 1);
        const double u1 = align::o2td3_target(qa, d1, k, sigma, qf), u2 = align::o2td3_target(qa, d2, k, sigma, qf);
        if (u1 > qf || u2 > qf || u2 > u1) ++violations;
    }
    return {worst < 1e-9 && violations == 0,
            fmt("%d fixtures max err %.1e; %ld invariant violations in 1e4 samples", cases, worst, violations)};
}

// ---------------------------------------------------------------------------
// 6

GaussianActor constant_gaussian(double mu, double sigma) {
    nn::MlpShape shape{{3, 2}, nn::Activation::relu, false};
    Vector p = Vector::Zero(nn::Mlp::count_params(shape.widths));
    p[p.size() - 2] = mu;
    p[p.size() - 1] = std::log(sigma);
    return GaussianActor(nn::Mlp(shape, p));
}

Outcome constraint_identities() {
    Rng rng(606);
    const NetConfig net{{16, 16}, nn::Activation::relu};
    GaussianActor g(3, 1, net, rng);
    DeterministicActor d(3, 1, net, rng);
    const Matrix s = gaussian_matrix(3, 256, rng);
    const double kl0 = cft::kl_penalty(g, g, s, g.sample(s, rng).pre).cwiseAbs().maxCoeff();
    const double mse0 = cft::mse_penalty(d, d, s).cwiseAbs().maxCoeff();

    const double mt = 0.3, mb = -0.1, sd = 0.4;
    const auto pt = constant_gaussian(mt, sd), pb = constant_gaussian(mb, sd);
    const int n = 200000;
    const Matrix s0 = Matrix::Zero(3, n);
    const Vector f = cft::kl_penalty(pt, pb, s0, pt.sample(s0, rng).pre);
    const double m = f.mean(), se = std::sqrt((f.array() - m).square().sum() / (n - 1) / n);
    const double closed = (mt - mb) * (mt - mb) / (2 * sd * sd);
    const bool kl_ok = std::abs(m - closed) < 3 * se;

    bool tau_ok = true;
    const int h = 20000;
    struct Row {
        const char *mode, *quality;
        double lo, hi;
    };
    for (const Row& r : {Row{"o2sac", "medium", 0.125, 2.0}, Row{"o2sac", "expert", 0.005, 0.125},
                         Row{"o2td3", "medium", 0.0025, 0.01}, Row{"o2td3", "expert", 0.000025, 0.000625}}) {
        const auto t = cft::tau_preset(r.mode, r.quality, h);
        tau_ok = tau_ok && t.at(0) == r.lo && t.at(h) == r.hi;
    }
    return {kl0 == 0.0 && mse0 == 0.0 && kl_ok && tau_ok,
            fmt("step-0 KL %.1e MSE %.1e; KL MC %.5f vs closed %.5f (3se %.5f); tau endpoints %s", kl0, mse0, m, closed,
                3 * se, tau_ok ? "exact" : "MISMATCH")};
}

// ---------------------------------------------------------------------------
// 7

Outcome corollary() {
    const double t0 = cpu_seconds();
    const auto mdp = envs::make_chain(8, 0.9);
    const auto r = cft::tabular_constrained_learner(mdp, cft::TabularCftConfig{});
    const auto vi = envs::value_iteration(mdp);
    int mismatches = 0;
    for (int s = 0; s < mdp.n_states; ++s) {
        Eigen::Index best = 0;
        r.policy.row(s).maxCoeff(&best);
        mismatches += static_cast<int>(best) != vi.greedy[s];
    }
    const double secs = cpu_seconds() - t0;
    return {mismatches == 0 && r.final_lambda < 0.05 && secs < 180.0,
            fmt("greedy mismatches %d/%d, final lambda %.4f, %.1fs", mismatches, mdp.n_states, r.final_lambda, secs)};
}

// ---------------------------------------------------------------------------
// 11

Outcome aux_advantage() {
    const double alpha = 0.7;
    Matrix mean(1, 1), log_std(1, 1), pre(1, 1);
    mean << 0.3;
    log_std << std::log(0.6);
    const double peak = align::aux_advantage_raw(mean, log_std, mean, alpha)(0, 0);
    pre << 0.3 + 0.6;
    const double at_sigma = align::aux_advantage_raw(mean, log_std, pre, alpha)(0, 0);

    Rng rng(1111);
    const int n = 200000;
    const Matrix mu = Matrix::Constant(2, n, -0.2), ls = Matrix::Constant(2, n, std::log(0.3));
    const Vector a = align::aux_advantage_raw(mu, ls, mu + 0.3 * gaussian_matrix(2, n, rng), alpha)
                         .colwise()
                         .sum()
                         .transpose();
    const double m = a.mean(), se = std::sqrt((a.array() - m).square().sum() / (n - 1) / n);
    const double floor = align::softplus_clip(-100.0, 4.0);
    const bool ok = std::abs(peak - alpha / 2) < 1e-12 && std::abs(at_sigma) < 1e-12 && std::abs(m) < 3 * se &&
                    std::abs(floor + 4.0) < 1e-12;
    return {ok, fmt("peak %.6f (alpha/2 %.6f), at 1 sigma %.1e, MC mean %.2e (3se %.2e), clip(-100) %.12f", peak,
                    alpha / 2, at_sigma, m, 3 * se, floor)};
}

// ---------------------------------------------------------------------------
// Pipelines (3, 8, 9, 10)

json base_config(const std::string& quality, const std::string& algo) {
    return json{{"env", "pendulum"},
                {"seed", 1},
                {"hidden", {64, 64}},
                {"dataset", {{"quality", quality}, {"transitions", 20000}, {"noise", 0.3}}},
                {"offline", {{"algo", algo}, {"steps", 5000}, {"num_sampled_actions", 4}, {"bc_warmup_steps", 2500}}},
                {"reeval", {{"iterations", 5000}, {"plateau_tol", 0.0}}},
                {"align", {{"steps", 5000}, {"actor_lr", 5e-5}, {"critic_warmup_steps", 2500}}},
                {"finetune", {{"steps", 20000}, {"eval_every", 1000}, {"eval_episodes", 10}, {"q_normalizer", 2.5}}}};
}

constexpr int kFidelityEpisodes = 50;
constexpr std::uint64_t kFidelitySeed = 7;

template <class Actor>
double fidelity_score(const envs::ContinuousEnv& env, const Actor& a) {
    return agents::evaluate_score(env, agents::greedy_policy(a), kFidelityEpisodes, kFidelitySeed).mean;
}

struct SacArtifacts {
    pipeline::ExperimentConfig cfg;
    std::shared_ptr<const data::OfflineDataset> ds;
    GaussianActor off;
    TwinCritic fqe;
    align::SacAligned on;
    double off_score = 0.0, on_score = 0.0, cpu = 0.0;
};

struct TdArtifacts {
    pipeline::ExperimentConfig cfg;
    std::shared_ptr<const data::OfflineDataset> ds;
    offline::Td3BcResult off;
    align::TdAligned on;
    double off_score = 0.0, on_score = 0.0, cpu = 0.0;
};

SacArtifacts build_sac(const std::string& quality) {
    const double t0 = cpu_seconds();
    SacArtifacts a;
    a.cfg = pipeline::parse_config(base_config(quality, "cql"));
    auto ds = pipeline::load_or_generate_dataset(a.cfg);
    auto cql = offline::train_cql_lite(ds, pipeline::cql_config(a.cfg));
    a.off = cql.actor;
    a.fqe = reeval::fqe_sac(ds, a.off, pipeline::reeval_config(a.cfg));
    a.on = align::o2sac_align(ds, a.fqe, a.off, pipeline::sac_align_config(a.cfg));
    a.ds = std::make_shared<const data::OfflineDataset>(std::move(ds));
    const auto env = envs::make_env("pendulum");
    a.off_score = fidelity_score(*env, a.off);
    a.on_score = fidelity_score(*env, a.on.actor);
    a.cpu = cpu_seconds() - t0;
    return a;
}

TdArtifacts build_td(const std::string& quality) {
    const double t0 = cpu_seconds();
    TdArtifacts a;
    a.cfg = pipeline::parse_config(base_config(quality, "td3bc"));
    auto ds = pipeline::load_or_generate_dataset(a.cfg);
    ds.shift_rewards(pipeline::reward_shift(a.cfg.mode()));
    a.off = offline::train_td3_bc(ds, pipeline::td3bc_config(a.cfg));
    a.on = align::o2td3_align(ds, a.off.critic, a.off.actor, pipeline::td_align_config(a.cfg));
    a.ds = std::make_shared<const data::OfflineDataset>(std::move(ds));
    const auto env = envs::make_env("pendulum");
    a.off_score = fidelity_score(*env, a.off.actor);
    a.on_score = fidelity_score(*env, a.on.actor);
    a.cpu = cpu_seconds() - t0;
    return a;
}

/// Normalized evaluation curve of a fine-tuning run.
std::vector<double> curve(const std::vector<cft::MetricsRow>& rows) {
    std::vector<double> c;
    for (const auto& r : rows) c.push_back(envs::normalized_score("pendulum", r.eval_return_mean));
    return c;
}

struct CurveStats {
    double start = 0.0, final = 0.0, early_min = 0.0, overall_min = 0.0;
};

CurveStats stats(const std::vector<double>& c, long steps, long eval_every) {
    CurveStats s{c.front(), c.back(), c.front(), c.front()};
    for (std::size_t i = 0; i < c.size(); ++i) {
        if (static_cast<long>(i) * eval_every <= steps / 5) s.early_min = std::min(s.early_min, c[i]);
        s.overall_min = std::min(s.overall_min, c[i]);
    }
    return s;
}

// Fractions of start. Scores are normalized so a positive start is meaningful; ratios use the signed gap.
bool at_least(double v, double start, double frac) { return v >= start - (1.0 - frac) * std::abs(start); }

std::string join(const std::vector<std::string>& v) {
    std::string out;
    for (const auto& x : v) out += (out.empty() ? "" : " ") + x;
    return out;
}

struct StabilityRuns {
    std::vector<CurveStats> sac, td, ablation;
    double cpu = 0.0;
};

StabilityRuns stability(const SacArtifacts& sac, const TdArtifacts& td, bool with_ablation) {
    StabilityRuns out;
    const double t0 = cpu_seconds();
    const auto env = envs::make_env("pendulum");
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        auto cs = sac.cfg;
        cs.seed = seed;
        const auto fs = pipeline::finetune_config(cs);
        const auto r = cft::finetune_o2sac(*env, sac.on.actor, sac.on.critic, sac.ds, fs);
        out.sac.push_back(stats(curve(r.metrics), fs.steps, fs.eval_every));
        std::cerr << "  o2sac seed " << seed << " " << join([&] {
            std::vector<std::string> v;
            for (double x : curve(r.metrics)) v.push_back(fmt("%.1f", x));
            return v;
        }()) << "\n";

        auto ct = td.cfg;
        ct.seed = seed;
        const auto ft = pipeline::finetune_config(ct);
        const auto rt = cft::finetune_o2td3(*env, td.on.actor, td.on.critic, td.ds, ft);
        out.td.push_back(stats(curve(rt.metrics), ft.steps, ft.eval_every));
        std::cerr << "  o2td3 seed " << seed << " " << join([&] {
            std::vector<std::string> v;
            for (double x : curve(rt.metrics)) v.push_back(fmt("%.1f", x));
            return v;
        }()) << "\n";
    }
    out.cpu = cpu_seconds() - t0 + sac.cpu + td.cpu;
    if (with_ablation) {
        for (std::uint64_t seed = 1; seed <= 5; ++seed) {
            auto ct = td.cfg;
            ct.seed = seed;
            auto ft = pipeline::finetune_config(ct);
            ft.constrained = false;
            const auto rt = cft::finetune_o2td3(*env, td.off.actor, td.off.critic, td.ds, ft);
            out.ablation.push_back(stats(curve(rt.metrics), ft.steps, ft.eval_every));
            std::cerr << "  ablation seed " << seed << " " << join([&] {
                std::vector<std::string> v;
                for (double x : curve(rt.metrics)) v.push_back(fmt("%.1f", x));
                return v;
            }()) << "\n";
        }
    }
    return out;
}

Outcome criterion8(const StabilityRuns& r) {
    bool ok = r.cpu < 1800.0;
    std::string detail;
    for (const auto* runs : {&r.sac, &r.td}) {
        int dips = 0, improved = 0;
        for (const auto& s : *runs) {
            dips += !at_least(s.early_min, s.start, 0.9);
            improved += s.final >= s.start;
        }
        ok = ok && dips == 0 && improved >= 4;
        detail += fmt("%s: early dips %d/5, final>=start %d/5; ", runs == &r.sac ? "o2sac" : "o2td3", dips, improved);
    }
    return {ok, detail + fmt("%.0fs CPU", r.cpu)};
}

Outcome criterion9(const StabilityRuns& r) {
    int ablation_drops = 0, full_drops = 0;
    for (const auto& s : r.ablation) ablation_drops += !at_least(s.overall_min, s.start, 0.75);
    for (const auto& s : r.td) full_drops += !at_least(s.overall_min, s.start, 0.75);
    return {ablation_drops >= 3 && full_drops == 0,
            fmt("ablation seeds below 75%% of start %d/5; full o2td3 %d/5", ablation_drops, full_drops)};
}

Outcome criterion10(const std::vector<std::tuple<std::string, double, double>>& rows) {
    bool ok = true;
    std::string detail;
    for (const auto& [name, off, on] : rows) {
        const double rel = (on - off) / std::abs(off);
        ok = ok && std::abs(rel) <= 0.10;
        detail += fmt("%s off %.1f on %.1f (%+.1f%%); ", name.c_str(), off, on, 100 * rel);
    }
    return {ok, detail};
}

Outcome criterion3(const SacArtifacts& a) {
    const double t0 = cpu_seconds();
    // Held-out states: a fresh dataset from a different seed.
    auto cfg = a.cfg;
    cfg.seed = 9001;
    cfg.dataset.transitions = 4000;
    const auto held = pipeline::load_or_generate_dataset(cfg);
    Rng rng(303);
    const Matrix s = held.gather(data::sample_indices(held.size(), 512, rng)).states;
    const auto sw = align::sandwich_audit(a.fqe, a.on.critic, a.on.actor, a.off, s, a.cfg.alpha(), 16, 0.05, rng);
    const double secs = a.cpu + cpu_seconds() - t0;
    return {sw.pass_rate >= 0.95 && secs < 300.0, fmt("sandwich holds on %.1f%% of 512 states, %.0fs", 100 * sw.pass_rate, secs)};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"o2o acceptance suite"};
    std::vector<int> only;
    app.add_option("--only", only, "criteria to run (default: all)")->delimiter(',');
    CLI11_PARSE(app, argc, argv);
    auto want = [&](int c) { return only.empty() || std::find(only.begin(), only.end(), c) != only.end(); };

    std::map<int, Outcome> results;
    auto report = [&](int id, const Outcome& o) {
        results[id] = o;
        std::cout << "criterion " << id << ": " << (o.pass ? "PASS" : "FAIL") << "  " << o.detail << std::endl;
    };

    if (want(1)) report(1, gradient_check());
    if (want(2)) report(2, tabular_fqe());
    if (want(4)) report(4, cross_entropy_identity());
    if (want(5)) report(5, alignment_formulas());
    if (want(6)) report(6, constraint_identities());
    if (want(7)) report(7, corollary());
    if (want(11)) report(11, aux_advantage());

    const bool need_medium = want(3) || want(8) || want(9) || want(10);
    std::optional<SacArtifacts> sac_m;
    std::optional<TdArtifacts> td_m;
    if (need_medium) {
        sac_m = build_sac("medium");
        if (want(3)) report(3, criterion3(*sac_m));
    }
    if (want(8) || want(9) || want(10)) td_m = build_td("medium");
    if (want(8) || want(9)) {
        const auto runs = stability(*sac_m, *td_m, want(9));
        if (want(8)) report(8, criterion8(runs));
        if (want(9)) report(9, criterion9(runs));
    }
    if (want(10)) {
        const auto sac_e = build_sac("expert");
        const auto td_e = build_td("expert");
        report(10, criterion10({{"o2sac/medium", sac_m->off_score, sac_m->on_score},
                                {"o2td3/medium", td_m->off_score, td_m->on_score},
                                {"o2sac/expert", sac_e.off_score, sac_e.on_score},
                                {"o2td3/expert", td_e.off_score, td_e.on_score}}));
    }

    int failed = 0;
    for (const auto& [id, o] : results) failed += !o.pass;
    std::cout << results.size() - failed << "/" << results.size() << " criteria passed" << std::endl;
    return failed == 0 ? 0 : 1;
}
