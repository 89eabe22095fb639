#include "o2o/models.hpp"

#include <cmath>

#include <nlohmann/json.hpp>

namespace o2o {

namespace {

std::vector<int> widths_of(int in, const std::vector<int>& hidden, int out) {
    std::vector<int> w{in};
    w.insert(w.end(), hidden.begin(), hidden.end());
    w.push_back(out);
    return w;
}

}  // namespace

// ---------------------------------------------------------------------------
// GaussianActor

GaussianActor::GaussianActor(int state_dim, int action_dim, const NetConfig& cfg, Rng& rng)
    : net_({widths_of(state_dim, cfg.hidden, 2 * action_dim), cfg.activation, false}, rng) {}

GaussianActor::GaussianActor(nn::Mlp net) : net_(std::move(net)) {
    if (net_.output_dim() % 2 != 0) throw DimensionError("Gaussian actor output must hold mean and log-std");
}

GaussianActor::Heads GaussianActor::heads(const Matrix& states) const {
    nn::Mlp::Tape tape;
    return heads(states, tape);
}

GaussianActor::Heads GaussianActor::heads(const Matrix& states, nn::Mlp::Tape& tape) const {
    const Matrix out = net_.forward(states, tape);
    const int ad = action_dim();
    Heads h;
    h.mean = out.topRows(ad);
    h.raw_log_std = out.bottomRows(ad);
    h.log_std = h.raw_log_std.unaryExpr([](double v) { return nn::clamp_log_std(v); });
    return h;
}

Matrix GaussianActor::mean_action(const Matrix& states) const { return heads(states).mean.array().tanh(); }

GaussianActor::Sample GaussianActor::sample(const Matrix& states, Rng& rng) const {
    Sample s;
    s.heads = heads(states, s.tape);
    s.eps = gaussian_matrix(s.heads.mean.rows(), s.heads.mean.cols(), rng);
    s.pre = s.heads.mean + (s.heads.log_std.array().exp() * s.eps.array()).matrix();
    s.action = s.pre.array().tanh();
    s.log_prob.resize(states.cols());
    for (Eigen::Index j = 0; j < states.cols(); ++j)
        s.log_prob[j] = nn::squashed_log_prob_pre(s.heads.mean.col(j), s.heads.log_std.col(j), s.pre.col(j));
    return s;
}

Vector GaussianActor::log_prob(const Matrix& states, const Matrix& actions) const {
    const Heads h = heads(states);
    Vector lp(states.cols());
    for (Eigen::Index j = 0; j < states.cols(); ++j)
        lp[j] = nn::squashed_log_prob(h.mean.col(j), h.log_std.col(j), actions.col(j));
    return lp;
}

std::pair<Matrix, Matrix> GaussianActor::reparam_grad(const Sample& s, const Matrix& ext_du, const Vector& coef) const {
    const Eigen::Index n = s.pre.cols();
    const Eigen::Index ad = s.pre.rows();
    Matrix d_mean(ad, n), d_log_std(ad, n);
    for (Eigen::Index j = 0; j < n; ++j) {
        const auto g = nn::squashed_log_prob_pre_grad(s.heads.mean.col(j), s.heads.log_std.col(j), s.pre.col(j));
        const Vector du = ext_du.col(j) + coef[j] * g.d_pre;
        const Vector sigma_eps = (s.heads.log_std.col(j).array().exp() * s.eps.col(j).array()).matrix();
        d_mean.col(j) = du + coef[j] * g.d_mean;
        d_log_std.col(j) = du.cwiseProduct(sigma_eps) + coef[j] * g.d_log_std;
    }
    return {d_mean, d_log_std};
}

void GaussianActor::backward(const nn::Mlp::Tape& tape, const Heads& heads, const Matrix& d_mean,
                             const Matrix& d_log_std, Vector& grad) const {
    const int ad = action_dim();
    Matrix dy(2 * ad, d_mean.cols());
    dy.topRows(ad) = d_mean;
    const auto inside = (heads.raw_log_std.array() >= nn::kLogStdMin && heads.raw_log_std.array() <= nn::kLogStdMax);
    dy.bottomRows(ad) = (d_log_std.array() * inside.cast<double>()).matrix();
    net_.backward(tape, dy, grad);
}

// ---------------------------------------------------------------------------
// DeterministicActor

DeterministicActor::DeterministicActor(int state_dim, int action_dim, const NetConfig& cfg, Rng& rng)
    : net_({widths_of(state_dim, cfg.hidden, action_dim), cfg.activation, false}, rng) {}

DeterministicActor::DeterministicActor(nn::Mlp net) : net_(std::move(net)) {}

Matrix DeterministicActor::act(const Matrix& states) const { return net_.forward(states).array().tanh(); }

Matrix DeterministicActor::act(const Matrix& states, nn::Mlp::Tape& tape) const {
    return net_.forward(states, tape).array().tanh();
}

void DeterministicActor::backward(const nn::Mlp::Tape& tape, const Matrix& actions, const Matrix& d_action,
                                  Vector& grad) const {
    const Matrix dy = (d_action.array() * (1.0 - actions.array().square())).matrix();
    net_.backward(tape, dy, grad);
}

// ---------------------------------------------------------------------------
// Critics

Matrix join_state_action(const Matrix& states, const Matrix& actions) {
    if (states.cols() != actions.cols()) throw DimensionError("state and action batches differ in size");
    Matrix sa(states.rows() + actions.rows(), states.cols());
    sa.topRows(states.rows()) = states;
    sa.bottomRows(actions.rows()) = actions;
    return sa;
}

TwinCritic::TwinCritic(int state_dim, int action_dim, const NetConfig& cfg, bool layer_norm, Rng& rng)
    : state_dim_(state_dim) {
    const nn::MlpShape shape{widths_of(state_dim + action_dim, cfg.hidden, 1), cfg.activation, layer_norm};
    q = {nn::Mlp(shape, rng), nn::Mlp(shape, rng)};
    target = q;
}

TwinCritic::TwinCritic(std::array<nn::Mlp, 2> online, std::array<nn::Mlp, 2> targ, int state_dim)
    : q(std::move(online)), target(std::move(targ)), state_dim_(state_dim) {
    if (state_dim_ <= 0 || state_dim_ >= q[0].input_dim()) throw DimensionError("twin critic state_dim out of range");
}

Vector TwinCritic::value(int i, const Matrix& states, const Matrix& actions) const {
    return q[i].forward(join_state_action(states, actions)).row(0).transpose();
}

Vector TwinCritic::target_value(int i, const Matrix& states, const Matrix& actions) const {
    return target[i].forward(join_state_action(states, actions)).row(0).transpose();
}

Vector TwinCritic::min_value(const Matrix& states, const Matrix& actions) const {
    return value(0, states, actions).cwiseMin(value(1, states, actions));
}

Vector TwinCritic::target_min(const Matrix& states, const Matrix& actions) const {
    return target_value(0, states, actions).cwiseMin(target_value(1, states, actions));
}

Matrix TwinCritic::action_grad(const Matrix& states, const Matrix& actions, const Vector& weights,
                               bool first_only) const {
    const Matrix sa = join_state_action(states, actions);
    std::array<nn::Mlp::Tape, 2> tapes;
    std::array<Matrix, 2> out;
    const int heads = first_only ? 1 : 2;
    for (int i = 0; i < heads; ++i) out[i] = q[i].forward(sa, tapes[i]);
    Matrix result = Matrix::Zero(actions.rows(), actions.cols());
    for (int i = 0; i < heads; ++i) {
        Matrix dy(1, sa.cols());
        for (Eigen::Index j = 0; j < sa.cols(); ++j) {
            const bool active = first_only || (i == 0 ? out[0](0, j) <= out[1](0, j) : out[1](0, j) < out[0](0, j));
            dy(0, j) = active ? weights[j] : 0.0;
        }
        result += q[i].input_grad(tapes[i], dy).bottomRows(actions.rows());
    }
    return result;
}

void TwinCritic::soft_update(double rate) {
    for (int i = 0; i < 2; ++i) target[i].soft_update_from(q[i], rate);
}

void TwinCritic::sync_targets() { target = q; }

TwinOptimizer TwinOptimizer::make(const TwinCritic& c, double lr) {
    return {{nn::make_adam(c.q[0].num_params(), lr), nn::make_adam(c.q[1].num_params(), lr)}};
}

double regress_scalar(nn::Mlp& net, nn::AdamState& opt, const Matrix& inputs, const Vector& targets) {
    if (!targets.allFinite()) throw NumericalError("regression target is not finite");
    nn::Mlp::Tape tape;
    const Matrix out = net.forward(inputs, tape);
    const Eigen::RowVectorXd diff = out.row(0) - targets.transpose();
    const double n = static_cast<double>(inputs.cols());
    Vector grad = Vector::Zero(net.num_params());
    net.backward(tape, (2.0 / n) * diff, grad);
    nn::adam_step(net.params(), grad, opt);
    return diff.squaredNorm() / n;
}

double regress_twin(TwinCritic& critic, TwinOptimizer& opt, const Matrix& states, const Matrix& actions,
                    const Vector& targets) {
    const Matrix sa = join_state_action(states, actions);
    double loss = 0.0;
    for (int i = 0; i < 2; ++i) loss += regress_scalar(critic.q[i], opt.adam[i], sa, targets);
    return 0.5 * loss;
}

ValueCritic::ValueCritic(int state_dim, const NetConfig& cfg, bool layer_norm, Rng& rng)
    : net_({widths_of(state_dim, cfg.hidden, 1), cfg.activation, layer_norm}, rng) {}

Vector ValueCritic::value(const Matrix& states) const { return net_.forward(states).row(0).transpose(); }

double parameter_checksum(const nn::Mlp& net) {
    // Position-weighted so that permutations of parameters change the sum.
    double acc = 0.0;
    for (Eigen::Index i = 0; i < net.num_params(); ++i) acc += net.params()[i] * static_cast<double>((i % 97) + 1);
    return acc;
}

// ---------------------------------------------------------------------------
// Checkpoints

void save_actor(const std::filesystem::path& path, const GaussianActor& actor, std::uint64_t seed) {
    nn::write_checkpoint(path, "gaussian_actor", seed, {{"pi", &actor.net()}}, nlohmann::json::object());
}

void save_actor(const std::filesystem::path& path, const DeterministicActor& actor, std::uint64_t seed) {
    nn::write_checkpoint(path, "deterministic_actor", seed, {{"pi", &actor.net()}}, nlohmann::json::object());
}

void save_critic(const std::filesystem::path& path, const TwinCritic& critic, std::uint64_t seed) {
    nn::write_checkpoint(path, "twin_critic", seed,
                         {{"q1", &critic.q[0]}, {"q2", &critic.q[1]}, {"q1_target", &critic.target[0]},
                          {"q2_target", &critic.target[1]}},
                         {{"state_dim", critic.state_dim()}});
}

void save_critic(const std::filesystem::path& path, const ValueCritic& critic, std::uint64_t seed) {
    nn::write_checkpoint(path, "value_critic", seed, {{"v", &critic.net()}}, nlohmann::json::object());
}

namespace {

nn::LoadedCheckpoint load_kind(const std::filesystem::path& path, const std::string& kind) {
    auto ck = nn::read_checkpoint(path);
    if (ck.kind != kind) throw FormatError("checkpoint '" + path.string() + "' holds " + ck.kind + ", expected " + kind, 4);
    return ck;
}

}  // namespace

GaussianActor load_gaussian_actor(const std::filesystem::path& path) {
    return GaussianActor(load_kind(path, "gaussian_actor").net("pi"));
}

DeterministicActor load_deterministic_actor(const std::filesystem::path& path) {
    return DeterministicActor(load_kind(path, "deterministic_actor").net("pi"));
}

TwinCritic load_twin_critic(const std::filesystem::path& path) {
    const auto ck = load_kind(path, "twin_critic");
    const int sd = nlohmann::json::parse(ck.extra_json).at("state_dim").get<int>();
    return TwinCritic({ck.net("q1"), ck.net("q2")}, {ck.net("q1_target"), ck.net("q2_target")}, sd);
}

ValueCritic load_value_critic(const std::filesystem::path& path) {
    return ValueCritic(load_kind(path, "value_critic").net("v"));
}

std::string checkpoint_kind(const std::filesystem::path& path) { return nn::read_checkpoint(path).kind; }

}  // namespace o2o
