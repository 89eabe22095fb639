#include "o2o/nn.hpp"

#include <bit>
#include <algorithm>
#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

namespace o2o::nn {

std::string to_string(Activation a) { return a == Activation::relu ? "relu" : "tanh"; }

Activation activation_from_string(const std::string& s) {
    if (s == "relu") return Activation::relu;
    if (s == "tanh") return Activation::tanh;
    throw ConfigError("unknown activation '" + s + "'");
}

Eigen::Index Mlp::count_params(const std::vector<int>& widths) {
    Eigen::Index n = 0;
    for (std::size_t l = 0; l + 1 < widths.size(); ++l)
        n += static_cast<Eigen::Index>(widths[l] + 1) * widths[l + 1];
    return n;
}

namespace {

std::vector<Eigen::Index> layer_offsets(const std::vector<int>& widths) {
    if (widths.size() < 2) throw DimensionError("an MLP needs at least input and output widths");
    std::vector<Eigen::Index> offsets;
    Eigen::Index off = 0;
    for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
        if (widths[l] <= 0 || widths[l + 1] <= 0) throw DimensionError("layer widths must be positive");
        offsets.push_back(off);
        off += static_cast<Eigen::Index>(widths[l] + 1) * widths[l + 1];
    }
    offsets.push_back(off);
    return offsets;
}

}  // namespace

Mlp::Mlp(MlpShape shape, Rng& rng) : shape_(std::move(shape)), offsets_(layer_offsets(shape_.widths)) {
    params_.resize(offsets_.back());
    for (int l = 0; l < num_layers(); ++l) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(shape_.widths[l]));
        for (Eigen::Index i = offsets_[l]; i < offsets_[l + 1]; ++i) params_[i] = uniform(rng, -bound, bound);
    }
}

Mlp::Mlp(MlpShape shape, Vector params)
    : shape_(std::move(shape)), params_(std::move(params)), offsets_(layer_offsets(shape_.widths)) {
    if (params_.size() != offsets_.back())
        throw DimensionError("parameter vector has " + std::to_string(params_.size()) + " entries, expected " +
                             std::to_string(offsets_.back()));
}

Eigen::Map<const Matrix> Mlp::weight(int layer) const {
    return {params_.data() + offsets_[layer], shape_.widths[layer + 1], shape_.widths[layer]};
}

Eigen::Map<const Vector> Mlp::bias(int layer) const {
    const Eigen::Index out = shape_.widths[layer + 1];
    return {params_.data() + offsets_[layer] + out * shape_.widths[layer], out};
}

void Mlp::check_input(const Matrix& x) const {
    if (x.rows() != input_dim())
        throw DimensionError("MLP input has " + std::to_string(x.rows()) + " rows, expected " +
                             std::to_string(input_dim()));
}

Matrix Mlp::forward(const Matrix& x) const {
    Tape tape;
    return forward(x, tape);
}

Matrix Mlp::forward(const Matrix& x, Tape& tape) const {
    check_input(x);
    tape.input = x;
    tape.hidden.clear();
    tape.pre.clear();
    tape.inv_std.clear();
    const Matrix* h = &tape.input;
    for (int l = 0; l < num_layers(); ++l) {
        Matrix z = weight(l) * (*h);
        z.colwise() += bias(l);
        if (l == num_layers() - 1) return z;
        Matrix a = shape_.activation == Activation::relu ? Matrix(z.cwiseMax(0.0)) : Matrix(z.array().tanh().matrix());
        if (shape_.layer_norm) {
            const Eigen::RowVectorXd mean = a.colwise().mean();
            a.rowwise() -= mean;
            Vector inv = (a.array().square().colwise().mean() + kLayerNormEps).rsqrt().transpose();
            a = a * inv.asDiagonal();
            tape.inv_std.push_back(std::move(inv));
        }
        tape.pre.push_back(std::move(z));
        tape.hidden.push_back(std::move(a));
        h = &tape.hidden.back();
    }
    return *h;  // unreachable: the loop returns on the output layer
}

std::vector<double> Mlp::forward(std::span<const double> x) const {
    Matrix in = Eigen::Map<const Vector>(x.data(), static_cast<Eigen::Index>(x.size()));
    Matrix out = forward(in);
    return {out.data(), out.data() + out.size()};
}

Matrix Mlp::backward(const Tape& tape, const Matrix& dy, Vector& grad) const {
    if (grad.size() != params_.size()) throw DimensionError("gradient buffer does not match parameter count");
    return backprop(tape, dy, &grad);
}

Matrix Mlp::input_grad(const Tape& tape, const Matrix& dy) const { return backprop(tape, dy, nullptr); }

Matrix Mlp::backprop(const Tape& tape, const Matrix& dy, Vector* grad) const {
    if (dy.rows() != output_dim() || dy.cols() != tape.input.cols())
        throw DimensionError("upstream gradient shape does not match the recorded forward pass");
    Matrix g = dy;
    for (int l = num_layers() - 1; l >= 0; --l) {
        const Matrix& in = l == 0 ? tape.input : tape.hidden[l - 1];
        const Eigen::Index out_w = shape_.widths[l + 1];
        const Eigen::Index in_w = shape_.widths[l];
        if (grad != nullptr) {
            Eigen::Map<Matrix> gw(grad->data() + offsets_[l], out_w, in_w);
            Eigen::Map<Vector> gb(grad->data() + offsets_[l] + out_w * in_w, out_w);
            gw.noalias() += g * in.transpose();
            gb += g.rowwise().sum();
        }
        Matrix gin = weight(l).transpose() * g;
        if (l == 0) return gin;
        if (shape_.layer_norm) {
            const Matrix& yhat = tape.hidden[l - 1];
            const Vector& inv = tape.inv_std[l - 1];
            const Eigen::RowVectorXd mean_g = gin.colwise().mean();
            const Eigen::RowVectorXd mean_gy = gin.cwiseProduct(yhat).colwise().mean();
            gin.rowwise() -= mean_g;
            gin -= yhat * mean_gy.asDiagonal();
            gin = gin * inv.asDiagonal();
        }
        const Matrix& z = tape.pre[l - 1];
        if (shape_.activation == Activation::relu)
            g = gin.cwiseProduct((z.array() > 0.0).cast<double>().matrix());
        else
            g = gin.cwiseProduct((1.0 - z.array().tanh().square()).matrix());
    }
    return g;
}

void Mlp::soft_update_from(const Mlp& source, double rate) {
    if (source.params_.size() != params_.size()) throw DimensionError("soft update between mismatched networks");
    params_ = (1.0 - rate) * params_ + rate * source.params_;
}

AdamState make_adam(Eigen::Index n, double lr) {
    AdamState s;
    s.m = Vector::Zero(n);
    s.v = Vector::Zero(n);
    s.lr = lr;
    return s;
}

void adam_step(Vector& params, const Vector& grad, AdamState& state) {
    if (params.size() != grad.size() || state.m.size() != params.size())
        throw DimensionError("adam_step: parameter, gradient and moment sizes differ");
    if (!grad.allFinite()) throw NumericalError("adam_step: non-finite gradient");
    ++state.step;
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad;
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad.cwiseAbs2();
    const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    params.array() -= state.lr * (state.m.array() / c1) / ((state.v.array() / c2).sqrt() + state.eps);
}

// ---------------------------------------------------------------------------

double log1m_tanh_sq(double u) {
    const double x = std::abs(u);
    return 2.0 * (std::log(2.0) - x - std::log1p(std::exp(-2.0 * x)));
}

double clamp_log_std(double raw) { return std::clamp(raw, kLogStdMin, kLogStdMax); }

Vector atanh_clamped(const Vector& action) {
    const double edge = 1.0 - 1e-6;
    return action.unaryExpr([edge](double a) { return std::atanh(std::clamp(a, -edge, edge)); });
}

namespace {

double raw_log_prob(const Vector& mean, const Vector& log_std, const Vector& pre) {
    double lp = 0.0;
    for (Eigen::Index i = 0; i < mean.size(); ++i) {
        const double z = (pre[i] - mean[i]) * std::exp(-log_std[i]);
        lp += -0.5 * z * z - log_std[i] - kHalfLog2Pi - log1m_tanh_sq(pre[i]);
    }
    return lp;
}

}  // namespace

double squashed_log_prob_pre(const Vector& mean, const Vector& log_std, const Vector& pre) {
    if (mean.size() != log_std.size() || mean.size() != pre.size())
        throw DimensionError("log-prob: mean, log_std and action dimensions differ");
    const double lp = raw_log_prob(mean, log_std, pre);
    return std::isnan(lp) ? kLogProbFloor : std::max(lp, kLogProbFloor);
}

LogProbGrad squashed_log_prob_pre_grad(const Vector& mean, const Vector& log_std, const Vector& pre) {
    LogProbGrad g;
    g.value = squashed_log_prob_pre(mean, log_std, pre);
    const Eigen::Index n = mean.size();
    g.d_pre = Vector::Zero(n);
    g.d_mean = Vector::Zero(n);
    g.d_log_std = Vector::Zero(n);
    g.floored = raw_log_prob(mean, log_std, pre) <= kLogProbFloor;
    if (g.floored) return g;
    for (Eigen::Index i = 0; i < n; ++i) {
        const double inv_sigma = std::exp(-log_std[i]);
        const double z = (pre[i] - mean[i]) * inv_sigma;
        g.d_pre[i] = -z * inv_sigma + 2.0 * std::tanh(pre[i]);
        g.d_mean[i] = z * inv_sigma;
        g.d_log_std[i] = z * z - 1.0;
    }
    return g;
}

double squashed_log_prob(const Vector& mean, const Vector& log_std, const Vector& action) {
    return squashed_log_prob_pre(mean, log_std, atanh_clamped(action));
}

// ---------------------------------------------------------------------------

namespace {

void put_u32(std::ostream& os, std::uint32_t v) {
    const char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                       static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
    os.write(b, 4);
}

std::uint32_t get_u32(const unsigned char* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

std::vector<unsigned char> slurp(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open '" + path.string() + "'", 0);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

void write_checkpoint(const std::filesystem::path& path, const std::string& kind, std::uint64_t seed,
                      const std::vector<std::pair<std::string, const Mlp*>>& nets, const nlohmann::json& extra) {
    nlohmann::json header;
    header["format"] = "o2o-checkpoint";
    header["version"] = 1;
    header["kind"] = kind;
    header["seed"] = seed;
    header["extra"] = extra;
    std::uint64_t floats = 0;
    for (const auto& [name, net] : nets) {
        header["nets"].push_back({{"name", name},
                                  {"widths", net->shape().widths},
                                  {"activation", to_string(net->shape().activation)},
                                  {"layer_norm", net->shape().layer_norm},
                                  {"count", net->num_params()}});
        floats += static_cast<std::uint64_t>(net->num_params());
    }
    header["blob_bytes"] = floats * 4;
    const std::string text = header.dump();

    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write checkpoint '" + path.string() + "'");
    put_u32(os, static_cast<std::uint32_t>(text.size()));
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& entry : nets) {
        for (double p : entry.second->params()) put_u32(os, std::bit_cast<std::uint32_t>(static_cast<float>(p)));
    }
}

LoadedCheckpoint read_checkpoint(const std::filesystem::path& path) {
    const auto bytes = slurp(path);
    if (bytes.size() < 4) throw FormatError("checkpoint truncated before header length", bytes.size());
    const std::uint32_t hlen = get_u32(bytes.data());
    if (bytes.size() < 4ull + hlen) throw FormatError("checkpoint header truncated", bytes.size());
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.begin() + 4, bytes.begin() + 4 + hlen);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("checkpoint header is not valid JSON: ") + e.what(), 4);
    }
    if (header.value("format", "") != "o2o-checkpoint") throw FormatError("not an o2o checkpoint", 4);

    LoadedCheckpoint ck;
    ck.kind = header.at("kind").get<std::string>();
    ck.seed = header.at("seed").get<std::uint64_t>();
    ck.extra_json = header.at("extra").dump();
    const std::uint64_t blob = header.at("blob_bytes").get<std::uint64_t>();
    std::uint64_t pos = 4ull + hlen;
    if (bytes.size() - pos != blob)
        throw FormatError("checkpoint blob has " + std::to_string(bytes.size() - pos) + " bytes, header says " +
                              std::to_string(blob),
                          bytes.size());
    std::uint64_t declared = 0;
    for (const auto& n : header.at("nets")) declared += n.at("count").get<std::uint64_t>() * 4;
    if (declared != blob) throw FormatError("network parameter counts disagree with blob_bytes", pos);
    for (const auto& n : header.at("nets")) {
        MlpShape shape{n.at("widths").get<std::vector<int>>(),
                       activation_from_string(n.at("activation").get<std::string>()),
                       n.at("layer_norm").get<bool>()};
        const auto count = n.at("count").get<Eigen::Index>();
        if (count != Mlp::count_params(shape.widths)) throw FormatError("parameter count disagrees with widths", pos);
        Vector params(count);
        for (Eigen::Index i = 0; i < count; ++i, pos += 4)
            params[i] = static_cast<double>(std::bit_cast<float>(get_u32(bytes.data() + pos)));
        ck.names.push_back(n.at("name").get<std::string>());
        ck.nets.emplace_back(std::move(shape), std::move(params));
    }
    return ck;
}

const Mlp& LoadedCheckpoint::net(const std::string& name) const {
    for (std::size_t i = 0; i < names.size(); ++i)
        if (names[i] == name) return nets[i];
    throw FormatError("checkpoint has no network named '" + name + "'", 0);
}

}  // namespace o2o::nn
