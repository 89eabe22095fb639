#include "o2o/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include <nlohmann/json.hpp>

namespace o2o::data {

using json = nlohmann::json;

OfflineDataset::OfflineDataset(DatasetMeta meta) : meta_(std::move(meta)) {
    if (meta_.state_dim <= 0 || meta_.action_dim <= 0) throw DimensionError("dataset dims must be positive");
}

void OfflineDataset::begin_trajectory() {
    auto n = static_cast<std::uint32_t>(size());
    if (!traj_starts_.empty() && traj_starts_.back() == n) return;
    traj_starts_.push_back(n);
}

void OfflineDataset::append(const Transition& t) {
    if (t.state.size() != meta_.state_dim || t.next_state.size() != meta_.state_dim ||
        t.action.size() != meta_.action_dim)
        throw DimensionError("transition dims do not match dataset");
    if (!std::isfinite(t.reward)) throw NumericalError("non-finite reward");
    if (traj_starts_.empty()) traj_starts_.push_back(0);
    for (double v : t.state) states_.push_back(static_cast<float>(v));
    for (double v : t.action) actions_.push_back(static_cast<float>(v));
    rewards_.push_back(static_cast<float>(t.reward));
    for (double v : t.next_state) next_states_.push_back(static_cast<float>(v));
    dones_.push_back(t.done ? 1 : 0);
}

Transition OfflineDataset::at(std::size_t i) const {
    if (i >= size()) throw std::out_of_range("dataset index out of range");
    const std::size_t sd = meta_.state_dim, ad = meta_.action_dim;
    Transition t;
    t.state.resize(sd);
    t.next_state.resize(sd);
    t.action.resize(ad);
    for (std::size_t k = 0; k < sd; ++k) {
        t.state[k] = states_[i * sd + k];
        t.next_state[k] = next_states_[i * sd + k];
    }
    for (std::size_t k = 0; k < ad; ++k) t.action[k] = actions_[i * ad + k];
    t.reward = rewards_[i];
    t.done = dones_[i] != 0;
    return t;
}

Batch OfflineDataset::gather(const std::vector<std::size_t>& indices) const {
    const std::size_t sd = meta_.state_dim, ad = meta_.action_dim;
    const auto n = static_cast<Eigen::Index>(indices.size());
    Batch b{Matrix(sd, n), Matrix(ad, n), Vector(n), Matrix(sd, n), Vector(n)};
    for (Eigen::Index j = 0; j < n; ++j) {
        std::size_t i = indices[j];
        if (i >= size()) throw std::out_of_range("dataset index out of range");
        for (std::size_t k = 0; k < sd; ++k) {
            b.states(k, j) = states_[i * sd + k];
            b.next_states(k, j) = next_states_[i * sd + k];
        }
        for (std::size_t k = 0; k < ad; ++k) b.actions(k, j) = actions_[i * ad + k];
        b.rewards[j] = rewards_[i];
        b.dones[j] = dones_[i] ? 1.0 : 0.0;
    }
    return b;
}

Batch OfflineDataset::all() const {
    std::vector<std::size_t> idx(size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    return gather(idx);
}

std::pair<std::size_t, std::size_t> OfflineDataset::trajectory(std::size_t k) const {
    if (k >= traj_starts_.size()) throw std::out_of_range("trajectory index out of range");
    std::size_t last = k + 1 < traj_starts_.size() ? traj_starts_[k + 1] : size();
    return {traj_starts_[k], last};
}

void OfflineDataset::shift_rewards(double delta) {
    for (float& r : rewards_) r = static_cast<float>(r + delta);
}

void OfflineDataset::validate() const {
    const std::size_t n = size();
    if (states_.size() != n * meta_.state_dim || next_states_.size() != n * meta_.state_dim ||
        actions_.size() != n * meta_.action_dim || dones_.size() != n)
        throw FormatError("record arrays disagree with count", 0);
    if (n == 0) {
        if (!traj_starts_.empty()) throw FormatError("trajectory starts on empty dataset", 0);
        return;
    }
    if (traj_starts_.empty() || traj_starts_.front() != 0) throw FormatError("first trajectory must start at 0", 0);
    for (std::size_t k = 1; k < traj_starts_.size(); ++k)
        if (traj_starts_[k] <= traj_starts_[k - 1] || traj_starts_[k] >= n)
            throw FormatError("trajectory starts do not partition the records", 0);
}

OfflineDataset generate_dataset(const envs::ContinuousEnv& env, const envs::Policy& policy, double noise,
                                std::size_t n_transitions, std::uint64_t seed, const std::string& quality,
                                const std::string& behavior) {
    if (n_transitions < 1) throw ConfigError("n_transitions must be >= 1");
    if (noise < 0.0) throw ConfigError("exploration noise must be >= 0");
    OfflineDataset ds(DatasetMeta{env.id(), env.state_dim(), env.action_dim(), behavior, quality, env.gamma});
    Rng noise_rng = fork_rng(seed, 0x6e6f697365);
    for (std::uint64_t episode = 0; ds.size() < n_transitions; ++episode) {
        Rng reset_rng = fork_rng(seed, episode);
        Vector s = env.reset(reset_rng);
        ds.begin_trajectory();
        for (int t = 0; t < env.horizon() && ds.size() < n_transitions; ++t) {
            Vector a = policy(s);
            for (Eigen::Index k = 0; k < a.size(); ++k)
                a[k] = std::clamp(a[k] + noise * standard_normal(noise_rng), -1.0, 1.0);
            auto r = env.step(s, a);
            ds.append({s, a, r.reward, r.next_state, r.terminal});
            if (r.terminal) break;
            s = r.next_state;
        }
    }
    return ds;
}

namespace {

static_assert(std::endian::native == std::endian::little, "dataset IO assumes a little-endian host");

template <class T>
void put(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

void put_floats(std::ostream& os, const float* p, std::size_t n) {
    os.write(reinterpret_cast<const char*>(p), static_cast<std::streamsize>(n * sizeof(float)));
}

class Reader {
public:
    explicit Reader(std::vector<char> bytes) : bytes_(std::move(bytes)) {}

    void read(void* dst, std::size_t n, const char* what) {
        if (pos_ + n > bytes_.size()) throw FormatError(std::string("truncated ") + what, bytes_.size());
        std::memcpy(dst, bytes_.data() + pos_, n);
        pos_ += n;
    }
    template <class T>
    T get(const char* what) {
        T v;
        read(&v, sizeof(T), what);
        return v;
    }
    std::size_t pos() const { return pos_; }
    std::size_t remaining() const { return bytes_.size() - pos_; }

private:
    std::vector<char> bytes_;
    std::size_t pos_ = 0;
};

}  // namespace

void write_dataset(const OfflineDataset& ds, const std::filesystem::path& path) {
    ds.validate();
    const auto& m = ds.meta_;
    std::size_t record_floats = 2 * m.state_dim + m.action_dim + 2;
    json header = {{"env_id", m.env_id},
                   {"state_dim", m.state_dim},
                   {"action_dim", m.action_dim},
                   {"behavior", m.behavior},
                   {"quality", m.quality},
                   {"gamma", m.gamma},
                   {"count", ds.size()},
                   {"trajectory_starts", ds.traj_starts_},
                   {"record_floats", record_floats}};
    std::string text = header.dump();

    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
    os.write(kDatasetMagic, 4);
    put<std::uint16_t>(os, kDatasetVersion);
    put<std::uint32_t>(os, static_cast<std::uint32_t>(text.size()));
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    const std::size_t sd = m.state_dim, ad = m.action_dim;
    for (std::size_t i = 0; i < ds.size(); ++i) {
        put_floats(os, &ds.states_[i * sd], sd);
        put_floats(os, &ds.actions_[i * ad], ad);
        put<float>(os, ds.rewards_[i]);
        put_floats(os, &ds.next_states_[i * sd], sd);
        put<float>(os, ds.dones_[i] ? 1.0f : 0.0f);
    }
    if (!os) throw std::runtime_error("write failed for " + path.string());
}

OfflineDataset read_dataset(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path.string());
    Reader rd(std::vector<char>(std::istreambuf_iterator<char>(is), {}));

    char magic[4];
    rd.read(magic, 4, "magic");
    if (std::memcmp(magic, kDatasetMagic, 4) != 0) throw FormatError("version error: bad magic, not an O2OD file", 0);
    auto version = rd.get<std::uint16_t>("version");
    if (version != kDatasetVersion)
        throw FormatError("version error: unsupported dataset version " + std::to_string(version), 4);
    auto header_len = rd.get<std::uint32_t>("header length");
    std::string text(header_len, '\0');
    std::size_t header_at = rd.pos();
    rd.read(text.data(), header_len, "header");

    json h;
    DatasetMeta meta;
    std::size_t count = 0, record_floats = 0;
    std::vector<std::uint32_t> starts;
    try {
        h = json::parse(text);
        meta.env_id = h.at("env_id").get<std::string>();
        meta.state_dim = h.at("state_dim").get<int>();
        meta.action_dim = h.at("action_dim").get<int>();
        meta.behavior = h.at("behavior").get<std::string>();
        meta.quality = h.at("quality").get<std::string>();
        meta.gamma = h.at("gamma").get<double>();
        count = h.at("count").get<std::size_t>();
        starts = h.at("trajectory_starts").get<std::vector<std::uint32_t>>();
        record_floats = h.at("record_floats").get<std::size_t>();
    } catch (const json::exception& e) {
        throw FormatError(std::string("bad header: ") + e.what(), header_at);
    }
    if (meta.state_dim <= 0 || meta.action_dim <= 0 ||
        record_floats != static_cast<std::size_t>(2 * meta.state_dim + meta.action_dim + 2))
        throw FormatError("header dims inconsistent", header_at);

    std::size_t blob = count * record_floats * sizeof(float);
    if (rd.remaining() < blob)
        throw FormatError("truncated blob: expected " + std::to_string(blob) + " bytes, found " +
                              std::to_string(rd.remaining()),
                          rd.pos() + rd.remaining());
    if (rd.remaining() > blob) throw FormatError("trailing bytes after blob", rd.pos() + blob);

    OfflineDataset ds(meta);
    const std::size_t sd = meta.state_dim, ad = meta.action_dim;
    ds.states_.resize(count * sd);
    ds.actions_.resize(count * ad);
    ds.rewards_.resize(count);
    ds.next_states_.resize(count * sd);
    ds.dones_.resize(count);
    for (std::size_t i = 0; i < count; ++i) {
        rd.read(&ds.states_[i * sd], sd * sizeof(float), "blob");
        rd.read(&ds.actions_[i * ad], ad * sizeof(float), "blob");
        ds.rewards_[i] = rd.get<float>("blob");
        rd.read(&ds.next_states_[i * sd], sd * sizeof(float), "blob");
        float done = rd.get<float>("blob");
        if (done != 0.0f && done != 1.0f) throw FormatError("done flag must be 0 or 1", rd.pos() - sizeof(float));
        ds.dones_[i] = done != 0.0f;
    }
    ds.traj_starts_ = std::move(starts);
    ds.validate();
    return ds;
}

std::vector<double> compute_returns(const OfflineDataset& ds, double gamma) {
    std::vector<double> g(ds.size(), 0.0);
    for (std::size_t k = 0; k < ds.num_trajectories(); ++k) {
        auto [first, last] = ds.trajectory(k);
        double acc = 0.0;
        for (std::size_t i = last; i-- > first;) {
            acc = ds.at(i).reward + gamma * acc;
            g[i] = acc;
        }
    }
    return g;
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_by_trajectory(const OfflineDataset& ds,
                                                                                  double fraction, std::uint64_t seed) {
    std::size_t nt = ds.num_trajectories();
    std::vector<std::size_t> order(nt);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng = fork_rng(seed, 0x73706c6974);
    std::shuffle(order.begin(), order.end(), rng);
    std::size_t n_hold = static_cast<std::size_t>(std::lround(fraction * static_cast<double>(nt)));
    if (nt >= 2) n_hold = std::clamp<std::size_t>(n_hold, 1, nt - 1);
    else n_hold = 0;

    std::vector<std::size_t> train, held;
    for (std::size_t r = 0; r < nt; ++r) {
        auto [first, last] = ds.trajectory(order[r]);
        auto& dst = r < n_hold ? held : train;
        for (std::size_t i = first; i < last; ++i) dst.push_back(i);
    }
    std::sort(train.begin(), train.end());
    std::sort(held.begin(), held.end());
    return {train, held};
}

std::vector<std::size_t> sample_indices(std::size_t n, std::size_t count, Rng& rng) {
    if (n == 0) throw std::invalid_argument("cannot sample from an empty partition");
    std::uniform_int_distribution<std::size_t> dist(0, n - 1);
    std::vector<std::size_t> idx(count);
    for (auto& i : idx) i = dist(rng);
    return idx;
}

ReplayBuffer::ReplayBuffer(std::shared_ptr<const OfflineDataset> offline, std::size_t capacity, std::uint64_t seed)
    : offline_(std::move(offline)), capacity_(capacity), rng_(fork_rng(seed, 0x7265706c6179)) {
    if (!offline_ || offline_->empty()) throw std::invalid_argument("replay buffer needs a non-empty offline dataset");
    if (capacity_ == 0) throw ConfigError("online capacity must be positive");
    const auto sd = offline_->meta().state_dim, ad = offline_->meta().action_dim;
    const auto cap = static_cast<Eigen::Index>(capacity_);
    states_.resize(sd, cap);
    actions_.resize(ad, cap);
    next_states_.resize(sd, cap);
    rewards_.resize(cap);
    dones_.resize(cap);
}

void ReplayBuffer::add(const Transition& t) {
    const auto sd = offline_->meta().state_dim, ad = offline_->meta().action_dim;
    if (t.state.size() != sd || t.next_state.size() != sd || t.action.size() != ad)
        throw DimensionError("transition dims do not match replay buffer");
    if (!std::isfinite(t.reward)) throw NumericalError("non-finite reward");
    auto j = static_cast<Eigen::Index>(head_);
    states_.col(j) = t.state;
    actions_.col(j) = t.action;
    next_states_.col(j) = t.next_state;
    rewards_[j] = t.reward;
    dones_[j] = t.done ? 1.0 : 0.0;
    head_ = (head_ + 1) % capacity_;
    online_count_ = std::min(online_count_ + 1, capacity_);
}

Batch ReplayBuffer::gather_online(const std::vector<std::size_t>& idx) const {
    const auto n = static_cast<Eigen::Index>(idx.size());
    Batch b{Matrix(states_.rows(), n), Matrix(actions_.rows(), n), Vector(n), Matrix(states_.rows(), n), Vector(n)};
    for (Eigen::Index j = 0; j < n; ++j) {
        auto i = static_cast<Eigen::Index>(idx[j]);
        b.states.col(j) = states_.col(i);
        b.actions.col(j) = actions_.col(i);
        b.next_states.col(j) = next_states_.col(i);
        b.rewards[j] = rewards_[i];
        b.dones[j] = dones_[i];
    }
    return b;
}

Batch ReplayBuffer::sample_offline(int batch_size) {
    if (batch_size <= 0) throw std::invalid_argument("batch size must be positive");
    return offline_->gather(sample_indices(offline_->size(), batch_size, rng_));
}

Batch ReplayBuffer::sample_online(int batch_size) {
    if (batch_size <= 0) throw std::invalid_argument("batch size must be positive");
    return gather_online(sample_indices(online_count_, batch_size, rng_));
}

Batch ReplayBuffer::sample_symmetric(int batch_size) {
    if (batch_size <= 0 || batch_size % 2 != 0) throw std::invalid_argument("symmetric batch size must be even");
    last_.clear();
    if (online_count_ == 0) {
        auto idx = sample_indices(offline_->size(), batch_size, rng_);
        for (auto i : idx) last_.emplace_back(false, i);
        return offline_->gather(idx);
    }
    const std::size_t half = batch_size / 2;
    auto off_idx = sample_indices(offline_->size(), half, rng_);
    auto on_idx = sample_indices(online_count_, half, rng_);
    for (auto i : off_idx) last_.emplace_back(false, i);
    for (auto i : on_idx) last_.emplace_back(true, i);
    Batch off = offline_->gather(off_idx);
    Batch on = gather_online(on_idx);
    const auto h = static_cast<Eigen::Index>(half);
    Batch b{Matrix(off.states.rows(), 2 * h), Matrix(off.actions.rows(), 2 * h), Vector(2 * h),
            Matrix(off.states.rows(), 2 * h), Vector(2 * h)};
    b.states << off.states, on.states;
    b.actions << off.actions, on.actions;
    b.next_states << off.next_states, on.next_states;
    b.rewards << off.rewards, on.rewards;
    b.dones << off.dones, on.dones;
    return b;
}

}  // namespace o2o::data
