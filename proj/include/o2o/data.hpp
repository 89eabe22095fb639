#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "o2o/common.hpp"
#include "o2o/envs.hpp"

namespace o2o::data {

struct Transition {
    Vector state;
    Vector action;
    double reward = 0.0;
    Vector next_state;
    bool done = false;
};

/// Column-batched transitions.
struct Batch {
    Matrix states;
    Matrix actions;
    Vector rewards;
    Matrix next_states;
    Vector dones;  // 1.0 when the transition ended in a terminal state

    Eigen::Index size() const { return states.cols(); }
};

struct DatasetMeta {
    std::string env_id;
    int state_dim = 0;
    int action_dim = 0;
    std::string behavior;  // free-form description of the behavior policy
    std::string quality;   // random | medium | expert | mixed
    double gamma = 0.99;

    bool operator==(const DatasetMeta&) const = default;
};

/**
 * Fixed transition store. Records are held in single precision so that the
 * on-disk form is an exact copy of memory.
 */
class OfflineDataset {
public:
    OfflineDataset() = default;
    explicit OfflineDataset(DatasetMeta meta);

    void begin_trajectory();
    void append(const Transition& t);

    std::size_t size() const { return rewards_.size(); }
    bool empty() const { return rewards_.empty(); }
    Transition at(std::size_t i) const;
    Batch gather(const std::vector<std::size_t>& indices) const;
    Batch all() const;

    const DatasetMeta& meta() const { return meta_; }
    void set_quality(std::string q) { meta_.quality = std::move(q); }
    /// First record index of each trajectory.
    const std::vector<std::uint32_t>& trajectory_starts() const { return traj_starts_; }
    std::size_t num_trajectories() const { return traj_starts_.size(); }
    /// Half-open record range [first, last) of trajectory k.
    std::pair<std::size_t, std::size_t> trajectory(std::size_t k) const;

    /// Shifts every reward by `delta` (rounded to float like the rest of the data).
    void shift_rewards(double delta);

    /// Throws FormatError unless trajectory starts partition the records.
    void validate() const;

    bool operator==(const OfflineDataset&) const = default;

private:
    friend void write_dataset(const OfflineDataset&, const std::filesystem::path&);
    friend OfflineDataset read_dataset(const std::filesystem::path&);

    DatasetMeta meta_;
    std::vector<float> states_;
    std::vector<float> actions_;
    std::vector<float> rewards_;
    std::vector<float> next_states_;
    std::vector<std::uint8_t> dones_;
    std::vector<std::uint32_t> traj_starts_;
};

/// Rolls out `policy` with additive Gaussian exploration noise of scale `noise`
/// (clipped to the action box) until `n_transitions` records exist. Episodes end
/// at a terminal state or the horizon.
OfflineDataset generate_dataset(const envs::ContinuousEnv& env, const envs::Policy& policy, double noise,
                                std::size_t n_transitions, std::uint64_t seed, const std::string& quality,
                                const std::string& behavior);

inline constexpr char kDatasetMagic[4] = {'O', '2', 'O', 'D'};
inline constexpr std::uint16_t kDatasetVersion = 1;

/// Layout: magic "O2OD", u16 version, u32 header length, JSON header, then
/// per-record little-endian f32 fields (state, action, reward, next_state, done).
void write_dataset(const OfflineDataset& ds, const std::filesystem::path& path);
OfflineDataset read_dataset(const std::filesystem::path& path);

/// Discounted return-to-go per record, computed backwards inside each trajectory.
std::vector<double> compute_returns(const OfflineDataset& ds, double gamma);

/// Splits trajectories into (train, held-out) record indices; roughly `fraction`
/// of the trajectories (at least one when there are two or more) are held out.
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_by_trajectory(const OfflineDataset& ds,
                                                                                  double fraction, std::uint64_t seed);

std::vector<std::size_t> sample_indices(std::size_t n, std::size_t count, Rng& rng);

/**
 * Offline partition (read-only) plus an online ring buffer. Symmetric sampling
 * draws exactly half of each batch from each partition once online data exists.
 */
class ReplayBuffer {
public:
    ReplayBuffer(std::shared_ptr<const OfflineDataset> offline, std::size_t capacity, std::uint64_t seed);

    void add(const Transition& t);
    std::size_t online_size() const { return online_count_; }
    std::size_t capacity() const { return capacity_; }
    const OfflineDataset& offline() const { return *offline_; }

    Batch sample_symmetric(int batch_size);
    Batch sample_online(int batch_size);
    Batch sample_offline(int batch_size);

    /// Record identities of the last sample_symmetric call: (is_online, index).
    const std::vector<std::pair<bool, std::size_t>>& last_sample() const { return last_; }

private:
    Batch gather_online(const std::vector<std::size_t>& idx) const;

    std::shared_ptr<const OfflineDataset> offline_;
    std::size_t capacity_;
    std::size_t online_count_ = 0;
    std::size_t head_ = 0;
    Matrix states_, actions_, next_states_;
    Vector rewards_, dones_;
    Rng rng_;
    std::vector<std::pair<bool, std::size_t>> last_;
};

}  // namespace o2o::data
