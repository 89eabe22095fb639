#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "o2o/align.hpp"
#include "o2o/cft.hpp"
#include "o2o/offline.hpp"
#include "o2o/reeval.hpp"

namespace o2o::pipeline {

/// Full run description. Unset optionals are derived from the dataset quality and fine-tuning mode.
struct ExperimentConfig {
    std::string env = "pendulum";
    std::uint64_t seed = 0;
    std::string out_dir = "run";
    double gamma = 0.99;
    std::vector<int> hidden{256, 256};

    struct Dataset {
        std::string path;  // empty: generate from the scripted controller of `quality`
        std::string quality = "medium";
        long transitions = 50000;
        double noise = 0.3;
    } dataset;

    struct Offline {
        offline::Algo algo = offline::Algo::cql;
        int steps = 20000;
        int batch_size = 256;
        double actor_lr = 3e-4;
        double critic_lr = 3e-4;
        double cql_alpha = 1.0;
        int num_sampled_actions = 10;
        int bc_warmup_steps = 0;
        double td3bc_alpha = 2.5;
        double entropy_coef = 0.0;
    } offline;

    struct Reeval {
        int iterations = 50000;
        double polyak = 0.005;
        int batch_size = 256;
        double lr = 3e-4;
        double plateau_tol = 1e-3;
        int value_steps = 20000;
        double value_lr = 1e-3;
    } reeval;

    struct Align {
        std::optional<double> alpha;  // 0.2 medium, 0.5 expert
        int steps = 20000;
        int batch_size = 256;
        double actor_lr = 3e-4;
        double critic_lr = 3e-4;
        int critic_warmup_steps = 0;
        double k = 1.0;
        double sigma = 0.2;
        double noise_clip = 0.5;
        double stop_pass_rate = 0.95;
        int check_every = 1000;
    } align;

    struct Finetune {
        std::string mode;  // o2sac | o2td3 | o2ppo; empty follows the offline algorithm
        long steps = 100000;
        int batch_size = 256;
        double actor_lr = 3e-4;
        double critic_lr = 3e-4;
        int utd = 1;
        int eval_every = 1000;
        int eval_episodes = 10;
        bool constrained = true;
        double lambda_init = 2.0;
        double lambda_lr = 3e-4;
        std::optional<double> tau_lo, tau_hi;
        std::string ref_mode = "best_so_far";
        int ref_interval = 1000;
        bool learn_alpha = true;
        std::optional<double> exploration_noise;  // 0.1 medium, 0.05 expert
        double q_normalizer = 2.5;
        int rollout_length = 2048;
        int epochs = 10;
        int minibatch = 64;
        double value_lr = 1e-3;
        double aux_alpha = 1.0;
        long beta_horizon = 0;
    } finetune;

    /// Fine-tuning mode after defaulting; throws ConfigError when it does not match the offline algorithm.
    std::string mode() const;
    double alpha() const;
    double exploration_noise() const;
    /// Range checks beyond what the module configs enforce.
    void validate() const;
};

/// Parses a JSON object; unknown keys and ill-typed values raise ConfigError.
ExperimentConfig parse_config(const nlohmann::json& j);
ExperimentConfig load_config(const std::filesystem::path& path);
/// Every field with its resolved value.
nlohmann::json to_json(const ExperimentConfig& cfg);
/// O2O_SEED, when set, replaces cfg.seed.
void apply_env_overrides(ExperimentConfig& cfg);

NetConfig net_config(const ExperimentConfig& cfg);
offline::BcConfig bc_config(const ExperimentConfig& cfg);
offline::Td3BcConfig td3bc_config(const ExperimentConfig& cfg);
offline::CqlConfig cql_config(const ExperimentConfig& cfg);
reeval::ReevalConfig reeval_config(const ExperimentConfig& cfg);
reeval::ValueFitConfig value_fit_config(const ExperimentConfig& cfg);
align::SacAlignConfig sac_align_config(const ExperimentConfig& cfg);
align::TdAlignConfig td_align_config(const ExperimentConfig& cfg);
cft::FinetuneConfig finetune_config(const ExperimentConfig& cfg);
cft::PpoConfig ppo_config(const ExperimentConfig& cfg);

/// Reward offset applied to data and online rewards on the TD3 path.
double reward_shift(const std::string& mode);

/// Stages after offline training, keyed by algorithm: td3bc skips re-evaluation, bc has no separate alignment.
std::vector<std::string> o2o_stages(offline::Algo algo);

/// Dataset from `cfg.dataset.path`, or freshly generated.
data::OfflineDataset load_or_generate_dataset(const ExperimentConfig& cfg);

/// 64-bit FNV-1a of a file's bytes, as 16 lowercase hex digits.
std::string file_hash(const std::filesystem::path& path);

struct RunResult {
    int exit_code = 0;  // 0 ok, 2 config error, 3 stage failure, 4 numerical abort
    std::string failed_stage;
    std::string message;
    std::vector<std::string> stages;
};

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitStage = 3;
inline constexpr int kExitNumerical = 4;

/**
 * Runs dataset -> offline training -> the algorithm's O2O stages, writing into cfg.out_dir:
 * config.json (verbatim `config_text` when given), checkpoints, metrics.csv and manifest.json.
 */
RunResult run_pipeline(const ExperimentConfig& cfg, const std::string& config_text = "");

// ---------------------------------------------------------------------------
// Mismatch diagnostics

struct DiagnoseConfig {
    int n_states = 512;
    int pairs = 16;          // action pairs per state for the rank audit
    int sweep_steps = 2000;  // FQE gradient steps warm-started from the critic
    double alpha = 0.2;
    double sigma = 0.2;      // perturbation scale for deterministic actors
    double gamma = 0.99;
    double polyak = 0.005;
    std::uint64_t seed = 0;
};

struct MismatchReport {
    double q_jump_mean = 0.0;  // mean Q(s, a_data) after the FQE sweep minus before
    double rank_disagreement_rate = 0.0;
    int n_states = 0;
};

MismatchReport diagnose_mismatch(const GaussianActor& actor, const TwinCritic& critic,
                                 const data::OfflineDataset& ds, const DiagnoseConfig& cfg);
MismatchReport diagnose_mismatch(const DeterministicActor& actor, const TwinCritic& critic,
                                 const data::OfflineDataset& ds, const DiagnoseConfig& cfg);
nlohmann::json to_json(const MismatchReport& r);

}  // namespace o2o::pipeline
