#include "o2o/pipeline.hpp"

#include <cerrno>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include "o2o/agents.hpp"

namespace o2o::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const std::set<std::string> kSections{"dataset", "offline", "reeval", "align", "finetune"};

/// Calls f(section, key, field) for every configurable field; section "" is the top level.
template <class C, class F>
void visit_fields(C& c, F&& f) {
    f("", "env", c.env);
    f("", "seed", c.seed);
    f("", "out_dir", c.out_dir);
    f("", "gamma", c.gamma);
    f("", "hidden", c.hidden);

    auto& d = c.dataset;
    f("dataset", "path", d.path);
    f("dataset", "quality", d.quality);
    f("dataset", "transitions", d.transitions);
    f("dataset", "noise", d.noise);

    auto& o = c.offline;
    f("offline", "algo", o.algo);
    f("offline", "steps", o.steps);
    f("offline", "batch_size", o.batch_size);
    f("offline", "actor_lr", o.actor_lr);
    f("offline", "critic_lr", o.critic_lr);
    f("offline", "cql_alpha", o.cql_alpha);
    f("offline", "num_sampled_actions", o.num_sampled_actions);
    f("offline", "bc_warmup_steps", o.bc_warmup_steps);
    f("offline", "td3bc_alpha", o.td3bc_alpha);
    f("offline", "entropy_coef", o.entropy_coef);

    auto& r = c.reeval;
    f("reeval", "iterations", r.iterations);
    f("reeval", "polyak", r.polyak);
    f("reeval", "batch_size", r.batch_size);
    f("reeval", "lr", r.lr);
    f("reeval", "plateau_tol", r.plateau_tol);
    f("reeval", "value_steps", r.value_steps);
    f("reeval", "value_lr", r.value_lr);

    auto& a = c.align;
    f("align", "alpha", a.alpha);
    f("align", "steps", a.steps);
    f("align", "batch_size", a.batch_size);
    f("align", "actor_lr", a.actor_lr);
    f("align", "critic_lr", a.critic_lr);
    f("align", "critic_warmup_steps", a.critic_warmup_steps);
    f("align", "k", a.k);
    f("align", "sigma", a.sigma);
    f("align", "noise_clip", a.noise_clip);
    f("align", "stop_pass_rate", a.stop_pass_rate);
    f("align", "check_every", a.check_every);

    auto& t = c.finetune;
    f("finetune", "mode", t.mode);
    f("finetune", "steps", t.steps);
    f("finetune", "batch_size", t.batch_size);
    f("finetune", "actor_lr", t.actor_lr);
    f("finetune", "critic_lr", t.critic_lr);
    f("finetune", "utd", t.utd);
    f("finetune", "eval_every", t.eval_every);
    f("finetune", "eval_episodes", t.eval_episodes);
    f("finetune", "constrained", t.constrained);
    f("finetune", "lambda_init", t.lambda_init);
    f("finetune", "lambda_lr", t.lambda_lr);
    f("finetune", "tau_lo", t.tau_lo);
    f("finetune", "tau_hi", t.tau_hi);
    f("finetune", "ref_mode", t.ref_mode);
    f("finetune", "ref_interval", t.ref_interval);
    f("finetune", "learn_alpha", t.learn_alpha);
    f("finetune", "exploration_noise", t.exploration_noise);
    f("finetune", "q_normalizer", t.q_normalizer);
    f("finetune", "rollout_length", t.rollout_length);
    f("finetune", "epochs", t.epochs);
    f("finetune", "minibatch", t.minibatch);
    f("finetune", "value_lr", t.value_lr);
    f("finetune", "aux_alpha", t.aux_alpha);
    f("finetune", "beta_horizon", t.beta_horizon);
}

[[noreturn]] void bad_type(const std::string& name, const char* expected) {
    throw ConfigError("config field '" + name + "' must be " + expected);
}

template <class I>
void read_integer(const json& v, I& out, const std::string& name) {
    if (v.is_number_integer() || v.is_number_unsigned()) {
        if constexpr (std::is_unsigned_v<I>) {
            if (v.is_number_integer() && v.get<std::int64_t>() < 0) bad_type(name, "a non-negative integer");
            out = static_cast<I>(v.get<std::uint64_t>());
        } else {
            out = static_cast<I>(v.get<std::int64_t>());
        }
        return;
    }
    if (v.is_number_float()) {
        const double x = v.get<double>();
        if (x == static_cast<double>(static_cast<std::int64_t>(x)) && (!std::is_unsigned_v<I> || x >= 0)) {
            out = static_cast<I>(x);
            return;
        }
    }
    bad_type(name, "an integer");
}

void read_value(const json& v, std::string& out, const std::string& name) {
    if (!v.is_string()) bad_type(name, "a string");
    out = v.get<std::string>();
}
void read_value(const json& v, double& out, const std::string& name) {
    if (!v.is_number()) bad_type(name, "a number");
    out = v.get<double>();
}
void read_value(const json& v, bool& out, const std::string& name) {
    if (!v.is_boolean()) bad_type(name, "a boolean");
    out = v.get<bool>();
}
void read_value(const json& v, int& out, const std::string& name) { read_integer(v, out, name); }
void read_value(const json& v, long& out, const std::string& name) { read_integer(v, out, name); }
void read_value(const json& v, std::uint64_t& out, const std::string& name) { read_integer(v, out, name); }
void read_value(const json& v, std::optional<double>& out, const std::string& name) {
    if (v.is_null()) {
        out.reset();
        return;
    }
    double x = 0.0;
    read_value(v, x, name);
    out = x;
}
void read_value(const json& v, std::vector<int>& out, const std::string& name) {
    if (!v.is_array()) bad_type(name, "an array of integers");
    out.clear();
    for (const auto& e : v) {
        int x = 0;
        read_integer(e, x, name);
        out.push_back(x);
    }
}
void read_value(const json& v, offline::Algo& out, const std::string& name) {
    std::string s;
    read_value(v, s, name);
    out = offline::algo_from_string(s);
}

json write_value(const std::string& v) { return v; }
json write_value(double v) { return v; }
json write_value(bool v) { return v; }
json write_value(int v) { return v; }
json write_value(long v) { return v; }
json write_value(std::uint64_t v) { return v; }
json write_value(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }
json write_value(const std::vector<int>& v) { return v; }
json write_value(offline::Algo v) { return offline::to_string(v); }

std::string quality_preset(const std::string& quality) { return quality == "expert" ? "expert" : "medium"; }

}  // namespace

// ---------------------------------------------------------------------------

std::string ExperimentConfig::mode() const {
    std::string expected;
    switch (offline.algo) {
        case offline::Algo::cql: expected = "o2sac"; break;
        case offline::Algo::td3bc: expected = "o2td3"; break;
        case offline::Algo::bc: expected = "o2ppo"; break;
    }
    if (finetune.mode.empty()) return expected;
    if (finetune.mode != expected)
        throw ConfigError("mode '" + finetune.mode + "' does not follow offline algorithm '" +
                          offline::to_string(offline.algo) + "' (expected '" + expected + "')");
    return finetune.mode;
}

double ExperimentConfig::alpha() const {
    if (align.alpha) return *align.alpha;
    return dataset.quality == "expert" ? 0.5 : 0.2;
}

double ExperimentConfig::exploration_noise() const {
    if (finetune.exploration_noise) return *finetune.exploration_noise;
    return dataset.quality == "expert" ? 0.05 : 0.1;
}

void ExperimentConfig::validate() const {
    if (env != "pendulum" && env != "pointnav") throw ConfigError("env must be 'pendulum' or 'pointnav'");
    if (!(gamma > 0.0 && gamma < 1.0)) throw ConfigError("gamma must lie in (0, 1)");
    if (hidden.empty()) throw ConfigError("hidden must list at least one layer width");
    for (int w : hidden)
        if (w < 1) throw ConfigError("hidden widths must be positive");
    if (out_dir.empty()) throw ConfigError("out_dir must not be empty");
    static const std::set<std::string> qualities{"random", "medium", "expert", "mixed"};
    if (!qualities.count(dataset.quality)) throw ConfigError("dataset quality must be random, medium, expert or mixed");
    if (dataset.path.empty() && dataset.quality == "mixed")
        throw ConfigError("a 'mixed' dataset must be supplied through dataset.path");
    if (dataset.transitions < 1) throw ConfigError("dataset transitions must be >= 1");
    if (!(dataset.noise >= 0.0)) throw ConfigError("dataset noise must be >= 0");
    if (offline.steps < 1) throw ConfigError("offline steps must be >= 1");
    if (offline.batch_size < 1) throw ConfigError("offline batch_size must be >= 1");
    if (!(offline.actor_lr > 0.0 && offline.critic_lr > 0.0)) throw ConfigError("offline learning rates must be positive");
    if (!(offline.cql_alpha >= 0.0)) throw ConfigError("cql_alpha must be >= 0");
    if (offline.num_sampled_actions < 1) throw ConfigError("num_sampled_actions must be >= 1");
    if (offline.bc_warmup_steps < 0) throw ConfigError("bc_warmup_steps must be >= 0");
    if (!(offline.td3bc_alpha >= 0.0)) throw ConfigError("td3bc_alpha must be >= 0");
    if (!(offline.entropy_coef >= 0.0)) throw ConfigError("entropy_coef must be >= 0");
    if (reeval.value_steps < 1) throw ConfigError("value_steps must be >= 1");
    if (!(reeval.value_lr > 0.0)) throw ConfigError("value_lr must be positive");
    if (!(reeval.plateau_tol >= 0.0)) throw ConfigError("plateau_tol must be >= 0");
    if (finetune.tau_lo.has_value() != finetune.tau_hi.has_value())
        throw ConfigError("tau_lo and tau_hi must be given together");
    if (finetune.tau_lo && !(*finetune.tau_lo >= 0.0 && *finetune.tau_lo <= *finetune.tau_hi))
        throw ConfigError("tau must satisfy 0 <= tau_lo <= tau_hi");
    if (finetune.steps > std::numeric_limits<int>::max()) throw ConfigError("finetune steps too large");

    const std::string m = mode();
    reeval_config(*this).validate();
    if (m == "o2sac") sac_align_config(*this).validate();
    if (m == "o2td3") td_align_config(*this).validate();
    if (m == "o2ppo") ppo_config(*this).validate();
    else finetune_config(*this).validate();
}

ExperimentConfig parse_config(const json& j) {
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (kSections.count(it.key())) {
            if (!it.value().is_object()) throw ConfigError("config section '" + it.key() + "' must be an object");
        }
    }
    ExperimentConfig cfg;
    std::set<std::string> seen;
    visit_fields(cfg, [&](const std::string& section, const std::string& key, auto& field) {
        const std::string name = section.empty() ? key : section + "." + key;
        seen.insert(name);
        const json* node = &j;
        if (!section.empty()) {
            auto s = j.find(section);
            if (s == j.end()) return;
            node = &*s;
        }
        auto v = node->find(key);
        if (v == node->end()) return;
        read_value(*v, field, name);
    });
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (kSections.count(it.key())) {
            for (auto jt = it.value().begin(); jt != it.value().end(); ++jt)
                if (!seen.count(it.key() + "." + jt.key()))
                    throw ConfigError("unknown config key '" + it.key() + "." + jt.key() + "'");
        } else if (!seen.count(it.key())) {
            throw ConfigError("unknown config key '" + it.key() + "'");
        }
    }
    return cfg;
}

ExperimentConfig load_config(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
    }
    return parse_config(j);
}

json to_json(const ExperimentConfig& cfg) {
    json j = json::object();
    visit_fields(const_cast<ExperimentConfig&>(cfg), [&](const std::string& section, const std::string& key, auto& field) {
        if (section.empty()) j[key] = write_value(field);
        else j[section][key] = write_value(field);
    });
    return j;
}

void apply_env_overrides(ExperimentConfig& cfg) {
    const char* s = std::getenv("O2O_SEED");
    if (s == nullptr || *s == '\0') return;
    char* end = nullptr;
    errno = 0;
    const unsigned long long v = std::strtoull(s, &end, 10);
    if (errno != 0 || *end != '\0' || *s == '-') throw ConfigError(std::string("O2O_SEED is not an unsigned integer: ") + s);
    cfg.seed = v;
}

// ---------------------------------------------------------------------------

NetConfig net_config(const ExperimentConfig& cfg) { return NetConfig{cfg.hidden, nn::Activation::relu}; }

offline::BcConfig bc_config(const ExperimentConfig& cfg) {
    offline::BcConfig c;
    c.net = net_config(cfg);
    c.steps = cfg.offline.steps;
    c.batch_size = cfg.offline.batch_size;
    c.lr = cfg.offline.actor_lr;
    c.entropy_coef = cfg.offline.entropy_coef;
    c.seed = cfg.seed;
    return c;
}

offline::Td3BcConfig td3bc_config(const ExperimentConfig& cfg) {
    offline::Td3BcConfig c;
    c.actor_net = c.critic_net = net_config(cfg);
    c.steps = cfg.offline.steps;
    c.batch_size = cfg.offline.batch_size;
    c.actor_lr = cfg.offline.actor_lr;
    c.critic_lr = cfg.offline.critic_lr;
    c.alpha = cfg.offline.td3bc_alpha;
    c.gamma = cfg.gamma;
    c.seed = cfg.seed;
    return c;
}

offline::CqlConfig cql_config(const ExperimentConfig& cfg) {
    offline::CqlConfig c;
    c.actor_net = c.critic_net = net_config(cfg);
    c.steps = cfg.offline.steps;
    c.batch_size = cfg.offline.batch_size;
    c.actor_lr = cfg.offline.actor_lr;
    c.critic_lr = cfg.offline.critic_lr;
    c.cql_alpha = cfg.offline.cql_alpha;
    c.num_sampled_actions = cfg.offline.num_sampled_actions;
    c.bc_warmup_steps = cfg.offline.bc_warmup_steps;
    c.entropy_alpha = cfg.alpha();
    c.gamma = cfg.gamma;
    c.seed = cfg.seed;
    return c;
}

reeval::ReevalConfig reeval_config(const ExperimentConfig& cfg) {
    reeval::ReevalConfig c;
    c.iterations = cfg.reeval.iterations;
    c.polyak = cfg.reeval.polyak;
    c.batch_size = cfg.reeval.batch_size;
    c.alpha = cfg.alpha();
    c.gamma = cfg.gamma;
    c.lr = cfg.reeval.lr;
    c.net = net_config(cfg);
    c.plateau_tol = cfg.reeval.plateau_tol;
    c.seed = cfg.seed;
    return c;
}

reeval::ValueFitConfig value_fit_config(const ExperimentConfig& cfg) {
    reeval::ValueFitConfig c;
    c.steps = cfg.reeval.value_steps;
    c.batch_size = cfg.reeval.batch_size;
    c.lr = cfg.reeval.value_lr;
    c.gamma = cfg.gamma;
    c.net = net_config(cfg);
    c.seed = cfg.seed;
    return c;
}

align::SacAlignConfig sac_align_config(const ExperimentConfig& cfg) {
    align::SacAlignConfig c;
    c.alpha = cfg.alpha();
    c.steps = cfg.align.steps;
    c.batch_size = cfg.align.batch_size;
    c.actor_lr = cfg.align.actor_lr;
    c.critic_lr = cfg.align.critic_lr;
    c.critic_warmup_steps = cfg.align.critic_warmup_steps;
    c.check_every = cfg.align.check_every;
    c.stop_pass_rate = cfg.align.stop_pass_rate;
    c.seed = cfg.seed;
    return c;
}

align::TdAlignConfig td_align_config(const ExperimentConfig& cfg) {
    align::TdAlignConfig c;
    c.k = cfg.align.k;
    c.sigma = cfg.align.sigma;
    c.noise_clip = cfg.align.noise_clip;
    c.steps = cfg.align.steps;
    c.batch_size = cfg.align.batch_size;
    c.actor_lr = cfg.align.actor_lr;
    c.critic_lr = cfg.align.critic_lr;
    c.check_every = cfg.align.check_every;
    c.stop_pass_rate = cfg.align.stop_pass_rate;
    c.seed = cfg.seed;
    return c;
}

cft::FinetuneConfig finetune_config(const ExperimentConfig& cfg) {
    const auto& t = cfg.finetune;
    const std::string m = cfg.mode();
    cft::FinetuneConfig c;
    c.steps = t.steps;
    c.batch_size = t.batch_size;
    c.actor_lr = t.actor_lr;
    c.critic_lr = t.critic_lr;
    c.gamma = cfg.gamma;
    c.utd = t.utd;
    c.eval_every = t.eval_every;
    c.eval_episodes = t.eval_episodes;
    c.constrained = t.constrained;
    c.constraint.lambda = t.lambda_init;
    c.constraint.lr = t.lambda_lr;
    const int horizon = static_cast<int>(std::max<long>(1, t.steps));
    if (t.tau_lo) c.tau = cft::TauSchedule{*t.tau_lo, *t.tau_hi, horizon};
    else if (m == "o2sac" || m == "o2td3") c.tau = cft::tau_preset(m, quality_preset(cfg.dataset.quality), horizon);
    c.ref_mode = cft::ref_mode_from_string(t.ref_mode);
    c.ref_interval = t.ref_interval;
    c.alpha = cfg.alpha();
    c.learn_alpha = t.learn_alpha;
    c.exploration_noise = cfg.exploration_noise();
    c.policy_noise = cfg.align.sigma;
    c.noise_clip = cfg.align.noise_clip;
    c.reward_shift = reward_shift(m);
    c.q_normalizer = m == "o2td3" ? t.q_normalizer : 0.0;
    c.seed = cfg.seed;
    return c;
}

cft::PpoConfig ppo_config(const ExperimentConfig& cfg) {
    const auto& t = cfg.finetune;
    cft::PpoConfig c;
    c.steps = t.steps;
    c.rollout_length = t.rollout_length;
    c.epochs = t.epochs;
    c.minibatch = t.minibatch;
    c.actor_lr = t.actor_lr;
    c.value_lr = t.value_lr;
    c.gamma = cfg.gamma;
    c.aux.alpha = t.aux_alpha;
    c.beta_horizon = t.beta_horizon;
    c.eval_every = t.eval_every;
    c.eval_episodes = t.eval_episodes;
    c.ref_mode = cft::ref_mode_from_string(t.ref_mode);
    c.ref_interval = t.ref_interval;
    c.seed = cfg.seed;
    return c;
}

double reward_shift(const std::string& mode) { return mode == "o2td3" ? -1.0 : 0.0; }

std::vector<std::string> o2o_stages(offline::Algo algo) {
    switch (algo) {
        case offline::Algo::cql: return {"reevaluate", "align", "finetune"};
        case offline::Algo::td3bc: return {"align", "finetune"};
        case offline::Algo::bc: return {"reevaluate", "finetune"};
    }
    return {};
}

data::OfflineDataset load_or_generate_dataset(const ExperimentConfig& cfg) {
    if (!cfg.dataset.path.empty()) {
        if (!fs::exists(cfg.dataset.path)) throw std::runtime_error("dataset " + cfg.dataset.path + " does not exist");
        auto ds = data::read_dataset(cfg.dataset.path);
        if (ds.meta().env_id != cfg.env)
            throw ConfigError("dataset env '" + ds.meta().env_id + "' does not match config env '" + cfg.env + "'");
        return ds;
    }
    const auto env = envs::make_env(cfg.env);
    env->gamma = cfg.gamma;
    return data::generate_dataset(*env, envs::scripted_policy(cfg.env, cfg.dataset.quality, cfg.seed), cfg.dataset.noise,
                                  static_cast<std::size_t>(cfg.dataset.transitions), cfg.seed, cfg.dataset.quality,
                                  "scripted-" + cfg.dataset.quality);
}

std::string file_hash(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string() + " for hashing");
    std::uint64_t h = 0xcbf29ce484222325ULL;
    char buf[1 << 16];
    while (in) {
        in.read(buf, sizeof buf);
        for (std::streamsize i = 0; i < in.gcount(); ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 0x100000001b3ULL;
        }
    }
    char hex[17];
    std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(h));
    return hex;
}

// ---------------------------------------------------------------------------

namespace {

struct StageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << text;
}

json report_json(const align::AlignReport& r) {
    return {{"steps_run", r.steps_run}, {"pass_rates", r.pass_rates}, {"losses", r.losses}};
}

class Run {
public:
    Run(const ExperimentConfig& cfg, RunResult& res) : cfg_(cfg), res_(res), dir_(cfg.out_dir) {}

    void execute(const std::string& config_text) {
        stage("config");
        cfg_.validate();
        mode_ = cfg_.mode();
        fs::create_directories(dir_);
        write_text(dir_ / "config.json", config_text.empty() ? to_json(cfg_).dump(2) + "\n" : config_text);
        write_text(dir_ / "config.resolved.json", to_json(cfg_).dump(2) + "\n");
        artifact("config.json");
        artifact("config.resolved.json");

        stage("dataset");
        auto ds = load_or_generate_dataset(cfg_);
        if (cfg_.dataset.path.empty()) {
            data::write_dataset(ds, dir_ / "dataset.o2ods");
            artifact("dataset.o2ods");
        }
        env_ = envs::make_env(cfg_.env);
        env_->gamma = cfg_.gamma;
        res_.stages = o2o_stages(cfg_.offline.algo);

        switch (cfg_.offline.algo) {
            case offline::Algo::cql: sac_path(std::move(ds)); break;
            case offline::Algo::td3bc: td3_path(std::move(ds)); break;
            case offline::Algo::bc: ppo_path(std::move(ds)); break;
        }
        current_.clear();
        write_manifest("ok");
    }

    void fail(const std::string& message) {
        res_.failed_stage = current_;
        res_.message = message;
        try {
            if (fs::exists(dir_)) write_manifest("failed");
        } catch (...) {
        }
    }

private:
    void stage(const std::string& name) { current_ = name; }

    void artifact(const std::string& name) { artifacts_.push_back(name); }

    template <class Actor>
    void score(const std::string& key, const Actor& actor) {
        const auto s = agents::evaluate_score(*env_, agents::greedy_policy(actor), cfg_.finetune.eval_episodes,
                                              cfg_.seed + 7919);
        scores_[key] = {{"normalized", s.mean}, {"return", s.raw_mean}};
    }

    template <class Actor>
    cft::CheckpointHook<Actor> last_good_hook() {
        return [this](const Actor& a, long) { save_actor(dir_ / "last_good_actor.ckpt", a, cfg_.seed); };
    }

    void write_metrics(const std::vector<cft::MetricsRow>& rows) {
        cft::write_metrics_csv(dir_ / "metrics.csv", rows);
        artifact("metrics.csv");
    }

    template <class Actor>
    void save_actor_artifact(const std::string& name, const Actor& a) {
        save_actor(dir_ / name, a, cfg_.seed);
        artifact(name);
    }

    template <class Critic>
    void save_critic_artifact(const std::string& name, const Critic& c) {
        save_critic(dir_ / name, c, cfg_.seed);
        artifact(name);
    }

    void sac_path(data::OfflineDataset ds) {
        stage("train_offline");
        auto off = offline::train_cql_lite(ds, cql_config(cfg_));
        save_actor_artifact("offline_actor.ckpt", off.actor);
        save_critic_artifact("offline_critic.ckpt", off.critic);
        score("offline", off.actor);

        stage("reevaluate");
        reeval::FqeReport fr;
        auto fqe = reeval::fqe_sac(ds, off.actor, reeval_config(cfg_), &fr);
        save_critic_artifact("reeval_critic.ckpt", fqe);
        reports_["reevaluate"] = {{"steps_run", fr.steps_run}, {"residuals", fr.residuals}};

        stage("align");
        align::AlignReport ar;
        auto al = align::o2sac_align(ds, fqe, off.actor, sac_align_config(cfg_), &ar);
        save_actor_artifact("aligned_actor.ckpt", al.actor);
        save_critic_artifact("aligned_critic.ckpt", al.critic);
        reports_["align"] = report_json(ar);
        score("aligned", al.actor);

        stage("finetune");
        auto dsp = std::make_shared<const data::OfflineDataset>(std::move(ds));
        auto ft = cft::finetune_o2sac(*env_, al.actor, al.critic, dsp, finetune_config(cfg_),
                                      last_good_hook<GaussianActor>());
        finish(ft);
    }

    void td3_path(data::OfflineDataset ds) {
        ds.shift_rewards(reward_shift(mode_));
        stage("train_offline");
        auto off = offline::train_td3_bc(ds, td3bc_config(cfg_));
        save_actor_artifact("offline_actor.ckpt", off.actor);
        save_critic_artifact("offline_critic.ckpt", off.critic);
        score("offline", off.actor);

        stage("align");
        align::AlignReport ar;
        auto al = align::o2td3_align(ds, off.critic, off.actor, td_align_config(cfg_), &ar);
        save_actor_artifact("aligned_actor.ckpt", al.actor);
        save_critic_artifact("aligned_critic.ckpt", al.critic);
        reports_["align"] = report_json(ar);
        score("aligned", al.actor);

        stage("finetune");
        auto dsp = std::make_shared<const data::OfflineDataset>(std::move(ds));
        auto ft = cft::finetune_o2td3(*env_, al.actor, al.critic, dsp, finetune_config(cfg_),
                                      last_good_hook<DeterministicActor>());
        finish(ft);
    }

    void ppo_path(data::OfflineDataset ds) {
        stage("train_offline");
        auto off = offline::train_bc(ds, bc_config(cfg_));
        save_actor_artifact("offline_actor.ckpt", off.actor);
        score("offline", off.actor);

        stage("reevaluate");
        auto vf = reeval::fit_returns(ds, value_fit_config(cfg_));
        save_critic_artifact("value_critic.ckpt", vf.critic);
        reports_["reevaluate"] = {{"train_mse", vf.train_mse}, {"heldout_mse", vf.heldout_mse}};

        stage("finetune");
        auto ft = cft::finetune_o2ppo(*env_, off.actor, vf.critic, ppo_config(cfg_), last_good_hook<GaussianActor>());
        save_actor_artifact("final_actor.ckpt", ft.actor);
        save_critic_artifact("final_critic.ckpt", ft.value);
        write_metrics(ft.metrics);
        score("final", ft.actor);
    }

    template <class R>
    void finish(const R& ft) {
        save_actor_artifact("final_actor.ckpt", ft.actor);
        save_critic_artifact("final_critic.ckpt", ft.critic);
        write_metrics(ft.metrics);
        reports_["finetune"] = {{"final_lambda", ft.final_lambda}};
        score("final", ft.actor);
    }

    void write_manifest(const std::string& status) {
        json arts = json::array();
        for (const auto& name : artifacts_) {
            const fs::path p = dir_ / name;
            if (!fs::exists(p)) continue;
            arts.push_back({{"name", name}, {"bytes", fs::file_size(p)}, {"fnv1a64", file_hash(p)}});
        }
        json m = {{"status", status},
                  {"env", cfg_.env},
                  {"seed", cfg_.seed},
                  {"offline_algo", offline::to_string(cfg_.offline.algo)},
                  {"mode", mode_},
                  {"stages", res_.stages},
                  {"artifacts", arts},
                  {"scores", scores_},
                  {"reports", reports_}};
        if (status != "ok") m["failed_stage"] = current_, m["error"] = res_.message;
        write_text(dir_ / "manifest.json", m.dump(2) + "\n");
    }

    const ExperimentConfig& cfg_;
    RunResult& res_;
    fs::path dir_;
    std::string mode_;
    std::string current_;
    std::unique_ptr<envs::ContinuousEnv> env_;
    std::vector<std::string> artifacts_;
    json scores_ = json::object();
    json reports_ = json::object();
};

}  // namespace

RunResult run_pipeline(const ExperimentConfig& cfg, const std::string& config_text) {
    RunResult res;
    Run run(cfg, res);
    try {
        run.execute(config_text);
        res.exit_code = kExitOk;
    } catch (const ConfigError& e) {
        res.exit_code = kExitConfig;
        run.fail(e.what());
    } catch (const NumericalError& e) {
        res.exit_code = kExitNumerical;
        run.fail(e.what());
    } catch (const std::exception& e) {
        res.exit_code = kExitStage;
        run.fail(e.what());
    }
    return res;
}

// ---------------------------------------------------------------------------

namespace {

template <class Actor, class Fqe, class Rank>
MismatchReport diagnose(const Actor& actor, const TwinCritic& critic, const data::OfflineDataset& ds,
                        const DiagnoseConfig& cfg, Fqe fqe, Rank rank) {
    if (ds.empty()) throw ConfigError("diagnosis needs a non-empty dataset");
    if (cfg.n_states < 1 || cfg.sweep_steps < 1) throw ConfigError("n_states and sweep_steps must be >= 1");
    const auto& m = ds.meta();
    if (actor.state_dim() != m.state_dim || actor.action_dim() != m.action_dim ||
        critic.state_dim() != m.state_dim || critic.action_dim() != m.action_dim)
        throw DimensionError("checkpoints do not match the dataset dimensions");
    Rng rng = fork_rng(cfg.seed, 31);
    const auto b = ds.gather(data::sample_indices(ds.size(), static_cast<std::size_t>(cfg.n_states), rng));
    reeval::ReevalConfig rc;
    rc.iterations = cfg.sweep_steps;
    rc.alpha = cfg.alpha;
    rc.gamma = cfg.gamma;
    rc.polyak = cfg.polyak;
    rc.plateau_tol = 0.0;
    rc.seed = cfg.seed;
    TwinCritic start = critic;
    start.sync_targets();
    const TwinCritic swept = fqe(ds, actor, rc, &start);
    MismatchReport r;
    r.n_states = static_cast<int>(b.size());
    r.q_jump_mean = (swept.min_value(b.states, b.actions) - critic.min_value(b.states, b.actions)).mean();
    Rng rr = fork_rng(cfg.seed, 32);
    r.rank_disagreement_rate = rank(critic, actor, b.states, rr);
    return r;
}

}  // namespace

MismatchReport diagnose_mismatch(const GaussianActor& actor, const TwinCritic& critic, const data::OfflineDataset& ds,
                                 const DiagnoseConfig& cfg) {
    return diagnose(
        actor, critic, ds, cfg,
        [](const auto& d, const auto& a, const auto& rc, const TwinCritic* init) {
            return reeval::fqe_sac(d, a, rc, nullptr, init);
        },
        [&](const TwinCritic& c, const GaussianActor& a, const Matrix& s, Rng& r) {
            return align::rank_disagreement_rate(c, a, s, cfg.pairs, r);
        });
}

MismatchReport diagnose_mismatch(const DeterministicActor& actor, const TwinCritic& critic,
                                 const data::OfflineDataset& ds, const DiagnoseConfig& cfg) {
    return diagnose(
        actor, critic, ds, cfg,
        [](const auto& d, const auto& a, const auto& rc, const TwinCritic* init) {
            return reeval::fqe_td3(d, a, rc, nullptr, init);
        },
        [&](const TwinCritic& c, const DeterministicActor& a, const Matrix& s, Rng& r) {
            return align::rank_disagreement_rate(c, a, s, cfg.pairs, cfg.sigma, r);
        });
}

json to_json(const MismatchReport& r) {
    return {{"q_jump_mean", r.q_jump_mean}, {"rank_disagreement_rate", r.rank_disagreement_rate}, {"n_states", r.n_states}};
}

}  // namespace o2o::pipeline
