#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "o2o/agents.hpp"
#include "o2o/pipeline.hpp"

namespace fs = std::filesystem;
using namespace o2o;
using pipeline::ExperimentConfig;

namespace {

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

ExperimentConfig base_config(const std::string& path) {
    ExperimentConfig cfg = path.empty() ? ExperimentConfig{} : pipeline::load_config(path);
    pipeline::apply_env_overrides(cfg);
    return cfg;
}

/// Takes env id and quality from the dataset so derived defaults (alpha, tau, noise) follow the data.
data::OfflineDataset load_data(ExperimentConfig& cfg, const std::string& path) {
    auto ds = data::read_dataset(path);
    cfg.env = ds.meta().env_id;
    cfg.dataset.quality = ds.meta().quality;
    cfg.gamma = ds.meta().gamma;
    return ds;
}

fs::path sibling(const fs::path& p, const std::string& suffix) {
    return p.parent_path() / (p.stem().string() + suffix + p.extension().string());
}

void print_json(const nlohmann::json& j) { std::cout << j.dump(2) << "\n"; }

template <class Actor>
nlohmann::json score_json(const envs::ContinuousEnv& env, const Actor& actor, int episodes, std::uint64_t seed) {
    const auto r = envs::evaluate_policy(env, agents::greedy_policy(actor), episodes, seed);
    return {{"return_mean", r.mean},
            {"return_std", r.std},
            {"normalized", envs::normalized_score(env.id(), r.mean)},
            {"returns", r.returns}};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Offline-to-online RL pipeline"};
    app.require_subcommand(1);
    std::string config_path;
    app.add_option("--config", config_path, "JSON experiment config")->check(CLI::ExistingFile);

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "Roll out a scripted controller into a dataset");
    std::string gen_env = "pendulum", gen_quality = "medium", gen_out;
    long gen_n = 50000;
    double gen_noise = 0.3;
    std::uint64_t gen_seed = 0;
    gen->add_option("--env", gen_env)->check(CLI::IsMember({"pendulum", "pointnav"}));
    gen->add_option("--quality", gen_quality)->check(CLI::IsMember({"random", "medium", "expert"}));
    gen->add_option("--n", gen_n, "transitions")->check(CLI::PositiveNumber);
    gen->add_option("--noise", gen_noise)->check(CLI::NonNegativeNumber);
    gen->add_option("--seed", gen_seed);
    gen->add_option("--out", gen_out)->required();

    // train-offline
    auto* tro = app.add_subcommand("train-offline", "Train an offline actor (and critic)");
    std::string tro_algo, tro_data, tro_out, tro_out_critic;
    tro->add_option("--algo", tro_algo)->required()->check(CLI::IsMember({"bc", "td3bc", "cql"}));
    tro->add_option("--data", tro_data)->required()->check(CLI::ExistingFile);
    tro->add_option("--out", tro_out)->required();
    tro->add_option("--out-critic", tro_out_critic, "default: <out>_critic.ckpt");

    // reevaluate
    auto* rev = app.add_subcommand("reevaluate", "Fit a fresh critic for a frozen actor");
    std::string rev_actor, rev_data, rev_mode, rev_out;
    rev->add_option("--actor", rev_actor)->required()->check(CLI::ExistingFile);
    rev->add_option("--data", rev_data)->required()->check(CLI::ExistingFile);
    rev->add_option("--mode", rev_mode)->required()->check(CLI::IsMember({"sac", "td3", "ppo"}));
    rev->add_option("--out", rev_out)->required();

    // align
    auto* aln = app.add_subcommand("align", "Calibrate a critic to an offline actor");
    std::string aln_actor, aln_critic, aln_mode, aln_data, aln_out_actor, aln_out_critic;
    aln->add_option("--actor", aln_actor)->required()->check(CLI::ExistingFile);
    aln->add_option("--critic", aln_critic)->required()->check(CLI::ExistingFile);
    aln->add_option("--mode", aln_mode)->required()->check(CLI::IsMember({"sac", "td3"}));
    aln->add_option("--data", aln_data)->required()->check(CLI::ExistingFile);
    aln->add_option("--out-actor", aln_out_actor)->required();
    aln->add_option("--out-critic", aln_out_critic)->required();

    // finetune
    auto* fin = app.add_subcommand("finetune", "Constrained online fine-tuning");
    std::string fin_mode, fin_actor, fin_critic, fin_env, fin_data, fin_out;
    long fin_steps = 0;
    fin->add_option("--mode", fin_mode)->required()->check(CLI::IsMember({"o2sac", "o2td3", "o2ppo"}));
    fin->add_option("--actor", fin_actor)->required()->check(CLI::ExistingFile);
    fin->add_option("--critic", fin_critic, "twin critic, or value critic for o2ppo")->required()->check(CLI::ExistingFile);
    fin->add_option("--env", fin_env)->check(CLI::IsMember({"pendulum", "pointnav"}));
    fin->add_option("--data", fin_data)->required()->check(CLI::ExistingFile);
    fin->add_option("--steps", fin_steps)->check(CLI::PositiveNumber);
    fin->add_option("--out-dir", fin_out)->required();

    // evaluate
    auto* evl = app.add_subcommand("evaluate", "Deterministic-mode evaluation of an actor");
    std::string evl_actor, evl_env = "pendulum";
    int evl_episodes = 10;
    std::uint64_t evl_seed = 0;
    evl->add_option("--actor", evl_actor)->required()->check(CLI::ExistingFile);
    evl->add_option("--env", evl_env)->check(CLI::IsMember({"pendulum", "pointnav"}));
    evl->add_option("--episodes", evl_episodes)->check(CLI::PositiveNumber);
    evl->add_option("--seed", evl_seed);

    // diagnose
    auto* dia = app.add_subcommand("diagnose", "Measure evaluation and improvement mismatch");
    std::string dia_actor, dia_critic, dia_data;
    pipeline::DiagnoseConfig dcfg;
    dia->add_option("--actor", dia_actor)->required()->check(CLI::ExistingFile);
    dia->add_option("--critic", dia_critic)->required()->check(CLI::ExistingFile);
    dia->add_option("--data", dia_data)->required()->check(CLI::ExistingFile);
    dia->add_option("--n-states", dcfg.n_states)->check(CLI::PositiveNumber);
    dia->add_option("--sweep-steps", dcfg.sweep_steps)->check(CLI::PositiveNumber);
    dia->add_option("--seed", dcfg.seed);

    // run
    auto* run = app.add_subcommand("run", "Full pipeline from a config");
    std::string run_out;
    run->add_option("--out-dir", run_out, "overrides out_dir");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : pipeline::kExitConfig;
    }

    try {
        if (*run) {
            if (config_path.empty()) throw ConfigError("run needs --config");
            const std::string text = read_file(config_path);
            ExperimentConfig cfg = base_config(config_path);
            if (!run_out.empty()) cfg.out_dir = run_out;
            const auto res = pipeline::run_pipeline(cfg, text);
            if (res.exit_code != 0) std::cerr << "stage '" << res.failed_stage << "' failed: " << res.message << "\n";
            else std::cout << "wrote " << cfg.out_dir << "\n";
            return res.exit_code;
        }

        ExperimentConfig cfg = base_config(config_path);

        if (*gen) {
            const auto env = envs::make_env(gen_env);
            auto ds = data::generate_dataset(*env, envs::scripted_policy(gen_env, gen_quality, gen_seed), gen_noise,
                                             static_cast<std::size_t>(gen_n), gen_seed, gen_quality,
                                             "scripted-" + gen_quality);
            data::write_dataset(ds, gen_out);
            print_json({{"out", gen_out}, {"transitions", ds.size()}, {"trajectories", ds.num_trajectories()}});
        } else if (*tro) {
            auto ds = load_data(cfg, tro_data);
            cfg.offline.algo = offline::algo_from_string(tro_algo);
            cfg.finetune.mode.clear();
            const fs::path critic_out = tro_out_critic.empty() ? sibling(tro_out, "_critic") : fs::path(tro_out_critic);
            if (cfg.offline.algo == offline::Algo::bc) {
                auto r = offline::train_bc(ds, pipeline::bc_config(cfg));
                save_actor(tro_out, r.actor, cfg.seed);
                print_json({{"actor", tro_out}, {"heldout_log_likelihood", r.heldout_log_likelihood}});
            } else if (cfg.offline.algo == offline::Algo::td3bc) {
                ds.shift_rewards(pipeline::reward_shift("o2td3"));
                auto r = offline::train_td3_bc(ds, pipeline::td3bc_config(cfg));
                save_actor(tro_out, r.actor, cfg.seed);
                save_critic(critic_out, r.critic, cfg.seed);
                print_json({{"actor", tro_out}, {"critic", critic_out.string()}, {"heldout_residual", r.heldout_residual}});
            } else {
                auto r = offline::train_cql_lite(ds, pipeline::cql_config(cfg));
                save_actor(tro_out, r.actor, cfg.seed);
                save_critic(critic_out, r.critic, cfg.seed);
                print_json({{"actor", tro_out}, {"critic", critic_out.string()}, {"heldout_residual", r.heldout_residual}});
            }
        } else if (*rev) {
            auto ds = load_data(cfg, rev_data);
            reeval::FqeReport rep;
            if (rev_mode == "sac") {
                save_critic(rev_out, reeval::fqe_sac(ds, load_gaussian_actor(rev_actor), pipeline::reeval_config(cfg), &rep),
                            cfg.seed);
            } else if (rev_mode == "td3") {
                ds.shift_rewards(pipeline::reward_shift("o2td3"));
                save_critic(rev_out,
                            reeval::fqe_td3(ds, load_deterministic_actor(rev_actor), pipeline::reeval_config(cfg), &rep),
                            cfg.seed);
            } else {
                auto r = reeval::fit_returns(ds, pipeline::value_fit_config(cfg));
                save_critic(rev_out, r.critic, cfg.seed);
                print_json({{"out", rev_out}, {"train_mse", r.train_mse}, {"heldout_mse", r.heldout_mse}});
                return 0;
            }
            print_json({{"out", rev_out}, {"steps_run", rep.steps_run}, {"residuals", rep.residuals}});
        } else if (*aln) {
            auto ds = load_data(cfg, aln_data);
            const auto critic = load_twin_critic(aln_critic);
            align::AlignReport rep;
            if (aln_mode == "sac") {
                auto r = align::o2sac_align(ds, critic, load_gaussian_actor(aln_actor), pipeline::sac_align_config(cfg), &rep);
                save_actor(aln_out_actor, r.actor, cfg.seed);
                save_critic(aln_out_critic, r.critic, cfg.seed);
            } else {
                ds.shift_rewards(pipeline::reward_shift("o2td3"));
                auto r = align::o2td3_align(ds, critic, load_deterministic_actor(aln_actor), pipeline::td_align_config(cfg),
                                            &rep);
                save_actor(aln_out_actor, r.actor, cfg.seed);
                save_critic(aln_out_critic, r.critic, cfg.seed);
            }
            print_json({{"steps_run", rep.steps_run}, {"pass_rates", rep.pass_rates}, {"losses", rep.losses}});
        } else if (*fin) {
            auto ds = load_data(cfg, fin_data);
            if (!fin_env.empty() && fin_env != cfg.env) throw ConfigError("--env does not match the dataset");
            cfg.offline.algo = fin_mode == "o2sac" ? offline::Algo::cql
                               : fin_mode == "o2td3" ? offline::Algo::td3bc
                                                     : offline::Algo::bc;
            cfg.finetune.mode = fin_mode;
            if (fin_steps > 0) cfg.finetune.steps = fin_steps;
            cfg.validate();
            const auto env = envs::make_env(cfg.env);
            env->gamma = cfg.gamma;
            fs::create_directories(fin_out);
            const fs::path dir(fin_out);
            std::vector<cft::MetricsRow> metrics;
            if (fin_mode == "o2sac") {
                auto dsp = std::make_shared<const data::OfflineDataset>(std::move(ds));
                auto r = cft::finetune_o2sac(*env, load_gaussian_actor(fin_actor), load_twin_critic(fin_critic), dsp,
                                             pipeline::finetune_config(cfg), [&](const GaussianActor& a, long) {
                                                 save_actor(dir / "last_good_actor.ckpt", a, cfg.seed);
                                             });
                save_actor(dir / "final_actor.ckpt", r.actor, cfg.seed);
                save_critic(dir / "final_critic.ckpt", r.critic, cfg.seed);
                metrics = std::move(r.metrics);
            } else if (fin_mode == "o2td3") {
                ds.shift_rewards(pipeline::reward_shift("o2td3"));
                auto dsp = std::make_shared<const data::OfflineDataset>(std::move(ds));
                auto r = cft::finetune_o2td3(*env, load_deterministic_actor(fin_actor), load_twin_critic(fin_critic), dsp,
                                             pipeline::finetune_config(cfg), [&](const DeterministicActor& a, long) {
                                                 save_actor(dir / "last_good_actor.ckpt", a, cfg.seed);
                                             });
                save_actor(dir / "final_actor.ckpt", r.actor, cfg.seed);
                save_critic(dir / "final_critic.ckpt", r.critic, cfg.seed);
                metrics = std::move(r.metrics);
            } else {
                auto r = cft::finetune_o2ppo(*env, load_gaussian_actor(fin_actor), load_value_critic(fin_critic),
                                             pipeline::ppo_config(cfg), [&](const GaussianActor& a, long) {
                                                 save_actor(dir / "last_good_actor.ckpt", a, cfg.seed);
                                             });
                save_actor(dir / "final_actor.ckpt", r.actor, cfg.seed);
                save_critic(dir / "final_critic.ckpt", r.value, cfg.seed);
                metrics = std::move(r.metrics);
            }
            cft::write_metrics_csv(dir / "metrics.csv", metrics);
            print_json({{"out_dir", fin_out}, {"evaluations", metrics.size()}});
        } else if (*evl) {
            const auto env = envs::make_env(evl_env);
            const std::string kind = checkpoint_kind(evl_actor);
            if (kind == "gaussian_actor") print_json(score_json(*env, load_gaussian_actor(evl_actor), evl_episodes, evl_seed));
            else if (kind == "deterministic_actor")
                print_json(score_json(*env, load_deterministic_actor(evl_actor), evl_episodes, evl_seed));
            else throw ConfigError("checkpoint " + evl_actor + " is a " + kind + ", not an actor");
        } else if (*dia) {
            auto ds = load_data(cfg, dia_data);
            dcfg.alpha = cfg.alpha();
            dcfg.gamma = cfg.gamma;
            const auto critic = load_twin_critic(dia_critic);
            const std::string kind = checkpoint_kind(dia_actor);
            if (kind == "gaussian_actor")
                print_json(pipeline::to_json(pipeline::diagnose_mismatch(load_gaussian_actor(dia_actor), critic, ds, dcfg)));
            else if (kind == "deterministic_actor")
                print_json(
                    pipeline::to_json(pipeline::diagnose_mismatch(load_deterministic_actor(dia_actor), critic, ds, dcfg)));
            else throw ConfigError("checkpoint " + dia_actor + " is a " + kind + ", not an actor");
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return pipeline::kExitConfig;
    } catch (const DimensionError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return pipeline::kExitConfig;
    } catch (const NumericalError& e) {
        std::cerr << "numerical abort: " << e.what() << "\n";
        return pipeline::kExitNumerical;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return pipeline::kExitStage;
    }
    return 0;
}
