#include "latentpilot/harness.hpp"

#include "CLI11.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>

namespace fs = std::filesystem;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "run";
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "JSON run configuration (defaults to <out>/config.json, then built-ins)");
  cmd->add_option("--seed", c.seed, "Overrides the configured seed");
  cmd->add_option("--out", c.out, "Run directory")->capture_default_str();
}

lp::RunConfig resolve(const Common& c) {
  lp::RunConfig config;
  if (!c.config.empty()) {
    config = lp::load_run_config(c.config);
  } else if (fs::exists(fs::path(c.out) / "config.json")) {
    config = lp::load_run_config(fs::path(c.out) / "config.json");
  }
  if (c.seed) config.seed = *c.seed;
  config.validate();
  return config;
}

int episode_steps(const lp::RunConfig& c) {
  return std::max(1, static_cast<int>(std::lround(c.schedule.episode_seconds / c.env.cage.dt)));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Latent-model actor-critic for goal reaching in a simulated flight cage"};
  app.require_subcommand(1);

  Common collect_opts, train_opts, eval_opts, export_opts, grad_opts;
  int collect_episodes = -1;
  bool collect_policy = false;
  int train_iterations = -1;
  int eval_pairs = -1;
  double grad_tol = 1e-4;

  CLI::App* collect = app.add_subcommand("collect", "Append episodes to the run dataset");
  add_common(collect, collect_opts);
  collect->add_option("--episodes", collect_episodes, "Episode count (default: initial share of the step budget)");
  collect->add_flag("--policy", collect_policy, "Fly the checkpointed policy instead of the PID explorer");

  CLI::App* train = app.add_subcommand("train", "Alternate collection and model/controller optimisation");
  add_common(train, train_opts);
  train->add_option("--iterations", train_iterations,
                    "Only optimise on the existing dataset for this many iterations");

  CLI::App* eval = app.add_subcommand("eval", "Evaluate the checkpoint on the fixed start/goal grid");
  add_common(eval, eval_opts);
  eval->add_option("--pairs", eval_pairs, "Number of grid pairs (default from config)");

  CLI::App* exp = app.add_subcommand("export", "Write plot data under <out>/export");
  add_common(exp, export_opts);

  CLI::App* grad = app.add_subcommand("gradcheck", "Compare analytic and finite-difference gradients");
  add_common(grad, grad_opts);
  grad->add_option("--tolerance", grad_tol, "Maximum relative error")->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*collect) {
      lp::Trainer trainer(resolve(collect_opts), collect_opts.out);
      const lp::RunConfig& c = trainer.config();
      const int steps = episode_steps(c);
      int n = collect_episodes;
      if (n < 0) {
        n = static_cast<int>(std::floor(c.schedule.initial_fraction * static_cast<double>(c.schedule.total_env_steps)) /
                             steps);
      }
      std::int64_t added = 0;
      if (collect_policy) {
        if (!trainer.load_checkpoint()) throw std::runtime_error("collect --policy needs a checkpoint in the run directory");
        added = trainer.collect_policy(n, steps);
      } else {
        added = trainer.collect_pid(n, steps);
      }
      std::cout << "collected " << added << " steps; dataset has " << trainer.dataset().size() << " episodes\n";
    } else if (*train) {
      lp::Trainer trainer(resolve(train_opts), train_opts.out);
      if (train_iterations >= 0) {
        trainer.load_checkpoint();
        for (int i = 0; i < train_iterations; ++i) trainer.iterate();
        trainer.save_checkpoint();
      } else {
        trainer.run(&std::cout);
      }
      std::cout << "trained " << trainer.iterations() << " iterations\n";
    } else if (*eval) {
      const lp::RunConfig c = resolve(eval_opts);
      const lp::EvalReport r = lp::evaluate_run(c, eval_opts.out, eval_pairs < 0 ? c.eval.pairs : eval_pairs);
      std::cout << std::fixed << std::setprecision(3) << "success rate " << r.success_rate << " over "
                << r.episodes.size() << " episodes; time " << r.time_mean << " +- " << r.time_std << " s; position "
                << r.position_mean << " +- " << r.position_std << " m; yaw " << r.yaw_mean << " +- " << r.yaw_std
                << " deg\n";
    } else if (*exp) {
      lp::export_run(export_opts.out);
      std::cout << "wrote " << (fs::path(export_opts.out) / "export").string() << "\n";
    } else if (*grad) {
      const lp::RunConfig c = resolve(grad_opts);
      bool ok = true;
      for (const lp::GradientCheck& g : lp::gradient_diagnostics(c.seed, grad_tol)) {
        std::cout << std::left << std::setw(18) << g.name << " relative error " << std::scientific
                  << std::setprecision(3) << g.relative_error << (g.passed ? "  ok" : "  FAIL") << "\n";
        ok = ok && g.passed;
      }
      return ok ? 0 : 1;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
