#include "latentpilot/actor_critic.hpp"
#include "latentpilot/lssm.hpp"

#include <benchmark/benchmark.h>

namespace {

lp::LssmConfig bench_model(int latent) {
  lp::LssmConfig c;
  c.obs_dim = 13;
  c.action_dim = 3;
  c.goal_dim = 3;
  c.z_dim = latent;
  c.s_dim = latent;
  c.num_base = latent;
  c.h_dim = latent;
  c.hidden = 4 * latent;
  c.encoder_hidden = 4 * latent;
  return c;
}

lp::SequenceBatch random_batch(lp::Rng& rng, const lp::LssmConfig& c, int batch, int length) {
  lp::SequenceBatch b;
  for (int t = 0; t < length; ++t) {
    b.obs.push_back(rng.normal_matrix(batch, c.obs_dim));
    b.actions.push_back(rng.normal_matrix(batch, c.action_dim).array().tanh().matrix());
    b.rewards.push_back(rng.normal_matrix(batch, 1));
  }
  b.goal = rng.normal_matrix(batch, c.goal_dim);
  return b;
}

void BM_ElboStep(benchmark::State& state) {
  lp::Rng rng(1);
  const lp::LssmConfig c = bench_model(static_cast<int>(state.range(0)));
  const lp::Lssm model(c, rng);
  const lp::SequenceBatch batch = random_batch(rng, c, static_cast<int>(state.range(1)), 60);
  lp::NoiseSource noise(2);
  for (auto _ : state) benchmark::DoNotOptimize(lp::elbo(model, batch, noise).loss);
}
BENCHMARK(BM_ElboStep)->Args({16, 32})->Args({32, 64})->Unit(benchmark::kMillisecond);

void BM_FilterStep(benchmark::State& state) {
  lp::Rng rng(1);
  const lp::LssmConfig c = bench_model(static_cast<int>(state.range(0)));
  const lp::Lssm model(c, rng);
  lp::NoiseSource zero = lp::NoiseSource::zeros();
  const lp::LatentState start = lp::initial_state(model, rng.normal_matrix(c.init_window, c.obs_dim),
                                                  Eigen::MatrixXd::Zero(c.init_window, c.action_dim), zero);
  lp::FilterState f{start, Eigen::VectorXd::Zero(c.action_dim), 0};
  const Eigen::VectorXd x = rng.normal_vector(c.obs_dim);
  const Eigen::VectorXd u = Eigen::VectorXd::Zero(c.action_dim);
  for (auto _ : state) benchmark::DoNotOptimize(lp::filter_step(model, f, u, x, zero).step);
}
BENCHMARK(BM_FilterStep)->Arg(16)->Arg(32)->Unit(benchmark::kMicrosecond);

void BM_ControllerStep(benchmark::State& state) {
  lp::Rng rng(1);
  const int latent = static_cast<int>(state.range(0));
  const int batch = static_cast<int>(state.range(1));
  const lp::LssmConfig mc = bench_model(latent);
  const lp::Lssm model(mc, rng);
  lp::ActorCriticConfig ac;
  ac.latent_dim = 2 * latent;
  ac.action_dim = mc.action_dim;
  ac.goal_dim = mc.goal_dim;
  ac.hidden = 4 * latent;
  ac.batch = batch;
  lp::Agent agent(ac, rng);
  lp::RolloutStart start;
  start.z = rng.normal_matrix(batch, latent);
  start.s = rng.normal_matrix(batch, latent);
  start.goal = rng.normal_matrix(batch, ac.goal_dim);
  start.commands.assign(ac.smoothing_window, lp::Matrix::Zero(batch, ac.action_dim));
  start.executed_prev = lp::Matrix::Zero(batch, ac.action_dim);
  start.executed_prev2 = lp::Matrix::Zero(batch, ac.action_dim);
  lp::ControllerTrainer trainer(agent);
  lp::NoiseSource noise(3);
  for (auto _ : state) benchmark::DoNotOptimize(trainer.step(model, start, noise).value_loss);
}
BENCHMARK(BM_ControllerStep)->Args({16, 64})->Args({32, 128})->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
