#include "mflow/training.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>
#include <string>
#include <thread>

#include "json.hpp"
#include "mflow/checkpoint.hpp"
#include "mflow/distributions.hpp"

namespace mflow {

AdamState make_adam(Vec params, double lr, double beta1, double beta2, double eps) {
  AdamState st;
  st.m = Vec::Zero(params.size());
  st.v = Vec::Zero(params.size());
  st.params = std::move(params);
  st.lr = lr;
  st.beta1 = beta1;
  st.beta2 = beta2;
  st.eps = eps;
  return st;
}

void adam_step(AdamState& s, const Vec& g) {
  if (g.size() != s.params.size())
    throw ArgumentError("adam_step: gradient has " + std::to_string(g.size()) +
                        " entries, parameters have " + std::to_string(s.params.size()));
  if (!g.allFinite()) {
    long bad = 0, first = -1;
    for (long i = 0; i < g.size(); ++i)
      if (!std::isfinite(g[i])) {
        ++bad;
        if (first < 0) first = i;
      }
    throw TrainingError("adam_step: non-finite gradient (" + std::to_string(bad) + " of " +
                        std::to_string(g.size()) + " entries, first at index " +
                        std::to_string(first) + ")");
  }
  s.step += 1;
  s.m = s.beta1 * s.m + (1.0 - s.beta1) * g;
  s.v = s.beta2 * s.v + (1.0 - s.beta2) * g.cwiseProduct(g);
  const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.step));
  const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.step));
  s.params.array() -= s.lr * (s.m.array() / c1) / ((s.v.array() / c2).sqrt() + s.eps);
}

Metrics eval_metrics(const FlowModel& model, const DensitySpec& target, int n_mc, Rng& rng,
                     int threads) {
  if (n_mc < 2) throw ArgumentError("eval_metrics: need at least two draws");
  if (threads < 1) throw ArgumentError("eval_metrics: threads must be positive");
  if (density_manifold(target) != model.manifold)
    throw ArgumentError("eval_metrics: target lives on a different manifold");

  std::vector<ManifoldPoint> xs;
  xs.reserve(static_cast<size_t>(n_mc));
  for (int i = 0; i < n_mc; ++i) xs.push_back(target_sample(target, rng));

  std::vector<double> lt(n_mc), lm(n_mc);
  auto one = [&](int i) {
    lt[i] = target_logpdf(target, xs[i]);
    lm[i] = mcnf_logprob(model, xs[i]);
  };
  int workers = std::max(1, std::min(threads, n_mc));
  if (workers == 1) {
    for (int i = 0; i < n_mc; ++i) one(i);
  } else {
    std::atomic<int> next{0};
    std::vector<std::exception_ptr> errors(static_cast<size_t>(n_mc));
    auto pump = [&] {
      while (true) {
        int i = next.fetch_add(1);
        if (i >= n_mc) return;
        try {
          one(i);
        } catch (...) {
          errors[static_cast<size_t>(i)] = std::current_exception();
          return;
        }
      }
    };
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(workers));
    for (int w = 0; w < workers; ++w) pool.emplace_back(pump);
    for (std::thread& th : pool) th.join();
    for (int i = 0; i < n_mc; ++i)
      if (errors[static_cast<size_t>(i)]) std::rethrow_exception(errors[static_cast<size_t>(i)]);
  }

  double sum_d = 0.0, sum_d2 = 0.0, sum_lt = 0.0, sum_lm = 0.0;
  for (int i = 0; i < n_mc; ++i) {
    double d = lt[i] - lm[i];
    sum_d += d;
    sum_d2 += d * d;
    sum_lt += lt[i];
    sum_lm += lm[i];
  }
  Metrics out;
  out.kl = sum_d / n_mc;
  double var = std::max(0.0, (sum_d2 - n_mc * out.kl * out.kl) / (n_mc - 1.0));
  out.std_error = std::sqrt(var / n_mc);
  out.nll = -sum_lm / n_mc;
  out.target_entropy = -sum_lt / n_mc;
  return out;
}

TrainConfig make_train_config(const DensitySpec& target) {
  TrainConfig cfg;
  cfg.target = target;
  const Manifold m = density_manifold(target);
  cfg.base = default_base(m);
  if (m.kind == ManifoldKind::Hyperboloid) {
    // tangent dynamics: complete for any parameter value, one global chart
    cfg.mode = FieldMode::TangentDirect;
    cfg.policy = ChartPolicy::fixed_k();
  } else {
    cfg.mode = FieldMode::AmbientProjected;
    cfg.policy = ChartPolicy::adaptive(0.1);
  }
  return cfg;
}

namespace {

void validate_config(const TrainConfig& cfg) {
  if (cfg.batch_size < 1) throw ArgumentError("train_density: batch_size must be positive");
  if (cfg.max_samples < cfg.batch_size)
    throw ArgumentError("train_density: budget is smaller than one batch");
  if (cfg.eval_every < 1) throw ArgumentError("train_density: eval_every must be positive");
  if (cfg.eval_draws < 2) throw ArgumentError("train_density: eval_draws must be at least 2");
  if (cfg.threads < 1) throw ArgumentError("train_density: threads must be positive");
  if (!(cfg.lr > 0.0)) throw ArgumentError("train_density: learning rate must be positive");
  if (density_manifold(cfg.base) != density_manifold(cfg.target))
    throw ArgumentError("train_density: base and target live on different manifolds");
}

}  // namespace

TrainReport train_density(const TrainConfig& cfg) {
  validate_config(cfg);
  const Manifold m = density_manifold(cfg.target);

  TrainReport rep;
  rep.model.manifold = m;
  rep.model.base = cfg.base;
  rep.model.theta = make_field(m, cfg.mode, cfg.hidden, cfg.layers);
  rep.model.grid = cfg.grid;
  rep.model.policy = cfg.policy;
  rep.model.validate();
  FlowModel& model = rep.model;

  Rng rng = make_rng(cfg.seed);
  glorot_init(model.theta, rng);
  model.theta.W.back().setZero();  // start at the identity flow

  AdamState adam = make_adam(model.theta.flatten(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps_adam);

  const auto t0 = std::chrono::steady_clock::now();
  auto elapsed = [&t0] {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  };
  auto run_eval = [&] {
    // a separate stream per evaluation keeps the metrics independent of the
    // batch layout
    Rng er = make_rng(cfg.seed, 1000 + static_cast<std::uint64_t>(rep.records.size()));
    Metrics mt = eval_metrics(model, cfg.target, cfg.eval_draws, er, cfg.threads);
    rep.records.push_back({rep.steps, rep.samples, mt.nll, mt.kl, mt.std_error, elapsed()});
  };

  run_eval();
  rep.nll_min = std::numeric_limits<double>::infinity();
  rep.nll_max = -std::numeric_limits<double>::infinity();
  long next_eval = cfg.eval_every;

  while (rep.samples < cfg.max_samples) {
    const long bs = std::min<long>(cfg.batch_size, cfg.max_samples - rep.samples);
    std::vector<ManifoldPoint> batch;
    batch.reserve(static_cast<size_t>(bs));
    for (long i = 0; i < bs; ++i) batch.push_back(target_sample(cfg.target, rng));
    try {
      NllResult res = nll_and_grad(model, batch, cfg.threads);
      if (!std::isfinite(res.nll)) {
        rep.all_finite = false;
        throw TrainingError("non-finite training loss");
      }
      rep.nll_min = std::min(rep.nll_min, res.nll);
      rep.nll_max = std::max(rep.nll_max, res.nll);
      adam_step(adam, res.grad_theta);
    } catch (const NumericError& e) {
      rep.aborted = true;
      rep.abort_reason = e.what();
      break;
    } catch (const ChartOverflow& e) {
      rep.aborted = true;
      rep.abort_reason = e.what();
      break;
    } catch (const DomainError& e) {
      rep.aborted = true;
      rep.abort_reason = e.what();
      break;
    } catch (const TrainingError& e) {
      rep.aborted = true;
      rep.abort_reason = e.what();
      break;
    }
    model.theta.unflatten(adam.params);
    rep.steps += 1;
    rep.samples += bs;
    if (rep.samples >= next_eval && rep.samples < cfg.max_samples) {
      run_eval();
      while (next_eval <= rep.samples) next_eval += cfg.eval_every;
    }
  }

  if (!rep.aborted) run_eval();
  if (rep.steps == 0) {
    rep.nll_min = std::numeric_limits<double>::quiet_NaN();
    rep.nll_max = std::numeric_limits<double>::quiet_NaN();
  }
  if (!cfg.checkpoint_path.empty()) {
    save_flow_checkpoint(cfg.checkpoint_path, model);
    rep.checkpoint_path = cfg.checkpoint_path;
  }
  return rep;
}

std::string train_report_json(const TrainReport& r) {
  nlohmann::json j;
  j["records"] = nlohmann::json::array();
  for (const EvalRecord& rec : r.records)
    j["records"].push_back({{"step", rec.step},
                            {"samples", rec.samples},
                            {"nll", rec.nll},
                            {"kl", rec.kl},
                            {"stderr", rec.std_error},
                            {"seconds", rec.seconds}});
  j["steps"] = r.steps;
  j["samples"] = r.samples;
  j["nll_min"] = r.nll_min;
  j["nll_max"] = r.nll_max;
  j["all_finite"] = r.all_finite;
  j["aborted"] = r.aborted;
  j["abort_reason"] = r.abort_reason;
  j["checkpoint_path"] = r.checkpoint_path;
  return j.dump();
}

std::string loss_curve_csv(const TrainReport& r) {
  std::string out = "step,samples,nll,kl,stderr,seconds\n";
  char buf[200];
  for (const EvalRecord& rec : r.records) {
    std::snprintf(buf, sizeof buf, "%ld,%ld,%.17g,%.17g,%.17g,%.3f\n", rec.step, rec.samples,
                  rec.nll, rec.kl, rec.std_error, rec.seconds);
    out += buf;
  }
  return out;
}

}  // namespace mflow
