#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mflow/flow.hpp"

namespace mflow {

// ---------------------------------------------------------------------------
// Adam over a flat parameter vector

struct AdamState {
  Vec params;
  Vec m;  // first-moment estimate
  Vec v;  // second-moment estimate
  long step = 0;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

AdamState make_adam(Vec params, double lr = 1e-3, double beta1 = 0.9, double beta2 = 0.999,
                    double eps = 1e-8);

// One bias-corrected update in place.  Deterministic; throws TrainingError on
// non-finite gradients (with a count and first offending index) without
// touching the state.
void adam_step(AdamState& state, const Vec& grad);

// ---------------------------------------------------------------------------
// evaluation

struct Metrics {
  double nll = 0.0;             // E_target[-log p_model]
  double kl = 0.0;              // E_target[log p_target - log p_model]
  double std_error = 0.0;       // Monte-Carlo standard error of the KL estimate
  double target_entropy = 0.0;  // E_target[-log p_target], equals nll - kl
};

// Monte-Carlo estimates over n_mc draws from the target (n_mc >= 2).  Draws
// come from the rng serially; model evaluations may fan out over threads, the
// reduction order is fixed either way.
Metrics eval_metrics(const FlowModel& model, const DensitySpec& target, int n_mc, Rng& rng,
                     int threads = 1);

// ---------------------------------------------------------------------------
// density-estimation loop

struct TrainConfig {
  DensitySpec target;
  DensitySpec base;
  FieldMode mode = FieldMode::AmbientProjected;
  int hidden = 32;
  int layers = 4;
  int batch_size = 200;
  long max_samples = 100000;  // total target draws consumed by optimization
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps_adam = 1e-8;
  std::uint64_t seed = 0;
  long eval_every = 10000;  // samples between metric evaluations
  int eval_draws = 10000;   // Monte-Carlo draws per evaluation
  TimeGrid grid;
  ChartPolicy policy;
  int threads = 1;
  std::string checkpoint_path;  // empty: no checkpoint written
};

// Filled-in defaults for a target: the manifold's standard base prior,
// tangent dynamics on the hyperboloid (complete for any parameter value),
// projected dynamics with adaptive re-anchoring on the sphere.
TrainConfig make_train_config(const DensitySpec& target);

struct EvalRecord {
  long step = 0;     // optimizer steps completed
  long samples = 0;  // target draws consumed
  double nll = 0.0;
  double kl = 0.0;
  double std_error = 0.0;
  double seconds = 0.0;  // wall time since the run started; excluded from
                         // reproducibility comparisons
};

struct TrainReport {
  std::vector<EvalRecord> records;
  long steps = 0;
  long samples = 0;
  double nll_min = 0.0;  // extremes of the per-step batch loss
  double nll_max = 0.0;
  bool all_finite = true;
  bool aborted = false;
  std::string abort_reason;
  FlowModel model;
  std::string checkpoint_path;
};

// Sample a batch from the target, take an Adam step on the mean NLL, repeat
// until the sample budget is spent; metrics at start, every eval_every
// samples, and at the end.  Bitwise reproducible from the seed, including
// across thread counts.  Numeric failures stop the run early with the report
// flagged instead of throwing.
TrainReport train_density(const TrainConfig& cfg);

// JSON for the whole report; CSV (step,samples,nll,kl,stderr,seconds) for
// the evaluation records
std::string train_report_json(const TrainReport& report);
std::string loss_curve_csv(const TrainReport& report);

}  // namespace mflow
