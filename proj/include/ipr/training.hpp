#pragma once

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "ipr/graph.hpp"
#include "ipr/model.hpp"
#include "ipr/param_store.hpp"
#include "ipr/tape.hpp"
#include "ipr/tensor.hpp"

namespace ipr {

enum class HeadKind { multiclass, binary, regression_mae, regression_mse };

HeadKind head_from_string(const std::string& s);
std::string head_to_string(HeadKind k);

// Output head of a task: what the model's out_dim columns mean and which loss
// applies.  multiclass expects labels as class indices, binary expects a
// single logit against 0/1 targets, the regression kinds expect out_dim
// target values per graph.
struct TaskHead {
  HeadKind kind = HeadKind::multiclass;
  std::int64_t out_dim = 1;

  void validate() const;
};

// Batch loss (mean over graphs): cross-entropy from logits for
// classification, L1/L2 for regression.  `targets` holds one label vector
// per prediction row, as stored on the graphs.
Tensor loss_value(const Tensor& pred, const std::vector<std::vector<double>>& targets,
                  const TaskHead& head);

// Task metric on a prediction block: classification accuracy (binary
// predicts 1 iff logit > 0) or mean absolute error for the regression kinds.
double task_metric(const Tensor& pred, const std::vector<std::vector<double>>& targets,
                   const TaskHead& head);

// Adam with cosine-annealed learning rate:
//   lr(step) = lr_min + (lr_base - lr_min) * (1 + cos(pi * step / total_steps)) / 2
// Steps past total_steps stay at lr_min.
struct OptimizerState {
  std::int64_t step = 0;
  std::int64_t total_steps = 1;
  double lr_base = 1e-3;
  double lr_min = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::map<std::string, std::vector<double>> first_moment;
  std::map<std::string, std::vector<double>> second_moment;
};

double cosine_lr(const OptimizerState& opt);

// One Adam update from the store's accumulated gradients (with bias
// correction), then advances the step.  Gradients are left untouched;
// zeroing is the caller's choice.
void adam_step(ParameterStore& params, OptimizerState& opt);

// Scale gradients so their global L2 norm is at most max_norm; returns the
// pre-clip norm.
double clip_gradients(ParameterStore& params, double max_norm);

// Raised when a training loss stops being finite; carries summary statistics
// of the assignment logits at the failing step for post-mortems.
struct DivergenceError : std::runtime_error {
  explicit DivergenceError(const std::string& what) : std::runtime_error(what) {}
};

struct TrainOptions {
  std::int64_t batch_size = 32;
  double clip_norm = 5.0;
  bool shuffle = true;
};

struct EpochStats {
  double loss = 0.0;
  double metric = 0.0;
  double lr = 0.0;  // learning rate of the epoch's last step
  double wall_ms = 0.0;
};

// One pass over the dataset: shuffled batches (deterministic in seed and
// epoch), sampled forward with q assignment draws, loss of the mean
// prediction, backward, global-norm clip at opts.clip_norm, Adam step.
// Non-finite loss -> DivergenceError.
EpochStats train_epoch(const std::vector<AttributedGraph>& dataset, const ModelSpec& spec,
                       ParameterStore& params, const TaskHead& head, OptimizerState& opt,
                       std::uint64_t seed, std::int64_t epoch, const TrainOptions& opts = {});

struct EvalReport {
  double loss = 0.0;         // mean over repeats
  double metric_mean = 0.0;  // mean of the per-repeat metric
  double metric_std = 0.0;   // population std over repeats
  std::vector<double> per_repeat;
  double wall_ms = 0.0;
};

// Evaluation with fresh assignment draws per repeat; the metric is computed
// per repeat over the whole dataset, then summarized as mean and std.
EvalReport evaluate(const std::vector<AttributedGraph>& dataset, const ModelSpec& spec,
                    ParameterStore& params, const TaskHead& head, std::uint64_t seed,
                    std::int64_t repeats, std::int64_t batch_size = 64);

// Append one newline-delimited JSON record
// {"epoch":..,"split":..,"loss":..,"metric":..,"lr":..,"wall_ms":..}.
void append_metric_record(const std::string& path, std::int64_t epoch, const std::string& split,
                          double loss, double metric, double lr, double wall_ms);

}  // namespace ipr
