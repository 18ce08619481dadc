#include "ipr/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>

#include <nlohmann/json.hpp>

#include "ipr/exactk.hpp"
#include "ipr/rng.hpp"

namespace ipr {

namespace {

constexpr std::uint64_t kShuffleStream = 0x65706f6368ULL;
constexpr std::uint64_t kBatchStream = 0x6261746368ULL;
constexpr std::uint64_t kEvalStream = 0x6576616c00ULL;

double now_ms() {
  return std::chrono::duration<double, std::milli>(
             std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

std::vector<std::int64_t> class_targets(const std::vector<std::vector<double>>& targets,
                                        std::int64_t out_dim) {
  std::vector<std::int64_t> ids;
  ids.reserve(targets.size());
  for (const auto& t : targets) {
    if (t.empty()) throw std::invalid_argument("classification target is empty");
    const double y = t[0];
    if (y != std::floor(y)) {
      throw std::invalid_argument("class target " + std::to_string(y) + " is not an integer");
    }
    if (y < 0.0 || y >= static_cast<double>(out_dim)) {
      throw std::invalid_argument("class target " + std::to_string(static_cast<std::int64_t>(y)) +
                                  " out of range [0, " + std::to_string(out_dim) + ")");
    }
    ids.push_back(static_cast<std::int64_t>(y));
  }
  return ids;
}

Tensor regression_targets(const std::vector<std::vector<double>>& targets, std::int64_t out_dim) {
  std::vector<double> flat;
  flat.reserve(targets.size() * static_cast<std::size_t>(out_dim));
  for (const auto& t : targets) {
    if (static_cast<std::int64_t>(t.size()) != out_dim) {
      throw std::invalid_argument("regression target has " + std::to_string(t.size()) +
                                  " values, model emits " + std::to_string(out_dim));
    }
    flat.insert(flat.end(), t.begin(), t.end());
  }
  return Tensor({static_cast<std::int64_t>(targets.size()), out_dim}, std::move(flat));
}

std::vector<std::vector<double>> batch_labels(const std::vector<const AttributedGraph*>& graphs) {
  std::vector<std::vector<double>> targets;
  targets.reserve(graphs.size());
  for (const AttributedGraph* g : graphs) {
    if (!g->label) throw std::invalid_argument("graph has no label; cannot train or score");
    targets.push_back(*g->label);
  }
  return targets;
}

std::string params_summary(const ParameterStore& params) {
  double max_abs = 0.0;
  std::int64_t non_finite = 0, total = 0;
  for (const std::string& name : params.names()) {
    const Tensor& value = params.value(name);
    for (std::int64_t i = 0; i < value.numel(); ++i) {
      const double v = value.data()[i];
      ++total;
      if (!std::isfinite(v)) {
        ++non_finite;
        continue;
      }
      max_abs = std::max(max_abs, std::abs(v));
    }
  }
  return "parameters: max|w|=" + std::to_string(max_abs) +
         " non_finite=" + std::to_string(non_finite) + "/" + std::to_string(total);
}

std::string priors_summary(const Tensor& priors) {
  if (priors.numel() == 0) return "no assignment logits (hierarchy disabled)";
  double lo = priors.data()[0], hi = priors.data()[0], sum = 0.0;
  std::int64_t non_finite = 0;
  for (std::int64_t i = 0; i < priors.numel(); ++i) {
    const double v = priors.data()[i];
    if (!std::isfinite(v)) {
      ++non_finite;
      continue;
    }
    lo = std::min(lo, v);
    hi = std::max(hi, v);
    sum += v;
  }
  const double mean = sum / static_cast<double>(priors.numel());
  return "assignment logits: min=" + std::to_string(lo) + " max=" + std::to_string(hi) +
         " mean=" + std::to_string(mean) + " non_finite=" + std::to_string(non_finite) + "/" +
         std::to_string(priors.numel());
}

}  // namespace

HeadKind head_from_string(const std::string& s) {
  if (s == "multiclass") return HeadKind::multiclass;
  if (s == "binary") return HeadKind::binary;
  if (s == "regression_mae") return HeadKind::regression_mae;
  if (s == "regression_mse") return HeadKind::regression_mse;
  throw std::invalid_argument("unknown task head '" + s +
                              "' (want multiclass|binary|regression_mae|regression_mse)");
}

std::string head_to_string(HeadKind k) {
  switch (k) {
    case HeadKind::multiclass: return "multiclass";
    case HeadKind::binary: return "binary";
    case HeadKind::regression_mae: return "regression_mae";
    case HeadKind::regression_mse: return "regression_mse";
  }
  throw std::logic_error("unreachable head kind");
}

void TaskHead::validate() const {
  if (out_dim < 1) throw std::invalid_argument("head out_dim must be positive");
  if (kind == HeadKind::binary && out_dim != 1) {
    throw std::invalid_argument("binary head needs out_dim 1, got " + std::to_string(out_dim));
  }
}

Tensor loss_value(const Tensor& pred, const std::vector<std::vector<double>>& targets,
                  const TaskHead& head) {
  head.validate();
  if (pred.rank() != 2 || pred.cols() != head.out_dim) {
    throw std::invalid_argument("prediction shape " + shape_str(pred.shape()) +
                                " does not match head out_dim " + std::to_string(head.out_dim));
  }
  if (static_cast<std::int64_t>(targets.size()) != pred.rows()) {
    throw std::invalid_argument("got " + std::to_string(targets.size()) + " targets for " +
                                std::to_string(pred.rows()) + " predictions");
  }
  switch (head.kind) {
    case HeadKind::multiclass:
      return cross_entropy_logits(pred, class_targets(targets, head.out_dim));
    case HeadKind::binary: {
      std::vector<double> ys;
      ys.reserve(targets.size());
      for (const auto& t : targets) {
        if (t.empty()) throw std::invalid_argument("binary target is empty");
        ys.push_back(t[0]);
      }
      return bce_logits(pred, ys);
    }
    case HeadKind::regression_mae:
      return l1_loss(pred, regression_targets(targets, head.out_dim));
    case HeadKind::regression_mse:
      return l2_loss(pred, regression_targets(targets, head.out_dim));
  }
  throw std::logic_error("unreachable head kind");
}

double task_metric(const Tensor& pred, const std::vector<std::vector<double>>& targets,
                   const TaskHead& head) {
  head.validate();
  const std::int64_t B = pred.rows();
  if (B == 0) throw std::invalid_argument("metric on an empty batch");
  double total = 0.0;
  switch (head.kind) {
    case HeadKind::multiclass: {
      const auto ids = class_targets(targets, head.out_dim);
      for (std::int64_t b = 0; b < B; ++b) {
        std::int64_t best = 0;
        for (std::int64_t c = 1; c < head.out_dim; ++c) {
          if (pred.at(b, c) > pred.at(b, best)) best = c;
        }
        total += best == ids[static_cast<std::size_t>(b)] ? 1.0 : 0.0;
      }
      return total / static_cast<double>(B);
    }
    case HeadKind::binary: {
      for (std::int64_t b = 0; b < B; ++b) {
        const double predicted = pred.at(b, 0) > 0.0 ? 1.0 : 0.0;
        total += predicted == targets[static_cast<std::size_t>(b)].at(0) ? 1.0 : 0.0;
      }
      return total / static_cast<double>(B);
    }
    case HeadKind::regression_mae:
    case HeadKind::regression_mse: {
      const Tensor y = regression_targets(targets, head.out_dim);
      for (std::int64_t i = 0; i < pred.numel(); ++i) {
        total += std::abs(pred.data()[i] - y.data()[i]);
      }
      return total / static_cast<double>(pred.numel());
    }
  }
  throw std::logic_error("unreachable head kind");
}

double cosine_lr(const OptimizerState& opt) {
  const double total = static_cast<double>(std::max<std::int64_t>(1, opt.total_steps));
  const double step = static_cast<double>(std::clamp<std::int64_t>(opt.step, 0, opt.total_steps));
  const double cosine = std::cos(M_PI * step / total);
  return opt.lr_min + 0.5 * (opt.lr_base - opt.lr_min) * (1.0 + cosine);
}

void adam_step(ParameterStore& params, OptimizerState& opt) {
  const double lr = cosine_lr(opt);
  const double t = static_cast<double>(opt.step + 1);
  const double bc1 = 1.0 - std::pow(opt.beta1, t);
  const double bc2 = 1.0 - std::pow(opt.beta2, t);
  for (const std::string& name : params.names()) {
    Tensor& value = params.value(name);
    const std::vector<double>& grad = params.grad(name);
    std::vector<double>& m1 = opt.first_moment[name];
    std::vector<double>& m2 = opt.second_moment[name];
    if (m1.size() != grad.size()) m1.assign(grad.size(), 0.0);
    if (m2.size() != grad.size()) m2.assign(grad.size(), 0.0);
    double* v = value.mutable_data();
    for (std::size_t i = 0; i < grad.size(); ++i) {
      m1[i] = opt.beta1 * m1[i] + (1.0 - opt.beta1) * grad[i];
      m2[i] = opt.beta2 * m2[i] + (1.0 - opt.beta2) * grad[i] * grad[i];
      const double mhat = m1[i] / bc1;
      const double vhat = m2[i] / bc2;
      v[i] -= lr * mhat / (std::sqrt(vhat) + opt.eps);
    }
  }
  ++opt.step;
}

double clip_gradients(ParameterStore& params, double max_norm) {
  const double norm = params.grad_global_norm();
  if (max_norm > 0.0 && norm > max_norm) params.scale_grads(max_norm / norm);
  return norm;
}

EpochStats train_epoch(const std::vector<AttributedGraph>& dataset, const ModelSpec& spec,
                       ParameterStore& params, const TaskHead& head, OptimizerState& opt,
                       std::uint64_t seed, std::int64_t epoch, const TrainOptions& opts) {
  if (dataset.empty()) throw std::invalid_argument("train_epoch on an empty dataset");
  if (opts.batch_size < 1) throw std::invalid_argument("batch_size must be positive");
  const double t0 = now_ms();

  std::vector<std::int64_t> order(dataset.size());
  std::iota(order.begin(), order.end(), 0);
  if (opts.shuffle) {
    Rng rng = Rng::derive(seed, {kShuffleStream, static_cast<std::uint64_t>(epoch)});
    for (std::int64_t i = static_cast<std::int64_t>(order.size()) - 1; i > 0; --i) {
      const std::int64_t j =
          static_cast<std::int64_t>(rng.next_below(static_cast<std::uint64_t>(i + 1)));
      std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
    }
  }

  EpochStats stats;
  double weighted_loss = 0.0, weighted_metric = 0.0;
  std::int64_t seen = 0;
  const std::int64_t n = static_cast<std::int64_t>(dataset.size());
  for (std::int64_t start = 0, batch_idx = 0; start < n; start += opts.batch_size, ++batch_idx) {
    const std::int64_t stop = std::min(n, start + opts.batch_size);
    std::vector<const AttributedGraph*> batch;
    batch.reserve(static_cast<std::size_t>(stop - start));
    for (std::int64_t i = start; i < stop; ++i) {
      batch.push_back(&dataset[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])]);
    }
    const auto targets = batch_labels(batch);
    const std::uint64_t forward_seed =
        Rng::derive(seed, {kBatchStream, static_cast<std::uint64_t>(epoch),
                           static_cast<std::uint64_t>(batch_idx)})
            .next_u64();

    Tape tape;
    ForwardResult out;
    try {
      out = forward_batch(tape, batch, spec, params, forward_seed);
    } catch (const exactk::NonFiniteLogits& e) {
      // Parameters or activations overflowed before a loss even existed.
      throw DivergenceError("training diverged at epoch " + std::to_string(epoch) + ", step " +
                            std::to_string(opt.step) + ": " + e.what() + "; " +
                            params_summary(params));
    }
    Tensor batch_loss = loss_value(out.prediction, targets, head);
    const double loss_now = batch_loss.scalar_value();
    if (!std::isfinite(loss_now)) {
      throw DivergenceError("training diverged at epoch " + std::to_string(epoch) + ", step " +
                            std::to_string(opt.step) + ": loss=" + std::to_string(loss_now) +
                            "; " + priors_summary(out.priors));
    }
    tape.backward(batch_loss);
    params.accumulate_from(tape);
    clip_gradients(params, opts.clip_norm);
    stats.lr = cosine_lr(opt);
    adam_step(params, opt);
    params.zero_grads();

    const std::int64_t bsz = stop - start;
    weighted_loss += loss_now * static_cast<double>(bsz);
    weighted_metric += task_metric(out.prediction, targets, head) * static_cast<double>(bsz);
    seen += bsz;
  }
  stats.loss = weighted_loss / static_cast<double>(seen);
  stats.metric = weighted_metric / static_cast<double>(seen);
  stats.wall_ms = now_ms() - t0;
  return stats;
}

EvalReport evaluate(const std::vector<AttributedGraph>& dataset, const ModelSpec& spec,
                    ParameterStore& params, const TaskHead& head, std::uint64_t seed,
                    std::int64_t repeats, std::int64_t batch_size) {
  if (dataset.empty()) throw std::invalid_argument("evaluate on an empty dataset");
  if (repeats < 1) throw std::invalid_argument("repeats must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be positive");
  const double t0 = now_ms();

  EvalReport report;
  const std::int64_t n = static_cast<std::int64_t>(dataset.size());
  double loss_total = 0.0;
  for (std::int64_t r = 0; r < repeats; ++r) {
    double weighted_loss = 0.0, weighted_metric = 0.0;
    for (std::int64_t start = 0, batch_idx = 0; start < n; start += batch_size, ++batch_idx) {
      const std::int64_t stop = std::min(n, start + batch_size);
      std::vector<const AttributedGraph*> batch;
      for (std::int64_t i = start; i < stop; ++i) batch.push_back(&dataset[static_cast<std::size_t>(i)]);
      const auto targets = batch_labels(batch);
      const std::uint64_t forward_seed =
          Rng::derive(seed, {kEvalStream, static_cast<std::uint64_t>(r),
                             static_cast<std::uint64_t>(batch_idx)})
              .next_u64();
      Tape tape;
      ForwardResult out = forward_batch(tape, batch, spec, params, forward_seed);
      const double bsz = static_cast<double>(stop - start);
      weighted_loss += loss_value(out.prediction, targets, head).scalar_value() * bsz;
      weighted_metric += task_metric(out.prediction, targets, head) * bsz;
    }
    report.per_repeat.push_back(weighted_metric / static_cast<double>(n));
    loss_total += weighted_loss / static_cast<double>(n);
  }
  report.loss = loss_total / static_cast<double>(repeats);
  double mean = 0.0;
  for (double v : report.per_repeat) mean += v;
  mean /= static_cast<double>(repeats);
  double var = 0.0;
  for (double v : report.per_repeat) var += (v - mean) * (v - mean);
  report.metric_mean = mean;
  report.metric_std = std::sqrt(var / static_cast<double>(repeats));
  report.wall_ms = now_ms() - t0;
  return report;
}

void append_metric_record(const std::string& path, std::int64_t epoch, const std::string& split,
                          double loss, double metric, double lr, double wall_ms) {
  nlohmann::json record = {{"epoch", epoch}, {"split", split},     {"loss", loss},
                           {"metric", metric}, {"lr", lr}, {"wall_ms", wall_ms}};
  std::ofstream out(path, std::ios::app);
  if (!out) throw std::runtime_error("cannot open metric log '" + path + "'");
  out << record.dump() << "\n";
}

}  // namespace ipr
