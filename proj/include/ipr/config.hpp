#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ipr/datasets.hpp"
#include "ipr/model.hpp"
#include "ipr/param_store.hpp"
#include "ipr/training.hpp"

namespace ipr {

// Which corpus an experiment runs on.  The generator kinds build their data
// in-memory from (parameters, seed); `jsonl` points at a directory of
// previously written train/valid/test files.
struct DatasetConfig {
  std::string kind = "trees_leafcount";  // trees_leafcount | trees_neighboursmatch | csl |
                                         // wl_pairs | jsonl
  std::int64_t depth = 4;                // tree kinds
  std::int64_t count = 1000;             // tree kinds: total graphs; csl: copies per class
  std::string family = "cycle_split";    // wl_pairs
  std::int64_t size = 6;                 // wl_pairs
  std::string path;                      // jsonl: directory with {train,valid,test}.jsonl
  double train_frac = 0.8;
  double valid_frac = 0.1;
  double test_frac = 0.1;

  void validate() const;
};

struct OptimConfig {
  double lr_base = 1e-3;
  double lr_min = 0.0;
  std::int64_t epochs = 100;
  std::int64_t batch_size = 32;
  double clip_norm = 5.0;

  void validate() const;
};

struct ExperimentConfig {
  DatasetConfig dataset;
  ModelSpec model;  // d_in / d_edge / out_dim of 0 mean "derive from the data"
  OptimConfig optim;
  std::string head = "multiclass";  // task head kind; every generator kind is multiclass
  std::uint64_t seed = 0;
  std::string output_dir = "runs/experiment";

  void validate() const;  // everything except the possibly-underived model dims
};

// Strict parsing: unknown keys raise std::invalid_argument naming the key, so
// config typos surface as usage errors instead of silently applied defaults.
ExperimentConfig config_from_json(const nlohmann::json& doc);
nlohmann::json config_to_json(const ExperimentConfig& config);
ExperimentConfig load_config(const std::string& path);

// Apply one "dot.path=value" assignment to a config document, e.g.
// "model.m=4" or "dataset.kind=csl".  The value is parsed as JSON when
// possible and taken as a string otherwise.
void apply_override(nlohmann::json& doc, const std::string& assignment);

// Train/valid/test materialization of a dataset config.  Generator kinds are
// deterministic in (config, seed); wl_pairs yields the same two graphs in
// every split (the probe task asks whether a model can separate them at all).
struct ResolvedDataset {
  std::vector<AttributedGraph> train;
  std::vector<AttributedGraph> valid;
  std::vector<AttributedGraph> test;
};

ResolvedDataset build_dataset(const DatasetConfig& dataset, std::uint64_t seed);

// Fill any zero-valued d_in / d_edge / out_dim from a data sample plus the
// task head, then validate the completed spec.  For multiclass the output
// width is 1 + the largest class index seen anywhere in the corpus.
void resolve_model_dims(ModelSpec& model, const ResolvedDataset& data, HeadKind head);

// A checkpoint is a pair of files: `<stem>.json` holds the model spec, head,
// and bookkeeping; `<stem>.params` holds the parameter tensors in the
// store's binary format.
struct Checkpoint {
  ModelSpec model;
  std::string head;
  std::int64_t epochs_done = 0;
  ParameterStore params;
};

void save_checkpoint(const std::string& stem, const ModelSpec& model, const std::string& head,
                     std::int64_t epochs_done, const ParameterStore& params);
// Accepts either the stem or the `<stem>.json` path.
Checkpoint load_checkpoint(const std::string& path);

// Adam bookkeeping sidecar so an interrupted run can resume mid-schedule.
void save_optimizer(const std::string& path, const OptimizerState& opt);
OptimizerState load_optimizer(const std::string& path);

}  // namespace ipr
