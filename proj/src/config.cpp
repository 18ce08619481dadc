#include "ipr/config.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>

namespace ipr {

namespace {

using nlohmann::json;

void check_keys(const json& doc, const std::vector<std::string>& allowed,
                const std::string& context) {
  for (const auto& [key, value] : doc.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      throw std::invalid_argument("unknown config key '" + key + "' in " + context);
    }
  }
}

DatasetConfig dataset_from_json(const json& doc) {
  check_keys(doc,
             {"kind", "depth", "count", "family", "size", "path", "train_frac", "valid_frac",
              "test_frac"},
             "dataset");
  DatasetConfig d;
  d.kind = doc.value("kind", d.kind);
  d.depth = doc.value("depth", d.depth);
  d.count = doc.value("count", d.count);
  d.family = doc.value("family", d.family);
  d.size = doc.value("size", d.size);
  d.path = doc.value("path", d.path);
  d.train_frac = doc.value("train_frac", d.train_frac);
  d.valid_frac = doc.value("valid_frac", d.valid_frac);
  d.test_frac = doc.value("test_frac", d.test_frac);
  return d;
}

ModelSpec model_from_json(const json& doc) {
  check_keys(doc,
             {"d_in", "d_edge", "d_hidden_up", "layers_up", "d_hidden_down", "d_hidden_virtual",
              "layers_down", "m", "k", "q", "out_dim", "virtual_init", "readout_source",
              "agg_nodes", "agg_virtual", "agg_neighbors", "agg_distribute", "readout_agg",
              "layer_norm", "ds_enabled"},
             "model");
  ModelSpec m;
  m.d_in = doc.value("d_in", static_cast<std::int64_t>(0));  // 0: derive from the data
  m.d_edge = doc.value("d_edge", static_cast<std::int64_t>(0));
  m.d_hidden_up = doc.value("d_hidden_up", m.d_hidden_up);
  m.layers_up = doc.value("layers_up", m.layers_up);
  m.d_hidden_down = doc.value("d_hidden_down", m.d_hidden_down);
  m.d_hidden_virtual = doc.value("d_hidden_virtual", m.d_hidden_virtual);
  m.layers_down = doc.value("layers_down", m.layers_down);
  m.m = doc.value("m", m.m);
  m.k = doc.value("k", m.k);
  m.q = doc.value("q", m.q);
  m.out_dim = doc.value("out_dim", static_cast<std::int64_t>(0));
  if (doc.contains("virtual_init")) m.virtual_init = virtual_init_from_string(doc["virtual_init"]);
  if (doc.contains("readout_source")) m.readout_source = readout_from_string(doc["readout_source"]);
  if (doc.contains("agg_nodes")) m.agg_nodes = agg_from_string(doc["agg_nodes"]);
  if (doc.contains("agg_virtual")) m.agg_virtual = agg_from_string(doc["agg_virtual"]);
  if (doc.contains("agg_neighbors")) m.agg_neighbors = agg_from_string(doc["agg_neighbors"]);
  if (doc.contains("agg_distribute")) m.agg_distribute = agg_from_string(doc["agg_distribute"]);
  if (doc.contains("readout_agg")) m.readout_agg = agg_from_string(doc["readout_agg"]);
  m.layer_norm = doc.value("layer_norm", m.layer_norm);
  m.ds_enabled = doc.value("ds_enabled", m.ds_enabled);
  return m;
}

OptimConfig optim_from_json(const json& doc) {
  check_keys(doc, {"lr_base", "lr_min", "epochs", "batch_size", "clip_norm"}, "optim");
  OptimConfig o;
  o.lr_base = doc.value("lr_base", o.lr_base);
  o.lr_min = doc.value("lr_min", o.lr_min);
  o.epochs = doc.value("epochs", o.epochs);
  o.batch_size = doc.value("batch_size", o.batch_size);
  o.clip_norm = doc.value("clip_norm", o.clip_norm);
  return o;
}

}  // namespace

void DatasetConfig::validate() const {
  const std::vector<std::string> kinds = {"trees_leafcount", "trees_neighboursmatch", "csl",
                                          "wl_pairs", "jsonl"};
  if (std::find(kinds.begin(), kinds.end(), kind) == kinds.end()) {
    throw std::invalid_argument("unknown dataset kind '" + kind + "'");
  }
  if (kind == "jsonl" && path.empty()) {
    throw std::invalid_argument("dataset kind jsonl requires a path");
  }
  if (count <= 0) throw std::invalid_argument("dataset count must be positive");
  if (train_frac < 0 || valid_frac < 0 || test_frac < 0 ||
      std::abs(train_frac + valid_frac + test_frac - 1.0) > 1e-9) {
    throw std::invalid_argument("split fractions must be non-negative and sum to 1");
  }
}

void OptimConfig::validate() const {
  if (lr_base <= 0 || lr_min < 0 || lr_min > lr_base) {
    throw std::invalid_argument("need 0 < lr_base and 0 <= lr_min <= lr_base");
  }
  if (epochs < 0) throw std::invalid_argument("epochs must be non-negative");
  if (batch_size <= 0) throw std::invalid_argument("batch_size must be positive");
  if (clip_norm <= 0) throw std::invalid_argument("clip_norm must be positive");
}

void ExperimentConfig::validate() const {
  dataset.validate();
  optim.validate();
  head_from_string(head);  // throws on unknown kinds
  if (output_dir.empty()) throw std::invalid_argument("output_dir must not be empty");
}

ExperimentConfig config_from_json(const nlohmann::json& doc) {
  check_keys(doc, {"dataset", "model", "optim", "head", "seed", "output_dir"}, "config root");
  ExperimentConfig config;
  if (doc.contains("dataset")) config.dataset = dataset_from_json(doc["dataset"]);
  if (doc.contains("model")) config.model = model_from_json(doc["model"]);
  if (doc.contains("optim")) config.optim = optim_from_json(doc["optim"]);
  config.head = doc.value("head", config.head);
  if (doc.contains("seed")) {
    if (!doc["seed"].is_number_integer() || doc["seed"].get<std::int64_t>() < 0) {
      throw std::invalid_argument("seed must be a non-negative integer");
    }
    config.seed = doc["seed"].get<std::uint64_t>();
  }
  config.output_dir = doc.value("output_dir", config.output_dir);
  config.validate();
  return config;
}

nlohmann::json config_to_json(const ExperimentConfig& config) {
  nlohmann::json doc;
  doc["dataset"] = {{"kind", config.dataset.kind},
                    {"depth", config.dataset.depth},
                    {"count", config.dataset.count},
                    {"family", config.dataset.family},
                    {"size", config.dataset.size},
                    {"path", config.dataset.path},
                    {"train_frac", config.dataset.train_frac},
                    {"valid_frac", config.dataset.valid_frac},
                    {"test_frac", config.dataset.test_frac}};
  doc["model"] = {{"d_in", config.model.d_in},
                  {"d_edge", config.model.d_edge},
                  {"d_hidden_up", config.model.d_hidden_up},
                  {"layers_up", config.model.layers_up},
                  {"d_hidden_down", config.model.d_hidden_down},
                  {"d_hidden_virtual", config.model.d_hidden_virtual},
                  {"layers_down", config.model.layers_down},
                  {"m", config.model.m},
                  {"k", config.model.k},
                  {"q", config.model.q},
                  {"out_dim", config.model.out_dim},
                  {"virtual_init", virtual_init_to_string(config.model.virtual_init)},
                  {"readout_source", readout_to_string(config.model.readout_source)},
                  {"agg_nodes", agg_to_string(config.model.agg_nodes)},
                  {"agg_virtual", agg_to_string(config.model.agg_virtual)},
                  {"agg_neighbors", agg_to_string(config.model.agg_neighbors)},
                  {"agg_distribute", agg_to_string(config.model.agg_distribute)},
                  {"readout_agg", agg_to_string(config.model.readout_agg)},
                  {"layer_norm", config.model.layer_norm},
                  {"ds_enabled", config.model.ds_enabled}};
  doc["optim"] = {{"lr_base", config.optim.lr_base},
                  {"lr_min", config.optim.lr_min},
                  {"epochs", config.optim.epochs},
                  {"batch_size", config.optim.batch_size},
                  {"clip_norm", config.optim.clip_norm}};
  doc["head"] = config.head;
  doc["seed"] = config.seed;
  doc["output_dir"] = config.output_dir;
  return doc;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open config file: " + path);
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument("config parse error in " + path + ": " + e.what());
  }
  return config_from_json(doc);
}

void apply_override(nlohmann::json& doc, const std::string& assignment) {
  const std::size_t eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw std::invalid_argument("override must look like dot.path=value, got '" + assignment +
                                "'");
  }
  std::string pointer = "/" + assignment.substr(0, eq);
  std::replace(pointer.begin(), pointer.end(), '.', '/');
  const std::string raw = assignment.substr(eq + 1);
  nlohmann::json value;
  try {
    value = nlohmann::json::parse(raw);
  } catch (const nlohmann::json::exception&) {
    value = raw;  // unquoted strings such as kind=csl
  }
  doc[nlohmann::json::json_pointer(pointer)] = value;
}

ResolvedDataset build_dataset(const DatasetConfig& dataset, std::uint64_t seed) {
  dataset.validate();
  ResolvedDataset out;
  if (dataset.kind == "jsonl") {
    namespace fs = std::filesystem;
    const fs::path dir(dataset.path);
    auto read_split = [&](const std::string& name, bool required) {
      const fs::path file = dir / (name + ".jsonl");
      if (!fs::exists(file)) {
        if (required) {
          throw std::invalid_argument("dataset file missing: " + file.string());
        }
        return std::vector<AttributedGraph>{};
      }
      return load_jsonl(file.string());
    };
    out.train = read_split("train", true);
    out.valid = read_split("valid", false);
    out.test = read_split("test", true);
    return out;
  }
  if (dataset.kind == "wl_pairs") {
    out.train = gen_wl_pairs(dataset.family, dataset.size);
    out.valid = out.train;
    out.test = out.train;
    return out;
  }

  std::vector<AttributedGraph> all;
  if (dataset.kind == "trees_leafcount") {
    all = gen_trees_leafcount(dataset.depth, dataset.count, seed);
  } else if (dataset.kind == "trees_neighboursmatch") {
    all = gen_trees_neighboursmatch(dataset.depth, dataset.count, seed);
  } else {
    all = gen_csl(dataset.count, seed);
  }
  SplitIndices split = stratified_split(all, dataset.train_frac, dataset.valid_frac,
                                        dataset.test_frac, seed);
  out.train = subset(all, split.train);
  out.valid = subset(all, split.valid);
  out.test = subset(all, split.test);
  return out;
}

void resolve_model_dims(ModelSpec& model, const ResolvedDataset& data, HeadKind head) {
  const std::vector<AttributedGraph>* sample = nullptr;
  for (const auto* split : {&data.train, &data.valid, &data.test}) {
    if (!split->empty()) {
      sample = split;
      break;
    }
  }
  if (sample == nullptr) throw std::invalid_argument("dataset is empty");

  if (model.d_in == 0) model.d_in = sample->front().feature_dim();
  if (model.d_edge == 0 && sample->front().edge_features.has_value()) {
    model.d_edge = sample->front().edge_features->cols();
  }
  if (model.out_dim == 0) {
    if (head == HeadKind::multiclass) {
      double max_label = 0.0;
      for (const auto* split : {&data.train, &data.valid, &data.test}) {
        for (const AttributedGraph& g : *split) {
          if (g.label.has_value() && !g.label->empty()) {
            max_label = std::max(max_label, (*g.label)[0]);
          }
        }
      }
      model.out_dim = static_cast<std::int64_t>(max_label) + 1;
    } else if (head == HeadKind::binary) {
      model.out_dim = 1;
    } else {
      const auto& label = sample->front().label;
      model.out_dim = label.has_value() ? static_cast<std::int64_t>(label->size()) : 1;
    }
  }
  model.validate();
}

namespace {

std::string checkpoint_stem(const std::string& path) {
  if (path.size() > 5 && path.substr(path.size() - 5) == ".json") {
    return path.substr(0, path.size() - 5);
  }
  return path;
}

}  // namespace

void save_checkpoint(const std::string& stem, const ModelSpec& model, const std::string& head,
                     std::int64_t epochs_done, const ParameterStore& params) {
  ExperimentConfig shim;  // reuse the model serializer
  shim.model = model;
  nlohmann::json meta = {{"format", "ipr-checkpoint-v1"},
                         {"model", config_to_json(shim)["model"]},
                         {"head", head},
                         {"epochs_done", epochs_done}};
  std::ofstream out(stem + ".json");
  if (!out) throw std::runtime_error("cannot write checkpoint meta: " + stem + ".json");
  out << meta.dump(2) << "\n";
  params.save(stem + ".params");
}

Checkpoint load_checkpoint(const std::string& path) {
  const std::string stem = checkpoint_stem(path);
  std::ifstream in(stem + ".json");
  if (!in) throw std::invalid_argument("cannot open checkpoint: " + stem + ".json");
  nlohmann::json meta;
  try {
    in >> meta;
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument("checkpoint parse error: " + std::string(e.what()));
  }
  if (meta.value("format", "") != "ipr-checkpoint-v1") {
    throw std::invalid_argument("not a checkpoint file: " + stem + ".json");
  }
  Checkpoint ckpt;
  ckpt.model = model_from_json(meta.at("model"));
  ckpt.head = meta.value("head", "multiclass");
  ckpt.epochs_done = meta.value("epochs_done", static_cast<std::int64_t>(0));
  ckpt.params = ParameterStore::load(stem + ".params");
  return ckpt;
}

void save_optimizer(const std::string& path, const OptimizerState& opt) {
  nlohmann::json doc = {{"step", opt.step},       {"total_steps", opt.total_steps},
                        {"lr_base", opt.lr_base}, {"lr_min", opt.lr_min},
                        {"beta1", opt.beta1},     {"beta2", opt.beta2},
                        {"eps", opt.eps},
                        {"first_moment", opt.first_moment},
                        {"second_moment", opt.second_moment}};
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write optimizer state: " + path);
  out << doc.dump() << "\n";
}

OptimizerState load_optimizer(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open optimizer state: " + path);
  nlohmann::json doc;
  in >> doc;
  OptimizerState opt;
  opt.step = doc.at("step").get<std::int64_t>();
  opt.total_steps = doc.at("total_steps").get<std::int64_t>();
  opt.lr_base = doc.at("lr_base").get<double>();
  opt.lr_min = doc.at("lr_min").get<double>();
  opt.beta1 = doc.at("beta1").get<double>();
  opt.beta2 = doc.at("beta2").get<double>();
  opt.eps = doc.at("eps").get<double>();
  opt.first_moment = doc.at("first_moment").get<std::map<std::string, std::vector<double>>>();
  opt.second_moment = doc.at("second_moment").get<std::map<std::string, std::vector<double>>>();
  return opt;
}

}  // namespace ipr
