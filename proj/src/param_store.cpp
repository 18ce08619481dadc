#include "ipr/param_store.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace ipr {

namespace {

constexpr char kMagic[8] = {'I', 'P', 'R', 'P', 'A', 'R', 'M', '1'};

template <typename T>
void write_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is, const std::string& path) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error("truncated parameter file: " + path);
  return v;
}

}  // namespace

Tensor& ParameterStore::create(const std::string& name, Shape shape, const std::vector<double>& values) {
  if (params_.count(name) > 0) {
    throw std::invalid_argument("parameter '" + name + "' already exists");
  }
  Entry e;
  e.value = Tensor(std::move(shape), values);
  e.grad.assign(static_cast<std::size_t>(e.value.numel()), 0.0);
  auto [it, ok] = params_.emplace(name, std::move(e));
  (void)ok;
  return it->second.value;
}

const Tensor& ParameterStore::value(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::invalid_argument("unknown parameter '" + name + "'");
  return it->second.value;
}

Tensor& ParameterStore::value(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::invalid_argument("unknown parameter '" + name + "'");
  return it->second.value;
}

std::vector<double>& ParameterStore::grad(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::invalid_argument("unknown parameter '" + name + "'");
  return it->second.grad;
}

const std::vector<double>& ParameterStore::grad(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::invalid_argument("unknown parameter '" + name + "'");
  return it->second.grad;
}

std::vector<std::string> ParameterStore::names() const {
  std::vector<std::string> out;
  out.reserve(params_.size());
  for (const auto& [k, v] : params_) out.push_back(k);
  return out;
}

Tensor ParameterStore::leaf(Tape& tape, const std::string& name) {
  return tape.leaf_param(value(name), name);
}

void ParameterStore::accumulate_from(const Tape& tape) {
  for (const auto& [name, node] : tape.params()) {
    const std::vector<double>& g = tape.node_grad(node);
    if (g.empty()) continue;
    std::vector<double>& acc = grad(name);
    if (acc.size() != g.size()) {
      throw std::runtime_error("gradient size mismatch for parameter '" + name + "'");
    }
    for (std::size_t i = 0; i < g.size(); ++i) acc[i] += g[i];
  }
}

void ParameterStore::zero_grads() {
  for (auto& [k, e] : params_) std::fill(e.grad.begin(), e.grad.end(), 0.0);
}

double ParameterStore::grad_global_norm() const {
  double sq = 0.0;
  for (const auto& [k, e] : params_) {
    for (double g : e.grad) sq += g * g;
  }
  return std::sqrt(sq);
}

void ParameterStore::scale_grads(double factor) {
  for (auto& [k, e] : params_) {
    for (double& g : e.grad) g *= factor;
  }
}

void ParameterStore::save(const std::string& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open '" + path + "' for writing");
  os.write(kMagic, sizeof(kMagic));
  write_pod<std::uint64_t>(os, params_.size());
  for (const auto& [name, e] : params_) {
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    const Shape& s = e.value.shape();
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
    for (std::int64_t d : s) write_pod<std::int64_t>(os, d);
    os.write(reinterpret_cast<const char*>(e.value.data()),
             static_cast<std::streamsize>(e.value.numel() * static_cast<std::int64_t>(sizeof(double))));
  }
  if (!os) throw std::runtime_error("write failed for '" + path + "'");
}

ParameterStore ParameterStore::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open parameter file '" + path + "'");
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw std::runtime_error("'" + path + "' is not a parameter file (bad magic)");
  }
  ParameterStore store;
  std::uint64_t count = read_pod<std::uint64_t>(is, path);
  for (std::uint64_t i = 0; i < count; ++i) {
    std::uint32_t name_len = read_pod<std::uint32_t>(is, path);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    if (!is) throw std::runtime_error("truncated parameter file: " + path);
    std::uint32_t rank = read_pod<std::uint32_t>(is, path);
    Shape shape(rank);
    for (std::uint32_t r = 0; r < rank; ++r) shape[r] = read_pod<std::int64_t>(is, path);
    std::vector<double> values(static_cast<std::size_t>(shape_numel(shape)));
    is.read(reinterpret_cast<char*>(values.data()),
            static_cast<std::streamsize>(values.size() * sizeof(double)));
    if (!is) throw std::runtime_error("truncated parameter file: " + path);
    store.create(name, std::move(shape), values);
  }
  return store;
}

std::string ParameterStore::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [name, e] : params_) {
    nlohmann::json entry;
    entry["shape"] = e.value.shape();
    entry["data"] = e.value.values();
    j[name] = std::move(entry);
  }
  return j.dump(2);
}

}  // namespace ipr
