#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>

#include <json.hpp>

#include "hadamrnn/datasets.hpp"
#include "hadamrnn/error.hpp"
#include "hadamrnn/train.hpp"

namespace hadamrnn {

enum class Task : std::uint8_t { copy = 0, smnist = 1, pmnist = 2 };

inline std::string to_string(Task t) {
  switch (t) {
    case Task::copy: return "copy";
    case Task::smnist: return "smnist";
    case Task::pmnist: return "pmnist";
  }
  return "?";
}

struct PtqConfig {
  int p_a = 12;
  int p_i = 2;
  std::optional<double> alpha_i;
};

/// Everything one run needs. JSON file layout:
///   { "task": "copy", "seed": 1,
///     "data":   { "K", "L", "train", "val", "test", "dir", "subset", "permutation_seed" },
///     "model":  { "hidden", "recurrent", "q", "unit", "weights", "column_signs", "sign_init" },
///     "train":  { "lr", "decay", "batch_size", "epochs", "latent_clip", "grad_clip", "threads" },
///     "ptq":    { "p_a", "p_i", "alpha_i" },
///     "output": { "dir" } }
struct RunConfig {
  Task task = Task::copy;
  std::uint64_t seed = 1;
  CopySpec copy;
  MnistSpec mnist;
  ModelConfig model;
  TrainConfig train;
  PtqConfig ptq;
  std::filesystem::path output_dir = "run";
};

namespace detail {

using json = nlohmann::json;

class Section {
 public:
  Section(const json& j, std::string name) : j_(j), name_(std::move(name)) {
    require(j.is_object(), ErrorKind::config, name_ + ": expected an object");
  }

  /// Rejects keys that were never read.
  void finish() const {
    for (const auto& [key, _] : j_.items())
      require(seen_.count(key) > 0, ErrorKind::config, name_ + ": unknown key '" + key + "'");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception&) {
      throw Error(ErrorKind::config, name_ + "." + key + ": wrong type");
    }
  }

  std::optional<Section> sub(const char* key) {
    seen_.insert(key);
    if (!j_.contains(key)) return std::nullopt;
    return std::optional<Section>(std::in_place, j_.at(key), name_ + "." + key);
  }

  const json& raw(const char* key) {
    seen_.insert(key);
    return j_.at(key);
  }
  bool has(const char* key) const { return j_.contains(key); }
  const std::string& name() const { return name_; }

 private:
  const json& j_;
  std::string name_;
  std::set<std::string> seen_;
};

inline WeightQuant parse_weights(const json& v) {
  if (v.is_number_integer()) {
    const int p = v.get<int>();
    require(p >= 2 && p <= 16, ErrorKind::config, "model.weights: bits must be in [2, 16]");
    return WeightQuant::uniform(p);
  }
  require(v.is_string(), ErrorKind::config, "model.weights: expected bits, \"ternary\" or \"fp\"");
  const auto s = v.get<std::string>();
  if (s == "ternary") return WeightQuant::ternary();
  if (s == "fp") return WeightQuant::full();
  throw Error(ErrorKind::config, "model.weights: unknown value '" + s + "'");
}

template <typename E>
E parse_enum(const std::string& where, const std::string& s,
             std::initializer_list<std::pair<const char*, E>> options) {
  for (const auto& [name, value] : options)
    if (s == name) return value;
  throw Error(ErrorKind::config, where + ": unknown value '" + s + "'");
}

}  // namespace detail

inline RunConfig parse_run_config(const nlohmann::json& j) {
  using detail::Section;
  RunConfig c;
  {
    Section root(j, "config");
    std::string task = "copy";
    root.get("task", task);
    c.task = detail::parse_enum<Task>("task", task,
                                      {{"copy", Task::copy}, {"smnist", Task::smnist}, {"pmnist", Task::pmnist}});
    root.get("seed", c.seed);
    c.copy.seed = c.seed;
    c.train.seed = c.seed;

    if (auto d = root.sub("data")) {
      d->get("K", c.copy.K);
      d->get("L", c.copy.L);
      d->get("train", c.copy.train);
      d->get("val", c.copy.val);
      d->get("test", c.copy.test);
      std::string dir;
      d->get("dir", dir);
      if (!dir.empty()) c.mnist.dir = dir;
      d->get("subset", c.mnist.subset);
      d->get("permutation_seed", c.mnist.permutation_seed);
      d->finish();
    }
    c.mnist.mode = c.task == Task::pmnist ? MnistMode::permuted : MnistMode::sequential;

    if (auto m = root.sub("model")) {
      m->get("hidden", c.model.hidden);
      std::string rec = "binary";
      m->get("recurrent", rec);
      c.model.kind = detail::parse_enum<RecurrentKind>(
          "model.recurrent", rec,
          {{"binary", RecurrentKind::binary}, {"block_ternary", RecurrentKind::block_ternary}});
      m->get("q", c.model.q);
      std::string unit = "linear";
      m->get("unit", unit);
      c.model.unit = detail::parse_enum<Unit>("model.unit", unit,
                                              {{"linear", Unit::linear}, {"relu", Unit::relu}});
      if (m->has("weights")) c.model.quant = detail::parse_weights(m->raw("weights"));
      m->get("column_signs", c.model.column_signs);
      m->get("sign_init", c.model.sign_init);
      m->finish();
    }

    if (auto t = root.sub("train")) {
      t->get("lr", c.train.lr);
      t->get("decay", c.train.decay);
      t->get("batch_size", c.train.batch_size);
      t->get("epochs", c.train.epochs);
      t->get("latent_clip", c.train.latent_clip);
      if (t->has("grad_clip") && !t->raw("grad_clip").is_null()) {
        double v = 0.0;
        t->get("grad_clip", v);
        c.train.grad_clip = v;
      }
      t->get("threads", c.train.threads);
      t->finish();
    }

    c.ptq.p_i = c.task == Task::copy ? 2 : 9;
    if (auto p = root.sub("ptq")) {
      p->get("p_a", c.ptq.p_a);
      p->get("p_i", c.ptq.p_i);
      if (p->has("alpha_i") && !p->raw("alpha_i").is_null()) {
        double a = 0.0;
        p->get("alpha_i", a);
        c.ptq.alpha_i = a;
      }
      p->finish();
    }

    if (auto o = root.sub("output")) {
      std::string dir = c.output_dir.string();
      o->get("dir", dir);
      c.output_dir = dir;
      o->finish();
    }
    root.finish();
  }

  detail::require(c.model.hidden >= 2, ErrorKind::config, "model.hidden must be >= 2");
  detail::require(c.model.q >= 1 && c.model.hidden % c.model.q == 0, ErrorKind::config,
                  "model.q must divide model.hidden");
  detail::require(c.model.kind == RecurrentKind::block_ternary || c.model.q == 1, ErrorKind::config,
                  "binary recurrent weights require q = 1");
  const std::size_t block = c.model.hidden / c.model.q;
  detail::require(block >= 2 && (block & (block - 1)) == 0, ErrorKind::config,
                  "model.hidden / model.q must be a power of two");
  detail::require(c.model.sign_init > 0.0, ErrorKind::config, "model.sign_init must be > 0");
  detail::require(c.copy.K >= 1, ErrorKind::config, "data.K must be >= 1");
  detail::require(c.copy.train >= 1 && c.copy.val >= 1 && c.copy.test >= 1, ErrorKind::config,
                  "data split sizes must be >= 1");
  detail::require(c.ptq.p_a >= 1 && c.ptq.p_a <= 30, ErrorKind::config, "ptq.p_a must be in [1, 30]");
  detail::require(c.ptq.p_i >= 1 && c.ptq.p_i <= 30, ErrorKind::config, "ptq.p_i must be in [1, 30]");
  detail::require(!c.ptq.alpha_i || *c.ptq.alpha_i > 0.0, ErrorKind::config, "ptq.alpha_i must be > 0");
  try {
    c.train.validate();
  } catch (const Error& e) {
    throw Error(ErrorKind::config, std::string("train: ") + e.what());
  }
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  detail::require(static_cast<bool>(in), ErrorKind::config, "cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in, nullptr, true, /*ignore_comments=*/true);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorKind::config, "config " + path.string() + ": " + e.what());
  }
  return parse_run_config(j);
}

/// Builds the train/val/test splits for a config. MNIST paths come from
/// data.dir or the HADAMRNN_DATA_DIR environment variable.
inline DataSplits load_splits(const RunConfig& c) {
  if (c.task == Task::copy) return make_copy_splits(c.copy);
  MnistSpec spec = c.mnist;
  if (spec.dir.empty()) {
    const char* env = std::getenv("HADAMRNN_DATA_DIR");
    detail::require(env != nullptr && *env != '\0', ErrorKind::data,
                    "MNIST data directory not set (data.dir or HADAMRNN_DATA_DIR)");
    spec.dir = env;
  }
  return load_mnist(spec);
}

}  // namespace hadamrnn
