#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "hadamrnn/analysis.hpp"
#include "hadamrnn/config.hpp"
#include "hadamrnn/datasets.hpp"
#include "hadamrnn/fxp.hpp"
#include "hadamrnn/serialize.hpp"
#include "hadamrnn/train.hpp"

namespace fs = std::filesystem;
using namespace hadamrnn;
using nlohmann::json;

namespace {

struct Common {
  std::string config;
  unsigned threads = 1;
  std::string data_cache;
};

std::string fmt(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", x);
  return buf;
}

DataSplits splits_for(const RunConfig& cfg, const std::string& cache_dir) {
  if (cache_dir.empty()) return load_splits(cfg);
  detail::require(cfg.task == Task::copy, ErrorKind::config, "--data-cache is for the copy task");
  DataSplits s;
  Dataset* parts[] = {&s.train, &s.val, &s.test};
  const char* names[] = {"train.hdrd", "val.hdrd", "test.hdrd"};
  for (std::size_t i = 0; i < 3; ++i) {
    auto c = decode_dataset(io::read_file((fs::path(cache_dir) / names[i]).string()));
    detail::require(c.spec_hash == copy_spec_hash(cfg.copy, i), ErrorKind::data,
                    std::string("dataset cache ") + names[i] + " was built from another config");
    *parts[i] = std::move(c.data);
  }
  return s;
}

const Dataset& pick_split(const DataSplits& s, const std::string& name) {
  if (name == "train") return s.train;
  if (name == "val") return s.val;
  if (name == "test") return s.test;
  throw Error(ErrorKind::config, "unknown split '" + name + "'");
}

std::uint64_t init_seed(const RunConfig& c) { return mix_seed(c.seed, 42); }

void write_metrics(const fs::path& path, const std::vector<EpochRecord>& rows, bool deterministic) {
  std::ofstream out(path);
  detail::require(static_cast<bool>(out), ErrorKind::io, "cannot write " + path.string());
  out << "epoch,train_loss,val_metric,lr,wall_time\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.6f\n", r.epoch, r.train_loss, r.val_metric,
                  r.lr, deterministic ? 0.0 : r.wall_time);
    out << buf;
  }
}

int cmd_train(const Common& co, bool deterministic, bool no_latent_clip,
              std::optional<std::size_t> epochs, std::optional<double> lr,
              std::optional<std::uint64_t> seed, const std::string& out_dir) {
  RunConfig cfg = load_run_config(co.config);
  if (seed) {
    cfg.seed = *seed;
    cfg.copy.seed = *seed;
    cfg.train.seed = *seed;
  }
  if (epochs) cfg.train.epochs = *epochs;
  if (lr) cfg.train.lr = *lr;
  if (no_latent_clip) cfg.train.latent_clip = false;
  cfg.train.threads = deterministic ? 1 : co.threads;
  if (!out_dir.empty()) cfg.output_dir = out_dir;
  cfg.train.validate();

  const auto data = splits_for(cfg, co.data_cache);
  const auto mode = data.train.target_mode;
  const auto init = init_model(cfg.model, data.train.d_in, data.train.classes, mode, init_seed(cfg));
  fs::create_directories(cfg.output_dir);

  const auto res = fit(init, data.train, data.val, cfg.train, [](const EpochRecord& r) {
    std::cerr << "epoch " << r.epoch << "  train_loss " << fmt(r.train_loss) << "  val " << fmt(r.val_metric)
              << "  lr " << fmt(r.lr) << "  " << fmt(r.wall_time) << "s\n";
  });
  write_metrics(cfg.output_dir / "metrics.csv", res.history, deterministic);
  save_model((cfg.output_dir / "best.hdrn").string(), {res.best, std::nullopt});
  save_model((cfg.output_dir / "last.hdrn").string(), {res.last, std::nullopt});
  if (res.diverged) {
    std::cerr << "training diverged: " << res.diagnostic << "\n";
    return exit_code(ErrorKind::numerical);
  }
  const auto ev = evaluate(res.best, data.test, cfg.train.threads);
  std::cout << "test_cross_entropy " << fmt(ev.cross_entropy) << "\n"
            << "test_accuracy " << fmt(ev.accuracy) << "\n";
  return 0;
}

int cmd_eval(const Common& co, const std::string& model_path, const std::string& mode,
             const std::string& split) {
  const RunConfig cfg = load_run_config(co.config);
  const auto mf = load_model(model_path);
  const auto data = splits_for(cfg, co.data_cache);
  const Dataset& d = pick_split(data, split);
  const auto fl = evaluate(mf.model, d, co.threads);
  json out;
  out["split"] = split;
  out["float"] = {{"cross_entropy", fl.cross_entropy}, {"accuracy", fl.accuracy}};
  if (mode == "fxp") {
    detail::require(mf.plan.has_value(), ErrorKind::config,
                    "fxp evaluation needs a model with a quantization plan (run quantize first)");
    const auto cmp = compare_ptq(*mf.plan, mf.model, d, co.threads);
    out["fxp"] = {{"cross_entropy", cmp.fxp_cross_entropy},
                  {"accuracy", cmp.fxp_accuracy},
                  {"disagreement_rate", cmp.disagreement_rate()},
                  {"saturations", cmp.saturations}};
    out["accuracy_delta"] = cmp.fxp_accuracy - fl.accuracy;
  } else {
    detail::require(mode == "float", ErrorKind::config, "--mode must be float or fxp");
  }
  std::cout << out.dump(2) << "\n";
  return 0;
}

int cmd_quantize(const Common& co, const std::string& model_path, const std::string& out_path,
                 std::optional<int> p_a, std::optional<int> p_i, const std::string& calib_split) {
  const RunConfig cfg = load_run_config(co.config);
  auto mf = load_model(model_path);
  const auto data = splits_for(cfg, co.data_cache);
  Dataset calib;
  if (calib_split == "train+val") {
    calib = data.train;
    calib.count += data.val.count;
    calib.inputs.insert(calib.inputs.end(), data.val.inputs.begin(), data.val.inputs.end());
    calib.targets.insert(calib.targets.end(), data.val.targets.begin(), data.val.targets.end());
  } else {
    calib = pick_split(data, calib_split);
  }
  const auto plan = calibrate(mf.model, calib, p_a.value_or(cfg.ptq.p_a), p_i.value_or(cfg.ptq.p_i),
                              cfg.ptq.alpha_i, co.threads);
  detail::require(plan.consistent(), ErrorKind::numerical, "plan violates alpha_h = 2^n_h / alpha_W");
  mf.plan = plan;
  save_model(out_path, mf);
  const auto cmp = compare_ptq(plan, mf.model, calib, co.threads);
  json out = {{"p_a", plan.p_a},
              {"p_i", plan.p_i},
              {"alpha_U", plan.alpha_U},
              {"alpha_V", plan.alpha_V},
              {"alpha_W", plan.alpha_W},
              {"alpha_i", plan.alpha_i},
              {"alpha_h", plan.alpha_h},
              {"alpha_W_alpha_h", plan.alpha_W * plan.alpha_h},
              {"n_h", plan.n_h},
              {"max_h", plan.max_h},
              {"accumulator_bits", plan.accumulator_bits},
              {"calibration_symbols", cmp.symbols},
              {"disagreement_rate", cmp.disagreement_rate()},
              {"saturations", cmp.saturations}};
  std::cout << out.dump(2) << "\n";
  return 0;
}

json report_json(const OrnnModel& m, const std::optional<PtqPlan>& plan) {
  const auto shape = m.shape();
  const auto q = m.quant();
  const auto size = model_size_bits(shape, q, plan ? std::optional<int>(plan->p_a) : std::nullopt);
  const auto ops = op_count_report(shape, q);
  json j;
  j["d_h"] = shape.d_h;
  j["d_in"] = shape.d_in;
  j["d_out"] = shape.d_out;
  j["q"] = shape.q;
  j["weights"] = q.describe();
  j["size"] = {{"formula_applied", size.formula_applied},
               {"core_bits", size.core_bits},
               {"core_kb", size.core_kb()},
               {"bias_bits", size.bias_bits},
               {"bias_kb", size.bias_kb()},
               {"total_kb", size.total_kb()}};
  auto layer = [](const LayerOps& l) {
    return json{{"multiplications", l.multiplications}, {"additions", l.additions}};
  };
  j["ops"] = {{"input", layer(ops.input)}, {"recurrent", layer(ops.recurrent)}, {"output", layer(ops.output)}};
  return j;
}

std::string report_text(const json& j) {
  std::ostringstream o;
  o << "model: d_h=" << j["d_h"] << " d_in=" << j["d_in"] << " d_out=" << j["d_out"] << " q=" << j["q"]
    << " weights=" << j["weights"].get<std::string>() << "\n";
  const auto& s = j["size"];
  o << "size (" << (s["formula_applied"].get<bool>() ? "quantized" : "float") << ")\n"
    << "  core bits   " << s["core_bits"] << "  (" << fmt(s["core_kb"].get<double>()) << " kB)\n"
    << "  bias bits   " << s["bias_bits"] << "  (" << fmt(s["bias_kb"].get<double>()) << " kB)\n"
    << "  total       " << fmt(s["total_kb"].get<double>()) << " kB\n";
  o << "ops per step      mult      add\n";
  for (const char* name : {"input", "recurrent", "output"}) {
    const auto& l = j["ops"][name];
    char buf[128];
    std::snprintf(buf, sizeof buf, "  %-10s %10llu %10llu\n", name,
                  static_cast<unsigned long long>(l["multiplications"].get<std::uint64_t>()),
                  static_cast<unsigned long long>(l["additions"].get<std::uint64_t>()));
    o << buf;
  }
  return o.str();
}

int cmd_report(const std::string& model_path, bool as_json) {
  const auto mf = load_model(model_path);
  const auto j = report_json(mf.model, mf.plan);
  std::cout << (as_json ? j.dump(2) + "\n" : report_text(j));
  return 0;
}

int cmd_memorization(std::size_t d_h, std::size_t T, const std::vector<std::uint64_t>& seeds,
                     const std::string& out, unsigned threads) {
  const auto c = memorization_sweep(d_h, T, seeds, 1.0, threads);
  if (out.empty() || out == "-") {
    write_memorization_csv(std::cout, c);
  } else {
    std::ofstream f(out);
    detail::require(static_cast<bool>(f), ErrorKind::io, "cannot write " + out);
    write_memorization_csv(f, c);
  }
  std::cerr << "cv(e_lin)=" << fmt(coefficient_of_variation(c.e_lin))
            << " cv(e_relu)=" << fmt(coefficient_of_variation(c.e_relu)) << "\n";
  return 0;
}

int cmd_gen_data(const Common& co, const std::string& out_dir) {
  const RunConfig cfg = load_run_config(co.config);
  detail::require(cfg.task == Task::copy, ErrorKind::config,
                  "gen-data builds copy-task caches; MNIST is read from IDX files");
  fs::create_directories(out_dir);
  const auto s = make_copy_splits(cfg.copy);
  const Dataset* parts[] = {&s.train, &s.val, &s.test};
  const char* names[] = {"train.hdrd", "val.hdrd", "test.hdrd"};
  for (std::size_t i = 0; i < 3; ++i)
    io::write_file((fs::path(out_dir) / names[i]).string(), encode_dataset(*parts[i], copy_spec_hash(cfg.copy, i)));
  std::cout << "wrote " << s.train.size() << "/" << s.val.size() << "/" << s.test.size()
            << " sequences of length " << cfg.copy.steps() << " to " << out_dir << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hadamard binary / block-ternary orthogonal RNN toolkit"};
  app.require_subcommand(1);
  Common co;

  auto add_common = [&](CLI::App* sub, bool needs_config) {
    auto* opt = sub->add_option("-c,--config", co.config, "JSON run config");
    if (needs_config) opt->required()->check(CLI::ExistingFile);
    sub->add_option("--threads", co.threads, "worker threads")->check(CLI::Range(1u, 256u));
    sub->add_option("--data-cache", co.data_cache, "directory written by gen-data");
  };

  auto* train = app.add_subcommand("train", "train a model, write checkpoints and metrics.csv");
  add_common(train, true);
  bool deterministic = false, no_latent_clip = false;
  std::optional<std::size_t> epochs;
  std::optional<double> lr;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  train->add_flag("--deterministic", deterministic, "single thread, wall_time column zeroed");
  train->add_flag("--no-latent-clip", no_latent_clip, "do not clip sign latents to [-1, 1]");
  train->add_option("--epochs", epochs);
  train->add_option("--lr", lr);
  train->add_option("--seed", seed);
  train->add_option("-o,--out", out_dir, "output directory (overrides output.dir)");

  auto* eval = app.add_subcommand("eval", "evaluate a model on a split");
  add_common(eval, true);
  std::string model_path, mode = "float", split = "test";
  eval->add_option("-m,--model", model_path)->required()->check(CLI::ExistingFile);
  eval->add_option("--mode", mode, "float or fxp")->check(CLI::IsMember({"float", "fxp"}));
  eval->add_option("--split", split)->check(CLI::IsMember({"train", "val", "test"}));

  auto* quant = app.add_subcommand("quantize", "calibrate fixed-point inference and embed the plan");
  add_common(quant, true);
  std::string qout, calib_split = "train+val";
  std::optional<int> p_a, p_i;
  quant->add_option("-m,--model", model_path)->required()->check(CLI::ExistingFile);
  quant->add_option("-o,--out", qout)->required();
  quant->add_option("--p-a", p_a, "hidden-state bits");
  quant->add_option("--p-i", p_i, "input bits");
  quant->add_option("--calib", calib_split)->check(CLI::IsMember({"train", "val", "train+val"}));

  auto* report = app.add_subcommand("report", "model size and operation counts");
  bool as_json = false;
  report->add_option("-m,--model", model_path)->required()->check(CLI::ExistingFile);
  report->add_flag("--json", as_json);

  auto* mem = app.add_subcommand("experiment-memorization", "linear vs ReLU perturbation curves (CSV)");
  std::size_t d_h = 128, T = 200;
  std::vector<std::uint64_t> seeds{1};
  std::string mem_out;
  mem->add_option("--d-h", d_h);
  mem->add_option("--steps", T);
  mem->add_option("--seeds", seeds)->delimiter(',');
  mem->add_option("-o,--out", mem_out, "CSV path, stdout by default");
  mem->add_option("--threads", co.threads);

  auto* gen = app.add_subcommand("gen-data", "write copy-task dataset caches");
  add_common(gen, true);
  std::string gen_out;
  gen->add_option("-o,--out", gen_out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*train) return cmd_train(co, deterministic, no_latent_clip, epochs, lr, seed, out_dir);
    if (*eval) return cmd_eval(co, model_path, mode, split);
    if (*quant) return cmd_quantize(co, model_path, qout, p_a, p_i, calib_split);
    if (*report) return cmd_report(model_path, as_json);
    if (*mem) return cmd_memorization(d_h, T, seeds, mem_out, co.threads);
    if (*gen) return cmd_gen_data(co, gen_out);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
