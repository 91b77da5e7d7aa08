#include "geomf/cli.hpp"

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "geomf/nbody.hpp"
#include "geomf/training.hpp"
#include "geomf/verify.hpp"

namespace geomf {

namespace {

using nlohmann::json;

// Flags of one subcommand, each also settable from the flat JSON config under
// its long name.
class Options {
 public:
  explicit Options(CLI::App* app) : app_(app) {
    app_->add_option("--config", config_path_, "JSON file with default values for any flag below");
  }

  template <typename T>
  CLI::Option* add(const std::string& name, T& field, const std::string& help) {
    CLI::Option* opt = app_->add_option("--" + name, field, help);
    entries_.push_back({name, opt, [&field, name](const json& v) {
                          try {
                            field = v.get<T>();
                          } catch (const json::exception&) {
                            throw ConfigError("config key '" + name + "' has the wrong type");
                          }
                        }});
    return opt;
  }

  CLI::Option* flag(const std::string& name, bool& field, const std::string& help) {
    CLI::Option* opt = app_->add_flag("--" + name, field, help);
    entries_.push_back({name, opt, [&field, name](const json& v) {
                          if (!v.is_boolean()) throw ConfigError("config key '" + name + "' must be a boolean");
                          field = v.get<bool>();
                        }});
    return opt;
  }

  bool given(const std::string& name) const {
    for (const Entry& e : entries_)
      if (e.name == name) return e.option->count() > 0;
    return false;
  }

  /// Given on the command line or present in the config file.
  bool set_explicitly(const std::string& name) const { return given(name) || from_config_.count(name) > 0; }

  /// Fills every flag not given on the command line from --config, then
  /// applies GEOMF_SEED to `seed` unless --seed was given.
  void resolve(std::uint64_t* seed) {
    if (!config_path_.empty()) {
      std::ifstream in(config_path_);
      if (!in) throw ConfigError("cannot read config file " + config_path_);
      json j;
      try {
        j = json::parse(in);
      } catch (const json::parse_error& e) {
        throw ConfigError("config file " + config_path_ + " is not valid JSON: " + e.what());
      }
      if (!j.is_object()) throw ConfigError("config file " + config_path_ + " must hold a JSON object");
      for (const auto& [key, value] : j.items()) {
        const Entry* match = nullptr;
        for (const Entry& e : entries_)
          if (e.name == key) match = &e;
        if (match == nullptr) throw ConfigError("unknown config key '" + key + "' in " + config_path_);
        if (match->option->count() == 0) match->set(value);
        from_config_.insert(key);
      }
    }
    if (seed != nullptr && !given("seed")) {
      if (const char* env = std::getenv("GEOMF_SEED")) {
        try {
          std::size_t used = 0;
          const unsigned long long v = std::stoull(env, &used);
          if (used != std::string(env).size()) throw std::invalid_argument(env);
          *seed = v;
        } catch (const std::exception&) {
          throw ConfigError(std::string("GEOMF_SEED is not an unsigned integer: ") + env);
        }
      }
    }
  }

 private:
  struct Entry {
    std::string name;
    CLI::Option* option;
    std::function<void(const json&)> set;
  };
  CLI::App* app_;
  std::string config_path_;
  std::vector<Entry> entries_;
  std::set<std::string> from_config_;
};

unsigned default_threads() { return std::max(1u, std::thread::hardware_concurrency()); }

// Model flags shared by train and check.
struct ModelFlags {
  ModelConfig cfg;
  double dropout = 0.4;
  std::string mode = "se3";
  std::string mutate = "none";

  void add(Options& o) {
    o.add("layers", cfg.layers, "transformer blocks");
    o.add("width", cfg.width, "hidden dimension d");
    o.add("heads", cfg.heads, "attention heads");
    o.add("ffn-width", cfg.ffn_width, "feed-forward hidden dimension");
    o.add("kernels", cfg.kernels, "Gaussian basis kernels");
    o.add("dropout", dropout, "embedding, attention, activation and hidden dropout rate");
    o.flag("drop-path", cfg.drop_path, "enable per-block residual drop");
    o.add("drop-path-rate", cfg.drop_path_rate, "residual drop probability when enabled");
    o.add("velocities", cfg.use_velocities, "feed initial velocities to the equivariant stream");
    o.add("mode", mode, "symmetry group: se3 or e3");
  }

  ModelConfig resolve(std::uint64_t seed) const {
    ModelConfig c = cfg;
    c.dropout_embedding = c.dropout_attention = c.dropout_activation = c.dropout_hidden = dropout;
    c.mode = parse_symmetry_mode(mode);
    c.mutation = parse_mutation(mutate);
    c.seed = seed;
    c.validate();
    return c;
  }
};

void require_distinct(const std::string& output, const std::string& input) {
  if (output.empty() || input.empty()) return;
  std::error_code ec;
  if (output == input || std::filesystem::equivalent(output, input, ec))
    throw ConfigError("output " + output + " would overwrite input " + input);
}

void require_file(const std::string& what, const std::string& path) {
  if (path.empty()) throw ConfigError(what + " path is required");
  if (!std::filesystem::is_regular_file(path)) throw ConfigError(what + " not found: " + path);
}

std::string number(double v) {
  std::ostringstream s;
  s << std::setprecision(17) << v;
  return s.str();
}

// ---------------------------------------------------------------------------

struct GenData {
  std::string out;
  std::uint64_t seed = 0;
  SplitCounts counts;
  SimulationConfig sim;
  unsigned threads = default_threads();

  void add(CLI::App* app, Options& o) {
    app->description("Simulate charged-particle trajectories and write a dataset file");
    o.add("out", out, "output dataset path (NDJSON)");
    o.add("seed", seed, "base seed; split seeds are consecutive from here");
    o.add("train", counts.train, "training trajectories");
    o.add("valid", counts.valid, "validation trajectories");
    o.add("test", counts.test, "test trajectories");
    o.add("particles", sim.particles, "particles per system");
    o.add("dt", sim.dt, "integration step");
    o.add("steps", sim.steps, "integration steps per trajectory");
    o.add("eps-soft", sim.eps_soft, "force softening length");
    o.add("charge", sim.charge_magnitude, "charge magnitude");
    o.add("threads", threads, "simulation threads");
  }

  int run(Options& o, std::ostream& os) {
    o.resolve(&seed);
    if (out.empty()) throw ConfigError("--out is required");
    sim.validate();
    if (threads == 0) throw ConfigError("--threads must be positive");
    const Dataset data = generate_dataset(counts, seed, sim, threads);
    write_dataset(out, data);
    std::size_t resampled = 0;
    for (Split s : {Split::kTrain, Split::kValid, Split::kTest})
      for (const auto& r : records(data, s)) resampled += r.resampled_from.has_value();
    os << "wrote " << out << "\n"
       << "train " << counts.train << "  valid " << counts.valid << "  test " << counts.test << "\n"
       << "seeds " << seed << " .. " << seed + counts.train + counts.valid + counts.test - 1 << "  resampled "
       << resampled << "\n"
       << "fnv1a64 " << file_hash(out) << "\n";
    return kExitOk;
  }
};

struct Train {
  ModelFlags model;
  TrainConfig cfg;
  std::uint64_t seed = 0;
  bool verbose = false;
  bool no_wallclock = false;

  void add(CLI::App* app, Options& o) {
    app->description("Train on a dataset, keeping the best-validation checkpoint");
    o.add("data", cfg.dataset_path, "dataset path");
    o.add("checkpoint", cfg.checkpoint_path, "best-validation checkpoint output");
    o.add("metrics", cfg.metrics_path, "per-epoch metrics log output (NDJSON)");
    model.add(o);
    o.add("lr", cfg.adam.lr, "Adam learning rate");
    o.add("beta1", cfg.adam.beta1, "Adam beta1");
    o.add("beta2", cfg.adam.beta2, "Adam beta2");
    o.add("adam-eps", cfg.adam.eps, "Adam epsilon");
    o.add("batch-size", cfg.batch_size, "trajectories per batch");
    o.add("epochs", cfg.epochs, "maximum epochs");
    o.add("patience", cfg.patience, "epochs without validation improvement before stopping");
    o.add("eval-every", cfg.eval_every, "epochs between validation passes");
    o.add("clip", cfg.clip_norm, "global gradient-norm clip, 0 disables");
    o.add("train-size", cfg.train_limit, "use the first N training trajectories (0 = all)");
    o.add("valid-size", cfg.valid_limit, "use the first N validation trajectories (0 = all)");
    o.add("chunk", cfg.chunk, "systems per gradient tape");
    o.add("seed", seed, "seed for initialisation, shuffling and dropout");
    cfg.threads = default_threads();
    o.add("threads", cfg.threads, "worker threads");
    o.flag("no-wallclock", no_wallclock, "write null wallclock_s so logs are reproducible byte for byte");
    o.flag("verbose", verbose, "print every epoch");
  }

  int run(Options& o, std::ostream& os) {
    o.resolve(&seed);
    cfg.model = model.resolve(seed);
    cfg.seed = seed;
    cfg.record_wallclock = !no_wallclock;
    // The default batch shrinks to fit a reduced training split.
    if (cfg.train_limit > 0 && !o.set_explicitly("batch-size")) cfg.batch_size = std::min(cfg.batch_size, cfg.train_limit);
    cfg.validate();
    require_file("dataset", cfg.dataset_path);
    require_distinct(cfg.checkpoint_path, cfg.dataset_path);
    require_distinct(cfg.metrics_path, cfg.dataset_path);
    require_distinct(cfg.metrics_path, cfg.checkpoint_path);
    const TrainResult r = train(cfg, [&](const EpochMetrics& m) {
      if (!verbose) return;
      os << "epoch " << m.epoch << "  train_loss " << number(m.train_loss);
      if (m.valid_mse) os << "  valid_mse " << number(*m.valid_mse);
      os << "  " << std::fixed << std::setprecision(1) << m.wallclock_s << "s" << std::defaultfloat << "\n";
    });
    os << "epochs_run " << r.epochs_run << (r.stopped_early ? " (early stop)" : "") << "\n"
       << "best_epoch " << r.best_epoch << "\n"
       << "best_valid_mse " << number(r.best_valid_mse) << "\n"
       << "test_mse " << number(r.test_mse) << "\n"
       << "baseline_mse " << number(r.baseline_test_mse) << "\n"
       << "ratio " << number(r.test_mse / r.baseline_test_mse) << "\n";
    return kExitOk;
  }
};

struct Eval {
  std::string checkpoint, data, split = "test", baseline;
  unsigned threads = default_threads();

  void add(CLI::App* app, Options& o) {
    app->description("Report the MSE of predicted final positions on one split");
    o.add("checkpoint", checkpoint, "checkpoint to evaluate");
    o.add("data", data, "dataset path");
    o.add("split", split, "train, valid or test");
    o.add("baseline", baseline, "'linear' evaluates p0 + v0*T instead of a checkpoint");
    o.add("threads", threads, "worker threads");
  }

  int run(Options& o, std::ostream& os) {
    o.resolve(nullptr);
    const Split s = parse_split(split);
    if (!baseline.empty() && baseline != "linear") throw ConfigError("unknown baseline '" + baseline + "'");
    if (threads == 0) throw ConfigError("--threads must be positive");
    require_file("dataset", data);
    double mse = 0.0;
    if (baseline == "linear") {
      const Dataset d = read_dataset(data);
      mse = linear_baseline_mse(records(d, s), static_cast<double>(d.sim.steps) * d.sim.dt);
    } else {
      require_file("checkpoint", checkpoint);
      mse = evaluate_checkpoint(checkpoint, data, s, threads);
    }
    os << "mse " << number(mse) << "\n";
    return kExitOk;
  }
};

struct Check {
  ModelFlags model;
  AuditOptions opt;
  std::string checkpoint, report;
  bool skip_gradients = false;
  unsigned threads = default_threads();

  void add(CLI::App* app, Options& o) {
    app->description("Audit symmetry and gradients; exit 4 if any check fails");
    model.add(o);
    o.add("mutate", model.mutate,
          "inject a defect: none, gelu-on-equ, uncentered-positions, spatial-head-split, raw-coordinate-bias, "
          "corrupt-product-backward");
    o.add("checkpoint", checkpoint, "audit a saved model instead of fresh random parameters");
    o.add("trials", opt.trials, "random trials per symmetry check");
    o.add("seed", opt.seed, "audit seed");
    o.add("report", report, "write the NDJSON report here");
    o.flag("skip-gradients", skip_gradients, "omit the gradient audit");
    o.add("threads", threads, "checks run concurrently");
  }

  int run(Options& o, std::ostream& os) {
    o.resolve(&opt.seed);
    Model m;
    if (!checkpoint.empty()) {
      require_file("checkpoint", checkpoint);
      m = load_checkpoint(checkpoint);
      m.config.mutation = parse_mutation(model.mutate);
      opt.fresh_parameters = false;
    } else {
      m = make_model(model.resolve(opt.seed));
      opt.fresh_parameters = true;
    }
    if (threads == 0) throw ConfigError("--threads must be positive");
    AuditSelection which;
    which.gradients = false;
    SymmetryReport rep = run_audit(m, opt, which, threads);
    if (!skip_gradients) {
      // Central differences over every parameter are only affordable on a
      // tiny model of the same kind.
      ModelConfig tiny = m.config;
      tiny.layers = std::min<std::size_t>(tiny.layers, 2);
      tiny.width = 8;
      tiny.heads = 2;
      tiny.ffn_width = 8;
      tiny.kernels = std::min<std::size_t>(tiny.kernels, 8);
      tiny.dropout_embedding = tiny.dropout_attention = tiny.dropout_activation = tiny.dropout_hidden = 0.0;
      Model small = make_model(tiny);
      randomize_output_projections(small.params, opt.seed + 1);
      const auto rows = check_gradients(small, opt.seed);
      rep.rows.insert(rep.rows.end(), rows.begin(), rows.end());
    }
    const std::string text = rep.to_ndjson();
    if (!report.empty()) {
      std::ofstream f(report, std::ios::trunc);
      if (!f || !(f << text)) throw IoError("cannot write report " + report);
    }
    std::size_t failed = 0;
    for (const CheckResult& r : rep.rows) {
      if (r.pass && r.name.rfind("gradient.", 0) == 0) continue;
      os << (r.pass ? "PASS " : "FAIL ") << r.name << "  max_dev " << number(r.max_deviation) << "  tol "
         << r.tolerance << "\n";
      failed += !r.pass;
    }
    os << (rep.pass() ? "all " : "") << rep.rows.size() - failed << "/" << rep.rows.size() << " checks passed\n";
    return rep.pass() ? kExitOk : kExitAudit;
  }
};

struct Inspect {
  std::string checkpoint;

  void add(CLI::App* app, Options& o) {
    app->description("Print a checkpoint's config and manifest");
    o.add("checkpoint", checkpoint, "checkpoint path");
  }

  int run(Options& o, std::ostream& os) {
    o.resolve(nullptr);
    require_file("checkpoint", checkpoint);
    std::string config;
    const auto entries = read_manifest(checkpoint, &config);
    os << "config " << config << "\n";
    std::size_t total = 0;
    for (const ManifestEntry& e : entries) {
      os << e.name << "  " << to_string(e.shape) << "  offset " << e.offset << "\n";
      total += element_count(e.shape);
    }
    os << entries.size() << " tensors, " << total << " parameters\n";
    return kExitOk;
  }
};

}  // namespace

std::string file_hash(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  char buf[1 << 16];
  while (in.read(buf, sizeof buf) || in.gcount() > 0) {
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 0x100000001b3ULL;
    }
  }
  char hex[17];
  std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(h));
  return hex;
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Two-stream geometric transformer: data generation, training, evaluation and audits", "geomf"};
  app.option_defaults()->always_capture_default();
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "help for every subcommand");

  GenData gen;
  Train tr;
  Eval ev;
  Check ck;
  Inspect in;
  CLI::App* gen_app = app.add_subcommand("gen-data");
  CLI::App* train_app = app.add_subcommand("train");
  CLI::App* eval_app = app.add_subcommand("eval");
  CLI::App* check_app = app.add_subcommand("check");
  CLI::App* inspect_app = app.add_subcommand("inspect");
  Options gen_opts(gen_app), train_opts(train_app), eval_opts(eval_app), check_opts(check_app),
      inspect_opts(inspect_app);
  gen.add(gen_app, gen_opts);
  tr.add(train_app, train_opts);
  ev.add(eval_app, eval_opts);
  ck.add(check_app, check_opts);
  in.add(inspect_app, inspect_opts);

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*gen_app) return gen.run(gen_opts, out);
    if (*train_app) return tr.run(train_opts, out);
    if (*eval_app) return ev.run(eval_opts, out);
    if (*check_app) return ck.run(check_opts, out);
    if (*inspect_app) return in.run(inspect_opts, out);
  } catch (const IoError& e) {
    err << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const NumericError& e) {
    err << "error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  }
  return kExitConfig;
}

}  // namespace geomf
