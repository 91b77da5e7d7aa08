#include "geomf/verify.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <exception>
#include <functional>
#include <numeric>
#include <random>
#include <thread>

#include <json.hpp>

#include "geomf/training.hpp"

namespace geomf {

namespace {

std::uint64_t mix(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

struct Outputs {
  Tensor z_inv, z_equ, positions;
};

Outputs evaluate(const ModelConfig& cfg, const ModelParams& params, const MolecularSystem& sys) {
  const std::span<const MolecularSystem> batch(&sys, 1);
  const StreamPair z = forward(cfg, params, batch);
  return {z.z_inv, z.z_equ, equivariant_head(params, z.z_equ, stack_positions(batch))};
}

// Per-trial state: the system, and the parameters it is evaluated with.
struct Trial {
  MolecularSystem sys;
  ModelParams params;
  std::mt19937_64 rng;
};

Trial make_trial(const Model& model, const AuditOptions& opt, std::uint64_t stream, std::size_t index) {
  Trial t{{}, {}, std::mt19937_64(mix(mix(opt.seed, stream), index))};
  std::uniform_int_distribution<std::size_t> atoms(opt.min_atoms, std::max(opt.min_atoms, opt.max_atoms));
  std::uniform_int_distribution<std::size_t> type(0, model.config.vocab - 1);
  std::normal_distribution<double> normal(0.0, 1.0);
  const std::size_t n = atoms(t.rng);
  for (std::size_t i = 0; i < n; ++i) {
    t.sys.types.push_back(type(t.rng));
    t.sys.positions.push_back({normal(t.rng), normal(t.rng), normal(t.rng)});
  }
  if (model.config.use_velocities) {
    std::vector<Vec3> v(n);
    for (Vec3& x : v) x = {normal(t.rng), normal(t.rng), normal(t.rng)};
    t.sys.velocities = std::move(v);
  }
  if (opt.fresh_parameters) {
    ModelConfig cfg = model.config;
    cfg.seed = t.rng();
    t.params = init_params(cfg);
    randomize_output_projections(t.params, t.rng());
  } else {
    t.params = model.params;
  }
  return t;
}

double norm2(const Tensor& a) {
  double s = 0.0;
  for (double x : a.values()) s += x * x;
  return std::sqrt(s);
}

// ‖expected − actual‖ / (‖reference‖ + 1e-12)
double deviation(const Tensor& expected, const Tensor& actual, const Tensor& reference) {
  if (expected.shape() != actual.shape()) return INFINITY;
  double s = 0.0;
  for (std::size_t i = 0; i < expected.size(); ++i) {
    const double d = expected[i] - actual[i];
    s += d * d;
  }
  const double dev = std::sqrt(s) / (norm2(reference) + 1e-12);
  return std::isnan(dev) ? INFINITY : dev;
}

// R applied to every 3-vector along the spatial axis of a [..., 3, d] tensor.
Tensor rotate_channels(const Tensor& z, const Mat3& r) {
  const std::size_t d = z.shape().back();
  const std::size_t rows = z.size() / (3 * d);
  std::vector<double> out(z.size());
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t k = 0; k < d; ++k)
      for (std::size_t a = 0; a < 3; ++a) {
        double acc = 0.0;
        for (std::size_t b = 0; b < 3; ++b) acc += r[a][b] * z[(i * 3 + b) * d + k];
        out[(i * 3 + a) * d + k] = acc;
      }
  return Tensor(z.shape(), std::move(out));
}

Tensor move_points(const Tensor& p, const RigidMotion& g) {
  std::vector<double> out(p.size());
  for (std::size_t i = 0; i < p.size() / 3; ++i) {
    const Vec3 y = mat3_apply(g.R, Vec3{p[3 * i], p[3 * i + 1], p[3 * i + 2]});
    for (std::size_t k = 0; k < 3; ++k) out[3 * i + k] = y[k] + g.t[k];
  }
  return Tensor(p.shape(), std::move(out));
}

// out[i] = in[perm[i]] along the atom axis of a [1 × n × ...] tensor.
Tensor permute_atoms(const Tensor& z, const std::vector<std::size_t>& perm) {
  const std::size_t n = z.dim(1);
  const std::size_t row = z.size() / n;
  std::vector<double> out(z.size());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < row; ++c) out[i * row + c] = z[perm[i] * row + c];
  return Tensor(z.shape(), std::move(out));
}

CheckResult finish(std::string name, std::size_t trials, double worst, double tol) {
  return {std::move(name), trials, worst, tol, worst <= tol};
}

// Equivariance of Zᴱ and positions, invariance of Zᴵ, under g (translation
// ignored for the streams, applied to positions).
double motion_deviation(const ModelConfig& cfg, const ModelParams& params, const MolecularSystem& sys,
                        const RigidMotion& g, bool omit_output_rotation) {
  const Outputs a = evaluate(cfg, params, sys);
  const Outputs b = evaluate(cfg, params, apply_rigid_motion(sys, g));
  RigidMotion out = g;
  if (omit_output_rotation) out.R = mat3_identity();
  double worst = deviation(rotate_channels(a.z_equ, out.R), b.z_equ, a.z_equ);
  worst = std::max(worst, deviation(move_points(a.positions, out), b.positions, a.positions));
  worst = std::max(worst, deviation(a.z_inv, b.z_inv, a.z_inv));
  return worst;
}

}  // namespace

double rigid_motion_deviation(const ModelConfig& cfg, const ModelParams& params, const MolecularSystem& sys,
                              const RigidMotion& g) {
  return motion_deviation(cfg, params, sys, g, false);
}

bool SymmetryReport::pass() const {
  return std::all_of(rows.begin(), rows.end(), [](const CheckResult& r) { return r.pass; });
}

std::string SymmetryReport::to_ndjson() const {
  std::string out;
  std::size_t failed = 0;
  for (const CheckResult& r : rows) {
    nlohmann::json j;
    j["check"] = r.name;
    j["trials"] = r.trials;
    j["max_deviation"] = std::isfinite(r.max_deviation) ? nlohmann::json(r.max_deviation) : nlohmann::json("inf");
    j["tolerance"] = r.tolerance;
    j["pass"] = r.pass;
    out += j.dump() + "\n";
    if (!r.pass) ++failed;
  }
  nlohmann::json s;
  s["summary"] = true;
  s["pass"] = pass();
  s["checks"] = rows.size();
  s["failed"] = failed;
  s["seed"] = seed;
  s["config_hash"] = config_hash;
  out += s.dump() + "\n";
  return out;
}

std::string config_hash(const ModelConfig& cfg) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : config_to_json(cfg)) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

CheckResult check_rotation_equivariance(const Model& model, const AuditOptions& opt, double tol) {
  double worst = 0.0;
  for (std::size_t i = 0; i < opt.trials; ++i) {
    Trial t = make_trial(model, opt, 1, i);
    RigidMotion g = random_rotation(t.rng(), false);
    g.t = {0.0, 0.0, 0.0};
    worst = std::max(worst, motion_deviation(model.config, t.params, t.sys, g, opt.omit_output_rotation));
  }
  return finish("rotation", opt.trials, worst, tol);
}

std::vector<CheckResult> check_translation(const Model& model, const AuditOptions& opt, double tol) {
  double equ = 0.0, inv = 0.0, pos = 0.0;
  for (std::size_t i = 0; i < opt.trials; ++i) {
    Trial t = make_trial(model, opt, 2, i);
    const RigidMotion full = random_rotation(t.rng(), false);
    RigidMotion shift;
    shift.t = full.t;
    const Outputs a = evaluate(model.config, t.params, t.sys);
    const Outputs b = evaluate(model.config, t.params, apply_rigid_motion(t.sys, shift));
    const Outputs c = evaluate(model.config, t.params, apply_rigid_motion(t.sys, full));
    equ = std::max(equ, deviation(a.z_equ, b.z_equ, a.z_equ));
    pos = std::max(pos, deviation(move_points(a.positions, shift), b.positions, a.positions));
    inv = std::max(inv, deviation(a.z_inv, c.z_inv, a.z_inv));
  }
  return {finish("translation.equ_invariance", opt.trials, equ, tol),
          finish("rigid_motion.inv_invariance", opt.trials, inv, tol),
          finish("translation.position_shift", opt.trials, pos, tol)};
}

RigidMotion sample_reflection(std::uint64_t seed, std::size_t index) {
  RigidMotion g = random_rotation(mix(seed, index), false);
  if (index == 0) {
    g.R = {Vec3{-1, 0, 0}, Vec3{0, -1, 0}, Vec3{0, 0, -1}};
  } else {
    for (double& e : g.R[0]) e = -e;
  }
  g.det_sign = -1;
  return g;
}

CheckResult check_reflection(const Model& model, const AuditOptions& opt, double tol) {
  if (model.config.mode != SymmetryMode::kE3)
    throw ModeError("reflection check is undefined for an SE3-mode model");
  double worst = 0.0;
  for (std::size_t i = 0; i < opt.trials; ++i) {
    Trial t = make_trial(model, opt, 3, i);
    const RigidMotion g = sample_reflection(t.rng(), i);
    worst = std::max(worst, motion_deviation(model.config, t.params, t.sys, g, opt.omit_output_rotation));
  }
  return finish("reflection", opt.trials, worst, tol);
}

double permutation_deviation(const ModelConfig& cfg, const ModelParams& params, const MolecularSystem& sys,
                             const std::vector<std::size_t>& perm) {
  MolecularSystem moved;
  for (std::size_t k : perm) {
    moved.types.push_back(sys.types.at(k));
    moved.positions.push_back(sys.positions.at(k));
  }
  if (sys.velocities) {
    std::vector<Vec3> v;
    for (std::size_t k : perm) v.push_back(sys.velocities->at(k));
    moved.velocities = std::move(v);
  }
  const Outputs a = evaluate(cfg, params, sys);
  const Outputs b = evaluate(cfg, params, moved);
  double worst = deviation(permute_atoms(a.z_inv, perm), b.z_inv, a.z_inv);
  worst = std::max(worst, deviation(permute_atoms(a.z_equ, perm), b.z_equ, a.z_equ));
  return std::max(worst, deviation(permute_atoms(a.positions, perm), b.positions, a.positions));
}

CheckResult check_permutation(const Model& model, const AuditOptions& opt, double tol) {
  double worst = 0.0;
  for (std::size_t i = 0; i < opt.trials; ++i) {
    Trial t = make_trial(model, opt, 4, i);
    std::vector<std::size_t> perm(t.sys.size());
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), t.rng);
    worst = std::max(worst, permutation_deviation(model.config, t.params, t.sys, perm));
  }
  return finish("permutation", opt.trials, worst, tol);
}

std::vector<CheckResult> check_gradients(const Model& model, std::uint64_t seed, double tol) {
  const ModelConfig& cfg = model.config;
  if (cfg.layers > 2 || cfg.width > 8)
    throw ConfigError("gradient audit needs a tiny model (at most 2 blocks, width at most 8)");
  std::mt19937_64 rng(mix(seed, 5));
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> type(0, cfg.vocab - 1);
  std::vector<MolecularSystem> batch(2);
  for (MolecularSystem& sys : batch) {
    std::vector<Vec3> v;
    for (int i = 0; i < 4; ++i) {
      sys.types.push_back(type(rng));
      sys.positions.push_back({normal(rng), normal(rng), normal(rng)});
      v.push_back({normal(rng), normal(rng), normal(rng)});
    }
    if (cfg.use_velocities) sys.velocities = v;
  }
  std::vector<double> tv(2 * 4 * 3), ev(2);
  for (double& x : tv) x = normal(rng);
  for (double& x : ev) x = normal(rng);
  const Tensor target({2, 4, 3}, tv), energy({2}, ev);

  auto loss_of = [&](const ModelParams& params) {
    const StreamPair z = forward(cfg, params, batch);
    return add(mse_loss(equivariant_head(params, z.z_equ, stack_positions(batch)), target),
               mse_loss(invariant_head(params, z.z_inv), energy));
  };

  Tape tape;
  const ModelParams bound = model.params.bind(tape);
  tape.backward(loss_of(bound));

  std::vector<const Tensor*> tracked;
  bound.visit([&](const std::string&, const Tensor& t) { tracked.push_back(&t); });
  std::vector<CheckResult> rows;
  std::size_t k = 0;
  model.params.visit([&](const std::string& name, const Tensor& original) {
    const Tensor g = tape.grad(*tracked[k++]);
    const Tensor fd = finite_diff_gradient(
        [&](const Tensor& x) {
          ModelParams q = model.params;
          q.visit([&](const std::string& n, Tensor& t) {
            if (n == name) t = x;
          });
          return loss_of(q).item();
        },
        original, 1e-5);
    double diff = 0.0, scale = 1e-6;
    for (std::size_t i = 0; i < g.size(); ++i) {
      diff = std::max(diff, std::abs(g[i] - fd[i]));
      scale = std::max({scale, std::abs(fd[i]), std::abs(g[i])});
    }
    const double err = std::isfinite(diff) ? diff / scale : INFINITY;
    rows.push_back(finish("gradient." + name, 1, err, tol));
  });
  return rows;
}

SymmetryReport run_audit(const Model& model, const AuditOptions& opt, const AuditSelection& which,
                         unsigned threads) {
  std::vector<std::function<std::vector<CheckResult>()>> tasks;
  if (which.rotation) tasks.push_back([&] { return std::vector{check_rotation_equivariance(model, opt)}; });
  if (which.translation) tasks.push_back([&] { return check_translation(model, opt); });
  if (which.reflection && model.config.mode == SymmetryMode::kE3)
    tasks.push_back([&] { return std::vector{check_reflection(model, opt)}; });
  if (which.permutation) tasks.push_back([&] { return std::vector{check_permutation(model, opt)}; });
  if (which.gradients) tasks.push_back([&] { return check_gradients(model, opt.seed); });

  std::vector<std::vector<CheckResult>> results(tasks.size());
  std::vector<std::exception_ptr> errors(tasks.size());
  const std::size_t workers = std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(tasks.size(), 1));
  auto work = [&](std::size_t w) {
    for (std::size_t i = w; i < tasks.size(); i += workers) {
      try {
        results[i] = tasks[i]();
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  if (workers == 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work, w);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);

  SymmetryReport report;
  report.seed = opt.seed;
  report.config_hash = config_hash(model.config);
  for (auto& r : results) report.rows.insert(report.rows.end(), r.begin(), r.end());
  return report;
}

}  // namespace geomf
