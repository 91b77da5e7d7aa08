#include "geomf/nbody.hpp"

#include <cmath>
#include <fstream>
#include <random>
#include <thread>

#include <json.hpp>

namespace geomf {

void SimulationConfig::validate() const {
  if (particles == 0) throw ConfigError("particle count must be positive");
  if (!(dt > 0.0) || !std::isfinite(dt)) throw ConfigError("dt must be positive");
  if (!(eps_soft >= 0.0)) throw ConfigError("eps_soft must be non-negative");
  if (!(blowup_limit > 0.0)) throw ConfigError("blow-up limit must be positive");
  if (max_resamples == 0) throw ConfigError("max_resamples must be positive");
}

void ParticleState::validate() const {
  if (velocities.size() != positions.size() || charges.size() != positions.size()) {
    throw ValidationError("particle state arrays differ in length");
  }
  for (std::size_t i = 0; i < size(); ++i) {
    for (int k = 0; k < 3; ++k) {
      if (!std::isfinite(positions[i][k]) || !std::isfinite(velocities[i][k])) {
        throw ValidationError("particle " + std::to_string(i) + " has a non-finite coordinate");
      }
    }
    if (!std::isfinite(charges[i])) throw ValidationError("particle " + std::to_string(i) + " has a non-finite charge");
  }
}

std::vector<Vec3> coulomb_forces(const ParticleState& state, double eps_soft) {
  const std::size_t n = state.size();
  const double eps2 = eps_soft * eps_soft;
  std::vector<Vec3> f(n, Vec3{0.0, 0.0, 0.0});
  // Pairwise accumulation with exact antisymmetry so Σ Fᵢ vanishes to roundoff.
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      Vec3 r;
      for (int k = 0; k < 3; ++k) r[k] = state.positions[i][k] - state.positions[j][k];
      const double s2 = r[0] * r[0] + r[1] * r[1] + r[2] * r[2] + eps2;
      const double coef = state.charges[i] * state.charges[j] / (s2 * std::sqrt(s2));
      for (int k = 0; k < 3; ++k) {
        f[i][k] += coef * r[k];
        f[j][k] -= coef * r[k];
      }
    }
  }
  return f;
}

namespace {

// Velocity Verlet with the forces at the current positions supplied; leaves
// the forces at the new positions in `forces`.
void verlet(ParticleState& s, std::vector<Vec3>& forces, double dt, double eps_soft) {
  const double half = 0.5 * dt;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (int k = 0; k < 3; ++k) {
      s.velocities[i][k] += half * forces[i][k];
      s.positions[i][k] += dt * s.velocities[i][k];
    }
  forces = coulomb_forces(s, eps_soft);
  for (std::size_t i = 0; i < s.size(); ++i)
    for (int k = 0; k < 3; ++k) s.velocities[i][k] += half * forces[i][k];
}

}  // namespace

ParticleState leapfrog_step(const ParticleState& state, double dt, double eps_soft) {
  if (!(dt > 0.0)) throw ConfigError("dt must be positive");
  ParticleState next = state;
  std::vector<Vec3> forces = coulomb_forces(state, eps_soft);
  verlet(next, forces, dt, eps_soft);
  return next;
}

double total_energy(const ParticleState& state, double eps_soft) {
  double kinetic = 0.0, potential = 0.0;
  const double eps2 = eps_soft * eps_soft;
  for (std::size_t i = 0; i < state.size(); ++i) {
    const Vec3& v = state.velocities[i];
    kinetic += 0.5 * (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
    for (std::size_t j = i + 1; j < state.size(); ++j) {
      double s2 = eps2;
      for (int k = 0; k < 3; ++k) s2 += std::pow(state.positions[i][k] - state.positions[j][k], 2);
      potential += state.charges[i] * state.charges[j] / std::sqrt(s2);
    }
  }
  return kinetic + potential;
}

Vec3 total_momentum(const ParticleState& state) {
  Vec3 p{0.0, 0.0, 0.0};
  for (const Vec3& v : state.velocities)
    for (int k = 0; k < 3; ++k) p[k] += v[k];
  return p;
}

ParticleState sample_initial(std::uint64_t seed, const SimulationConfig& cfg) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::bernoulli_distribution positive(0.5);
  ParticleState s;
  const std::size_t n = cfg.particles;
  s.positions.resize(n);
  s.velocities.resize(n);
  for (Vec3& p : s.positions)
    for (double& x : p) x = cfg.position_scale * normal(rng);
  for (Vec3& v : s.velocities)
    for (double& x : v) x = cfg.velocity_scale * normal(rng);
  for (std::size_t i = 0; i < n; ++i) s.charges.push_back(positive(rng) ? cfg.charge_magnitude : -cfg.charge_magnitude);
  return s;
}

std::optional<ParticleState> integrate(const ParticleState& start, const SimulationConfig& cfg) {
  ParticleState s = start;
  std::vector<Vec3> forces = coulomb_forces(s, cfg.eps_soft);
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    verlet(s, forces, cfg.dt, cfg.eps_soft);
    for (const Vec3& p : s.positions)
      for (double x : p)
        if (!(std::abs(x) <= cfg.blowup_limit)) return std::nullopt;
  }
  return s;
}

std::uint64_t resample_seed(std::uint64_t seed, std::size_t attempt) {
  return seed + (static_cast<std::uint64_t>(attempt) << 32);
}

TrajectoryRecord simulate_record(std::uint64_t seed, const SimulationConfig& cfg) {
  cfg.validate();
  for (std::size_t attempt = 0; attempt < cfg.max_resamples; ++attempt) {
    const std::uint64_t s = resample_seed(seed, attempt);
    const ParticleState start = sample_initial(s, cfg);
    const std::optional<ParticleState> end = integrate(start, cfg);
    if (!end) continue;
    TrajectoryRecord r;
    r.seed = s;
    if (attempt > 0) r.resampled_from = seed;
    r.charges = start.charges;
    r.p0 = start.positions;
    r.v0 = start.velocities;
    r.pT = end->positions;
    return r;
  }
  throw NumericError("seed " + std::to_string(seed) + ": every resample exceeded the blow-up limit");
}

MolecularSystem to_molecular_system(const TrajectoryRecord& record) {
  MolecularSystem sys;
  for (double c : record.charges) sys.types.push_back(c < 0.0 ? 0 : 1);
  sys.positions = record.p0;
  sys.velocities = record.v0;
  return sys;
}

std::string to_string(Split split) {
  switch (split) {
    case Split::kTrain: return "train";
    case Split::kValid: return "valid";
    case Split::kTest: return "test";
  }
  return "train";
}

Split parse_split(const std::string& text) {
  if (text == "train") return Split::kTrain;
  if (text == "valid") return Split::kValid;
  if (text == "test") return Split::kTest;
  throw ConfigError("unknown split '" + text + "' (expected train, valid or test)");
}

const std::vector<TrajectoryRecord>& records(const Dataset& data, Split split) {
  switch (split) {
    case Split::kTrain: return data.train;
    case Split::kValid: return data.valid;
    case Split::kTest: return data.test;
  }
  return data.train;
}

std::uint64_t split_seed(std::uint64_t base_seed, const SplitCounts& counts, Split split, std::size_t index) {
  std::uint64_t offset = 0;
  if (split != Split::kTrain) offset += counts.train;
  if (split == Split::kTest) offset += counts.valid;
  return base_seed + offset + index;
}

Dataset generate_dataset(const SplitCounts& counts, std::uint64_t base_seed, const SimulationConfig& cfg,
                         unsigned threads) {
  cfg.validate();
  Dataset data;
  data.sim = cfg;
  data.counts = counts;
  data.base_seed = base_seed;
  struct Job {
    Split split;
    std::size_t index;
  };
  std::vector<Job> jobs;
  for (Split s : {Split::kTrain, Split::kValid, Split::kTest}) {
    const std::size_t n = s == Split::kTrain ? counts.train : s == Split::kValid ? counts.valid : counts.test;
    for (std::size_t i = 0; i < n; ++i) jobs.push_back({s, i});
  }
  std::vector<TrajectoryRecord> out(jobs.size());
  std::vector<std::exception_ptr> errors(jobs.size());
  auto work = [&](std::size_t worker, std::size_t stride) {
    for (std::size_t j = worker; j < jobs.size(); j += stride) {
      try {
        out[j] = simulate_record(split_seed(base_seed, counts, jobs[j].split, jobs[j].index), cfg);
      } catch (...) {
        errors[j] = std::current_exception();
      }
    }
  };
  const std::size_t workers = std::max<std::size_t>(1, std::min<std::size_t>(threads, jobs.size()));
  if (workers == 1) {
    work(0, 1);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work, w, workers);
    for (std::thread& t : pool) t.join();
  }
  for (const std::exception_ptr& e : errors)
    if (e) std::rethrow_exception(e);
  for (std::size_t j = 0; j < jobs.size(); ++j) {
    auto& dest = jobs[j].split == Split::kTrain ? data.train : jobs[j].split == Split::kValid ? data.valid : data.test;
    dest.push_back(std::move(out[j]));
  }
  return data;
}

// ---------------------------------------------------------------------------

namespace {

using nlohmann::json;

json vectors_to_json(const std::vector<Vec3>& v) {
  json out = json::array();
  for (const Vec3& x : v) out.push_back({x[0], x[1], x[2]});
  return out;
}

std::vector<Vec3> vectors_from_json(const json& j, std::size_t n, const char* key) {
  if (!j.is_array() || j.size() != n) throw FormatError(std::string("'") + key + "' must list " + std::to_string(n) + " vectors");
  std::vector<Vec3> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const json& row = j[i];
    if (!row.is_array() || row.size() != 3) throw FormatError(std::string("'") + key + "' entries must be 3-vectors");
    for (int k = 0; k < 3; ++k) {
      if (!row[k].is_number()) throw FormatError(std::string("'") + key + "' holds a non-numeric value");
      out[i][k] = row[k].get<double>();
    }
  }
  return out;
}

}  // namespace

void write_dataset(const std::string& path, const Dataset& data) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write dataset '" + path + "'");
  const json header = {{"version", data.version},
                       {"n", data.sim.particles},
                       {"dt", data.sim.dt},
                       {"steps", data.sim.steps},
                       {"eps_soft", data.sim.eps_soft},
                       {"position_scale", data.sim.position_scale},
                       {"velocity_scale", data.sim.velocity_scale},
                       {"charge_magnitude", data.sim.charge_magnitude},
                       {"blowup_limit", data.sim.blowup_limit},
                       {"base_seed", data.base_seed},
                       {"counts", {{"train", data.counts.train}, {"valid", data.counts.valid}, {"test", data.counts.test}}}};
  out << header.dump() << '\n';
  for (Split s : {Split::kTrain, Split::kValid, Split::kTest}) {
    for (const TrajectoryRecord& r : records(data, s)) {
      json line = {{"split", to_string(s)}, {"seed", r.seed}};
      if (r.resampled_from) line["resampled_from"] = *r.resampled_from;
      line["charges"] = r.charges;
      line["p0"] = vectors_to_json(r.p0);
      line["v0"] = vectors_to_json(r.v0);
      line["pT"] = vectors_to_json(r.pT);
      out << line.dump() << '\n';
    }
  }
  if (!out) throw IoError("failed writing dataset '" + path + "'");
}

Dataset read_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open dataset '" + path + "'");
  std::string line;
  std::size_t line_no = 0;
  auto fail = [&](const std::string& what) {
    return FormatError(path + ":" + std::to_string(line_no) + ": " + what);
  };
  if (!std::getline(in, line)) throw FormatError(path + ": empty dataset file");
  ++line_no;
  Dataset data;
  try {
    const json h = json::parse(line);
    data.version = h.at("version").get<int>();
    if (data.version != 1) throw fail("unsupported dataset version " + std::to_string(data.version));
    data.sim.particles = h.at("n").get<std::size_t>();
    data.sim.dt = h.at("dt").get<double>();
    data.sim.steps = h.at("steps").get<std::size_t>();
    data.sim.eps_soft = h.at("eps_soft").get<double>();
    data.sim.position_scale = h.value("position_scale", data.sim.position_scale);
    data.sim.velocity_scale = h.value("velocity_scale", data.sim.velocity_scale);
    data.sim.charge_magnitude = h.value("charge_magnitude", data.sim.charge_magnitude);
    data.sim.blowup_limit = h.value("blowup_limit", data.sim.blowup_limit);
    data.base_seed = h.value("base_seed", std::uint64_t{0});
    const json& c = h.at("counts");
    data.counts = {c.at("train").get<std::size_t>(), c.at("valid").get<std::size_t>(), c.at("test").get<std::size_t>()};
  } catch (const json::exception& e) {
    throw fail(std::string("malformed header: ") + e.what());
  }
  const std::size_t n = data.sim.particles;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    TrajectoryRecord r;
    Split split;
    try {
      const json j = json::parse(line);
      split = parse_split(j.at("split").get<std::string>());
      r.seed = j.at("seed").get<std::uint64_t>();
      if (j.contains("resampled_from")) r.resampled_from = j["resampled_from"].get<std::uint64_t>();
      r.charges = j.at("charges").get<std::vector<double>>();
      if (r.charges.size() != n) throw FormatError("expected " + std::to_string(n) + " charges");
      r.p0 = vectors_from_json(j.at("p0"), n, "p0");
      r.v0 = vectors_from_json(j.at("v0"), n, "v0");
      r.pT = vectors_from_json(j.at("pT"), n, "pT");
    } catch (const json::exception& e) {
      throw fail(std::string("malformed record: ") + e.what());
    } catch (const FormatError& e) {
      throw fail(e.what());
    } catch (const ConfigError& e) {
      throw fail(e.what());
    }
    switch (split) {
      case Split::kTrain: data.train.push_back(std::move(r)); break;
      case Split::kValid: data.valid.push_back(std::move(r)); break;
      case Split::kTest: data.test.push_back(std::move(r)); break;
    }
  }
  if (data.train.size() != data.counts.train || data.valid.size() != data.counts.valid ||
      data.test.size() != data.counts.test) {
    throw FormatError(path + ": record counts do not match the header counts");
  }
  return data;
}

}  // namespace geomf
