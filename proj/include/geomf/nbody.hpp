#pragma once

// Charged-particle dynamics used to generate the position-forecasting task:
// softened Coulomb forces, velocity-Verlet integration, seeded sampling and
// newline-delimited JSON datasets.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "geomf/geometry.hpp"

namespace geomf {

struct SimulationConfig {
  std::size_t particles = 5;
  double dt = 1e-3;
  std::size_t steps = 1000;
  double eps_soft = 0.01;
  double position_scale = 1.0;
  double velocity_scale = 0.5;
  /// Charges are ±charge_magnitude; 0 gives free flight.
  double charge_magnitude = 1.0;
  /// Any |coordinate| above this during integration triggers a resample.
  double blowup_limit = 1e3;
  std::size_t max_resamples = 16;

  void validate() const;
};

struct ParticleState {
  std::vector<Vec3> positions;
  std::vector<Vec3> velocities;
  std::vector<double> charges;

  std::size_t size() const { return positions.size(); }
  /// Throws ValidationError on mismatched lengths or non-finite entries.
  void validate() const;
};

/// Fᵢ = Σ_{j≠i} cᵢcⱼ (rᵢ − rⱼ) / (‖rᵢ − rⱼ‖² + ε²)^{3/2}
std::vector<Vec3> coulomb_forces(const ParticleState& state, double eps_soft);

/// One velocity-Verlet step with unit masses.
ParticleState leapfrog_step(const ParticleState& state, double dt, double eps_soft);

/// ½Σ‖vᵢ‖² + Σ_{i<j} cᵢcⱼ / (‖rᵢ − rⱼ‖² + ε²)^{1/2}
double total_energy(const ParticleState& state, double eps_soft);
Vec3 total_momentum(const ParticleState& state);

ParticleState sample_initial(std::uint64_t seed, const SimulationConfig& cfg);

/// Integrates `cfg.steps` steps. Returns nullopt if a coordinate exceeds the
/// blow-up limit on the way.
std::optional<ParticleState> integrate(const ParticleState& start, const SimulationConfig& cfg);

struct TrajectoryRecord {
  std::uint64_t seed = 0;
  /// Set when the requested seed blew up and `seed` is its substitute.
  std::optional<std::uint64_t> resampled_from;
  std::vector<double> charges;
  std::vector<Vec3> p0, v0, pT;
};

/// Seed used for the k-th resample of `seed`.
std::uint64_t resample_seed(std::uint64_t seed, std::size_t attempt);

/// Samples and integrates, resampling on blow-up. Throws NumericError when
/// every attempt blows up.
TrajectoryRecord simulate_record(std::uint64_t seed, const SimulationConfig& cfg);

/// Charge −1 → type 0, +1 → type 1; velocities attached.
MolecularSystem to_molecular_system(const TrajectoryRecord& record);

struct SplitCounts {
  std::size_t train = 3000;
  std::size_t valid = 2000;
  std::size_t test = 2000;
};

struct Dataset {
  int version = 1;
  SimulationConfig sim;
  SplitCounts counts;
  std::uint64_t base_seed = 0;
  std::vector<TrajectoryRecord> train, valid, test;
};

enum class Split { kTrain, kValid, kTest };
std::string to_string(Split split);
Split parse_split(const std::string& text);
const std::vector<TrajectoryRecord>& records(const Dataset& data, Split split);

/// Requested seed of record `index` in `split`: consecutive, disjoint ranges
/// starting at base_seed in train, valid, test order.
std::uint64_t split_seed(std::uint64_t base_seed, const SplitCounts& counts, Split split, std::size_t index);

/// Simulates every split. Results are independent of `threads`.
Dataset generate_dataset(const SplitCounts& counts, std::uint64_t base_seed, const SimulationConfig& cfg,
                         unsigned threads = 1);

/// Header line then one record per line (train, valid, test order).
void write_dataset(const std::string& path, const Dataset& data);
/// Throws IoError when unreadable, FormatError on malformed content.
Dataset read_dataset(const std::string& path);

}  // namespace geomf
