#include "geomf/model.hpp"

#include <cmath>
#include <random>

namespace geomf {

std::string to_string(SymmetryMode mode) { return mode == SymmetryMode::kE3 ? "e3" : "se3"; }

SymmetryMode parse_symmetry_mode(const std::string& text) {
  if (text == "se3") return SymmetryMode::kSE3;
  if (text == "e3") return SymmetryMode::kE3;
  throw ConfigError("unknown symmetry mode '" + text + "' (expected se3 or e3)");
}

namespace {

constexpr std::pair<Mutation, const char*> kMutationNames[] = {
    {Mutation::kNone, "none"},
    {Mutation::kGeluOnEqu, "gelu-on-equ"},
    {Mutation::kUncenteredPositions, "uncentered-positions"},
    {Mutation::kSpatialHeadSplit, "spatial-head-split"},
    {Mutation::kRawCoordinateBias, "raw-coordinate-bias"},
    {Mutation::kCorruptProductBackward, "corrupt-product-backward"},
};

}  // namespace

std::string to_string(Mutation m) {
  for (const auto& [value, name] : kMutationNames) {
    if (value == m) return name;
  }
  return "none";
}

Mutation parse_mutation(const std::string& text) {
  for (const auto& [value, name] : kMutationNames) {
    if (text == name) return value;
  }
  throw ConfigError("unknown mutation '" + text + "'");
}

void ModelConfig::validate() const {
  if (width == 0 || heads == 0 || ffn_width == 0 || kernels == 0 || vocab == 0) {
    throw ConfigError("model sizes must be positive");
  }
  if (width % heads != 0) {
    throw ConfigError("width " + std::to_string(width) + " is not divisible by " + std::to_string(heads) + " heads");
  }
  if (use_velocities && width % 2 != 0) {
    throw ConfigError("width must be even when velocity channels are enabled, got " + std::to_string(width));
  }
  for (auto [name, rate] : {std::pair<const char*, double>{"dropout_embedding", dropout_embedding},
                            {"dropout_attention", dropout_attention},
                            {"dropout_activation", dropout_activation},
                            {"dropout_hidden", dropout_hidden},
                            {"drop_path_rate", drop_path_rate}}) {
    if (!(rate >= 0.0 && rate < 1.0)) throw ConfigError(std::string(name) + " must lie in [0, 1)");
  }
}

// ---------------------------------------------------------------------------

namespace {

template <typename Params, typename Fn>
void visit_all(Params& p, Fn&& fn) {
  auto basis = [&](const std::string& prefix, auto& b) {
    fn(prefix + ".mu", b.mu);
    fn(prefix + ".sigma", b.sigma);
    fn(prefix + ".gamma", b.gamma);
    fn(prefix + ".beta", b.beta);
  };
  fn("embedding", p.embedding);
  basis("input.pos_basis", p.pos_basis);
  fn("input.pos_proj", p.pos_proj);
  if (p.vel_proj.defined()) {
    basis("input.vel_basis", p.vel_basis);
    fn("input.vel_proj", p.vel_proj);
  }
  basis("bias.basis", p.pair_basis);
  fn("bias.w1", p.bias_w1);
  fn("bias.w2", p.bias_w2);
  for (std::size_t l = 0; l < p.blocks.size(); ++l) {
    auto& b = p.blocks[l];
    const std::string pre = "blocks." + std::to_string(l) + ".";
    static const char* kStages[3] = {"a", "b", "c"};
    for (int s = 0; s < 3; ++s) {
      fn(pre + "inv_ln_" + kStages[s] + ".gamma", b.inv_ln_gamma[s]);
      fn(pre + "inv_ln_" + kStages[s] + ".beta", b.inv_ln_beta[s]);
      fn(pre + "equ_ln_" + kStages[s] + ".gamma", b.equ_ln_gamma[s]);
    }
    auto self = [&](const std::string& name, auto& a) {
      fn(pre + name + ".wq", a.wq);
      fn(pre + name + ".wk", a.wk);
      fn(pre + name + ".wv", a.wv);
      fn(pre + name + ".wo", a.wo);
    };
    auto cross = [&](const std::string& name, auto& a) {
      fn(pre + name + ".wq", a.wq);
      fn(pre + name + ".wk1", a.wk1);
      fn(pre + name + ".wk2", a.wk2);
      fn(pre + name + ".wv1", a.wv1);
      fn(pre + name + ".wv2", a.wv2);
      fn(pre + name + ".wo", a.wo);
    };
    self("inv_self", b.inv_self);
    self("equ_self", b.equ_self);
    cross("inv_cross", b.inv_cross);
    cross("equ_cross", b.equ_cross);
    fn(pre + "inv_ffn.w1", b.ffn_w1);
    fn(pre + "inv_ffn.w2", b.ffn_w2);
    fn(pre + "equ_ffn.w_up", b.equ_up);
    fn(pre + "equ_ffn.w_gate", b.equ_gate);
    fn(pre + "equ_ffn.w_down", b.equ_down);
  }
  fn("head.equ_w", p.head_w);
  fn("head.inv_w1", p.inv_head_w1);
  fn("head.inv_b1", p.inv_head_b1);
  fn("head.inv_w2", p.inv_head_w2);
  fn("head.inv_b2", p.inv_head_b2);
}

}  // namespace

void ModelParams::visit(const std::function<void(const std::string&, Tensor&)>& fn) { visit_all(*this, fn); }

void ModelParams::visit(const std::function<void(const std::string&, const Tensor&)>& fn) const {
  visit_all(*this, fn);
}

std::size_t ModelParams::count() const {
  std::size_t n = 0;
  visit([&](const std::string&, const Tensor& t) { n += t.size(); });
  return n;
}

ModelParams ModelParams::bind(Tape& tape) const {
  ModelParams out = *this;
  out.visit([&](const std::string&, Tensor& t) { t = tape.watch(t); });
  return out;
}

ModelParams ModelParams::clone() const {
  ModelParams out = *this;
  out.visit([](const std::string&, Tensor& t) { t = t.clone(); });
  return out;
}

namespace {

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

Tensor gaussian_matrix(std::size_t rows, std::size_t cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, stddev);
  std::vector<double> v(rows * cols);
  for (double& x : v) x = normal(rng);
  return Tensor({rows, cols}, std::move(v));
}

Tensor projection(std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
  return gaussian_matrix(fan_in, fan_out, 1.0 / std::sqrt(static_cast<double>(fan_in)), rng);
}

}  // namespace

ModelParams init_params(const ModelConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(mix_seed(cfg.seed, 0));
  const std::size_t d = cfg.width, r = cfg.ffn_width, k = cfg.kernels, v = cfg.vocab;
  ModelParams p;
  p.embedding = gaussian_matrix(v, d, 1.0, rng);
  const std::size_t pos_width = cfg.use_velocities ? d / 2 : d;
  p.pos_basis = init_gaussian_basis(k, v, mix_seed(cfg.seed, 1));
  p.pos_proj = projection(k, pos_width, rng);
  if (cfg.use_velocities) {
    p.vel_basis = init_gaussian_basis(k, v, mix_seed(cfg.seed, 2));
    p.vel_proj = projection(k, d - pos_width, rng);
  }
  p.pair_basis = init_gaussian_basis(k, v * v, mix_seed(cfg.seed, 3));
  p.bias_w1 = projection(k, k, rng);
  p.bias_w2 = projection(k, 1, rng);
  p.blocks.resize(cfg.layers);
  for (BlockParams& b : p.blocks) {
    for (int s = 0; s < 3; ++s) {
      b.inv_ln_gamma[s] = Tensor::full({d}, 1.0);
      b.inv_ln_beta[s] = Tensor({d});
      b.equ_ln_gamma[s] = Tensor::full({d}, 1.0);
    }
    b.inv_self = {projection(d, d, rng), projection(d, d, rng), projection(d, d, rng), Tensor({d, d})};
    b.equ_self = {projection(d, d, rng), projection(d, d, rng), projection(d, d, rng), Tensor({d, d})};
    b.inv_cross = {projection(d, d, rng), projection(d, d, rng), projection(d, d, rng),
                   projection(d, d, rng), projection(d, d, rng), Tensor({d, d})};
    b.equ_cross = {projection(d, d, rng), projection(d, d, rng), projection(d, d, rng),
                   projection(d, d, rng), projection(d, d, rng), Tensor({d, d})};
    b.ffn_w1 = projection(d, r, rng);
    b.ffn_w2 = projection(r, d, rng);
    b.equ_up = projection(d, r, rng);
    b.equ_gate = projection(d, r, rng);
    b.equ_down = projection(r, d, rng);
  }
  p.head_w = Tensor({d, 1});
  p.inv_head_w1 = projection(d, d, rng);
  p.inv_head_b1 = Tensor({d});
  p.inv_head_w2 = projection(d, 1, rng);
  p.inv_head_b2 = Tensor({1});
  return p;
}

void randomize_output_projections(ModelParams& params, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (BlockParams& b : params.blocks) {
    for (Tensor* w : {&b.inv_self.wo, &b.equ_self.wo, &b.inv_cross.wo, &b.equ_cross.wo}) {
      *w = projection(w->dim(0), w->dim(1), rng);
    }
  }
  params.head_w = projection(params.head_w.dim(0), 1, rng);
}

Model make_model(const ModelConfig& cfg) { return {cfg, init_params(cfg)}; }

// ---------------------------------------------------------------------------

void validate_batch(const ModelConfig& cfg, std::span<const MolecularSystem> batch) {
  if (batch.empty()) throw ValidationError("empty batch");
  const std::size_t n = batch.front().size();
  for (const MolecularSystem& sys : batch) {
    sys.validate(cfg.vocab);
    if (sys.size() != n) throw ValidationError("systems in one batch must have equal particle counts");
    if (cfg.use_velocities && !sys.velocities) throw ValidationError("model expects velocities but a system has none");
  }
}

Tensor stack_positions(std::span<const MolecularSystem> batch) {
  const std::size_t n = batch.front().size();
  std::vector<double> v;
  v.reserve(batch.size() * n * 3);
  for (const MolecularSystem& sys : batch)
    for (const Vec3& r : sys.positions) v.insert(v.end(), r.begin(), r.end());
  return Tensor({batch.size(), n, 3}, std::move(v));
}

namespace {

std::vector<std::size_t> flat_types(std::span<const MolecularSystem> batch) {
  std::vector<std::size_t> ids;
  for (const MolecularSystem& sys : batch) ids.insert(ids.end(), sys.types.begin(), sys.types.end());
  return ids;
}

// r̂ g(‖r‖)ᵀ for every atom of the batch: [B×n×3×width].
Tensor direction_times_basis(std::span<const Vec3> vectors, std::span<const std::size_t> types,
                             const GaussianBasisParams& basis, const Tensor& proj, std::size_t batch,
                             std::size_t n) {
  const std::size_t m = vectors.size();
  const std::size_t width = proj.dim(1);
  std::vector<double> norms(m);
  std::vector<double> dirs(m * 3 * width);
  for (std::size_t i = 0; i < m; ++i) {
    const double len = norm(vectors[i]);
    norms[i] = len;
    for (std::size_t s = 0; s < 3; ++s) {
      const double u = len > 0.0 ? vectors[i][s] / len : 0.0;
      std::fill_n(dirs.begin() + static_cast<std::ptrdiff_t>((i * 3 + s) * width), width, u);
    }
  }
  const Tensor gamma = reshape(gather_rows(basis.gamma, types), {m});
  const Tensor beta = reshape(gather_rows(basis.beta, types), {m});
  const Tensor psi = gaussian_basis(Tensor({m}, std::move(norms)), gamma, beta, basis.mu, basis.sigma);
  const Tensor g = reshape(linear(psi, proj), {batch, n, 1, width});
  return mul(Tensor({batch, n, 3, width}, std::move(dirs)), g);
}

}  // namespace

StreamPair input_layer(const ModelConfig& cfg, const ModelParams& params, std::span<const MolecularSystem> batch) {
  validate_batch(cfg, batch);
  const std::size_t b = batch.size(), n = batch.front().size(), d = cfg.width;
  const std::vector<std::size_t> types = flat_types(batch);
  StreamPair out;
  out.z_inv = reshape(gather_rows(params.embedding, types), {b, n, d});

  std::vector<Vec3> positions;
  for (const MolecularSystem& sys : batch) {
    if (cfg.mutation == Mutation::kUncenteredPositions) {
      positions.insert(positions.end(), sys.positions.begin(), sys.positions.end());
    } else {
      auto c = mean_center(sys.positions);
      positions.insert(positions.end(), c.begin(), c.end());
    }
  }
  Tensor z_equ = direction_times_basis(positions, types, params.pos_basis, params.pos_proj, b, n);
  if (cfg.use_velocities) {
    std::vector<Vec3> velocities;
    for (const MolecularSystem& sys : batch) velocities.insert(velocities.end(), sys.velocities->begin(), sys.velocities->end());
    Tensor z_vel = direction_times_basis(velocities, types, params.vel_basis, params.vel_proj, b, n);
    z_equ = concat({z_equ, z_vel}, 3);
  }
  if (cfg.mutation == Mutation::kGeluOnEqu) z_equ = gelu(z_equ);
  out.z_equ = z_equ;
  return out;
}

Tensor compute_structural_bias(const ModelConfig& cfg, const ModelParams& params,
                               std::span<const MolecularSystem> batch) {
  if (!cfg.ablation.structural_bias) return {};
  const std::size_t b = batch.size(), n = batch.front().size();
  std::vector<double> dist;
  std::vector<std::size_t> pairs;
  dist.reserve(b * n * n);
  pairs.reserve(b * n * n);
  for (const MolecularSystem& sys : batch) {
    if (cfg.mutation == Mutation::kRawCoordinateBias) {
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) dist.push_back(std::abs(sys.positions[i][0] - sys.positions[j][0]));
    } else {
      auto dm = pairwise_distances(sys.positions);
      dist.insert(dist.end(), dm.begin(), dm.end());
    }
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) pairs.push_back(type_pair_id(sys.types[i], sys.types[j], cfg.vocab));
  }
  return structural_bias(Tensor({b, n, n}, std::move(dist)), pairs, params.pair_basis, params.bias_w1,
                         params.bias_w2);
}

namespace {

Tensor maybe_inv_ln(const ModelConfig& cfg, const Tensor& z, const BlockParams& b, int stage) {
  return cfg.ablation.inv_ln ? inv_ln(z, b.inv_ln_gamma[stage], b.inv_ln_beta[stage]) : z;
}

Tensor maybe_equ_ln(const ModelConfig& cfg, const Tensor& z, const BlockParams& b, int stage) {
  return cfg.ablation.equ_ln ? equ_ln(z, b.equ_ln_gamma[stage]) : z;
}

// Residual update z + branch with hidden dropout and optional stochastic depth.
Tensor residual(const Tensor& z, Tensor branch, const BlockDropout& dropout) {
  Shape channel_mask = branch.shape();
  if (branch.rank() == 4) channel_mask[2] = 1;  // one draw per equivariant channel
  if (dropout.hidden) branch = dropout.hidden->apply(branch, channel_mask);
  if (dropout.path && dropout.path->active()) {
    Shape sample_mask(branch.rank(), 1);
    sample_mask[0] = branch.dim(0);
    branch = dropout.path->apply(branch, sample_mask);
  }
  return add(z, branch);
}

Tensor bias_if(bool enabled, const Tensor& bias) { return enabled ? bias : Tensor(); }

}  // namespace

StreamPair geomformer_block(const ModelConfig& cfg, const BlockParams& block, const StreamPair& in, const Tensor& bias,
                            const BlockDropout& dropout) {
  const AblationFlags& ab = cfg.ablation;
  AttentionOptions opts;
  opts.heads = cfg.heads;
  opts.center_equ_inputs = cfg.mode == SymmetryMode::kE3;
  opts.spatial_head_split = cfg.mutation == Mutation::kSpatialHeadSplit;
  opts.corrupt_product_backward = cfg.mutation == Mutation::kCorruptProductBackward;
  opts.dropout = dropout.attention;

  Tensor zi = in.z_inv, ze = in.z_equ;
  {
    const Tensor ai = maybe_inv_ln(cfg, zi, block, 0);
    const Tensor ae = maybe_equ_ln(cfg, ze, block, 0);
    if (ab.inv_self) zi = residual(zi, inv_self_attn(ai, block.inv_self, bias_if(ab.bias_inv_self, bias), opts), dropout);
    if (ab.equ_self) ze = residual(ze, equ_self_attn(ae, block.equ_self, bias_if(ab.bias_equ_self, bias), opts), dropout);
  }
  {
    const Tensor bi = maybe_inv_ln(cfg, zi, block, 1);
    const Tensor be = maybe_equ_ln(cfg, ze, block, 1);
    if (ab.inv_cross) {
      zi = residual(zi, inv_cross_attn(bi, be, block.inv_cross, bias_if(ab.bias_inv_cross, bias), opts), dropout);
    }
    if (ab.equ_cross) {
      ze = residual(ze, equ_cross_attn(be, bi, block.equ_cross, bias_if(ab.bias_equ_cross, bias), opts), dropout);
    }
  }
  {
    const Tensor ci = maybe_inv_ln(cfg, zi, block, 2);
    const Tensor ce = maybe_equ_ln(cfg, ze, block, 2);
    if (ab.inv_ffn) zi = residual(zi, inv_ffn(ci, block.ffn_w1, block.ffn_w2, dropout.activation), dropout);
    if (ab.equ_ffn) {
      ze = residual(ze,
                    equ_ffn(ce, ci, block.equ_up, block.equ_gate, block.equ_down, opts.center_equ_inputs,
                            opts.corrupt_product_backward, dropout.activation),
                    dropout);
    }
  }
  return {zi, ze};
}

StreamPair forward(const ModelConfig& cfg, const ModelParams& params, std::span<const MolecularSystem> batch,
                   const ForwardContext& ctx) {
  cfg.validate();
  auto rate = [&](double p) { return ctx.training ? p : 0.0; };
  StreamPair z = input_layer(cfg, params, batch);
  Dropout embedding(rate(cfg.dropout_embedding), mix_seed(ctx.seed, 100));
  if (embedding.active()) {
    z.z_inv = embedding.apply(z.z_inv);
    Shape mask = z.z_equ.shape();
    mask[2] = 1;
    z.z_equ = embedding.apply(z.z_equ, mask);
  }
  const Tensor bias = compute_structural_bias(cfg, params, batch);
  for (std::size_t l = 0; l < params.blocks.size(); ++l) {
    Dropout attention(rate(cfg.dropout_attention), mix_seed(ctx.seed, 200 + 4 * l));
    Dropout activation(rate(cfg.dropout_activation), mix_seed(ctx.seed, 201 + 4 * l));
    Dropout hidden(rate(cfg.dropout_hidden), mix_seed(ctx.seed, 202 + 4 * l));
    Dropout path(cfg.drop_path ? rate(cfg.drop_path_rate) : 0.0, mix_seed(ctx.seed, 203 + 4 * l));
    BlockDropout bd;
    if (attention.active()) bd.attention = &attention;
    if (activation.active()) bd.activation = &activation;
    if (hidden.active()) bd.hidden = &hidden;
    if (path.active()) bd.path = &path;
    z = geomformer_block(cfg, params.blocks[l], z, bias, bd);
  }
  return z;
}

Tensor invariant_head(const ModelParams& params, const Tensor& z_inv) {
  const Tensor pooled = mean(z_inv, 1);
  const Tensor h = gelu(add(linear(pooled, params.inv_head_w1), params.inv_head_b1));
  const Tensor out = add(linear(h, params.inv_head_w2), params.inv_head_b2);
  return reshape(out, {z_inv.dim(0)});
}

Tensor equivariant_head(const ModelParams& params, const Tensor& z_equ, const Tensor& p0) {
  const Tensor delta = reshape(linear(z_equ, params.head_w), {z_equ.dim(0), z_equ.dim(1), 3});
  return add(p0, delta);
}

Tensor predict_positions(const ModelConfig& cfg, const ModelParams& params, std::span<const MolecularSystem> batch,
                         const ForwardContext& ctx) {
  const StreamPair z = forward(cfg, params, batch, ctx);
  return equivariant_head(params, z.z_equ, stack_positions(batch));
}

}  // namespace geomf
