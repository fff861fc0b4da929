#include "leanq/harness.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "leanq/error.hpp"
#include "leanq/random.hpp"

namespace leanq::harness {

namespace {

constexpr std::uint64_t kStreamX = 1;
constexpr std::uint64_t kStreamW = 2;
constexpr std::uint64_t kStreamOutliers = 3;

// Runs fn, re-throwing errors with the layer name prepended (same type).
template <class F>
auto with_layer(const std::string& name, F&& fn) {
  const std::string pre = "layer '" + name + "': ";
  try {
    return fn();
  } catch (const NumericalError& e) {
    throw NumericalError(pre + e.what());
  } catch (const DataError& e) {
    throw DataError(pre + e.what());
  } catch (const std::invalid_argument& e) {
    throw DataError(pre + e.what());
  }
}

bool is_calib_name_for(std::string_view entry, std::string_view layer) {
  if (entry == layer) return true;
  if (entry.size() <= layer.size() + 1 || !entry.starts_with(layer) ||
      entry[layer.size()] != '@') {
    return false;
  }
  auto idx = entry.substr(layer.size() + 1);
  return std::all_of(idx.begin(), idx.end(), [](char c) { return c >= '0' && c <= '9'; });
}

calib::HessianAccumulator accumulate(const LayerInput& in) {
  calib::HessianAccumulator acc;
  acc.accumulate(in.x);
  return acc;
}

}  // namespace

void SyntheticLayerSpec::validate() const {
  if (rows == 0 || cols == 0 || tokens == 0) {
    throw std::invalid_argument("synthetic layer needs rows, cols and tokens >= 1");
  }
  if (!(outlier_fraction >= 0.0 && outlier_fraction <= 1.0)) {
    throw std::invalid_argument("outlier fraction must be in [0, 1]");
  }
  if (!(outlier_scale >= 1.0)) throw std::invalid_argument("outlier scale must be >= 1");
}

SyntheticLayer gen_synthetic_layer(const SyntheticLayerSpec& spec) {
  spec.validate();
  SyntheticLayer out;
  out.x = Matrix(spec.cols, spec.tokens);
  Rng rx(spec.seed, kStreamX);
  for (double& v : out.x.flat()) v = rx.normal();

  out.w = Matrix(spec.rows, spec.cols);
  Rng rw(spec.seed, kStreamW);
  for (double& v : out.w.flat()) v = rw.normal();

  const auto n_out = static_cast<std::size_t>(
      std::ceil(spec.outlier_fraction * static_cast<double>(spec.cols)));
  std::vector<std::size_t> idx(spec.cols);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng ro(spec.seed, kStreamOutliers);
  for (std::size_t i = 0; i < n_out; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(ro.below(spec.cols - i));
    std::swap(idx[i], idx[j]);
  }
  out.outlier_features.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_out));
  std::sort(out.outlier_features.begin(), out.outlier_features.end());
  for (std::size_t f : out.outlier_features) {
    for (double& v : out.x.row(f)) v /= spec.outlier_scale;
  }
  return out;
}

double proxy_loss(const Matrix& w, const Matrix& w_hat, const Matrix& x) {
  if (w.rows() != w_hat.rows() || w.cols() != w_hat.cols() || w.cols() != x.rows()) {
    throw DataError("proxy_loss shape mismatch");
  }
  const std::size_t tokens = x.cols();
  std::vector<double> d(w.cols());
  std::vector<double> acc(tokens);
  double total = 0.0;
  for (std::size_t r = 0; r < w.rows(); ++r) {
    for (std::size_t c = 0; c < w.cols(); ++c) d[c] = w(r, c) - w_hat(r, c);
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t c = 0; c < w.cols(); ++c) {
      if (d[c] == 0.0) continue;
      const auto xr = x.row(c);
      for (std::size_t t = 0; t < tokens; ++t) acc[t] += d[c] * xr[t];
    }
    for (double a : acc) total += a * a;
  }
  return total;
}

double proxy_loss(const Matrix& w, const MatrixF& w_hat, const Matrix& x) {
  return proxy_loss(w, w_hat.cast<double>(), x);
}

void require_finite(const Matrix& m, const std::string& layer, const std::string& entry) {
  for (double v : m.flat()) {
    if (!std::isfinite(v)) {
      throw DataError("layer '" + layer + "': non-finite value in entry '" + entry + "'");
    }
  }
}

std::vector<LayerInput> load_layers(const io::TensorList& model, const io::TensorList& calib) {
  std::vector<LayerInput> layers;
  for (const auto& t : model) {
    if (t.dims.size() != 2) continue;
    LayerInput in;
    in.name = t.name;
    in.w = with_layer(t.name, [&] { return io::to_matrix(t); });
    require_finite(in.w, t.name, t.name);
    std::vector<Matrix> batches;
    std::size_t tokens = 0;
    for (const auto& c : calib) {
      if (!is_calib_name_for(c.name, t.name)) continue;
      Matrix x = with_layer(t.name, [&] { return io::to_matrix(c); });
      if (x.rows() != in.w.cols()) {
        throw DataError("layer '" + t.name + "': calibration entry '" + c.name + "' has " +
                        std::to_string(x.rows()) + " features, weights have " +
                        std::to_string(in.w.cols()) + " columns");
      }
      require_finite(x, t.name, c.name);
      tokens += x.cols();
      batches.push_back(std::move(x));
    }
    if (tokens == 0) throw DataError("layer '" + t.name + "': no calibration data");
    in.x = Matrix(in.w.cols(), tokens);
    std::size_t off = 0;
    for (const auto& b : batches) {
      for (std::size_t f = 0; f < b.rows(); ++f) {
        std::copy(b.row(f).begin(), b.row(f).end(), in.x.row(f).begin() + static_cast<std::ptrdiff_t>(off));
      }
      off += b.cols();
    }
    layers.push_back(std::move(in));
  }
  return layers;
}

LayerRun quantize_layer(const LayerInput& in, const quant::QuantConfig& cfg, std::string method,
                        bool wall_clock) {
  auto hs = with_layer(in.name, [&] { return calib::finalize(accumulate(in), cfg.damp, cfg.p); });
  return quantize_layer(in, hs, cfg, std::move(method), wall_clock);
}

LayerRun quantize_layer(const LayerInput& in, const calib::HessianState& hs,
                        const quant::QuantConfig& cfg, std::string method, bool wall_clock) {
  return with_layer(in.name, [&] {
    const auto t0 = std::chrono::steady_clock::now();
    auto res = quant::quantize_layer_block(in.w, hs, cfg);
    auto packed = io::pack_layer(res);
    const auto t1 = std::chrono::steady_clock::now();

    LayerRun run;
    auto& r = run.report.row;
    r.layer = in.name;
    r.method = std::move(method);
    r.bits = cfg.bits;
    r.effective_bits = io::effective_bits(packed);
    r.group_size = packed.group_size;
    r.p = cfg.p;
    r.T = cfg.search_T;
    r.eps_total = res.eps_total;
    r.proxy_before = proxy_loss(in.w, quant::round_to_grids(in.w, res.grids), in.x);
    r.proxy_after = proxy_loss(in.w, res.w_hat, in.x);
    r.wall_ms =
        wall_clock ? std::chrono::duration<double, std::milli>(t1 - t0).count() : 0.0;
    r.seed = cfg.seed;
    run.report.eps_per_step = std::move(res.eps_per_step);
    run.report.cluster_objective = res.grids.cluster_objective;
    run.report.max_drift = res.max_drift;
    run.packed = std::move(packed);
    return run;
  });
}

std::vector<LayerReport> run_quantize(const QuantizeJob& job) {
  job.config.validate();
  const auto layers = load_layers(io::read_tensor_file(job.model), io::read_tensor_file(job.calib));
  io::TensorList packed;
  std::vector<LayerReport> reports;
  const std::string method(quant::to_string(job.config.grid));
  for (const auto& in : layers) {
    auto run = quantize_layer(in, job.config, method, job.wall_clock);
    io::append_layer(packed, in.name, run.packed);
    reports.push_back(std::move(run.report));
  }
  io::write_tensor_file(job.out, packed);
  write_report(job.report, reports);
  return reports;
}

// ---- experiment specs ----

namespace {

using nlohmann::json;

void check_keys(const json& j, std::initializer_list<std::string_view> allowed,
                const char* where) {
  if (!j.is_object()) throw DataError(std::string(where) + " must be a JSON object");
  for (const auto& [k, v] : j.items()) {
    if (std::find(allowed.begin(), allowed.end(), k) == allowed.end()) {
      throw DataError(std::string("unknown key '") + k + "' in " + where);
    }
  }
}

quant::GridInit parse_init(const std::string& s) {
  if (s == "uniform") return quant::GridInit::Uniform;
  if (s == "kmeans++") return quant::GridInit::KMeansPlusPlus;
  throw DataError("unknown init '" + s + "'");
}

quant::QuantConfig parse_config(const json& j) {
  check_keys(j,
             {"bits", "grid", "group_size", "block_size", "damp", "p", "T", "act_order", "init",
              "kmeans_max_iter", "kmeans_tol", "workers"},
             "config");
  quant::QuantConfig c;
  c.bits = j.value("bits", c.bits);
  if (j.contains("grid")) c.grid = quant::parse_grid_type(j.at("grid").get<std::string>());
  if (j.contains("group_size") && !j.at("group_size").is_null()) {
    c.group_size = j.at("group_size").get<std::size_t>();
  }
  c.block_size = j.value("block_size", c.block_size);
  c.damp = j.value("damp", c.damp);
  c.p = j.value("p", c.p);
  c.search_T = j.value("T", c.search_T);
  c.act_order = j.value("act_order", c.act_order);
  if (j.contains("init")) c.init = parse_init(j.at("init").get<std::string>());
  c.kmeans.max_iter = j.value("kmeans_max_iter", c.kmeans.max_iter);
  c.kmeans.tol = j.value("kmeans_tol", c.kmeans.tol);
  c.workers = j.value("workers", c.workers);
  return c;
}

SyntheticLayerSpec parse_synthetic(const json& j) {
  check_keys(j, {"rows", "cols", "tokens", "outlier_fraction", "outlier_scale"}, "synthetic");
  SyntheticLayerSpec s;
  s.rows = j.value("rows", s.rows);
  s.cols = j.value("cols", s.cols);
  s.tokens = j.value("tokens", s.tokens);
  s.outlier_fraction = j.value("outlier_fraction", s.outlier_fraction);
  s.outlier_scale = j.value("outlier_scale", s.outlier_scale);
  return s;
}

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
  std::filesystem::path path(p);
  return path.is_absolute() || base.empty() ? path : base / path;
}

}  // namespace

ExperimentSpec ExperimentSpec::from_json(std::string_view text,
                                         const std::filesystem::path& base_dir) {
  ExperimentSpec s;
  try {
    const json j = json::parse(text);
    check_keys(j,
               {"model", "calib", "synthetic", "config", "methods", "trials", "seed", "report",
                "out", "wall_clock"},
               "experiment spec");
    if (j.contains("model")) s.model = resolve(base_dir, j.at("model").get<std::string>());
    if (j.contains("calib")) s.calib = resolve(base_dir, j.at("calib").get<std::string>());
    if (j.contains("synthetic")) s.synthetic = parse_synthetic(j.at("synthetic"));
    if (j.contains("config")) s.config = parse_config(j.at("config"));
    if (j.contains("methods")) {
      for (const auto& m : j.at("methods")) {
        s.methods.push_back(quant::parse_grid_type(m.get<std::string>()));
      }
    }
    s.trials = j.value("trials", s.trials);
    s.seed = j.value("seed", s.seed);
    if (j.contains("report")) s.report = resolve(base_dir, j.at("report").get<std::string>());
    if (j.contains("out")) s.out = resolve(base_dir, j.at("out").get<std::string>());
    s.wall_clock = j.value("wall_clock", false);
  } catch (const json::exception& e) {
    throw DataError(std::string("bad experiment spec: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw DataError(std::string("bad experiment spec: ") + e.what());
  }
  s.config.seed = s.seed;
  if (s.methods.empty()) s.methods.push_back(s.config.grid);
  return s;
}

ExperimentSpec ExperimentSpec::load(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open '" + path.string() + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return from_json(ss.str(), path.parent_path());
}

void ExperimentSpec::validate() const {
  if (trials < 1) throw std::invalid_argument("trials must be >= 1");
  if (synthetic && (model || calib)) {
    throw std::invalid_argument("give either a synthetic block or model/calib paths, not both");
  }
  if (!synthetic && !(model && calib)) {
    throw std::invalid_argument("experiment needs model and calib paths or a synthetic block");
  }
  if (synthetic) synthetic->validate();
  config.validate();
}

std::vector<LayerInput> experiment_layers(const ExperimentSpec& spec) {
  spec.validate();
  std::vector<LayerInput> layers;
  if (!spec.synthetic) {
    return load_layers(io::read_tensor_file(*spec.model), io::read_tensor_file(*spec.calib));
  }
  for (int t = 0; t < spec.trials; ++t) {
    auto s = *spec.synthetic;
    s.seed = spec.seed + static_cast<std::uint64_t>(t);
    auto gen = gen_synthetic_layer(s);
    layers.push_back({"trial" + std::to_string(t), std::move(gen.w), std::move(gen.x)});
  }
  return layers;
}

namespace {

// Synthetic trial i was generated from seed + i; its config carries that seed.
quant::QuantConfig trial_config(const ExperimentSpec& spec, std::size_t i) {
  auto cfg = spec.config;
  if (spec.synthetic) cfg.seed = spec.seed + i;
  return cfg;
}

// Non-uniform grids are always per row.
quant::QuantConfig with_grid(quant::QuantConfig cfg, quant::GridType g) {
  cfg.grid = g;
  if (g == quant::GridType::LeanNonUniform) cfg.group_size.reset();
  return cfg;
}

void write_outputs(const ExperimentSpec& spec, const std::vector<LayerReport>& reports,
                   const io::TensorList& packed) {
  if (spec.report) write_report(*spec.report, reports);
  if (spec.out) io::write_tensor_file(*spec.out, packed);
}

}  // namespace

std::vector<LayerReport> compare_grids(const ExperimentSpec& spec) {
  if (spec.methods.size() < 2) throw std::invalid_argument("compare needs at least two methods");
  const auto layers = experiment_layers(spec);
  std::vector<LayerReport> reports;
  io::TensorList packed;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& in = layers[i];
    const auto hs = with_layer(in.name, [&] {
      return calib::finalize(accumulate(in), spec.config.damp, spec.config.p);
    });
    for (auto m : spec.methods) {
      auto cfg = with_grid(trial_config(spec, i), m);
      std::string label(quant::to_string(m));
      auto run = quantize_layer(in, hs, cfg, label, spec.wall_clock);
      if (spec.out) io::append_layer(packed, in.name + "/" + label, run.packed);
      reports.push_back(std::move(run.report));
    }
  }
  write_outputs(spec, reports, packed);
  return reports;
}

AblationAxis parse_axis(std::string_view name) {
  if (name == "p") return AblationAxis::P;
  if (name == "init") return AblationAxis::Init;
  if (name == "T") return AblationAxis::T;
  if (name == "bits") return AblationAxis::Bits;
  throw std::invalid_argument("unknown ablation axis '" + std::string(name) + "'");
}

std::string_view to_string(AblationAxis a) {
  switch (a) {
    case AblationAxis::P: return "p";
    case AblationAxis::Init: return "init";
    case AblationAxis::T: return "T";
    case AblationAxis::Bits: return "bits";
  }
  return "unknown";
}

std::vector<double> ablation_p_values() { return {0.0, 2.0, 3.0, 4.0}; }
std::vector<int> ablation_T_values() { return {64, 256, 2048}; }
std::vector<int> ablation_bits_values() { return {2, 3, 4}; }

std::vector<LayerReport> ablate(const ExperimentSpec& spec, AblationAxis axis) {
  std::vector<quant::GridType> lean;
  for (auto m : spec.methods) {
    if (m != quant::GridType::MinMaxAffine) lean.push_back(m);
  }
  if (axis == AblationAxis::P && lean.empty()) {
    throw std::invalid_argument("p ablation needs a lean grid in methods");
  }
  const auto layers = experiment_layers(spec);
  std::vector<LayerReport> reports;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& in = layers[i];
    const auto base = trial_config(spec, i);
    const auto acc = with_layer(in.name, [&] { return accumulate(in); });
    auto run = [&](quant::QuantConfig cfg, std::string label) {
      cfg.validate_for(in.w.cols());
      const auto hs =
          with_layer(in.name, [&] { return calib::finalize(acc, cfg.damp, cfg.p); });
      reports.push_back(quantize_layer(in, hs, cfg, std::move(label), spec.wall_clock).report);
    };
    switch (axis) {
      case AblationAxis::P:
        for (auto m : lean) {
          for (double p : ablation_p_values()) {
            auto cfg = with_grid(base, m);
            cfg.p = p;
            run(cfg, std::string(quant::to_string(m)));
          }
        }
        break;
      case AblationAxis::Init:
        for (auto init : {quant::GridInit::KMeansPlusPlus, quant::GridInit::Uniform}) {
          auto cfg = with_grid(base, quant::GridType::LeanNonUniform);
          cfg.init = init;
          run(cfg, init == quant::GridInit::Uniform ? "lean-nu+uniform" : "lean-nu+kmeans++");
        }
        break;
      case AblationAxis::T:
        for (int t : ablation_T_values()) {
          auto cfg = with_grid(base, quant::GridType::LeanAffine);
          cfg.search_T = t;
          run(cfg, "lean-affine");
        }
        break;
      case AblationAxis::Bits:
        for (auto m : spec.methods) {
          for (int b : ablation_bits_values()) {
            auto cfg = with_grid(base, m);
            cfg.bits = b;
            run(cfg, std::string(quant::to_string(m)));
          }
        }
        break;
    }
  }
  write_outputs(spec, reports, {});
  return reports;
}

}  // namespace leanq::harness
