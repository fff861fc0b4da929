#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "leanq/calib.hpp"
#include "leanq/matrix.hpp"
#include "leanq/pack_io.hpp"
#include "leanq/quantizer.hpp"

namespace leanq::harness {

struct SyntheticLayerSpec {
  std::size_t rows = 32;
  std::size_t cols = 128;
  std::size_t tokens = 2048;
  double outlier_fraction = 0.05;
  double outlier_scale = 100.0;
  std::uint64_t seed = 0;

  // Throws std::invalid_argument.
  void validate() const;
  // cols > tokens leaves X X^T rank deficient before dampening.
  bool rank_deficient() const { return cols > tokens; }
};

struct SyntheticLayer {
  Matrix w;  // rows x cols
  Matrix x;  // cols x tokens
  std::vector<std::size_t> outlier_features;  // ascending
};

SyntheticLayer gen_synthetic_layer(const SyntheticLayerSpec& spec);

// ||W X - W_hat X||_F^2
double proxy_loss(const Matrix& w, const Matrix& w_hat, const Matrix& x);
double proxy_loss(const Matrix& w, const MatrixF& w_hat, const Matrix& x);

// One CSV line of a report.
struct ReportRow {
  std::string layer;
  std::string method;
  int bits = 0;
  double effective_bits = 0.0;
  std::size_t group_size = 0;  // 0 = row-wise
  double p = 0.0;
  int T = 0;
  double eps_total = 0.0;
  double proxy_before = 0.0;  // nearest rounding on the same grids
  double proxy_after = 0.0;
  double wall_ms = 0.0;
  std::uint64_t seed = 0;

  friend bool operator==(const ReportRow&, const ReportRow&) = default;
};

struct LayerReport {
  ReportRow row;
  std::vector<double> eps_per_step;
  double cluster_objective = 0.0;
  double max_drift = 0.0;
};

inline constexpr std::string_view kCsvHeader =
    "layer,method,bits,effective_bits,group_size,p,T,eps_total,proxy_before,proxy_after,wall_ms,"
    "seed";
inline constexpr std::string_view kStepsHeader = "layer,method,step,eps";

std::string format_row(const ReportRow& row);
ReportRow parse_row(std::string_view line);  // throws DataError
std::string format_report(const std::vector<LayerReport>& reports);
std::vector<ReportRow> parse_report(std::string_view text);
std::string format_steps(const std::vector<LayerReport>& reports);
// Writes <path> and <stem>_steps.csv next to it.
void write_report(const std::filesystem::path& path, const std::vector<LayerReport>& reports);
std::filesystem::path steps_path(const std::filesystem::path& report);

// Inputs for one layer: weights plus every calibration batch for it.
struct LayerInput {
  std::string name;
  Matrix w;
  Matrix x;  // batches concatenated along tokens
};

// Rank-2 model entries in file order, paired with calibration entries named
// <layer> or <layer>@<k> (concatenated in file order).
std::vector<LayerInput> load_layers(const io::TensorList& model, const io::TensorList& calib);

struct LayerRun {
  LayerReport report;
  io::PackedLayer packed;
};

// Hessian from x, then block quantization with cfg. Errors carry the layer name.
LayerRun quantize_layer(const LayerInput& in, const quant::QuantConfig& cfg,
                        std::string method, bool wall_clock = false);
// Same with a prebuilt Hessian (must match cfg.damp and cfg.p).
LayerRun quantize_layer(const LayerInput& in, const calib::HessianState& hs,
                        const quant::QuantConfig& cfg, std::string method,
                        bool wall_clock = false);

struct QuantizeJob {
  std::filesystem::path model;
  std::filesystem::path calib;
  quant::QuantConfig config;
  std::filesystem::path out;
  std::filesystem::path report;
  bool wall_clock = false;
};

std::vector<LayerReport> run_quantize(const QuantizeJob& job);

struct ExperimentSpec {
  std::optional<std::filesystem::path> model;
  std::optional<std::filesystem::path> calib;
  std::optional<SyntheticLayerSpec> synthetic;
  quant::QuantConfig config;
  std::vector<quant::GridType> methods;
  int trials = 1;
  std::uint64_t seed = 0;
  std::optional<std::filesystem::path> report;
  std::optional<std::filesystem::path> out;
  bool wall_clock = false;

  // Relative paths resolve against base_dir. Throws DataError on bad JSON.
  static ExperimentSpec from_json(std::string_view text,
                                  const std::filesystem::path& base_dir = {});
  static ExperimentSpec load(const std::filesystem::path& path);
  void validate() const;  // std::invalid_argument
};

// Synthetic trials (seed, seed+1, ...) or the layers of the model file.
std::vector<LayerInput> experiment_layers(const ExperimentSpec& spec);

std::vector<LayerReport> compare_grids(const ExperimentSpec& spec);

enum class AblationAxis { P, Init, T, Bits };
AblationAxis parse_axis(std::string_view name);
std::string_view to_string(AblationAxis a);

std::vector<double> ablation_p_values();    // 0, 2, 3, 4
std::vector<int> ablation_T_values();       // 64, 256, 2048
std::vector<int> ablation_bits_values();    // 2, 3, 4

std::vector<LayerReport> ablate(const ExperimentSpec& spec, AblationAxis axis);

}  // namespace leanq::harness
