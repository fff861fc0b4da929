#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "leanq/calib.hpp"
#include "leanq/grids.hpp"
#include "leanq/linalg.hpp"
#include "leanq/matrix.hpp"

namespace leanq::quant {

enum class GridType { MinMaxAffine, LeanAffine, LeanNonUniform };
enum class GridInit { Uniform, KMeansPlusPlus };

// CLI spellings: "minmax", "lean-affine", "lean-nu".
std::string_view to_string(GridType t);
GridType parse_grid_type(std::string_view name);

struct QuantConfig {
  int bits = 4;
  GridType grid = GridType::LeanAffine;
  std::optional<std::size_t> group_size;  // absent: one grid per row
  std::size_t block_size = 128;
  double damp = calib::kDefaultDamping;
  double p = 4.0;
  int search_T = grids::kDefaultSearchT;
  bool act_order = false;
  std::uint64_t seed = 0;
  GridInit init = GridInit::Uniform;
  grids::KMeansOptions kmeans;
  unsigned workers = 0;  // 0 = default_workers(); never changes results

  // Throws std::invalid_argument on an unusable configuration.
  void validate() const;
  void validate_for(std::size_t cols) const;
};

enum class GridKind : std::uint8_t { Affine = 0, NonUniform = 1 };

// Grids for a whole layer: one affine grid per (row, group) or one
// non-uniform codebook per row. Parameters are held at storage precision
// (binary16), so quantizing against them and dequantizing packed codes give
// bit-identical values.
struct LayerGrids {
  GridKind kind = GridKind::Affine;
  int bits = 4;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t group_size = 0;  // == cols when row-wise
  std::vector<grids::AffineGridParams> affine;  // rows * groups_per_row()
  std::vector<grids::NonUniformGrid> nonuniform;  // rows
  double cluster_objective = 0.0;  // sum over grids of the learning objective

  std::size_t groups_per_row() const { return group_size == 0 ? 0 : cols / group_size; }
  grids::Quantized quantize(std::size_t row, std::size_t col, double w) const;
  double dequantize(std::size_t row, std::size_t col, int code) const;
};

// Rounds grid parameters to binary16 and keeps them valid (positive scales,
// strictly increasing levels).
void snap_to_storage(LayerGrids& g);

struct LayerQuantResult {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> codes;  // rows x cols, row-major, original column order
  LayerGrids grids;
  MatrixF w_hat;
  std::vector<double> eps_per_step;  // sum over rows of the loss error at each step
  double eps_total = 0.0;
  double max_drift = 0.0;             // largest |w - w_original| seen at quantization time
  std::vector<std::size_t> order;     // columns in the order they were quantized

  std::uint8_t code(std::size_t r, std::size_t c) const { return codes[r * cols + c]; }
};

// 1/2 (q - w)^2 / hinv_ii. Throws NumericalError if hinv_ii <= 0.
double loss_error(double w, double q, double hinv_ii);

// ((q - w) / Hinv[i,i]) * Hinv[:,i]; adding it to the row sets entry i to q
// and optimally compensates the others.
std::vector<double> optimal_perturbation(double w, double q, const linalg::SymMatrix& hinv,
                                         std::size_t i);

// Columns by decreasing Hessian diagonal (stable).
std::vector<std::size_t> act_order_permutation(const calib::HessianState& hs);

// Learns every grid of the layer up front from W and the clustering weights.
LayerGrids learn_grids(const Matrix& w, const calib::HessianState& hs, const QuantConfig& cfg);

// Block-wise quantization with error propagation through the upper Cholesky
// factor of the inverse Hessian.
LayerQuantResult quantize_layer_block(const Matrix& w, const calib::HessianState& hs,
                                      const QuantConfig& cfg);
LayerQuantResult quantize_layer_block(const Matrix& w, const calib::HessianState& hs,
                                      const QuantConfig& cfg, const LayerGrids& grids);

// Column-at-a-time reference: explicit perturbation plus inverse downdate.
// O(cols^3); meant for checking the block path on small layers.
LayerQuantResult reference_quantize(const Matrix& w, const calib::HessianState& hs,
                                        const QuantConfig& cfg);
LayerQuantResult reference_quantize(const Matrix& w, const calib::HessianState& hs,
                                        const QuantConfig& cfg, const LayerGrids& grids);

struct ExactRowResult {
  std::vector<double> w_hat;
  std::vector<int> codes;
  std::vector<std::size_t> order;
  std::vector<double> eps_trace;
};

// Greedy exact quantization of one row: at every step quantize the remaining
// weight with the smallest loss error (lowest index on ties), compensate the
// rest and downdate the inverse Hessian in place.
ExactRowResult quantize_row_exact(std::span<const double> w, const linalg::SymMatrix& hinv,
                                  const grids::Grid& grid);

// quantize_row_exact applied to every row with grids learned from cfg
// (row-wise grids only).
LayerQuantResult quantize_layer_exact(const Matrix& w, const calib::HessianState& hs,
                                      const QuantConfig& cfg);

// Plain nearest-grid rounding with no error feedback.
MatrixF round_to_grids(const Matrix& w, const LayerGrids& grids);

}  // namespace leanq::quant
