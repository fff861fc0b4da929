#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <variant>
#include <vector>

namespace leanq::grids {

inline constexpr int kDefaultSearchT = 2048;
// Scale used for zero-range groups.
inline constexpr double kDegenerateScale = 1e-12;
// Spacing inserted between coincident levels.
inline constexpr double kLevelJitter = 1e-12;

inline int max_code(int bits) { return (1 << bits) - 1; }

// Round half to even. Relies on the default FE_TONEAREST rounding mode.
inline double round_half_even(double x) { return std::nearbyint(x); }

struct AffineGridParams {
  double scale = 1.0;
  int zero_point = 0;
  int bits = 4;

  // Throws std::invalid_argument unless scale > 0, 1 <= bits <= 8 and the
  // zero point is a valid code.
  void validate() const;
  friend bool operator==(const AffineGridParams&, const AffineGridParams&) = default;
};

struct NonUniformGrid {
  std::vector<double> levels;  // ascending, 2^bits entries
  int bits = 4;

  void validate() const;
  friend bool operator==(const NonUniformGrid&, const NonUniformGrid&) = default;
};

using Grid = std::variant<AffineGridParams, NonUniformGrid>;

struct Quantized {
  int code = 0;
  double value = 0.0;
};

// Dequantized value of w on an affine grid, written out so that the grid
// search, quant_aff and dequantization all share one floating-point path.
inline double affine_round(double w, double scale, double zero, double maxq) {
  const double code = std::clamp(round_half_even(w / scale) + zero, 0.0, maxq);
  return (code - zero) * scale;
}

inline double affine_dequant(int code, const AffineGridParams& g) {
  return (static_cast<double>(code) - static_cast<double>(g.zero_point)) * g.scale;
}

Quantized quant_aff(double w, const AffineGridParams& g);

// Nearest level; exact midpoints go to the lower index.
Quantized quant_nu(double w, const NonUniformGrid& g);

Quantized quantize(double w, const Grid& g);
double dequantize(int code, const Grid& g);

AffineGridParams minmax_affine(std::span<const double> w, int bits);

// 2^bits evenly spaced points over [min(w), max(w)].
std::vector<double> uniform_init(std::span<const double> w, int bits);

// D^2 sampling with the cluster weights multiplied into the probabilities.
std::vector<double> kmeanspp_init(std::span<const double> w, std::span<const double> cw,
                                  int bits, std::uint64_t seed);

// Makes sorted levels strictly increasing by nudging collisions upward.
void enforce_strictly_increasing(std::vector<double>& levels);

// Rescales by a power of two so the largest weight lies in [0.5, 1). The
// scaling is exact, so every objective is scaled exactly and argmins are
// unchanged; it only keeps the sums away from overflow.
std::vector<double> normalize_weights(std::span<const double> cw);

struct KMeansOptions {
  int max_iter = 100;
  double tol = 1e-6;
};

struct KMeansResult {
  NonUniformGrid grid;
  double objective = 0.0;      // weighted squared error, caller's weight units
  std::vector<double> trace;   // objective at init and after each iteration
  int iterations = 0;
};

// Lloyd iterations from the given initial levels. Empty clusters are reseeded
// at the point with the largest weighted squared error.
KMeansResult lloyd_kmeans(std::span<const double> w, std::span<const double> cw,
                          std::vector<double> init, int bits, const KMeansOptions& opts = {});

// Lloyd from uniform_init.
KMeansResult weighted_kmeans(std::span<const double> w, std::span<const double> cw, int bits,
                             const KMeansOptions& opts = {});

struct GridSearchConfig {
  int T = kDefaultSearchT;  // even, >= 2
  unsigned workers = 1;     // 0 = default_workers()

  void validate() const;
};

struct SearchOutcome {
  AffineGridParams params;
  int t_min = 0;
  int t_max = 0;
  double objective = 0.0;  // in normalized weight units
  bool fallback = false;   // zero-range input, min-max grid returned
};

// Exhaustive search over shrunk min-max ranges:
//   lo = min + t_min R/T, hi = max - t_max R/T, S = (hi - lo)/(2^b - 1),
//   Z = clamp(-round(lo/S)), t_min, t_max in [0, T/2).
// Minimizes sum cw_i (quant_aff(w_i) - w_i)^2. Ties go to the
// lexicographically smallest (t_min, t_max), so the result does not depend on
// how t_min is split across workers.
SearchOutcome affine_grid_search_detailed(std::span<const double> w,
                                          std::span<const double> cw, int bits,
                                          const GridSearchConfig& cfg = {});

AffineGridParams affine_grid_search(std::span<const double> w, std::span<const double> cw,
                                    int bits, const GridSearchConfig& cfg = {});

// One search per contiguous group of `group_width` entries, groups spread
// across cfg.workers; each group is searched serially.
std::vector<AffineGridParams> affine_grid_search_batch(std::span<const double> w,
                                                       std::span<const double> cw,
                                                       std::size_t group_width, int bits,
                                                       const GridSearchConfig& cfg = {});

double grid_objective(std::span<const double> w, std::span<const double> cw,
                      const AffineGridParams& g);
double grid_objective(std::span<const double> w, std::span<const double> cw,
                      const NonUniformGrid& g);
double grid_objective(std::span<const double> w, std::span<const double> cw, const Grid& g);

}  // namespace leanq::grids
