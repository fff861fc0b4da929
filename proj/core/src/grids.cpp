#include "leanq/grids.hpp"

#include <limits>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>

#include "leanq/parallel.hpp"
#include "leanq/random.hpp"

namespace leanq::grids {

namespace {

constexpr std::uint64_t kKmeansppStream = 0x6b6d65616e73ULL;

void check_bits(int bits) {
  if (bits < 1 || bits > 8) {
    throw std::invalid_argument("bit width must be in [1, 8], got " + std::to_string(bits));
  }
}

void check_weights(std::span<const double> w, std::span<const double> cw) {
  if (w.empty()) throw std::invalid_argument("weight vector is empty");
  if (w.size() != cw.size()) {
    throw std::invalid_argument("weights (" + std::to_string(w.size()) +
                                ") and cluster weights (" + std::to_string(cw.size()) +
                                ") differ in length");
  }
  for (double c : cw) {
    if (!(c > 0.0) || !std::isfinite(c)) {
      throw std::invalid_argument("cluster weights must be positive and finite");
    }
  }
}

std::pair<double, double> min_max(std::span<const double> w) {
  const auto [lo, hi] = std::minmax_element(w.begin(), w.end());
  return {*lo, *hi};
}

// Index of the nearest level in a sorted vector; midpoints go low.
std::size_t nearest_index(double w, const std::vector<double>& levels) {
  const auto it = std::upper_bound(levels.begin(), levels.end(), w);
  if (it == levels.begin()) return 0;
  const std::size_t hi = static_cast<std::size_t>(it - levels.begin());
  if (hi == levels.size()) return hi - 1;
  const double below = w - levels[hi - 1];
  const double above = levels[hi] - w;
  return below <= above ? hi - 1 : hi;
}

double nu_objective(std::span<const double> w, std::span<const double> cw,
                    const std::vector<double>& levels) {
  double total = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double e = levels[nearest_index(w[i], levels)] - w[i];
    total += cw[i] * e * e;
  }
  return total;
}

struct Candidate {
  double err = std::numeric_limits<double>::infinity();
  int t_min = -1;
  int t_max = -1;
  double scale = 0.0;
  int zero = 0;

  bool better_than(const Candidate& o) const {
    if (err != o.err) return err < o.err;
    if (t_min != o.t_min) return t_min < o.t_min;
    return t_max < o.t_max;
  }
};

// Relative slack on the pruning test; far above the reordering error of the
// bound sum, so a pruned candidate can never be the index-order optimum.
constexpr double kPruneSlack = 1e-10;

// Scans t_min in [tmin_begin, tmin_end) against every t_max. A candidate is
// abandoned once a partial sum, taken in decreasing order of
// ncw * (w - mean)^2 so that heavy terms come first, exceeds the running best.
// Survivors are scored by the plain index-order sum.
Candidate search_range(std::span<const double> w, std::span<const double> ncw, int bits,
                       int T, double wmin, double wmax, int tmin_begin, int tmin_end) {
  const double range = wmax - wmin;
  const double step = range / T;
  const double maxq = max_code(bits);
  const int half = T / 2;
  const std::size_t n = w.size();

  double mean = 0.0;
  for (double v : w) mean += v;
  mean /= static_cast<double>(n);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<double> key(n);
  for (std::size_t i = 0; i < n; ++i) key[i] = ncw[i] * (w[i] - mean) * (w[i] - mean);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return key[a] > key[b]; });
  std::vector<double> ws(n), cs(n);
  for (std::size_t k = 0; k < n; ++k) {
    ws[k] = w[order[k]];
    cs[k] = ncw[order[k]];
  }

  Candidate best;
  for (int tmin = tmin_begin; tmin < tmin_end; ++tmin) {
    const double lo = wmin + tmin * step;
    for (int tmax = 0; tmax < half; ++tmax) {
      const double hi = wmax - tmax * step;
      const double scale = (hi - lo) / maxq;
      if (!(scale > 0.0)) continue;
      const double zero = std::clamp(-round_half_even(lo / scale), 0.0, maxq);
      if (best.t_min >= 0) {
        const double limit = best.err * (1.0 + kPruneSlack);
        double bound = 0.0;
        bool pruned = false;
        for (std::size_t k = 0; k < n; ++k) {
          const double e = affine_round(ws[k], scale, zero, maxq) - ws[k];
          bound += cs[k] * e * e;
          if (bound > limit) {
            pruned = true;
            break;
          }
        }
        if (pruned) continue;
      }
      double err = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double e = affine_round(w[i], scale, zero, maxq) - w[i];
        err += ncw[i] * e * e;
      }
      if (err < best.err) best = Candidate{err, tmin, tmax, scale, static_cast<int>(zero)};
    }
  }
  return best;
}

}  // namespace

void AffineGridParams::validate() const {
  check_bits(bits);
  if (!(scale > 0.0) || !std::isfinite(scale)) {
    throw std::invalid_argument("affine scale must be positive and finite");
  }
  if (zero_point < 0 || zero_point > max_code(bits)) {
    throw std::invalid_argument("affine zero point out of range");
  }
}

void NonUniformGrid::validate() const {
  check_bits(bits);
  if (levels.size() != (std::size_t{1} << bits)) {
    throw std::invalid_argument("non-uniform grid must have 2^bits levels");
  }
  for (std::size_t i = 1; i < levels.size(); ++i) {
    if (!(levels[i] > levels[i - 1])) {
      throw std::invalid_argument("non-uniform grid levels must be strictly increasing");
    }
  }
}

void GridSearchConfig::validate() const {
  if (T < 2 || T % 2 != 0) {
    throw std::invalid_argument("search granularity T must be even and >= 2");
  }
}

Quantized quant_aff(double w, const AffineGridParams& g) {
  const double maxq = max_code(g.bits);
  const double zero = g.zero_point;
  const double code = std::clamp(round_half_even(w / g.scale) + zero, 0.0, maxq);
  return {static_cast<int>(code), (code - zero) * g.scale};
}

Quantized quant_nu(double w, const NonUniformGrid& g) {
  const std::size_t idx = nearest_index(w, g.levels);
  return {static_cast<int>(idx), g.levels[idx]};
}

Quantized quantize(double w, const Grid& g) {
  return std::visit(
      [w](const auto& grid) {
        using G = std::decay_t<decltype(grid)>;
        if constexpr (std::is_same_v<G, AffineGridParams>) {
          return quant_aff(w, grid);
        } else {
          return quant_nu(w, grid);
        }
      },
      g);
}

double dequantize(int code, const Grid& g) {
  if (const auto* a = std::get_if<AffineGridParams>(&g)) return affine_dequant(code, *a);
  return std::get<NonUniformGrid>(g).levels.at(static_cast<std::size_t>(code));
}

AffineGridParams minmax_affine(std::span<const double> w, int bits) {
  check_bits(bits);
  if (w.empty()) throw std::invalid_argument("weight vector is empty");
  const auto [lo, hi] = min_max(w);
  if (!(hi > lo)) return {kDegenerateScale, 0, bits};
  const double maxq = max_code(bits);
  const double scale = (hi - lo) / maxq;
  const double zero = std::clamp(-round_half_even(lo / scale), 0.0, maxq);
  return {scale, static_cast<int>(zero), bits};
}

void enforce_strictly_increasing(std::vector<double>& levels) {
  for (std::size_t i = 1; i < levels.size(); ++i) {
    if (!(levels[i] > levels[i - 1])) {
      double bumped = levels[i - 1] + kLevelJitter;
      if (!(bumped > levels[i - 1])) {
        bumped = std::nextafter(levels[i - 1], std::numeric_limits<double>::infinity());
      }
      levels[i] = bumped;
    }
  }
}

std::vector<double> uniform_init(std::span<const double> w, int bits) {
  check_bits(bits);
  if (w.empty()) throw std::invalid_argument("weight vector is empty");
  const auto [lo, hi] = min_max(w);
  const std::size_t k = std::size_t{1} << bits;
  std::vector<double> levels(k);
  if (!(hi > lo)) {
    for (std::size_t t = 0; t < k; ++t) levels[t] = lo + static_cast<double>(t) * kLevelJitter;
  } else {
    const double step = (hi - lo) / static_cast<double>(k - 1);
    for (std::size_t t = 0; t < k; ++t) levels[t] = lo + step * static_cast<double>(t);
  }
  enforce_strictly_increasing(levels);
  return levels;
}

namespace {

// e such that max(cw) * 2^-e lies in [0.5, 1).
int normalization_exponent(std::span<const double> cw) {
  double largest = 0.0;
  for (double c : cw) largest = std::max(largest, c);
  int exp = 0;
  if (largest > 0.0) std::frexp(largest, &exp);
  return exp;
}

}  // namespace

std::vector<double> normalize_weights(std::span<const double> cw) {
  const int exp = normalization_exponent(cw);
  std::vector<double> out(cw.begin(), cw.end());
  for (double& c : out) c = std::ldexp(c, -exp);
  return out;
}

std::vector<double> kmeanspp_init(std::span<const double> w, std::span<const double> cw,
                                  int bits, std::uint64_t seed) {
  check_bits(bits);
  check_weights(w, cw);
  const auto ncw = normalize_weights(cw);
  const std::size_t k = std::size_t{1} << bits;
  Rng rng(seed, kKmeansppStream);

  auto sample = [&](const std::vector<double>& mass) -> std::optional<std::size_t> {
    const double total = std::accumulate(mass.begin(), mass.end(), 0.0);
    if (!(total > 0.0)) return std::nullopt;
    const double target = rng.uniform() * total;
    double run = 0.0;
    for (std::size_t i = 0; i < mass.size(); ++i) {
      run += mass[i];
      if (run > target) return i;
    }
    for (std::size_t i = mass.size(); i-- > 0;) {
      if (mass[i] > 0.0) return i;
    }
    return std::nullopt;
  };

  std::vector<double> centers;
  centers.reserve(k);
  centers.push_back(w[*sample(ncw)]);
  std::vector<double> dist2(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double d = w[i] - centers[0];
    dist2[i] = d * d;
  }
  std::vector<double> mass(w.size());
  while (centers.size() < k) {
    for (std::size_t i = 0; i < w.size(); ++i) mass[i] = ncw[i] * dist2[i];
    const auto pick = sample(mass);
    if (!pick) break;  // every point already coincides with a center
    const double c = w[*pick];
    centers.push_back(c);
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double d = w[i] - c;
      dist2[i] = std::min(dist2[i], d * d);
    }
  }
  std::sort(centers.begin(), centers.end());
  while (centers.size() < k) centers.push_back(centers.back());
  enforce_strictly_increasing(centers);
  return centers;
}

KMeansResult lloyd_kmeans(std::span<const double> w, std::span<const double> cw,
                          std::vector<double> init, int bits, const KMeansOptions& opts) {
  check_bits(bits);
  check_weights(w, cw);
  const std::size_t k = std::size_t{1} << bits;
  if (init.size() != k) throw std::invalid_argument("initial levels must have 2^bits entries");
  const auto ncw = normalize_weights(cw);
  const double unscale = std::ldexp(1.0, normalization_exponent(cw));

  std::vector<double> levels = std::move(init);
  std::sort(levels.begin(), levels.end());
  enforce_strictly_increasing(levels);

  KMeansResult result;
  double prev = nu_objective(w, ncw, levels);
  result.trace.push_back(prev * unscale);

  std::vector<std::size_t> assign(w.size());
  std::vector<double> sum_w(k), sum_wx(k), err(w.size());
  for (int it = 0; it < opts.max_iter && prev > 0.0; ++it) {
    std::fill(sum_w.begin(), sum_w.end(), 0.0);
    std::fill(sum_wx.begin(), sum_wx.end(), 0.0);
    for (std::size_t i = 0; i < w.size(); ++i) {
      assign[i] = nearest_index(w[i], levels);
      sum_w[assign[i]] += ncw[i];
      sum_wx[assign[i]] += ncw[i] * w[i];
    }
    std::vector<double> next = levels;
    for (std::size_t c = 0; c < k; ++c) {
      if (sum_w[c] > 0.0) next[c] = sum_wx[c] / sum_w[c];
    }
    // Empty clusters: move to the worst-served point.
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double e = w[i] - next[assign[i]];
      err[i] = ncw[i] * e * e;
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (sum_w[c] > 0.0) continue;
      const auto worst = std::max_element(err.begin(), err.end());
      if (!(*worst > 0.0)) break;
      const auto idx = static_cast<std::size_t>(worst - err.begin());
      next[c] = w[idx];
      err[idx] = 0.0;
    }
    std::sort(next.begin(), next.end());
    enforce_strictly_increasing(next);

    const double cur = nu_objective(w, ncw, next);
    // Rounding can undo an exact-arithmetic decrease near convergence; stop instead.
    if (cur > prev) break;
    levels = std::move(next);
    result.trace.push_back(cur * unscale);
    result.iterations = it + 1;
    const bool converged = prev - cur <= opts.tol * prev;
    prev = cur;
    if (converged) break;
  }
  result.grid = NonUniformGrid{std::move(levels), bits};
  result.objective = grid_objective(w, cw, result.grid);
  return result;
}

KMeansResult weighted_kmeans(std::span<const double> w, std::span<const double> cw, int bits,
                             const KMeansOptions& opts) {
  check_weights(w, cw);
  return lloyd_kmeans(w, cw, uniform_init(w, bits), bits, opts);
}

SearchOutcome affine_grid_search_detailed(std::span<const double> w,
                                          std::span<const double> cw, int bits,
                                          const GridSearchConfig& cfg) {
  check_bits(bits);
  check_weights(w, cw);
  cfg.validate();
  const auto [lo, hi] = min_max(w);
  if (!(hi > lo)) {
    const auto params = minmax_affine(w, bits);
    return {params, 0, 0, 0.0, true};
  }
  const auto ncw = normalize_weights(cw);
  const int half = cfg.T / 2;
  const unsigned workers =
      std::min<unsigned>(resolve_workers(cfg.workers), static_cast<unsigned>(half));

  std::vector<Candidate> partial(workers);
  parallel_for(workers, workers, [&](std::size_t wi) {
    const int begin = static_cast<int>(static_cast<std::size_t>(half) * wi / workers);
    const int end = static_cast<int>(static_cast<std::size_t>(half) * (wi + 1) / workers);
    partial[wi] = search_range(w, ncw, bits, cfg.T, lo, hi, begin, end);
  });
  Candidate best;
  for (const auto& c : partial) {
    if (c.t_min >= 0 && c.better_than(best)) best = c;
  }
  if (best.t_min < 0) {
    // Unreachable for hi > lo: t_min + t_max <= T - 2 keeps every scale positive.
    return {minmax_affine(w, bits), 0, 0, 0.0, true};
  }
  return {AffineGridParams{best.scale, best.zero, bits}, best.t_min, best.t_max, best.err,
          false};
}

AffineGridParams affine_grid_search(std::span<const double> w, std::span<const double> cw,
                                    int bits, const GridSearchConfig& cfg) {
  return affine_grid_search_detailed(w, cw, bits, cfg).params;
}

std::vector<AffineGridParams> affine_grid_search_batch(std::span<const double> w,
                                                       std::span<const double> cw,
                                                       std::size_t group_width, int bits,
                                                       const GridSearchConfig& cfg) {
  if (group_width == 0 || w.size() % group_width != 0) {
    throw std::invalid_argument("group width must divide the weight count");
  }
  if (w.size() != cw.size()) throw std::invalid_argument("weights and cluster weights differ in length");
  const std::size_t groups = w.size() / group_width;
  std::vector<AffineGridParams> out(groups);
  GridSearchConfig serial = cfg;
  serial.workers = 1;
  parallel_for(groups, cfg.workers, [&](std::size_t g) {
    out[g] = affine_grid_search(w.subspan(g * group_width, group_width),
                                cw.subspan(g * group_width, group_width), bits, serial);
  });
  return out;
}

double grid_objective(std::span<const double> w, std::span<const double> cw,
                      const AffineGridParams& g) {
  if (w.size() != cw.size()) throw std::invalid_argument("length mismatch in grid_objective");
  const double maxq = max_code(g.bits);
  const double zero = g.zero_point;
  double total = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double e = affine_round(w[i], g.scale, zero, maxq) - w[i];
    total += cw[i] * e * e;
  }
  return total;
}

double grid_objective(std::span<const double> w, std::span<const double> cw,
                      const NonUniformGrid& g) {
  if (w.size() != cw.size()) throw std::invalid_argument("length mismatch in grid_objective");
  return nu_objective(w, cw, g.levels);
}

double grid_objective(std::span<const double> w, std::span<const double> cw, const Grid& g) {
  return std::visit([&](const auto& grid) { return grid_objective(w, cw, grid); }, g);
}

}  // namespace leanq::grids
