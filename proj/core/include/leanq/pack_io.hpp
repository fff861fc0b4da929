#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "leanq/matrix.hpp"
#include "leanq/quantizer.hpp"

namespace leanq::io {

inline constexpr char kTensorMagic[8] = {'L', 'Q', 'T', 'E', 'N', 'S', 'R', '\0'};
inline constexpr std::uint32_t kTensorFileVersion = 1;

enum class DType : std::uint8_t { F32 = 0, F64 = 1, Bytes = 2 };

std::size_t dtype_size(DType t);

// One named tensor. `data` holds the little-endian payload.
struct Tensor {
  std::string name;
  std::vector<std::uint64_t> dims;
  DType dtype = DType::F32;
  std::vector<std::uint8_t> data;

  static Tensor f32(std::string name, std::vector<std::uint64_t> dims, std::span<const float> v);
  static Tensor f64(std::string name, std::vector<std::uint64_t> dims, std::span<const double> v);
  static Tensor bytes(std::string name, std::vector<std::uint64_t> dims,
                      std::vector<std::uint8_t> v);

  std::uint64_t element_count() const;
  std::vector<float> as_f32() const;   // f32 only
  std::vector<double> as_f64() const;  // f32 or f64, widened

  friend bool operator==(const Tensor&, const Tensor&) = default;
};

using TensorList = std::vector<Tensor>;

std::vector<std::uint8_t> serialize(const TensorList& entries);
TensorList parse(std::span<const std::uint8_t> buf);

void write_tensor_file(const std::filesystem::path& path, const TensorList& entries);
TensorList read_tensor_file(const std::filesystem::path& path);

const Tensor* find(const TensorList& entries, std::string_view name);

// Rank-2 f32/f64 tensor to a double matrix. Throws DataError otherwise.
Matrix to_matrix(const Tensor& t);
Tensor from_matrix(std::string name, const MatrixF& m);
Tensor from_matrix(std::string name, const Matrix& m);  // stored as f32

// Bytes per packed row: ceil(cols * bits / 8).
std::size_t row_bytes(std::size_t cols, int bits);

// LSB-first, row-major, every row starting on a byte boundary.
std::vector<std::uint8_t> pack_codes(std::span<const std::uint8_t> codes, std::size_t rows,
                                     std::size_t cols, int bits);
std::vector<std::uint8_t> unpack_codes(std::span<const std::uint8_t> bytes, int bits,
                                       std::size_t rows, std::size_t cols);

struct PackedLayer {
  int bits = 4;
  std::size_t rows = 0;
  std::size_t cols = 0;
  quant::GridKind kind = quant::GridKind::Affine;
  std::size_t group_size = 0;  // 0 = row-wise
  std::vector<std::uint8_t> code_bytes;
  std::vector<std::uint16_t> scales;  // binary16, rows * groups
  std::vector<std::uint16_t> zeros;   // rows * groups
  std::vector<std::uint16_t> levels;  // binary16, rows * 2^bits

  std::size_t group_width() const { return group_size == 0 ? cols : group_size; }
  std::size_t groups_per_row() const { return cols == 0 ? 0 : cols / group_width(); }
  // Throws DataError on inconsistent sizes.
  void validate() const;

  friend bool operator==(const PackedLayer&, const PackedLayer&) = default;
};

PackedLayer pack_layer(const quant::LayerQuantResult& res);

MatrixF dequantize(const PackedLayer& layer);

// y = dequantize(layer) * x, dequantizing one row at a time.
std::vector<float> quantized_matvec(const PackedLayer& layer, std::span<const float> x);

// Code bits plus grid metadata bits, per weight. Affine metadata is 32 bits
// per group (16-bit scale, 16-bit zero); non-uniform is 2^bits 16-bit levels
// per row.
double effective_bits(const PackedLayer& layer);
double effective_bits(int bits, std::size_t rows, std::size_t cols, quant::GridKind kind,
                      std::size_t group_size);

// A packed layer as tensor entries: <name>.qmeta, .codes, and .scales/.zeros
// or .levels.
void append_layer(TensorList& out, const std::string& name, const PackedLayer& layer);
PackedLayer extract_layer(const TensorList& entries, const std::string& name);
// Layer names in file order, taken from the .qmeta entries.
std::vector<std::string> packed_layer_names(const TensorList& entries);

}  // namespace leanq::io
