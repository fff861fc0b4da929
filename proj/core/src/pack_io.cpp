#include "leanq/pack_io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <set>
#include <stdexcept>

#include "leanq/error.hpp"
#include "leanq/half.hpp"

namespace leanq::io {

namespace {

template <class U>
void put_le(std::vector<std::uint8_t>& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
}

template <class U>
U get_le(const std::uint8_t* p) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(p[i]) << (8 * i);
  return v;
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> buf) : buf_(buf) {}

  std::span<const std::uint8_t> take(std::uint64_t n, const char* what) {
    if (n > buf_.size() - pos_) {
      throw DataError(std::string("truncated tensor file (") + what + ")");
    }
    auto s = buf_.subspan(pos_, static_cast<std::size_t>(n));
    pos_ += static_cast<std::size_t>(n);
    return s;
  }
  template <class U>
  U get(const char* what) {
    return get_le<U>(take(sizeof(U), what).data());
  }
  bool done() const { return pos_ == buf_.size(); }

 private:
  std::span<const std::uint8_t> buf_;
  std::size_t pos_ = 0;
};

std::uint64_t checked_count(const std::vector<std::uint64_t>& dims) {
  std::uint64_t n = 1;
  for (auto d : dims) {
    if (d != 0 && n > std::numeric_limits<std::uint64_t>::max() / d) {
      throw DataError("tensor dims overflow");
    }
    n *= d;
  }
  return n;
}

std::vector<std::uint8_t> u16_bytes(const std::vector<std::uint16_t>& v) {
  std::vector<std::uint8_t> out;
  out.reserve(v.size() * 2);
  for (auto x : v) put_le(out, x);
  return out;
}

std::vector<std::uint16_t> u16_from(const Tensor& t) {
  if (t.dtype != DType::Bytes || t.data.size() % 2 != 0) {
    throw DataError("entry '" + t.name + "' is not a 16-bit byte array");
  }
  std::vector<std::uint16_t> out(t.data.size() / 2);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = get_le<std::uint16_t>(&t.data[2 * i]);
  return out;
}

const Tensor& require(const TensorList& entries, const std::string& name) {
  const Tensor* t = find(entries, name);
  if (!t) throw DataError("missing entry '" + name + "'");
  return *t;
}

constexpr std::string_view kMetaSuffix = ".qmeta";

}  // namespace

std::size_t dtype_size(DType t) {
  switch (t) {
    case DType::F32: return 4;
    case DType::F64: return 8;
    case DType::Bytes: return 1;
  }
  throw DataError("unknown dtype");
}

Tensor Tensor::f32(std::string name, std::vector<std::uint64_t> dims, std::span<const float> v) {
  Tensor t{std::move(name), std::move(dims), DType::F32, {}};
  if (checked_count(t.dims) != v.size()) throw DataError("tensor dims do not match data size");
  t.data.reserve(v.size() * 4);
  for (float x : v) put_le(t.data, std::bit_cast<std::uint32_t>(x));
  return t;
}

Tensor Tensor::f64(std::string name, std::vector<std::uint64_t> dims, std::span<const double> v) {
  Tensor t{std::move(name), std::move(dims), DType::F64, {}};
  if (checked_count(t.dims) != v.size()) throw DataError("tensor dims do not match data size");
  t.data.reserve(v.size() * 8);
  for (double x : v) put_le(t.data, std::bit_cast<std::uint64_t>(x));
  return t;
}

Tensor Tensor::bytes(std::string name, std::vector<std::uint64_t> dims,
                     std::vector<std::uint8_t> v) {
  Tensor t{std::move(name), std::move(dims), DType::Bytes, std::move(v)};
  if (checked_count(t.dims) != t.data.size()) {
    throw DataError("tensor dims do not match data size");
  }
  return t;
}

std::uint64_t Tensor::element_count() const { return checked_count(dims); }

std::vector<float> Tensor::as_f32() const {
  if (dtype != DType::F32) throw DataError("entry '" + name + "' is not f32");
  std::vector<float> out(data.size() / 4);
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = std::bit_cast<float>(get_le<std::uint32_t>(&data[4 * i]));
  }
  return out;
}

std::vector<double> Tensor::as_f64() const {
  if (dtype == DType::F32) {
    auto f = as_f32();
    return {f.begin(), f.end()};
  }
  if (dtype != DType::F64) throw DataError("entry '" + name + "' is not floating point");
  std::vector<double> out(data.size() / 8);
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = std::bit_cast<double>(get_le<std::uint64_t>(&data[8 * i]));
  }
  return out;
}

std::vector<std::uint8_t> serialize(const TensorList& entries) {
  std::set<std::string_view> seen;
  std::vector<std::uint8_t> out(std::begin(kTensorMagic), std::end(kTensorMagic));
  put_le(out, kTensorFileVersion);
  if (entries.size() > std::numeric_limits<std::uint32_t>::max()) {
    throw DataError("too many tensor entries");
  }
  put_le(out, static_cast<std::uint32_t>(entries.size()));
  for (const auto& t : entries) {
    if (!seen.insert(t.name).second) throw DataError("duplicate tensor name '" + t.name + "'");
    if (t.element_count() * dtype_size(t.dtype) != t.data.size()) {
      throw DataError("payload size of '" + t.name + "' does not match its dims");
    }
    put_le(out, static_cast<std::uint32_t>(t.name.size()));
    out.insert(out.end(), t.name.begin(), t.name.end());
    put_le(out, static_cast<std::uint32_t>(t.dims.size()));
    for (auto d : t.dims) put_le(out, d);
    out.push_back(static_cast<std::uint8_t>(t.dtype));
    out.insert(out.end(), t.data.begin(), t.data.end());
  }
  return out;
}

TensorList parse(std::span<const std::uint8_t> buf) {
  if (buf.size() < sizeof(kTensorMagic) ||
      std::memcmp(buf.data(), kTensorMagic, sizeof(kTensorMagic)) != 0) {
    throw DataError("not a tensor file");
  }
  Reader rd(buf.subspan(sizeof(kTensorMagic)));
  const auto version = rd.get<std::uint32_t>("version");
  if (version != kTensorFileVersion) {
    throw DataError("unsupported tensor file version " + std::to_string(version));
  }
  const auto count = rd.get<std::uint32_t>("entry count");
  TensorList out;
  std::set<std::string> seen;
  for (std::uint32_t e = 0; e < count; ++e) {
    Tensor t;
    const auto name_len = rd.get<std::uint32_t>("name length");
    auto name = rd.take(name_len, "name");
    t.name.assign(name.begin(), name.end());
    if (!seen.insert(t.name).second) throw DataError("duplicate tensor name '" + t.name + "'");
    const auto rank = rd.get<std::uint32_t>("rank");
    for (std::uint32_t i = 0; i < rank; ++i) t.dims.push_back(rd.get<std::uint64_t>("dims"));
    const auto tag = rd.get<std::uint8_t>("dtype");
    if (tag > 2) {
      throw DataError("unknown dtype " + std::to_string(tag) + " in '" + t.name + "'");
    }
    t.dtype = static_cast<DType>(tag);
    const std::uint64_t n = t.element_count();
    if (n > std::numeric_limits<std::uint64_t>::max() / dtype_size(t.dtype)) {
      throw DataError("tensor dims overflow");
    }
    auto payload = rd.take(n * dtype_size(t.dtype), "payload");
    t.data.assign(payload.begin(), payload.end());
    out.push_back(std::move(t));
  }
  if (!rd.done()) throw DataError("trailing bytes after last tensor entry");
  return out;
}

void write_tensor_file(const std::filesystem::path& path, const TensorList& entries) {
  const auto bytes = serialize(entries);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot open '" + path.string() + "' for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw DataError("write failed for '" + path.string() + "'");
}

TensorList read_tensor_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                  std::istreambuf_iterator<char>());
  try {
    return parse(bytes);
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

const Tensor* find(const TensorList& entries, std::string_view name) {
  auto it = std::find_if(entries.begin(), entries.end(),
                         [&](const Tensor& t) { return t.name == name; });
  return it == entries.end() ? nullptr : &*it;
}

Matrix to_matrix(const Tensor& t) {
  if (t.dims.size() != 2) throw DataError("entry '" + t.name + "' is not a matrix");
  return Matrix(static_cast<std::size_t>(t.dims[0]), static_cast<std::size_t>(t.dims[1]),
                t.as_f64());
}

Tensor from_matrix(std::string name, const MatrixF& m) {
  return Tensor::f32(std::move(name), {m.rows(), m.cols()}, m.values());
}

Tensor from_matrix(std::string name, const Matrix& m) {
  return from_matrix(std::move(name), m.cast<float>());
}

std::size_t row_bytes(std::size_t cols, int bits) {
  return (cols * static_cast<std::size_t>(bits) + 7) / 8;
}

std::vector<std::uint8_t> pack_codes(std::span<const std::uint8_t> codes, std::size_t rows,
                                     std::size_t cols, int bits) {
  if (bits < 1 || bits > 8) throw std::invalid_argument("bits must be in 1..8");
  if (codes.size() != rows * cols) throw DataError("code count does not match rows x cols");
  const std::size_t rb = row_bytes(cols, bits);
  const unsigned limit = 1u << bits;
  std::vector<std::uint8_t> out(rows * rb, 0);
  for (std::size_t r = 0; r < rows; ++r) {
    std::uint8_t* row = out.data() + r * rb;
    std::size_t bit = 0;
    for (std::size_t c = 0; c < cols; ++c, bit += static_cast<std::size_t>(bits)) {
      const unsigned v = codes[r * cols + c];
      if (v >= limit) {
        throw DataError("code " + std::to_string(v) + " at (" + std::to_string(r) + ", " +
                        std::to_string(c) + ") does not fit in " + std::to_string(bits) +
                        " bits");
      }
      const std::uint16_t shifted = static_cast<std::uint16_t>(v << (bit % 8));
      row[bit / 8] |= static_cast<std::uint8_t>(shifted);
      if ((bit % 8) + static_cast<std::size_t>(bits) > 8) {
        row[bit / 8 + 1] |= static_cast<std::uint8_t>(shifted >> 8);
      }
    }
  }
  return out;
}

std::vector<std::uint8_t> unpack_codes(std::span<const std::uint8_t> bytes, int bits,
                                       std::size_t rows, std::size_t cols) {
  if (bits < 1 || bits > 8) throw std::invalid_argument("bits must be in 1..8");
  const std::size_t rb = row_bytes(cols, bits);
  if (bytes.size() < rows * rb) {
    throw DataError("truncated code buffer: need " + std::to_string(rows * rb) + " bytes, got " +
                    std::to_string(bytes.size()));
  }
  const unsigned mask = (1u << bits) - 1;
  std::vector<std::uint8_t> out(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    const std::uint8_t* row = bytes.data() + r * rb;
    std::size_t bit = 0;
    for (std::size_t c = 0; c < cols; ++c, bit += static_cast<std::size_t>(bits)) {
      unsigned v = row[bit / 8];
      if ((bit % 8) + static_cast<std::size_t>(bits) > 8) v |= unsigned{row[bit / 8 + 1]} << 8;
      out[r * cols + c] = static_cast<std::uint8_t>((v >> (bit % 8)) & mask);
    }
  }
  return out;
}

void PackedLayer::validate() const {
  if (bits < 1 || bits > 8) throw DataError("packed layer has invalid bit width");
  if (group_size != 0 && (cols % group_size != 0 || kind != quant::GridKind::Affine)) {
    throw DataError("packed layer has an invalid group size");
  }
  if (code_bytes.size() != rows * row_bytes(cols, bits)) {
    throw DataError("packed layer code size mismatch");
  }
  if (kind == quant::GridKind::Affine) {
    const std::size_t n = rows * groups_per_row();
    if (scales.size() != n || zeros.size() != n || !levels.empty()) {
      throw DataError("packed layer affine metadata size mismatch");
    }
    for (auto z : zeros) {
      if (z > (1u << bits) - 1) throw DataError("packed layer zero point out of range");
    }
  } else {
    if (levels.size() != rows * (std::size_t{1} << bits) || !scales.empty() || !zeros.empty()) {
      throw DataError("packed layer codebook size mismatch");
    }
  }
}

PackedLayer pack_layer(const quant::LayerQuantResult& res) {
  const auto& g = res.grids;
  PackedLayer p;
  p.bits = g.bits;
  p.rows = res.rows;
  p.cols = res.cols;
  p.kind = g.kind;
  p.group_size = g.group_size == res.cols ? 0 : g.group_size;
  p.code_bytes = pack_codes(res.codes, res.rows, res.cols, g.bits);
  if (g.kind == quant::GridKind::Affine) {
    for (const auto& a : g.affine) {
      p.scales.push_back(float_to_half(static_cast<float>(a.scale)));
      p.zeros.push_back(static_cast<std::uint16_t>(a.zero_point));
    }
  } else {
    for (const auto& nu : g.nonuniform) {
      for (double l : nu.levels) p.levels.push_back(float_to_half(static_cast<float>(l)));
    }
  }
  p.validate();
  return p;
}

namespace {

// Dequantized row r into out (length cols).
void dequant_row(const PackedLayer& layer, std::size_t r, std::span<const std::uint8_t> codes,
                 std::span<float> out) {
  const std::size_t cols = layer.cols;
  if (layer.kind == quant::GridKind::Affine) {
    const std::size_t gw = layer.group_width();
    const std::size_t groups = layer.groups_per_row();
    for (std::size_t c = 0; c < cols; ++c) {
      const std::size_t gi = r * groups + c / gw;
      const double s = half_to_float(layer.scales[gi]);
      const double z = layer.zeros[gi];
      out[c] = static_cast<float>((static_cast<double>(codes[c]) - z) * s);
    }
  } else {
    const std::size_t n = std::size_t{1} << layer.bits;
    for (std::size_t c = 0; c < cols; ++c) {
      out[c] = half_to_float(layer.levels[r * n + codes[c]]);
    }
  }
}

}  // namespace

MatrixF dequantize(const PackedLayer& layer) {
  layer.validate();
  MatrixF out(layer.rows, layer.cols);
  const std::size_t rb = row_bytes(layer.cols, layer.bits);
  for (std::size_t r = 0; r < layer.rows; ++r) {
    auto codes = unpack_codes(std::span(layer.code_bytes).subspan(r * rb, rb), layer.bits, 1,
                              layer.cols);
    auto row = out.row(r);
    dequant_row(layer, r, codes, row);
  }
  return out;
}

std::vector<float> quantized_matvec(const PackedLayer& layer, std::span<const float> x) {
  layer.validate();
  if (x.size() != layer.cols) {
    throw DataError("matvec input has length " + std::to_string(x.size()) + ", expected " +
                    std::to_string(layer.cols));
  }
  std::vector<float> y(layer.rows);
  std::vector<float> w(layer.cols);
  const std::size_t rb = row_bytes(layer.cols, layer.bits);
  for (std::size_t r = 0; r < layer.rows; ++r) {
    auto codes = unpack_codes(std::span(layer.code_bytes).subspan(r * rb, rb), layer.bits, 1,
                              layer.cols);
    dequant_row(layer, r, codes, w);
    double acc = 0.0;
    for (std::size_t c = 0; c < layer.cols; ++c) acc += double{w[c]} * double{x[c]};
    y[r] = static_cast<float>(acc);
  }
  return y;
}

double effective_bits(int bits, std::size_t rows, std::size_t cols, quant::GridKind kind,
                      std::size_t group_size) {
  if (rows == 0 || cols == 0) return static_cast<double>(bits);
  const double n = static_cast<double>(rows) * static_cast<double>(cols);
  double meta = 0.0;
  if (kind == quant::GridKind::Affine) {
    const std::size_t gw = group_size == 0 ? cols : group_size;
    meta = 32.0 * static_cast<double>(rows * (cols / gw));
  } else {
    meta = 16.0 * static_cast<double>(std::size_t{1} << bits) * static_cast<double>(rows);
  }
  return (n * bits + meta) / n;
}

double effective_bits(const PackedLayer& layer) {
  return effective_bits(layer.bits, layer.rows, layer.cols, layer.kind, layer.group_size);
}

void append_layer(TensorList& out, const std::string& name, const PackedLayer& layer) {
  layer.validate();
  const std::vector<double> meta = {static_cast<double>(layer.bits),
                                    static_cast<double>(layer.rows),
                                    static_cast<double>(layer.cols),
                                    static_cast<double>(static_cast<int>(layer.kind)),
                                    static_cast<double>(layer.group_size)};
  out.push_back(Tensor::f64(name + std::string(kMetaSuffix), {meta.size()}, meta));
  out.push_back(Tensor::bytes(name + ".codes", {layer.rows, row_bytes(layer.cols, layer.bits)},
                              layer.code_bytes));
  if (layer.kind == quant::GridKind::Affine) {
    const std::uint64_t groups = layer.groups_per_row();
    out.push_back(Tensor::bytes(name + ".scales", {layer.rows, groups, 2}, u16_bytes(layer.scales)));
    out.push_back(Tensor::bytes(name + ".zeros", {layer.rows, groups, 2}, u16_bytes(layer.zeros)));
  } else {
    out.push_back(Tensor::bytes(name + ".levels",
                                {layer.rows, std::uint64_t{1} << layer.bits, 2},
                                u16_bytes(layer.levels)));
  }
}

PackedLayer extract_layer(const TensorList& entries, const std::string& name) {
  const auto meta = require(entries, name + std::string(kMetaSuffix)).as_f64();
  if (meta.size() != 5) throw DataError("malformed metadata for layer '" + name + "'");
  for (double v : meta) {
    if (!(v >= 0.0) || v != std::floor(v) || v > 9.0e15) {
      throw DataError("malformed metadata for layer '" + name + "'");
    }
  }
  PackedLayer p;
  p.bits = static_cast<int>(meta[0]);
  p.rows = static_cast<std::size_t>(meta[1]);
  p.cols = static_cast<std::size_t>(meta[2]);
  if (meta[3] > 1.0 || p.bits < 1 || p.bits > 8) {
    throw DataError("malformed metadata for layer '" + name + "'");
  }
  p.kind = static_cast<quant::GridKind>(static_cast<int>(meta[3]));
  p.group_size = static_cast<std::size_t>(meta[4]);
  p.code_bytes = require(entries, name + ".codes").data;
  if (p.kind == quant::GridKind::Affine) {
    p.scales = u16_from(require(entries, name + ".scales"));
    p.zeros = u16_from(require(entries, name + ".zeros"));
  } else {
    p.levels = u16_from(require(entries, name + ".levels"));
  }
  try {
    p.validate();
  } catch (const DataError& e) {
    throw DataError("layer '" + name + "': " + e.what());
  }
  return p;
}

std::vector<std::string> packed_layer_names(const TensorList& entries) {
  std::vector<std::string> names;
  for (const auto& t : entries) {
    if (t.name.size() > kMetaSuffix.size() && t.name.ends_with(kMetaSuffix)) {
      names.push_back(t.name.substr(0, t.name.size() - kMetaSuffix.size()));
    }
  }
  return names;
}

}  // namespace leanq::io
