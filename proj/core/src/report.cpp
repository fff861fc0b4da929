#include <charconv>
#include <fstream>
#include <system_error>

#include "leanq/error.hpp"
#include "leanq/harness.hpp"

namespace leanq::harness {

namespace {

std::string fmt(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  if (ec != std::errc{}) throw std::runtime_error("number formatting failed");
  return std::string(buf, end);
}

template <class I>
std::string fmt_int(I v) {
  return std::to_string(v);
}

std::string quote(std::string_view s) {
  if (s.find_first_of(",\"\n\r") == std::string_view::npos) return std::string(s);
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

std::vector<std::string> split_fields(std::string_view line) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (quoted) throw DataError("unterminated quote in report row");
  fields.push_back(std::move(cur));
  return fields;
}

template <class T>
T parse_num(const std::string& s, const char* col) {
  T v{};
  auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || end != s.data() + s.size()) {
    throw DataError(std::string("bad value '") + s + "' in column " + col);
  }
  return v;
}

// Splits on LF, dropping one trailing empty line.
std::vector<std::string_view> lines_of(std::string_view text) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (start < text.size()) {
    auto nl = text.find('\n', start);
    if (nl == std::string_view::npos) nl = text.size();
    out.push_back(text.substr(start, nl - start));
    start = nl + 1;
  }
  return out;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot open '" + path.string() + "' for writing");
  f << text;
  if (!f) throw DataError("write failed for '" + path.string() + "'");
}

}  // namespace

std::string format_row(const ReportRow& r) {
  std::string s;
  s += quote(r.layer) + ',' + quote(r.method) + ',' + fmt_int(r.bits) + ',' +
       fmt(r.effective_bits) + ',' + fmt_int(r.group_size) + ',' + fmt(r.p) + ',' +
       fmt_int(r.T) + ',' + fmt(r.eps_total) + ',' + fmt(r.proxy_before) + ',' +
       fmt(r.proxy_after) + ',' + fmt(r.wall_ms) + ',' + fmt_int(r.seed);
  return s;
}

ReportRow parse_row(std::string_view line) {
  if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
  auto f = split_fields(line);
  if (f.size() != 12) {
    throw DataError("report row has " + std::to_string(f.size()) + " fields, expected 12");
  }
  ReportRow r;
  r.layer = f[0];
  r.method = f[1];
  r.bits = parse_num<int>(f[2], "bits");
  r.effective_bits = parse_num<double>(f[3], "effective_bits");
  r.group_size = parse_num<std::size_t>(f[4], "group_size");
  r.p = parse_num<double>(f[5], "p");
  r.T = parse_num<int>(f[6], "T");
  r.eps_total = parse_num<double>(f[7], "eps_total");
  r.proxy_before = parse_num<double>(f[8], "proxy_before");
  r.proxy_after = parse_num<double>(f[9], "proxy_after");
  r.wall_ms = parse_num<double>(f[10], "wall_ms");
  r.seed = parse_num<std::uint64_t>(f[11], "seed");
  return r;
}

std::string format_report(const std::vector<LayerReport>& reports) {
  std::string s(kCsvHeader);
  s += '\n';
  for (const auto& r : reports) s += format_row(r.row) + '\n';
  return s;
}

std::vector<ReportRow> parse_report(std::string_view text) {
  auto lines = lines_of(text);
  if (lines.empty()) throw DataError("empty report");
  std::string_view head = lines[0];
  if (!head.empty() && head.back() == '\r') head.remove_suffix(1);
  if (head != kCsvHeader) throw DataError("unexpected report header");
  std::vector<ReportRow> rows;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    rows.push_back(parse_row(lines[i]));
  }
  return rows;
}

std::string format_steps(const std::vector<LayerReport>& reports) {
  std::string s(kStepsHeader);
  s += '\n';
  for (const auto& r : reports) {
    const std::string prefix = quote(r.row.layer) + ',' + quote(r.row.method) + ',';
    for (std::size_t j = 0; j < r.eps_per_step.size(); ++j) {
      s += prefix + fmt_int(j) + ',' + fmt(r.eps_per_step[j]) + '\n';
    }
  }
  return s;
}

std::filesystem::path steps_path(const std::filesystem::path& report) {
  auto p = report;
  p.replace_filename(report.stem().string() + "_steps.csv");
  return p;
}

void write_report(const std::filesystem::path& path, const std::vector<LayerReport>& reports) {
  write_text(path, format_report(reports));
  write_text(steps_path(path), format_steps(reports));
}

}  // namespace leanq::harness
