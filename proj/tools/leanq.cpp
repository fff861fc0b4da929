#include <cstdint>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "leanq/error.hpp"
#include "leanq/harness.hpp"
#include "leanq/pack_io.hpp"
#include "leanq/quantizer.hpp"

namespace {

using namespace leanq;

enum Exit { kOk = 0, kUsage = 1, kData = 2, kNumerical = 3 };

struct QuantizeArgs {
  std::string model, calib, out, report;
  int bits = 4;
  std::string grid = "lean-affine";
  std::optional<std::size_t> group_size;
  std::size_t block_size = 128;
  double damp = calib::kDefaultDamping;
  double p = 4.0;
  int T = grids::kDefaultSearchT;
  bool act_order = false;
  std::uint64_t seed = 0;
  std::string init = "uniform";
  unsigned workers = 0;
  bool wall_clock = false;
};

struct SynthArgs {
  harness::SyntheticLayerSpec spec;
  std::size_t layers = 1;
  std::string out;
};

int run_quantize(const QuantizeArgs& a) {
  harness::QuantizeJob job;
  job.model = a.model;
  job.calib = a.calib;
  job.out = a.out;
  job.report = a.report;
  job.wall_clock = a.wall_clock;
  auto& c = job.config;
  c.bits = a.bits;
  c.grid = quant::parse_grid_type(a.grid);
  c.group_size = a.group_size;
  c.block_size = a.block_size;
  c.damp = a.damp;
  c.p = a.p;
  c.search_T = a.T;
  c.act_order = a.act_order;
  c.seed = a.seed;
  c.init = a.init == "kmeans++" ? quant::GridInit::KMeansPlusPlus : quant::GridInit::Uniform;
  c.workers = a.workers;
  const auto reports = harness::run_quantize(job);
  for (const auto& r : reports) {
    std::cout << r.row.layer << ": eps_total=" << r.row.eps_total
              << " proxy_before=" << r.row.proxy_before << " proxy_after=" << r.row.proxy_after
              << " bits=" << r.row.effective_bits << "\n";
  }
  return kOk;
}

int run_synth(const SynthArgs& a) {
  a.spec.validate();
  if (a.spec.rank_deficient()) {
    std::cerr << "warning: cols > tokens, X X^T is rank deficient before dampening\n";
  }
  io::TensorList model, calib;
  for (std::size_t i = 0; i < a.layers; ++i) {
    auto s = a.spec;
    s.seed = a.spec.seed + i;
    auto layer = harness::gen_synthetic_layer(s);
    const std::string name = "layer" + std::to_string(i);
    model.push_back(io::from_matrix(name, layer.w));
    calib.push_back(io::from_matrix(name, layer.x));
  }
  io::write_tensor_file(a.out + ".model.lqt", model);
  io::write_tensor_file(a.out + ".calib.lqt", calib);
  return kOk;
}

int run_dequant(const std::string& in, const std::string& out) {
  const auto packed = io::read_tensor_file(in);
  io::TensorList dense;
  for (const auto& name : io::packed_layer_names(packed)) {
    dense.push_back(io::from_matrix(name, io::dequantize(io::extract_layer(packed, name))));
  }
  io::write_tensor_file(out, dense);
  return kOk;
}

void print_reports(const std::vector<harness::LayerReport>& reports) {
  std::cout << harness::format_report(reports);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"leanq: loss-error-aware post-training weight quantization"};
  app.require_subcommand(1);

  QuantizeArgs q;
  auto* quant_cmd = app.add_subcommand("quantize", "quantize every layer of a model file");
  quant_cmd->add_option("--model", q.model, "model tensor file")->required();
  quant_cmd->add_option("--calib", q.calib, "calibration tensor file")->required();
  quant_cmd->add_option("--bits", q.bits)->check(CLI::IsMember({2, 3, 4, 8}));
  quant_cmd->add_option("--grid", q.grid)->check(CLI::IsMember({"minmax", "lean-affine", "lean-nu"}));
  quant_cmd->add_option("--group-size", q.group_size);
  quant_cmd->add_option("--block-size", q.block_size);
  quant_cmd->add_option("--damp", q.damp);
  quant_cmd->add_option("--p", q.p);
  quant_cmd->add_option("--T", q.T);
  quant_cmd->add_flag("--act-order", q.act_order);
  quant_cmd->add_option("--seed", q.seed);
  quant_cmd->add_option("--init", q.init, "non-uniform grid init")
      ->check(CLI::IsMember({"uniform", "kmeans++"}));
  quant_cmd->add_option("--workers", q.workers, "0 = all cores");
  quant_cmd->add_flag("--wall-clock", q.wall_clock, "record wall_ms in the report");
  quant_cmd->add_option("--out", q.out, "packed output file")->required();
  quant_cmd->add_option("--report", q.report, "CSV report")->required();

  SynthArgs s;
  auto* synth_cmd = app.add_subcommand("synth", "write a synthetic model/calibration pair");
  synth_cmd->add_option("--rows", s.spec.rows);
  synth_cmd->add_option("--cols", s.spec.cols);
  synth_cmd->add_option("--tokens", s.spec.tokens);
  synth_cmd->add_option("--outlier-frac", s.spec.outlier_fraction);
  synth_cmd->add_option("--outlier-scale", s.spec.outlier_scale);
  synth_cmd->add_option("--seed", s.spec.seed);
  synth_cmd->add_option("--layers", s.layers)->check(CLI::PositiveNumber);
  synth_cmd->add_option("--out", s.out, "prefix for <out>.model.lqt and <out>.calib.lqt")
      ->required();

  std::string spec_path;
  auto* compare_cmd = app.add_subcommand("compare", "run several grids on the same layers");
  compare_cmd->add_option("--spec", spec_path, "experiment JSON")->required();

  std::string axis;
  auto* ablate_cmd = app.add_subcommand("ablate", "sweep one hyperparameter");
  ablate_cmd->add_option("--axis", axis)->required()->check(CLI::IsMember({"p", "init", "T", "bits"}));
  ablate_cmd->add_option("--spec", spec_path, "experiment JSON")->required();

  std::string deq_in, deq_out;
  auto* deq_cmd = app.add_subcommand("dequant", "expand a packed file to f32 matrices");
  deq_cmd->add_option("--in", deq_in)->required();
  deq_cmd->add_option("--out", deq_out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*quant_cmd) return run_quantize(q);
    if (*synth_cmd) return run_synth(s);
    if (*compare_cmd) {
      print_reports(harness::compare_grids(harness::ExperimentSpec::load(spec_path)));
      return kOk;
    }
    if (*ablate_cmd) {
      print_reports(harness::ablate(harness::ExperimentSpec::load(spec_path),
                                    harness::parse_axis(axis)));
      return kOk;
    }
    if (*deq_cmd) return run_dequant(deq_in, deq_out);
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return kNumerical;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const std::invalid_argument& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kData;
  }
  return kUsage;
}
