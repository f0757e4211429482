#include <cstdio>
#include <fstream>
#include <sstream>

#include "CLI11.hpp"
#include "commands.hpp"
#include "shaspec/binary_io.hpp"

using namespace shaspec;
using namespace shaspec::cli;

namespace {

void print_row(const LogRow& r) { std::printf("%s\n", format_metrics_row(r).c_str()); }

void write_or_print(const std::optional<fs::path>& path, const std::string& text) {
  if (!path) {
    std::fputs(text.c_str(), stdout);
    return;
  }
  std::ofstream out(*path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path->string() + "'");
  out << text;
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Shared-specific multi-modal training toolkit"};
  app.require_subcommand(1);

  std::optional<fs::path> config_file;
  std::vector<std::string> overrides;
  fs::path out_dir, data_dir;

  auto* gen = app.add_subcommand("gen-data", "Generate synthetic train/test datasets");
  gen->add_option("--spec", config_file, "Dataset spec (data.* keys)")->required();
  gen->add_option("--out", out_dir, "Output directory")->required();
  gen->add_option("--set", overrides, "key=value override, repeatable");

  TrainRequest train_req;
  std::optional<std::string> dedicated;
  auto* train = app.add_subcommand("train", "Train a model");
  train->add_option("--config", config_file, "Run configuration");
  train->add_option("--data", data_dir, "Dataset directory or .shds file")->required();
  train->add_option("--out", out_dir, "Run directory")->required();
  train->add_option("--dedicated-mask", dedicated, "Train under one fixed mask, e.g. 100");
  train->add_flag("--resume", train_req.resume, "Continue from the run directory's checkpoint");
  train->add_option("--set", overrides, "key=value override, repeatable");
  bool quiet = false;
  train->add_flag("--quiet", quiet, "Do not print logged rows");

  EvalRequest eval_req;
  std::optional<fs::path> csv_path;
  std::optional<long> smooth;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on every requested modality subset");
  eval->add_option("--checkpoint", eval_req.checkpoint, "Checkpoint file")->required();
  eval->add_option("--data", eval_req.data, "Dataset directory (uses test.shds) or .shds file")->required();
  eval->add_option("--subsets", eval_req.subsets, "all, or comma-separated bitstrings")->capture_default_str();
  eval->add_option("--csv", csv_path, "Report CSV (stdout if omitted)");
  eval->add_option("--smooth", smooth, "Smoothness enhancement min region (segmentation only)");
  eval->add_option("--features", eval_req.features, "Write shared/specific silhouettes to this CSV");
  eval->add_option("--embeddings", eval_req.embeddings, "Write pooled features to this CSV");

  SweepRequest sweep_req;
  std::string values;
  auto* sweep = app.add_subcommand("sweep", "Train and evaluate one model per parameter value");
  sweep->add_option("--param", sweep_req.param, "alpha, beta, dao or audio_rate")->required();
  sweep->add_option("--values", values, "Comma-separated values")->required();
  sweep->add_option("--config", config_file, "Run configuration");
  sweep->add_option("--data", data_dir, "Dataset directory")->required();
  sweep->add_option("--out", out_dir, "Sweep directory")->required();
  sweep->add_option("--set", overrides, "key=value override, repeatable");

  fs::path report_csv, report_svg;
  auto* report = app.add_subcommand("report", "Render an eval or sweep CSV as SVG");
  report->add_option("--csv", report_csv, "Input CSV")->required();
  report->add_option("--svg", report_svg, "Output SVG")->required();

  GradCheckRequest grad_req;
  std::string corrupt = "none";
  auto* grad = app.add_subcommand("grad-check", "Compare backward() with central finite differences");
  grad->add_option("--seed", grad_req.seed, "First seed")->capture_default_str();
  grad->add_option("--seeds", grad_req.seeds, "Number of consecutive seeds")->capture_default_str();
  grad->add_option("--tol", grad_req.tol, "Relative error tolerance")->capture_default_str();
  grad->add_option("--corrupt", corrupt, "Break a backward rule: matmul, tanh, conv2d, softmax");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  try {
    if (*gen) {
      const auto r = gen_data(load_run_config(config_file, overrides), out_dir);
      std::printf("wrote %zu train and %zu test samples to %s\n", r.train_count, r.test_count, out_dir.c_str());
    } else if (*train) {
      train_req.config = load_run_config(config_file, overrides);
      train_req.data = data_dir;
      train_req.out = out_dir;
      train_req.dedicated_mask = dedicated;
      if (!quiet) {
        std::printf("%s\n", metrics_header().c_str());
        train_req.on_log = print_row;
      }
      train_command(train_req);
    } else if (*eval) {
      eval_req.smooth = smooth;
      write_or_print(csv_path, eval_command(eval_req).to_csv());
    } else if (*sweep) {
      sweep_req.config = load_run_config(config_file, overrides);
      sweep_req.data = data_dir;
      sweep_req.out = out_dir;
      std::stringstream in(values);
      for (std::string v; std::getline(in, v, ',');) sweep_req.values.push_back(v);
      sweep_req.threads = threads_from_env();
      std::fputs(sweep_command(sweep_req).c_str(), stdout);
    } else if (*report) {
      const auto svg = render_svg(read_file(report_csv));
      write_or_print(report_svg, svg);
    } else if (*grad) {
      try {
        grad_req.corrupt = fault::parse_rule(corrupt);
      } catch (const std::exception& e) {
        throw ConfigError(std::string("--corrupt: ") + e.what());
      }
      const auto r = grad_check(grad_req);
      std::printf("checked %zu cases, %zu parameter tensors\n", r.cases.size(), r.parameters_checked);
      std::printf("worst relative error %.3e in %s (%s)\n", r.worst, r.worst_param.c_str(), r.worst_case.c_str());
      if (!(r.worst < grad_req.tol)) {
        char tol[32];
        std::snprintf(tol, sizeof tol, "%g", grad_req.tol);
        throw VerificationFailure("gradient check failed: " + r.worst_param + " exceeds tolerance " + tol);
      }
    }
  } catch (...) {
    const auto error = std::current_exception();
    try {
      std::rethrow_exception(error);
    } catch (const std::exception& e) {
      std::fprintf(stderr, "error: %s\n", e.what());
    } catch (...) {
      std::fprintf(stderr, "error: unknown failure\n");
    }
    return exit_code_for(error);
  }
  return kOk;
}
