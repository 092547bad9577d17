// gsop_cli: train, evaluate, count and gradient-check GSoP networks.
//
// Exit codes: 0 success, 1 configuration/usage/version error, 2 data error,
// 3 training divergence, 4 gradient check above tolerance. Reports go to
// stdout; progress and the one-line failure reason go to stderr, the latter
// formatted as "gsop: <category>: <message>".

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "gsop.hpp"

namespace fs = std::filesystem;
using namespace gsop;

namespace {

enum Exit { kOk = 0, kConfig = 1, kData = 2, kDivergence = 3, kTolerance = 4 };

void reason(const char* category, const std::string& msg) {
  std::string line = msg;
  for (auto& c : line)
    if (c == '\n' || c == '\r') c = ' ';
  std::cerr << "gsop: " << category << ": " << line << std::endl;
}

template <class Fn>
int guarded(Fn&& fn) {
  try {
    return fn();
  } catch (const VersionError& e) {
    reason("version", e.what());
    return kConfig;
  } catch (const ConfigError& e) {
    reason("config", e.what());
    return kConfig;
  } catch (const DimensionError& e) {
    reason("config", e.what());
    return kConfig;
  } catch (const IngestionError& e) {
    reason("data", e.what());
    return kData;
  } catch (const CorruptDataError& e) {
    reason("data", e.what());
    return kData;
  } catch (const DivergenceError& e) {
    reason("divergence", e.what());
    return kDivergence;
  } catch (const std::exception& e) {
    reason("error", e.what());
    return kConfig;
  }
}

std::pair<std::size_t, std::size_t> parse_input(const std::string& s) {
  try {
    return detail::SectionReader::parse_hw(s);
  } catch (const ConfigError&) {
    throw ConfigError("--input expects HxW, got '" + s + "'");
  }
}

/// Checkpoint problems are reported as configuration errors (exit 1).
Checkpoint open_checkpoint(const fs::path& p) {
  try {
    return read_checkpoint(p);
  } catch (const VersionError&) {
    throw;
  } catch (const IngestionError& e) {
    throw ConfigError(std::string("unreadable checkpoint: ") + e.what());
  } catch (const CorruptDataError& e) {
    throw ConfigError(std::string("corrupt checkpoint: ") + e.what());
  }
}

std::string format_eval(const EvalResult& r) {
  char buf[128];
  std::string top5 = "-";
  if (r.top5) {
    char t[32];
    std::snprintf(t, sizeof t, "%.2f", *r.top5);
    top5 = t;
  }
  std::snprintf(buf, sizeof buf, "top1_err=%.2f top5_err=%s loss=%.6f", r.top1, top5.c_str(), r.loss);
  return buf;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"GSoP network library: training, evaluation, cost accounting and gradient certification"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  // train
  auto* train_cmd = app.add_subcommand("train", "Train a network described by a config file");
  std::string train_config, train_data, train_out, train_resume;
  std::optional<std::uint64_t> train_seed;
  train_cmd->add_option("--config", train_config, "Run config file (sections network, train, data, output)")
      ->required();
  train_cmd->add_option("--data-dir", train_data, "Dataset directory; overrides data.dir");
  train_cmd->add_option("--seed", train_seed, "Seed for weights, shuffling and augmentation; overrides train.seed");
  train_cmd->add_option("--out", train_out, "Output directory; overrides output.dir");
  train_cmd->add_option("--resume", train_resume, "Continue from a checkpoint written by an earlier run");

  // count
  auto* count_cmd = app.add_subcommand("count", "Print per-layer parameter and MAC counts");
  std::string count_arch_name, count_config, count_input, count_format = "text";
  auto* arch_opt = count_cmd->add_option("--arch", count_arch_name,
                                         "Network preset or block preset (gsop-channel-conv4x, gsop-position-conv4x)");
  auto* cfg_opt = count_cmd->add_option("--config", count_config, "Run config file whose [network] is counted");
  arch_opt->excludes(cfg_opt);
  count_cmd->add_option("--input", count_input, "Input spatial size HxW (default: the architecture's own)");
  count_cmd->add_option("--format", count_format, "Report format")->check(CLI::IsMember({"text", "csv"}));

  // gradcheck
  auto* grad_cmd = app.add_subcommand("gradcheck", "Compare analytic gradients with finite differences (f64)");
  std::string grad_block;
  std::optional<double> grad_tol;
  std::uint64_t grad_seed = 1;
  grad_cmd->add_option("--block", grad_block, "Component to certify")
      ->required()
      ->check(CLI::IsMember(certify_suites()));
  grad_cmd->add_option("--tol", grad_tol, "Maximum relative error (default 1e-4; 1e-3 for isqrt and network)");
  grad_cmd->add_option("--seed", grad_seed, "Seed for weights, inputs and sampled entries");

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint (top-1/top-5 error in percent, loss)");
  std::string eval_ckpt, eval_data, eval_split = "val";
  eval_cmd->add_option("--checkpoint", eval_ckpt, "Checkpoint file")->required();
  eval_cmd->add_option("--data-dir", eval_data, "Dataset directory; overrides the stored data.dir");
  eval_cmd->add_option("--split", eval_split, "Dataset split")->check(CLI::IsMember({"train", "val"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  if (*train_cmd) {
    return guarded([&] {
      RunConfig rc = load_config(train_config);
      if (!train_data.empty()) rc.data.dir = train_data;
      if (train_seed) rc.train.seed = *train_seed;
      if (!train_out.empty()) rc.out_dir = train_out;
      if (rc.out_dir.empty()) throw ConfigError("no output directory (set output.dir or pass --out)");
      auto [train_set, val_set] = load_data(rc.data);
      auto net = build_network(rc.network, rc.train.seed);
      TrainState state;
      if (!train_resume.empty()) state = restore_checkpoint(*net, open_checkpoint(train_resume));
      fs::create_directories(rc.out_dir);
      const std::string snapshot = serialize_config(rc);
      detail::write_text_file(rc.out_dir / "config.resolved", snapshot);
      TrainOutput out{rc.out_dir, snapshot, [](const MetricsRow& r) {
                        std::cerr << "epoch " << r.epoch << ": " << format_metrics_row(r) << std::endl;
                      }};
      state = train(*net, train_set, &val_set, rc.train, out, std::move(state));
      std::cout << metrics_csv(state.log);
      return int(kOk);
    });
  }

  if (*count_cmd) {
    return guarded([&] {
      std::size_t h = 0, w = 0;
      if (!count_input.empty()) std::tie(h, w) = parse_input(count_input);
      CostReport report;
      if (!count_config.empty()) {
        report = count_network(load_config(count_config).network, h, w);
      } else if (!count_arch_name.empty()) {
        report = count_arch(count_arch_name, h, w);
      } else {
        throw ConfigError("count needs --arch or --config");
      }
      std::cout << (count_format == "csv" ? report_csv(report) : report_text(report));
      return int(kOk);
    });
  }

  if (*grad_cmd) {
    return guarded([&] {
      const double tol = grad_tol ? *grad_tol : certify_tolerance(grad_block);
      auto report = certify(grad_block, grad_seed);
      std::cout << format_report(report);
      if (!report.passed(tol)) {
        const auto* w = report.worst();
        char buf[96];
        std::snprintf(buf, sizeof buf, "max_rel_error=%.3e exceeds tol=%.3g", w->max_rel_error, tol);
        reason("tolerance", "parameter '" + w->name + "' " + buf);
        return int(kTolerance);
      }
      return int(kOk);
    });
  }

  return guarded([&] {
    Checkpoint ckpt = open_checkpoint(eval_ckpt);
    if (ckpt.config_text.empty()) throw ConfigError("checkpoint carries no run configuration");
    RunConfig rc = parse_config(ckpt.config_text, eval_ckpt + ":config");
    if (!eval_data.empty()) rc.data.dir = eval_data;
    auto [train_set, val_set] = load_data(rc.data);
    auto net = build_network(rc.network, 0);
    restore_checkpoint(*net, ckpt);
    auto r = evaluate(*net, eval_split == "train" ? train_set : val_set, rc.train.eval_policy);
    std::cout << format_eval(r) << "\n";
    return int(kOk);
  });
}
