// Command-line front end: train / eval / partition / angles / synth.
//
// Exit codes: 0 ok, 1 usage, 2 invalid config, 3 dataset error,
// 4 training divergence, 5 checkpoint/dataset descriptor mismatch.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "fedx/checkpoint.hpp"
#include "fedx/config.hpp"
#include "fedx/data.hpp"
#include "fedx/evaluation.hpp"
#include "fedx/federation.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitConfig = 2;
constexpr int kExitDataset = 3;
constexpr int kExitDivergence = 4;
constexpr int kExitDescriptor = 5;

fedx::Dataset load_or_die(const std::string& path, const std::string& format) {
  try {
    return fedx::load_dataset(path, format);
  } catch (const std::exception& e) {
    std::cerr << "dataset error (" << path << "): " << e.what() << "\n";
    std::exit(kExitDataset);
  }
}

template <typename T>
int run_train(const fedx::RunConfig& rc, const std::string& outdir) {
  auto ds = load_or_die(rc.get("dataset.path"), rc.get("dataset.format"));
  auto fedcfg = rc.federation<T>(ds.sample_dim());

  fedx::PartitionSpec partition;
  try {
    if (!rc.get("partition.path").empty()) {
      partition = fedx::load_partition(rc.get("partition.path"));
    } else {
      std::size_t floor = std::max<std::size_t>(fedcfg.batch, 32);
      partition = fedx::dirichlet_partition(ds, fedcfg.clients, rc.get_double("partition.beta"),
                                            rc.get_u64("partition.seed"), floor);
      if (partition.retries > 0)
        std::cerr << "partition: resampled " << partition.retries
                  << " time(s) to satisfy the per-client size floor\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "partition error: " << e.what() << "\n";
    return kExitDataset;
  }

  fs::create_directories(outdir);
  std::string resolved = rc.resolved_text();
  std::ofstream(outdir + "/resolved_config.txt") << resolved;
  std::string config_hash = fedx::fnv1a64_hex(resolved);

  std::ofstream metrics(outdir + "/metrics.jsonl");
  std::size_t every = rc.get_u64("run.checkpoint_every");
  auto on_round = [&](std::size_t round, const fedx::ModelParams<T>& global,
                      const fedx::RoundMetrics<T>& rm) {
    json j = {{"round", round},
              {"loss_local_c", double(rm.aggregate.local_c)},
              {"loss_local_r", double(rm.aggregate.local_r)},
              {"loss_global_c", double(rm.aggregate.global_c)},
              {"loss_global_r", double(rm.aggregate.global_r)},
              {"loss_total", double(rm.aggregate.total)},
              {"wall_ms", rm.wall_ms}};
    metrics << j.dump() << "\n";
    metrics.flush();
    if (every > 0 && round % every == 0 && round != fedcfg.rounds) {
      char name[64];
      std::snprintf(name, sizeof(name), "/checkpoint_round_%04zu.fxck", round);
      fedx::save_checkpoint(global, outdir + name, round, config_hash);
    }
  };

  try {
    auto result = fedx::run_training<T>(fedcfg, ds, partition, on_round);
    fedx::save_checkpoint(result.global, outdir + "/checkpoint_final.fxck", fedcfg.rounds,
                          config_hash);
    for (const auto& c : result.clients) {
      char name[64];
      std::snprintf(name, sizeof(name), "/client_%03zu_final.fxck", c.id);
      fedx::save_checkpoint(c.local, outdir + name, fedcfg.rounds, config_hash);
    }
  } catch (const fedx::DivergenceError& e) {
    std::cerr << "divergence: " << e.what() << "\n";
    return kExitDivergence;
  }
  std::cout << "training complete; artifacts in " << outdir << "\n";
  return 0;
}

json eval_report_json(const fedx::EvalReport& rep) {
  return {{"top1", rep.top1},
          {"per_class", rep.per_class},
          {"label_ratio", rep.label_ratio},
          {"epochs", rep.epochs}};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"FedX federated self-supervised learning simulator"};
  app.require_subcommand(1);

  // ---- train ----
  auto* train = app.add_subcommand("train", "Run federated training");
  std::string cfg_path, out_flag;
  std::vector<std::string> overrides;
  long long rounds_flag = -1, epochs_flag = -1, seed_flag = -1, workers_flag = -1;
  std::string dataset_flag;
  train->add_option("--config", cfg_path, "Configuration file (key = value)");
  train->add_option("--set", overrides, "Override as key=value (repeatable)");
  train->add_option("--rounds", rounds_flag, "Override federation.rounds");
  train->add_option("--local-epochs", epochs_flag, "Override federation.local_epochs");
  train->add_option("--seed", seed_flag, "Override federation.seed");
  train->add_option("--workers", workers_flag, "Override federation.workers");
  train->add_option("--dataset", dataset_flag, "Override dataset.path");
  train->add_option("--out", out_flag, "Output directory");

  // ---- eval ----
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  std::string ck_path, ds_path, ds_format = "fxds", mode = "linear", report_path = "report.json";
  double label_ratio = 0.1, test_fraction = 0.2;
  unsigned long long eval_seed = 0, eval_epochs = 100;
  eval->add_option("--checkpoint", ck_path, "Checkpoint file")->required();
  eval->add_option("--dataset", ds_path, "Dataset file")->required();
  eval->add_option("--format", ds_format, "Dataset format (fxds|csv)");
  eval->add_option("--mode", mode, "linear | semi");
  eval->add_option("--label-ratio", label_ratio, "Labeled fraction for semi mode");
  eval->add_option("--test-fraction", test_fraction, "Held-out test fraction");
  eval->add_option("--epochs", eval_epochs, "Classifier / fine-tune epochs");
  eval->add_option("--seed", eval_seed, "Evaluation RNG seed");
  eval->add_option("--out", report_path, "Report output path");

  // ---- partition ----
  auto* part = app.add_subcommand("partition", "Inspect or save a Dirichlet partition");
  std::string pds_path, pds_format = "fxds", pout;
  unsigned long long pclients = 10, pseed = 0, pmin = 32;
  double pbeta = 0.5;
  bool inspect = false;
  part->add_option("--dataset", pds_path, "Dataset file")->required();
  part->add_option("--format", pds_format, "Dataset format");
  part->add_option("--clients", pclients, "Client count");
  part->add_option("--beta", pbeta, "Dirichlet concentration");
  part->add_option("--seed", pseed, "Partition seed");
  part->add_option("--min-per-client", pmin, "Per-client sample floor");
  part->add_flag("--inspect", inspect, "Print per-class histograms");
  part->add_option("--out", pout, "Write the partition spec to this file");

  // ---- angles ----
  auto* ang = app.add_subcommand("angles", "Embedding angle analysis");
  std::string local_ck, global_ck, ads_path, ads_format = "fxds", areport = "angles.json";
  double atest_fraction = 0.2;
  unsigned long long aseed = 0;
  ang->add_option("--local", local_ck, "Local model checkpoint")->required();
  ang->add_option("--global", global_ck, "Global model checkpoint")->required();
  ang->add_option("--dataset", ads_path, "Dataset file")->required();
  ang->add_option("--format", ads_format, "Dataset format");
  ang->add_option("--test-fraction", atest_fraction, "Held-out test fraction");
  ang->add_option("--seed", aseed, "Split seed");
  ang->add_option("--out", areport, "Report output path");

  // ---- synth ----
  auto* synth = app.add_subcommand("synth", "Generate a synthetic demo dataset");
  std::string sout = "synthetic.fxds", sformat = "fxds";
  fedx::SyntheticSpec sspec;
  synth->add_option("--out", sout, "Output path");
  synth->add_option("--format", sformat, "fxds | csv");
  synth->add_option("--classes", sspec.classes, "Class count");
  synth->add_option("--per-class", sspec.per_class, "Samples per class");
  synth->add_option("--channels", sspec.channels, "Channels");
  synth->add_option("--height", sspec.height, "Height");
  synth->add_option("--width", sspec.width, "Width");
  synth->add_option("--noise", sspec.noise, "Pixel noise stddev");
  synth->add_option("--overlap", sspec.overlap, "Confuser blend strength");
  synth->add_option("--seed", sspec.seed, "Generator seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) ? kExitUsage : 0;
  }

  try {
    if (*train) {
      fedx::RunConfig rc = fedx::RunConfig::defaults();
      try {
        if (!cfg_path.empty()) rc = fedx::RunConfig::from_file(cfg_path);
        for (const auto& ov : overrides) {
          auto eq = ov.find('=');
          if (eq == std::string::npos) throw fedx::ConfigError("--set expects key=value");
          rc.set(ov.substr(0, eq), ov.substr(eq + 1));
        }
        if (rounds_flag >= 0) rc.set("federation.rounds", std::to_string(rounds_flag));
        if (epochs_flag >= 0) rc.set("federation.local_epochs", std::to_string(epochs_flag));
        if (seed_flag >= 0) rc.set("federation.seed", std::to_string(seed_flag));
        if (workers_flag >= 0) rc.set("federation.workers", std::to_string(workers_flag));
        if (!dataset_flag.empty()) rc.set("dataset.path", dataset_flag);
        if (const char* env = std::getenv("FEDX_OUTPUT_DIR")) rc.set("run.output_dir", env);
        if (!out_flag.empty()) rc.set("run.output_dir", out_flag);
        rc.validate();
        if (rc.get("dataset.path").empty())
          throw fedx::ConfigError("config: dataset.path is required");
      } catch (const fedx::ConfigError& e) {
        std::cerr << e.what() << "\n";
        return kExitConfig;
      }
      std::string outdir = rc.get("run.output_dir");
      return rc.get("run.precision") == "f64" ? run_train<double>(rc, outdir)
                                              : run_train<float>(rc, outdir);
    }

    if (*eval) {
      auto ds = load_or_die(ds_path, ds_format);
      auto ck = fedx::load_checkpoint<float>(ck_path);
      if (ck.params.descriptor().input_dim != ds.sample_dim()) {
        std::cerr << "descriptor mismatch: checkpoint expects input dim "
                  << ck.params.descriptor().input_dim << ", dataset provides "
                  << ds.sample_dim() << "\n";
        return kExitDescriptor;
      }
      auto [train_idx, test_idx] = fedx::stratified_split(ds, test_fraction, eval_seed);
      fedx::EvalReport rep;
      if (mode == "linear") {
        fedx::LinearEvalOptions opts;
        opts.epochs = eval_epochs;
        opts.seed = eval_seed;
        rep = fedx::linear_evaluate(ck.params.subset({fedx::ParamRole::backbone}, false), ds,
                                    train_idx, test_idx, opts);
      } else if (mode == "semi") {
        fedx::FinetuneOptions opts;
        opts.label_ratio = label_ratio;
        opts.epochs = eval_epochs;
        opts.seed = eval_seed;
        rep = fedx::semi_supervised_finetune(ck.params, ds, train_idx, test_idx, opts);
      } else {
        std::cerr << "unknown eval mode '" << mode << "'\n";
        return kExitUsage;
      }
      json j = eval_report_json(rep);
      j["mode"] = mode;
      j["checkpoint"] = ck_path;
      j["test_fraction"] = test_fraction;
      j["seed"] = eval_seed;
      std::ofstream(report_path) << j.dump(2) << "\n";
      std::cout << "top1 = " << rep.top1 << " (report: " << report_path << ")\n";
      return 0;
    }

    if (*part) {
      auto ds = load_or_die(pds_path, pds_format);
      auto spec = fedx::dirichlet_partition(ds, pclients, pbeta, pseed, pmin);
      std::cout << "clients=" << spec.clients << " beta=" << spec.beta
                << " seed=" << spec.seed << " retries=" << spec.retries << "\n";
      for (std::size_t m = 0; m < spec.clients; ++m) {
        std::cout << "client " << m << ": " << spec.client_indices[m].size() << " samples";
        if (inspect) {
          std::vector<std::size_t> hist(ds.class_count, 0);
          for (auto i : spec.client_indices[m]) ++hist[ds.labels[i]];
          std::cout << " [";
          for (std::size_t c = 0; c < hist.size(); ++c)
            std::cout << (c ? " " : "") << hist[c];
          std::cout << "]";
        }
        std::cout << "\n";
      }
      if (!pout.empty()) {
        fedx::save_partition(spec, pout);
        std::cout << "partition spec written to " << pout << "\n";
      }
      return 0;
    }

    if (*ang) {
      auto ds = load_or_die(ads_path, ads_format);
      auto local = fedx::load_checkpoint<float>(local_ck);
      auto global = fedx::load_checkpoint<float>(global_ck);
      if (local.descriptor_hash != global.descriptor_hash ||
          local.params.descriptor().input_dim != ds.sample_dim()) {
        std::cerr << "descriptor mismatch between checkpoints/dataset\n";
        return kExitDescriptor;
      }
      auto [train_idx, test_idx] = fedx::stratified_split(ds, atest_fraction, aseed);
      auto rep = fedx::embedding_angle(local.params, global.params, ds, test_idx);
      auto inter = fedx::inter_class_angles(local.params, ds, test_idx);
      json j = {{"mean_angle_deg", rep.mean_angle_deg},
                {"per_class_mean_deg", rep.per_class_mean_deg},
                {"inter_class_deg", inter},
                {"mean_inter_class_deg", fedx::mean_offdiagonal(inter, ds.class_count)},
                {"samples", rep.per_sample_deg.size()}};
      std::ofstream(areport) << j.dump(2) << "\n";
      std::cout << "mean local-vs-global angle = " << rep.mean_angle_deg
                << " deg (report: " << areport << ")\n";
      return 0;
    }

    if (*synth) {
      auto ds = fedx::make_synthetic(sspec);
      if (sformat == "csv")
        fedx::save_csv(ds, sout);
      else
        fedx::save_fxds(ds, sout);
      std::cout << "wrote " << ds.count() << " samples to " << sout << "\n";
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  return 0;
}
