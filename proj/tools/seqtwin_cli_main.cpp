// seqtwin command-line front end: prepare | pretrain | finetune | report.
//
// Config precedence: every flag may also come from a JSON file passed with
// --config; explicit command-line flags win, and the merged configuration is
// echoed into the output directory so a run can be reproduced from its
// artifacts alone. Exit codes: 0 success, 2 user/config error, 1 internal.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "seqtwin/seqtwin.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json load_config_file(const std::string& path) {
  if (path.empty()) return json::object();
  std::ifstream in(path, std::ios::binary);
  if (!in) throw seqtwin::io_error("cannot open config file " + path);
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded() || !j.is_object())
    throw seqtwin::contract_error("config file " + path + " is not a JSON object");
  return j;
}

// Flag value if given on the command line, else the config-file value, else
// the built-in default already sitting in `value`.
template <class T>
void merge_option(const CLI::Option* opt, T& value, const json& file, const char* key) {
  if (opt && opt->count() > 0) return;
  if (file.contains(key)) value = file.at(key).get<T>();
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw seqtwin::io_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

std::string config_hash8(const json& j) {
  const std::string s = j.dump();
  std::uint64_t h = 1469598103934665603ull;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ull;
  }
  char buf[9];
  std::snprintf(buf, sizeof buf, "%08x", static_cast<std::uint32_t>(h ^ (h >> 32)));
  return buf;
}

// ---------------------------------------------------------------------------
// prepare
// ---------------------------------------------------------------------------

struct PrepareArgs {
  std::string config_file;
  std::string format = "movielens_1m";
  std::string data_dir;
  std::string out_dir;
  int seq_len = 16;
  int min_actions = 10;
  std::uint64_t split_seed = 1;
  std::int64_t max_sequences = 0;
  std::uint64_t subsample_seed = 1;
};

int run_prepare(const PrepareArgs& args) {
  seqtwin::PrepareOptions opt;
  opt.format = args.format;
  opt.data_dir = args.data_dir;
  opt.seq_len = args.seq_len;
  opt.min_actions = args.min_actions;
  opt.split_seed = args.split_seed;
  opt.max_sequences = args.max_sequences;
  opt.subsample_seed = args.subsample_seed;

  seqtwin::PrepareSummary summary;
  seqtwin::PreparedData data = seqtwin::prepare_dataset(opt, &summary);
  const fs::path out = args.out_dir;
  seqtwin::save_prepared(out, data);

  json echo{{"command", "prepare"},
            {"format", args.format},
            {"data_dir", args.data_dir},
            {"seq_len", args.seq_len},
            {"min_actions", args.min_actions},
            {"split_seed", args.split_seed},
            {"max_sequences", args.max_sequences},
            {"subsample_seed", args.subsample_seed}};
  write_json(out / "config.json", echo);
  json sj{{"raw_records", summary.raw_records},
          {"malformed_lines", summary.malformed_lines},
          {"users_total", summary.users_total},
          {"users_kept", summary.users_kept},
          {"items", summary.items},
          {"categories", summary.categories},
          {"sequences", summary.sequences},
          {"train", summary.train},
          {"val", summary.val},
          {"test", summary.test}};
  write_json(out / "summary.json", sj);

  std::cout << "prepared " << summary.sequences << " sequences from " << summary.users_kept
            << "/" << summary.users_total << " users over " << summary.items << " items ("
            << summary.categories << " categories)\n"
            << "split train/val/test = " << summary.train << "/" << summary.val << "/"
            << summary.test << "\n"
            << "malformed lines skipped: " << summary.malformed_lines << "\n"
            << "store written to " << out.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// pretrain
// ---------------------------------------------------------------------------

struct PretrainArgs {
  std::string config_file;
  std::string method = "bt";
  std::string data_dir;
  std::string out_dir;
  std::string aug = "segment_mask";
  double p = 0.2;
  int batch_size = 128;
  int epochs = 10;
  double lr = 1e-3;
  double lambda = 10.0;
  std::uint64_t seed = 1;
  std::string run_id;  // default derived from the config
};

int run_pretrain(const PretrainArgs& args) {
  if (args.method != "bt" && args.method != "de")
    throw seqtwin::contract_error("--method must be bt or de, got '" + args.method + "'");
  seqtwin::PreparedData data = seqtwin::load_prepared(args.data_dir);

  seqtwin::TrainConfig cfg;
  cfg.phase = args.method == "bt" ? seqtwin::Phase::bt_pretrain : seqtwin::Phase::de_pretrain;
  cfg.batch_size = args.batch_size;
  cfg.epochs = args.epochs;
  cfg.learning_rate = args.lr;
  cfg.bt_lambda = args.lambda;
  cfg.seed = args.seed;
  cfg.augmentation = {seqtwin::aug_kind_from_name(args.aug), args.p, args.seed};
  cfg.validate();

  json echo{{"command", "pretrain"}, {"method", args.method},
            {"data", args.data_dir},  {"aug", args.aug},
            {"p", args.p},            {"batch_size", args.batch_size},
            {"epochs", args.epochs},  {"lr", args.lr},
            {"lambda", args.lambda},  {"seed", args.seed}};
  cfg.run_id = args.run_id.empty()
                   ? args.method + "-" + (args.method == "bt" ? args.aug + "-" : std::string()) +
                         "bs" + std::to_string(args.batch_size) + "-s" +
                         std::to_string(args.seed) + "-" + config_hash8(echo)
                   : args.run_id;
  echo["run_id"] = cfg.run_id;

  const fs::path run_dir = fs::path(args.out_dir) / "runs" / cfg.run_id;
  fs::create_directories(run_dir);
  write_json(run_dir / "config.json", echo);

  std::vector<seqtwin::MetricsRow> metrics;
  if (cfg.phase == seqtwin::Phase::bt_pretrain) {
    auto result = seqtwin::pretrain_bt(data, cfg, run_dir);
    metrics = result.metrics;
    seqtwin::save_checkpoint(run_dir / "model.ckpt", result.bundle, echo);
    std::cout << "bt pretraining: initial loss " << result.initial_loss << ", final epoch loss "
              << result.epoch_losses.back() << ", off-diagonal |C| "
              << result.epoch_offdiag.back() << "\n";
  } else {
    auto result = seqtwin::pretrain_dual_encoder(data, cfg, run_dir);
    metrics = result.metrics;
    seqtwin::save_checkpoint(run_dir / "model.ckpt", result.bundle, echo);
    std::cout << "dual-encoder pretraining: initial loss " << result.initial_loss
              << ", final epoch loss " << result.epoch_losses.back() << ", recall@10 "
              << result.final_recall.at(10) << "\n";
  }
  const fs::path metrics_path = run_dir / "metrics.csv";
  fs::remove(metrics_path);  // rerunning the same run_id replaces its metrics
  seqtwin::append_metrics_csv(metrics_path, metrics);
  std::cout << "checkpoint: " << (run_dir / "model.ckpt").string() << "\n"
            << "metrics: " << metrics_path.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// finetune
// ---------------------------------------------------------------------------

struct FinetuneArgs {
  std::string config_file;
  std::string task = "favorite_category";
  std::string data_dir;
  std::string out_dir;
  std::string init = "scratch";  // checkpoint path or "scratch"
  std::string encoder = "fixed";
  double label_fraction = 1.0;
  int batch_size = 64;
  int epochs = 50;
  double lr = 1e-3;
  std::uint64_t seed = 1;
  std::string run_id;
  bool export_embeddings = false;
};

int run_finetune(const FinetuneArgs& args) {
  if (args.encoder != "fixed" && args.encoder != "trainable")
    throw seqtwin::contract_error("--encoder must be fixed or trainable, got '" + args.encoder +
                                  "'");
  const bool scratch = args.init == "scratch";
  const bool next_item = args.task == "next_item";
  if (!next_item && args.task != "favorite_category" && args.task != "age" &&
      args.task != "occupation")
    throw seqtwin::contract_error("unknown task '" + args.task + "'");
  if (next_item && args.label_fraction != 1.0)
    throw seqtwin::contract_error("--label-fraction applies to classification tasks only");

  seqtwin::PreparedData data = seqtwin::load_prepared(args.data_dir);
  seqtwin::Checkpoint ckpt;
  std::string method = "scratch";
  if (!scratch) {
    ckpt = seqtwin::load_checkpoint(args.init);
    method = ckpt.extra.contains("method") ? ckpt.extra["method"].get<std::string>() : "ckpt";
  }

  seqtwin::TrainConfig cfg;
  cfg.phase = next_item ? seqtwin::Phase::finetune_next_item : seqtwin::Phase::finetune_classify;
  cfg.batch_size = args.batch_size;
  cfg.epochs = args.epochs;
  cfg.learning_rate = args.lr;
  cfg.label_fraction = args.label_fraction;
  cfg.encoder_trainable = args.encoder == "trainable";
  cfg.seed = args.seed;
  cfg.task = args.task;
  cfg.validate();

  json echo{{"command", "finetune"},
            {"task", args.task},
            {"data", args.data_dir},
            {"init", args.init},
            {"method", method},
            {"encoder", args.encoder},
            {"label_fraction", args.label_fraction},
            {"batch_size", args.batch_size},
            {"epochs", args.epochs},
            {"lr", args.lr},
            {"seed", args.seed}};
  cfg.run_id = args.run_id.empty()
                   ? args.task + "-" + method + "-" + args.encoder + "-s" +
                         std::to_string(args.seed) + "-" + config_hash8(echo)
                   : args.run_id;
  echo["run_id"] = cfg.run_id;

  const fs::path run_dir = fs::path(args.out_dir) / "runs" / cfg.run_id;
  fs::create_directories(run_dir);
  write_json(run_dir / "config.json", echo);

  std::vector<seqtwin::MetricsRow> metrics;
  if (next_item) {
    seqtwin::NextItemResult result =
        scratch ? seqtwin::pretrain_dual_encoder(data, cfg, run_dir)
                : seqtwin::finetune_next_item(data, cfg, ckpt, run_dir);
    metrics = result.metrics;
    seqtwin::save_checkpoint(run_dir / "model.ckpt", result.bundle, echo);
    if (args.export_embeddings)
      seqtwin::export_embeddings(result.bundle, data.vocab, run_dir / "embeddings.csv");
    std::cout << "next-item finetuning (" << method << ", " << args.encoder << ")";
    for (auto [k, v] : result.best_recall) std::cout << "  best recall@" << k << " = " << v;
    std::cout << "\n";
  } else {
    seqtwin::FinetuneResult result =
        seqtwin::finetune_classifier(data, cfg, scratch ? nullptr : &ckpt, run_dir);
    metrics = result.metrics;
    seqtwin::save_checkpoint(run_dir / "model.ckpt", result.bundle, echo);
    if (args.export_embeddings)
      seqtwin::export_embeddings(result.bundle, data.vocab, run_dir / "embeddings.csv");
    std::cout << args.task << " (" << method << ", " << args.encoder << ", "
              << args.label_fraction * 100 << "% labels): best val acc "
              << result.best_val_accuracy << " (epoch " << result.best_epoch
              << "), final val acc " << result.final_val_accuracy << "\n";
  }
  const fs::path metrics_path = run_dir / "metrics.csv";
  fs::remove(metrics_path);
  seqtwin::append_metrics_csv(metrics_path, metrics);
  std::cout << "metrics: " << metrics_path.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

struct ReportArgs {
  std::string runs_dir;
  std::string out_dir;
};

struct ReportRow {
  std::string task, method, encoder, run_id, metric;
  double label_fraction = 1.0;
  double best = 0.0, final_value = 0.0;
};

int run_report(const ReportArgs& args) {
  std::vector<ReportRow> rows;
  const fs::path runs(args.runs_dir);
  std::vector<fs::path> run_dirs;
  if (fs::exists(runs))
    for (const auto& entry : fs::directory_iterator(runs))
      if (entry.is_directory() && fs::exists(entry.path() / "metrics.csv"))
        run_dirs.push_back(entry.path());
  std::sort(run_dirs.begin(), run_dirs.end());

  for (const auto& dir : run_dirs) {
    json cfg = json::object();
    if (fs::exists(dir / "config.json")) {
      std::ifstream in(dir / "config.json", std::ios::binary);
      cfg = json::parse(in, nullptr, false);
      if (cfg.is_discarded()) cfg = json::object();
    }
    // collect summary metrics: the best_*/final_* pairs written by the loops
    std::map<std::string, std::pair<double, double>> pairs;
    std::ifstream in(dir / "metrics.csv", std::ios::binary);
    std::string line;
    std::getline(in, line);  // header
    while (std::getline(in, line)) {
      std::vector<std::string> f;
      std::string cur;
      for (char c : line)
        if (c == ',') {
          f.push_back(cur);
          cur.clear();
        } else {
          cur += c;
        }
      f.push_back(cur);
      if (f.size() != 6) continue;
      const std::string& metric = f[4];
      const double value = std::stod(f[5]);
      if (metric.rfind("best_", 0) == 0)
        pairs[metric.substr(5)].first = value;
      else if (metric.rfind("final_", 0) == 0)
        pairs[metric.substr(6)].second = value;
    }
    for (const auto& [metric, bf] : pairs) {
      ReportRow row;
      row.run_id = cfg.value("run_id", dir.filename().string());
      row.task = cfg.value("task", cfg.value("command", "") == "pretrain" ? "pretrain" : "?");
      row.method = cfg.value("method", "?");
      row.encoder = cfg.value("encoder", "-");
      row.label_fraction = cfg.value("label_fraction", 1.0);
      row.metric = metric;
      row.best = bf.first;
      row.final_value = bf.second;
      rows.push_back(row);
    }
  }
  std::sort(rows.begin(), rows.end(), [](const ReportRow& a, const ReportRow& b) {
    if (a.task != b.task) return a.task < b.task;
    if (a.method != b.method) return a.method < b.method;
    if (a.metric != b.metric) return a.metric < b.metric;
    return a.run_id < b.run_id;
  });

  const char* header[] = {"task", "method", "encoder", "label_fraction",
                          "metric", "best",  "final",   "run_id"};
  std::vector<std::vector<std::string>> cells;
  for (const auto& r : rows)
    cells.push_back({r.task, r.method, r.encoder, seqtwin::format_metric_value(r.label_fraction),
                     r.metric, seqtwin::format_metric_value(r.best),
                     seqtwin::format_metric_value(r.final_value), r.run_id});

  if (!args.out_dir.empty()) fs::create_directories(args.out_dir);
  const fs::path csv_path =
      args.out_dir.empty() ? fs::path("report.csv") : fs::path(args.out_dir) / "report.csv";
  {
    std::ofstream out(csv_path, std::ios::binary);
    if (!out) throw seqtwin::io_error("cannot write " + csv_path.string());
    for (std::size_t c = 0; c < 8; ++c) out << (c ? "," : "") << header[c];
    out << '\n';
    for (const auto& row : cells) {
      for (std::size_t c = 0; c < 8; ++c) out << (c ? "," : "") << row[c];
      out << '\n';
    }
  }

  std::vector<std::size_t> width(8);
  for (std::size_t c = 0; c < 8; ++c) width[c] = std::string(header[c]).size();
  for (const auto& row : cells)
    for (std::size_t c = 0; c < 8; ++c) width[c] = std::max(width[c], row[c].size());
  auto print_row = [&](const std::vector<std::string>& row) {
    for (std::size_t c = 0; c < 8; ++c) {
      std::cout << row[c];
      if (c + 1 < 8) std::cout << std::string(width[c] - row[c].size() + 2, ' ');
    }
    std::cout << '\n';
  };
  print_row({header[0], header[1], header[2], header[3], header[4], header[5], header[6],
             header[7]});
  for (const auto& row : cells) print_row(row);
  std::cout << "report written to " << csv_path.string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sequence-level user representations: Barlow Twins pretraining,"
               " dual-encoder baselines, classification and next-item evaluation"};
  app.require_subcommand(1);

  PrepareArgs prep;
  CLI::App* prepare = app.add_subcommand("prepare", "ingest a raw dataset into a sequence store");
  prepare->add_option("--config", prep.config_file, "JSON config file (flags override)");
  auto* p_format = prepare->add_option("--format", prep.format,
                                       "movielens_1m | movielens_20m | yelp");
  auto* p_data = prepare->add_option("--data-dir", prep.data_dir, "raw dataset directory");
  auto* p_out = prepare->add_option("--out", prep.out_dir, "output directory");
  auto* p_seq = prepare->add_option("--seq-len", prep.seq_len, "window length");
  auto* p_min = prepare->add_option("--min-actions", prep.min_actions, "min actions per user");
  auto* p_seed = prepare->add_option("--split-seed", prep.split_seed, "split shuffle seed");
  auto* p_max = prepare->add_option("--max-sequences", prep.max_sequences,
                                    "subsample to at most this many sequences (0 = all)");
  auto* p_sseed = prepare->add_option("--subsample-seed", prep.subsample_seed, "subsample seed");

  PretrainArgs pre;
  CLI::App* pretrain = app.add_subcommand("pretrain",
                                          "self-supervised or dual-encoder pretraining");
  pretrain->add_option("--config", pre.config_file, "JSON config file (flags override)");
  auto* t_method = pretrain->add_option("--method", pre.method, "bt | de");
  auto* t_data = pretrain->add_option("--data", pre.data_dir, "prepared dataset directory");
  auto* t_out = pretrain->add_option("--out", pre.out_dir, "output directory");
  auto* t_aug = pretrain->add_option("--aug", pre.aug,
                                     "random_mask | segment_mask | permute (bt only)");
  auto* t_p = pretrain->add_option("--p", pre.p, "augmentation probability");
  auto* t_bs = pretrain->add_option("--batch-size", pre.batch_size, "pretraining batch size");
  auto* t_epochs = pretrain->add_option("--epochs", pre.epochs, "epochs");
  auto* t_lr = pretrain->add_option("--lr", pre.lr, "Adam learning rate");
  auto* t_lambda = pretrain->add_option("--lambda", pre.lambda, "redundancy weight");
  auto* t_seed = pretrain->add_option("--seed", pre.seed, "run seed");
  auto* t_run = pretrain->add_option("--run-id", pre.run_id, "override the derived run id");

  FinetuneArgs fin;
  CLI::App* finetune = app.add_subcommand("finetune", "train a downstream head");
  finetune->add_option("--config", fin.config_file, "JSON config file (flags override)");
  auto* f_task = finetune->add_option("--task", fin.task,
                                      "favorite_category | age | occupation | next_item");
  auto* f_data = finetune->add_option("--data", fin.data_dir, "prepared dataset directory");
  auto* f_out = finetune->add_option("--out", fin.out_dir, "output directory");
  auto* f_init = finetune->add_option("--init", fin.init, "checkpoint path or 'scratch'");
  auto* f_encoder = finetune->add_option("--encoder", fin.encoder, "fixed | trainable");
  auto* f_frac = finetune->add_option("--label-fraction", fin.label_fraction,
                                      "fraction of train labels to use");
  auto* f_bs = finetune->add_option("--batch-size", fin.batch_size, "batch size");
  auto* f_epochs = finetune->add_option("--epochs", fin.epochs, "epochs");
  auto* f_lr = finetune->add_option("--lr", fin.lr, "Adam learning rate");
  auto* f_seed = finetune->add_option("--seed", fin.seed, "run seed");
  auto* f_run = finetune->add_option("--run-id", fin.run_id, "override the derived run id");
  auto* f_export = finetune->add_flag("--export-embeddings", fin.export_embeddings,
                                      "write item embeddings as CSV");

  ReportArgs rep;
  CLI::App* report = app.add_subcommand("report", "consolidate run metrics into a table");
  auto* r_runs = report->add_option("--runs", rep.runs_dir,
                                    "directory holding run subdirectories");
  report->add_option("--out", rep.out_dir, "where to write report.csv (default: cwd)");

  try {
    app.parse(argc, argv);

    if (prepare->parsed()) {
      const json file = load_config_file(prep.config_file);
      merge_option(p_format, prep.format, file, "format");
      merge_option(p_data, prep.data_dir, file, "data_dir");
      merge_option(p_out, prep.out_dir, file, "out");
      merge_option(p_seq, prep.seq_len, file, "seq_len");
      merge_option(p_min, prep.min_actions, file, "min_actions");
      merge_option(p_seed, prep.split_seed, file, "split_seed");
      merge_option(p_max, prep.max_sequences, file, "max_sequences");
      merge_option(p_sseed, prep.subsample_seed, file, "subsample_seed");
      if (prep.data_dir.empty() || prep.out_dir.empty())
        throw seqtwin::contract_error("prepare needs --data-dir and --out");
      if (!fs::exists(prep.data_dir))
        throw seqtwin::io_error("data directory does not exist: " + prep.data_dir);
      return run_prepare(prep);
    }
    if (pretrain->parsed()) {
      const json file = load_config_file(pre.config_file);
      merge_option(t_method, pre.method, file, "method");
      merge_option(t_data, pre.data_dir, file, "data");
      merge_option(t_out, pre.out_dir, file, "out");
      merge_option(t_aug, pre.aug, file, "aug");
      merge_option(t_p, pre.p, file, "p");
      merge_option(t_bs, pre.batch_size, file, "batch_size");
      merge_option(t_epochs, pre.epochs, file, "epochs");
      merge_option(t_lr, pre.lr, file, "lr");
      merge_option(t_lambda, pre.lambda, file, "lambda");
      merge_option(t_seed, pre.seed, file, "seed");
      merge_option(t_run, pre.run_id, file, "run_id");
      if (pre.data_dir.empty() || pre.out_dir.empty())
        throw seqtwin::contract_error("pretrain needs --data and --out");
      return run_pretrain(pre);
    }
    if (finetune->parsed()) {
      const json file = load_config_file(fin.config_file);
      merge_option(f_task, fin.task, file, "task");
      merge_option(f_data, fin.data_dir, file, "data");
      merge_option(f_out, fin.out_dir, file, "out");
      merge_option(f_init, fin.init, file, "init");
      merge_option(f_encoder, fin.encoder, file, "encoder");
      merge_option(f_frac, fin.label_fraction, file, "label_fraction");
      merge_option(f_bs, fin.batch_size, file, "batch_size");
      merge_option(f_epochs, fin.epochs, file, "epochs");
      merge_option(f_lr, fin.lr, file, "lr");
      merge_option(f_seed, fin.seed, file, "seed");
      merge_option(f_run, fin.run_id, file, "run_id");
      merge_option(f_export, fin.export_embeddings, file, "export_embeddings");
      if (fin.data_dir.empty() || fin.out_dir.empty())
        throw seqtwin::contract_error("finetune needs --data and --out");
      return run_finetune(fin);
    }
    if (report->parsed()) {
      if (r_runs->count() == 0) throw seqtwin::contract_error("report needs --runs");
      return run_report(rep);
    }
    return 2;
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const seqtwin::contract_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const seqtwin::shape_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const seqtwin::io_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 1;
  }
}
