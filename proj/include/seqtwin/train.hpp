#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "seqtwin/augment.hpp"
#include "seqtwin/dataset.hpp"
#include "seqtwin/loss.hpp"
#include "seqtwin/model.hpp"

namespace seqtwin {

enum class Phase { bt_pretrain, de_pretrain, finetune_classify, finetune_next_item };

inline std::string phase_name(Phase p) {
  switch (p) {
    case Phase::bt_pretrain: return "bt_pretrain";
    case Phase::de_pretrain: return "de_pretrain";
    case Phase::finetune_classify: return "finetune_classify";
    case Phase::finetune_next_item: return "finetune_next_item";
  }
  return "?";
}

struct TrainConfig {
  Phase phase = Phase::bt_pretrain;
  int batch_size = 128;
  int epochs = 10;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double label_fraction = 1.0;
  bool encoder_trainable = false;
  AugmentationSpec augmentation;
  double bt_lambda = 10.0;
  std::uint64_t seed = 1;
  std::string task = "favorite_category";
  std::vector<int> recall_ks{1, 5, 10};
  std::string run_id = "run";

  void validate() const {
    if (batch_size < 1) throw contract_error("batch_size must be >= 1");
    if (phase == Phase::bt_pretrain && batch_size < 2)
      throw contract_error("bt_pretrain needs batch_size >= 2 for the cross-correlation");
    if (epochs < 1) throw contract_error("epochs must be >= 1");
    if (!(label_fraction > 0.0) || label_fraction > 1.0)
      throw contract_error("label_fraction must be in (0, 1]");
    if (phase == Phase::bt_pretrain) augmentation.validate();
  }
};

struct MetricsRow {
  std::string run_id;
  std::string phase;
  int epoch = 0;
  std::string split;
  std::string metric;
  double value = 0.0;
};

inline std::string format_metric_value(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// Appends rows to metrics.csv, writing the header on first touch.
inline void append_metrics_csv(const std::filesystem::path& path,
                               const std::vector<MetricsRow>& rows) {
  const bool fresh = !std::filesystem::exists(path);
  std::ofstream out(path, std::ios::binary | std::ios::app);
  if (!out) throw io_error("cannot write " + path.string());
  if (fresh) out << "run_id,phase,epoch,split,metric,value\n";
  for (const auto& r : rows) {
    if (!std::isfinite(r.value))
      throw std::runtime_error("non-finite metric value for " + r.metric);
    out << r.run_id << ',' << r.phase << ',' << r.epoch << ',' << r.split << ',' << r.metric
        << ',' << format_metric_value(r.value) << '\n';
  }
}

// Adam with bias correction. Frozen parameters (requires_grad false) are
// skipped outright: weights, moments, and step accounting never touch them.
class AdamOptimizer {
 public:
  AdamOptimizer(std::vector<Tensor> params, double lr, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8)
      : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    m_.resize(params_.size());
    v_.resize(params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i) {
      m_[i].assign(params_[i].size(), 0.0);
      v_[i].assign(params_[i].size(), 0.0);
    }
  }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor& p = params_[i];
      if (!p.requires_grad()) continue;
      const bool has_grad = p.has_grad();
      const double* g = has_grad ? p.grad() : nullptr;
      double* m = m_[i].data();
      double* v = v_[i].data();
      double* w = p.data();
      for (std::size_t k = 0; k < p.size(); ++k) {
        const double gk = has_grad ? g[k] : 0.0;
        m[k] = beta1_ * m[k] + (1.0 - beta1_) * gk;
        v[k] = beta2_ * v[k] + (1.0 - beta2_) * gk * gk;
        w[k] -= lr_ * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + eps_);
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_, v_;
  double lr_, beta1_, beta2_, eps_;
  std::int64_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Shared loop plumbing.
// ---------------------------------------------------------------------------

namespace detail {

constexpr std::uint64_t kEpochShuffleTag = 0xE78C;

inline std::vector<std::int64_t> epoch_order(const std::vector<std::int64_t>& ids,
                                             std::uint64_t seed, std::uint64_t phase_tag,
                                             int epoch) {
  std::vector<std::int64_t> order = ids;
  Rng rng = Rng(seed).derive({kEpochShuffleTag, phase_tag, static_cast<std::uint64_t>(epoch)});
  rng.shuffle(order);
  return order;
}

inline std::vector<std::int32_t> flatten_items(const std::vector<UserSequence>& seqs) {
  std::vector<std::int32_t> flat;
  if (seqs.empty()) return flat;
  flat.reserve(seqs.size() * seqs.front().items.size());
  for (const auto& s : seqs) flat.insert(flat.end(), s.items.begin(), s.items.end());
  return flat;
}

inline std::vector<std::int32_t> flatten_ids(const PreparedData& data,
                                             const std::vector<std::int64_t>& ids) {
  std::vector<std::int32_t> flat;
  flat.reserve(ids.size() * static_cast<std::size_t>(data.seq_len));
  for (std::int64_t id : ids) {
    const auto& s = data.sequences[static_cast<std::size_t>(id)];
    flat.insert(flat.end(), s.items.begin(), s.items.end());
  }
  return flat;
}

inline void guard_finite_loss(double loss, const char* what) {
  if (!std::isfinite(loss))
    throw std::runtime_error(std::string(what) + " diverged (non-finite loss)");
}

inline void save_epoch_checkpoint(const std::filesystem::path& run_dir, int epoch,
                                  const ModelBundle& bundle, const nlohmann::json& extra) {
  if (run_dir.empty()) return;
  const auto dir = run_dir / ("epoch" + std::to_string(epoch));
  std::filesystem::create_directories(dir);
  save_checkpoint(dir / "model.ckpt", bundle, extra);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Evaluation.
// ---------------------------------------------------------------------------

// Fraction of rows whose argmax logit (ties to the lowest index) equals the
// label.
inline double eval_accuracy(const Tensor& logits, const std::vector<int>& labels) {
  if (logits.ndim() != 2 || static_cast<std::size_t>(logits.dim(0)) != labels.size())
    throw contract_error("eval_accuracy: logits " + shape_str(logits.shape()) + " vs " +
                         std::to_string(labels.size()) + " labels");
  const int b = logits.dim(0), n = logits.dim(1);
  if (b == 0) return 0.0;
  std::int64_t correct = 0;
  const double* lp = logits.data();
  for (int i = 0; i < b; ++i) {
    const double* row = lp + static_cast<std::size_t>(i) * n;
    int arg = 0;
    for (int j = 1; j < n; ++j)
      if (row[j] > row[arg]) arg = j;
    if (arg == labels[static_cast<std::size_t>(i)]) ++correct;
  }
  return static_cast<double>(correct) / b;
}

// Item-embedding rows 1..V as an [V x d] matrix (row 0 / mask excluded).
inline Tensor real_item_embeddings(const ModelBundle& bundle) {
  const int rows = bundle.embedding.weights.dim(0), d = bundle.embedding.weights.dim(1);
  Tensor out = Tensor::zeros({rows - 1, d});
  std::copy(bundle.embedding.weights.data() + d,
            bundle.embedding.weights.data() + static_cast<std::size_t>(rows) * d, out.data());
  return out;
}

// Fraction of sequences whose true next item lands in the top k by cosine
// similarity over all V real items; score ties rank the lower item index
// first. Returns one value per requested k.
inline std::map<int, double> eval_topk_recall(const ModelBundle& bundle, const PreparedData& data,
                                              const std::vector<std::int64_t>& ids,
                                              const std::vector<int>& ks, int eval_batch = 256) {
  if (!bundle.context) throw contract_error("eval_topk_recall needs a context head");
  const std::int32_t V = static_cast<std::int32_t>(bundle.embedding.weights.dim(0)) - 1;
  for (int k : ks)
    if (k < 1 || k > V) throw contract_error("recall k=" + std::to_string(k) + " out of [1,V]");
  Tensor item_embs = real_item_embeddings(bundle);
  std::vector<std::int64_t> usable;
  usable.reserve(ids.size());
  for (std::int64_t id : ids)
    if (data.sequences[static_cast<std::size_t>(id)].next_item > 0) usable.push_back(id);
  std::map<int, std::int64_t> hits;
  for (int k : ks) hits[k] = 0;
  Tape tape;
  NoGradGuard ng(tape);
  for (std::size_t start = 0; start < usable.size(); start += static_cast<std::size_t>(eval_batch)) {
    const std::size_t stop = std::min(usable.size(), start + static_cast<std::size_t>(eval_batch));
    std::vector<std::int64_t> batch_ids(usable.begin() + static_cast<std::ptrdiff_t>(start),
                                        usable.begin() + static_cast<std::ptrdiff_t>(stop));
    Tensor reps = encode(tape, bundle, detail::flatten_ids(data, batch_ids),
                         static_cast<int>(batch_ids.size()));
    Tensor ctx = context_forward(tape, reps, *bundle.context);
    Tensor scores = score_items(ctx, item_embs, Similarity::cosine);
    const double* sp = scores.data();
    for (std::size_t r = 0; r < batch_ids.size(); ++r) {
      const auto& seq = data.sequences[static_cast<std::size_t>(batch_ids[r])];
      const int target = seq.next_item - 1;  // row in item_embs
      const double* row = sp + r * static_cast<std::size_t>(V);
      const double ts = row[target];
      std::int64_t rank = 1;
      for (int j = 0; j < V; ++j) {
        if (row[j] > ts || (row[j] == ts && j < target)) ++rank;
      }
      for (int k : ks)
        if (rank <= k) ++hits[k];
    }
  }
  std::map<int, double> recall;
  for (int k : ks)
    recall[k] = usable.empty() ? 0.0 : static_cast<double>(hits[k]) / static_cast<double>(usable.size());
  return recall;
}

// CSV export of the item-embedding table: item_id,category_list,e1..e_d.
inline void export_embeddings(const ModelBundle& bundle, const Vocabulary& vocab,
                              const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw io_error("cannot write " + path.string());
  const int d = bundle.embedding.weights.dim(1);
  out << "item_id,category_list";
  for (int j = 1; j <= d; ++j) out << ",e" << j;
  out << '\n';
  const std::int32_t V = vocab.size();
  for (std::int32_t i = 1; i <= V; ++i) {
    out << vocab.item_id(i) << ',';
    const auto& cats = vocab.item_categories(i);
    for (std::size_t c = 0; c < cats.size(); ++c) {
      if (c) out << '|';
      out << vocab.category_names()[static_cast<std::size_t>(cats[c])];
    }
    const double* row = bundle.embedding.weights.data() + static_cast<std::size_t>(i) * d;
    for (int j = 0; j < d; ++j) out << ',' << format_metric_value(row[j]);
    out << '\n';
  }
}

// ---------------------------------------------------------------------------
// Barlow Twins pretraining.
// ---------------------------------------------------------------------------

struct PretrainResult {
  ModelBundle bundle;
  std::vector<MetricsRow> metrics;
  double initial_loss = 0.0;
  std::vector<double> epoch_losses;
  std::vector<double> epoch_offdiag;  // BT only
};

inline PretrainResult pretrain_bt(const PreparedData& data, const TrainConfig& cfg,
                                  const std::filesystem::path& run_dir = {}) {
  TrainConfig config = cfg;
  config.phase = Phase::bt_pretrain;
  config.validate();
  ModelConfig mc;
  mc.vocab_size = data.vocab.size();
  mc.seq_len = data.seq_len;
  ModelBundle bundle = make_bundle(mc, {.projector = true});
  init_parameters(bundle, config.seed);
  AdamOptimizer opt(bundle.parameters(), config.learning_rate, config.beta1, config.beta2,
                    config.adam_eps);

  PretrainResult result;
  result.bundle = bundle;
  const std::string phase = phase_name(Phase::bt_pretrain);
  bool recorded_initial = false;

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    auto order = detail::epoch_order(data.manifest.train, config.seed, 0xB7, epoch);
    double loss_sum = 0.0, offdiag_sum = 0.0;
    std::int64_t batches = 0;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t stop =
          std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      if (stop - start < 2) continue;  // cross-correlation needs >= 2 rows
      std::vector<UserSequence> batch;
      batch.reserve(stop - start);
      for (std::size_t i = start; i < stop; ++i)
        batch.push_back(data.sequences[static_cast<std::size_t>(order[i])]);
      auto [view1, view2] = make_views(batch, config.augmentation,
                                       static_cast<std::uint64_t>(epoch), batches);
      const int b = static_cast<int>(batch.size());
      Tape tape;
      Tensor y1 = project(tape, encode(tape, bundle, detail::flatten_items(view1), b),
                          *bundle.projector);
      Tensor y2 = project(tape, encode(tape, bundle, detail::flatten_items(view2), b),
                          *bundle.projector);
      Tensor loss = barlow_twins_loss(tape, y1, y2, config.bt_lambda);
      detail::guard_finite_loss(loss.value(), "bt_pretrain");
      const double offdiag = mean_abs_off_diagonal(y1, y2);
      if (!recorded_initial) {
        recorded_initial = true;
        result.initial_loss = loss.value();
        result.metrics.push_back({config.run_id, phase, 0, "train", "loss", loss.value()});
        result.metrics.push_back(
            {config.run_id, phase, 0, "train", "offdiag_mean_abs", offdiag});
      }
      opt.zero_grad();
      tape.backward(loss);
      opt.step();
      loss_sum += loss.value();
      offdiag_sum += offdiag;
      ++batches;
    }
    if (batches == 0) throw contract_error("bt_pretrain: no usable batches in the train split");
    result.epoch_losses.push_back(loss_sum / static_cast<double>(batches));
    result.epoch_offdiag.push_back(offdiag_sum / static_cast<double>(batches));
    result.metrics.push_back(
        {config.run_id, phase, epoch, "train", "loss", result.epoch_losses.back()});
    result.metrics.push_back(
        {config.run_id, phase, epoch, "train", "offdiag_mean_abs", result.epoch_offdiag.back()});
    detail::save_epoch_checkpoint(run_dir, epoch, bundle,
                                  {{"phase", phase}, {"seed", config.seed}, {"epoch", epoch}});
  }
  return result;
}

// ---------------------------------------------------------------------------
// Dual-encoder training (from-scratch pretraining or fine-tuning from a
// Barlow Twins checkpoint).
// ---------------------------------------------------------------------------

struct NextItemResult {
  ModelBundle bundle;
  std::vector<MetricsRow> metrics;
  double initial_loss = 0.0;
  std::vector<double> epoch_losses;
  std::map<int, double> best_recall;
  std::map<int, double> final_recall;
};

namespace detail {

inline NextItemResult train_next_item(const PreparedData& data, const TrainConfig& config,
                                      const Checkpoint* init,
                                      const std::filesystem::path& run_dir) {
  config.validate();
  ModelBundle bundle;
  if (init) {
    ModelBundle loaded = bundle_from_checkpoint(*init);
    ModelBundle fresh = make_bundle(loaded.config, {.context = true});
    fresh.embedding.weights.values() = loaded.embedding.weights.values();
    fresh.encoder.kernels1.values() = loaded.encoder.kernels1.values();
    fresh.encoder.bias1.values() = loaded.encoder.bias1.values();
    fresh.encoder.kernels2.values() = loaded.encoder.kernels2.values();
    fresh.encoder.bias2.values() = loaded.encoder.bias2.values();
    bundle = std::move(fresh);
    // context head starts fresh either way
    detail::fill_glorot_uniform(bundle.context->w1, bundle.context->w1.dim(0),
                                bundle.context->w1.dim(1),
                                detail::init_stream(config.seed, "context.w1"));
    detail::fill_glorot_uniform(bundle.context->w2, bundle.context->w2.dim(0),
                                bundle.context->w2.dim(1),
                                detail::init_stream(config.seed, "context.w2"));
  } else {
    ModelConfig mc;
    mc.vocab_size = data.vocab.size();
    mc.seq_len = data.seq_len;
    bundle = make_bundle(mc, {.context = true});
    init_parameters(bundle, config.seed);
  }
  bundle.set_encoder_trainable(config.encoder_trainable);
  AdamOptimizer opt(bundle.parameters(), config.learning_rate, config.beta1, config.beta2,
                    config.adam_eps);

  std::vector<std::int64_t> train_ids;
  for (std::int64_t id : data.manifest.train)
    if (data.sequences[static_cast<std::size_t>(id)].next_item > 0) train_ids.push_back(id);
  if (train_ids.empty()) throw contract_error("next-item training: no sequences with targets");

  NextItemResult result;
  result.bundle = bundle;
  const std::string phase = phase_name(config.phase);
  bool recorded_initial = false;

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    auto order = detail::epoch_order(train_ids, config.seed, 0xDE, epoch);
    double loss_sum = 0.0;
    std::int64_t batches = 0;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t stop =
          std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      std::vector<std::int64_t> batch_ids(order.begin() + static_cast<std::ptrdiff_t>(start),
                                          order.begin() + static_cast<std::ptrdiff_t>(stop));
      std::vector<std::int32_t> targets;
      targets.reserve(batch_ids.size());
      for (std::int64_t id : batch_ids)
        targets.push_back(data.sequences[static_cast<std::size_t>(id)].next_item);
      Tape tape;
      Tensor reps = encode(tape, bundle, detail::flatten_ids(data, batch_ids),
                           static_cast<int>(batch_ids.size()));
      Tensor ctx = context_forward(tape, reps, *bundle.context);
      Tensor loss = in_batch_contrastive_loss(tape, ctx, targets, bundle.embedding.weights);
      detail::guard_finite_loss(loss.value(), phase.c_str());
      if (!recorded_initial) {
        recorded_initial = true;
        result.initial_loss = loss.value();
        result.metrics.push_back({config.run_id, phase, 0, "train", "loss", loss.value()});
      }
      opt.zero_grad();
      tape.backward(loss);
      opt.step();
      loss_sum += loss.value();
      ++batches;
    }
    result.epoch_losses.push_back(loss_sum / static_cast<double>(batches));
    result.metrics.push_back(
        {config.run_id, phase, epoch, "train", "loss", result.epoch_losses.back()});
    auto recall = eval_topk_recall(bundle, data, data.manifest.val, config.recall_ks);
    for (auto [k, v] : recall) {
      result.metrics.push_back(
          {config.run_id, phase, epoch, "val", "recall@" + std::to_string(k), v});
      auto it = result.best_recall.find(k);
      if (it == result.best_recall.end() || v > it->second) result.best_recall[k] = v;
    }
    result.final_recall = recall;
    detail::save_epoch_checkpoint(run_dir, epoch, bundle,
                                  {{"phase", phase}, {"seed", config.seed}, {"epoch", epoch}});
  }
  for (auto [k, v] : result.best_recall)
    result.metrics.push_back({config.run_id, phase, config.epochs, "val",
                              "best_recall@" + std::to_string(k), v});
  for (auto [k, v] : result.final_recall)
    result.metrics.push_back({config.run_id, phase, config.epochs, "val",
                              "final_recall@" + std::to_string(k), v});
  return result;
}

}  // namespace detail

// Dual-encoder baseline trained from scratch on (context, next item) pairs.
inline NextItemResult pretrain_dual_encoder(const PreparedData& data, const TrainConfig& cfg,
                                            const std::filesystem::path& run_dir = {}) {
  TrainConfig config = cfg;
  config.phase = Phase::de_pretrain;
  config.encoder_trainable = true;  // scratch training updates everything
  return detail::train_next_item(data, config, nullptr, run_dir);
}

// Dual encoder initialized from pretrained weights; encoder_mode decides
// whether U stays frozen.
inline NextItemResult finetune_next_item(const PreparedData& data, const TrainConfig& cfg,
                                         const Checkpoint& init,
                                         const std::filesystem::path& run_dir = {}) {
  TrainConfig config = cfg;
  config.phase = Phase::finetune_next_item;
  return detail::train_next_item(data, config, &init, run_dir);
}

// ---------------------------------------------------------------------------
// Sequence-level classification fine-tuning.
// ---------------------------------------------------------------------------

// Dense class mapping for one classification task. Labels are -1 where the
// task is undefined for a sequence.
struct LabelTask {
  std::string name;
  int n_classes = 0;
  std::vector<std::int32_t> labels;  // indexed by seq_id

  static LabelTask build(const PreparedData& data, const std::string& task) {
    LabelTask t;
    t.name = task;
    t.labels.assign(data.sequences.size(), -1);
    if (task == "favorite_category") {
      t.n_classes = static_cast<int>(data.vocab.category_names().size());
      if (t.n_classes == 0)
        throw contract_error("favorite_category task: the dataset has no categories");
      for (const auto& s : data.sequences)
        t.labels[static_cast<std::size_t>(s.seq_id)] = s.favorite_category;
    } else if (task == "age" || task == "occupation") {
      std::set<std::int32_t> codes;
      for (const auto& s : data.sequences) {
        const std::int32_t code = task == "age" ? s.age_group : s.occupation;
        if (code >= 0) codes.insert(code);
      }
      if (codes.empty())
        throw contract_error("task '" + task + "': no labels present in this dataset");
      std::map<std::int32_t, std::int32_t> dense;
      for (std::int32_t c : codes) {
        const auto next = static_cast<std::int32_t>(dense.size());
        dense[c] = next;
      }
      t.n_classes = static_cast<int>(dense.size());
      for (const auto& s : data.sequences) {
        const std::int32_t code = task == "age" ? s.age_group : s.occupation;
        if (code >= 0) t.labels[static_cast<std::size_t>(s.seq_id)] = dense[code];
      }
    } else {
      throw contract_error("unknown classification task '" + task + "'");
    }
    return t;
  }
};

struct FinetuneResult {
  ModelBundle bundle;
  std::vector<MetricsRow> metrics;
  double best_val_accuracy = 0.0;
  double final_val_accuracy = 0.0;
  int best_epoch = 0;
};

namespace detail {

// Rows of a cached representation matrix as a fresh constant tensor.
inline Tensor gather_rows(const std::vector<double>& reps, int dim,
                          const std::vector<std::size_t>& rows) {
  Tensor out = Tensor::zeros({static_cast<int>(rows.size()), dim});
  double* op = out.data();
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy(reps.begin() + static_cast<std::ptrdiff_t>(rows[i] * static_cast<std::size_t>(dim)),
              reps.begin() + static_cast<std::ptrdiff_t>((rows[i] + 1) * static_cast<std::size_t>(dim)),
              op + i * static_cast<std::size_t>(dim));
  return out;
}

}  // namespace detail

// Trains a classification head on top of the representation model. `init`
// null means from-scratch baseline (everything trainable from random init);
// otherwise embedding/encoder load from the checkpoint and encoder_mode
// decides whether they move. With a fixed encoder the representations are
// computed once and reused every epoch.
inline FinetuneResult finetune_classifier(const PreparedData& data, const TrainConfig& cfg,
                                          const Checkpoint* init,
                                          const std::filesystem::path& run_dir = {}) {
  TrainConfig config = cfg;
  config.phase = Phase::finetune_classify;
  config.validate();
  LabelTask task = LabelTask::build(data, config.task);

  ModelBundle bundle;
  const bool scratch = init == nullptr;
  const bool encoder_trainable = scratch ? true : config.encoder_trainable;
  if (scratch) {
    ModelConfig mc;
    mc.vocab_size = data.vocab.size();
    mc.seq_len = data.seq_len;
    bundle = make_bundle(mc, {.classifier = true, .n_classes = task.n_classes});
    init_parameters(bundle, config.seed);
  } else {
    ModelBundle loaded = bundle_from_checkpoint(*init);
    bundle = make_bundle(loaded.config, {.classifier = true, .n_classes = task.n_classes});
    bundle.embedding.weights.values() = loaded.embedding.weights.values();
    bundle.encoder.kernels1.values() = loaded.encoder.kernels1.values();
    bundle.encoder.bias1.values() = loaded.encoder.bias1.values();
    bundle.encoder.kernels2.values() = loaded.encoder.kernels2.values();
    bundle.encoder.bias2.values() = loaded.encoder.bias2.values();
    detail::fill_glorot_uniform(bundle.classifier->w1, bundle.classifier->w1.dim(0),
                                bundle.classifier->w1.dim(1),
                                detail::init_stream(config.seed, "classifier.w1"));
    detail::fill_glorot_uniform(bundle.classifier->w2, bundle.classifier->w2.dim(0),
                                bundle.classifier->w2.dim(1),
                                detail::init_stream(config.seed, "classifier.w2"));
  }
  bundle.set_encoder_trainable(encoder_trainable);
  AdamOptimizer opt(bundle.parameters(), config.learning_rate, config.beta1, config.beta2,
                    config.adam_eps);

  auto label_of = [&task](std::int64_t id) { return task.labels[static_cast<std::size_t>(id)]; };
  std::vector<std::int64_t> train_ids;
  for (std::int64_t id : subsample_labeled(data.manifest, config.label_fraction, config.seed))
    if (label_of(id) >= 0) train_ids.push_back(id);
  std::vector<std::int64_t> val_ids;
  for (std::int64_t id : data.manifest.val)
    if (label_of(id) >= 0) val_ids.push_back(id);
  if (train_ids.empty()) throw contract_error("finetune_classifier: no labeled training data");
  if (val_ids.empty()) throw contract_error("finetune_classifier: no labeled validation data");

  const int d_r = bundle.config.encoder_out_dim();
  const int eval_batch = 256;

  // Fixed encoder: representations depend only on the frozen weights.
  std::vector<double> cached_reps;
  std::unordered_map<std::int64_t, std::size_t> cache_row;
  if (!encoder_trainable) {
    std::vector<std::int64_t> all_ids = train_ids;
    all_ids.insert(all_ids.end(), val_ids.begin(), val_ids.end());
    std::sort(all_ids.begin(), all_ids.end());
    all_ids.erase(std::unique(all_ids.begin(), all_ids.end()), all_ids.end());
    cached_reps.resize(all_ids.size() * static_cast<std::size_t>(d_r));
    Tape tape;
    NoGradGuard ng(tape);
    for (std::size_t start = 0; start < all_ids.size(); start += static_cast<std::size_t>(eval_batch)) {
      const std::size_t stop = std::min(all_ids.size(), start + static_cast<std::size_t>(eval_batch));
      std::vector<std::int64_t> ids(all_ids.begin() + static_cast<std::ptrdiff_t>(start),
                                    all_ids.begin() + static_cast<std::ptrdiff_t>(stop));
      Tensor reps = encode(tape, bundle, detail::flatten_ids(data, ids), static_cast<int>(ids.size()));
      std::copy(reps.data(), reps.data() + reps.size(),
                cached_reps.begin() + static_cast<std::ptrdiff_t>(start * static_cast<std::size_t>(d_r)));
    }
    for (std::size_t i = 0; i < all_ids.size(); ++i) cache_row[all_ids[i]] = i;
  }

  auto reps_for = [&](Tape& tape, const std::vector<std::int64_t>& ids) {
    if (!encoder_trainable) {
      std::vector<std::size_t> rows;
      rows.reserve(ids.size());
      for (std::int64_t id : ids) rows.push_back(cache_row.at(id));
      return detail::gather_rows(cached_reps, d_r, rows);
    }
    return encode(tape, bundle, detail::flatten_ids(data, ids), static_cast<int>(ids.size()));
  };

  auto val_accuracy = [&]() {
    Tape tape;
    NoGradGuard ng(tape);
    std::int64_t correct = 0;
    for (std::size_t start = 0; start < val_ids.size(); start += static_cast<std::size_t>(eval_batch)) {
      const std::size_t stop = std::min(val_ids.size(), start + static_cast<std::size_t>(eval_batch));
      std::vector<std::int64_t> ids(val_ids.begin() + static_cast<std::ptrdiff_t>(start),
                                    val_ids.begin() + static_cast<std::ptrdiff_t>(stop));
      Tensor logits = classify(tape, reps_for(tape, ids), *bundle.classifier);
      std::vector<int> labels;
      labels.reserve(ids.size());
      for (std::int64_t id : ids) labels.push_back(label_of(id));
      correct += static_cast<std::int64_t>(
          std::llround(eval_accuracy(logits, labels) * static_cast<double>(ids.size())));
    }
    return static_cast<double>(correct) / static_cast<double>(val_ids.size());
  };

  FinetuneResult result;
  result.bundle = bundle;
  const std::string phase = phase_name(Phase::finetune_classify);
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    auto order = detail::epoch_order(train_ids, config.seed, 0xC1, epoch);
    double loss_sum = 0.0;
    std::int64_t batches = 0;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t stop =
          std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      std::vector<std::int64_t> ids(order.begin() + static_cast<std::ptrdiff_t>(start),
                                    order.begin() + static_cast<std::ptrdiff_t>(stop));
      std::vector<int> labels;
      labels.reserve(ids.size());
      for (std::int64_t id : ids) labels.push_back(label_of(id));
      Tape tape;
      Tensor logits = classify(tape, reps_for(tape, ids), *bundle.classifier);
      Tensor loss = softmax_cross_entropy(tape, logits, labels);
      detail::guard_finite_loss(loss.value(), "finetune_classify");
      opt.zero_grad();
      tape.backward(loss);
      opt.step();
      loss_sum += loss.value();
      ++batches;
    }
    const double acc = val_accuracy();
    result.metrics.push_back(
        {config.run_id, phase, epoch, "train", "loss", loss_sum / static_cast<double>(batches)});
    result.metrics.push_back({config.run_id, phase, epoch, "val", "accuracy", acc});
    if (acc > result.best_val_accuracy) {
      result.best_val_accuracy = acc;
      result.best_epoch = epoch;
    }
    result.final_val_accuracy = acc;
    detail::save_epoch_checkpoint(run_dir, epoch, bundle,
                                  {{"phase", phase}, {"seed", config.seed}, {"epoch", epoch}});
  }
  result.metrics.push_back({config.run_id, phase, config.epochs, "val", "best_accuracy",
                            result.best_val_accuracy});
  result.metrics.push_back({config.run_id, phase, config.epochs, "val", "final_accuracy",
                            result.final_val_accuracy});
  return result;
}

}  // namespace seqtwin
