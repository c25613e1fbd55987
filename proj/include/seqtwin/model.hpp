#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "seqtwin/rng.hpp"
#include "seqtwin/tensor.hpp"

namespace seqtwin {

struct ModelConfig {
  std::int32_t vocab_size = 0;  // V; the table holds V+1 rows, row 0 = [mask]
  int seq_len = 16;
  int embed_dim = 16;
  int conv_channels = 32;
  int kernel_width = 3;
  int pool = 3;
  int proj_hidden = 256;
  int proj_dim = 256;
  int clf_hidden = 20;
  int ctx_hidden = 32;

  // Two conv+pool stages collapse seq_len; flattening gives channels * tail.
  int encoder_out_dim() const {
    const int l1 = seq_len / pool;
    const int l2 = l1 / pool;
    if (l2 < 1)
      throw contract_error("sequence length " + std::to_string(seq_len) +
                           " collapses to zero under pooling " + std::to_string(pool));
    return conv_channels * l2;
  }

  nlohmann::json to_json() const {
    return {{"vocab_size", vocab_size},   {"seq_len", seq_len},
            {"embed_dim", embed_dim},     {"conv_channels", conv_channels},
            {"kernel_width", kernel_width}, {"pool", pool},
            {"proj_hidden", proj_hidden}, {"proj_dim", proj_dim},
            {"clf_hidden", clf_hidden},   {"ctx_hidden", ctx_hidden}};
  }

  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.vocab_size = j.at("vocab_size").get<std::int32_t>();
    c.seq_len = j.at("seq_len").get<int>();
    c.embed_dim = j.at("embed_dim").get<int>();
    c.conv_channels = j.at("conv_channels").get<int>();
    c.kernel_width = j.at("kernel_width").get<int>();
    c.pool = j.at("pool").get<int>();
    c.proj_hidden = j.at("proj_hidden").get<int>();
    c.proj_dim = j.at("proj_dim").get<int>();
    c.clf_hidden = j.at("clf_hidden").get<int>();
    c.ctx_hidden = j.at("ctx_hidden").get<int>();
    return c;
  }
};

struct EmbeddingTable {
  Tensor weights;  // [(V+1) x d_e]
};

// Two conv-relu-pool stages followed by a flatten.
struct Encoder {
  Tensor kernels1, bias1;  // [c x d_e x w], [c]
  Tensor kernels2, bias2;  // [c x c x w],  [c]
};

struct Mlp2 {
  Tensor w1, b1, w2, b2;
};

using Projector = Mlp2;       // d_r -> proj_hidden -> proj_dim
using ClassifierHead = Mlp2;  // d_r -> clf_hidden -> n_classes
using ContextHead = Mlp2;     // d_r -> ctx_hidden -> d_e (no final activation)

struct ModelBundle {
  ModelConfig config;
  EmbeddingTable embedding;
  Encoder encoder;
  std::optional<Projector> projector;
  std::optional<ClassifierHead> classifier;
  std::optional<ContextHead> context;

  std::vector<std::pair<std::string, Tensor>> named_parameters() const {
    std::vector<std::pair<std::string, Tensor>> out;
    out.emplace_back("embedding.weights", embedding.weights);
    out.emplace_back("encoder.kernels1", encoder.kernels1);
    out.emplace_back("encoder.bias1", encoder.bias1);
    out.emplace_back("encoder.kernels2", encoder.kernels2);
    out.emplace_back("encoder.bias2", encoder.bias2);
    auto push_mlp = [&out](const char* prefix, const Mlp2& m) {
      out.emplace_back(std::string(prefix) + ".w1", m.w1);
      out.emplace_back(std::string(prefix) + ".b1", m.b1);
      out.emplace_back(std::string(prefix) + ".w2", m.w2);
      out.emplace_back(std::string(prefix) + ".b2", m.b2);
    };
    if (projector) push_mlp("projector", *projector);
    if (classifier) push_mlp("classifier", *classifier);
    if (context) push_mlp("context", *context);
    return out;
  }

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> out;
    for (auto& [name, t] : named_parameters()) out.push_back(t);
    return out;
  }

  // Representation-model freeze switch (embedding + encoder). Heads always
  // stay trainable.
  void set_encoder_trainable(bool trainable) {
    embedding.weights.set_requires_grad(trainable);
    encoder.kernels1.set_requires_grad(trainable);
    encoder.bias1.set_requires_grad(trainable);
    encoder.kernels2.set_requires_grad(trainable);
    encoder.bias2.set_requires_grad(trainable);
  }
};

namespace detail {

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 1469598103934665603ull;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ull;
  }
  return h;
}

inline void fill_glorot_uniform(Tensor& t, int fan_in, int fan_out, Rng rng) {
  const double limit = std::sqrt(6.0 / (fan_in + fan_out));
  for (double& v : t.values()) v = (rng.next_double() * 2.0 - 1.0) * limit;
}

inline void fill_gaussian(Tensor& t, double stddev, Rng rng) {
  for (double& v : t.values()) v = rng.next_gaussian(0.0, stddev);
}

inline Rng init_stream(std::uint64_t seed, std::string_view name) {
  return Rng(seed).derive({0x1417, fnv1a(name)});
}

}  // namespace detail

inline Mlp2 make_mlp2(int in, int hidden, int out) {
  Mlp2 m;
  m.w1 = Tensor::zeros({in, hidden}, true);
  m.b1 = Tensor::zeros({hidden}, true);
  m.w2 = Tensor::zeros({hidden, out}, true);
  m.b2 = Tensor::zeros({out}, true);
  return m;
}

struct BundleParts {
  bool projector = false;
  bool classifier = false;
  bool context = false;
  int n_classes = 0;  // classifier output width
};

inline ModelBundle make_bundle(const ModelConfig& cfg, const BundleParts& parts) {
  ModelBundle b;
  b.config = cfg;
  b.embedding.weights = Tensor::zeros({cfg.vocab_size + 1, cfg.embed_dim}, true);
  b.encoder.kernels1 = Tensor::zeros({cfg.conv_channels, cfg.embed_dim, cfg.kernel_width}, true);
  b.encoder.bias1 = Tensor::zeros({cfg.conv_channels}, true);
  b.encoder.kernels2 = Tensor::zeros({cfg.conv_channels, cfg.conv_channels, cfg.kernel_width}, true);
  b.encoder.bias2 = Tensor::zeros({cfg.conv_channels}, true);
  const int d_r = cfg.encoder_out_dim();
  if (parts.projector) b.projector = make_mlp2(d_r, cfg.proj_hidden, cfg.proj_dim);
  if (parts.classifier) b.classifier = make_mlp2(d_r, cfg.clf_hidden, parts.n_classes);
  if (parts.context) b.context = make_mlp2(d_r, cfg.ctx_hidden, cfg.embed_dim);
  return b;
}

// Glorot-uniform kernels and linear weights, zero biases, N(0, 0.01^2)
// embeddings; each tensor draws from a stream keyed by (seed, name).
inline void init_parameters(ModelBundle& bundle, std::uint64_t seed) {
  using detail::fill_glorot_uniform;
  using detail::fill_gaussian;
  using detail::init_stream;
  fill_gaussian(bundle.embedding.weights, 0.01, init_stream(seed, "embedding.weights"));
  const ModelConfig& c = bundle.config;
  fill_glorot_uniform(bundle.encoder.kernels1, c.embed_dim * c.kernel_width,
                      c.conv_channels * c.kernel_width, init_stream(seed, "encoder.kernels1"));
  fill_glorot_uniform(bundle.encoder.kernels2, c.conv_channels * c.kernel_width,
                      c.conv_channels * c.kernel_width, init_stream(seed, "encoder.kernels2"));
  auto init_mlp = [seed](const char* prefix, Mlp2& m) {
    fill_glorot_uniform(m.w1, m.w1.dim(0), m.w1.dim(1),
                        init_stream(seed, std::string(prefix) + ".w1"));
    fill_glorot_uniform(m.w2, m.w2.dim(0), m.w2.dim(1),
                        init_stream(seed, std::string(prefix) + ".w2"));
    for (double& v : m.b1.values()) v = 0.0;
    for (double& v : m.b2.values()) v = 0.0;
  };
  for (double& v : bundle.encoder.bias1.values()) v = 0.0;
  for (double& v : bundle.encoder.bias2.values()) v = 0.0;
  if (bundle.projector) init_mlp("projector", *bundle.projector);
  if (bundle.classifier) init_mlp("classifier", *bundle.classifier);
  if (bundle.context) init_mlp("context", *bundle.context);
}

// U = R(E(sequence)): embed to channels-first, conv-relu-pool twice, flatten.
inline Tensor encode(Tape& tape, const ModelBundle& bundle,
                     const std::vector<std::int32_t>& flat_indices, int batch) {
  const ModelConfig& c = bundle.config;
  Tensor x = embed_sequences(tape, bundle.embedding.weights, flat_indices, batch, c.seq_len);
  x = maxpool1d(tape, relu(tape, conv1d(tape, x, bundle.encoder.kernels1, bundle.encoder.bias1)),
                c.pool);
  x = maxpool1d(tape, relu(tape, conv1d(tape, x, bundle.encoder.kernels2, bundle.encoder.bias2)),
                c.pool);
  return reshape(tape, x, {batch, c.encoder_out_dim()});
}

// linear -> ReLU -> linear; no activation on the output.
inline Tensor mlp2_forward(Tape& tape, const Mlp2& m, const Tensor& x) {
  Tensor h = relu(tape, add_bias_rows(tape, matmul(tape, x, m.w1), m.b1));
  return add_bias_rows(tape, matmul(tape, h, m.w2), m.b2);
}

// Pretraining head; discarded downstream, strictly after the representation.
inline Tensor project(Tape& tape, const Tensor& reps, const Projector& p) {
  return mlp2_forward(tape, p, reps);
}

inline Tensor classify(Tape& tape, const Tensor& reps, const ClassifierHead& head) {
  return mlp2_forward(tape, head, reps);
}

// Dual-encoder context tower MLP into item-embedding space.
inline Tensor context_forward(Tape& tape, const Tensor& reps, const ContextHead& head) {
  return mlp2_forward(tape, head, reps);
}

enum class Similarity { dot, cosine };

// Pairwise similarity matrix [b x n]; evaluation-only, no gradients.
inline Tensor score_items(const Tensor& context_out, const Tensor& item_embs, Similarity metric) {
  if (context_out.ndim() != 2 || item_embs.ndim() != 2 ||
      context_out.dim(1) != item_embs.dim(1))
    throw shape_error("score_items shape mismatch: " + shape_str(context_out.shape()) + " vs " +
                      shape_str(item_embs.shape()));
  const int b = context_out.dim(0), n = item_embs.dim(0), d = context_out.dim(1);
  Tensor out = Tensor::zeros({b, n});
  std::vector<double> inorm;
  if (metric == Similarity::cosine) {
    inorm.resize(static_cast<std::size_t>(n));
    for (int j = 0; j < n; ++j) {
      double q = kNormEps;
      const double* row = item_embs.data() + static_cast<std::size_t>(j) * d;
      for (int k = 0; k < d; ++k) q += row[k] * row[k];
      inorm[static_cast<std::size_t>(j)] = std::sqrt(q);
    }
  }
  double* op = out.data();
  for (int i = 0; i < b; ++i) {
    const double* crow = context_out.data() + static_cast<std::size_t>(i) * d;
    double cnorm = 1.0;
    if (metric == Similarity::cosine) {
      double q = kNormEps;
      for (int k = 0; k < d; ++k) q += crow[k] * crow[k];
      cnorm = std::sqrt(q);
    }
    for (int j = 0; j < n; ++j) {
      const double* irow = item_embs.data() + static_cast<std::size_t>(j) * d;
      double dot = 0.0;
      for (int k = 0; k < d; ++k) dot += crow[k] * irow[k];
      op[static_cast<std::size_t>(i) * n + j] =
          metric == Similarity::dot ? dot : dot / (cnorm * inorm[static_cast<std::size_t>(j)]);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints: 8-byte magic, u32 version, u64 JSON header length, JSON header
// (tensor names/shapes/offsets, model config, caller extras), then raw
// little-endian doubles. Round-trips are bitwise exact.
// ---------------------------------------------------------------------------

inline constexpr char kCheckpointMagic[8] = {'S', 'Q', 'T', 'W', 'C', 'K', 'P', 'T'};

inline void save_checkpoint(const std::filesystem::path& path, const ModelBundle& bundle,
                            const nlohmann::json& extra = {}) {
  auto params = bundle.named_parameters();
  nlohmann::json tensors = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : params) {
    tensors.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}, {"count", t.size()}});
    offset += t.size();
  }
  nlohmann::json header{{"tensors", tensors}, {"model_config", bundle.config.to_json()}};
  if (!extra.is_null()) header["extra"] = extra;
  const std::string hs = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw io_error("cannot write checkpoint " + path.string());
  out.write(kCheckpointMagic, 8);
  const std::uint32_t version = 1;
  out.write(reinterpret_cast<const char*>(&version), sizeof version);
  const std::uint64_t hlen = hs.size();
  out.write(reinterpret_cast<const char*>(&hlen), sizeof hlen);
  out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  for (const auto& [name, t] : params)
    out.write(reinterpret_cast<const char*>(t.data()),
              static_cast<std::streamsize>(t.size() * sizeof(double)));
  if (!out) throw io_error("failed writing checkpoint " + path.string());
}

struct Checkpoint {
  ModelConfig config;
  std::vector<std::pair<std::string, Tensor>> tensors;
  nlohmann::json extra;

  const Tensor* find(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return &t;
    return nullptr;
  }
};

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open checkpoint " + path.string());
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw io_error("not a checkpoint file: " + path.string());
  std::uint32_t version;
  in.read(reinterpret_cast<char*>(&version), sizeof version);
  if (!in || version != 1) throw io_error("unsupported checkpoint version in " + path.string());
  std::uint64_t hlen;
  in.read(reinterpret_cast<char*>(&hlen), sizeof hlen);
  std::string hs(hlen, '\0');
  in.read(hs.data(), static_cast<std::streamsize>(hlen));
  if (!in) throw io_error("truncated checkpoint header in " + path.string());
  nlohmann::json header = nlohmann::json::parse(hs);

  Checkpoint ck;
  ck.config = ModelConfig::from_json(header.at("model_config"));
  if (header.contains("extra")) ck.extra = header["extra"];
  for (const auto& t : header.at("tensors")) {
    auto shape = t.at("shape").get<std::vector<int>>();
    const auto count = t.at("count").get<std::uint64_t>();
    std::vector<double> values(count);
    in.read(reinterpret_cast<char*>(values.data()),
            static_cast<std::streamsize>(count * sizeof(double)));
    if (!in) throw io_error("truncated checkpoint payload in " + path.string());
    ck.tensors.emplace_back(t.at("name").get<std::string>(),
                            Tensor::from(std::move(shape), std::move(values), true));
  }
  return ck;
}

// Rebuilds a bundle holding exactly the components present in the checkpoint.
inline ModelBundle bundle_from_checkpoint(const Checkpoint& ck) {
  BundleParts parts;
  parts.projector = ck.find("projector.w1") != nullptr;
  parts.context = ck.find("context.w1") != nullptr;
  if (const Tensor* w2 = ck.find("classifier.w2")) {
    parts.classifier = true;
    parts.n_classes = w2->dim(1);
  }
  ModelBundle bundle = make_bundle(ck.config, parts);
  for (auto& [name, t] : bundle.named_parameters()) {
    const Tensor* src = ck.find(name);
    if (!src) throw io_error("checkpoint is missing tensor '" + name + "'");
    if (src->shape() != t.shape())
      throw io_error("checkpoint tensor '" + name + "' has shape " + shape_str(src->shape()) +
                     ", expected " + shape_str(t.shape()));
    Tensor dst = t;  // shared handle onto the bundle's storage
    dst.values() = src->values();
  }
  return bundle;
}

}  // namespace seqtwin
