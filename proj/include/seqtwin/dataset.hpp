#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "seqtwin/rng.hpp"
#include "seqtwin/tensor.hpp"

namespace seqtwin {

// One raw user-item interaction, pre-indexing.
struct InteractionRecord {
  std::string user_id;
  std::string item_id;
  std::int64_t timestamp = 0;
};

struct ItemInfo {
  std::string item_id;
  std::vector<std::string> categories;
};

struct UserInfo {
  std::string user_id;
  std::int32_t age_code = -1;
  std::int32_t occupation_code = -1;
};

// Item/category index space. Index 0 is reserved for the [mask]/pad token and
// never maps to a real item; real items occupy [1, V].
class Vocabulary {
 public:
  // Registers an item (idempotent); returns its index in [1, V].
  std::int32_t add_item(const std::string& id) {
    auto [it, inserted] = item_to_index_.try_emplace(id, static_cast<std::int32_t>(items_.size()));
    if (inserted) {
      items_.push_back(id);
      item_categories_.emplace_back();
    }
    return it->second;
  }

  std::int32_t item_index(const std::string& id) const {
    auto it = item_to_index_.find(id);
    return it == item_to_index_.end() ? -1 : it->second;
  }

  const std::string& item_id(std::int32_t index) const { return items_.at(static_cast<std::size_t>(index)); }

  std::int32_t add_category(const std::string& name) {
    auto [it, inserted] =
        category_to_index_.try_emplace(name, static_cast<std::int32_t>(category_names_.size()));
    if (inserted) category_names_.push_back(name);
    return it->second;
  }

  std::int32_t category_index(const std::string& name) const {
    auto it = category_to_index_.find(name);
    return it == category_to_index_.end() ? -1 : it->second;
  }

  void set_item_categories(std::int32_t item, std::vector<std::int32_t> cats) {
    item_categories_.at(static_cast<std::size_t>(item)) = std::move(cats);
  }

  const std::vector<std::int32_t>& item_categories(std::int32_t item) const {
    return item_categories_.at(static_cast<std::size_t>(item));
  }

  const std::vector<std::string>& category_names() const { return category_names_; }

  // Number of real items V; valid indices are [0, V] with 0 = [mask].
  std::int32_t size() const { return static_cast<std::int32_t>(items_.size()) - 1; }

  nlohmann::json to_json() const {
    nlohmann::json items = nlohmann::json::array();
    for (std::size_t i = 1; i < items_.size(); ++i)
      items.push_back({items_[i], item_categories_[i]});
    return {{"categories", category_names_}, {"items", items}};
  }

  static Vocabulary from_json(const nlohmann::json& j) {
    Vocabulary v;
    for (const auto& name : j.at("categories")) v.add_category(name.get<std::string>());
    for (const auto& entry : j.at("items")) {
      std::int32_t ix = v.add_item(entry.at(0).get<std::string>());
      v.set_item_categories(ix, entry.at(1).get<std::vector<std::int32_t>>());
    }
    return v;
  }

 private:
  std::unordered_map<std::string, std::int32_t> item_to_index_;
  std::vector<std::string> items_{""};  // slot 0 = [mask]
  std::vector<std::vector<std::int32_t>> item_categories_{{}};
  std::vector<std::string> category_names_;
  std::unordered_map<std::string, std::int32_t> category_to_index_;
};

// Fixed-length window of item indices, tail-padded with 0.
struct UserSequence {
  std::int64_t seq_id = 0;
  std::string user_id;
  std::vector<std::int32_t> items;
  std::int32_t real_length = 0;
  std::int32_t next_item = 0;           // following action; 0 = none
  std::int32_t favorite_category = -1;  // -1 = undefined (no categorized item)
  std::int32_t age_group = -1;          // verbatim dataset code; -1 = unknown
  std::int32_t occupation = -1;
};

struct SplitManifest {
  std::uint64_t seed = 0;
  std::array<double, 3> fractions{0.8, 0.1, 0.1};
  std::vector<std::int64_t> train, val, test;
};

enum class Format {
  movielens_ratings,
  movielens_items,
  movielens_users,
  movielens20m_ratings,
  movielens20m_items,
  yelp_tips,
  yelp_business,
};

struct IngestResult {
  std::vector<InteractionRecord> records;
  std::vector<ItemInfo> items;
  std::vector<UserInfo> users;
  std::int64_t malformed_lines = 0;
};

namespace detail {

inline bool parse_i64(std::string_view s, std::int64_t& out) {
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && p == s.data() + s.size();
}

inline bool parse_i32(std::string_view s, std::int32_t& out) {
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && p == s.data() + s.size();
}

inline std::vector<std::string_view> split_sv(std::string_view line, std::string_view delim) {
  std::vector<std::string_view> out;
  std::size_t pos = 0;
  while (true) {
    std::size_t next = line.find(delim, pos);
    if (next == std::string_view::npos) {
      out.push_back(line.substr(pos));
      return out;
    }
    out.push_back(line.substr(pos, next - pos));
    pos = next + delim.size();
  }
}

// CSV fields with double-quote escaping (MovieLens-20M titles contain commas).
inline std::vector<std::string> split_csv(std::string_view line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(std::move(cur));
  return out;
}

inline std::string_view strip_cr(std::string_view s) {
  if (!s.empty() && s.back() == '\r') s.remove_suffix(1);
  return s;
}

// Days since 1970-01-01 for a proleptic Gregorian civil date.
inline std::int64_t days_from_civil(std::int64_t y, unsigned m, unsigned d) {
  y -= m <= 2;
  const std::int64_t era = (y >= 0 ? y : y - 399) / 400;
  const unsigned yoe = static_cast<unsigned>(y - era * 400);
  const unsigned doy = (153 * (m + (m > 2 ? -3 : 9)) + 2) / 5 + d - 1;
  const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
  return era * 146097 + static_cast<std::int64_t>(doe) - 719468;
}

// Accepts "YYYY-MM-DD" with an optional " HH:MM:SS" tail.
inline bool parse_datetime(std::string_view s, std::int64_t& out) {
  std::int64_t y = 0, mo = 0, d = 0, h = 0, mi = 0, se = 0;
  if (s.size() < 10 || s[4] != '-' || s[7] != '-') return false;
  if (!parse_i64(s.substr(0, 4), y) || !parse_i64(s.substr(5, 2), mo) ||
      !parse_i64(s.substr(8, 2), d))
    return false;
  if (mo < 1 || mo > 12 || d < 1 || d > 31) return false;
  if (s.size() >= 19 && s[10] == ' ' && s[13] == ':' && s[16] == ':') {
    if (!parse_i64(s.substr(11, 2), h) || !parse_i64(s.substr(14, 2), mi) ||
        !parse_i64(s.substr(17, 2), se))
      return false;
  }
  out = days_from_civil(y, static_cast<unsigned>(mo), static_cast<unsigned>(d)) * 86400 +
        h * 3600 + mi * 60 + se;
  return true;
}

}  // namespace detail

// Reads one file of the given format. Interaction records come back sorted
// per user by timestamp ascending, ties by original file order; malformed
// lines are counted, not fatal.
inline IngestResult ingest(const std::filesystem::path& path, Format format) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open " + path.string());
  IngestResult result;
  std::string line;
  std::int64_t line_no = 0;
  bool expects_records = format == Format::movielens_ratings ||
                         format == Format::movielens20m_ratings || format == Format::yelp_tips;
  while (std::getline(in, line)) {
    ++line_no;
    std::string_view sv = detail::strip_cr(line);
    if (sv.empty()) continue;
    switch (format) {
      case Format::movielens_ratings: {
        auto f = detail::split_sv(sv, "::");
        std::int64_t ts;
        if (f.size() != 4 || f[0].empty() || f[1].empty() || !detail::parse_i64(f[3], ts) ||
            ts < 0) {
          ++result.malformed_lines;
          break;
        }
        result.records.push_back({std::string(f[0]), std::string(f[1]), ts});
        break;
      }
      case Format::movielens_items: {
        auto f = detail::split_sv(sv, "::");
        if (f.size() != 3 || f[0].empty()) {
          ++result.malformed_lines;
          break;
        }
        ItemInfo info{std::string(f[0]), {}};
        for (auto g : detail::split_sv(f[2], "|"))
          if (!g.empty()) info.categories.emplace_back(g);
        result.items.push_back(std::move(info));
        break;
      }
      case Format::movielens_users: {
        auto f = detail::split_sv(sv, "::");
        std::int32_t age, occ;
        if (f.size() != 5 || f[0].empty() || !detail::parse_i32(f[2], age) ||
            !detail::parse_i32(f[3], occ)) {
          ++result.malformed_lines;
          break;
        }
        result.users.push_back({std::string(f[0]), age, occ});
        break;
      }
      case Format::movielens20m_ratings: {
        if (line_no == 1 && sv.starts_with("userId")) break;  // header
        auto f = detail::split_csv(sv);
        double ts_float;  // ml-20m timestamps are integral but tolerate decimals
        std::int64_t ts;
        if (f.size() != 4 || f[0].empty() || f[1].empty() || !detail::parse_i64(f[3], ts)) {
          if (f.size() == 4) {
            auto [p, ec] = std::from_chars(f[3].data(), f[3].data() + f[3].size(), ts_float);
            if (ec == std::errc() && p == f[3].data() + f[3].size() && ts_float >= 0) {
              result.records.push_back({f[0], f[1], static_cast<std::int64_t>(ts_float)});
              break;
            }
          }
          ++result.malformed_lines;
          break;
        }
        if (ts < 0) {
          ++result.malformed_lines;
          break;
        }
        result.records.push_back({f[0], f[1], ts});
        break;
      }
      case Format::movielens20m_items: {
        if (line_no == 1 && sv.starts_with("movieId")) break;
        auto f = detail::split_csv(sv);
        if (f.size() != 3 || f[0].empty()) {
          ++result.malformed_lines;
          break;
        }
        ItemInfo info{f[0], {}};
        for (auto g : detail::split_sv(f[2], "|"))
          if (!g.empty() && g != "(no genres listed)") info.categories.emplace_back(g);
        result.items.push_back(std::move(info));
        break;
      }
      case Format::yelp_tips: {
        nlohmann::json j = nlohmann::json::parse(sv, nullptr, false);
        std::int64_t ts;
        if (j.is_discarded() || !j.contains("user_id") || !j.contains("business_id") ||
            !j.contains("date") || !j["user_id"].is_string() || !j["business_id"].is_string() ||
            !j["date"].is_string() ||
            !detail::parse_datetime(j["date"].get_ref<const std::string&>(), ts) ||
            j["business_id"].get_ref<const std::string&>().empty()) {
          ++result.malformed_lines;
          break;
        }
        result.records.push_back(
            {j["user_id"].get<std::string>(), j["business_id"].get<std::string>(), ts});
        break;
      }
      case Format::yelp_business: {
        nlohmann::json j = nlohmann::json::parse(sv, nullptr, false);
        if (j.is_discarded() || !j.contains("business_id") || !j["business_id"].is_string()) {
          ++result.malformed_lines;
          break;
        }
        ItemInfo info{j["business_id"].get<std::string>(), {}};
        if (j.contains("categories") && j["categories"].is_string()) {
          for (auto c : detail::split_sv(j["categories"].get_ref<const std::string&>(), ",")) {
            while (!c.empty() && c.front() == ' ') c.remove_prefix(1);
            while (!c.empty() && c.back() == ' ') c.remove_suffix(1);
            if (!c.empty()) info.categories.emplace_back(c);
          }
        }
        result.items.push_back(std::move(info));
        break;
      }
    }
  }
  if (expects_records) {
    if (result.records.empty())
      throw io_error("no valid interaction records in " + path.string());
    std::stable_sort(result.records.begin(), result.records.end(),
                     [](const InteractionRecord& a, const InteractionRecord& b) {
                       if (a.user_id != b.user_id) return a.user_id < b.user_id;
                       return a.timestamp < b.timestamp;
                     });
  } else if (result.items.empty() && result.users.empty()) {
    throw io_error("no valid rows in " + path.string());
  }
  return result;
}

// Stride-1 sliding windows over each user's time-ordered history: one window
// per action that has at least one predecessor (window of the up-to-seq_len
// most recent items ending at action t, next_item = action t+1). A user with
// n >= min_actions actions contributes n-1 windows; shorter histories are
// dropped entirely. Windows are emitted in user-id order, then time order.
inline std::vector<UserSequence> build_sequences(const std::vector<InteractionRecord>& records,
                                                 Vocabulary& vocab, int seq_len = 16,
                                                 int min_actions = 10) {
  std::vector<UserSequence> out;
  std::int64_t next_id = 0;
  std::size_t i = 0;
  while (i < records.size()) {
    std::size_t j = i;
    while (j < records.size() && records[j].user_id == records[i].user_id) ++j;
    const std::int64_t n = static_cast<std::int64_t>(j - i);
    if (n >= min_actions) {
      std::vector<std::int32_t> history(static_cast<std::size_t>(n));
      for (std::int64_t k = 0; k < n; ++k) {
        std::int32_t ix = vocab.item_index(records[i + static_cast<std::size_t>(k)].item_id);
        if (ix < 0) ix = vocab.add_item(records[i + static_cast<std::size_t>(k)].item_id);
        history[static_cast<std::size_t>(k)] = ix;
      }
      for (std::int64_t t = 0; t + 1 < n; ++t) {
        UserSequence seq;
        seq.seq_id = next_id++;
        seq.user_id = records[i].user_id;
        seq.real_length = static_cast<std::int32_t>(std::min<std::int64_t>(t + 1, seq_len));
        seq.items.assign(static_cast<std::size_t>(seq_len), 0);
        for (std::int32_t k = 0; k < seq.real_length; ++k)
          seq.items[static_cast<std::size_t>(k)] =
              history[static_cast<std::size_t>(t + 1 - seq.real_length + k)];
        seq.next_item = history[static_cast<std::size_t>(t + 1)];
        out.push_back(std::move(seq));
      }
    }
    i = j;
  }
  return out;
}

// Most frequent category over every category of every real item; ties break
// to the lowest category index. Returns -1 when no real item is categorized
// (the sequence is excluded from the classification task).
inline std::int32_t derive_favorite_category(const UserSequence& seq, const Vocabulary& vocab) {
  std::vector<std::int64_t> counts(vocab.category_names().size(), 0);
  for (std::int32_t k = 0; k < seq.real_length; ++k) {
    std::int32_t item = seq.items[static_cast<std::size_t>(k)];
    if (item <= 0) continue;
    for (std::int32_t c : vocab.item_categories(item)) ++counts[static_cast<std::size_t>(c)];
  }
  std::int32_t best = -1;
  std::int64_t best_count = 0;
  for (std::size_t c = 0; c < counts.size(); ++c)
    if (counts[c] > best_count) {
      best_count = counts[c];
      best = static_cast<std::int32_t>(c);
    }
  return best;
}

// Seeded shuffle then proportional cut; id lists come back sorted.
inline SplitManifest split(std::int64_t n_sequences, std::uint64_t seed,
                           std::array<double, 3> fractions = {0.8, 0.1, 0.1}) {
  if (n_sequences < 10)
    throw contract_error("split needs >= 10 sequences, got " + std::to_string(n_sequences));
  std::vector<std::int64_t> ids(static_cast<std::size_t>(n_sequences));
  for (std::int64_t i = 0; i < n_sequences; ++i) ids[static_cast<std::size_t>(i)] = i;
  Rng rng = Rng(seed).derive({0x5EC5});
  rng.shuffle(ids);
  const auto n_train = static_cast<std::size_t>(std::llround(fractions[0] * static_cast<double>(n_sequences)));
  const auto n_val = static_cast<std::size_t>(std::llround(fractions[1] * static_cast<double>(n_sequences)));
  if (n_train + n_val > ids.size())
    throw contract_error("split fractions exceed the sequence count");
  SplitManifest m;
  m.seed = seed;
  m.fractions = fractions;
  m.train.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_train));
  m.val.assign(ids.begin() + static_cast<std::ptrdiff_t>(n_train),
               ids.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
  m.test.assign(ids.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), ids.end());
  std::sort(m.train.begin(), m.train.end());
  std::sort(m.val.begin(), m.val.end());
  std::sort(m.test.begin(), m.test.end());
  return m;
}

// Seeded sample without replacement of ceil(f * |train|) train ids; val and
// test are untouched.
inline std::vector<std::int64_t> subsample_labeled(const SplitManifest& manifest, double fraction,
                                                   std::uint64_t seed) {
  if (!(fraction > 0.0) || fraction > 1.0)
    throw contract_error("label fraction must be in (0, 1], got " + std::to_string(fraction));
  if (fraction == 1.0) return manifest.train;
  std::vector<std::int64_t> ids = manifest.train;
  Rng rng = Rng(seed).derive({0x5AB5});
  rng.shuffle(ids);
  const auto k = static_cast<std::size_t>(
      std::ceil(fraction * static_cast<double>(manifest.train.size())));
  ids.resize(std::min(k, ids.size()));
  std::sort(ids.begin(), ids.end());
  return ids;
}

// ---------------------------------------------------------------------------
// On-disk store: sequences.csv + vocab.json + manifest.json (+ summary.json).
// ---------------------------------------------------------------------------

struct PreparedData {
  Vocabulary vocab;
  std::vector<UserSequence> sequences;
  SplitManifest manifest;
  int seq_len = 16;
};

inline void write_manifest(const std::filesystem::path& path, const SplitManifest& m) {
  nlohmann::json j{{"seed", m.seed},
                   {"fractions", m.fractions},
                   {"train", m.train},
                   {"val", m.val},
                   {"test", m.test}};
  std::ofstream out(path, std::ios::binary);
  if (!out) throw io_error("cannot write " + path.string());
  out << j.dump() << '\n';
}

inline SplitManifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open " + path.string());
  nlohmann::json j = nlohmann::json::parse(in);
  SplitManifest m;
  m.seed = j.at("seed").get<std::uint64_t>();
  m.fractions = j.at("fractions").get<std::array<double, 3>>();
  m.train = j.at("train").get<std::vector<std::int64_t>>();
  m.val = j.at("val").get<std::vector<std::int64_t>>();
  m.test = j.at("test").get<std::vector<std::int64_t>>();
  return m;
}

inline void write_sequence_store(const std::filesystem::path& path,
                                 const std::vector<UserSequence>& sequences, int seq_len) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw io_error("cannot write " + path.string());
  out << "seq_id,user_id,real_length";
  for (int i = 1; i <= seq_len; ++i) out << ",i" << i;
  out << ",favorite_category,age_group,occupation,next_item\n";
  std::string buf;
  for (const auto& s : sequences) {
    buf.clear();
    buf += std::to_string(s.seq_id);
    buf += ',';
    buf += s.user_id;
    buf += ',';
    buf += std::to_string(s.real_length);
    for (int i = 0; i < seq_len; ++i) {
      buf += ',';
      buf += std::to_string(s.items[static_cast<std::size_t>(i)]);
    }
    buf += ',';
    buf += std::to_string(s.favorite_category);
    buf += ',';
    buf += std::to_string(s.age_group);
    buf += ',';
    buf += std::to_string(s.occupation);
    buf += ',';
    buf += std::to_string(s.next_item);
    buf += '\n';
    out << buf;
  }
}

inline std::vector<UserSequence> read_sequence_store(const std::filesystem::path& path,
                                                     int* seq_len_out = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw io_error("empty sequence store " + path.string());
  auto header = detail::split_sv(detail::strip_cr(line), ",");
  if (header.size() < 8 || header[0] != "seq_id")
    throw io_error("unrecognized sequence store header in " + path.string());
  const int seq_len = static_cast<int>(header.size()) - 7;
  if (seq_len_out) *seq_len_out = seq_len;
  std::vector<UserSequence> out;
  while (std::getline(in, line)) {
    std::string_view sv = detail::strip_cr(line);
    if (sv.empty()) continue;
    auto f = detail::split_sv(sv, ",");
    if (f.size() != header.size()) throw io_error("bad row in " + path.string());
    UserSequence s;
    if (!detail::parse_i64(f[0], s.seq_id) || !detail::parse_i32(f[2], s.real_length))
      throw io_error("bad row in " + path.string());
    s.user_id = std::string(f[1]);
    s.items.resize(static_cast<std::size_t>(seq_len));
    for (int i = 0; i < seq_len; ++i)
      if (!detail::parse_i32(f[static_cast<std::size_t>(3 + i)], s.items[static_cast<std::size_t>(i)]))
        throw io_error("bad row in " + path.string());
    std::size_t base = static_cast<std::size_t>(3 + seq_len);
    if (!detail::parse_i32(f[base], s.favorite_category) ||
        !detail::parse_i32(f[base + 1], s.age_group) ||
        !detail::parse_i32(f[base + 2], s.occupation) || !detail::parse_i32(f[base + 3], s.next_item))
      throw io_error("bad row in " + path.string());
    out.push_back(std::move(s));
  }
  return out;
}

struct PrepareSummary {
  std::int64_t raw_records = 0;
  std::int64_t malformed_lines = 0;
  std::int64_t users_total = 0;
  std::int64_t users_kept = 0;
  std::int32_t items = 0;
  std::int32_t categories = 0;
  std::int64_t sequences = 0;
  std::int64_t train = 0, val = 0, test = 0;
};

struct PrepareOptions {
  std::string format;  // movielens_1m | movielens_20m | yelp
  std::filesystem::path data_dir;
  int seq_len = 16;
  int min_actions = 10;
  std::uint64_t split_seed = 1;
  std::int64_t max_sequences = 0;  // 0 = keep all; else seeded subsample before splitting
  std::uint64_t subsample_seed = 1;
};

namespace detail {

// MovieLens item indices are the raw numeric IDs (identity mapping): the
// vocabulary registers every ID in [1, max listed/observed ID], so V equals
// the max ID and unlisted IDs carry empty category lists.
inline void build_movielens_vocab(Vocabulary& vocab, const std::vector<ItemInfo>& items,
                                  const std::vector<InteractionRecord>& records) {
  std::int64_t max_id = 0;
  std::unordered_map<std::int64_t, const ItemInfo*> by_id;
  for (const auto& it : items) {
    std::int64_t id;
    if (!parse_i64(it.item_id, id) || id <= 0) continue;
    max_id = std::max(max_id, id);
    by_id.emplace(id, &it);
  }
  for (const auto& r : records) {
    std::int64_t id;
    if (parse_i64(r.item_id, id) && id > 0) max_id = std::max(max_id, id);
  }
  for (std::int64_t id = 1; id <= max_id; ++id) {
    std::int32_t ix = vocab.add_item(std::to_string(id));
    auto found = by_id.find(id);
    if (found != by_id.end()) {
      std::vector<std::int32_t> cats;
      cats.reserve(found->second->categories.size());
      for (const auto& c : found->second->categories) cats.push_back(vocab.add_category(c));
      vocab.set_item_categories(ix, std::move(cats));
    }
  }
}

inline void build_generic_vocab(Vocabulary& vocab, const std::vector<ItemInfo>& items,
                                const std::vector<InteractionRecord>& records) {
  std::vector<std::string> ids;
  ids.reserve(records.size());
  for (const auto& r : records) ids.push_back(r.item_id);
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  std::unordered_map<std::string_view, const ItemInfo*> by_id;
  for (const auto& it : items) by_id.emplace(it.item_id, &it);
  // Category indices follow catalog order restricted to observed items.
  for (const auto& id : ids) {
    std::int32_t ix = vocab.add_item(id);
    auto found = by_id.find(id);
    if (found != by_id.end()) {
      std::vector<std::int32_t> cats;
      cats.reserve(found->second->categories.size());
      for (const auto& c : found->second->categories) cats.push_back(vocab.add_category(c));
      vocab.set_item_categories(ix, std::move(cats));
    }
  }
}

}  // namespace detail

// Full preprocessing pass: ingest raw files, build the vocabulary, window the
// histories, attach labels, and cut the split.
inline PreparedData prepare_dataset(const PrepareOptions& opt, PrepareSummary* summary = nullptr) {
  IngestResult ratings, items, users;
  if (opt.format == "movielens_1m") {
    ratings = ingest(opt.data_dir / "ratings.dat", Format::movielens_ratings);
    items = ingest(opt.data_dir / "movies.dat", Format::movielens_items);
    users = ingest(opt.data_dir / "users.dat", Format::movielens_users);
  } else if (opt.format == "movielens_20m") {
    ratings = ingest(opt.data_dir / "ratings.csv", Format::movielens20m_ratings);
    items = ingest(opt.data_dir / "movies.csv", Format::movielens20m_items);
  } else if (opt.format == "yelp") {
    ratings = ingest(opt.data_dir / "yelp_academic_dataset_tip.json", Format::yelp_tips);
    const auto business = opt.data_dir / "yelp_academic_dataset_business.json";
    if (std::filesystem::exists(business)) items = ingest(business, Format::yelp_business);
  } else {
    throw contract_error("unknown dataset format '" + opt.format + "'");
  }

  PreparedData data;
  data.seq_len = opt.seq_len;
  if (opt.format == "yelp")
    detail::build_generic_vocab(data.vocab, items.items, ratings.records);
  else
    detail::build_movielens_vocab(data.vocab, items.items, ratings.records);

  data.sequences = build_sequences(ratings.records, data.vocab, opt.seq_len, opt.min_actions);

  std::unordered_map<std::string, const UserInfo*> user_info;
  for (const auto& u : users.users) user_info.emplace(u.user_id, &u);
  for (auto& s : data.sequences) {
    s.favorite_category = derive_favorite_category(s, data.vocab);
    auto it = user_info.find(s.user_id);
    if (it != user_info.end()) {
      s.age_group = it->second->age_code;
      s.occupation = it->second->occupation_code;
    }
  }

  if (opt.max_sequences > 0 &&
      opt.max_sequences < static_cast<std::int64_t>(data.sequences.size())) {
    std::vector<std::int64_t> keep(data.sequences.size());
    for (std::size_t i = 0; i < keep.size(); ++i) keep[i] = static_cast<std::int64_t>(i);
    Rng rng = Rng(opt.subsample_seed).derive({0xCA9});
    rng.shuffle(keep);
    keep.resize(static_cast<std::size_t>(opt.max_sequences));
    std::sort(keep.begin(), keep.end());
    std::vector<UserSequence> kept;
    kept.reserve(keep.size());
    for (std::int64_t id : keep) {
      UserSequence s = std::move(data.sequences[static_cast<std::size_t>(id)]);
      s.seq_id = static_cast<std::int64_t>(kept.size());
      kept.push_back(std::move(s));
    }
    data.sequences = std::move(kept);
  }

  data.manifest = split(static_cast<std::int64_t>(data.sequences.size()), opt.split_seed);

  if (summary) {
    summary->raw_records = static_cast<std::int64_t>(ratings.records.size());
    summary->malformed_lines = ratings.malformed_lines + items.malformed_lines + users.malformed_lines;
    std::int64_t users_total = 0, users_kept = 0;
    std::size_t i = 0;
    while (i < ratings.records.size()) {
      std::size_t j = i;
      while (j < ratings.records.size() && ratings.records[j].user_id == ratings.records[i].user_id)
        ++j;
      ++users_total;
      if (static_cast<int>(j - i) >= opt.min_actions) ++users_kept;
      i = j;
    }
    summary->users_total = users_total;
    summary->users_kept = users_kept;
    summary->items = data.vocab.size();
    summary->categories = static_cast<std::int32_t>(data.vocab.category_names().size());
    summary->sequences = static_cast<std::int64_t>(data.sequences.size());
    summary->train = static_cast<std::int64_t>(data.manifest.train.size());
    summary->val = static_cast<std::int64_t>(data.manifest.val.size());
    summary->test = static_cast<std::int64_t>(data.manifest.test.size());
  }
  return data;
}

inline void save_prepared(const std::filesystem::path& dir, const PreparedData& data) {
  std::filesystem::create_directories(dir);
  write_sequence_store(dir / "sequences.csv", data.sequences, data.seq_len);
  write_manifest(dir / "manifest.json", data.manifest);
  std::ofstream vout(dir / "vocab.json", std::ios::binary);
  if (!vout) throw io_error("cannot write " + (dir / "vocab.json").string());
  vout << data.vocab.to_json().dump() << '\n';
}

inline PreparedData load_prepared(const std::filesystem::path& dir) {
  PreparedData data;
  data.sequences = read_sequence_store(dir / "sequences.csv", &data.seq_len);
  data.manifest = read_manifest(dir / "manifest.json");
  std::ifstream vin(dir / "vocab.json", std::ios::binary);
  if (!vin) throw io_error("cannot open " + (dir / "vocab.json").string());
  data.vocab = Vocabulary::from_json(nlohmann::json::parse(vin));
  return data;
}

}  // namespace seqtwin
