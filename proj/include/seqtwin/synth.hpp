#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "seqtwin/dataset.hpp"
#include "seqtwin/rng.hpp"

namespace seqtwin {

// Synthetic interaction corpus in the MovieLens-1M file formats
// (ratings.dat / movies.dat / users.dat). Every movie gets a primary genre
// and users draw most of their actions from one dominant genre, so genre
// structure is recoverable from item co-occurrence alone. User and action
// totals are met exactly.
struct SynthConfig {
  std::int64_t n_users = 6040;
  std::int64_t n_actions = 1000209;
  std::int32_t n_items = 3952;
  std::int32_t n_genres = 18;
  double dominant_prob = 0.8;       // chance an action is from the user's main genre
  double second_genre_prob = 0.25;  // chance a movie carries a second genre
  std::int64_t min_user_actions = 20;
  std::uint64_t seed = 1;
};

namespace detail {

inline const std::array<const char*, 18>& ml_genre_names() {
  static const std::array<const char*, 18> names = {
      "Action",  "Adventure", "Animation", "Children's", "Comedy",  "Crime",
      "Documentary", "Drama", "Fantasy",   "Film-Noir",  "Horror",  "Musical",
      "Mystery", "Romance",   "Sci-Fi",    "Thriller",   "War",     "Western"};
  return names;
}

// Splits total actions across users: a guaranteed minimum per user plus a
// lognormal share of the remainder, with the rounding leftover spread one by
// one so the sum is exact.
inline std::vector<std::int64_t> user_action_counts(const SynthConfig& cfg, Rng rng) {
  if (cfg.n_actions < cfg.n_users * cfg.min_user_actions)
    throw contract_error("synthetic corpus: n_actions too small for the per-user minimum");
  std::vector<std::int64_t> counts(static_cast<std::size_t>(cfg.n_users), cfg.min_user_actions);
  const std::int64_t remainder = cfg.n_actions - cfg.n_users * cfg.min_user_actions;
  std::vector<double> weights(static_cast<std::size_t>(cfg.n_users));
  double total = 0.0;
  for (auto& w : weights) {
    w = std::exp(rng.next_gaussian(0.0, 1.1));
    total += w;
  }
  std::int64_t assigned = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const auto extra = static_cast<std::int64_t>(
        static_cast<double>(remainder) * weights[i] / total);
    counts[i] += extra;
    assigned += extra;
  }
  for (std::int64_t left = remainder - assigned; left > 0; --left)
    ++counts[static_cast<std::size_t>((remainder - left) % cfg.n_users)];
  return counts;
}

}  // namespace detail

inline void write_movielens_synthetic(const std::filesystem::path& dir, const SynthConfig& cfg) {
  if (cfg.n_genres < 1 || cfg.n_genres > static_cast<std::int32_t>(detail::ml_genre_names().size()))
    throw contract_error("synthetic corpus supports 1..18 genres");
  std::filesystem::create_directories(dir);
  const Rng root(cfg.seed);

  // movies.dat: every ID in [1, n_items] is listed, so the vocabulary spans
  // the full range.
  std::vector<std::int32_t> primary(static_cast<std::size_t>(cfg.n_items));
  std::vector<std::vector<std::int32_t>> by_genre(static_cast<std::size_t>(cfg.n_genres));
  {
    Rng rng = root.derive({0x30001});
    std::ofstream out(dir / "movies.dat", std::ios::binary);
    if (!out) throw io_error("cannot write " + (dir / "movies.dat").string());
    for (std::int32_t id = 1; id <= cfg.n_items; ++id) {
      const auto g = static_cast<std::int32_t>(rng.next_below(static_cast<std::uint64_t>(cfg.n_genres)));
      primary[static_cast<std::size_t>(id - 1)] = g;
      by_genre[static_cast<std::size_t>(g)].push_back(id);
      out << id << "::Synthetic Movie " << id << " (1999)::" << detail::ml_genre_names()[static_cast<std::size_t>(g)];
      if (cfg.n_genres > 1 && rng.next_double() < cfg.second_genre_prob) {
        auto g2 = static_cast<std::int32_t>(rng.next_below(static_cast<std::uint64_t>(cfg.n_genres - 1)));
        if (g2 >= g) ++g2;
        out << '|' << detail::ml_genre_names()[static_cast<std::size_t>(g2)];
      }
      out << '\n';
    }
  }
  for (const auto& bucket : by_genre)
    if (bucket.empty()) throw contract_error("synthetic corpus: a genre ended up empty; use more items");

  // users.dat with the real ML-1M age codes.
  std::vector<std::int32_t> dominant(static_cast<std::size_t>(cfg.n_users));
  {
    static const std::array<int, 7> ages = {1, 18, 25, 35, 45, 50, 56};
    Rng rng = root.derive({0x30002});
    std::ofstream out(dir / "users.dat", std::ios::binary);
    if (!out) throw io_error("cannot write " + (dir / "users.dat").string());
    for (std::int64_t uid = 1; uid <= cfg.n_users; ++uid) {
      dominant[static_cast<std::size_t>(uid - 1)] =
          static_cast<std::int32_t>(rng.next_below(static_cast<std::uint64_t>(cfg.n_genres)));
      out << uid << "::" << (rng.next_below(2) ? 'M' : 'F') << "::"
          << ages[static_cast<std::size_t>(rng.next_below(ages.size()))] << "::"
          << rng.next_below(21) << "::48067\n";
    }
  }

  // ratings.dat grouped by user, timestamps strictly increasing.
  {
    const auto counts = detail::user_action_counts(cfg, root.derive({0x30003}));
    Rng rng = root.derive({0x30004});
    std::ofstream out(dir / "ratings.dat", std::ios::binary);
    if (!out) throw io_error("cannot write " + (dir / "ratings.dat").string());
    std::int64_t ts = 978300000;
    std::string buf;
    for (std::int64_t uid = 1; uid <= cfg.n_users; ++uid) {
      const std::int32_t home = dominant[static_cast<std::size_t>(uid - 1)];
      for (std::int64_t k = 0; k < counts[static_cast<std::size_t>(uid - 1)]; ++k) {
        const std::int32_t g =
            rng.next_double() < cfg.dominant_prob
                ? home
                : static_cast<std::int32_t>(rng.next_below(static_cast<std::uint64_t>(cfg.n_genres)));
        const auto& bucket = by_genre[static_cast<std::size_t>(g)];
        const std::int32_t movie = bucket[static_cast<std::size_t>(rng.next_below(bucket.size()))];
        buf.clear();
        buf += std::to_string(uid);
        buf += "::";
        buf += std::to_string(movie);
        buf += "::";
        buf += std::to_string(1 + rng.next_below(5));
        buf += "::";
        buf += std::to_string(ts++);
        buf += '\n';
        out << buf;
      }
    }
  }
}

}  // namespace seqtwin
