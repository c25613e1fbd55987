#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <map>
#include <vector>

#include "seqtwin/augment.hpp"

using namespace seqtwin;

namespace {

UserSequence make_seq(std::vector<std::int32_t> prefix, int seq_len = 16) {
  UserSequence s;
  s.real_length = static_cast<std::int32_t>(prefix.size());
  s.items = std::move(prefix);
  s.items.resize(static_cast<std::size_t>(seq_len), 0);
  s.user_id = "u";
  return s;
}

UserSequence distinct_seq(int real_length, int seq_len = 16) {
  std::vector<std::int32_t> prefix;
  for (int i = 1; i <= real_length; ++i) prefix.push_back(i * 10);
  return make_seq(std::move(prefix), seq_len);
}

int masked_count(const UserSequence& s) {
  int n = 0;
  for (std::int32_t k = 0; k < s.real_length; ++k)
    if (s.items[static_cast<std::size_t>(k)] == 0) ++n;
  return n;
}

}  // namespace

TEST_CASE("random_mask masked count follows Binomial(16, p)", "[augment]") {
  const UserSequence seq = distinct_seq(16);
  // Binomial(16, 0.2) oracle: mean 3.2, sd of the empirical mean over 1e5
  // draws ~ 0.005, so +/-0.05 is a 10-sigma band.
  Rng rng = Rng(99).derive({1});
  double total = 0.0;
  const int trials = 100000;
  for (int t = 0; t < trials; ++t) total += masked_count(random_mask(seq, 0.2, rng));
  REQUIRE_THAT(total / trials, Catch::Matchers::WithinAbs(3.2, 0.05));

  Rng rng_small = Rng(99).derive({2});
  double near_zero = 0.0;
  for (int t = 0; t < trials; ++t) near_zero += masked_count(random_mask(seq, 0.0001, rng_small));
  REQUIRE(near_zero / trials < 0.01);
}

TEST_CASE("random_mask is deterministic per stream and spares padding", "[augment]") {
  const UserSequence seq = distinct_seq(9);
  Rng a = Rng(5).derive({3});
  Rng b = Rng(5).derive({3});
  UserSequence o1 = random_mask(seq, 0.5, a);
  UserSequence o2 = random_mask(seq, 0.5, b);
  REQUIRE(o1.items == o2.items);
  REQUIRE(o1.real_length == seq.real_length);
  for (std::size_t k = static_cast<std::size_t>(seq.real_length); k < o1.items.size(); ++k)
    REQUIRE(o1.items[k] == 0);
}

TEST_CASE("segment_mask masks exactly floor(p*real_length) contiguous positions",
          "[augment]") {
  Rng rng = Rng(17).derive({4});
  for (int trial = 0; trial < 2000; ++trial) {
    const int rl = 1 + static_cast<int>(rng.next_below(16));
    const UserSequence seq = distinct_seq(rl);
    UserSequence out = segment_mask(seq, 0.2, rng);
    const int expect = static_cast<int>(0.2 * rl);
    REQUIRE(masked_count(out) == expect);
    // contiguity: zeros in the real prefix form one run
    int runs = 0;
    bool in_run = false;
    for (std::int32_t k = 0; k < out.real_length; ++k) {
      const bool z = out.items[static_cast<std::size_t>(k)] == 0;
      if (z && !in_run) ++runs;
      in_run = z;
    }
    REQUIRE(runs == (expect > 0 ? 1 : 0));
  }
  // floor boundary: p=0.2, real_length=4 -> m=0, input unchanged
  const UserSequence four = distinct_seq(4);
  Rng r2 = Rng(17).derive({5});
  REQUIRE(segment_mask(four, 0.2, r2).items == four.items);
}

TEST_CASE("segment_mask start index is uniform", "[augment]") {
  // chi-square uniformity oracle on [0, 13] for real_length 16, m = 3;
  // critical value at the 1% level with 13 dof is 27.688.
  const UserSequence seq = distinct_seq(16);
  Rng rng = Rng(23).derive({6});
  const int trials = 100000;
  std::vector<int> starts(14, 0);
  for (int t = 0; t < trials; ++t) {
    UserSequence out = segment_mask(seq, 0.2, rng);
    int first = -1;
    for (std::int32_t k = 0; k < out.real_length; ++k)
      if (out.items[static_cast<std::size_t>(k)] == 0) {
        first = k;
        break;
      }
    REQUIRE(first >= 0);
    REQUIRE(first <= 13);
    ++starts[static_cast<std::size_t>(first)];
  }
  const double expected = trials / 14.0;
  double chi2 = 0.0;
  for (int c : starts) chi2 += (c - expected) * (c - expected) / expected;
  REQUIRE(chi2 < 27.688);
}

TEST_CASE("permute preserves the item multiset and fixes padding", "[augment]") {
  Rng rng = Rng(29).derive({7});
  for (int trial = 0; trial < 2000; ++trial) {
    const int rl = 1 + static_cast<int>(rng.next_below(16));
    std::vector<std::int32_t> prefix;
    for (int i = 0; i < rl; ++i) prefix.push_back(static_cast<std::int32_t>(1 + rng.next_below(50)));
    const UserSequence seq = make_seq(prefix);
    UserSequence out = permute(seq, rng);
    REQUIRE(out.real_length == seq.real_length);
    auto a = seq.items, b = out.items;
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    REQUIRE(a == b);
    for (std::size_t k = static_cast<std::size_t>(rl); k < out.items.size(); ++k)
      REQUIRE(out.items[k] == 0);
  }
  const UserSequence single = distinct_seq(1);
  Rng r2 = Rng(29).derive({8});
  REQUIRE(permute(single, r2).items == single.items);
}

TEST_CASE("permute hits every ordering of a 3-prefix uniformly", "[augment]") {
  // exact enumeration oracle: 3! = 6 orderings, each at frequency 1/6
  const UserSequence seq = make_seq({1, 2, 3});
  Rng rng = Rng(31).derive({9});
  std::map<std::vector<std::int32_t>, int> freq;
  const int trials = 100000;
  for (int t = 0; t < trials; ++t) {
    UserSequence out = permute(seq, rng);
    freq[{out.items[0], out.items[1], out.items[2]}]++;
  }
  REQUIRE(freq.size() == 6);
  for (const auto& [order, count] : freq)
    REQUIRE_THAT(static_cast<double>(count) / trials,
                 Catch::Matchers::WithinAbs(1.0 / 6.0, 0.01));
}

TEST_CASE("make_views yields two differing deterministic views", "[augment]") {
  std::vector<UserSequence> batch;
  for (int i = 0; i < 8; ++i) batch.push_back(distinct_seq(16));
  AugmentationSpec spec{AugKind::random_mask, 0.2, 77};
  auto [v1, v2] = make_views(batch, spec, 1, 0);
  auto [w1, w2] = make_views(batch, spec, 1, 0);
  REQUIRE(v1.size() == batch.size());
  REQUIRE(v2.size() == batch.size());
  // determinism of the pair
  for (std::size_t i = 0; i < batch.size(); ++i) {
    REQUIRE(v1[i].items == w1[i].items);
    REQUIRE(v2[i].items == w2[i].items);
  }
  // the two views differ somewhere with overwhelming probability: the
  // per-sequence collision chance for Binomial(16,0.2) masks is ~2.8%
  // ((0.2^2+0.8^2)^16), so 8 independent sequences collide everywhere with
  // probability ~4e-13.
  bool any_diff = false;
  for (std::size_t i = 0; i < batch.size(); ++i) any_diff |= v1[i].items != v2[i].items;
  REQUIRE(any_diff);
  // originals untouched
  for (const auto& s : batch) REQUIRE(masked_count(s) == 0);
  // container shapes preserved
  for (std::size_t i = 0; i < batch.size(); ++i) REQUIRE(v1[i].items.size() == batch[i].items.size());
}

TEST_CASE("identical sequences still get independent views", "[augment]") {
  std::vector<UserSequence> batch(4, distinct_seq(16));
  AugmentationSpec spec{AugKind::segment_mask, 0.2, 7};
  auto [v1, v2] = make_views(batch, spec, 3, 11);
  bool differ = false;
  for (std::size_t i = 0; i < batch.size(); ++i)
    for (std::size_t j = i + 1; j < batch.size(); ++j) differ |= v1[i].items != v1[j].items;
  differ |= v1[0].items != v2[0].items;
  REQUIRE(differ);
}

TEST_CASE("augmented outputs stay valid sequences", "[augment]") {
  Rng rng = Rng(37).derive({10});
  const std::int32_t vocab_max = 50;
  for (int trial = 0; trial < 500; ++trial) {
    const int rl = 1 + static_cast<int>(rng.next_below(16));
    std::vector<std::int32_t> prefix;
    for (int i = 0; i < rl; ++i)
      prefix.push_back(static_cast<std::int32_t>(1 + rng.next_below(static_cast<std::uint64_t>(vocab_max))));
    const UserSequence seq = make_seq(prefix);
    for (AugKind kind : {AugKind::random_mask, AugKind::segment_mask, AugKind::permute}) {
      AugmentationSpec spec{kind, 0.3, rng.next_u64()};
      Rng r = Rng(spec.seed);
      UserSequence out = apply_augmentation(seq, spec, r);
      REQUIRE(out.real_length == seq.real_length);
      REQUIRE(out.items.size() == seq.items.size());
      for (std::int32_t v : out.items) {
        REQUIRE(v >= 0);
        REQUIRE(v <= vocab_max);
      }
    }
  }
}

TEST_CASE("invalid augmentation probability is rejected", "[augment]") {
  AugmentationSpec bad{AugKind::random_mask, 1.5, 0};
  REQUIRE_THROWS_AS(bad.validate(), contract_error);
  AugmentationSpec perm{AugKind::permute, 1.5, 0};
  REQUIRE_NOTHROW(perm.validate());  // p unused for permute
  std::vector<UserSequence> empty;
  AugmentationSpec ok{AugKind::random_mask, 0.2, 0};
  REQUIRE_THROWS_AS(make_views(empty, ok, 0, 0), contract_error);
}
