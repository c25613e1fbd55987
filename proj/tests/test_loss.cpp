#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "seqtwin/loss.hpp"
#include "seqtwin/tensor.hpp"
#include "testutil.hpp"

using namespace seqtwin;
using testutil::check_gradient;
using testutil::random_tensor;

namespace {

using Matrix = std::vector<std::vector<double>>;

Matrix to_matrix(const Tensor& t) {
  Matrix m(static_cast<std::size_t>(t.dim(0)),
           std::vector<double>(static_cast<std::size_t>(t.dim(1))));
  for (int i = 0; i < t.dim(0); ++i)
    for (int j = 0; j < t.dim(1); ++j) m[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = t.at({i, j});
  return m;
}

// Independent double-loop implementation of the cross-correlation matrix of
// two already-centered view batches.
Matrix cross_correlation_oracle(const Matrix& y1, const Matrix& y2) {
  const std::size_t b = y1.size(), d = y1[0].size();
  Matrix c(d, std::vector<double>(d, 0.0));
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      double num = 0.0, n1 = 1e-12, n2 = 1e-12;
      for (std::size_t k = 0; k < b; ++k) {
        num += y1[k][i] * y2[k][j];
        n1 += y1[k][i] * y1[k][i];
        n2 += y2[k][j] * y2[k][j];
      }
      c[i][j] = num / (std::sqrt(n1) * std::sqrt(n2));
    }
  return c;
}

Matrix center_oracle(const Matrix& y) {
  const std::size_t b = y.size(), d = y[0].size();
  Matrix out = y;
  for (std::size_t j = 0; j < d; ++j) {
    double mean = 0.0;
    for (std::size_t i = 0; i < b; ++i) mean += y[i][j];
    mean /= static_cast<double>(b);
    for (std::size_t i = 0; i < b; ++i) out[i][j] -= mean;
  }
  return out;
}

// Brute-force Barlow Twins loss: center, correlate, then the two sums.
double bt_loss_oracle(const Matrix& y1, const Matrix& y2, double lambda) {
  Matrix c = cross_correlation_oracle(center_oracle(y1), center_oracle(y2));
  const std::size_t d = c.size();
  double invariance = 0.0, redundancy = 0.0;
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      if (i == j)
        invariance += 1.0 - c[i][j];
      else
        redundancy += c[i][j] * c[i][j];
    }
  return invariance + lambda * redundancy;
}

// Brute-force in-batch contrastive loss: direct per-row softmax over the
// batch logit matrix with the diagonal as the positive.
double contrastive_oracle(const Matrix& context, const Matrix& targets) {
  const std::size_t b = context.size(), d = context[0].size();
  double loss = 0.0;
  for (std::size_t r = 0; r < b; ++r) {
    std::vector<double> logits(b, 0.0);
    for (std::size_t cidx = 0; cidx < b; ++cidx)
      for (std::size_t k = 0; k < d; ++k) logits[cidx] += context[r][k] * targets[cidx][k];
    double mx = logits[0];
    for (double v : logits) mx = std::max(mx, v);
    double z = 0.0;
    for (double v : logits) z += std::exp(v - mx);
    loss += std::log(z) + mx - logits[r];
  }
  return loss / static_cast<double>(b);
}

}  // namespace

TEST_CASE("orthogonal centered columns give the identity correlation and zero loss",
          "[loss]") {
  Tape tape;
  Tensor y = Tensor::from({4, 2}, {1, 1, -1, 1, 1, -1, -1, -1});
  Tensor corr = cross_correlation(tape, y, y);
  REQUIRE_THAT(corr.at({0, 0}), Catch::Matchers::WithinAbs(1.0, 1e-9));
  REQUIRE_THAT(corr.at({1, 1}), Catch::Matchers::WithinAbs(1.0, 1e-9));
  REQUIRE_THAT(corr.at({0, 1}), Catch::Matchers::WithinAbs(0.0, 1e-9));
  REQUIRE_THAT(corr.at({1, 0}), Catch::Matchers::WithinAbs(0.0, 1e-9));
  REQUIRE_THAT(barlow_twins_loss(tape, y, y, 10.0).value(),
               Catch::Matchers::WithinAbs(0.0, 1e-9));
}

TEST_CASE("perfectly correlated two-dim case scores 20 at lambda 10", "[loss]") {
  Tape tape;
  Tensor y = Tensor::from({2, 2}, {1, 1, -1, -1});
  Tensor corr = cross_correlation(tape, y, y);
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j)
      REQUIRE_THAT(corr.at({i, j}), Catch::Matchers::WithinAbs(1.0, 1e-9));
  REQUIRE_THAT(barlow_twins_loss(tape, y, y, 10.0).value(),
               Catch::Matchers::WithinAbs(20.0, 1e-9));
}

TEST_CASE("cross_correlation matches the double-loop oracle", "[loss]") {
  Rng rng(211);
  Tensor y1 = random_tensor({8, 4}, rng, false, 2.0);
  Tensor y2 = random_tensor({8, 4}, rng, false, 2.0);
  Tape tape;
  Tensor c1 = mean_center_columns(tape, y1);
  Tensor c2 = mean_center_columns(tape, y2);
  Tensor corr = cross_correlation(tape, c1, c2);
  Matrix expect = cross_correlation_oracle(to_matrix(c1), to_matrix(c2));
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j)
      REQUIRE_THAT(corr.at({i, j}),
                   Catch::Matchers::WithinAbs(expect[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)], 1e-12));
}

TEST_CASE("barlow twins loss matches the brute-force oracle on 100 random instances",
          "[loss]") {
  Rng rng(223);
  for (int trial = 0; trial < 100; ++trial) {
    const int b = 2 + static_cast<int>(rng.next_below(9));
    const int d = 2 + static_cast<int>(rng.next_below(7));
    Tensor y1 = random_tensor({b, d}, rng, false, 2.0);
    Tensor y2 = random_tensor({b, d}, rng, false, 2.0);
    const double lambda = rng.next_double() * 20.0;
    Tape tape;
    const double got = barlow_twins_loss(tape, y1, y2, lambda).value();
    const double want = bt_loss_oracle(to_matrix(y1), to_matrix(y2), lambda);
    REQUIRE_THAT(got, Catch::Matchers::WithinAbs(want, 1e-12));
  }
}

TEST_CASE("barlow twins loss is nonnegative with bounded correlations", "[loss]") {
  Rng rng(227);
  for (int trial = 0; trial < 50; ++trial) {
    const int b = 2 + static_cast<int>(rng.next_below(9));
    const int d = 2 + static_cast<int>(rng.next_below(7));
    Tensor y1 = random_tensor({b, d}, rng, false, 3.0);
    Tensor y2 = random_tensor({b, d}, rng, false, 3.0);
    Tape tape;
    REQUIRE(barlow_twins_loss(tape, y1, y2, 10.0).value() >= 0.0);
    Tensor corr = cross_correlation(tape, mean_center_columns(tape, y1),
                                    mean_center_columns(tape, y2));
    for (double v : corr.values()) REQUIRE(std::abs(v) <= 1.0 + 1e-9);
  }
}

TEST_CASE("loss is invariant to positive per-column rescaling", "[loss]") {
  Rng rng(229);
  Tensor y1 = random_tensor({6, 5}, rng, false, 2.0);
  Tensor y2 = random_tensor({6, 5}, rng, false, 2.0);
  Tape tape;
  const double base = barlow_twins_loss(tape, y1, y2, 10.0).value();
  Tensor s1 = Tensor::zeros(y1.shape());
  Tensor s2 = Tensor::zeros(y2.shape());
  for (int j = 0; j < 5; ++j) {
    const double a = 0.1 + rng.next_double() * 5.0;
    const double b = 0.1 + rng.next_double() * 5.0;
    for (int i = 0; i < 6; ++i) {
      s1.at({i, j}) = y1.at({i, j}) * a;
      s2.at({i, j}) = y2.at({i, j}) * b;
    }
  }
  REQUIRE_THAT(barlow_twins_loss(tape, s1, s2, 10.0).value(),
               Catch::Matchers::WithinAbs(base, 1e-9));
}

TEST_CASE("loss gradient matches finite differences", "[loss][fd]") {
  Rng rng(233);
  Tensor y1 = random_tensor({5, 4}, rng, true, 2.0);
  Tensor y2 = random_tensor({5, 4}, rng, true, 2.0);
  Tape tape;
  Tensor loss = barlow_twins_loss(tape, y1, y2, 10.0);
  tape.backward(loss);
  auto fwd = [&]() {
    Tape t;
    NoGradGuard ng(t);
    return barlow_twins_loss(t, y1, y2, 10.0).value();
  };
  REQUIRE(check_gradient(y1, fwd).max_rel_err < 1e-4);
  REQUIRE(check_gradient(y2, fwd).max_rel_err < 1e-4);
}

TEST_CASE("degenerate batch is rejected", "[loss]") {
  Tape tape;
  Tensor one = Tensor::from({1, 3}, {1, 2, 3});
  REQUIRE_THROWS_AS(cross_correlation(tape, one, one), contract_error);
  REQUIRE_THROWS_AS(barlow_twins_loss(tape, one, one, 10.0), contract_error);
}

TEST_CASE("contrastive loss basics", "[loss]") {
  Tape tape;
  Tensor emb = Tensor::from({4, 2}, {0, 0, 1, 0, 0, 1, 1, 1});
  // single example: the only logit wins outright
  Tensor ctx1 = Tensor::from({1, 2}, {0.3, -0.2});
  REQUIRE(in_batch_contrastive_loss(tape, ctx1, {2}, emb).value() == 0.0);
  // two rows with all logits equal: ln 2
  Tensor ctx2 = Tensor::zeros({2, 2});
  REQUIRE_THAT(in_batch_contrastive_loss(tape, ctx2, {1, 3}, emb).value(),
               Catch::Matchers::WithinAbs(std::log(2.0), 1e-15));
  // duplicate targets remain distinct columns
  Tensor ctx3 = Tensor::from({2, 2}, {0.5, 0.25, -1.0, 2.0});
  REQUIRE_THAT(in_batch_contrastive_loss(tape, ctx3, {2, 2}, emb).value(),
               Catch::Matchers::WithinAbs(std::log(2.0), 1e-12));
}

TEST_CASE("contrastive loss matches the brute-force oracle", "[loss]") {
  Rng rng(239);
  for (int trial = 0; trial < 100; ++trial) {
    const int b = 1 + static_cast<int>(rng.next_below(6));
    const int d = 2 + static_cast<int>(rng.next_below(5));
    const int v = b + 2 + static_cast<int>(rng.next_below(4));
    Tensor ctx = random_tensor({b, d}, rng, false, 1.5);
    Tensor emb = random_tensor({v + 1, d}, rng, false, 1.5);
    std::vector<std::int32_t> targets;
    Matrix target_rows;
    for (int i = 0; i < b; ++i) {
      const auto item = static_cast<std::int32_t>(1 + rng.next_below(static_cast<std::uint64_t>(v)));
      targets.push_back(item);
      std::vector<double> row(static_cast<std::size_t>(d));
      for (int k = 0; k < d; ++k) row[static_cast<std::size_t>(k)] = emb.at({item, k});
      target_rows.push_back(std::move(row));
    }
    Tape tape;
    const double got = in_batch_contrastive_loss(tape, ctx, targets, emb).value();
    REQUIRE_THAT(got, Catch::Matchers::WithinAbs(contrastive_oracle(to_matrix(ctx), target_rows),
                                                 1e-12));
  }
}

TEST_CASE("raising the diagonal logit lowers the contrastive loss", "[loss]") {
  // orthogonal one-hot contexts: scaling the matched embeddings touches only
  // the diagonal of the logit matrix
  Tape tape;
  double prev = 1e18;
  for (double alpha : {0.0, 0.5, 1.0, 2.0}) {
    Tensor ctx = Tensor::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    Tensor emb = Tensor::zeros({4, 3});
    emb.at({1, 0}) = alpha;
    emb.at({2, 1}) = alpha;
    emb.at({3, 2}) = alpha;
    const double loss = in_batch_contrastive_loss(tape, ctx, {1, 2, 3}, emb).value();
    REQUIRE(loss < prev + 1e-15);
    if (alpha > 0.0) REQUIRE(loss < prev);
    prev = loss;
  }
}

TEST_CASE("contrastive loss gradient matches finite differences", "[loss][fd]") {
  Rng rng(241);
  Tensor ctx = random_tensor({4, 3}, rng, true);
  Tensor emb = random_tensor({6, 3}, rng, true);
  std::vector<std::int32_t> targets{1, 5, 2, 2};
  Tape tape;
  Tensor loss = in_batch_contrastive_loss(tape, ctx, targets, emb);
  tape.backward(loss);
  auto fwd = [&]() {
    Tape t;
    NoGradGuard ng(t);
    return in_batch_contrastive_loss(t, ctx, targets, emb).value();
  };
  REQUIRE(check_gradient(ctx, fwd).max_rel_err < 1e-4);
  REQUIRE(check_gradient(emb, fwd).max_rel_err < 1e-4);
}
