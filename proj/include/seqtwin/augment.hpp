#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "seqtwin/dataset.hpp"
#include "seqtwin/rng.hpp"

namespace seqtwin {

enum class AugKind { random_mask, segment_mask, permute };

inline std::string aug_kind_name(AugKind k) {
  switch (k) {
    case AugKind::random_mask: return "random_mask";
    case AugKind::segment_mask: return "segment_mask";
    case AugKind::permute: return "permute";
  }
  return "?";
}

inline AugKind aug_kind_from_name(const std::string& name) {
  if (name == "random_mask") return AugKind::random_mask;
  if (name == "segment_mask") return AugKind::segment_mask;
  if (name == "permute") return AugKind::permute;
  throw contract_error("unknown augmentation kind '" + name + "'");
}

// One stochastic view transform. p is ignored by permute.
struct AugmentationSpec {
  AugKind kind = AugKind::segment_mask;
  double p = 0.2;
  std::uint64_t seed = 0;

  void validate() const {
    if (kind != AugKind::permute && !(p > 0.0 && p < 1.0))
      throw contract_error("augmentation probability must be in (0,1), got " + std::to_string(p));
  }
};

// All augmentations touch only the real prefix [0, real_length); padding and
// real_length are preserved.

// Each real position independently replaced by the mask token with prob p.
inline UserSequence random_mask(const UserSequence& seq, double p, Rng& rng) {
  UserSequence out = seq;
  for (std::int32_t k = 0; k < seq.real_length; ++k)
    if (rng.next_double() < p) out.items[static_cast<std::size_t>(k)] = 0;
  return out;
}

// Masks a contiguous run of floor(p * real_length) positions at a uniform
// start; a no-op when the run would be empty.
inline UserSequence segment_mask(const UserSequence& seq, double p, Rng& rng) {
  UserSequence out = seq;
  const auto m = static_cast<std::int32_t>(p * static_cast<double>(seq.real_length));
  if (m < 1) return out;
  const auto start = static_cast<std::int32_t>(
      rng.next_below(static_cast<std::uint64_t>(seq.real_length - m + 1)));
  for (std::int32_t k = start; k < start + m; ++k) out.items[static_cast<std::size_t>(k)] = 0;
  return out;
}

// Uniform random permutation (Fisher-Yates) of the real prefix.
inline UserSequence permute(const UserSequence& seq, Rng& rng) {
  UserSequence out = seq;
  for (std::int32_t i = seq.real_length; i > 1; --i) {
    const auto j = static_cast<std::int32_t>(rng.next_below(static_cast<std::uint64_t>(i)));
    std::swap(out.items[static_cast<std::size_t>(i - 1)], out.items[static_cast<std::size_t>(j)]);
  }
  return out;
}

inline UserSequence apply_augmentation(const UserSequence& seq, const AugmentationSpec& spec,
                                       Rng& rng) {
  switch (spec.kind) {
    case AugKind::random_mask: return random_mask(seq, spec.p, rng);
    case AugKind::segment_mask: return segment_mask(seq, spec.p, rng);
    case AugKind::permute: return permute(seq, rng);
  }
  throw contract_error("unreachable augmentation kind");
}

// Two independently augmented copies of the batch. Streams are keyed by
// (spec.seed, epoch, batch_index, view, position), so the pair is a pure
// function of those coordinates and the originals are never modified.
inline std::pair<std::vector<UserSequence>, std::vector<UserSequence>> make_views(
    const std::vector<UserSequence>& batch, const AugmentationSpec& spec, std::uint64_t epoch,
    std::uint64_t batch_index) {
  if (batch.empty()) throw contract_error("make_views on an empty batch");
  spec.validate();
  std::pair<std::vector<UserSequence>, std::vector<UserSequence>> views;
  const Rng root(spec.seed);
  for (std::uint64_t view = 0; view < 2; ++view) {
    auto& dst = view == 0 ? views.first : views.second;
    dst.reserve(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
      Rng rng = root.derive({epoch, batch_index, view, static_cast<std::uint64_t>(i)});
      dst.push_back(apply_augmentation(batch[i], spec, rng));
    }
  }
  return views;
}

}  // namespace seqtwin
