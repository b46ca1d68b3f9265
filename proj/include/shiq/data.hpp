#pragma once

#include "shiq/losses.hpp"
#include "shiq/mdp.hpp"
#include "shiq/parallel.hpp"
#include "shiq/policy.hpp"

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace shiq {

/// A named behaviour policy with a mixture weight.
struct Behavior {
    std::string tag;
    PolicyTable policy;
    double weight = 1.0;
};

struct BehaviorInfo {
    std::string tag;
    double weight = 1.0;
    bool operator==(const BehaviorInfo&) const = default;
};

struct Provenance {
    std::uint64_t seed = 0;
    std::string mdp;
    std::vector<BehaviorInfo> behaviors;
    bool operator==(const Provenance&) const = default;
};

/**
 * Offline records with optional preference pairs and same-prompt groups.
 * Each record belongs to at most one pair and at most one group.
 */
struct OfflineDataset {
    std::vector<Trajectory> records;
    std::vector<std::string> tags; ///< behaviour tag per record
    std::vector<PreferencePair> pairs;
    std::vector<std::vector<std::size_t>> groups;
    Provenance provenance;

    std::size_t size() const noexcept { return records.size(); }
    bool operator==(const OfflineDataset&) const;
};

inline constexpr std::size_t kShardSize = 1024;

/// n records from the weighted behaviour mixture. Shards of kShardSize records use
/// seeds derived from `seed`, so the result does not depend on the worker count.
OfflineDataset generate(MdpPtr mdp, std::span<const Behavior> behaviors, std::size_t n, std::uint64_t seed,
                        Execution exec = Execution::parallel);

/// n pairs: record 2i from `first`, record 2i+1 from `second`, sharing one sampled prompt.
/// Pairs are recorded with no preference.
OfflineDataset generate_paired(MdpPtr mdp, const Behavior& first, const Behavior& second, std::size_t n,
                               std::uint64_t seed, Execution exec = Execution::parallel);

/**
 * Marks preferences by return (strictly higher wins) and drops ties.
 * Existing pairs are relabelled; without pairs, records are shuffled per prompt
 * with `seed` and paired consecutively. Throws ValidationError when no pair survives.
 */
OfflineDataset pair_by_preference(const OfflineDataset& ds, const TokenMdp& mdp, std::uint64_t seed);

/// Same-prompt groups of `size` records after a seeded shuffle; leftovers stay ungrouped.
OfflineDataset group_by_prompt(const OfflineDataset& ds, std::size_t size, std::uint64_t seed);

/// Validates every record against `mdp` and builds a trajectory store.
std::shared_ptr<const TrajectoryStore> make_store(const OfflineDataset& ds, MdpPtr mdp);

inline constexpr int kDatasetVersion = 1;

/**
 * JSON lines. The first line is a header
 *   {"format":"shiq-dataset","version":1,"mdp":...,"seed":...,"behaviors":[...],"records":N}
 * then one record per line
 *   {"prompt":0,"actions":[...],"rewards":[...],"terminated":true,"behavior":"mu1",
 *    "pair":3,"side":0,"wins":true,"group":7}
 * where pair/side/wins/group are optional.
 */
void save_dataset(const OfflineDataset& ds, const std::string& path);
/// An empty file is an empty dataset. Throws ParseError with the 1-based line number.
OfflineDataset load_dataset(const std::string& path);

} // namespace shiq
