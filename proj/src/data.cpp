#include "shiq/data.hpp"

#include "shiq/errors.hpp"
#include "shiq/numeric.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

namespace shiq {

using nlohmann::json;

bool OfflineDataset::operator==(const OfflineDataset& o) const {
    if (records != o.records || tags != o.tags || groups != o.groups || !(provenance == o.provenance)) return false;
    if (pairs.size() != o.pairs.size()) return false;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        const auto &a = pairs[i], &b = o.pairs[i];
        if (a.first != b.first || a.second != b.second || a.preferred != b.preferred) return false;
    }
    return true;
}

namespace {

void check_behavior(const TokenMdp& mdp, const Behavior& b) {
    if (!b.policy.mdp || b.policy.mdp.get() != &mdp) throw ValidationError("behavior '" + b.tag + "' belongs to another MDP");
    if (!(b.weight >= 0.0) || !std::isfinite(b.weight))
        throw ValidationError("behavior '" + b.tag + "' has invalid weight");
}

template <class Fill>
void run_shards(std::size_t n, Execution exec, Fill fill) {
    const std::size_t shards = (n + kShardSize - 1) / kShardSize;
    const auto count = static_cast<std::int64_t>(shards);
#pragma omp parallel for schedule(dynamic) num_threads(worker_count()) if (exec == Execution::parallel)
    for (std::int64_t k = 0; k < count; ++k) fill(static_cast<std::size_t>(k));
}

Provenance provenance_of(const TokenMdp& mdp, std::uint64_t seed, std::span<const Behavior> behaviors) {
    Provenance p;
    p.seed = seed;
    p.mdp = mdp.name();
    for (const auto& b : behaviors) p.behaviors.push_back({b.tag, b.weight});
    return p;
}

} // namespace

OfflineDataset generate(MdpPtr mdp, std::span<const Behavior> behaviors, std::size_t n, std::uint64_t seed,
                        Execution exec) {
    if (n == 0) throw ValidationError("dataset size must be at least 1");
    if (behaviors.empty()) throw ValidationError("no behavior policies");
    double total = 0.0;
    for (const auto& b : behaviors) {
        check_behavior(*mdp, b);
        total += b.weight;
    }
    if (total <= 0.0) throw ValidationError("behavior mixture has zero total weight");

    OfflineDataset ds;
    ds.records.resize(n);
    ds.tags.resize(n);
    ds.provenance = provenance_of(*mdp, seed, behaviors);
    run_shards(n, exec, [&](std::size_t shard) {
        SplitMix64 rng(derive_seed(seed, shard));
        const std::size_t end = std::min(n, (shard + 1) * kShardSize);
        for (std::size_t i = shard * kShardSize; i < end; ++i) {
            const double u = rng.uniform() * total;
            std::size_t pick = 0;
            double c = 0.0;
            for (std::size_t b = 0; b < behaviors.size(); ++b) {
                if (behaviors[b].weight <= 0.0) continue;
                c += behaviors[b].weight;
                pick = b;
                if (u < c) break;
            }
            ds.records[i] = sample_trajectory(behaviors[pick].policy, rng);
            ds.tags[i] = behaviors[pick].tag;
        }
    });
    return ds;
}

OfflineDataset generate_paired(MdpPtr mdp, const Behavior& first, const Behavior& second, std::size_t n,
                               std::uint64_t seed, Execution exec) {
    if (n == 0) throw ValidationError("pair count must be at least 1");
    check_behavior(*mdp, first);
    check_behavior(*mdp, second);
    OfflineDataset ds;
    ds.records.resize(2 * n);
    ds.tags.resize(2 * n);
    ds.pairs.resize(n);
    const Behavior both[] = {first, second};
    ds.provenance = provenance_of(*mdp, seed, both);
    run_shards(n, exec, [&](std::size_t shard) {
        SplitMix64 rng(derive_seed(seed, shard));
        const std::size_t end = std::min(n, (shard + 1) * kShardSize);
        for (std::size_t i = shard * kShardSize; i < end; ++i) {
            const StateId prompt = sample_prompt(*mdp, rng);
            ds.records[2 * i] = sample_completion(first.policy, prompt, rng);
            ds.records[2 * i + 1] = sample_completion(second.policy, prompt, rng);
            ds.tags[2 * i] = first.tag;
            ds.tags[2 * i + 1] = second.tag;
            ds.pairs[i] = {2 * i, 2 * i + 1, Preference::unmarked};
        }
    });
    return ds;
}

OfflineDataset pair_by_preference(const OfflineDataset& ds, const TokenMdp& mdp, std::uint64_t seed) {
    std::vector<PreferencePair> candidates = ds.pairs;
    if (candidates.empty()) {
        std::map<StateId, std::vector<std::size_t>> by_prompt;
        for (std::size_t i = 0; i < ds.size(); ++i) by_prompt[ds.records[i].prompt].push_back(i);
        SplitMix64 rng(seed);
        for (auto& [prompt, idx] : by_prompt) {
            std::shuffle(idx.begin(), idx.end(), rng);
            for (std::size_t k = 0; k + 1 < idx.size(); k += 2) candidates.push_back({idx[k], idx[k + 1], Preference::unmarked});
        }
    }
    OfflineDataset out = ds;
    out.pairs.clear();
    std::size_t ties = 0, mixed = 0;
    for (const auto& c : candidates) {
        const Trajectory& a = ds.records.at(c.first);
        const Trajectory& b = ds.records.at(c.second);
        if (a.prompt != b.prompt) {
            ++mixed;
            continue;
        }
        const double ra = mdp.return_of(a), rb = mdp.return_of(b);
        if (ra == rb) {
            ++ties;
            continue;
        }
        out.pairs.push_back({c.first, c.second, ra > rb ? Preference::first : Preference::second});
    }
    if (out.pairs.empty()) {
        std::ostringstream msg;
        msg << "no valid preference pair: " << ds.size() << " records, " << candidates.size() << " candidates, " << ties
            << " ties, " << mixed << " cross-prompt";
        throw ValidationError(msg.str());
    }
    return out;
}

OfflineDataset group_by_prompt(const OfflineDataset& ds, std::size_t size, std::uint64_t seed) {
    if (size < 2) throw ValidationError("group size must be at least 2");
    std::map<StateId, std::vector<std::size_t>> by_prompt;
    for (std::size_t i = 0; i < ds.size(); ++i) by_prompt[ds.records[i].prompt].push_back(i);
    OfflineDataset out = ds;
    out.groups.clear();
    SplitMix64 rng(seed);
    for (auto& [prompt, idx] : by_prompt) {
        std::shuffle(idx.begin(), idx.end(), rng);
        for (std::size_t k = 0; k + size <= idx.size(); k += size)
            out.groups.emplace_back(idx.begin() + static_cast<std::ptrdiff_t>(k),
                                    idx.begin() + static_cast<std::ptrdiff_t>(k + size));
    }
    for (auto& g : out.groups) std::sort(g.begin(), g.end());
    if (out.groups.empty()) throw ValidationError("no prompt has " + std::to_string(size) + " records");
    return out;
}

std::shared_ptr<const TrajectoryStore> make_store(const OfflineDataset& ds, MdpPtr mdp) {
    return std::make_shared<const TrajectoryStore>(std::move(mdp), ds.records);
}

// ---------------------------------------------------------------------------
// Persistence

void save_dataset(const OfflineDataset& ds, const std::string& path) {
    if (ds.tags.size() != ds.records.size()) throw ValidationError("tag count differs from record count");
    struct Membership {
        long pair = -1;
        int side = 0;
        bool wins = false;
        long group = -1;
    };
    std::vector<Membership> member(ds.size());
    for (std::size_t p = 0; p < ds.pairs.size(); ++p) {
        const auto& pr = ds.pairs[p];
        for (int side = 0; side < 2; ++side) {
            const std::size_t r = side == 0 ? pr.first : pr.second;
            if (r >= ds.size()) throw ValidationError("pair references a missing record");
            if (member[r].pair >= 0) throw ValidationError("record " + std::to_string(r) + " is in two pairs");
            member[r].pair = static_cast<long>(p);
            member[r].side = side;
            member[r].wins = (side == 0 && pr.preferred == Preference::first) ||
                             (side == 1 && pr.preferred == Preference::second);
        }
    }
    for (std::size_t g = 0; g < ds.groups.size(); ++g)
        for (std::size_t r : ds.groups[g]) {
            if (r >= ds.size()) throw ValidationError("group references a missing record");
            if (member[r].group >= 0) throw ValidationError("record " + std::to_string(r) + " is in two groups");
            member[r].group = static_cast<long>(g);
        }

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw ValidationError("cannot write " + path);
    json header = {{"format", "shiq-dataset"},
                   {"version", kDatasetVersion},
                   {"mdp", ds.provenance.mdp},
                   {"seed", ds.provenance.seed},
                   {"records", ds.size()},
                   {"pairs", ds.pairs.size()},
                   {"groups", ds.groups.size()}};
    json behaviors = json::array();
    for (const auto& b : ds.provenance.behaviors) behaviors.push_back({{"tag", b.tag}, {"weight", b.weight}});
    header["behaviors"] = behaviors;
    out << header.dump() << '\n';
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const Trajectory& t = ds.records[i];
        json rec = {{"prompt", t.prompt},
                    {"actions", t.actions},
                    {"rewards", t.step_rewards},
                    {"terminated", t.terminated},
                    {"behavior", ds.tags[i]}};
        if (member[i].pair >= 0) {
            rec["pair"] = member[i].pair;
            rec["side"] = member[i].side;
            rec["wins"] = member[i].wins;
        }
        if (member[i].group >= 0) rec["group"] = member[i].group;
        out << rec.dump() << '\n';
    }
    if (!out) throw ValidationError("write failed: " + path);
}

namespace {

template <class T>
T field(const json& j, const char* key, std::size_t line) {
    const auto it = j.find(key);
    if (it == j.end()) throw ParseError(std::string("missing field '") + key + "'", line);
    try {
        return it->get<T>();
    } catch (const json::exception&) {
        throw ParseError(std::string("bad field '") + key + "'", line);
    }
}

} // namespace

OfflineDataset load_dataset(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError("cannot open " + path);
    OfflineDataset ds;
    std::string text;
    std::size_t line = 0;
    bool have_header = false;
    std::size_t declared = 0, declared_pairs = 0, declared_groups = 0;
    struct Side {
        std::size_t record = 0;
        bool wins = false;
        bool present = false;
    };
    std::map<long, std::array<Side, 2>> pair_sides;
    std::map<long, std::vector<std::size_t>> group_members;

    while (std::getline(in, text)) {
        ++line;
        if (text.empty()) {
            if (in.peek() == std::char_traits<char>::eof()) break;
            throw ParseError("empty line", line);
        }
        json j;
        try {
            j = json::parse(text);
        } catch (const json::parse_error& e) {
            throw ParseError(std::string("invalid JSON: ") + e.what(), line);
        }
        if (!j.is_object()) throw ParseError("expected an object", line);
        if (!have_header) {
            if (field<std::string>(j, "format", line) != "shiq-dataset") throw ParseError("unknown format", line);
            const int version = field<int>(j, "version", line);
            if (version != kDatasetVersion) throw ParseError("unsupported version " + std::to_string(version), line);
            ds.provenance.mdp = field<std::string>(j, "mdp", line);
            ds.provenance.seed = field<std::uint64_t>(j, "seed", line);
            declared = field<std::size_t>(j, "records", line);
            declared_pairs = field<std::size_t>(j, "pairs", line);
            declared_groups = field<std::size_t>(j, "groups", line);
            for (const auto& b : field<json>(j, "behaviors", line))
                ds.provenance.behaviors.push_back({field<std::string>(b, "tag", line), field<double>(b, "weight", line)});
            have_header = true;
            continue;
        }
        Trajectory t;
        t.prompt = field<StateId>(j, "prompt", line);
        t.actions = field<std::vector<ActionId>>(j, "actions", line);
        t.step_rewards = field<std::vector<double>>(j, "rewards", line);
        t.terminated = field<bool>(j, "terminated", line);
        if (t.actions.size() != t.step_rewards.size()) throw ParseError("actions and rewards differ in length", line);
        const std::size_t index = ds.records.size();
        if (j.contains("pair")) {
            const long p = field<long>(j, "pair", line);
            const int side = field<int>(j, "side", line);
            if (p < 0 || (side != 0 && side != 1)) throw ParseError("bad pair membership", line);
            Side& slot = pair_sides[p][static_cast<std::size_t>(side)];
            if (slot.present) throw ParseError("pair " + std::to_string(p) + " side repeated", line);
            slot = {index, field<bool>(j, "wins", line), true};
        }
        if (j.contains("group")) {
            const long g = field<long>(j, "group", line);
            if (g < 0) throw ParseError("bad group id", line);
            group_members[g].push_back(index);
        }
        ds.records.push_back(std::move(t));
        ds.tags.push_back(field<std::string>(j, "behavior", line));
    }
    if (!have_header) return ds;
    if (ds.size() != declared)
        throw ParseError("header declares " + std::to_string(declared) + " records, found " + std::to_string(ds.size()),
                         line);
    long expect = 0;
    for (const auto& [id, sides] : pair_sides) {
        if (id != expect++ || !sides[0].present || !sides[1].present) throw ParseError("incomplete pair " + std::to_string(id));
        if (sides[0].wins && sides[1].wins) throw ParseError("pair " + std::to_string(id) + " has two winners");
        const Preference pref =
            sides[0].wins ? Preference::first : (sides[1].wins ? Preference::second : Preference::unmarked);
        ds.pairs.push_back({sides[0].record, sides[1].record, pref});
    }
    expect = 0;
    for (auto& [id, members] : group_members) {
        if (id != expect++) throw ParseError("missing group " + std::to_string(expect - 1));
        ds.groups.push_back(std::move(members));
    }
    if (ds.pairs.size() != declared_pairs || ds.groups.size() != declared_groups)
        throw ParseError("pair or group count differs from header");
    return ds;
}

} // namespace shiq
