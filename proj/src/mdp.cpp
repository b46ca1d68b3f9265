#include "shiq/mdp.hpp"

#include "shiq/errors.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <deque>
#include <numeric>
#include <sstream>

namespace shiq {

namespace {

void append_int(StateKey& key, std::int32_t v) {
    char buf[sizeof v];
    std::memcpy(buf, &v, sizeof v);
    key.append(buf, sizeof v);
}

std::int32_t read_int(const StateKey& key, std::size_t index) {
    std::int32_t v = 0;
    std::memcpy(&v, key.data() + index * sizeof v, sizeof v);
    return v;
}

std::size_t int_count(const StateKey& key) { return key.size() / sizeof(std::int32_t); }

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

std::uint64_t fnv1a(const StateKey& key) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : key) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

} // namespace

std::string Environment::describe(const StateKey& key) const {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < int_count(key); ++i) os << (i ? "," : "") << read_int(key, i);
    os << ')';
    return os.str();
}

// ---------------------------------------------------------------------------
// TokenMdp

TokenMdp::TokenMdp(std::shared_ptr<const Environment> env, std::size_t pair_cap) : env_(std::move(env)) {
    if (!env_) throw ValidationError("TokenMdp: null environment");
    name_ = env_->name();
    vocabulary_size_ = env_->vocabulary_size();
    eos_ = env_->eos_action();
    t_max_ = env_->t_max();
    gamma_ = env_->gamma();
    if (vocabulary_size_ <= 0) throw ValidationError("TokenMdp: vocabulary size must be positive");
    if (t_max_ <= 0) throw ValidationError("TokenMdp: t_max must be positive");
    if (!(gamma_ > 0.0 && gamma_ <= 1.0)) throw ValidationError("TokenMdp: gamma must lie in (0, 1]");
    if (eos_ && (*eos_ < 0 || *eos_ >= vocabulary_size_)) throw ValidationError("TokenMdp: eos outside vocabulary");

    auto prompts = env_->initial_states();
    if (prompts.empty()) throw ValidationError("TokenMdp: no initial states");
    double total = 0.0;
    for (const auto& [k, w] : prompts) {
        if (!(w > 0.0)) throw ValidationError("TokenMdp: initial-state weights must be positive");
        total += w;
    }

    layers_.resize(static_cast<std::size_t>(t_max_) + 1);
    auto intern = [&](const StateKey& key, int time) -> StateId {
        if (auto it = index_.find(key); it != index_.end()) {
            if (time_[it->second] != time)
                throw ValidationError("TokenMdp: state key reached at two different times: " + env_->describe(key));
            return it->second;
        }
        const auto id = static_cast<StateId>(keys_.size());
        keys_.push_back(key);
        time_.push_back(time);
        index_.emplace(key, id);
        layers_[static_cast<std::size_t>(time)].push_back(id);
        return id;
    };

    for (const auto& [k, w] : prompts) {
        const StateId id = intern(k, 1);
        initial_.push_back({id, w / total});
    }

    // States are interned in BFS order, so processing them by id is breadth-first.
    offsets_.push_back(0);
    for (std::size_t s = 0; s < keys_.size(); ++s) {
        const StateKey key = keys_[s];
        const int time = time_[s];
        auto actions = env_->admissible_actions(key, time);
        if (actions.empty())
            throw ValidationError("TokenMdp: state without admissible actions: " + env_->describe(key));
        if (!std::is_sorted(actions.begin(), actions.end()) ||
            std::adjacent_find(actions.begin(), actions.end()) != actions.end())
            throw ValidationError("TokenMdp: admissible actions must be strictly ascending");
        for (ActionId a : actions) {
            if (a < 0 || a >= vocabulary_size_) throw ValidationError("TokenMdp: action outside vocabulary");
            EnvStep st = env_->step(key, a, time);
            const bool terminal = st.terminal || (eos_ && a == *eos_) || time == t_max_;
            Transition tr{a, kTerminalState, st.reward, terminal ? 0.0 : gamma_, st.success};
            if (!terminal) tr.next = intern(st.next, time + 1);
            transitions_.push_back(tr);
            if (transitions_.size() > pair_cap)
                throw ResourceError("TokenMdp: more than " + std::to_string(pair_cap) +
                                    " (state, action) pairs; raise the enumeration cap");
        }
        offsets_.push_back(transitions_.size());
    }

    feature_dim_ = env_->feature_dim();
    feature_offsets_.push_back(0);
    for (std::size_t s = 0; s < keys_.size(); ++s) {
        if (feature_dim_ == 0) {
            feature_entries_.push_back({s, 1.0});
        } else {
            for (const FeatureEntry& f : env_->features(keys_[s])) {
                if (f.index >= feature_dim_) throw ValidationError("TokenMdp: feature index out of range");
                feature_entries_.push_back(f);
            }
        }
        feature_offsets_.push_back(feature_entries_.size());
    }
    if (feature_dim_ == 0) feature_dim_ = keys_.size();
}

void TokenMdp::check_state(StateId s) const {
    if (s < 0 || static_cast<std::size_t>(s) >= time_.size())
        throw DomainError("unknown state id " + std::to_string(s));
}

int TokenMdp::time_of(StateId s) const {
    check_state(s);
    return time_[static_cast<std::size_t>(s)];
}

std::span<const StateId> TokenMdp::states_at_time(int time) const {
    if (time < 1 || time > t_max_) throw DomainError("time index out of range: " + std::to_string(time));
    return layers_[static_cast<std::size_t>(time)];
}

std::span<const Transition> TokenMdp::transitions(StateId s) const {
    check_state(s);
    const auto i = static_cast<std::size_t>(s);
    return {transitions_.data() + offsets_[i], offsets_[i + 1] - offsets_[i]};
}

std::size_t TokenMdp::pair_offset(StateId s) const {
    check_state(s);
    return offsets_[static_cast<std::size_t>(s)];
}

int TokenMdp::slot_of(StateId s, ActionId action) const {
    const auto trs = transitions(s);
    const auto it = std::lower_bound(trs.begin(), trs.end(), action,
                                     [](const Transition& t, ActionId a) { return t.action < a; });
    if (it == trs.end() || it->action != action) return -1;
    return static_cast<int>(it - trs.begin());
}

const Transition& TokenMdp::transition_info(StateId s, ActionId action) const {
    const int slot = slot_of(s, action);
    if (slot < 0)
        throw DomainError("action " + env_->action_name(action) + " is not admissible at state " + describe(s));
    return transitions(s)[static_cast<std::size_t>(slot)];
}

double TokenMdp::discount_rule(ActionId action, int time) const {
    if (time < 1 || time > t_max_) throw DomainError("time index out of range: " + std::to_string(time));
    if ((eos_ && action == *eos_) || time == t_max_) return 0.0;
    return gamma_;
}

const StateKey& TokenMdp::key(StateId s) const {
    check_state(s);
    return keys_[static_cast<std::size_t>(s)];
}

std::optional<StateId> TokenMdp::find(const StateKey& key) const {
    if (auto it = index_.find(key); it != index_.end()) return it->second;
    return std::nullopt;
}

std::span<const FeatureEntry> TokenMdp::features(StateId s) const {
    check_state(s);
    const auto i = static_cast<std::size_t>(s);
    return {feature_entries_.data() + feature_offsets_[i], feature_offsets_[i + 1] - feature_offsets_[i]};
}

std::vector<StateId> TokenMdp::walk(const Trajectory& traj) const {
    if (traj.actions.empty()) throw ValidationError("trajectory has no actions");
    if (traj.actions.size() != traj.step_rewards.size())
        throw ValidationError("trajectory reward list length " + std::to_string(traj.step_rewards.size()) +
                              " does not match action count " + std::to_string(traj.actions.size()));
    if (traj.actions.size() > static_cast<std::size_t>(t_max_)) throw ValidationError("trajectory longer than t_max");
    const bool is_prompt = std::any_of(initial_.begin(), initial_.end(),
                                       [&](const InitialState& i) { return i.state == traj.prompt; });
    if (!is_prompt) throw ValidationError("trajectory prompt " + std::to_string(traj.prompt) + " is not an initial state");

    std::vector<StateId> states;
    states.reserve(traj.actions.size());
    StateId s = traj.prompt;
    for (std::size_t k = 0; k < traj.actions.size(); ++k) {
        if (s == kTerminalState) throw ValidationError("trajectory continues past a terminal transition");
        states.push_back(s);
        const Transition& tr = transition_info(s, traj.actions[k]);
        const double r = traj.step_rewards[k];
        if (!(std::abs(r - tr.reward) <= 1e-12 * std::max(1.0, std::abs(tr.reward))))
            throw ValidationError("trajectory reward at step " + std::to_string(k + 1) + " does not match the MDP");
        s = tr.next;
    }
    const bool ended = (s == kTerminalState);
    if (ended != traj.terminated) throw ValidationError("trajectory terminated flag is inconsistent");
    return states;
}

double TokenMdp::return_of(const Trajectory& traj) const {
    if (traj.actions.size() != traj.step_rewards.size())
        throw ValidationError("trajectory reward list length does not match action count");
    double ret = 0.0;
    double discount = 1.0;
    for (double r : traj.step_rewards) {
        ret += discount * r;
        discount *= gamma_;
    }
    return ret;
}

Trajectory TokenMdp::rollout(StateId prompt, std::span<const ActionId> actions) const {
    Trajectory traj;
    traj.prompt = prompt;
    StateId s = prompt;
    for (ActionId a : actions) {
        if (s == kTerminalState) throw DomainError("rollout continues past a terminal transition");
        const Transition& tr = transition_info(s, a);
        traj.actions.push_back(a);
        traj.step_rewards.push_back(tr.reward);
        s = tr.next;
    }
    traj.terminated = (s == kTerminalState);
    return traj;
}

std::vector<double> lift_sequence_reward(double sequence_reward, std::size_t length) {
    std::vector<double> rewards(length, 0.0);
    if (length > 0) rewards.back() = sequence_reward;
    return rewards;
}

// ---------------------------------------------------------------------------
// Bandit

namespace {

class BanditEnv final : public Environment {
public:
    explicit BanditEnv(std::vector<double> rewards) : rewards_(std::move(rewards)) {}
    std::string name() const override { return "bandit"; }
    int vocabulary_size() const override { return static_cast<int>(rewards_.size()); }
    int t_max() const override { return 1; }
    double gamma() const override { return 1.0; }
    std::vector<std::pair<StateKey, double>> initial_states() const override {
        StateKey k;
        append_int(k, 1);
        return {{k, 1.0}};
    }
    std::vector<ActionId> admissible_actions(const StateKey&, int) const override {
        std::vector<ActionId> a(rewards_.size());
        std::iota(a.begin(), a.end(), 0);
        return a;
    }
    EnvStep step(const StateKey&, ActionId a, int) const override {
        return {{}, rewards_[static_cast<std::size_t>(a)], true, false};
    }
    std::string describe(const StateKey&) const override { return "x0"; }

private:
    std::vector<double> rewards_;
};

} // namespace

MdpPtr make_bandit(std::vector<double> rewards) {
    if (rewards.empty()) throw ValidationError("make_bandit: reward list is empty");
    return std::make_shared<const TokenMdp>(std::make_shared<const BanditEnv>(std::move(rewards)));
}

// ---------------------------------------------------------------------------
// Grid-world

GridConfig GridConfig::final_reward() {
    GridConfig c;
    c.goal_reward = 7.0;
    return c;
}

GridConfig GridConfig::fine_grained() {
    GridConfig c;
    c.goal_reward = 3.0;
    c.treasures = {{{3, 5}, 4.0}};
    return c;
}

namespace {

// Key layout: row, col, collected-treasure bitmask, time.
class GridEnv final : public Environment {
public:
    explicit GridEnv(GridConfig c) : c_(std::move(c)) {}

    std::string name() const override { return "gridworld"; }
    int vocabulary_size() const override { return 4; }
    int t_max() const override { return c_.t_max; }
    double gamma() const override { return c_.gamma; }

    std::vector<std::pair<StateKey, double>> initial_states() const override {
        return {{pack(c_.start.row, c_.start.col, 0, 1), 1.0}};
    }

    std::vector<ActionId> admissible_actions(const StateKey& key, int) const override {
        const int r = read_int(key, 0), col = read_int(key, 1);
        std::vector<ActionId> out;
        if (r > 1) out.push_back(kUp);
        if (r < c_.rows) out.push_back(kDown);
        if (col > 1) out.push_back(kLeft);
        if (col < c_.cols) out.push_back(kRight);
        return out;
    }

    EnvStep step(const StateKey& key, ActionId a, int time) const override {
        int r = read_int(key, 0), col = read_int(key, 1);
        auto flags = static_cast<std::uint32_t>(read_int(key, 2));
        switch (a) {
        case kUp: --r; break;
        case kDown: ++r; break;
        case kLeft: --col; break;
        case kRight: ++col; break;
        default: throw DomainError("grid action out of range");
        }
        EnvStep st;
        for (std::size_t i = 0; i < c_.treasures.size(); ++i) {
            const auto bit = std::uint32_t{1} << i;
            if (c_.treasures[i].cell == Cell{r, col} && !(flags & bit)) {
                st.reward += c_.treasures[i].value;
                flags |= bit;
            }
        }
        if (Cell{r, col} == c_.goal) {
            st.reward += c_.goal_reward;
            st.terminal = true;
            st.success = true;
        }
        const bool capped = time == c_.t_max;
        if (!st.terminal && !capped) st.reward -= c_.step_penalty;
        st.next = pack(r, col, static_cast<std::int32_t>(flags), time + 1);
        return st;
    }

    std::size_t feature_dim() const override {
        return static_cast<std::size_t>(c_.rows * c_.cols) << c_.treasures.size();
    }

    // one-hot(position) x one-hot(treasure flags)
    std::vector<FeatureEntry> features(const StateKey& key) const override {
        const int r = read_int(key, 0), col = read_int(key, 1);
        const auto flags = static_cast<std::size_t>(read_int(key, 2));
        const auto pos = static_cast<std::size_t>((r - 1) * c_.cols + (col - 1));
        return {{pos * (std::size_t{1} << c_.treasures.size()) + flags, 1.0}};
    }

    std::string describe(const StateKey& key) const override {
        std::ostringstream os;
        os << "(" << read_int(key, 0) << "," << read_int(key, 1) << ") flags=" << read_int(key, 2)
           << " t=" << read_int(key, 3);
        return os.str();
    }

    std::string action_name(ActionId a) const override {
        static const char* names[] = {"Up", "Down", "Left", "Right"};
        return a >= 0 && a < 4 ? names[a] : std::to_string(a);
    }

private:
    static StateKey pack(int r, int c, std::int32_t flags, int t) {
        StateKey k;
        append_int(k, r);
        append_int(k, c);
        append_int(k, flags);
        append_int(k, t);
        return k;
    }

    GridConfig c_;
};

bool on_grid(const GridConfig& c, Cell cell) {
    return cell.row >= 1 && cell.row <= c.rows && cell.col >= 1 && cell.col <= c.cols;
}

} // namespace

MdpPtr make_gridworld(const GridConfig& config) {
    if (config.rows < 1 || config.cols < 1) throw ValidationError("make_gridworld: empty grid");
    if (!on_grid(config, config.start)) throw ValidationError("make_gridworld: start position off-grid");
    if (!on_grid(config, config.goal)) throw ValidationError("make_gridworld: goal position off-grid");
    if (config.start == config.goal) throw ValidationError("make_gridworld: start equals goal");
    if (config.step_penalty < 0.0) throw ValidationError("make_gridworld: step penalty must be >= 0");
    if (config.treasures.size() > 16) throw ValidationError("make_gridworld: at most 16 treasures");
    for (const Treasure& t : config.treasures)
        if (!on_grid(config, t.cell))
            throw ValidationError("make_gridworld: treasure at (" + std::to_string(t.cell.row) + "," +
                                  std::to_string(t.cell.col) + ") is off-grid");
    return std::make_shared<const TokenMdp>(std::make_shared<const GridEnv>(config));
}

// ---------------------------------------------------------------------------
// Token chain

namespace {

// Key layout: prompt, time, then the completion prefix.
class ChainEnv final : public Environment {
public:
    explicit ChainEnv(ChainConfig c) : c_(std::move(c)) {}

    std::string name() const override { return "chain"; }
    int vocabulary_size() const override { return c_.vocabulary; }
    std::optional<ActionId> eos_action() const override { return c_.eos; }
    int t_max() const override { return c_.length; }
    double gamma() const override { return c_.gamma; }

    std::vector<std::pair<StateKey, double>> initial_states() const override {
        std::vector<std::pair<StateKey, double>> out;
        for (int p = 0; p < c_.prompts; ++p) {
            StateKey k;
            append_int(k, p);
            append_int(k, 1);
            out.emplace_back(std::move(k), 1.0);
        }
        return out;
    }

    std::vector<ActionId> admissible_actions(const StateKey&, int) const override {
        std::vector<ActionId> a(static_cast<std::size_t>(c_.vocabulary));
        std::iota(a.begin(), a.end(), 0);
        return a;
    }

    EnvStep step(const StateKey& key, ActionId a, int time) const override {
        EnvStep st;
        for (const ChainReward& r : c_.schedule)
            if (r.depth == time && (r.token < 0 || r.token == a)) st.reward += r.value;
        if (c_.dense_reward_seed != 0) {
            const std::uint64_t h = splitmix64(fnv1a(key) ^ splitmix64(c_.dense_reward_seed + static_cast<std::uint64_t>(a)));
            st.reward += 2.0 * (static_cast<double>(h >> 11) * 0x1.0p-53) - 1.0;
        }
        st.terminal = (c_.eos && a == *c_.eos) || time == c_.length;
        if (st.terminal && c_.sequence_reward) {
            std::vector<ActionId> completion;
            for (std::size_t i = 2; i < int_count(key); ++i) completion.push_back(read_int(key, i));
            completion.push_back(a);
            st.reward += c_.sequence_reward(read_int(key, 0), completion);
        }
        if (!st.terminal) {
            st.next = key;
            std::int32_t next_time = time + 1;
            std::memcpy(st.next.data() + sizeof(std::int32_t), &next_time, sizeof next_time);
            append_int(st.next, a);
        }
        return st;
    }

    std::string describe(const StateKey& key) const override {
        std::ostringstream os;
        os << "x" << read_int(key, 0) << "|";
        for (std::size_t i = 2; i < int_count(key); ++i) os << (i > 2 ? " " : "") << read_int(key, i);
        return os.str();
    }

private:
    ChainConfig c_;
};

} // namespace

MdpPtr make_token_chain(const ChainConfig& config) {
    if (config.length < 1) throw ValidationError("make_token_chain: length must be >= 1");
    if (config.vocabulary < 2) throw ValidationError("make_token_chain: vocabulary must be >= 2");
    if (config.prompts < 1) throw ValidationError("make_token_chain: need at least one prompt");
    if (config.eos && (*config.eos < 0 || *config.eos >= config.vocabulary))
        throw ValidationError("make_token_chain: eos outside vocabulary");
    for (const ChainReward& r : config.schedule) {
        if (r.depth > config.length)
            throw ValidationError("make_token_chain: reward depth " + std::to_string(r.depth) + " exceeds length " +
                                  std::to_string(config.length));
        if (r.depth < 1) throw ValidationError("make_token_chain: reward depth must be >= 1");
        if (r.token >= config.vocabulary) throw ValidationError("make_token_chain: reward token outside vocabulary");
    }
    return std::make_shared<const TokenMdp>(std::make_shared<const ChainEnv>(config));
}

} // namespace shiq
