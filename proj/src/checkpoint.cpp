#include "shiq/checkpoint.hpp"

#include "shiq/errors.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>

namespace shiq {

namespace {

constexpr char kMagic[8] = {'S', 'H', 'I', 'Q', 'C', 'K', 'P', 'T'};

template <class U>
void put(std::ostream& os, U v) {
    std::array<char, sizeof(U)> b{};
    for (std::size_t i = 0; i < sizeof(U); ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    os.write(b.data(), b.size());
}

template <class U>
U get(std::istream& is, const std::string& path) {
    std::array<unsigned char, sizeof(U)> b{};
    if (!is.read(reinterpret_cast<char*>(b.data()), b.size())) throw ParseError(path + ": truncated checkpoint");
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(b[i]) << (8 * i);
    return v;
}

struct Header {
    std::uint32_t kind;
    std::uint64_t states, pairs, feature_dim, vocabulary, params;
};

Header header_of(const LogitsModel& m) {
    const TokenMdp& mdp = m.mdp();
    return {static_cast<std::uint32_t>(m.kind()), mdp.state_count(), mdp.pair_count(), mdp.feature_dim(),
            static_cast<std::uint64_t>(mdp.vocabulary_size()), m.parameter_count()};
}

} // namespace

void save_checkpoint(const LogitsModel& model, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ResourceError("cannot open " + path);
    const Header h = header_of(model);
    os.write(kMagic, sizeof kMagic);
    put<std::uint32_t>(os, kCheckpointVersion);
    put<std::uint32_t>(os, h.kind);
    for (std::uint64_t v : {h.states, h.pairs, h.feature_dim, h.vocabulary, h.params}) put<std::uint64_t>(os, v);
    for (double d : model.parameters()) put<std::uint64_t>(os, std::bit_cast<std::uint64_t>(d));
    if (!os) throw ResourceError("write failed: " + path);
}

LogitsModel load_checkpoint(const std::string& path, MdpPtr mdp) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ResourceError("cannot open " + path);
    char magic[sizeof kMagic];
    if (!is.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof kMagic) != 0)
        throw ParseError(path + ": not a checkpoint file");
    const auto version = get<std::uint32_t>(is, path);
    if (version != kCheckpointVersion) throw ParseError(path + ": unsupported checkpoint version " + std::to_string(version));
    Header h{};
    h.kind = get<std::uint32_t>(is, path);
    h.states = get<std::uint64_t>(is, path);
    h.pairs = get<std::uint64_t>(is, path);
    h.feature_dim = get<std::uint64_t>(is, path);
    h.vocabulary = get<std::uint64_t>(is, path);
    h.params = get<std::uint64_t>(is, path);

    LogitsModel model = [&] {
        switch (h.kind) {
        case static_cast<std::uint32_t>(ModelKind::tabular): return LogitsModel::tabular(mdp);
        case static_cast<std::uint32_t>(ModelKind::linear): return LogitsModel::linear(mdp);
        default: throw ParseError(path + ": unknown model kind " + std::to_string(h.kind));
        }
    }();
    const Header want = header_of(model);
    if (h.states != want.states || h.pairs != want.pairs || h.feature_dim != want.feature_dim ||
        h.vocabulary != want.vocabulary || h.params != want.params)
        throw ValidationError(path + ": checkpoint dimensions do not match the MDP");

    std::vector<double> params(h.params);
    for (double& d : params) d = std::bit_cast<double>(get<std::uint64_t>(is, path));
    if (is.peek() != std::char_traits<char>::eof()) throw ParseError(path + ": trailing bytes after parameter block");
    model.set_parameters(params);
    return model;
}

} // namespace shiq
