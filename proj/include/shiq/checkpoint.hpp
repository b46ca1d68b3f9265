#pragma once

#include "shiq/policy.hpp"

#include <string>

namespace shiq {

/**
 * Flat binary model file:
 *   "SHIQCKPT" | u32 version | u32 kind | u64 states | u64 pairs | u64 feature_dim
 *   | u64 vocabulary | u64 parameter_count | parameter_count little-endian f64
 */
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const LogitsModel& model, const std::string& path);
/// Throws ParseError on a malformed file and ValidationError when the header does not match `mdp`.
LogitsModel load_checkpoint(const std::string& path, MdpPtr mdp);

} // namespace shiq
