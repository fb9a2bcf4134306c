#ifndef COEXMAP_VERSION_HPP
#define COEXMAP_VERSION_HPP

namespace coexmap {

// Build identifier embedded into every output artifact. Deliberately a
// constant (not a timestamp) so reruns with identical inputs are
// byte-identical.
inline constexpr const char* kBuildId = "coexmap-0.1.0";

} // namespace coexmap

#endif
