#pragma once

namespace kvlab {

inline constexpr const char* kArtifactVersion = "0.1.0";

}  // namespace kvlab
