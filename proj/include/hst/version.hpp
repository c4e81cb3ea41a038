#pragma once

namespace hst {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace hst
