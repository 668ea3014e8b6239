#pragma once

namespace capsteer {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace capsteer
