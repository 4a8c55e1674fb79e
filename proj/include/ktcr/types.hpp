#pragma once

#include <cstddef>
#include <string>

namespace ktcr {

/// Binary class ids used by every classifier in the project.
inline constexpr std::size_t kNonHate = 0;
inline constexpr std::size_t kHate = 1;
inline constexpr std::size_t kNumClasses = 2;

/// A text with a binary class id, the unit every trainer consumes.
struct Example {
    std::string text;
    std::size_t label = kNonHate;
};

} // namespace ktcr
