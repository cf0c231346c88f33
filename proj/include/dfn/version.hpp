#ifndef DFN_VERSION_HPP_
#define DFN_VERSION_HPP_

namespace dfn {
inline constexpr const char* kVersion = "0.1.0";
}

#endif  // DFN_VERSION_HPP_
