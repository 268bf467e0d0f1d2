#pragma once

#include <string>
#include <string_view>

namespace qac::utf8 {

// Decodes UTF-8 into code points. Invalid sequences decode to U+FFFD.
std::u32string decode(std::string_view text);
std::string encode(std::u32string_view cps);
std::string encode(char32_t cp);

// Length in code points.
std::size_t length(std::string_view text);

}  // namespace qac::utf8
