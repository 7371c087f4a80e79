#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace driforge {

// Text normalization for a de/fr/it news corpus. Case folding covers ASCII,
// Latin-1 Supplement and Latin Extended-A, which is what Swiss news text and
// the keyword lists actually use; other code points pass through unchanged.

namespace detail {

inline void append_utf8(std::string& out, std::uint32_t cp) {
    if (cp < 0x80) {
        out.push_back(static_cast<char>(cp));
    } else if (cp < 0x800) {
        out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else if (cp < 0x10000) {
        out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else {
        out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    }
}

// Decodes one code point at i, advancing i. Invalid bytes decode as themselves.
inline std::uint32_t next_codepoint(std::string_view s, std::size_t& i) {
    unsigned char c = s[i];
    if (c < 0x80) { ++i; return c; }
    std::size_t len = (c >= 0xF0) ? 4 : (c >= 0xE0) ? 3 : (c >= 0xC0) ? 2 : 1;
    if (len == 1 || i + len > s.size()) { ++i; return c; }
    std::uint32_t cp = c & (0xFF >> (len + 1));
    for (std::size_t k = 1; k < len; ++k) {
        unsigned char cc = s[i + k];
        if ((cc & 0xC0) != 0x80) { ++i; return c; }
        cp = (cp << 6) | (cc & 0x3F);
    }
    i += len;
    return cp;
}

inline std::uint32_t fold_codepoint(std::uint32_t cp) {
    if (cp >= 'A' && cp <= 'Z') return cp + 0x20;
    // Latin-1 Supplement: À..Þ except × map to +0x20.
    if (cp >= 0xC0 && cp <= 0xDE && cp != 0xD7) return cp + 0x20;
    // Latin Extended-A: upper/lower pairs alternate. Three ranges flip parity.
    if (cp >= 0x100 && cp <= 0x137) return (cp % 2 == 0) ? cp + 1 : cp;
    if (cp >= 0x139 && cp <= 0x148) return (cp % 2 == 1) ? cp + 1 : cp;
    if (cp >= 0x14A && cp <= 0x177) return (cp % 2 == 0) ? cp + 1 : cp;
    if (cp == 0x178) return 0xFF; // Ÿ -> ÿ
    if (cp >= 0x179 && cp <= 0x17E) return (cp % 2 == 1) ? cp + 1 : cp;
    return cp;
}

inline bool is_space_codepoint(std::uint32_t cp) {
    return cp == ' ' || cp == '\t' || cp == '\n' || cp == '\r' || cp == '\f' || cp == '\v' ||
           cp == 0xA0 /* NBSP */;
}

} // namespace detail

// Lowercases ASCII and western-European accented letters, leaves the rest alone.
inline std::string fold_case(std::string_view s) {
    std::string out;
    out.reserve(s.size());
    std::size_t i = 0;
    while (i < s.size()) detail::append_utf8(out, detail::fold_codepoint(detail::next_codepoint(s, i)));
    return out;
}

inline std::string trim(std::string_view s) {
    std::size_t b = 0, e = s.size();
    auto blank = [](unsigned char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; };
    while (b < e && blank(s[b])) ++b;
    while (e > b && blank(s[e - 1])) --e;
    return std::string(s.substr(b, e - b));
}

// Collapses any run of whitespace (incl. NBSP) to a single space and trims.
inline std::string collapse_whitespace(std::string_view s) {
    std::string out;
    out.reserve(s.size());
    bool in_space = false;
    std::size_t i = 0;
    while (i < s.size()) {
        std::uint32_t cp = detail::next_codepoint(s, i);
        if (detail::is_space_codepoint(cp)) {
            in_space = true;
            continue;
        }
        if (in_space && !out.empty()) out.push_back(' ');
        in_space = false;
        detail::append_utf8(out, cp);
    }
    return out;
}

// Canonical dedup key: case-folded, whitespace-collapsed.
inline std::string normalize_text(std::string_view s) { return collapse_whitespace(fold_case(s)); }

// Splits folded text into tokens on anything that is not a letter or digit.
// Non-ASCII code points count as letters (good enough for de/fr/it).
inline std::vector<std::string> tokenize(std::string_view s) {
    std::vector<std::string> out;
    std::string cur;
    std::size_t i = 0;
    while (i < s.size()) {
        std::size_t before = i;
        std::uint32_t cp = detail::next_codepoint(s, i);
        bool word = (cp >= '0' && cp <= '9') || (cp >= 'a' && cp <= 'z') || (cp >= 'A' && cp <= 'Z') || cp >= 0x80;
        if (word) {
            cur.append(s.substr(before, i - before));
        } else if (!cur.empty()) {
            out.push_back(std::move(cur));
            cur.clear();
        }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
}

} // namespace driforge
