#pragma once

#include <boost/archive/iterators/base64_from_binary.hpp>
#include <boost/archive/iterators/binary_from_base64.hpp>
#include <boost/archive/iterators/transform_width.hpp>

#include <bit>
#include <cctype>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "ionflux/errors.hpp"

namespace ionflux::io {

inline std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(b, e - b + 1));
}

// Comma-separated fields without quoting; all formats in this project are numeric or plain names.
inline std::vector<std::string> split_csv(std::string_view line) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        const auto pos = line.find(',', start);
        out.push_back(trim(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start)));
        if (pos == std::string_view::npos) break;
        start = pos + 1;
    }
    return out;
}

inline double parse_double(const std::string& field, std::size_t line, const char* what) {
    try {
        std::size_t used = 0;
        const double v = std::stod(field, &used);
        if (used != field.size()) throw std::invalid_argument(field);
        return v;
    } catch (const std::exception&) {
        throw ParseError(std::string("cannot parse ") + what + " from '" + field + "'", line);
    }
}

inline int parse_int(const std::string& field, std::size_t line, const char* what) {
    try {
        std::size_t used = 0;
        const int v = std::stoi(field, &used);
        if (used != field.size()) throw std::invalid_argument(field);
        return v;
    } catch (const std::exception&) {
        throw ParseError(std::string("cannot parse ") + what + " from '" + field + "'", line);
    }
}

// Shortest text that reads back to the same double.
inline std::string format_double(double v) {
    char buf[32];
    for (int prec = 15; prec <= 17; ++prec) {
        std::snprintf(buf, sizeof buf, "%.*g", prec, v);
        if (std::strtod(buf, nullptr) == v) break;
    }
    return buf;
}

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InvalidInputError("cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// Write to a sibling temporary, then rename over the target.
inline void atomic_write(const std::string& path, std::string_view content) {
    namespace fs = std::filesystem;
    const fs::path target(path);
    if (target.has_parent_path() && !target.parent_path().empty()) fs::create_directories(target.parent_path());
    fs::path tmp = target;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw InvalidInputError("cannot write " + tmp.string());
        out.write(content.data(), static_cast<std::streamsize>(content.size()));
        if (!out) throw InvalidInputError("write failed for " + tmp.string());
    }
    fs::rename(tmp, target);
}

inline std::string base64_encode(const std::vector<std::uint8_t>& bytes) {
    using namespace boost::archive::iterators;
    using It = base64_from_binary<transform_width<std::vector<std::uint8_t>::const_iterator, 6, 8>>;
    std::string out(It(bytes.begin()), It(bytes.end()));
    out.append((3 - bytes.size() % 3) % 3, '=');
    return out;
}

inline std::vector<std::uint8_t> base64_decode(std::string_view text) {
    using namespace boost::archive::iterators;
    std::string s(text);
    std::size_t pad = 0;
    while (!s.empty() && s.back() == '=') {
        s.pop_back();
        ++pad;
    }
    if (pad > 2 || (s.size() + pad) % 4 != 0) throw ParseError("malformed base64 payload", 0);
    for (char c : s)
        if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '+' || c == '/'))
            throw ParseError("malformed base64 payload", 0);
    using It = transform_width<binary_from_base64<std::string::const_iterator>, 8, 6>;
    std::vector<std::uint8_t> out(It(s.begin()), It(s.end()));
    return out;
}

inline std::string encode_doubles(const std::vector<double>& values) {
    std::vector<std::uint8_t> bytes(values.size() * 8);
    for (std::size_t i = 0; i < values.size(); ++i) {
        auto bits = std::bit_cast<std::uint64_t>(values[i]);
        for (int b = 0; b < 8; ++b) bytes[i * 8 + static_cast<std::size_t>(b)] = static_cast<std::uint8_t>(bits >> (8 * b));
    }
    return base64_encode(bytes);
}

inline std::vector<double> decode_doubles(std::string_view text) {
    const auto bytes = base64_decode(text);
    if (bytes.size() % 8 != 0) throw ParseError("parameter payload is not a whole number of doubles", 0);
    std::vector<double> out(bytes.size() / 8);
    for (std::size_t i = 0; i < out.size(); ++i) {
        std::uint64_t bits = 0;
        for (int b = 0; b < 8; ++b) bits |= std::uint64_t(bytes[i * 8 + static_cast<std::size_t>(b)]) << (8 * b);
        out[i] = std::bit_cast<double>(bits);
    }
    return out;
}

}  // namespace ionflux::io
