#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "templora/core/binary_io.hpp"
#include "templora/core/error.hpp"
#include "templora/core/ops.hpp"

namespace templora::corpus {

// Token-stream file: "TLC1", u32 vocab size, u32 token count, u32 tokens (all
// little-endian). Segment boundaries live in a sidecar text file with one
// decimal offset per line.

struct TokenFile {
    std::size_t vocab_size = 0;
    std::vector<TokenId> tokens;
};

inline void write_tokens(const std::filesystem::path& path, std::span<const TokenId> tokens, std::size_t vocab_size) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open " + path.string() + " for writing");
    binio::write_magic(os, "TLC1");
    binio::write_u32(os, static_cast<std::uint32_t>(vocab_size));
    binio::write_u32(os, static_cast<std::uint32_t>(tokens.size()));
    for (TokenId t : tokens) {
        if (t < 0 || static_cast<std::size_t>(t) >= vocab_size) throw ConfigError("write_tokens: token outside [0, V)");
        binio::write_u32(os, static_cast<std::uint32_t>(t));
    }
    if (!os) throw IoError("write failed: " + path.string());
}

inline TokenFile read_tokens(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path.string());
    binio::expect_magic(is, "TLC1");
    TokenFile f;
    f.vocab_size = binio::read_u32(is);
    const std::uint32_t n = binio::read_u32(is);
    f.tokens.resize(n);
    for (auto& t : f.tokens) {
        const std::uint32_t v = binio::read_u32(is);
        if (v >= f.vocab_size) throw IoError(path.string() + ": token " + std::to_string(v) + " outside the declared vocabulary");
        t = static_cast<TokenId>(v);
    }
    if (is.peek() != std::char_traits<char>::eof()) throw IoError(path.string() + ": trailing bytes after token stream");
    return f;
}

inline void write_boundaries(const std::filesystem::path& path, std::span<const std::size_t> offsets) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot open " + path.string() + " for writing");
    for (std::size_t o : offsets) os << o << '\n';
}

inline std::vector<std::size_t> read_boundaries(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open " + path.string());
    std::vector<std::size_t> out;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::size_t used = 0;
        unsigned long long v = 0;
        try {
            v = std::stoull(line, &used);
        } catch (const std::exception&) {
            throw IoError(path.string() + ": bad offset '" + line + "'");
        }
        if (used != line.size()) throw IoError(path.string() + ": bad offset '" + line + "'");
        out.push_back(static_cast<std::size_t>(v));
    }
    return out;
}

/// Byte-level tokenization: token id == byte value.
inline std::vector<TokenId> ingest_text(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot read " + path.string());
    std::vector<TokenId> out;
    for (std::istreambuf_iterator<char> it(is), end; it != end; ++it) out.push_back(static_cast<unsigned char>(*it));
    return out;
}

inline std::string detokenize(std::span<const TokenId> tokens) {
    std::string out;
    out.reserve(tokens.size());
    for (TokenId t : tokens) {
        if (t < 0 || t > 255) throw ConfigError("detokenize: token " + std::to_string(t) + " is not a byte");
        out.push_back(static_cast<char>(static_cast<unsigned char>(t)));
    }
    return out;
}

/// FNV-1a over the little-endian token stream; identifies a corpus in reports.
inline std::uint64_t corpus_hash(std::span<const TokenId> tokens, std::uint64_t h = 0xCBF29CE484222325ULL) {
    for (TokenId t : tokens) {
        auto u = static_cast<std::uint32_t>(t);
        for (int i = 0; i < 4; ++i) {
            h ^= (u >> (8 * i)) & 0xFFu;
            h *= 0x100000001B3ULL;
        }
    }
    return h;
}

}  // namespace templora::corpus
