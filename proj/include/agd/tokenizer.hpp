#pragma once

#include <cstdint>
#include <cstdio>
#include <string>
#include <string_view>
#include <vector>

#include "agd/error.hpp"

namespace agd {

using TokenId = std::uint32_t;

/// Byte-level tokenizer: ids 0..255 are raw bytes, followed by four specials.
struct Tokenizer {
  static constexpr TokenId kBos = 256;
  static constexpr TokenId kEos = 257;
  static constexpr TokenId kSegOpen = 258;
  static constexpr TokenId kSegClose = 259;
  static constexpr std::size_t kVocabSize = 260;

  static std::vector<TokenId> encode(std::string_view text) {
    std::vector<TokenId> out;
    out.reserve(text.size());
    for (unsigned char c : text) out.push_back(c);
    return out;
  }

  /// BOS followed by the bytes of `text`. Byte offset b maps to token b + 1.
  static std::vector<TokenId> encode_prompt(std::string_view text) {
    std::vector<TokenId> out{kBos};
    for (unsigned char c : text) out.push_back(c);
    return out;
  }

  /// Specials are dropped.
  static std::string decode(const std::vector<TokenId>& ids) {
    std::string out;
    for (TokenId id : ids)
      if (id < 256) out.push_back(static_cast<char>(id));
    return out;
  }

  static bool is_special(TokenId id) { return id >= 256; }

  /// Printable, valid-UTF-8 label for a single token (heatmaps, traces).
  static std::string label(TokenId id) {
    switch (id) {
      case kBos: return "<bos>";
      case kEos: return "<eos>";
      case kSegOpen: return "<seg>";
      case kSegClose: return "</seg>";
      default: break;
    }
    if (id >= 32 && id < 127) return std::string(1, static_cast<char>(id));
    if (id == '\n') return "\\n";
    if (id == '\t') return "\\t";
    char buf[16];
    std::snprintf(buf, sizeof buf, "<0x%02X>", static_cast<unsigned>(id));
    return buf;
  }
};

}  // namespace agd
