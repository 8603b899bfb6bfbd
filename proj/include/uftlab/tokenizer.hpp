// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "uftlab/error.hpp"

namespace uftlab {

using Token = std::uint32_t;
using Tokens = std::vector<Token>;

namespace special {
inline constexpr Token kBos = 256;
inline constexpr Token kEos = 257;
inline constexpr Token kInstOpen = 258;
inline constexpr Token kInstClose = 259;
}  // namespace special

inline constexpr std::size_t kByteVocabSize = 260;

enum class Framing { plain, prompt };

/// Byte-level tokenizer: byte b is token b, plus four special tokens.
class Tokenizer {
 public:
  static constexpr bool is_special(Token t) noexcept { return t >= 256 && t < kByteVocabSize; }

  /// `prompt` framing wraps the bytes in INST-OPEN ... INST-CLOSE.
  [[nodiscard]] static Tokens encode(std::string_view text, Framing framing = Framing::plain,
                                     std::size_t budget = std::numeric_limits<std::size_t>::max()) {
    const std::size_t length = text.size() + (framing == Framing::prompt ? 2 : 0);
    if (length > budget) throw OverflowError(length, budget);
    Tokens out;
    out.reserve(length);
    if (framing == Framing::prompt) out.push_back(special::kInstOpen);
    for (const char c : text) out.push_back(static_cast<unsigned char>(c));
    if (framing == Framing::prompt) out.push_back(special::kInstClose);
    return out;
  }

  /// Byte tokens back to bytes. Special tokens carry no bytes and are dropped.
  [[nodiscard]] static std::string decode(std::span<const Token> tokens) {
    std::string out;
    out.reserve(tokens.size());
    for (const Token t : tokens) {
      if (t < 256) out.push_back(static_cast<char>(static_cast<unsigned char>(t)));
    }
    return out;
  }
};

/// Model-ready (prompt, response) pair. The prompt starts with BOS and is
/// framed; the response ends with EOS.
struct EncodedExample {
  Tokens prompt;
  Tokens response;

  [[nodiscard]] std::size_t length() const noexcept { return prompt.size() + response.size(); }
};

inline Tokens encode_prompt(std::string_view prompt) {
  Tokens out{special::kBos};
  const Tokens framed = Tokenizer::encode(prompt, Framing::prompt);
  out.insert(out.end(), framed.begin(), framed.end());
  return out;
}

inline Tokens encode_response(std::string_view response) {
  Tokens out = Tokenizer::encode(response, Framing::plain);
  out.push_back(special::kEos);
  return out;
}

inline EncodedExample encode_example(std::string_view prompt, std::string_view response,
                                     std::size_t context_length) {
  EncodedExample out{encode_prompt(prompt), encode_response(response)};
  if (out.length() > context_length) throw OverflowError(out.length(), context_length);
  return out;
}

/// Response bytes up to (not including) the first EOS.
inline std::string decode_response(std::span<const Token> generated) {
  std::size_t end = 0;
  while (end < generated.size() && generated[end] != special::kEos) ++end;
  return Tokenizer::decode(generated.first(end));
}

}  // namespace uftlab
