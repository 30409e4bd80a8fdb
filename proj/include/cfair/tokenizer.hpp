#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace cfair {

// Byte-level vocabulary: id 0 is end-of-text, byte b maps to id b + 1.
struct ByteTokenizer {
  static constexpr std::size_t kVocabSize = 257;
  static constexpr int kEndOfText = 0;

  static std::vector<int> encode(std::string_view text) {
    std::vector<int> ids;
    ids.reserve(text.size());
    for (unsigned char c : text) ids.push_back(static_cast<int>(c) + 1);
    return ids;
  }

  // End-of-text ids are dropped from the output text.
  static std::string decode(std::span<const int> ids) {
    std::string out;
    out.reserve(ids.size());
    for (int id : ids) {
      if (id < 0 || static_cast<std::size_t>(id) >= kVocabSize)
        throw std::out_of_range("detokenize: id " + std::to_string(id) + " outside vocabulary of " +
                                std::to_string(kVocabSize));
      if (id == kEndOfText) continue;
      out.push_back(static_cast<char>(id - 1));
    }
    return out;
  }
};

inline std::vector<int> tokenize(std::string_view text) { return ByteTokenizer::encode(text); }
inline std::string detokenize(std::span<const int> ids) { return ByteTokenizer::decode(ids); }

}  // namespace cfair
