#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace e2ebt {

// Joint token <-> id map. Ids 0..3 are reserved for padding, sentence
// boundaries and unknown tokens.
class Vocabulary {
 public:
  static constexpr int pad = 0;
  static constexpr int bos = 1;
  static constexpr int eos = 2;
  static constexpr int unk = 3;
  static constexpr int reserved = 4;

  Vocabulary();
  // Reserved tokens are prepended; duplicates and reserved spellings are ignored.
  explicit Vocabulary(const std::vector<std::string>& tokens);

  int add(const std::string& token);
  int id(std::string_view token) const;  // unk when absent
  const std::string& token(int id) const;
  int size() const { return static_cast<int>(tokens_.size()); }
  bool contains(std::string_view token) const;
  const std::vector<std::string>& tokens() const { return tokens_; }

  std::vector<int> encode(std::string_view sentence) const;
  // Stops at the first EOS; drops PAD and BOS.
  std::string decode(const std::vector<int>& ids) const;

  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

std::vector<std::string> split_whitespace(std::string_view line);

}  // namespace e2ebt
