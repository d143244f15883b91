#pragma once

/**
 * Verifiable output constraints and answer recall.
 */

#include <algorithm>
#include <optional>
#include <regex>
#include <set>
#include <string>
#include <vector>

#include "agd/error.hpp"
#include "agd/text.hpp"
#include "json.hpp"

namespace agd {

enum class ConstraintType {
  keywords_include,
  keywords_exclude,
  min_words,
  max_words,
  no_commas,
  placeholder_count_min,
  json_format
};

inline const std::vector<std::pair<ConstraintType, std::string>>& constraint_names() {
  static const std::vector<std::pair<ConstraintType, std::string>> names{
      {ConstraintType::keywords_include, "keywords_include"},
      {ConstraintType::keywords_exclude, "keywords_exclude"},
      {ConstraintType::min_words, "min_words"},
      {ConstraintType::max_words, "max_words"},
      {ConstraintType::no_commas, "no_commas"},
      {ConstraintType::placeholder_count_min, "placeholder_count_min"},
      {ConstraintType::json_format, "json_format"}};
  return names;
}

inline std::string to_string(ConstraintType t) {
  for (const auto& [k, v] : constraint_names())
    if (k == t) return v;
  return "?";
}

inline ConstraintType constraint_type_from_string(const std::string& s) {
  for (const auto& [k, v] : constraint_names())
    if (v == s) return k;
  throw DataError("unknown constraint type '" + s + "'");
}

struct ConstraintSpec {
  ConstraintType type = ConstraintType::no_commas;
  std::vector<std::string> keywords;  // keywords_include / keywords_exclude
  std::size_t count = 0;              // min_words / max_words / placeholder_count_min

  static ConstraintSpec include(std::vector<std::string> words) {
    return {ConstraintType::keywords_include, std::move(words), 0};
  }
  static ConstraintSpec exclude(std::vector<std::string> words) {
    return {ConstraintType::keywords_exclude, std::move(words), 0};
  }
  static ConstraintSpec min_words(std::size_t n) { return {ConstraintType::min_words, {}, n}; }
  static ConstraintSpec max_words(std::size_t n) { return {ConstraintType::max_words, {}, n}; }
  static ConstraintSpec no_commas() { return {ConstraintType::no_commas, {}, 0}; }
  static ConstraintSpec placeholders(std::size_t n) { return {ConstraintType::placeholder_count_min, {}, n}; }
  static ConstraintSpec json_format() { return {ConstraintType::json_format, {}, 0}; }

  void validate() const {
    if (type == ConstraintType::keywords_include || type == ConstraintType::keywords_exclude) {
      if (keywords.empty()) throw DataError(to_string(type) + " needs at least one keyword");
      for (const auto& k : keywords)
        if (text::word_tokens(k).empty()) throw DataError(to_string(type) + ": keyword '" + k + "' has no word characters");
    }
    if (type == ConstraintType::placeholder_count_min && count < 1)
      throw DataError("placeholder_count_min needs a count >= 1");
  }

  bool operator==(const ConstraintSpec&) const = default;
};

inline nlohmann::json to_json(const ConstraintSpec& c) {
  nlohmann::json j{{"type", to_string(c.type)}};
  switch (c.type) {
    case ConstraintType::keywords_include:
    case ConstraintType::keywords_exclude: j["keywords"] = c.keywords; break;
    case ConstraintType::min_words:
    case ConstraintType::max_words:
    case ConstraintType::placeholder_count_min: j["count"] = c.count; break;
    default: break;
  }
  return j;
}

inline ConstraintSpec constraint_from_json(const nlohmann::json& j) {
  ConstraintSpec c;
  try {
    c.type = constraint_type_from_string(j.at("type").get<std::string>());
    switch (c.type) {
      case ConstraintType::keywords_include:
      case ConstraintType::keywords_exclude: c.keywords = j.at("keywords").get<std::vector<std::string>>(); break;
      case ConstraintType::min_words:
      case ConstraintType::max_words:
      case ConstraintType::placeholder_count_min: c.count = j.at("count").get<std::size_t>(); break;
      default: break;
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("constraint: ") + e.what());
  }
  c.validate();
  return c;
}

namespace detail {

// Keyword (possibly several words) occurs as a contiguous run of whole words.
inline bool contains_words(const std::vector<std::string>& hay, const std::vector<std::string>& needle) {
  if (needle.empty() || needle.size() > hay.size()) return false;
  return std::search(hay.begin(), hay.end(), needle.begin(), needle.end()) != hay.end();
}

inline std::size_t count_placeholders(const std::string& s) {
  static const std::regex re(R"(\[[^\[\]]+\])");
  return static_cast<std::size_t>(std::distance(std::sregex_iterator(s.begin(), s.end(), re), std::sregex_iterator()));
}

inline bool is_json(std::string s) {
  auto trim = [](std::string& x) {
    const auto b = x.find_first_not_of(" \t\r\n");
    const auto e = x.find_last_not_of(" \t\r\n");
    x = b == std::string::npos ? std::string() : x.substr(b, e - b + 1);
  };
  trim(s);
  for (const char* fence : {"```json", "```JSON", "```Json", "```"})
    if (s.rfind(fence, 0) == 0) {
      s.erase(0, std::string(fence).size());
      break;
    }
  if (s.size() >= 3 && s.compare(s.size() - 3, 3, "```") == 0) s.erase(s.size() - 3);
  trim(s);
  return !s.empty() && nlohmann::json::accept(s);
}

}  // namespace detail

/// True when `output` satisfies `spec`. Word matching is case-insensitive on
/// alphanumeric word boundaries; word counts are whitespace-delimited.
inline bool check_constraint(const std::string& output, const ConstraintSpec& spec) {
  switch (spec.type) {
    case ConstraintType::keywords_include:
    case ConstraintType::keywords_exclude: {
      const auto words = text::word_tokens(output);
      const bool include = spec.type == ConstraintType::keywords_include;
      for (const auto& k : spec.keywords) {
        const bool present = detail::contains_words(words, text::word_tokens(k));
        if (include != present) return false;
      }
      return true;
    }
    case ConstraintType::min_words: return text::whitespace_word_count(output) >= spec.count;
    case ConstraintType::max_words: return text::whitespace_word_count(output) <= spec.count;
    case ConstraintType::no_commas: return output.find(',') == std::string::npos;
    case ConstraintType::placeholder_count_min: return detail::count_placeholders(output) >= spec.count;
    case ConstraintType::json_format: return detail::is_json(output);
  }
  return false;
}

/// Max over aliases of the fraction of the alias's normalized words found in
/// the normalized output.
inline double answer_recall(const std::string& output, const std::vector<std::string>& answers) {
  if (answers.empty()) throw DataError("answer_recall: no gold answers");
  const auto out = text::normalized_words(output);
  const std::set<std::string> have(out.begin(), out.end());
  double best = 0.0;
  for (const auto& a : answers) {
    const auto gold = text::normalized_words(a);
    if (gold.empty()) continue;
    std::size_t hit = 0;
    for (const auto& g : gold) hit += have.count(g) > 0;
    best = std::max(best, static_cast<double>(hit) / static_cast<double>(gold.size()));
  }
  return best;
}

}  // namespace agd
