#pragma once

/**
 * Instruction-following and QA samples, stored as JSON lines.
 */

#include <fstream>
#include <functional>
#include <istream>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "agd/constraints.hpp"
#include "agd/error.hpp"
#include "json.hpp"

namespace agd {

struct IFSample {
  std::string id;
  std::string instruction;
  std::string task;
  std::vector<ConstraintSpec> constraints;

  void validate() const {
    if (instruction.empty() || task.empty()) throw DataError("sample '" + id + "': empty instruction or task");
    if (constraints.empty()) throw DataError("sample '" + id + "' has no constraints");
    for (const auto& c : constraints) c.validate();
  }
  bool operator==(const IFSample&) const = default;
};

struct QASample {
  std::string id;
  std::string question;
  std::optional<std::string> context;
  std::vector<std::string> answers;

  void validate() const {
    if (answers.empty()) throw DataError("sample '" + id + "' has no answers");
  }
  bool operator==(const QASample&) const = default;
};

inline nlohmann::json to_json(const IFSample& s) {
  nlohmann::json cs = nlohmann::json::array();
  for (const auto& c : s.constraints) cs.push_back(to_json(c));
  return {{"id", s.id}, {"instruction", s.instruction}, {"task", s.task}, {"constraints", cs}};
}

inline nlohmann::json to_json(const QASample& s) {
  nlohmann::json j{{"id", s.id}, {"question", s.question}, {"answers", s.answers}};
  if (s.context) j["context"] = *s.context;
  return j;
}

inline IFSample if_sample_from_json(const nlohmann::json& j) {
  IFSample s;
  try {
    s.id = j.at("id").get<std::string>();
    s.instruction = j.at("instruction").get<std::string>();
    s.task = j.at("task").get<std::string>();
    for (const auto& c : j.at("constraints")) s.constraints.push_back(constraint_from_json(c));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("instruction sample: ") + e.what());
  }
  s.validate();
  return s;
}

inline QASample qa_sample_from_json(const nlohmann::json& j) {
  QASample s;
  try {
    s.id = j.at("id").get<std::string>();
    s.question = j.at("question").get<std::string>();
    if (j.contains("context") && !j.at("context").is_null()) s.context = j.at("context").get<std::string>();
    s.answers = j.at("answers").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("qa sample: ") + e.what());
  }
  s.validate();
  return s;
}

/// Parses one JSON value per non-blank line; errors carry the line number.
template <typename Sample>
std::vector<Sample> read_jsonl(std::istream& in, const std::function<Sample(const nlohmann::json&)>& parse) {
  std::vector<Sample> out;
  std::set<std::string> ids;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(parse(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::parse_error& e) {
      throw DataError("line " + std::to_string(lineno) + ": " + e.what());
    } catch (const DataError& e) {
      throw DataError("line " + std::to_string(lineno) + ": " + e.what());
    }
    if (!ids.insert(out.back().id).second)
      throw DataError("line " + std::to_string(lineno) + ": duplicate sample id '" + out.back().id + "'");
  }
  return out;
}

inline std::vector<IFSample> read_if_samples(std::istream& in) {
  return read_jsonl<IFSample>(in, if_sample_from_json);
}
inline std::vector<QASample> read_qa_samples(std::istream& in) {
  return read_jsonl<QASample>(in, qa_sample_from_json);
}

template <typename Sample>
void write_jsonl(std::ostream& out, const std::vector<Sample>& samples) {
  for (const auto& s : samples) out << to_json(s).dump() << '\n';
}

inline std::ifstream open_input(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path + "'");
  return in;
}

inline std::ofstream open_output(const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path + "'");
  return out;
}

}  // namespace agd
