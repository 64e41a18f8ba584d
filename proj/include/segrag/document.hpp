#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "error.hpp"
#include "io.hpp"
#include "text.hpp"

namespace segrag {

struct Section {
  std::optional<std::string> title;
  std::vector<std::string> sentences;

  friend bool operator==(const Section&, const Section&) = default;
};

/// Sectioned text unit: the input to chunking and pair generation.
struct Document {
  std::string id;
  std::vector<Section> sections;

  std::size_t sentence_count() const noexcept {
    std::size_t n = 0;
    for (const auto& s : sections) n += s.sentences.size();
    return n;
  }

  /// Sentences of all sections, concatenated in order.
  std::vector<std::string> flat_sentences() const {
    std::vector<std::string> out;
    out.reserve(sentence_count());
    for (const auto& s : sections) out.insert(out.end(), s.sentences.begin(), s.sentences.end());
    return out;
  }

  /// Plain-text rendering: sentences joined by a space, sections by a blank line.
  std::string text() const {
    std::string out;
    for (std::size_t i = 0; i < sections.size(); ++i) {
      if (i) out += "\n\n";
      out += text::join(sections[i].sentences, " ");
    }
    return out;
  }

  friend bool operator==(const Document&, const Document&) = default;
};

struct QARecord {
  std::string pubid;
  std::string question;
  std::vector<std::string> gold_context;
  std::string long_answer;

  friend bool operator==(const QARecord&, const QARecord&) = default;
};

namespace corpus {

using ordered_json = nlohmann::ordered_json;

/// Throws ValidationError if `doc` breaks a Document/Section invariant.
inline void validate(const Document& doc, const std::string& where = "document") {
  if (doc.id.empty()) throw ValidationError(where + ": field 'id' is empty");
  if (doc.sections.empty()) throw ValidationError(where + " '" + doc.id + "': field 'sections' is empty");
  for (std::size_t s = 0; s < doc.sections.size(); ++s) {
    const auto& sec = doc.sections[s];
    const std::string at = where + " '" + doc.id + "': field 'sections[" + std::to_string(s) + "]";
    if (sec.sentences.empty()) throw ValidationError(at + ".sentences' is empty");
    for (std::size_t i = 0; i < sec.sentences.size(); ++i)
      if (text::is_blank(sec.sentences[i]))
        throw ValidationError(at + ".sentences[" + std::to_string(i) + "]' is blank");
  }
}

inline ordered_json to_json(const Document& doc) {
  ordered_json sections = ordered_json::array();
  for (const auto& sec : doc.sections) {
    ordered_json s;
    s["title"] = sec.title ? ordered_json(*sec.title) : ordered_json(nullptr);
    s["sentences"] = sec.sentences;
    sections.push_back(std::move(s));
  }
  ordered_json j;
  j["id"] = doc.id;
  j["sections"] = std::move(sections);
  return j;
}

namespace detail {

inline const nlohmann::json& field(const nlohmann::json& j, const char* name, const std::string& where) {
  auto it = j.find(name);
  if (it == j.end()) throw ValidationError(where + ": missing field '" + name + "'");
  return *it;
}

inline std::string string_field(const nlohmann::json& j, const char* name, const std::string& where) {
  const auto& v = field(j, name, where);
  if (!v.is_string()) throw ValidationError(where + ": field '" + name + "' must be a string");
  return v.get<std::string>();
}

inline std::vector<std::string> string_list_field(const nlohmann::json& j, const char* name,
                                                  const std::string& where) {
  const auto& v = field(j, name, where);
  if (!v.is_array()) throw ValidationError(where + ": field '" + name + "' must be an array");
  std::vector<std::string> out;
  for (const auto& e : v) {
    if (!e.is_string()) throw ValidationError(where + ": field '" + name + "' must hold strings");
    out.push_back(e.get<std::string>());
  }
  return out;
}

inline nlohmann::json parse_line(std::string_view line, const std::string& where) {
  try {
    auto j = nlohmann::json::parse(line);
    if (!j.is_object()) throw ValidationError(where + ": record is not a JSON object");
    return j;
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError(where + ": invalid JSON (" + e.what() + ")");
  }
}

}  // namespace detail

inline Document document_from_json(const nlohmann::json& j, const std::string& where) {
  Document doc;
  doc.id = detail::string_field(j, "id", where);
  const auto& sections = detail::field(j, "sections", where);
  if (!sections.is_array()) throw ValidationError(where + ": field 'sections' must be an array");
  for (std::size_t i = 0; i < sections.size(); ++i) {
    const std::string at = where + " sections[" + std::to_string(i) + "]";
    const auto& s = sections[i];
    if (!s.is_object()) throw ValidationError(at + ": must be an object");
    Section sec;
    if (auto t = s.find("title"); t != s.end() && !t->is_null()) {
      if (!t->is_string()) throw ValidationError(at + ": field 'title' must be a string or null");
      sec.title = t->get<std::string>();
    }
    sec.sentences = detail::string_list_field(s, "sentences", at);
    doc.sections.push_back(std::move(sec));
  }
  validate(doc, where);
  return doc;
}

inline std::vector<Document> parse_documents(std::string_view content) {
  std::vector<Document> docs;
  io::for_each_line(content, [&](std::string_view line, std::size_t n) {
    const std::string where = "record " + std::to_string(docs.size()) + " (line " + std::to_string(n) + ")";
    docs.push_back(document_from_json(detail::parse_line(line, where), where));
  });
  return docs;
}

inline std::string serialize_documents(const std::vector<Document>& docs) {
  std::string out;
  for (const auto& d : docs) {
    validate(d);
    out += to_json(d).dump();
    out += '\n';
  }
  return out;
}

inline std::vector<Document> load_documents(const std::filesystem::path& path) {
  return parse_documents(io::read_file(path));
}

inline void save_documents(const std::vector<Document>& docs, const std::filesystem::path& path) {
  io::write_file_atomic(path, serialize_documents(docs));
}

inline ordered_json to_json(const QARecord& r) {
  ordered_json j;
  j["pubid"] = r.pubid;
  j["question"] = r.question;
  j["gold_context"] = r.gold_context;
  j["long_answer"] = r.long_answer;
  return j;
}

/// `require_context` rejects empty gold_context (retrieval datasets need it).
inline QARecord qa_from_json(const nlohmann::json& j, const std::string& where, bool require_context) {
  QARecord r;
  r.pubid = detail::string_field(j, "pubid", where);
  r.question = detail::string_field(j, "question", where);
  r.gold_context = detail::string_list_field(j, "gold_context", where);
  r.long_answer = detail::string_field(j, "long_answer", where);
  if (r.pubid.empty()) throw ValidationError(where + ": field 'pubid' is empty");
  if (text::is_blank(r.question)) throw ValidationError(where + ": field 'question' is empty");
  if (text::is_blank(r.long_answer)) throw ValidationError(where + ": field 'long_answer' is empty");
  if (require_context && r.gold_context.empty())
    throw ValidationError(where + ": field 'gold_context' is empty");
  return r;
}

inline std::vector<QARecord> load_qa(const std::filesystem::path& path, bool require_context = false) {
  std::vector<QARecord> out;
  io::for_each_line(io::read_file(path), [&](std::string_view line, std::size_t n) {
    const std::string where = "record " + std::to_string(out.size()) + " (line " + std::to_string(n) + ")";
    out.push_back(qa_from_json(detail::parse_line(line, where), where, require_context));
  });
  return out;
}

inline void save_qa(const std::vector<QARecord>& records, const std::filesystem::path& path) {
  std::string out;
  for (const auto& r : records) {
    out += to_json(r).dump();
    out += '\n';
  }
  io::write_file_atomic(path, out);
}

}  // namespace corpus
}  // namespace segrag
