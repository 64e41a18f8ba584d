#pragma once

#include <algorithm>
#include <array>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <expat.h>

#include "document.hpp"
#include "error.hpp"
#include "segmenter.hpp"
#include "text.hpp"

namespace segrag::corpus {

class EmptyDocumentError : public DataError {
 public:
  using DataError::DataError;
};

/// JATS elements whose whole subtree is dropped.
inline constexpr std::array<std::string_view, 10> kExcludedElements = {
    "fig", "table-wrap", "caption", "ref-list", "ref", "app", "app-group",
    "supplementary-material", "graphic", "media"};

namespace detail {

// Elements that do not break a paragraph.
inline constexpr std::array<std::string_view, 24> kInlineElements = {
    "italic", "bold", "sup", "sub", "xref", "underline", "sc", "monospace",
    "ext-link", "uri", "named-content", "styled-content", "inline-formula", "email",
    "abbrev", "roman", "sans-serif", "strike", "overline", "inline-graphic",
    "fn", "break", "mml:math", "tex-math"};

template <std::size_t N>
bool contains(const std::array<std::string_view, N>& set, std::string_view name) {
  return std::find(set.begin(), set.end(), name) != set.end();
}

class JatsHandler {
 public:
  void start(std::string_view name, const XML_Char** attrs) {
    if (excluded_ > 0 || detail::contains(kExcludedElements, name)) {
      ++excluded_;
      stack_.emplace_back(name);
      return;
    }
    if (name == "label") {
      ++ignored_;
    } else if (!detail::contains(kInlineElements, name)) {
      flush();
    }

    if (name == "article-id") {
      id_type_.clear();
      for (const XML_Char** a = attrs; a && *a; a += 2)
        if (std::string_view(a[0]) == "pub-id-type") id_type_ = a[1];
      id_buf_.clear();
    } else if (name == "abstract" && body_ == 0) {
      ++abstract_;
      saw_container_ = true;
      if (!abstract_section_) {
        abstract_section_ = sections_.size();
        sections_.push_back({std::string("abstract"), {}});
      }
    } else if (name == "body" && abstract_ == 0) {
      ++body_;
      saw_container_ = true;
      orphan_section_.reset();
    } else if (name == "sec" && body_ > 0) {
      open_secs_.push_back(sections_.size());
      sections_.push_back({std::nullopt, {}});
      orphan_section_.reset();
    } else if (name == "title" && body_ > 0 && !stack_.empty() && stack_.back() == "sec") {
      in_sec_title_ = true;
      title_buf_.clear();
    }
    stack_.emplace_back(name);
  }

  void end(std::string_view name) {
    stack_.pop_back();
    if (excluded_ > 0) {
      --excluded_;
      return;
    }
    if (name == "label") {
      --ignored_;
      return;
    }
    if (!detail::contains(kInlineElements, name)) flush();

    if (name == "article-id") {
      std::string id = text::collapse_whitespace(id_buf_);
      if (!id.empty()) {
        if (id_type_ == "pmid" && pmid_.empty()) pmid_ = id;
        if ((id_type_ == "pmc" || id_type_ == "pmcid") && pmc_.empty()) pmc_ = id;
      }
      id_type_.clear();
    } else if (name == "abstract" && abstract_ > 0) {
      --abstract_;
    } else if (name == "body" && body_ > 0) {
      --body_;
    } else if (name == "sec" && body_ > 0 && !open_secs_.empty()) {
      open_secs_.pop_back();
    } else if (name == "title" && in_sec_title_) {
      in_sec_title_ = false;
      std::string t = text::collapse_whitespace(title_buf_);
      if (!t.empty() && !open_secs_.empty()) sections_[open_secs_.back()].title = std::move(t);
    }
  }

  void characters(std::string_view data) {
    if (excluded_ > 0 || ignored_ > 0) return;
    if (!stack_.empty() && stack_.back() == "article-id") {
      id_buf_.append(data);
      return;
    }
    if (in_sec_title_) {
      title_buf_.append(data);
      return;
    }
    if (abstract_ > 0) {
      // Headings inside a structured abstract are not content.
      if (std::find(stack_.begin(), stack_.end(), "title") != stack_.end()) return;
      para_.append(data);
    } else if (body_ > 0) {
      para_.append(data);
    }
  }

  Document finish(std::string fallback_id) {
    flush();
    Document doc;
    doc.id = !pmid_.empty() ? pmid_ : !pmc_.empty() ? pmc_ : std::move(fallback_id);
    for (auto& s : sections_)
      if (!s.sentences.empty()) doc.sections.push_back(std::move(s));
    if (!saw_container_) throw EmptyDocumentError("document '" + doc.id + "' has no abstract and no body");
    if (doc.sections.empty()) throw EmptyDocumentError("document '" + doc.id + "' has no text in abstract or body");
    return doc;
  }

 private:
  void flush() {
    if (para_.empty()) return;
    const std::string paragraph = text::collapse_whitespace(para_);
    para_.clear();
    if (paragraph.empty()) return;
    std::size_t target;
    if (abstract_ > 0) {
      target = *abstract_section_;
    } else if (!open_secs_.empty()) {
      target = open_secs_.back();
    } else {
      if (!orphan_section_) {
        orphan_section_ = sections_.size();
        sections_.push_back({std::nullopt, {}});
      }
      target = *orphan_section_;
    }
    auto sentences = segmenter::sentence_texts(paragraph);
    auto& dest = sections_[target].sentences;
    dest.insert(dest.end(), std::make_move_iterator(sentences.begin()), std::make_move_iterator(sentences.end()));
  }

  std::vector<std::string> stack_;
  int excluded_ = 0;
  int ignored_ = 0;
  int abstract_ = 0;
  int body_ = 0;
  bool saw_container_ = false;
  bool in_sec_title_ = false;
  std::string title_buf_;
  std::string para_;
  std::string id_type_;
  std::string id_buf_;
  std::string pmid_;
  std::string pmc_;
  std::vector<Section> sections_;
  std::vector<std::size_t> open_secs_;
  std::optional<std::size_t> abstract_section_;
  std::optional<std::size_t> orphan_section_;
};

struct ParserDeleter {
  void operator()(XML_Parser p) const { XML_ParserFree(p); }
};

}  // namespace detail

/// Parses JATS full-text XML into a Document holding the abstract (section 0,
/// titled "abstract") followed by body sections flattened in pre-order.
/// Subtrees under kExcludedElements are dropped. The id is the article's PMID,
/// else its PMC id, else `fallback_id`.
inline Document clean_jats(std::string_view xml, std::string fallback_id = "unknown") {
  std::unique_ptr<std::remove_pointer_t<XML_Parser>, detail::ParserDeleter> parser(XML_ParserCreate("UTF-8"));
  if (!parser) throw DataError("cannot allocate XML parser");
  detail::JatsHandler handler;
  XML_SetUserData(parser.get(), &handler);
  XML_SetElementHandler(
      parser.get(),
      [](void* ud, const XML_Char* name, const XML_Char** attrs) {
        static_cast<detail::JatsHandler*>(ud)->start(name, attrs);
      },
      [](void* ud, const XML_Char* name) { static_cast<detail::JatsHandler*>(ud)->end(name); });
  XML_SetCharacterDataHandler(parser.get(), [](void* ud, const XML_Char* s, int len) {
    static_cast<detail::JatsHandler*>(ud)->characters(std::string_view(s, static_cast<std::size_t>(len)));
  });

  if (XML_Parse(parser.get(), xml.data(), static_cast<int>(xml.size()), XML_TRUE) == XML_STATUS_ERROR) {
    const auto offset = XML_GetCurrentByteIndex(parser.get());
    throw ParseError(std::string("malformed XML: ") + XML_ErrorString(XML_GetErrorCode(parser.get())),
                     static_cast<std::uint64_t>(std::max<XML_Index>(offset, 0)));
  }
  return handler.finish(std::move(fallback_id));
}

}  // namespace segrag::corpus
