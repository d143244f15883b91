#pragma once

/**
 * Plain-text prompt layouts for the byte-level model.
 *
 * A chat prompt renders as `system + "\n\n" + user + "\n"`. Segment offsets
 * are byte offsets into the rendered text and feed Prompt::from_text.
 */

#include <map>
#include <string>

#include "agd/roi.hpp"

namespace agd {

inline constexpr const char* kSystemPreamble = "You are a helpful assistant.";

struct RenderedPrompt {
  std::string text;
  std::map<std::string, PositionRange> segments;  // byte offsets
};

namespace detail {
inline void shift_segments(std::map<std::string, PositionRange>& segs, std::size_t by) {
  for (auto& [_, r] : segs) r = {r.begin + by, r.end + by};
}
}  // namespace detail

/// `system` becomes the "instruction" segment, `user` the "task" segment;
/// any segments already marked inside `user` are carried over.
inline RenderedPrompt render_chat(const std::string& system, const RenderedPrompt& user) {
  RenderedPrompt out;
  std::size_t user_at = 0;
  if (!system.empty()) {
    out.text = system + "\n\n";
    out.segments["instruction"] = {0, system.size()};
    user_at = out.text.size();
  }
  out.text += user.text + "\n";
  auto segs = user.segments;
  detail::shift_segments(segs, user_at);
  for (auto& [k, v] : segs) out.segments[k] = v;
  out.segments["task"] = {user_at, user_at + user.text.size()};
  return out;
}

inline RenderedPrompt render_chat(const std::string& system, const std::string& user) {
  return render_chat(system, RenderedPrompt{user, {}});
}

/// Open-book user turn; the context document is the "context" segment.
inline RenderedPrompt open_book_user(const std::string& question, const std::string& context) {
  RenderedPrompt p;
  p.text = context + " \n\nBased on this text, answer this question:\nQ: " + question + "\nA:";
  p.segments["context"] = {0, context.size()};
  return p;
}

inline RenderedPrompt render_open_book(const std::string& question, const std::string& context,
                                       const std::string& system = kSystemPreamble) {
  return render_chat(system, open_book_user(question, context));
}

/// Closed-book: the user turn is the question alone.
inline RenderedPrompt render_closed_book(const std::string& question, const std::string& system = kSystemPreamble) {
  return render_chat(system, question);
}

/// Instruction-following: the instruction is the system turn, the task the user turn.
inline RenderedPrompt render_instruction_prompt(const std::string& instruction, const std::string& task) {
  return render_chat(instruction, task);
}

}  // namespace agd
