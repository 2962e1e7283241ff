#pragma once

#include <string>
#include <string_view>

namespace uxw {

// Expanded bimodal vocabulary. Id layout:
//   [0, text)                 text tokens
//   [text, text + visual)     visual codebook tokens
//   then BOI, EOI, BOS, PAD   control tokens
struct Vocab {
  int text = 16;
  int visual = 64;

  static constexpr int kControlTokens = 4;

  int total() const { return text + visual + kControlTokens; }
  int boi() const { return text + visual; }
  int eoi() const { return text + visual + 1; }
  int bos() const { return text + visual + 2; }
  int pad() const { return text + visual + 3; }

  int visual_id(int code) const { return text + code; }
  int code_of(int id) const { return id - text; }

  bool is_text(int id) const { return id >= 0 && id < text; }
  bool is_visual(int id) const { return id >= text && id < text + visual; }
  bool is_control(int id) const { return id >= boi() && id < total(); }
  // Modality tag used for routing: image codes plus the BOI/EOI delimiters.
  bool routes_visual(int id) const { return is_visual(id) || id == boi() || id == eoi(); }
};

enum class Task { kT2I, kCaption, kTextOnly };

std::string_view task_name(Task task);
Task parse_task(std::string_view name);

}  // namespace uxw
