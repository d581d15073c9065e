// Renders the same prompt in both template styles, zero-shot and few-shot.

#include <iostream>

#include "apo/core.hpp"

int main() {
  using namespace apo;

  Exemplar demo;
  demo.query_text = "What is 2+2?";
  demo.model_output = "2 plus 2 equals 4. <answer>4</answer>";
  demo.final_answer = "4";
  demo.source_index = 0;

  AnswerKind kind = make_answer_kind(AnswerKindTag::free);
  const std::string query = "What is 3+3?";

  for (TemplateStyle style : {TemplateStyle::qa_block, TemplateStyle::header_block}) {
    for (int k : {0, 1}) {
      Prompt prompt{seed_instruction(), {}, style};
      if (k == 1) prompt.exemplars.push_back(demo);
      std::cout << "---- " << to_string(style) << ", k=" << k << " ----\n"
                << render_prompt(prompt, query, kind) << "\n<<<generation point>>>\n\n";
    }
  }
  return 0;
}
