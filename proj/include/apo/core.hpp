#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace apo {

enum class InstructionOrigin { seed, ape, opro, protegi, manual };

inline const char* to_string(InstructionOrigin o) {
  switch (o) {
    case InstructionOrigin::seed: return "seed";
    case InstructionOrigin::ape: return "ape";
    case InstructionOrigin::opro: return "opro";
    case InstructionOrigin::protegi: return "protegi";
    case InstructionOrigin::manual: return "manual";
  }
  return "?";
}

// The instruction line prepended to the task query. text must be non-empty
// after trimming.
struct Instruction {
  std::string text;
  InstructionOrigin origin = InstructionOrigin::manual;
};

inline constexpr const char* kSeedInstruction = "Let's think step by step.";

inline Instruction seed_instruction() { return {kSeedInstruction, InstructionOrigin::seed}; }

inline std::string trim_copy(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

// instructions must carry text; whitespace-only is as bad as empty
inline Instruction make_instruction(std::string text,
                                    InstructionOrigin origin = InstructionOrigin::manual) {
  if (trim_copy(text).empty()) {
    throw std::invalid_argument("instruction text must be non-empty after trimming");
  }
  return {std::move(text), origin};
}

// An input/output pair harvested from the validation split: the model's full
// response (reasoning included) plus the parsed final answer. Only items the
// target answered correctly ever become exemplars.
struct Exemplar {
  std::string query_text;    // validation input
  std::string model_output;  // full response, including intermediate reasoning
  std::string final_answer;  // parsed from model_output
  int source_index = -1;     // position in the validation split
};

// The correctly-answered subset of the validation split under one
// instruction, in ascending source_index order.
struct ExemplarPool {
  std::vector<Exemplar> exemplars;
  Instruction conditioning_instruction;

  std::size_t size() const { return exemplars.size(); }
  bool empty() const { return exemplars.empty(); }
};

enum class AnswerKindTag {
  multiple_choice,
  boolean_true_false,
  yes_no,
  valid_invalid,
  word_sorting,
  free
};

inline const char* to_string(AnswerKindTag k) {
  switch (k) {
    case AnswerKindTag::multiple_choice: return "multiple_choice";
    case AnswerKindTag::boolean_true_false: return "boolean_true_false";
    case AnswerKindTag::yes_no: return "yes_no";
    case AnswerKindTag::valid_invalid: return "valid_invalid";
    case AnswerKindTag::word_sorting: return "word_sorting";
    case AnswerKindTag::free: return "free";
  }
  return "?";
}

// Answer kind drives the task-specific answer-instruction sentence and the
// scoring rule. constraint_text is the parenthetical clause; it is empty
// exactly for multiple_choice (which uses the option-form sentence) and free.
struct AnswerKind {
  AnswerKindTag kind = AnswerKindTag::free;
  std::string constraint_text;
};

inline AnswerKind make_answer_kind(AnswerKindTag tag) {
  switch (tag) {
    case AnswerKindTag::boolean_true_false: return {tag, "(True or False only)"};
    case AnswerKindTag::yes_no: return {tag, "(yes or no only)"};
    case AnswerKindTag::valid_invalid: return {tag, "(valid or invalid only)"};
    case AnswerKindTag::word_sorting: return {tag, "(sorted words separated by spaces only)"};
    case AnswerKindTag::multiple_choice:
    case AnswerKindTag::free: return {tag, ""};
  }
  return {tag, ""};
}

// The instruction sentence keeps the literal "<\answer>" closer; the answer
// extractor accepts both "<\answer>" and "</answer>" on the way back.
inline std::string answer_instruction_for(const AnswerKind& kind) {
  switch (kind.kind) {
    case AnswerKindTag::multiple_choice:
      return "Show your final answer option bracketed between <answer> and <\\answer>.";
    case AnswerKindTag::free:
      return "Show your final answer bracketed between <answer> and <\\answer>.";
    default:
      return "Show your final answer " + kind.constraint_text +
             " bracketed between <answer> and <\\answer>.";
  }
}

// qa_block repeats the instruction inside every exemplar block and the live
// block; header_block states it once at the top. qa_block is the style used
// with the seed instruction, APE and OPRO; header_block follows the ProTeGi
// convention.
enum class TemplateStyle { qa_block, header_block };

inline const char* to_string(TemplateStyle s) {
  return s == TemplateStyle::qa_block ? "qa_block" : "header_block";
}

// A full prompt: instruction, ordered exemplar sequence (possibly empty) and
// template style. Rendering is a pure function of the fields.
struct Prompt {
  Instruction instruction;
  std::vector<Exemplar> exemplars;
  TemplateStyle style = TemplateStyle::qa_block;
};

// Renders the prompt text up to the generation point, character-exact.
//
// qa_block, k exemplars:
//
//   Q: <demo query>
//   <answer instruction>
//   A: <instruction> <demo output>
//   ==
//
//   Q: <live query>
//   <answer instruction>
//   A: <instruction> <trailing space>
//
// header_block states the instruction once; with exemplars the answer
// instruction attaches to each query line (two spaces before it):
//
//   <instruction>
//   <demo query>  <answer instruction>
//   <demo output>
//   ==
//
//   <live query>  <answer instruction>
//   <newline, generation point>
//
// header_block with zero exemplars collapses to
// "<instruction> <answer instruction>\n\n<query>\n". Blocks are joined with
// "\n==\n\n"; no trailing newline follows the generation point.
inline std::string render_prompt(const Prompt& prompt, const std::string& query,
                                 const AnswerKind& kind) {
  const std::string ans = answer_instruction_for(kind);
  const std::string& instr = prompt.instruction.text;
  std::string out;
  out.reserve(256 + query.size() + prompt.exemplars.size() * 256);

  static constexpr const char* kSep = "\n==\n\n";

  if (prompt.style == TemplateStyle::qa_block) {
    for (const Exemplar& e : prompt.exemplars) {
      out += "Q: ";
      out += e.query_text;
      out += "\n";
      out += ans;
      out += "\nA: ";
      out += instr;
      out += " ";
      out += e.model_output;
      out += kSep;
    }
    out += "Q: ";
    out += query;
    out += "\n";
    out += ans;
    out += "\nA: ";
    out += instr;
    out += " ";
    return out;
  }

  // header_block
  if (prompt.exemplars.empty()) {
    out += instr;
    out += " ";
    out += ans;
    out += "\n\n";
    out += query;
    out += "\n";
    return out;
  }
  out += instr;
  out += "\n";
  for (const Exemplar& e : prompt.exemplars) {
    out += e.query_text;
    out += "  ";
    out += ans;
    out += "\n";
    out += e.model_output;
    out += kSep;
  }
  out += query;
  out += "  ";
  out += ans;
  out += "\n";
  return out;
}

}  // namespace apo
