#pragma once

#include <initializer_list>
#include <string>
#include <vector>

#include "unsafespot/corpus.hpp"

namespace fixture {

using unsafespot::CallTarget;
using unsafespot::FunctionRecord;
using unsafespot::Instruction;
using unsafespot::LabeledFunction;
using unsafespot::LabelSet;

/// Builds a function whose instructions are 4 bytes apart starting at `start`.
/// Each entry is "mnemonic,op,op"; "call:<id>" and "call:ext" make calls.
inline FunctionRecord function(const std::string& id, std::uint64_t start,
                               std::initializer_list<std::string> body,
                               const std::string& binary = "bin") {
  FunctionRecord f;
  f.function_id = id;
  f.binary_id = binary;
  f.start = start;
  std::uint64_t addr = start;
  for (const auto& text : body) {
    Instruction insn;
    insn.address = addr;
    addr += 4;
    if (text.starts_with("call:")) {
      insn.mnemonic = "call";
      const std::string target = text.substr(5);
      if (target == "ext") {
        insn.call_target = CallTarget{true, ""};
      } else {
        insn.call_target = CallTarget{false, target};
        f.callees.push_back(target);
      }
    } else {
      std::size_t pos = text.find(',');
      insn.mnemonic = text.substr(0, pos);
      while (pos != std::string::npos) {
        const std::size_t next = text.find(',', pos + 1);
        insn.operands.push_back(text.substr(pos + 1, next == std::string::npos ? next : next - pos - 1));
        pos = next;
      }
    }
    f.instructions.push_back(std::move(insn));
  }
  f.end = addr;
  return f;
}

inline LabeledFunction labeled(FunctionRecord f, std::initializer_list<int> u,
                               std::optional<bool> bug = std::nullopt) {
  std::vector<int> values(u);
  return {std::move(f), LabelSet::from_values(values), bug};
}

}  // namespace fixture
