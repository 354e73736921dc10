#include "earm/vocab.hpp"

#include <stdexcept>

namespace earm {

Vocabulary Vocabulary::build(const std::vector<std::string>& symbols) {
  if (symbols.empty()) throw std::invalid_argument("vocabulary: empty symbol list");
  Vocabulary v;
  v.symbols_.reserve(symbols.size());
  for (const auto& s : symbols) {
    auto [it, inserted] = v.ids_.emplace(s, static_cast<int>(v.symbols_.size()));
    if (!inserted) throw std::invalid_argument("duplicate symbol " + s);
    v.symbols_.push_back(s);
  }
  if (v.size() < 2) throw std::invalid_argument("vocabulary: need at least 2 symbols");
  return v;
}

Vocabulary Vocabulary::numeric(int v) {
  std::vector<std::string> symbols;
  symbols.reserve(static_cast<std::size_t>(v));
  for (int i = 0; i < v; ++i) symbols.push_back(std::to_string(i));
  return build(symbols);
}

const std::string& Vocabulary::symbol(int id) const {
  if (id < 0 || id >= size())
    throw std::invalid_argument("vocabulary: id " + std::to_string(id) + " out of range");
  return symbols_[static_cast<std::size_t>(id)];
}

int Vocabulary::id_of(const std::string& symbol) const {
  auto it = ids_.find(symbol);
  if (it == ids_.end()) throw std::invalid_argument("vocabulary: unknown symbol " + symbol);
  return it->second;
}

void check_token_ids(std::span<const std::int32_t> ids, int vocab_size) {
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= vocab_size)
      throw std::invalid_argument("token id " + std::to_string(ids[i]) + " at position " +
                                  std::to_string(i) + " outside vocabulary of size " +
                                  std::to_string(vocab_size));
  }
}

}  // namespace earm
