#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace earm {

/// Integer-coded token sequence; ids index a Vocabulary.
using TokenSeq = std::vector<std::int32_t>;

/// Bijective symbol <-> id coding over 0..V-1. Ids follow the order the
/// symbols were given in. No reserved ids: there is no padding or BOS
/// token, sequences are fixed-length or carry their own length.
class Vocabulary {
public:
  Vocabulary() = default;

  /// Throws std::invalid_argument on duplicates ("duplicate symbol X"),
  /// empty input, or V < 2.
  static Vocabulary build(const std::vector<std::string>& symbols);

  /// Convenience vocabulary with symbols "0", "1", ..., "V-1".
  static Vocabulary numeric(int v);

  int size() const { return static_cast<int>(symbols_.size()); }
  const std::string& symbol(int id) const;
  const std::vector<std::string>& symbols() const { return symbols_; }

  /// Throws std::invalid_argument for unknown symbols.
  int id_of(const std::string& symbol) const;
  bool contains(const std::string& symbol) const { return ids_.count(symbol) > 0; }

private:
  std::vector<std::string> symbols_;
  std::unordered_map<std::string, int> ids_;
};

/// Throws if any id falls outside 0..V-1.
void check_token_ids(std::span<const std::int32_t> ids, int vocab_size);

}  // namespace earm
