#include <algorithm>
#include <stdexcept>

#include "earm/model.hpp"
#include "earm/numerics.hpp"

namespace earm {

namespace {

// Context digits live in base V+1; digit V is the empty-padding bucket.
class TabularTrace final : public ForwardTrace {
public:
  void init(int rows, int vocab) {
    rows_ = rows;
    vocab_ = vocab;
    logits_.resize(static_cast<std::size_t>(rows) * static_cast<std::size_t>(vocab));
    row_of.resize(static_cast<std::size_t>(rows));
  }
  double* mutable_logits() { return logits_.data(); }
  std::vector<std::size_t> row_of;  // table row per context length
};

class TabularState final : public DecodeState {
public:
  std::vector<std::int32_t> tail;  // last min(consumed, order) tokens
  std::unique_ptr<DecodeState> clone() const override {
    return std::make_unique<TabularState>(*this);
  }
};

}  // namespace

TabularModel::TabularModel(int vocab_size, int max_seq_length, int order)
    : vocab_(vocab_size), max_len_(max_seq_length), order_(order == 0 ? max_seq_length - 1 : order) {
  if (vocab_ < 2) throw std::invalid_argument("tabular model: V must be at least 2");
  if (max_len_ < 1) throw std::invalid_argument("tabular model: K must be at least 1");
  if (order_ < 1) throw std::invalid_argument("tabular model: order must be at least 1");
  rows_ = checked_pow(static_cast<std::size_t>(vocab_ + 1), order_, kEnumerationBound * 8);
  table_.assign(rows_ * static_cast<std::size_t>(vocab_), 0.0);
}

std::unique_ptr<ArModel> TabularModel::clone() const { return std::make_unique<TabularModel>(*this); }

std::size_t TabularModel::row_index(std::span<const std::int32_t> context) const {
  const int used = std::min<int>(static_cast<int>(context.size()), order_);
  const std::size_t offset = context.size() - static_cast<std::size_t>(used);
  std::size_t idx = 0;
  for (int j = 0; j < order_ - used; ++j) idx = idx * static_cast<std::size_t>(vocab_ + 1) + static_cast<std::size_t>(vocab_);
  for (int j = 0; j < used; ++j) {
    const std::int32_t t = context[offset + static_cast<std::size_t>(j)];
    if (t < 0 || t >= vocab_) throw std::invalid_argument("tabular model: token id out of range");
    idx = idx * static_cast<std::size_t>(vocab_ + 1) + static_cast<std::size_t>(t);
  }
  return idx;
}

void TabularModel::logits(std::span<const std::int32_t> context, std::span<double> out) const {
  check_context(context);
  const std::size_t row = row_index(context);
  const double* src = table_.data() + row * static_cast<std::size_t>(vocab_);
  std::copy(src, src + vocab_, out.begin());
}

std::unique_ptr<ForwardTrace> TabularModel::forward_trace(std::span<const std::int32_t> seq,
                                                          int n_rows) const {
  if (n_rows > max_len_)
    throw std::invalid_argument("tabular model: trace longer than max sequence length");
  auto trace = std::make_unique<TabularTrace>();
  trace->init(n_rows, vocab_);
  for (int c = 0; c < n_rows; ++c) {
    const std::size_t row = row_index(seq.subspan(0, static_cast<std::size_t>(c)));
    trace->row_of[static_cast<std::size_t>(c)] = row;
    const double* src = table_.data() + row * static_cast<std::size_t>(vocab_);
    std::copy(src, src + vocab_,
              trace->mutable_logits() + static_cast<std::size_t>(c) * static_cast<std::size_t>(vocab_));
  }
  return trace;
}

void TabularModel::backward_from_trace(const ForwardTrace& trace, std::span<const std::int32_t>,
                                       const double* dlogits, GradVector& sink) const {
  const auto& t = dynamic_cast<const TabularTrace&>(trace);
  if (sink.size() != table_.size()) throw std::invalid_argument("tabular model: sink size mismatch");
  const std::size_t v = static_cast<std::size_t>(vocab_);
  for (int c = 0; c < t.rows(); ++c) {
    const std::size_t base = t.row_of[static_cast<std::size_t>(c)] * v;
    const double* row = dlogits + static_cast<std::size_t>(c) * v;
    for (std::size_t j = 0; j < v; ++j) sink[base + j] += row[j];
  }
}

std::unique_ptr<DecodeState> TabularModel::initial_state() const {
  return std::make_unique<TabularState>();
}

void TabularModel::state_logits(const DecodeState& state, std::span<double> out) const {
  const auto& s = dynamic_cast<const TabularState&>(state);
  logits(s.tail, out);
}

void TabularModel::advance_state(DecodeState& state, std::int32_t token) const {
  auto& s = dynamic_cast<TabularState&>(state);
  if (token < 0 || token >= vocab_) throw std::invalid_argument("tabular model: token id out of range");
  s.tail.push_back(token);
  if (static_cast<int>(s.tail.size()) > order_) s.tail.erase(s.tail.begin());
}

}  // namespace earm
