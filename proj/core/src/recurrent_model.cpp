#include <cmath>
#include <cstring>
#include <stdexcept>

#include "earm/model.hpp"
#include "earm/numerics.hpp"

namespace earm {

namespace {

class RecurrentTrace final : public ForwardTrace {
public:
  void init(int rows, int vocab, int dh) {
    rows_ = rows;
    vocab_ = vocab;
    logits_.resize(static_cast<std::size_t>(rows) * static_cast<std::size_t>(vocab));
    hidden.assign(static_cast<std::size_t>(rows) * static_cast<std::size_t>(dh), 0.0);
  }
  double* mutable_logits() { return logits_.data(); }
  std::vector<double> hidden;  // (rows) x dh; hidden[c] is the state after c tokens
};

class RecurrentState final : public DecodeState {
public:
  std::vector<double> h;
  std::unique_ptr<DecodeState> clone() const override {
    return std::make_unique<RecurrentState>(*this);
  }
};

}  // namespace

RecurrentModel::RecurrentModel(int vocab_size, int max_seq_length, int embed_dim, int hidden_dim,
                               std::uint64_t seed)
    : vocab_(vocab_size), max_len_(max_seq_length), de_(embed_dim), dh_(hidden_dim) {
  if (vocab_ < 2) throw std::invalid_argument("recurrent model: V must be at least 2");
  if (max_len_ < 1) throw std::invalid_argument("recurrent model: K must be at least 1");
  if (de_ < 1 || dh_ < 1) throw std::invalid_argument("recurrent model: dims must be positive");
  const std::size_t n = off_bo() + static_cast<std::size_t>(vocab_);
  theta_.resize(n);
  CounterRng rng = CounterRng(seed).derive(stream_tag::init);
  for (double& p : theta_) p = rng.next_in(-0.08, 0.08);
}

std::unique_ptr<ArModel> RecurrentModel::clone() const {
  return std::make_unique<RecurrentModel>(*this);
}

std::size_t RecurrentModel::off_wx() const {
  return static_cast<std::size_t>(vocab_) * static_cast<std::size_t>(de_);
}
std::size_t RecurrentModel::off_wh() const {
  return off_wx() + static_cast<std::size_t>(dh_) * static_cast<std::size_t>(de_);
}
std::size_t RecurrentModel::off_bh() const {
  return off_wh() + static_cast<std::size_t>(dh_) * static_cast<std::size_t>(dh_);
}
std::size_t RecurrentModel::off_wo() const { return off_bh() + static_cast<std::size_t>(dh_); }
std::size_t RecurrentModel::off_bo() const {
  return off_wo() + static_cast<std::size_t>(vocab_) * static_cast<std::size_t>(dh_);
}

void RecurrentModel::step_hidden(std::span<const double> h_prev, std::int32_t token,
                                 std::span<double> h_out) const {
  if (token < 0 || token >= vocab_) throw std::invalid_argument("recurrent model: token id out of range");
  const double* emb = theta_.data() + static_cast<std::size_t>(token) * static_cast<std::size_t>(de_);
  const double* wx = theta_.data() + off_wx();
  const double* wh = theta_.data() + off_wh();
  const double* bh = theta_.data() + off_bh();
  for (int r = 0; r < dh_; ++r) {
    double u = bh[r];
    const double* wxr = wx + static_cast<std::size_t>(r) * static_cast<std::size_t>(de_);
    for (int c = 0; c < de_; ++c) u += wxr[c] * emb[c];
    const double* whr = wh + static_cast<std::size_t>(r) * static_cast<std::size_t>(dh_);
    for (int c = 0; c < dh_; ++c) u += whr[c] * h_prev[static_cast<std::size_t>(c)];
    h_out[static_cast<std::size_t>(r)] = std::tanh(u);
  }
}

void RecurrentModel::output_row(std::span<const double> h, std::span<double> out) const {
  const double* wo = theta_.data() + off_wo();
  const double* bo = theta_.data() + off_bo();
  for (int j = 0; j < vocab_; ++j) {
    double z = bo[j];
    const double* wor = wo + static_cast<std::size_t>(j) * static_cast<std::size_t>(dh_);
    for (int c = 0; c < dh_; ++c) z += wor[c] * h[static_cast<std::size_t>(c)];
    out[static_cast<std::size_t>(j)] = z;
  }
}

void RecurrentModel::logits(std::span<const std::int32_t> context, std::span<double> out) const {
  check_context(context);
  std::vector<double> h(static_cast<std::size_t>(dh_), 0.0);
  std::vector<double> h_next(static_cast<std::size_t>(dh_), 0.0);
  for (std::int32_t t : context) {
    step_hidden(h, t, h_next);
    h.swap(h_next);
  }
  output_row(h, out);
}

void RecurrentModel::logits_all(std::span<const std::int32_t> seq, int n_rows, double* out) const {
  if (n_rows > max_len_) throw std::invalid_argument("recurrent model: context too long");
  std::vector<double> h(static_cast<std::size_t>(dh_), 0.0);
  std::vector<double> h_next(static_cast<std::size_t>(dh_), 0.0);
  for (int c = 0; c < n_rows; ++c) {
    if (c > 0) {
      step_hidden(h, seq[static_cast<std::size_t>(c - 1)], h_next);
      h.swap(h_next);
    }
    output_row(h, std::span<double>(out + static_cast<std::size_t>(c) * static_cast<std::size_t>(vocab_),
                                    static_cast<std::size_t>(vocab_)));
  }
}

std::unique_ptr<ForwardTrace> RecurrentModel::forward_trace(std::span<const std::int32_t> seq,
                                                            int n_rows) const {
  if (n_rows > max_len_) throw std::invalid_argument("recurrent model: context too long");
  auto trace = std::make_unique<RecurrentTrace>();
  trace->init(n_rows, vocab_, dh_);
  for (int c = 0; c < n_rows; ++c) {
    std::span<double> h(trace->hidden.data() + static_cast<std::size_t>(c) * static_cast<std::size_t>(dh_),
                        static_cast<std::size_t>(dh_));
    if (c > 0) {
      std::span<const double> h_prev(
          trace->hidden.data() + static_cast<std::size_t>(c - 1) * static_cast<std::size_t>(dh_),
          static_cast<std::size_t>(dh_));
      step_hidden(h_prev, seq[static_cast<std::size_t>(c - 1)], h);
    }
    output_row(h, std::span<double>(trace->mutable_logits() +
                                        static_cast<std::size_t>(c) * static_cast<std::size_t>(vocab_),
                                    static_cast<std::size_t>(vocab_)));
  }
  return trace;
}

void RecurrentModel::backward_from_trace(const ForwardTrace& trace,
                                         std::span<const std::int32_t> seq, const double* dlogits,
                                         GradVector& sink) const {
  const auto& t = dynamic_cast<const RecurrentTrace&>(trace);
  if (sink.size() != theta_.size()) throw std::invalid_argument("recurrent model: sink size mismatch");
  const int rows = t.rows();
  const std::size_t v = static_cast<std::size_t>(vocab_);
  const std::size_t dh = static_cast<std::size_t>(dh_);
  const std::size_t de = static_cast<std::size_t>(de_);
  const double* wo = theta_.data() + off_wo();
  const double* wx = theta_.data() + off_wx();
  const double* wh = theta_.data() + off_wh();

  std::vector<double> dh_acc(static_cast<std::size_t>(rows) * dh, 0.0);

  // output layer: dWo, dbo, and dh contributions per row
  for (int c = 0; c < rows; ++c) {
    const double* drow = dlogits + static_cast<std::size_t>(c) * v;
    const double* h = t.hidden.data() + static_cast<std::size_t>(c) * dh;
    double* dhc = dh_acc.data() + static_cast<std::size_t>(c) * dh;
    for (std::size_t j = 0; j < v; ++j) {
      const double dj = drow[j];
      if (dj == 0.0) continue;
      sink[off_bo() + j] += dj;
      double* dwoj = &sink[off_wo() + j * dh];
      const double* woj = wo + j * dh;
      for (std::size_t r = 0; r < dh; ++r) {
        dwoj[r] += dj * h[r];
        dhc[r] += dj * woj[r];
      }
    }
  }

  // through time; h_0 is a constant zero state
  std::vector<double> du(dh, 0.0);
  for (int step = rows - 1; step >= 1; --step) {
    const double* h = t.hidden.data() + static_cast<std::size_t>(step) * dh;
    const double* h_prev = t.hidden.data() + static_cast<std::size_t>(step - 1) * dh;
    double* dhc = dh_acc.data() + static_cast<std::size_t>(step) * dh;
    double* dh_prev = dh_acc.data() + static_cast<std::size_t>(step - 1) * dh;
    const std::int32_t x = seq[static_cast<std::size_t>(step - 1)];
    const double* emb = theta_.data() + static_cast<std::size_t>(x) * de;
    bool any = false;
    for (std::size_t r = 0; r < dh; ++r) {
      du[r] = dhc[r] * (1.0 - h[r] * h[r]);
      any = any || du[r] != 0.0;
    }
    if (!any) continue;
    double* demb = &sink[static_cast<std::size_t>(x) * de];
    for (std::size_t r = 0; r < dh; ++r) {
      const double dur = du[r];
      if (dur == 0.0) continue;
      sink[off_bh() + r] += dur;
      double* dwxr = &sink[off_wx() + r * de];
      const double* wxr = wx + r * de;
      for (std::size_t c = 0; c < de; ++c) {
        dwxr[c] += dur * emb[c];
        demb[c] += dur * wxr[c];
      }
      double* dwhr = &sink[off_wh() + r * dh];
      const double* whr = wh + r * dh;
      for (std::size_t c = 0; c < dh; ++c) {
        dwhr[c] += dur * h_prev[c];
        dh_prev[c] += dur * whr[c];
      }
    }
  }
}

std::unique_ptr<DecodeState> RecurrentModel::initial_state() const {
  auto s = std::make_unique<RecurrentState>();
  s->h.assign(static_cast<std::size_t>(dh_), 0.0);
  return s;
}

void RecurrentModel::state_logits(const DecodeState& state, std::span<double> out) const {
  const auto& s = dynamic_cast<const RecurrentState&>(state);
  output_row(s.h, out);
}

void RecurrentModel::advance_state(DecodeState& state, std::int32_t token) const {
  auto& s = dynamic_cast<RecurrentState&>(state);
  std::vector<double> h_next(static_cast<std::size_t>(dh_), 0.0);
  step_hidden(s.h, token, h_next);
  s.h.swap(h_next);
}

}  // namespace earm
