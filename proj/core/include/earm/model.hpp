#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "earm/grad.hpp"
#include "earm/rng.hpp"
#include "earm/vocab.hpp"

namespace earm {

/// Incremental decoding state: consume one token at a time, read logits for
/// the next position. Cloneable so beam search can branch.
class DecodeState {
public:
  virtual ~DecodeState() = default;
  virtual std::unique_ptr<DecodeState> clone() const = 0;
};

/// Cached forward pass over the prefixes of one sequence. Row c of
/// logits_rows() holds the logits after consuming c tokens, so several
/// backward passes can reuse one forward.
class ForwardTrace {
public:
  virtual ~ForwardTrace() = default;
  int rows() const { return rows_; }
  /// rows() x V, row-major.
  std::span<const double> logits_rows() const { return logits_; }
  std::span<const double> logits_row(int c) const;

protected:
  int rows_ = 0;
  int vocab_ = 0;
  std::vector<double> logits_;
};

/// Autoregressive next-token model over a fixed alphabet, exposing raw
/// logits and a flat parameter vector with an additive gradient
/// accumulation contract. No energy interpretation lives here; this module
/// only knows about logits and conditionals.
class ArModel {
public:
  virtual ~ArModel() = default;

  virtual std::string_view realization() const = 0;
  virtual int vocab_size() const = 0;
  /// Longest admissible sequence; contexts must stay strictly shorter.
  virtual int max_seq_length() const = 0;
  virtual std::span<const double> params() const = 0;
  virtual std::span<double> params() = 0;
  std::size_t param_count() const { return params().size(); }
  virtual std::unique_ptr<ArModel> clone() const = 0;

  /// Unnormalized next-token scores; exactly V finite reals.
  virtual void logits(std::span<const std::int32_t> context, std::span<double> out) const = 0;

  /// Logits for every context length 0..n_rows-1 along `seq`
  /// (out is n_rows x V row-major). Realizations override this when one
  /// forward pass can serve all rows.
  virtual void logits_all(std::span<const std::int32_t> seq, int n_rows, double* out) const;

  virtual std::unique_ptr<ForwardTrace> forward_trace(std::span<const std::int32_t> seq,
                                                      int n_rows) const = 0;

  /// Reverse mode: sink += sum_c sum_j dlogits[c*V+j] * d logits_c[j] / d theta,
  /// where logits_c are the logits after c tokens of `seq`.
  virtual void backward_from_trace(const ForwardTrace& trace, std::span<const std::int32_t> seq,
                                   const double* dlogits, GradVector& sink) const = 0;

  /// One-shot trace + backward.
  void accumulate_logits_grad(std::span<const std::int32_t> seq, int n_rows, const double* dlogits,
                              GradVector& sink) const;

  virtual std::unique_ptr<DecodeState> initial_state() const = 0;
  virtual void state_logits(const DecodeState& state, std::span<double> out) const = 0;
  virtual void advance_state(DecodeState& state, std::int32_t token) const = 0;

protected:
  void check_context(std::span<const std::int32_t> context) const;
};

/// Lookup-table realization: one logit row per context, contexts shorter
/// than the order are front-padded with a dedicated empty bucket so lookup
/// is total. theta maps 1:1 onto table entries, which keeps every
/// per-parameter gradient exactly enumerable.
class TabularModel final : public ArModel {
public:
  /// Zero-initialized table (a uniform model). order defaults to full
  /// context (K-1) when passed as 0.
  TabularModel(int vocab_size, int max_seq_length, int order = 0);

  std::string_view realization() const override { return "tabular"; }
  int vocab_size() const override { return vocab_; }
  int max_seq_length() const override { return max_len_; }
  std::span<const double> params() const override { return table_; }
  std::span<double> params() override { return table_; }
  std::unique_ptr<ArModel> clone() const override;

  void logits(std::span<const std::int32_t> context, std::span<double> out) const override;
  std::unique_ptr<ForwardTrace> forward_trace(std::span<const std::int32_t> seq,
                                              int n_rows) const override;
  void backward_from_trace(const ForwardTrace& trace, std::span<const std::int32_t> seq,
                           const double* dlogits, GradVector& sink) const override;

  std::unique_ptr<DecodeState> initial_state() const override;
  void state_logits(const DecodeState& state, std::span<double> out) const override;
  void advance_state(DecodeState& state, std::int32_t token) const override;

  int order() const { return order_; }
  std::size_t row_count() const { return rows_; }
  /// Table row for a context (last `order` tokens, front-padded).
  std::size_t row_index(std::span<const std::int32_t> context) const;
  std::size_t param_index(std::size_t row, int token) const {
    return row * static_cast<std::size_t>(vocab_) + static_cast<std::size_t>(token);
  }
  /// Rows touched by conditionals at positions > `position` cannot include
  /// this one; used by detachment sparsity checks.
  double& entry(std::size_t row, int token) { return table_[param_index(row, token)]; }

private:
  int vocab_;
  int max_len_;
  int order_;
  std::size_t rows_;
  std::vector<double> table_;
};

/// Single tanh recurrence: h_t = tanh(Wx e(x_t) + Wh h_{t-1} + bh),
/// logits = Wo h + bo. The smallest realization that exercises genuine
/// backpropagation through time under the gradient contract.
class RecurrentModel final : public ArModel {
public:
  /// Parameters initialized uniform(-0.08, 0.08) from the stream
  /// seed/init.
  RecurrentModel(int vocab_size, int max_seq_length, int embed_dim, int hidden_dim,
                 std::uint64_t seed);

  std::string_view realization() const override { return "recurrent"; }
  int vocab_size() const override { return vocab_; }
  int max_seq_length() const override { return max_len_; }
  std::span<const double> params() const override { return theta_; }
  std::span<double> params() override { return theta_; }
  std::unique_ptr<ArModel> clone() const override;

  void logits(std::span<const std::int32_t> context, std::span<double> out) const override;
  void logits_all(std::span<const std::int32_t> seq, int n_rows, double* out) const override;
  std::unique_ptr<ForwardTrace> forward_trace(std::span<const std::int32_t> seq,
                                              int n_rows) const override;
  void backward_from_trace(const ForwardTrace& trace, std::span<const std::int32_t> seq,
                           const double* dlogits, GradVector& sink) const override;

  std::unique_ptr<DecodeState> initial_state() const override;
  void state_logits(const DecodeState& state, std::span<double> out) const override;
  void advance_state(DecodeState& state, std::int32_t token) const override;

  int embed_dim() const { return de_; }
  int hidden_dim() const { return dh_; }

  // Flat layout: [emb V*de][Wx dh*de][Wh dh*dh][bh dh][Wo V*dh][bo V]
  std::size_t off_emb() const { return 0; }
  std::size_t off_wx() const;
  std::size_t off_wh() const;
  std::size_t off_bh() const;
  std::size_t off_wo() const;
  std::size_t off_bo() const;

private:
  void step_hidden(std::span<const double> h_prev, std::int32_t token, std::span<double> h_out) const;
  void output_row(std::span<const double> h, std::span<double> out) const;

  int vocab_;
  int max_len_;
  int de_;
  int dh_;
  std::vector<double> theta_;
};

// ---- free operations over any realization ----

std::vector<double> logits_of(const ArModel& model, std::span<const std::int32_t> context);

/// Stable softmax of the logits row; positive entries summing to 1.
std::vector<double> conditional_distribution(const ArModel& model,
                                             std::span<const std::int32_t> context);

/// Sum of log q(seq[i] | seq[0..i)) for i < prefix_len; 0 for an empty
/// prefix.
double prefix_log_prob(const ArModel& model, std::span<const std::int32_t> seq, int prefix_len);

/// Ancestral draw of `length` tokens; deterministic per rng stream. Throws
/// std::runtime_error naming the position if a logit is non-finite.
TokenSeq sample_ancestral(const ArModel& model, int length, CounterRng rng);

/// sink += sum over i in [begin, end) of weights[i-begin] * d log q(seq[i]|seq[0..i)) / d theta.
/// Positions outside the range contribute nothing, which is exactly the
/// factor-level detachment used by the balanced objective downstream.
void accumulate_weighted_logprob_grad(const ArModel& model, std::span<const std::int32_t> seq,
                                      int begin, int end, std::span<const double> weights,
                                      GradVector& sink);

/// sink += weight * d(-logits(context)[token]) / d theta.
void accumulate_weighted_logit_grad(const ArModel& model, std::span<const std::int32_t> context,
                                    int token, double weight, GradVector& sink);

/// Scalar functional paired with its claimed analytic gradient, for
/// finite-difference validation.
struct ScalarFunctional {
  std::string name;
  std::function<double(const ArModel&)> value;
  std::function<void(const ArModel&, GradVector&)> grad;
};

ScalarFunctional logprob_functional(TokenSeq seq, int begin, int end, std::vector<double> weights);
ScalarFunctional logit_functional(TokenSeq context, int token, double weight);
ScalarFunctional compose_functionals(std::string name, std::vector<ScalarFunctional> parts);

/// Central differences against the claimed gradient:
/// max over parameters of |analytic - fd| / max(1, |fd|).
/// eps must lie in [1e-7, 1e-3]; throws on a non-finite functional value.
double finite_diff_check(const ArModel& model, const ScalarFunctional& functional, double eps);

}  // namespace earm
