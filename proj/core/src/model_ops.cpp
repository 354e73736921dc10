#include <cmath>
#include <stdexcept>

#include "earm/model.hpp"
#include "earm/numerics.hpp"

namespace earm {

std::span<const double> ForwardTrace::logits_row(int c) const {
  return std::span<const double>(logits_.data() + static_cast<std::size_t>(c) * static_cast<std::size_t>(vocab_),
                                 static_cast<std::size_t>(vocab_));
}

void ArModel::check_context(std::span<const std::int32_t> context) const {
  if (static_cast<int>(context.size()) >= max_seq_length())
    throw std::invalid_argument("context too long: " + std::to_string(context.size()) +
                                " tokens, max context is " + std::to_string(max_seq_length() - 1));
}

void ArModel::logits_all(std::span<const std::int32_t> seq, int n_rows, double* out) const {
  const std::size_t v = static_cast<std::size_t>(vocab_size());
  for (int c = 0; c < n_rows; ++c)
    logits(seq.subspan(0, static_cast<std::size_t>(c)),
           std::span<double>(out + static_cast<std::size_t>(c) * v, v));
}

void ArModel::accumulate_logits_grad(std::span<const std::int32_t> seq, int n_rows,
                                     const double* dlogits, GradVector& sink) const {
  auto trace = forward_trace(seq, n_rows);
  backward_from_trace(*trace, seq, dlogits, sink);
}

std::vector<double> logits_of(const ArModel& model, std::span<const std::int32_t> context) {
  std::vector<double> out(static_cast<std::size_t>(model.vocab_size()));
  model.logits(context, out);
  return out;
}

std::vector<double> conditional_distribution(const ArModel& model,
                                             std::span<const std::int32_t> context) {
  std::vector<double> out = logits_of(model, context);
  softmax_inplace(out);
  return out;
}

double prefix_log_prob(const ArModel& model, std::span<const std::int32_t> seq, int prefix_len) {
  if (prefix_len < 0 || prefix_len > static_cast<int>(seq.size()))
    throw std::invalid_argument("prefix_log_prob: prefix length out of range");
  if (prefix_len == 0) return 0.0;
  const std::size_t v = static_cast<std::size_t>(model.vocab_size());
  std::vector<double> rows(static_cast<std::size_t>(prefix_len) * v);
  model.logits_all(seq, prefix_len, rows.data());
  double lp = 0.0;
  for (int i = 0; i < prefix_len; ++i) {
    std::span<const double> row(rows.data() + static_cast<std::size_t>(i) * v, v);
    lp += row[static_cast<std::size_t>(seq[static_cast<std::size_t>(i)])] - log_sum_exp(row);
  }
  return lp;
}

TokenSeq sample_ancestral(const ArModel& model, int length, CounterRng rng) {
  if (length < 1) throw std::invalid_argument("sample_ancestral: length must be at least 1");
  if (length > model.max_seq_length())
    throw std::invalid_argument("sample_ancestral: length exceeds the model's max sequence length");
  TokenSeq seq;
  seq.reserve(static_cast<std::size_t>(length));
  auto state = model.initial_state();
  std::vector<double> row(static_cast<std::size_t>(model.vocab_size()));
  for (int pos = 0; pos < length; ++pos) {
    model.state_logits(*state, row);
    for (double z : row)
      if (!std::isfinite(z))
        throw std::runtime_error("sample_ancestral: non-finite logit at position " +
                                 std::to_string(pos + 1));
    softmax_inplace(row);
    const std::int32_t t = static_cast<std::int32_t>(rng.sample_categorical(row));
    seq.push_back(t);
    if (pos + 1 < length) model.advance_state(*state, t);
  }
  return seq;
}

void accumulate_weighted_logprob_grad(const ArModel& model, std::span<const std::int32_t> seq,
                                      int begin, int end, std::span<const double> weights,
                                      GradVector& sink) {
  if (begin < 0 || end < begin || end > static_cast<int>(seq.size()))
    throw std::invalid_argument("accumulate_weighted_logprob_grad: position range out of bounds");
  if (static_cast<int>(weights.size()) != end - begin)
    throw std::invalid_argument("accumulate_weighted_logprob_grad: weight count mismatch");
  if (begin == end) return;
  for (double w : weights)
    if (!std::isfinite(w))
      throw std::invalid_argument("accumulate_weighted_logprob_grad: non-finite weight");
  const std::size_t v = static_cast<std::size_t>(model.vocab_size());
  const int n_rows = end;
  auto trace = model.forward_trace(seq, n_rows);
  std::vector<double> dlogits(static_cast<std::size_t>(n_rows) * v, 0.0);
  std::vector<double> probs(v);
  for (int i = begin; i < end; ++i) {
    const double w = weights[static_cast<std::size_t>(i - begin)];
    if (w == 0.0) continue;
    std::span<const double> row = trace->logits_row(i);
    std::copy(row.begin(), row.end(), probs.begin());
    softmax_inplace(probs);
    double* drow = dlogits.data() + static_cast<std::size_t>(i) * v;
    // d log softmax(row)[target] / d row = onehot(target) - softmax(row)
    for (std::size_t j = 0; j < v; ++j) drow[j] -= w * probs[j];
    drow[static_cast<std::size_t>(seq[static_cast<std::size_t>(i)])] += w;
  }
  model.backward_from_trace(*trace, seq, dlogits.data(), sink);
}

void accumulate_weighted_logit_grad(const ArModel& model, std::span<const std::int32_t> context,
                                    int token, double weight, GradVector& sink) {
  if (token < 0 || token >= model.vocab_size())
    throw std::invalid_argument("accumulate_weighted_logit_grad: token out of range");
  if (!std::isfinite(weight))
    throw std::invalid_argument("accumulate_weighted_logit_grad: non-finite weight");
  if (weight == 0.0) return;
  const std::size_t v = static_cast<std::size_t>(model.vocab_size());
  const int n_rows = static_cast<int>(context.size()) + 1;
  std::vector<double> dlogits(static_cast<std::size_t>(n_rows) * v, 0.0);
  dlogits[static_cast<std::size_t>(n_rows - 1) * v + static_cast<std::size_t>(token)] = -weight;
  model.accumulate_logits_grad(context, n_rows, dlogits.data(), sink);
}

ScalarFunctional logprob_functional(TokenSeq seq, int begin, int end, std::vector<double> weights) {
  ScalarFunctional f;
  f.name = "weighted_logprob";
  f.value = [seq, begin, end, weights](const ArModel& m) {
    const std::size_t v = static_cast<std::size_t>(m.vocab_size());
    std::vector<double> rows(static_cast<std::size_t>(end) * v);
    m.logits_all(seq, end, rows.data());
    double total = 0.0;
    for (int i = begin; i < end; ++i) {
      std::span<const double> row(rows.data() + static_cast<std::size_t>(i) * v, v);
      total += weights[static_cast<std::size_t>(i - begin)] *
               (row[static_cast<std::size_t>(seq[static_cast<std::size_t>(i)])] - log_sum_exp(row));
    }
    return total;
  };
  f.grad = [seq, begin, end, weights](const ArModel& m, GradVector& g) {
    accumulate_weighted_logprob_grad(m, seq, begin, end, weights, g);
  };
  return f;
}

ScalarFunctional logit_functional(TokenSeq context, int token, double weight) {
  ScalarFunctional f;
  f.name = "weighted_negated_logit";
  f.value = [context, token, weight](const ArModel& m) {
    return weight * -logits_of(m, context)[static_cast<std::size_t>(token)];
  };
  f.grad = [context, token, weight](const ArModel& m, GradVector& g) {
    accumulate_weighted_logit_grad(m, context, token, weight, g);
  };
  return f;
}

ScalarFunctional compose_functionals(std::string name, std::vector<ScalarFunctional> parts) {
  ScalarFunctional f;
  f.name = std::move(name);
  f.value = [parts](const ArModel& m) {
    double total = 0.0;
    for (const auto& p : parts) total += p.value(m);
    return total;
  };
  f.grad = [parts](const ArModel& m, GradVector& g) {
    for (const auto& p : parts) p.grad(m, g);
  };
  return f;
}

double finite_diff_check(const ArModel& model, const ScalarFunctional& functional, double eps) {
  if (eps < 1e-7 || eps > 1e-3)
    throw std::invalid_argument("finite_diff_check: eps must lie in [1e-7, 1e-3]");
  GradVector analytic(model.param_count());
  functional.grad(model, analytic);

  std::unique_ptr<ArModel> probe = model.clone();
  std::span<double> params = probe->params();
  double worst = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double saved = params[i];
    params[i] = saved + eps;
    const double up = functional.value(*probe);
    params[i] = saved - eps;
    const double down = functional.value(*probe);
    params[i] = saved;
    if (!std::isfinite(up) || !std::isfinite(down))
      throw std::runtime_error("finite_diff_check: non-finite functional value at parameter " +
                               std::to_string(i));
    const double fd = (up - down) / (2.0 * eps);
    const double err = std::abs(analytic[i] - fd) / std::max(1.0, std::abs(fd));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace earm
