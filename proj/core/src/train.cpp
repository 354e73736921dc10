#include "earm/train.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <stdexcept>

#include "earm/numerics.hpp"
#include "earm/parallel.hpp"
#include "json.hpp"

namespace earm {

double ScheduledSamplingConfig::p_at(int epoch, int epochs) const {
  if (kind == Kind::off) return 0.0;
  if (epochs <= 1) return p_end;
  const double frac = static_cast<double>(epoch) / static_cast<double>(epochs - 1);
  return p_start + (p_end - p_start) * frac;
}

void TrainConfig::validate() const {
  if (epochs < 0) throw std::invalid_argument("train config: negative epoch count");
  if (!(learning_rate > 0.0)) throw std::invalid_argument("train config: learning rate must be positive");
  if (!(label_smoothing >= 0.0 && label_smoothing < 1.0))
    throw std::invalid_argument("train config: label smoothing must lie in [0, 1)");
  if (scheduled_sampling.kind != ScheduledSamplingConfig::Kind::off) {
    if (scheduled_sampling.p_start < 0.0 || scheduled_sampling.p_start > 1.0 ||
        scheduled_sampling.p_end < 0.0 || scheduled_sampling.p_end > 1.0)
      throw std::invalid_argument("train config: scheduled sampling probabilities must lie in [0, 1]");
  }
  if (max_tokens < 1) throw std::invalid_argument("train config: max_tokens must be positive");
  if (patience < 1) throw std::invalid_argument("train config: patience must be at least 1");
  earm.validate();
}

namespace {

const char* optimizer_name(OptimizerKind k) { return k == OptimizerKind::adam ? "adam" : "sgd"; }
OptimizerKind optimizer_from_name(const std::string& s) {
  if (s == "adam") return OptimizerKind::adam;
  if (s == "sgd") return OptimizerKind::sgd;
  throw std::invalid_argument("unknown optimizer: " + s);
}

std::string fmt_double(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

}  // namespace

std::string TrainConfig::to_json_string(int indent) const {
  nlohmann::json j;
  j["epochs"] = epochs;
  j["learning_rate"] = learning_rate;
  j["optimizer"] = {{"kind", optimizer_name(optimizer.kind)},
                    {"beta1", optimizer.beta1},
                    {"beta2", optimizer.beta2},
                    {"eps", optimizer.eps}};
  j["label_smoothing"] = label_smoothing;
  if (scheduled_sampling.kind == ScheduledSamplingConfig::Kind::off) {
    j["scheduled_sampling"] = {{"kind", "off"}};
  } else {
    j["scheduled_sampling"] = {{"kind", "linear"},
                               {"p_start", scheduled_sampling.p_start},
                               {"p_end", scheduled_sampling.p_end}};
  }
  nlohmann::json e;
  e["lambda"] = earm.lambda;
  e["detach_horizon"] = earm.detach_horizon;
  e["ema_decay"] = earm.ema_decay;
  if (earm.weight_clip)
    e["weight_clip"] = *earm.weight_clip;
  else
    e["weight_clip"] = nullptr;
  e["start_epoch"] = earm.start_epoch;
  e["gen_length"] = earm.gen_length;
  j["earm"] = e;
  j["earm_only_after_start"] = earm_only_after_start;
  j["max_tokens"] = max_tokens;
  j["patience"] = patience;
  j["seed"] = seed;
  j["threads"] = threads;
  j["emit_step_diagnostics"] = emit_step_diagnostics;
  return j.dump(indent);
}

TrainConfig TrainConfig::from_json_string(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  TrainConfig c;
  c.epochs = j.value("epochs", c.epochs);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  if (j.contains("optimizer")) {
    const auto& o = j["optimizer"];
    c.optimizer.kind = optimizer_from_name(o.value("kind", std::string("adam")));
    c.optimizer.beta1 = o.value("beta1", c.optimizer.beta1);
    c.optimizer.beta2 = o.value("beta2", c.optimizer.beta2);
    c.optimizer.eps = o.value("eps", c.optimizer.eps);
  }
  c.label_smoothing = j.value("label_smoothing", c.label_smoothing);
  if (j.contains("scheduled_sampling")) {
    const auto& s = j["scheduled_sampling"];
    const std::string kind = s.value("kind", std::string("off"));
    if (kind == "off") {
      c.scheduled_sampling.kind = ScheduledSamplingConfig::Kind::off;
    } else if (kind == "linear") {
      c.scheduled_sampling.kind = ScheduledSamplingConfig::Kind::linear;
      c.scheduled_sampling.p_start = s.value("p_start", c.scheduled_sampling.p_start);
      c.scheduled_sampling.p_end = s.value("p_end", c.scheduled_sampling.p_end);
    } else {
      throw std::invalid_argument("unknown scheduled sampling kind: " + kind);
    }
  }
  if (j.contains("earm")) {
    const auto& e = j["earm"];
    c.earm.lambda = e.value("lambda", c.earm.lambda);
    c.earm.detach_horizon = e.value("detach_horizon", c.earm.detach_horizon);
    c.earm.ema_decay = e.value("ema_decay", c.earm.ema_decay);
    if (e.contains("weight_clip")) {
      if (e["weight_clip"].is_null())
        c.earm.weight_clip.reset();
      else
        c.earm.weight_clip = e["weight_clip"].get<double>();
    }
    c.earm.start_epoch = e.value("start_epoch", c.earm.start_epoch);
    c.earm.gen_length = e.value("gen_length", c.earm.gen_length);
  }
  c.earm_only_after_start = j.value("earm_only_after_start", c.earm_only_after_start);
  c.max_tokens = j.value("max_tokens", c.max_tokens);
  c.patience = j.value("patience", c.patience);
  c.seed = j.value("seed", c.seed);
  c.threads = j.value("threads", c.threads);
  c.emit_step_diagnostics = j.value("emit_step_diagnostics", c.emit_step_diagnostics);
  c.validate();
  return c;
}

std::string TrainLog::to_csv(bool include_seconds) const {
  std::ostringstream os;
  os << "epoch,train_ce,valid_ce,valid_ppl,earm_active,mean_w,pos_norm,neg_norm";
  if (include_seconds) os << ",seconds";
  os << '\n';
  for (const auto& r : epochs) {
    os << r.epoch << ',' << fmt_double(r.train_ce) << ',' << fmt_double(r.valid_ce) << ','
       << fmt_double(r.valid_ppl) << ',' << (r.earm_active ? 1 : 0) << ',' << fmt_double(r.mean_w)
       << ',' << fmt_double(r.pos_norm) << ',' << fmt_double(r.neg_norm);
    if (include_seconds) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.3f", r.seconds);
      os << ',' << buf;
    }
    os << '\n';
  }
  return os.str();
}

CeResult ce_step(const ArModel& model, std::span<const TokenSeq> inputs,
                 std::span<const TokenSeq> targets, double smoothing, int threads) {
  if (inputs.size() != targets.size())
    throw std::invalid_argument("ce_step: input and target batches differ in size");
  if (!(smoothing >= 0.0 && smoothing < 1.0))
    throw std::invalid_argument("ce_step: smoothing must lie in [0, 1)");
  std::size_t total_tokens = 0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (inputs[i].size() != targets[i].size())
      throw std::invalid_argument("ce_step: input and target lengths differ");
    total_tokens += targets[i].size();
  }
  CeResult result;
  result.grad = GradVector(model.param_count());
  if (total_tokens == 0) return result;

  const int v = model.vocab_size();
  const std::size_t vv = static_cast<std::size_t>(v);
  const double inv_n = 1.0 / static_cast<double>(total_tokens);
  const double off_target = smoothing / static_cast<double>(v);

  std::vector<double> losses(static_cast<std::size_t>(std::max(threads, 1)), 0.0);
  parallel_grad_accumulate(
      inputs.size(), threads, result.grad,
      [&](int worker, std::size_t lo, std::size_t hi, GradVector& sink) {
        std::vector<double> dlogits;
        std::vector<double> probs(vv);
        double loss = 0.0;
        for (std::size_t i = lo; i < hi; ++i) {
          const auto& in = inputs[i];
          const auto& tgt = targets[i];
          const int len = static_cast<int>(in.size());
          if (len == 0) continue;
          auto trace = model.forward_trace(in, len);
          dlogits.assign(static_cast<std::size_t>(len) * vv, 0.0);
          for (int t = 0; t < len; ++t) {
            std::span<const double> row = trace->logits_row(t);
            const double lse = log_sum_exp(row);
            const std::int32_t gold = tgt[static_cast<std::size_t>(t)];
            // smoothed NLL: (1-s) on the gold token, s spread over the vocabulary
            double row_loss = -(1.0 - smoothing) * (row[static_cast<std::size_t>(gold)] - lse);
            std::copy(row.begin(), row.end(), probs.begin());
            softmax_inplace(probs);
            double* drow = dlogits.data() + static_cast<std::size_t>(t) * vv;
            for (std::size_t jj = 0; jj < vv; ++jj) {
              if (smoothing > 0.0) row_loss += -off_target * (row[jj] - lse);
              drow[jj] = inv_n * (probs[jj] - off_target);
            }
            drow[static_cast<std::size_t>(gold)] -= inv_n * (1.0 - smoothing);
            loss += row_loss;
          }
          model.backward_from_trace(*trace, in, dlogits.data(), sink);
        }
        losses[static_cast<std::size_t>(worker)] += loss;
      });
  double loss = 0.0;
  for (double l : losses) loss += l;
  result.loss = loss * inv_n;
  if (!std::isfinite(result.loss)) throw std::runtime_error("ce_step: non-finite loss");
  return result;
}

CeResult ce_step(const ArModel& model, std::span<const TokenSeq> batch, double smoothing,
                 int threads) {
  return ce_step(model, batch, batch, smoothing, threads);
}

std::vector<TokenSeq> scheduled_sampling_batch(const ArModel& model,
                                               std::span<const TokenSeq> batch, double p_replace,
                                               CounterRng rng) {
  if (!(p_replace >= 0.0 && p_replace <= 1.0))
    throw std::invalid_argument("scheduled_sampling_batch: p_replace must lie in [0, 1]");
  std::vector<TokenSeq> out(batch.begin(), batch.end());
  if (p_replace == 0.0) return out;
  const std::size_t vv = static_cast<std::size_t>(model.vocab_size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const auto& gold = batch[i];
    const int len = static_cast<int>(gold.size());
    if (len <= 1) continue;
    CounterRng seq_rng = rng.derive(i);
    // first pass: greedy predictions on the gold prefix
    std::vector<double> rows(static_cast<std::size_t>(len) * vv);
    model.logits_all(gold, len, rows.data());
    for (int t = 1; t < len; ++t) {
      if (seq_rng.next_unit() >= p_replace) continue;
      const double* row = rows.data() + static_cast<std::size_t>(t) * vv;
      int best = 0;
      for (std::size_t j = 1; j < vv; ++j)
        if (row[j] > row[static_cast<std::size_t>(best)]) best = static_cast<int>(j);
      out[i][static_cast<std::size_t>(t)] = best;
    }
  }
  return out;
}

double mean_nll(const ArModel& model, std::span<const TokenSeq> seqs, int threads) {
  std::size_t total_tokens = 0;
  for (const auto& s : seqs) total_tokens += s.size();
  if (total_tokens == 0) throw std::invalid_argument("mean_nll: no tokens");
  std::vector<double> sums(static_cast<std::size_t>(std::max(threads, 1)), 0.0);
  parallel_chunks(seqs.size(), threads, [&](int worker, std::size_t lo, std::size_t hi) {
    double acc = 0.0;
    for (std::size_t i = lo; i < hi; ++i)
      acc -= prefix_log_prob(model, seqs[i], static_cast<int>(seqs[i].size()));
    sums[static_cast<std::size_t>(worker)] += acc;
  });
  double total = 0.0;
  for (double s : sums) total += s;
  return total / static_cast<double>(total_tokens);
}

namespace {

void optimizer_update(std::span<double> params, const GradVector& grad, const TrainConfig& cfg,
                      TrainCheckpointData& state) {
  if (cfg.optimizer.kind == OptimizerKind::sgd) {
    for (std::size_t i = 0; i < params.size(); ++i) params[i] -= cfg.learning_rate * grad[i];
    return;
  }
  const double b1 = cfg.optimizer.beta1;
  const double b2 = cfg.optimizer.beta2;
  state.adam_t += 1;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.adam_t));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.adam_t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    state.adam_m[i] = b1 * state.adam_m[i] + (1.0 - b1) * grad[i];
    state.adam_v[i] = b2 * state.adam_v[i] + (1.0 - b2) * grad[i] * grad[i];
    const double mhat = state.adam_m[i] / c1;
    const double vhat = state.adam_v[i] / c2;
    params[i] -= cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.optimizer.eps);
  }
}

}  // namespace

TrainLog train(ArModel& model, const Corpus& corpus, const TrainConfig& config, TrainHooks* hooks,
               TrainCheckpointData* state) {
  config.validate();
  corpus.validate();
  if (corpus.vocab.size() != model.vocab_size())
    throw std::invalid_argument("train: corpus and model vocabulary sizes differ");

  const std::vector<TokenSeq> valid_seqs = corpus.split_sequences(Split::valid);
  TrainLog log;
  if (config.epochs == 0) return log;
  if (corpus.count(Split::train) == 0) throw std::invalid_argument("train: empty train split");
  if (valid_seqs.empty()) throw std::invalid_argument("train: empty valid split");

  int data_len = 0;
  for (const auto& s : corpus.sequences) data_len = std::max(data_len, static_cast<int>(s.size()));
  const int gen_len = config.earm.gen_length > 0 ? config.earm.gen_length : data_len;
  if (gen_len > model.max_seq_length())
    throw std::invalid_argument("train: negative sample length exceeds the model's max length");
  const int kmax = std::min(data_len, gen_len);

  TrainCheckpointData local;
  TrainCheckpointData& st = state ? *state : local;
  const bool resuming = st.next_epoch > 0;
  if (!resuming) {
    st.adam_m.assign(model.param_count(), 0.0);
    st.adam_v.assign(model.param_count(), 0.0);
    st.adam_t = 0;
    st.ema_log.assign(static_cast<std::size_t>(kmax), 0.0);
    st.ema_init.assign(static_cast<std::size_t>(kmax), 0);
    st.best_valid_ce = std::numeric_limits<double>::infinity();
    st.best_epoch = -1;
    st.epochs_since_best = 0;
    st.best_params.assign(model.params().begin(), model.params().end());
    st.initial_valid_ce = mean_nll(model, valid_seqs, config.threads);
  }
  EmaState ema(kmax);
  ema.restore(st.ema_log, st.ema_init);

  BatchIter batches(corpus, Split::train, config.max_tokens, config.seed);
  const CounterRng run_rng(config.seed);
  std::size_t global_step = 0;  // reproducible resumes re-derive per-(epoch, step) streams

  for (int epoch = st.next_epoch; epoch < config.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const bool earm_active = epoch >= config.earm.start_epoch;
    const double p_replace = config.scheduled_sampling.p_at(epoch, config.epochs);

    batches.begin_epoch(static_cast<std::uint64_t>(epoch));
    double loss_weighted = 0.0;
    std::size_t loss_tokens = 0;
    double mean_w_acc = 0.0, pos_norm_acc = 0.0, neg_norm_acc = 0.0;
    std::size_t earm_steps = 0;
    std::size_t step = 0;

    while (auto batch_idx = batches.next()) {
      std::vector<TokenSeq> batch;
      batch.reserve(batch_idx->size());
      std::size_t batch_tokens = 0;
      for (std::size_t idx : *batch_idx) {
        batch.push_back(corpus.sequences[idx]);
        batch_tokens += batch.back().size();
      }
      const CounterRng step_rng =
          run_rng.derive(stream_tag::scheduled_sampling).derive(static_cast<std::uint64_t>(epoch)).derive(step);

      CeResult ce;
      if (p_replace > 0.0) {
        const std::vector<TokenSeq> mixed =
            scheduled_sampling_batch(model, batch, p_replace, step_rng);
        ce = ce_step(model, mixed, batch, config.label_smoothing, config.threads);
      } else {
        ce = ce_step(model, batch, config.label_smoothing, config.threads);
      }
      loss_weighted += ce.loss * static_cast<double>(batch_tokens);
      loss_tokens += batch_tokens;

      GradVector grad = std::move(ce.grad);
      if (earm_active) {
        StepOptions opts;
        opts.per_k_norms = config.emit_step_diagnostics;
        opts.threads = config.threads;
        const CounterRng earm_rng =
            run_rng.derive(stream_tag::negative).derive(static_cast<std::uint64_t>(epoch)).derive(step);
        PhaseGrad pg = earm_step_gradient(model, batch, ema, config.earm, earm_rng, opts);
        log.negative_batches += 1;
        if (config.earm_only_after_start)
          grad = std::move(pg.combined);
        else
          grad += pg.combined;
        mean_w_acc += pg.mean_weight();
        pos_norm_acc += pg.positive.l2_norm();
        neg_norm_acc += pg.negative.l2_norm();
        earm_steps += 1;
        if (hooks && hooks->on_step_diag)
          for (const auto& d : pg.per_k) hooks->on_step_diag({global_step, d});
      }
      optimizer_update(model.params(), grad, config, st);
      ++step;
      ++global_step;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_ce = loss_tokens > 0 ? loss_weighted / static_cast<double>(loss_tokens) : 0.0;
    rec.valid_ce = mean_nll(model, valid_seqs, config.threads);
    rec.valid_ppl = std::exp(rec.valid_ce);
    rec.earm_active = earm_active;
    if (earm_steps > 0) {
      rec.mean_w = mean_w_acc / static_cast<double>(earm_steps);
      rec.pos_norm = pos_norm_acc / static_cast<double>(earm_steps);
      rec.neg_norm = neg_norm_acc / static_cast<double>(earm_steps);
    }
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    log.epochs.push_back(rec);

    if (rec.valid_ce < st.best_valid_ce) {
      st.best_valid_ce = rec.valid_ce;
      st.best_epoch = epoch;
      st.epochs_since_best = 0;
      st.best_params.assign(model.params().begin(), model.params().end());
    } else {
      st.epochs_since_best += 1;
    }
    st.next_epoch = epoch + 1;
    st.ema_log.assign(ema.raw_log_values().begin(), ema.raw_log_values().end());
    st.ema_init.assign(ema.raw_init_flags().begin(), ema.raw_init_flags().end());
    if (hooks && hooks->on_epoch) hooks->on_epoch(rec, st, model);

    if (rec.valid_ce > 10.0 * st.initial_valid_ce) {
      log.best_epoch = st.best_epoch;
      log.best_valid_ce = st.best_valid_ce;
      throw TrainDivergenceError("train: diverged at epoch " + std::to_string(epoch) +
                                     " (valid CE " + std::to_string(rec.valid_ce) + " vs initial " +
                                     std::to_string(st.initial_valid_ce) + ")",
                                 log);
    }
    if (st.epochs_since_best >= config.patience) break;
  }

  log.best_epoch = st.best_epoch;
  log.best_valid_ce = st.best_valid_ce;
  // leave the model at the best-validation parameters
  std::copy(st.best_params.begin(), st.best_params.end(), model.params().begin());
  return log;
}

}  // namespace earm
