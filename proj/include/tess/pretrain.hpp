#pragma once

#include <fstream>
#include <functional>

#include "tess/model.hpp"

namespace tess {

struct PretrainConfig {
  double mask_prob = 0.15;
  std::size_t max_ngram = 3;
  double p_mask = 0.8;    // corruption split: [MASK] / random id / keep
  double p_random = 0.1;
  double p_keep = 0.1;
  std::size_t batch_size = 2000;
  std::size_t micro_batch = 0;  // 0: no gradient accumulation
  long long total_steps = 120000;
  double peak_lr = 1e-4;
  double warmup_fraction = 0.1;
  double weight_decay = 0.01;
  std::uint64_t seed = 42;
  long long log_every = 10;
  long long checkpoint_every = 0;  // 0: final checkpoint only

  void validate() const {
    if (mask_prob < 0.0 || mask_prob > 1.0)
      throw ConfigError("pretrain: mask_prob must be in [0,1]");
    if (max_ngram < 1) throw ConfigError("pretrain: max_ngram must be >= 1");
    if (std::abs(p_mask + p_random + p_keep - 1.0) > 1e-9)
      throw ConfigError("pretrain: corruption split must sum to 1");
    if (batch_size < 1 || total_steps < 1)
      throw ConfigError("pretrain: batch_size and total_steps must be >= 1");
    if (micro_batch > batch_size)
      throw ConfigError("pretrain: micro_batch must not exceed batch_size");
  }

  nlohmann::json to_json() const {
    return {{"mask_prob", mask_prob},       {"max_ngram", max_ngram},
            {"p_mask", p_mask},             {"p_random", p_random},
            {"p_keep", p_keep},             {"batch_size", batch_size},
            {"micro_batch", micro_batch},   {"total_steps", total_steps},
            {"peak_lr", peak_lr},           {"warmup_fraction", warmup_fraction},
            {"weight_decay", weight_decay}, {"seed", seed},
            {"log_every", log_every},       {"checkpoint_every", checkpoint_every}};
  }

  static PretrainConfig from_json(const nlohmann::json& j) {
    PretrainConfig c;
    c.mask_prob = j.value("mask_prob", c.mask_prob);
    c.max_ngram = j.value("max_ngram", c.max_ngram);
    c.p_mask = j.value("p_mask", c.p_mask);
    c.p_random = j.value("p_random", c.p_random);
    c.p_keep = j.value("p_keep", c.p_keep);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.micro_batch = j.value("micro_batch", c.micro_batch);
    c.total_steps = j.value("total_steps", c.total_steps);
    c.peak_lr = j.value("peak_lr", c.peak_lr);
    c.warmup_fraction = j.value("warmup_fraction", c.warmup_fraction);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.seed = j.value("seed", c.seed);
    c.log_every = j.value("log_every", c.log_every);
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    c.validate();
    return c;
  }
};

constexpr int kIgnoreLabel = -100;

// One corrupted sequence plus MLM labels (kIgnoreLabel off the selection).
struct MaskedRow {
  std::vector<int> input_ids;
  std::vector<int> labels;
  std::vector<int> attention_mask;
  std::vector<int> segment_ids;
};

// Span-based masking: sample span lengths uniform on [1, max_ngram] and
// starts among still-eligible positions until round(mask_prob * eligible)
// positions are selected, trimming the final span. Selected positions become
// [MASK] / random non-special id / unchanged at p_mask / p_random / p_keep.
inline MaskedRow ngram_mask(const EncodedSequence& seq,
                            const PretrainConfig& cfg, std::size_t vocab_size,
                            Rng& rng) {
  MaskedRow row;
  row.input_ids = seq.token_ids;
  row.labels.assign(seq.token_ids.size(), kIgnoreLabel);
  row.attention_mask = seq.attention_mask;
  row.segment_ids = seq.segment_ids;

  std::vector<std::size_t> eligible;
  std::vector<char> can_select(seq.token_ids.size(), 0);
  for (std::size_t i = 0; i < seq.token_ids.size(); ++i)
    if (!seq.special_mask[i] && seq.attention_mask[i]) {
      eligible.push_back(i);
      can_select[i] = 1;
    }
  std::size_t target = static_cast<std::size_t>(
      std::llround(cfg.mask_prob * static_cast<double>(eligible.size())));
  if (target == 0 || eligible.empty()) return row;

  std::vector<char> selected(seq.token_ids.size(), 0);
  std::size_t n_selected = 0;
  std::uniform_int_distribution<std::size_t> span_dist(1, cfg.max_ngram);
  std::uniform_int_distribution<std::size_t> pos_dist(0, eligible.size() - 1);
  // Reject spans that would touch an already-selected run, so maximal runs
  // never exceed max_ngram. Near saturation that can leave unreachable
  // holes; after enough consecutive rejections fill left to right.
  std::size_t rejections = 0;
  const std::size_t rejection_budget = 100 + 10 * eligible.size();
  while (n_selected < target) {
    if (rejections > rejection_budget) {
      for (std::size_t p : eligible) {
        if (n_selected >= target) break;
        if (!selected[p]) {
          selected[p] = 1;
          ++n_selected;
        }
      }
      break;
    }
    std::size_t span = span_dist(rng);
    std::size_t start = eligible[pos_dist(rng)];
    if (selected[start] || (start > 0 && selected[start - 1])) {
      ++rejections;
      continue;
    }
    bool progressed = false;
    for (std::size_t k = 0; k < span && n_selected < target; ++k) {
      std::size_t p = start + k;
      if (p >= can_select.size() || !can_select[p] || selected[p]) break;
      if (p + 1 < selected.size() && selected[p + 1]) break;
      selected[p] = 1;
      ++n_selected;
      progressed = true;
    }
    rejections = progressed ? 0 : rejections + 1;
  }

  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<int> rand_id(
      kNumSpecials, static_cast<int>(vocab_size) - 1);
  for (std::size_t i = 0; i < selected.size(); ++i) {
    if (!selected[i]) continue;
    row.labels[i] = seq.token_ids[i];
    double r = u(rng);
    if (r < cfg.p_mask)
      row.input_ids[i] = kMaskId;
    else if (r < cfg.p_mask + cfg.p_random)
      row.input_ids[i] = rand_id(rng);
    // else: keep the original token
  }
  return row;
}

struct MaskedBatch {
  Batch inputs;
  std::vector<int> labels;  // [B*T], kIgnoreLabel where not selected
};

inline MaskedBatch collate_masked(const std::vector<EncodedSequence>& seqs,
                                  const PretrainConfig& cfg,
                                  std::size_t vocab_size, Rng& rng) {
  if (seqs.empty()) throw InputError("collate_masked: empty batch");
  MaskedBatch out;
  out.inputs.batch = seqs.size();
  out.inputs.seq_len = seqs[0].length();
  for (const auto& seq : seqs) {
    if (seq.length() != out.inputs.seq_len)
      throw InputError("collate_masked: ragged batch");
    MaskedRow row = ngram_mask(seq, cfg, vocab_size, rng);
    out.inputs.token_ids.insert(out.inputs.token_ids.end(),
                                row.input_ids.begin(), row.input_ids.end());
    out.inputs.attention_mask.insert(out.inputs.attention_mask.end(),
                                     row.attention_mask.begin(),
                                     row.attention_mask.end());
    out.inputs.segment_ids.insert(out.inputs.segment_ids.end(),
                                  row.segment_ids.begin(),
                                  row.segment_ids.end());
    out.inputs.special_mask.insert(out.inputs.special_mask.end(),
                                   seq.special_mask.begin(),
                                   seq.special_mask.end());
    out.labels.insert(out.labels.end(), row.labels.begin(), row.labels.end());
  }
  return out;
}

struct MlmLoss {
  Tensor loss;
  bool all_ignored = false;
};

inline MlmLoss mlm_loss(EncoderModel& model, const MaskedBatch& batch,
                        bool training = true) {
  Tensor hidden = model.forward(batch.inputs, training);
  Tensor logits = model.mlm_logits(hidden);
  std::size_t n = batch.inputs.batch * batch.inputs.seq_len;
  Tensor flat = reshape(logits, {n, model.config().vocab_size});
  MlmLoss out;
  out.loss = cross_entropy(flat, batch.labels, kIgnoreLabel, &out.all_ignored);
  return out;
}

// ---------------------------------------------------------------------------
// AdamW with decoupled weight decay; biases and layer-norm parameters are
// decay-exempt.

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

class AdamW {
 public:
  struct Slot {
    std::string name;
    Tensor param;
    std::vector<Real> m, v;
    bool decay = true;
  };

  AdamW(const std::vector<std::pair<std::string, Tensor>>& params,
        AdamWConfig cfg = {})
      : cfg_(cfg) {
    for (const auto& [name, t] : params) {
      Slot s;
      s.name = name;
      s.param = t;
      s.m.assign(t.size(), Real(0));
      s.v.assign(t.size(), Real(0));
      s.decay = !EncoderModel::is_decay_exempt(name);
      slots_.push_back(std::move(s));
    }
  }

  void step(double lr) {
    ++step_count_;
    double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_count_));
    double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_count_));
    for (auto& s : slots_) {
      const std::vector<Real>* grad =
          s.param.has_grad() ? &s.param.grad() : nullptr;
      if (grad && grad->size() != s.param.size())
        throw ShapeError("adamw: gradient shape mismatch for " + s.name);
      double wd = s.decay ? cfg_.weight_decay : 0.0;
      auto& data = s.param.data();
      for (std::size_t i = 0; i < data.size(); ++i) {
        double g = grad ? (*grad)[i] : 0.0;
        s.m[i] = Real(cfg_.beta1 * s.m[i] + (1.0 - cfg_.beta1) * g);
        s.v[i] = Real(cfg_.beta2 * s.v[i] + (1.0 - cfg_.beta2) * g * g);
        double mhat = s.m[i] / bc1;
        double vhat = s.v[i] / bc2;
        data[i] = Real(data[i] -
                       lr * (mhat / (std::sqrt(vhat) + cfg_.eps) +
                             wd * data[i]));
      }
    }
  }

  void zero_grad() {
    for (auto& s : slots_) s.param.zero_grad();
  }

  long long step_count() const { return step_count_; }
  void set_step_count(long long n) { step_count_ = n; }
  const AdamWConfig& config() const { return cfg_; }
  std::vector<Slot>& slots() { return slots_; }
  const std::vector<Slot>& slots() const { return slots_; }

 private:
  AdamWConfig cfg_;
  std::vector<Slot> slots_;
  long long step_count_ = 0;
};

// Linear warmup to peak_lr, then linear decay to zero at total_steps.
inline double lr_schedule(long long step, long long total_steps,
                          double warmup_fraction, double peak_lr) {
  if (step < 0 || step > total_steps)
    throw UsageError("lr_schedule: step out of [0, total_steps]");
  long long warmup = static_cast<long long>(
      std::llround(warmup_fraction * static_cast<double>(total_steps)));
  if (warmup > 0 && step <= warmup)
    return peak_lr * static_cast<double>(step) / static_cast<double>(warmup);
  if (total_steps == warmup) return 0.0;
  return peak_lr * static_cast<double>(total_steps - step) /
         static_cast<double>(total_steps - warmup);
}

inline double lr_schedule(long long step, const PretrainConfig& cfg) {
  return lr_schedule(step, cfg.total_steps, cfg.warmup_fraction, cfg.peak_lr);
}

struct LossLogEntry {
  long long step;
  double lr;
  double loss;
};

struct PretrainResult {
  std::vector<LossLogEntry> loss_log;
  double initial_loss = 0.0;
  double final_loss = 0.0;
};

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t step) {
  std::uint64_t x = seed ^ (step + 0x9e3779b97f4a7c15ULL);
  x ^= x >> 30;
  x *= 0xbf58476d1ce4e5b9ULL;
  x ^= x >> 27;
  x *= 0x94d049bb133111ebULL;
  x ^= x >> 31;
  return x;
}

// MLM training loop. Masking randomness is derived per step from the config
// seed, so restarting at any step reproduces the original run. Pure MLM: the
// model has no sentence-pair head and no NSP objective exists here.
inline PretrainResult pretrain_loop(
    EncoderModel& model, const std::vector<EncodedSequence>& corpus,
    const PretrainConfig& cfg, AdamW& optimizer, long long start_step = 0,
    const std::string& loss_csv_path = "",
    const std::function<void(long long)>& on_checkpoint = nullptr,
    long long end_step = 0) {
  cfg.validate();
  if (end_step <= 0 || end_step > cfg.total_steps) end_step = cfg.total_steps;
  if (corpus.empty()) throw InputError("pretrain_loop: empty corpus");

  // fixed shuffled order, derived from the seed
  std::vector<std::size_t> order(corpus.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng order_rng(mix_seed(cfg.seed, 0xC0FFEE));
  std::shuffle(order.begin(), order.end(), order_rng);

  std::ofstream csv;
  if (!loss_csv_path.empty()) {
    csv.open(loss_csv_path,
             start_step > 0 ? std::ios::app : std::ios::trunc);
    if (!csv) throw IoError("cannot write loss log: " + loss_csv_path);
    if (start_step == 0) csv << "step,lr,loss\n";
  }

  std::size_t micro = cfg.micro_batch ? cfg.micro_batch : cfg.batch_size;
  PretrainResult result;
  for (long long step = start_step; step < end_step; ++step) {
    Rng step_rng(mix_seed(cfg.seed, static_cast<std::uint64_t>(step)));
    double lr = lr_schedule(step + 1, cfg);
    optimizer.zero_grad();
    double step_loss = 0.0;
    std::size_t n_micro = (cfg.batch_size + micro - 1) / micro;
    std::size_t base = static_cast<std::size_t>(step) * cfg.batch_size;
    for (std::size_t mb = 0; mb < n_micro; ++mb) {
      std::size_t lo = mb * micro;
      std::size_t hi = std::min(lo + micro, cfg.batch_size);
      std::vector<EncodedSequence> seqs;
      seqs.reserve(hi - lo);
      for (std::size_t i = lo; i < hi; ++i)
        seqs.push_back(corpus[order[(base + i) % corpus.size()]]);
      MaskedBatch batch = collate_masked(seqs, cfg, model.config().vocab_size,
                                         step_rng);
      MlmLoss ml = mlm_loss(model, batch, /*training=*/true);
      double lv = ml.loss.item();
      if (!std::isfinite(lv))
        throw NumericError("non-finite MLM loss at step " +
                           std::to_string(step) + " (last finite step " +
                           std::to_string(step - 1) + ")");
      step_loss += lv * static_cast<double>(hi - lo) /
                   static_cast<double>(cfg.batch_size);
      if (!ml.all_ignored)
        backward(scale(ml.loss, Real(static_cast<double>(hi - lo) /
                                     static_cast<double>(cfg.batch_size))));
    }
    optimizer.step(lr);

    if (step == start_step) result.initial_loss = step_loss;
    result.final_loss = step_loss;
    if (cfg.log_every > 0 && (step + 1) % cfg.log_every == 0) {
      result.loss_log.push_back({step + 1, lr, step_loss});
      if (csv.is_open())
        csv << (step + 1) << ',' << lr << ',' << step_loss << '\n';
    }
    if (on_checkpoint && cfg.checkpoint_every > 0 &&
        (step + 1) % cfg.checkpoint_every == 0 && step + 1 < cfg.total_steps)
      on_checkpoint(step + 1);
  }
  if (csv.is_open()) csv.flush();
  if (on_checkpoint) on_checkpoint(end_step);
  return result;
}

}  // namespace tess
