#pragma once

#include <iomanip>
#include <numeric>
#include <sstream>

#include "tess/data_io.hpp"
#include "tess/pretrain.hpp"

namespace tess {

struct FinetuneConfig {
  double lr = 3e-5;
  std::size_t epochs = 3;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;
  std::size_t max_len = 128;

  void validate() const {
    if (lr <= 0.0) throw ConfigError("finetune: lr must be > 0");
    if (epochs < 1) throw ConfigError("finetune: epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("finetune: batch_size must be >= 1");
  }
};

struct SweepConfig {
  std::vector<std::size_t> sizes;
  std::vector<double> lrs = {1e-5, 3e-5, 5e-5};
  std::vector<std::size_t> epochs_grid = {1, 3, 5};
  std::vector<std::uint64_t> seeds = {0};
  bool stratified = true;
  std::size_t batch_size = 16;
  std::size_t max_len = 128;

  void validate(std::size_t dataset_size) const {
    if (sizes.empty() || lrs.empty() || epochs_grid.empty() || seeds.empty())
      throw ConfigError("sweep: sizes, lrs, epochs and seeds must be non-empty");
    for (std::size_t i = 1; i < sizes.size(); ++i)
      if (sizes[i] < sizes[i - 1])
        throw ConfigError("sweep: sizes must be ascending");
    if (sizes.back() > dataset_size)
      throw ConfigError("sweep: size " + std::to_string(sizes.back()) +
                        " exceeds dataset size " +
                        std::to_string(dataset_size));
  }
};

// ---------------------------------------------------------------------------
// Metrics

struct MetricSet {
  double accuracy = 0.0;
  std::vector<double> precision, recall, f1;  // per class
  double f1_macro = 0.0;
  double f1_weighted = 0.0;
  double f1_binary = 0.0;  // positive class (id 1); meaningful for binary tasks
};

enum class Averaging { Micro, Macro, Weighted, Binary };

inline MetricSet compute_metrics(const std::vector<int>& preds,
                                 const std::vector<int>& labels,
                                 std::size_t num_classes) {
  if (preds.size() != labels.size())
    throw InputError("metrics: predictions and labels differ in length");
  std::vector<long long> tp(num_classes, 0), fp(num_classes, 0),
      fn(num_classes, 0), support(num_classes, 0);
  long long correct = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    int p = preds[i], y = labels[i];
    if (p < 0 || y < 0 || static_cast<std::size_t>(p) >= num_classes ||
        static_cast<std::size_t>(y) >= num_classes)
      throw InputError("metrics: class id out of range");
    ++support[static_cast<std::size_t>(y)];
    if (p == y) {
      ++tp[static_cast<std::size_t>(p)];
      ++correct;
    } else {
      ++fp[static_cast<std::size_t>(p)];
      ++fn[static_cast<std::size_t>(y)];
    }
  }
  MetricSet m;
  m.accuracy = preds.empty() ? 0.0
                             : static_cast<double>(correct) /
                                   static_cast<double>(preds.size());
  m.precision.resize(num_classes);
  m.recall.resize(num_classes);
  m.f1.resize(num_classes);
  double f1_sum = 0.0, f1_wsum = 0.0;
  for (std::size_t c = 0; c < num_classes; ++c) {
    double denom_p = static_cast<double>(tp[c] + fp[c]);
    double denom_r = static_cast<double>(tp[c] + fn[c]);
    m.precision[c] = denom_p > 0 ? tp[c] / denom_p : 0.0;
    m.recall[c] = denom_r > 0 ? tp[c] / denom_r : 0.0;
    double pr = m.precision[c] + m.recall[c];
    m.f1[c] = pr > 0 ? 2.0 * m.precision[c] * m.recall[c] / pr : 0.0;
    f1_sum += m.f1[c];
    f1_wsum += m.f1[c] * static_cast<double>(support[c]);
  }
  m.f1_macro = num_classes ? f1_sum / static_cast<double>(num_classes) : 0.0;
  m.f1_weighted =
      preds.empty() ? 0.0 : f1_wsum / static_cast<double>(preds.size());
  m.f1_binary = num_classes > 1 ? m.f1[1] : 0.0;
  return m;
}

inline double f1_score(const std::vector<int>& preds,
                       const std::vector<int>& labels, Averaging avg,
                       std::size_t num_classes) {
  MetricSet m = compute_metrics(preds, labels, num_classes);
  switch (avg) {
    case Averaging::Macro: return m.f1_macro;
    case Averaging::Weighted: return m.f1_weighted;
    case Averaging::Binary: return m.f1_binary;
    case Averaging::Micro: {
      // single-label multi-class micro F1 equals accuracy
      return m.accuracy;
    }
  }
  return 0.0;
}

// ---------------------------------------------------------------------------
// Subsampling

inline std::size_t dataset_num_classes(const ClassificationDataset& data) {
  int mx = -1;
  for (const auto& ex : data) mx = std::max(mx, ex.label);
  return static_cast<std::size_t>(mx + 1);
}

// Without replacement; stratified allocation uses largest-remainder rounding
// of the full-set class frequencies.
inline ClassificationDataset subsample(const ClassificationDataset& data,
                                       std::size_t n, std::uint64_t seed,
                                       bool stratified) {
  if (n < 1 || n > data.size())
    throw InputError("subsample: n = " + std::to_string(n) +
                     " out of range [1," + std::to_string(data.size()) + "]");
  Rng rng(seed);
  std::vector<std::size_t> chosen;
  if (!stratified) {
    std::vector<std::size_t> idx(data.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    chosen.assign(idx.begin(), idx.begin() + static_cast<long>(n));
  } else {
    std::size_t k = dataset_num_classes(data);
    std::vector<std::vector<std::size_t>> by_class(k);
    for (std::size_t i = 0; i < data.size(); ++i)
      by_class[static_cast<std::size_t>(data[i].label)].push_back(i);
    // largest-remainder quotas
    std::vector<std::size_t> quota(k, 0);
    std::vector<std::pair<double, std::size_t>> rem;
    std::size_t assigned = 0;
    for (std::size_t c = 0; c < k; ++c) {
      double exact = static_cast<double>(n) *
                     static_cast<double>(by_class[c].size()) /
                     static_cast<double>(data.size());
      quota[c] = static_cast<std::size_t>(std::floor(exact));
      quota[c] = std::min(quota[c], by_class[c].size());
      assigned += quota[c];
      rem.push_back({exact - std::floor(exact), c});
    }
    std::stable_sort(rem.begin(), rem.end(), [](const auto& a, const auto& b) {
      return a.first > b.first;  // ties keep lower class id first
    });
    for (std::size_t r = 0; assigned < n; r = (r + 1) % rem.size()) {
      std::size_t c = rem[r].second;
      if (quota[c] < by_class[c].size()) {
        ++quota[c];
        ++assigned;
      }
    }
    for (std::size_t c = 0; c < k; ++c) {
      std::shuffle(by_class[c].begin(), by_class[c].end(), rng);
      chosen.insert(chosen.end(), by_class[c].begin(),
                    by_class[c].begin() + static_cast<long>(quota[c]));
    }
    std::sort(chosen.begin(), chosen.end());
  }
  ClassificationDataset out;
  out.reserve(n);
  for (std::size_t i : chosen) out.push_back(data[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Fine-tuning and evaluation

inline Batch encode_batch(const Vocabulary& vocab,
                          const ClassificationDataset& data, std::size_t lo,
                          std::size_t hi, std::size_t max_len,
                          std::vector<int>* labels = nullptr) {
  std::vector<EncodedSequence> seqs;
  for (std::size_t i = lo; i < hi; ++i) {
    seqs.push_back(encode_pair(vocab, data[i].text_a, data[i].text_b, max_len));
    if (labels) labels->push_back(data[i].label);
  }
  return Batch::from_sequences(seqs);
}

// Argmax over classes; ties break toward the lower class id.
inline std::vector<int> predict(EncoderModel& model, const Vocabulary& vocab,
                                const ClassificationDataset& data,
                                std::size_t max_len,
                                std::size_t batch_size = 32) {
  std::vector<int> preds;
  for (std::size_t lo = 0; lo < data.size(); lo += batch_size) {
    std::size_t hi = std::min(lo + batch_size, data.size());
    Batch batch = encode_batch(vocab, data, lo, hi, max_len);
    Tensor logits = model.classify_logits(model.forward(batch, false));
    std::size_t C = logits.dim(1);
    for (std::size_t b = 0; b < hi - lo; ++b) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < C; ++c)
        if (logits.data()[b * C + c] > logits.data()[b * C + best]) best = c;
      preds.push_back(static_cast<int>(best));
    }
  }
  return preds;
}

inline MetricSet evaluate(EncoderModel& model, const Vocabulary& vocab,
                          const ClassificationDataset& data,
                          std::size_t max_len) {
  if (!model.has_classifier())
    throw UsageError("evaluate: model has no classifier head");
  std::vector<int> labels;
  for (const auto& ex : data) labels.push_back(ex.label);
  std::vector<int> preds = predict(model, vocab, data, max_len);
  return compute_metrics(preds, labels, *model.config().num_classes);
}

// Full-model fine-tuning with a fresh seeded classifier head, AdamW at
// cfg.lr with linear decay to zero over the total step count.
inline void finetune(EncoderModel& model, const Vocabulary& vocab,
                     const ClassificationDataset& data,
                     std::size_t num_classes, const FinetuneConfig& cfg,
                     std::vector<double>* loss_log = nullptr) {
  cfg.validate();
  for (std::size_t i = 0; i < data.size(); ++i)
    if (data[i].label < 0 ||
        static_cast<std::size_t>(data[i].label) >= num_classes)
      throw InputError("finetune: label " + std::to_string(data[i].label) +
                       " out of range at record " + std::to_string(i));
  model.init_classifier(num_classes, cfg.seed);

  AdamWConfig opt_cfg;
  AdamW optimizer(model.named_parameters(), opt_cfg);

  std::size_t steps_per_epoch =
      (data.size() + cfg.batch_size - 1) / cfg.batch_size;
  long long total_steps =
      static_cast<long long>(cfg.epochs) * static_cast<long long>(steps_per_epoch);
  long long step = 0;
  std::vector<std::size_t> idx(data.size());
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng shuffle_rng(mix_seed(cfg.seed, epoch + 1));
    std::shuffle(idx.begin(), idx.end(), shuffle_rng);
    for (std::size_t lo = 0; lo < data.size(); lo += cfg.batch_size) {
      std::size_t hi = std::min(lo + cfg.batch_size, data.size());
      ClassificationDataset view;
      std::vector<int> labels;
      for (std::size_t i = lo; i < hi; ++i) view.push_back(data[idx[i]]);
      Batch batch = encode_batch(vocab, view, 0, view.size(), cfg.max_len,
                                 &labels);
      Tensor logits = model.classify_logits(model.forward(batch, true));
      Tensor loss = cross_entropy(logits, labels);
      double lv = loss.item();
      if (!std::isfinite(lv))
        throw NumericError("non-finite fine-tune loss at step " +
                           std::to_string(step));
      if (loss_log) loss_log->push_back(lv);
      optimizer.zero_grad();
      backward(loss);
      ++step;
      double lr = cfg.lr * static_cast<double>(total_steps - step + 1) /
                  static_cast<double>(total_steps);
      optimizer.step(lr);
    }
  }
}

// ---------------------------------------------------------------------------
// Few-shot sweep

struct SweepRow {
  std::size_t train_size = 0;
  double lr = 0.0;
  std::size_t epochs = 0;
  std::uint64_t seed = 0;
  std::string split = "eval";
  MetricSet metrics;
  bool failed = false;
  std::string error;
};

struct SweepReport {
  std::vector<SweepRow> rows;
  std::vector<SweepRow> best;  // one winner per size
  bool partial = false;
  std::vector<std::string> failures;
  bool binary_task = false;

  double selector(const MetricSet& m) const {
    return binary_task ? m.f1_binary : m.f1_macro;
  }
};

inline std::string format_double(double v) {
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}

inline std::string sweep_csv_header() {
  return "train_size,lr,epochs,seed,split,accuracy,f1_macro,f1_weighted,"
         "f1_binary";
}

inline std::string sweep_row_csv(const SweepRow& r) {
  std::ostringstream os;
  os << r.train_size << ',' << format_double(r.lr) << ',' << r.epochs << ','
     << r.seed << ',' << r.split << ',' << format_double(r.metrics.accuracy)
     << ',' << format_double(r.metrics.f1_macro) << ','
     << format_double(r.metrics.f1_weighted) << ','
     << format_double(r.metrics.f1_binary);
  return os.str();
}

inline std::uint64_t hash_parameters(const EncoderModel& model) {
  std::uint64_t h = 1469598103934665603ULL;  // FNV-1a
  for (const auto& [name, t] : model.named_parameters())
    for (Real v : t.data()) {
      float f = static_cast<float>(v);
      unsigned char bytes[4];
      std::memcpy(bytes, &f, 4);
      for (unsigned char b : bytes) {
        h ^= b;
        h *= 1099511628211ULL;
      }
    }
  return h;
}

// For every (size, lr, epochs, seed): subsample, fine-tune a copy of the base
// model, evaluate on the fixed eval split. Cells fail independently; failures
// are recorded and the report is marked partial.
inline SweepReport fewshot_sweep(const EncoderModel& base,
                                 const Vocabulary& vocab,
                                 const ClassificationDataset& train,
                                 const ClassificationDataset& eval_split,
                                 const SweepConfig& sweep) {
  sweep.validate(train.size());
  std::size_t num_classes = std::max(dataset_num_classes(train),
                                     dataset_num_classes(eval_split));
  SweepReport report;
  report.binary_task = num_classes == 2;

  std::uint64_t base_hash = hash_parameters(base);
  for (std::size_t size : sweep.sizes)
    for (double lr : sweep.lrs)
      for (std::size_t epochs : sweep.epochs_grid)
        for (std::uint64_t seed : sweep.seeds) {
          SweepRow row;
          row.train_size = size;
          row.lr = lr;
          row.epochs = epochs;
          row.seed = seed;
          try {
            EncoderModel cell(base.config(), 0);
            cell.copy_parameters_from(base);
            if (hash_parameters(cell) != base_hash)
              throw UsageError("sweep cell did not start from the base "
                               "checkpoint");
            ClassificationDataset subset =
                subsample(train, size, seed, sweep.stratified);
            FinetuneConfig cfg;
            cfg.lr = lr;
            cfg.epochs = epochs;
            cfg.batch_size = sweep.batch_size;
            cfg.seed = seed;
            cfg.max_len = sweep.max_len;
            finetune(cell, vocab, subset, num_classes, cfg);
            row.metrics = evaluate(cell, vocab, eval_split, sweep.max_len);
          } catch (const std::exception& e) {
            row.failed = true;
            row.error = e.what();
            report.partial = true;
            report.failures.push_back(
                "cell (size=" + std::to_string(size) +
                ", lr=" + format_double(lr) +
                ", epochs=" + std::to_string(epochs) +
                ", seed=" + std::to_string(seed) + "): " + e.what());
          }
          report.rows.push_back(std::move(row));
        }

  for (std::size_t size : sweep.sizes) {
    const SweepRow* winner = nullptr;
    for (const auto& r : report.rows)
      if (r.train_size == size && !r.failed &&
          (!winner ||
           report.selector(r.metrics) > report.selector(winner->metrics)))
        winner = &r;
    if (winner) report.best.push_back(*winner);
  }
  return report;
}

}  // namespace tess
