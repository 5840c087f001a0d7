#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cstdio>
#include <filesystem>

#include "doctest.h"
#include "tess/data_io.hpp"
#include "tess/pretrain.hpp"

using namespace tess;

namespace {

EncodedSequence make_sequence(std::size_t T, std::size_t vocab, Rng& rng,
                              std::size_t pad_tail = 0) {
  std::uniform_int_distribution<int> ids(kNumSpecials,
                                         static_cast<int>(vocab) - 1);
  EncodedSequence s;
  for (std::size_t t = 0; t < T; ++t) {
    bool special = t == 0 || t == T - pad_tail - 1;
    bool pad = t >= T - pad_tail;
    int id = pad ? kPadId : (t == 0 ? kClsId : (special ? kSepId : ids(rng)));
    s.token_ids.push_back(id);
    s.attention_mask.push_back(pad ? 0 : 1);
    s.segment_ids.push_back(0);
    s.special_mask.push_back((special || pad) ? 1 : 0);
  }
  return s;
}

ModelConfig tiny_config(std::size_t vocab, std::size_t t_max = 16) {
  ModelConfig cfg;
  cfg.vocab_size = vocab;
  cfg.embed_dim = 8;
  cfg.hidden_dim = 16;
  cfg.layers = 2;
  cfg.heads = 2;
  cfg.ffn_dim = 32;
  cfg.max_positions = t_max;
  cfg.dropout = 0.0;
  return cfg;
}

}  // namespace

TEST_CASE("mask_prob 0 selects nothing") {
  Rng rng(1);
  EncodedSequence seq = make_sequence(32, 50, rng, 4);
  PretrainConfig cfg;
  cfg.mask_prob = 0.0;
  MaskedRow row = ngram_mask(seq, cfg, 50, rng);
  CHECK(row.input_ids == seq.token_ids);
  for (int l : row.labels) CHECK(l == kIgnoreLabel);
}

TEST_CASE("mask_prob 1 with unigram spans saturates the eligible set") {
  Rng rng(2);
  EncodedSequence seq = make_sequence(32, 50, rng, 4);
  PretrainConfig cfg;
  cfg.mask_prob = 1.0;
  cfg.max_ngram = 1;
  MaskedRow row = ngram_mask(seq, cfg, 50, rng);
  for (std::size_t i = 0; i < seq.token_ids.size(); ++i) {
    bool eligible = !seq.special_mask[i] && seq.attention_mask[i];
    CHECK((row.labels[i] != kIgnoreLabel) == eligible);
  }
}

TEST_CASE("masked batch invariants hold over many random sequences") {
  Rng rng(3);
  PretrainConfig cfg;
  std::uniform_int_distribution<std::size_t> len(8, 48);
  std::uniform_int_distribution<std::size_t> pads(0, 6);
  for (int trial = 0; trial < 10000; ++trial) {
    std::size_t T = len(rng);
    std::size_t tail = std::min(pads(rng), T - 3);
    EncodedSequence seq = make_sequence(T, 60, rng, tail);
    MaskedRow row = ngram_mask(seq, cfg, 60, rng);
    std::size_t run = 0;
    for (std::size_t i = 0; i < T; ++i) {
      bool selected = row.labels[i] != kIgnoreLabel;
      if (selected) {
        // never specials or pads
        CHECK(!seq.special_mask[i]);
        CHECK(seq.attention_mask[i] == 1);
        // label holds the original token
        CHECK(row.labels[i] == seq.token_ids[i]);
        ++run;
        CHECK(run <= cfg.max_ngram);
      } else {
        CHECK(row.input_ids[i] == seq.token_ids[i]);
        run = 0;
      }
    }
  }
}

TEST_CASE("masking statistics over 100k eligible tokens") {
  Rng rng(4);
  PretrainConfig cfg;
  std::size_t vocab = 200;
  long long eligible = 0, selected = 0, masked = 0, random_id = 0, kept = 0;
  while (eligible < 100000) {
    EncodedSequence seq = make_sequence(128, vocab, rng, 8);
    MaskedRow row = ngram_mask(seq, cfg, vocab, rng);
    for (std::size_t i = 0; i < seq.token_ids.size(); ++i) {
      if (!seq.special_mask[i] && seq.attention_mask[i]) ++eligible;
      if (row.labels[i] == kIgnoreLabel) continue;
      ++selected;
      if (row.input_ids[i] == kMaskId)
        ++masked;
      else if (row.input_ids[i] != seq.token_ids[i])
        ++random_id;
      else
        ++kept;
    }
  }
  double frac = double(selected) / double(eligible);
  CHECK(frac >= 0.13);
  CHECK(frac <= 0.17);
  double mask_frac = double(masked) / double(selected);
  CHECK(mask_frac >= 0.77);
  CHECK(mask_frac <= 0.83);
  CHECK(double(random_id) / double(selected) == doctest::Approx(0.1).epsilon(0.35));
  CHECK(double(kept) / double(selected) == doctest::Approx(0.1).epsilon(0.35));
}

TEST_CASE("lr schedule endpoints and peak") {
  PretrainConfig cfg;  // total 120000, warmup 0.1, peak 1e-4
  CHECK(lr_schedule(0, cfg) == 0.0);
  CHECK(lr_schedule(12000, cfg) == doctest::Approx(1e-4));
  CHECK(lr_schedule(120000, cfg) == 0.0);
  CHECK(lr_schedule(6000, cfg) == doctest::Approx(5e-5));
}

TEST_CASE("adamw first step and decoupled decay") {
  // first step, g = 1, no decay: delta ~= -lr
  Tensor theta = Tensor::zeros({1}, true);
  AdamWConfig cfg;
  cfg.weight_decay = 0.0;
  AdamW opt({{"w", theta}}, cfg);
  theta.node()->grad = {Real(1)};
  opt.step(0.01);
  CHECK(theta.data()[0] == doctest::Approx(-0.01).epsilon(1e-4));

  // g = 0, theta = 1, decay lambda: theta -> 1 - lr*lambda
  Tensor theta2 = Tensor::filled({1}, 1, true);
  AdamWConfig cfg2;
  cfg2.weight_decay = 0.5;
  AdamW opt2({{"w", theta2}}, cfg2);
  opt2.step(0.1);
  CHECK(theta2.data()[0] == doctest::Approx(1.0 - 0.1 * 0.5));

  // identical gradients and state update identically
  Tensor a = Tensor::filled({1}, 2, true), b = Tensor::filled({1}, 2, true);
  AdamW opt3({{"a", a}, {"b", b}});
  a.node()->grad = {Real(0.3)};
  b.node()->grad = {Real(0.3)};
  opt3.step(0.05);
  CHECK(a.data()[0] == b.data()[0]);
}

TEST_CASE("mlm loss at random init is close to ln V") {
  std::size_t vocab = 120;
  EncoderModel model(tiny_config(vocab, 32), 5);
  Rng rng(6);
  PretrainConfig cfg;
  std::vector<EncodedSequence> seqs;
  for (int i = 0; i < 8; ++i) seqs.push_back(make_sequence(32, vocab, rng, 2));
  MaskedBatch batch = collate_masked(seqs, cfg, vocab, rng);
  MlmLoss loss = mlm_loss(model, batch, false);
  double lnv = std::log(double(vocab));
  CHECK(loss.loss.item() > lnv * 0.85);
  CHECK(loss.loss.item() < lnv * 1.15);
}

TEST_CASE("zero selected positions give zero loss with a warning flag") {
  std::size_t vocab = 50;
  EncoderModel model(tiny_config(vocab), 7);
  Rng rng(8);
  PretrainConfig cfg;
  cfg.mask_prob = 0.0;
  std::vector<EncodedSequence> seqs = {make_sequence(16, vocab, rng, 2)};
  MaskedBatch batch = collate_masked(seqs, cfg, vocab, rng);
  MlmLoss loss = mlm_loss(model, batch, false);
  CHECK(loss.all_ignored);
  CHECK(loss.loss.item() == Real(0));
}

TEST_CASE("overfitting one repeated batch drives the loss below 0.05") {
  std::size_t vocab = 30;
  EncoderModel model(tiny_config(vocab), 9);
  AdamW opt(model.named_parameters());
  Rng rng(10);
  PretrainConfig cfg;
  std::vector<EncodedSequence> seqs;
  for (int i = 0; i < 4; ++i) seqs.push_back(make_sequence(16, vocab, rng, 2));
  MaskedBatch batch = collate_masked(seqs, cfg, vocab, rng);  // fixed batch
  double loss_val = 0;
  for (int step = 0; step < 400; ++step) {
    MlmLoss l = mlm_loss(model, batch, true);
    loss_val = l.loss.item();
    if (loss_val < 0.04) break;
    opt.zero_grad();
    backward(l.loss);
    opt.step(3e-3);
  }
  CHECK(loss_val < 0.05);
}

TEST_CASE("pretrain loop logs, determinism and no NSP head") {
  std::size_t vocab = 40;
  Rng rng(11);
  std::vector<EncodedSequence> corpus;
  for (int i = 0; i < 32; ++i) corpus.push_back(make_sequence(16, vocab, rng, 1));
  PretrainConfig cfg;
  cfg.batch_size = 4;
  cfg.total_steps = 20;
  cfg.peak_lr = 1e-3;
  cfg.log_every = 5;
  cfg.seed = 123;

  EncoderModel m1(tiny_config(vocab), 1);
  AdamW o1(m1.named_parameters());
  auto r1 = pretrain_loop(m1, corpus, cfg, o1);
  CHECK(r1.loss_log.size() == 4);  // total_steps / log_every

  EncoderModel m2(tiny_config(vocab), 1);
  AdamW o2(m2.named_parameters());
  auto r2 = pretrain_loop(m2, corpus, cfg, o2);
  REQUIRE(r1.loss_log.size() == r2.loss_log.size());
  for (std::size_t i = 0; i < r1.loss_log.size(); ++i)
    CHECK(r1.loss_log[i].loss == r2.loss_log[i].loss);

  // structural: pure MLM model exposes no sentence-pair / NSP parameters
  for (const auto& [name, t] : m1.named_parameters()) {
    CHECK(name.find("nsp") == std::string::npos);
    CHECK(name.find("classifier") == std::string::npos);
  }
}

TEST_CASE("restarting from a checkpoint reproduces subsequent losses") {
  namespace fs = std::filesystem;
  std::size_t vocab = 40;
  Rng rng(12);
  std::vector<EncodedSequence> corpus;
  for (int i = 0; i < 24; ++i) corpus.push_back(make_sequence(16, vocab, rng, 1));
  PretrainConfig cfg;
  cfg.batch_size = 4;
  cfg.total_steps = 10;
  cfg.peak_lr = 1e-3;
  cfg.log_every = 1;
  cfg.seed = 9;

  EncoderModel full(tiny_config(vocab), 2);
  AdamW opt_full(full.named_parameters());
  auto r_full = pretrain_loop(full, corpus, cfg, opt_full);

  // first half, checkpoint, then resume
  std::string path = (fs::temp_directory_path() / "tess_resume.ckpt").string();
  EncoderModel half(tiny_config(vocab), 2);
  AdamW opt_half(half.named_parameters());
  pretrain_loop(half, corpus, cfg, opt_half, 0, "", nullptr, /*end_step=*/5);
  save_checkpoint(half, &opt_half, path, 5);

  auto loaded = load_checkpoint(path);
  AdamW opt_resumed(loaded.model->named_parameters());
  loaded.restore_optimizer(opt_resumed);
  auto r_tail = pretrain_loop(*loaded.model, corpus, cfg, opt_resumed,
                              loaded.train_step);
  REQUIRE(r_tail.loss_log.size() == 5);
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(r_tail.loss_log[i].step == r_full.loss_log[5 + i].step);
    CHECK(r_tail.loss_log[i].loss ==
          doctest::Approx(r_full.loss_log[5 + i].loss).epsilon(1e-6));
  }
  std::remove(path.c_str());
}

TEST_CASE("invalid pretrain configs are rejected") {
  PretrainConfig cfg;
  cfg.mask_prob = 1.5;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  PretrainConfig cfg2;
  cfg2.p_mask = 0.7;
  CHECK_THROWS_AS(cfg2.validate(), ConfigError);
}
