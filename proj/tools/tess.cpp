// tess: command-line front end for the TESS encoder pipeline.
//
// Exit codes: 0 success, 2 input/config error, 3 numeric failure.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "CLI11.hpp"
#include "tess/data_io.hpp"
#include "tess/finetune.hpp"
#include "tess/model.hpp"
#include "tess/pretrain.hpp"
#include "tess/tokenizer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kToolVersion = "tess 0.1.0";

std::vector<std::string> split_commas(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

std::vector<std::size_t> parse_size_list(const std::string& s) {
  std::vector<std::size_t> out;
  for (const auto& tok : split_commas(s)) out.push_back(std::stoull(tok));
  return out;
}

std::vector<double> parse_double_list(const std::string& s) {
  std::vector<double> out;
  for (const auto& tok : split_commas(s)) out.push_back(std::stod(tok));
  return out;
}

json load_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw tess::IoError("cannot open config file: " + path);
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded())
    throw tess::InputError("config file is not valid JSON: " + path);
  return j;
}

void write_manifest(const std::string& out_dir, const std::string& subcommand,
                    const json& resolved, const json& inputs) {
  json manifest = {{"tool", kToolVersion},
                   {"subcommand", subcommand},
                   {"config", resolved},
                   {"inputs", inputs}};
  fs::create_directories(out_dir);
  std::ofstream out(fs::path(out_dir) / "manifest.json");
  if (!out) throw tess::IoError("cannot write manifest under " + out_dir);
  out << manifest.dump(2) << "\n";
}

tess::ModelConfig model_config_from_json(const json& j) {
  if (j.contains("model")) return tess::ModelConfig::from_json(j["model"]);
  return tess::ModelConfig::from_json(j);
}

json metrics_to_json(const tess::MetricSet& m) {
  return {{"accuracy", m.accuracy},       {"precision", m.precision},
          {"recall", m.recall},           {"f1", m.f1},
          {"f1_macro", m.f1_macro},       {"f1_weighted", m.f1_weighted},
          {"f1_binary", m.f1_binary}};
}

// ---------------------------------------------------------------------------

struct BuildVocabArgs {
  std::string corpus, out;
  std::size_t size = 2000;
};

int run_build_vocab(const BuildVocabArgs& a) {
  auto docs = tess::load_documents(a.corpus);
  if (docs.empty()) {
    std::cerr << "warning: corpus at " << a.corpus << " is empty\n";
    throw tess::InputError("cannot build a vocabulary from an empty corpus: " +
                           a.corpus);
  }
  tess::Vocabulary vocab = tess::train_vocab(docs, a.size);
  vocab.save(a.out);
  fs::path dir = fs::path(a.out).parent_path();
  write_manifest(dir.empty() ? "." : dir.string(), "build-vocab",
                 {{"size", a.size}, {"out", a.out}}, {{"corpus", a.corpus}});
  std::cout << "wrote " << vocab.size() << " tokens to " << a.out << "\n";
  return 0;
}

struct PretrainArgs {
  std::string config, corpus, vocab, out;
  long long steps = -1;
  long long batch = -1;
  double lr = -1;
  long long seed = -1;
  bool print_default_config = false;
};

int run_pretrain(const PretrainArgs& a) {
  tess::ModelConfig mcfg;
  tess::PretrainConfig pcfg;
  if (a.print_default_config) {
    json j = {{"model", mcfg.to_json()}, {"pretrain", pcfg.to_json()}};
    std::cout << j.dump(2) << "\n";
    return 0;
  }
  if (!a.config.empty()) {
    json j = load_json_file(a.config);
    if (j.contains("model")) mcfg = tess::ModelConfig::from_json(j["model"]);
    if (j.contains("pretrain"))
      pcfg = tess::PretrainConfig::from_json(j["pretrain"]);
  }
  if (a.steps >= 0) pcfg.total_steps = a.steps;
  if (a.batch >= 0) pcfg.batch_size = static_cast<std::size_t>(a.batch);
  if (a.lr >= 0) pcfg.peak_lr = a.lr;
  if (a.seed >= 0) pcfg.seed = static_cast<std::uint64_t>(a.seed);
  pcfg.validate();

  tess::Vocabulary vocab = tess::Vocabulary::load(a.vocab);
  mcfg.vocab_size = vocab.size();
  mcfg.validate();

  bool empty = false;
  auto corpus = tess::load_corpus(a.corpus, vocab, mcfg.max_positions, &empty);
  if (empty) {
    std::cerr << "warning: corpus at " << a.corpus << " is empty\n";
    throw tess::InputError("cannot pretrain on an empty corpus: " + a.corpus);
  }

  fs::create_directories(a.out);
  write_manifest(a.out, "pretrain",
                 {{"model", mcfg.to_json()}, {"pretrain", pcfg.to_json()}},
                 {{"corpus", a.corpus}, {"vocab", a.vocab}});

  tess::EncoderModel model(mcfg, pcfg.seed);
  tess::AdamWConfig ocfg;
  ocfg.weight_decay = pcfg.weight_decay;
  tess::AdamW optimizer(model.named_parameters(), ocfg);

  auto ckpt_path = [&](long long step) {
    return (fs::path(a.out) /
            (step < 0 ? std::string("checkpoint-final.ckpt")
                      : "checkpoint-" + std::to_string(step) + ".ckpt"))
        .string();
  };
  auto on_checkpoint = [&](long long step) {
    std::ostringstream rng;
    rng << model.dropout_rng();
    tess::save_checkpoint(model, &optimizer,
                          step >= pcfg.total_steps ? ckpt_path(-1)
                                                   : ckpt_path(step),
                          step, rng.str());
  };
  auto result = tess::pretrain_loop(
      model, corpus, pcfg, optimizer, 0,
      (fs::path(a.out) / "loss.csv").string(), on_checkpoint);
  std::cout << "pretraining done: initial loss " << result.initial_loss
            << ", final loss " << result.final_loss << "\n"
            << "checkpoint: " << ckpt_path(-1) << "\n";
  return 0;
}

struct FinetuneArgs {
  std::string checkpoint, train, vocab, out;
  double lr = 3e-5;
  std::size_t epochs = 3;
  std::size_t batch = 16;
  std::uint64_t seed = 0;
  std::size_t max_len = 128;
};

int run_finetune(const FinetuneArgs& a) {
  auto loaded = tess::load_checkpoint(a.checkpoint);
  tess::Vocabulary vocab = tess::Vocabulary::load(a.vocab);
  auto data = tess::load_classification_dataset(a.train);
  if (data.empty()) throw tess::InputError("empty training set: " + a.train);
  std::size_t num_classes = tess::dataset_num_classes(data);

  tess::FinetuneConfig cfg;
  cfg.lr = a.lr;
  cfg.epochs = a.epochs;
  cfg.batch_size = a.batch;
  cfg.seed = a.seed;
  cfg.max_len = a.max_len;

  fs::create_directories(a.out);
  write_manifest(a.out, "finetune",
                 {{"lr", cfg.lr},
                  {"epochs", cfg.epochs},
                  {"batch_size", cfg.batch_size},
                  {"seed", cfg.seed},
                  {"max_len", cfg.max_len},
                  {"num_classes", num_classes}},
                 {{"checkpoint", a.checkpoint},
                  {"train", a.train},
                  {"vocab", a.vocab}});
  tess::finetune(*loaded.model, vocab, data, num_classes, cfg);
  std::string out_ckpt = (fs::path(a.out) / "finetuned.ckpt").string();
  tess::save_checkpoint(*loaded.model, nullptr, out_ckpt);
  std::cout << "fine-tuned on " << data.size() << " examples ("
            << num_classes << " classes); checkpoint: " << out_ckpt << "\n";
  return 0;
}

struct EvalArgs {
  std::string checkpoint, data, vocab, out;
  std::size_t max_len = 128;
};

int run_eval(const EvalArgs& a) {
  auto loaded = tess::load_checkpoint(a.checkpoint);
  tess::Vocabulary vocab = tess::Vocabulary::load(a.vocab);
  auto data = tess::load_classification_dataset(a.data);
  if (data.empty()) throw tess::InputError("empty eval set: " + a.data);
  tess::MetricSet m = tess::evaluate(*loaded.model, vocab, data, a.max_len);
  json j = metrics_to_json(m);
  std::cout << j.dump(2) << "\n";
  if (!a.out.empty()) {
    fs::create_directories(a.out);
    std::ofstream f(fs::path(a.out) / "metrics.json");
    f << j.dump(2) << "\n";
    write_manifest(a.out, "eval", {{"max_len", a.max_len}},
                   {{"checkpoint", a.checkpoint},
                    {"data", a.data},
                    {"vocab", a.vocab}});
  }
  return 0;
}

struct SweepArgs {
  std::string checkpoint, train, eval_path, vocab, out;
  std::string sizes = "50,200,500,800,1000";
  std::string lrs = "1e-5,3e-5,5e-5";
  std::string epochs = "1,3,5";
  std::string seeds = "0";
  std::size_t batch = 16;
  std::size_t max_len = 128;
  bool no_stratified = false;
};

int run_sweep(const SweepArgs& a) {
  auto loaded = tess::load_checkpoint(a.checkpoint);
  tess::Vocabulary vocab = tess::Vocabulary::load(a.vocab);
  auto train = tess::load_classification_dataset(a.train);
  auto eval_split = tess::load_classification_dataset(a.eval_path);

  tess::SweepConfig sweep;
  sweep.sizes = parse_size_list(a.sizes);
  sweep.lrs = parse_double_list(a.lrs);
  sweep.epochs_grid = parse_size_list(a.epochs);
  sweep.seeds.clear();
  for (std::size_t s : parse_size_list(a.seeds)) sweep.seeds.push_back(s);
  sweep.stratified = !a.no_stratified;
  sweep.batch_size = a.batch;
  sweep.max_len = a.max_len;

  fs::create_directories(a.out);
  write_manifest(a.out, "sweep",
                 {{"sizes", sweep.sizes},
                  {"lrs", sweep.lrs},
                  {"epochs", sweep.epochs_grid},
                  {"seeds", sweep.seeds},
                  {"stratified", sweep.stratified},
                  {"batch_size", sweep.batch_size},
                  {"max_len", sweep.max_len}},
                 {{"checkpoint", a.checkpoint},
                  {"train", a.train},
                  {"eval", a.eval_path},
                  {"vocab", a.vocab}});

  tess::SweepReport report =
      tess::fewshot_sweep(*loaded.model, vocab, train, eval_split, sweep);

  {
    std::ofstream f(fs::path(a.out) / "report.csv");
    f << tess::sweep_csv_header() << "\n";
    for (const auto& r : report.rows)
      if (!r.failed) f << tess::sweep_row_csv(r) << "\n";
  }
  {
    std::ofstream f(fs::path(a.out) / "best.csv");
    f << tess::sweep_csv_header() << "\n";
    for (const auto& r : report.best) f << tess::sweep_row_csv(r) << "\n";
  }
  if (report.partial) {
    std::cerr << "warning: sweep report is partial; failed cells:\n";
    for (const auto& f : report.failures) std::cerr << "  " << f << "\n";
    std::ofstream f(fs::path(a.out) / "failures.txt");
    for (const auto& line : report.failures) f << line << "\n";
  }
  std::cout << "sweep wrote " << report.rows.size() << " rows ("
            << report.best.size() << " best rows) to " << a.out
            << (report.partial ? " [partial]" : "") << "\n";
  return 0;
}

struct CountParamsArgs {
  std::string config, compare;
  bool as_json = false;
};

json report_to_json(const tess::ParamReport& r) {
  return {{"total", r.total},
          {"by_block", r.by_block},
          {"unique_params", r.unique_params},
          {"logical_params", r.logical_params}};
}

void print_report(const tess::ParamReport& r) {
  std::cout << "total parameters: " << r.total << "\n";
  for (const auto& [block, count] : r.by_block)
    std::cout << "  " << block << ": " << count << "\n";
  std::cout << "  unique: " << r.unique_params
            << ", logical (sharing expanded): " << r.logical_params << "\n";
}

int run_count_params(const CountParamsArgs& a) {
  tess::ModelConfig cfg = model_config_from_json(load_json_file(a.config));
  tess::ParamReport report = tess::count_parameters(cfg);
  if (a.compare.empty()) {
    if (a.as_json)
      std::cout << report_to_json(report).dump(2) << "\n";
    else
      print_report(report);
    return 0;
  }
  tess::ModelConfig base = model_config_from_json(load_json_file(a.compare));
  tess::ParamReport base_report = tess::count_parameters(base);
  double ratio = static_cast<double>(report.total) /
                 static_cast<double>(base_report.total);
  if (a.as_json) {
    json j = {{"config", report_to_json(report)},
              {"baseline", report_to_json(base_report)},
              {"ratio", ratio}};
    std::cout << j.dump(2) << "\n";
  } else {
    std::cout << "config:\n";
    print_report(report);
    std::cout << "baseline:\n";
    print_report(base_report);
    std::cout << "ratio (config / baseline): " << ratio << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  if (const char* threads = std::getenv("TESS_THREADS")) {
#ifdef _OPENMP
    int n = std::atoi(threads);
    if (n > 0) omp_set_num_threads(n);
#else
    (void)threads;
#endif
  }

  CLI::App app{"TESS encoder: vocabulary, MLM pretraining, fine-tuning and "
               "few-shot sweeps",
               "tess"};
  app.set_version_flag("--version", kToolVersion);
  app.require_subcommand(1);

  BuildVocabArgs bv;
  auto* cmd_bv = app.add_subcommand(
      "build-vocab", "Train a WordPiece vocabulary from a corpus directory");
  cmd_bv->add_option("--corpus", bv.corpus,
                     "Directory of UTF-8 .txt files (blank-line-delimited "
                     "documents)")->required();
  cmd_bv->add_option("--size", bv.size, "Target vocabulary size")
      ->default_val(2000);
  cmd_bv->add_option("--out", bv.out, "Output vocabulary file (one token "
                     "per line)")->required();

  PretrainArgs pt;
  auto* cmd_pt = app.add_subcommand(
      "pretrain", "Masked-language-model pretraining (n-gram masking, AdamW, "
                  "linear warmup/decay)");
  cmd_pt->add_option("--config", pt.config,
                     "JSON config with model/pretrain sections (flags win)");
  cmd_pt->add_option("--corpus", pt.corpus, "Corpus directory");
  cmd_pt->add_option("--vocab", pt.vocab, "Vocabulary file");
  cmd_pt->add_option("--out", pt.out, "Output directory (checkpoints, "
                     "loss.csv, manifest.json)");
  cmd_pt->add_option("--steps", pt.steps,
                     "Total optimizer steps (default 120000)");
  cmd_pt->add_option("--batch", pt.batch,
                     "Sequences per step (default 2000)");
  cmd_pt->add_option("--lr", pt.lr, "Peak learning rate (default 1e-4)");
  cmd_pt->add_option("--seed", pt.seed, "Random seed (default 42)");
  cmd_pt->add_flag("--print-default-config", pt.print_default_config,
                   "Print the default model + pretraining config as JSON "
                   "and exit");

  FinetuneArgs ft;
  auto* cmd_ft = app.add_subcommand(
      "finetune", "Fine-tune a pretrained checkpoint for classification");
  cmd_ft->add_option("--checkpoint", ft.checkpoint, "Base checkpoint")
      ->required();
  cmd_ft->add_option("--train", ft.train, "JSON-lines training set")
      ->required();
  cmd_ft->add_option("--vocab", ft.vocab, "Vocabulary file")->required();
  cmd_ft->add_option("--out", ft.out, "Output directory")->required();
  cmd_ft->add_option("--lr", ft.lr, "Learning rate")->default_val(3e-5);
  cmd_ft->add_option("--epochs", ft.epochs, "Epochs")->default_val(3);
  cmd_ft->add_option("--batch", ft.batch, "Batch size")->default_val(16);
  cmd_ft->add_option("--seed", ft.seed, "Random seed")->default_val(0);
  cmd_ft->add_option("--max-len", ft.max_len, "Max sequence length")
      ->default_val(128);

  EvalArgs ev;
  auto* cmd_ev = app.add_subcommand(
      "eval", "Evaluate a fine-tuned checkpoint (accuracy and F1 family)");
  cmd_ev->add_option("--checkpoint", ev.checkpoint, "Fine-tuned checkpoint")
      ->required();
  cmd_ev->add_option("--data", ev.data, "JSON-lines eval set")->required();
  cmd_ev->add_option("--vocab", ev.vocab, "Vocabulary file")->required();
  cmd_ev->add_option("--out", ev.out, "Optional output directory for "
                     "metrics.json");
  cmd_ev->add_option("--max-len", ev.max_len, "Max sequence length")
      ->default_val(128);

  SweepArgs sw;
  auto* cmd_sw = app.add_subcommand(
      "sweep", "Few-shot sweep over (size, lr, epochs, seed); emits "
               "report.csv and best.csv learning-curve data");
  cmd_sw->add_option("--checkpoint", sw.checkpoint, "Base checkpoint")
      ->required();
  cmd_sw->add_option("--train", sw.train, "JSON-lines training set")
      ->required();
  cmd_sw->add_option("--eval", sw.eval_path, "JSON-lines eval set")
      ->required();
  cmd_sw->add_option("--vocab", sw.vocab, "Vocabulary file")->required();
  cmd_sw->add_option("--out", sw.out, "Output directory")->required();
  cmd_sw->add_option("--sizes", sw.sizes, "Comma-separated subsample sizes")
      ->default_val("50,200,500,800,1000");
  cmd_sw->add_option("--lrs", sw.lrs, "Comma-separated learning rates")
      ->default_val("1e-5,3e-5,5e-5");
  cmd_sw->add_option("--epochs", sw.epochs, "Comma-separated epoch counts")
      ->default_val("1,3,5");
  cmd_sw->add_option("--seeds", sw.seeds, "Comma-separated seeds")
      ->default_val("0");
  cmd_sw->add_option("--batch", sw.batch, "Batch size")->default_val(16);
  cmd_sw->add_option("--max-len", sw.max_len, "Max sequence length")
      ->default_val(128);
  cmd_sw->add_flag("--no-stratified", sw.no_stratified,
                   "Sample uniformly instead of stratified by class");

  CountParamsArgs cp;
  auto* cmd_cp = app.add_subcommand(
      "count-params", "Closed-form parameter accounting for a model config");
  cmd_cp->add_option("--config", cp.config, "Model config JSON")->required();
  cmd_cp->add_option("--compare", cp.compare,
                     "Baseline config JSON; prints both totals and the ratio");
  cmd_cp->add_flag("--json", cp.as_json, "Emit machine-readable JSON");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);  // prints help or the usage error
    return rc == 0 ? 0 : 2;
  }

  try {
    if (cmd_bv->parsed()) return run_build_vocab(bv);
    if (cmd_pt->parsed()) {
      if (!pt.print_default_config &&
          (pt.corpus.empty() || pt.vocab.empty() || pt.out.empty()))
        throw tess::InputError(
            "pretrain requires --corpus, --vocab and --out");
      return run_pretrain(pt);
    }
    if (cmd_ft->parsed()) return run_finetune(ft);
    if (cmd_ev->parsed()) return run_eval(ev);
    if (cmd_sw->parsed()) return run_sweep(sw);
    if (cmd_cp->parsed()) return run_count_params(cp);
  } catch (const tess::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
