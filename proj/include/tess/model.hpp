#pragma once

#include <map>
#include <optional>

#include "json.hpp"
#include "tess/tensor.hpp"
#include "tess/tokenizer.hpp"

namespace tess {

enum class Sharing { None, Attention, All };

inline std::string to_string(Sharing s) {
  switch (s) {
    case Sharing::None: return "none";
    case Sharing::Attention: return "attention";
    case Sharing::All: return "all";
  }
  return "attention";
}

inline Sharing sharing_from_string(const std::string& s) {
  if (s == "none") return Sharing::None;
  if (s == "attention") return Sharing::Attention;
  if (s == "all") return Sharing::All;
  throw ConfigError("unknown sharing mode: " + s +
                    " (expected none|attention|all)");
}

struct ModelConfig {
  std::size_t vocab_size = 30522;
  std::size_t embed_dim = 128;
  std::size_t hidden_dim = 768;
  std::size_t layers = 12;
  std::size_t heads = 12;
  std::size_t ffn_dim = 3072;
  std::size_t max_positions = 768;
  std::size_t segment_types = 2;
  Sharing sharing = Sharing::Attention;
  double dropout = 0.1;
  std::optional<std::size_t> num_classes;

  void validate() const {
    if (layers < 1) throw ConfigError("config: layers must be >= 1");
    if (max_positions < 1)
      throw ConfigError("config: max_positions must be >= 1");
    if (heads < 1 || hidden_dim % heads != 0)
      throw ConfigError("config: hidden_dim (" + std::to_string(hidden_dim) +
                        ") must be divisible by heads (" +
                        std::to_string(heads) + ")");
    if (embed_dim > hidden_dim)
      throw ConfigError("config: embed_dim must be <= hidden_dim");
    if (vocab_size <= static_cast<std::size_t>(kNumSpecials))
      throw ConfigError("config: vocab_size must exceed the special tokens");
    if (dropout < 0.0 || dropout >= 1.0)
      throw ConfigError("config: dropout must be in [0,1)");
  }

  nlohmann::json to_json() const {
    nlohmann::json j = {
        {"vocab_size", vocab_size},   {"embed_dim", embed_dim},
        {"hidden_dim", hidden_dim},   {"layers", layers},
        {"heads", heads},             {"ffn_dim", ffn_dim},
        {"max_positions", max_positions},
        {"segment_types", segment_types},
        {"sharing", to_string(sharing)},
        {"dropout", dropout}};
    if (num_classes) j["num_classes"] = *num_classes;
    return j;
  }

  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.embed_dim = j.value("embed_dim", c.embed_dim);
    c.hidden_dim = j.value("hidden_dim", c.hidden_dim);
    c.layers = j.value("layers", c.layers);
    c.heads = j.value("heads", c.heads);
    c.ffn_dim = j.value("ffn_dim", c.ffn_dim);
    c.max_positions = j.value("max_positions", c.max_positions);
    c.segment_types = j.value("segment_types", c.segment_types);
    if (j.contains("sharing"))
      c.sharing = sharing_from_string(j["sharing"].get<std::string>());
    c.dropout = j.value("dropout", c.dropout);
    if (j.contains("num_classes") && !j["num_classes"].is_null())
      c.num_classes = j["num_classes"].get<std::size_t>();
    c.validate();
    return c;
  }

  bool operator==(const ModelConfig&) const = default;
};

struct ParamReport {
  long long total = 0;
  std::map<std::string, long long> by_block;
  long long unique_params = 0;   // parameters stored once
  long long logical_params = 0;  // with sharing expanded per layer
};

// Closed-form parameter accounting. Position/segment embeddings live at E;
// the MLM decoder is tied to the token embedding so it contributes only its
// output bias.
inline ParamReport count_parameters(const ModelConfig& cfg) {
  cfg.validate();
  long long V = static_cast<long long>(cfg.vocab_size);
  long long E = static_cast<long long>(cfg.embed_dim);
  long long H = static_cast<long long>(cfg.hidden_dim);
  long long L = static_cast<long long>(cfg.layers);
  long long I = static_cast<long long>(cfg.ffn_dim);
  long long T = static_cast<long long>(cfg.max_positions);
  long long S = static_cast<long long>(cfg.segment_types);

  long long embeddings = V * E + T * E + S * E + 2 * E + E * H + H;
  long long A = 4 * (H * H + H);
  long long F = 2 * H * I + I + H;
  long long norms = 4 * H;  // two gamma/beta pairs per layer

  long long encoder_unique = 0;
  switch (cfg.sharing) {
    case Sharing::Attention: encoder_unique = A + L * (F + norms); break;
    case Sharing::None: encoder_unique = L * (A + F + norms); break;
    case Sharing::All: encoder_unique = A + F + norms * L; break;
  }
  long long encoder_logical = L * (A + F + norms);
  long long mlm = H * E + E + 2 * E + V;
  long long classifier =
      cfg.num_classes ? H * static_cast<long long>(*cfg.num_classes) +
                            static_cast<long long>(*cfg.num_classes)
                      : 0;

  ParamReport r;
  r.by_block["embeddings"] = embeddings;
  r.by_block["encoder"] = encoder_unique;
  r.by_block["mlm_head"] = mlm;
  if (classifier) r.by_block["classifier"] = classifier;
  r.total = embeddings + encoder_unique + mlm + classifier;
  r.unique_params = r.total;
  r.logical_params = embeddings + encoder_logical + mlm + classifier;
  return r;
}

struct AttentionParams {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
};

struct FfnParams {
  Tensor w1, b1, w2, b2;
};

struct LayerNormParams {
  Tensor gamma, beta;
};

// Model input: a rectangular batch of encoded sequences.
struct Batch {
  std::size_t batch = 0;
  std::size_t seq_len = 0;
  std::vector<int> token_ids;       // [B*T]
  std::vector<int> attention_mask;  // [B*T]
  std::vector<int> segment_ids;     // [B*T]
  std::vector<int> special_mask;    // [B*T]

  static Batch from_sequences(const std::vector<EncodedSequence>& seqs) {
    if (seqs.empty()) throw InputError("empty batch");
    Batch b;
    b.batch = seqs.size();
    b.seq_len = seqs[0].length();
    for (const auto& s : seqs) {
      if (s.length() != b.seq_len)
        throw InputError("batch sequences must share one length");
      b.token_ids.insert(b.token_ids.end(), s.token_ids.begin(),
                         s.token_ids.end());
      b.attention_mask.insert(b.attention_mask.end(),
                              s.attention_mask.begin(),
                              s.attention_mask.end());
      b.segment_ids.insert(b.segment_ids.end(), s.segment_ids.begin(),
                           s.segment_ids.end());
      b.special_mask.insert(b.special_mask.end(), s.special_mask.begin(),
                            s.special_mask.end());
    }
    return b;
  }
};

class EncoderModel {
 public:
  EncoderModel(ModelConfig cfg, std::uint64_t seed)
      : cfg_(std::move(cfg)), dropout_rng_(seed ^ 0x9e3779b97f4a7c15ULL) {
    cfg_.validate();
    Rng rng(seed);
    auto W = [&](std::size_t r, std::size_t c) { return init_weight(rng, r, c); };
    auto B = [](std::size_t n) {
      return Tensor::zeros({n}, /*requires_grad=*/true);
    };
    auto LN = [](std::size_t n) {
      return LayerNormParams{Tensor::filled({n}, Real(1), true),
                             Tensor::zeros({n}, true)};
    };

    std::size_t V = cfg_.vocab_size, E = cfg_.embed_dim, H = cfg_.hidden_dim,
                I = cfg_.ffn_dim;
    tok_emb_ = W(V, E);
    pos_emb_ = W(cfg_.max_positions, E);
    seg_emb_ = W(cfg_.segment_types, E);
    emb_ln_ = LN(E);
    proj_w_ = W(E, H);
    proj_b_ = B(H);

    std::size_t attn_groups = cfg_.sharing == Sharing::None ? cfg_.layers : 1;
    std::size_t ffn_groups = cfg_.sharing == Sharing::All ? 1 : cfg_.layers;
    for (std::size_t g = 0; g < attn_groups; ++g)
      attn_groups_.push_back(std::make_shared<AttentionParams>(
          AttentionParams{W(H, H), B(H), W(H, H), B(H), W(H, H), B(H),
                          W(H, H), B(H)}));
    for (std::size_t g = 0; g < ffn_groups; ++g)
      ffn_groups_.push_back(std::make_shared<FfnParams>(
          FfnParams{W(H, I), B(I), W(I, H), B(H)}));
    for (std::size_t l = 0; l < cfg_.layers; ++l) {
      attn_.push_back(attn_groups_[attn_groups == 1 ? 0 : l]);
      ffn_.push_back(ffn_groups_[ffn_groups == 1 ? 0 : l]);
      ln1_.push_back(LN(H));
      ln2_.push_back(LN(H));
    }

    mlm_w_ = W(H, E);
    mlm_b_ = B(E);
    mlm_ln_ = LN(E);
    mlm_out_bias_ = B(V);

    if (cfg_.num_classes) init_classifier(*cfg_.num_classes, seed + 1);
  }

  const ModelConfig& config() const { return cfg_; }

  void init_classifier(std::size_t num_classes, std::uint64_t seed) {
    Rng rng(seed);
    cls_w_ = init_weight(rng, cfg_.hidden_dim, num_classes);
    cls_b_ = Tensor::zeros({num_classes}, true);
    cfg_.num_classes = num_classes;
  }

  bool has_classifier() const { return cfg_.num_classes.has_value(); }

  Rng& dropout_rng() { return dropout_rng_; }

  // Overwrite this model's parameter values from another model with the same
  // architecture (used to restart sweep cells from one base snapshot).
  void copy_parameters_from(const EncoderModel& other) {
    auto mine = named_parameters();
    auto theirs = other.named_parameters();
    if (mine.size() != theirs.size())
      throw ConfigError("copy_parameters_from: parameter lists differ");
    for (std::size_t i = 0; i < mine.size(); ++i) {
      if (mine[i].first != theirs[i].first ||
          mine[i].second.shape() != theirs[i].second.shape())
        throw ConfigError("copy_parameters_from: mismatch at parameter " +
                          mine[i].first);
      mine[i].second.data() = theirs[i].second.data();
    }
  }

  std::size_t attention_group_count() const { return attn_groups_.size(); }
  std::size_t ffn_group_count() const { return ffn_groups_.size(); }
  const AttentionParams& attention_group(std::size_t g) const {
    return *attn_groups_.at(g);
  }
  const AttentionParams& layer_attention(std::size_t l) const {
    return *attn_.at(l);
  }

  // Contextual hidden states [B, T, H]. Pass a vector pointer to capture the
  // per-layer attention maps [B, heads, T, T].
  Tensor forward(const Batch& batch, bool training = false,
                 std::vector<Tensor>* attention_maps = nullptr) {
    std::size_t B = batch.batch, T = batch.seq_len;
    if (T > cfg_.max_positions)
      throw InputError("sequence length " + std::to_string(T) +
                       " exceeds max_positions " +
                       std::to_string(cfg_.max_positions));
    for (int id : batch.token_ids)
      if (id < 0 || static_cast<std::size_t>(id) >= cfg_.vocab_size)
        throw InputError("token id " + std::to_string(id) +
                         " outside vocabulary of size " +
                         std::to_string(cfg_.vocab_size));

    std::vector<int> pos_ids(B * T);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t t = 0; t < T; ++t)
        pos_ids[b * T + t] = static_cast<int>(t);

    Tensor x = add(add(embedding(tok_emb_, batch.token_ids, {B, T}),
                       embedding(pos_emb_, pos_ids, {B, T})),
                   embedding(seg_emb_, batch.segment_ids, {B, T}));
    x = layer_norm(x, emb_ln_.gamma, emb_ln_.beta);
    x = dropout(x, cfg_.dropout, dropout_rng_, training);
    x = add(matmul(x, proj_w_), proj_b_);

    // additive key mask, broadcast over heads and query positions
    Tensor mask_bias = Tensor::zeros({B, 1, 1, T});
    for (std::size_t i = 0; i < B * T; ++i)
      mask_bias.data()[i] = batch.attention_mask[i] ? Real(0) : Real(-1e9);

    std::size_t H = cfg_.hidden_dim, heads = cfg_.heads, dh = H / heads;
    Real att_scale = Real(1.0 / std::sqrt(static_cast<double>(dh)));

    for (std::size_t l = 0; l < cfg_.layers; ++l) {
      const AttentionParams& p = *attn_[l];
      auto split_heads = [&](Tensor t) {
        return transpose(reshape(t, {B, T, heads, dh}), 1, 2);
      };
      Tensor q = split_heads(add(matmul(x, p.wq), p.bq));
      Tensor k = split_heads(add(matmul(x, p.wk), p.bk));
      Tensor v = split_heads(add(matmul(x, p.wv), p.bv));
      Tensor scores = scale(matmul(q, transpose(k, 2, 3)), att_scale);
      scores = add(scores, mask_bias);
      Tensor att = softmax(scores, 3);
      if (attention_maps) attention_maps->push_back(att);
      att = dropout(att, cfg_.dropout, dropout_rng_, training);
      Tensor ctx = reshape(transpose(matmul(att, v), 1, 2), {B, T, H});
      Tensor out = add(matmul(ctx, p.wo), p.bo);
      out = dropout(out, cfg_.dropout, dropout_rng_, training);
      x = layer_norm(add(x, out), ln1_[l].gamma, ln1_[l].beta);

      const FfnParams& f = *ffn_[l];
      Tensor h1 = gelu(add(matmul(x, f.w1), f.b1));
      Tensor h2 = add(matmul(h1, f.w2), f.b2);
      h2 = dropout(h2, cfg_.dropout, dropout_rng_, training);
      x = layer_norm(add(x, h2), ln2_[l].gamma, ln2_[l].beta);
    }
    return x;
  }

  // MLM head: dense H->E, gelu, layer norm, decode against the (tied) token
  // embedding transpose, add the per-token output bias. [B, T, V]
  Tensor mlm_logits(const Tensor& hidden) {
    Tensor t = layer_norm(gelu(add(matmul(hidden, mlm_w_), mlm_b_)),
                          mlm_ln_.gamma, mlm_ln_.beta);
    return add(matmul(t, transpose(tok_emb_, 0, 1)), mlm_out_bias_);
  }

  // Linear map of the [CLS] (position 0) state. [B, num_classes]
  Tensor classify_logits(const Tensor& hidden) {
    if (!has_classifier())
      throw UsageError("classify_logits called on a model with no classifier");
    std::size_t B = hidden.dim(0), H = hidden.dim(2);
    Tensor cls = reshape(slice(hidden, 1, 0, 1), {B, H});
    return add(matmul(cls, cls_w_), cls_b_);
  }

  // Unique trainable parameters under canonical names. Shared groups appear
  // once, so this is both the optimizer's list and the checkpoint layout.
  std::vector<std::pair<std::string, Tensor>> named_parameters() const {
    std::vector<std::pair<std::string, Tensor>> out;
    out.emplace_back("embeddings.token", tok_emb_);
    out.emplace_back("embeddings.position", pos_emb_);
    out.emplace_back("embeddings.segment", seg_emb_);
    out.emplace_back("embeddings.ln.gamma", emb_ln_.gamma);
    out.emplace_back("embeddings.ln.beta", emb_ln_.beta);
    out.emplace_back("embeddings.proj.weight", proj_w_);
    out.emplace_back("embeddings.proj.bias", proj_b_);
    auto attn_name = [&](std::size_t g) {
      return attn_groups_.size() == 1 ? std::string("attention.shared")
                                      : "layer." + std::to_string(g) +
                                            ".attention";
    };
    for (std::size_t g = 0; g < attn_groups_.size(); ++g) {
      const auto& p = *attn_groups_[g];
      std::string base = attn_name(g);
      out.emplace_back(base + ".wq", p.wq);
      out.emplace_back(base + ".bq", p.bq);
      out.emplace_back(base + ".wk", p.wk);
      out.emplace_back(base + ".bk", p.bk);
      out.emplace_back(base + ".wv", p.wv);
      out.emplace_back(base + ".bv", p.bv);
      out.emplace_back(base + ".wo", p.wo);
      out.emplace_back(base + ".bo", p.bo);
    }
    for (std::size_t g = 0; g < ffn_groups_.size(); ++g) {
      const auto& f = *ffn_groups_[g];
      std::string base = ffn_groups_.size() == 1
                             ? std::string("ffn.shared")
                             : "layer." + std::to_string(g) + ".ffn";
      out.emplace_back(base + ".w1", f.w1);
      out.emplace_back(base + ".b1", f.b1);
      out.emplace_back(base + ".w2", f.w2);
      out.emplace_back(base + ".b2", f.b2);
    }
    for (std::size_t l = 0; l < cfg_.layers; ++l) {
      std::string base = "layer." + std::to_string(l);
      out.emplace_back(base + ".ln1.gamma", ln1_[l].gamma);
      out.emplace_back(base + ".ln1.beta", ln1_[l].beta);
      out.emplace_back(base + ".ln2.gamma", ln2_[l].gamma);
      out.emplace_back(base + ".ln2.beta", ln2_[l].beta);
    }
    out.emplace_back("mlm.dense.weight", mlm_w_);
    out.emplace_back("mlm.dense.bias", mlm_b_);
    out.emplace_back("mlm.ln.gamma", mlm_ln_.gamma);
    out.emplace_back("mlm.ln.beta", mlm_ln_.beta);
    out.emplace_back("mlm.out_bias", mlm_out_bias_);
    if (has_classifier()) {
      out.emplace_back("classifier.weight", cls_w_);
      out.emplace_back("classifier.bias", cls_b_);
    }
    return out;
  }

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> out;
    for (auto& [name, t] : named_parameters()) out.push_back(t);
    return out;
  }

  std::size_t parameter_element_count() const {
    std::size_t n = 0;
    for (auto& [name, t] : named_parameters()) n += t.size();
    return n;
  }

  void zero_grad() {
    for (auto& t : parameters()) t.zero_grad();
  }

  // Fixed names for weight-decay exclusion: biases and layer-norm params.
  static bool is_decay_exempt(const std::string& name) {
    auto ends_with = [&](const char* suf) {
      std::string s(suf);
      return name.size() >= s.size() &&
             name.compare(name.size() - s.size(), s.size(), s) == 0;
    };
    return ends_with(".bias") || ends_with(".gamma") || ends_with(".beta") ||
           ends_with(".bq") || ends_with(".bk") || ends_with(".bv") ||
           ends_with(".bo") || ends_with(".b1") || ends_with(".b2") ||
           ends_with(".out_bias");
  }

 private:
  static Tensor init_weight(Rng& rng, std::size_t rows, std::size_t cols) {
    // truncated normal, std 0.02, resampling beyond two sigma
    std::normal_distribution<double> norm(0.0, 0.02);
    Tensor t = Tensor::zeros({rows, cols}, /*requires_grad=*/true);
    for (auto& v : t.data()) {
      double d;
      do {
        d = norm(rng);
      } while (std::abs(d) > 0.04);
      v = Real(d);
    }
    return t;
  }

  ModelConfig cfg_;
  Rng dropout_rng_;

  Tensor tok_emb_, pos_emb_, seg_emb_;
  LayerNormParams emb_ln_;
  Tensor proj_w_, proj_b_;
  std::vector<std::shared_ptr<AttentionParams>> attn_groups_;
  std::vector<std::shared_ptr<FfnParams>> ffn_groups_;
  std::vector<std::shared_ptr<AttentionParams>> attn_;  // per layer aliases
  std::vector<std::shared_ptr<FfnParams>> ffn_;
  std::vector<LayerNormParams> ln1_, ln2_;
  Tensor mlm_w_, mlm_b_;
  LayerNormParams mlm_ln_;
  Tensor mlm_out_bias_;
  Tensor cls_w_, cls_b_;
};

}  // namespace tess
