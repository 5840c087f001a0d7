#pragma once

#include <zlib.h>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "tess/model.hpp"
#include "tess/pretrain.hpp"
#include "tess/tokenizer.hpp"

namespace tess {

// ---------------------------------------------------------------------------
// Classification datasets (JSON lines: text_a, optional text_b, int label)

struct ClassificationExample {
  std::string text_a;
  std::optional<std::string> text_b;
  int label = 0;
};

using ClassificationDataset = std::vector<ClassificationExample>;

inline ClassificationDataset load_classification_dataset(
    const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open dataset file: " + path);
  ClassificationDataset out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    auto fail = [&](const std::string& what) {
      throw InputError(path + ":" + std::to_string(line_no) + ": " + what);
    };
    if (j.is_discarded()) fail("malformed JSON");
    if (!j.contains("text_a")) fail("missing field: text_a");
    if (!j["text_a"].is_string()) fail("field text_a must be a string");
    if (!j.contains("label")) fail("missing field: label");
    if (!j["label"].is_number_integer() || j["label"].get<long long>() < 0)
      fail("field label must be a non-negative integer");
    ClassificationExample ex;
    ex.text_a = j["text_a"].get<std::string>();
    if (ex.text_a.empty()) fail("field text_a must be non-empty");
    if (j.contains("text_b") && !j["text_b"].is_null()) {
      if (!j["text_b"].is_string()) fail("field text_b must be a string or null");
      ex.text_b = j["text_b"].get<std::string>();
    }
    ex.label = j["label"].get<int>();
    out.push_back(std::move(ex));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pretraining corpora: directories of UTF-8 .txt files, documents separated
// by blank lines. Streaming reader holding at most one document in memory.

namespace detail {

inline void validate_utf8(const std::string& s, const std::string& filename,
                          std::size_t base_offset) {
  std::size_t i = 0;
  while (i < s.size()) {
    unsigned char c = static_cast<unsigned char>(s[i]);
    std::size_t len = 0;
    if ((c & 0x80) == 0)
      len = 1;
    else if ((c & 0xE0) == 0xC0)
      len = 2;
    else if ((c & 0xF0) == 0xE0)
      len = 3;
    else if ((c & 0xF8) == 0xF0)
      len = 4;
    if (len == 0 || i + len > s.size())
      throw InputError("invalid UTF-8 in " + filename + " at byte offset " +
                       std::to_string(base_offset + i));
    for (std::size_t j = 1; j < len; ++j)
      if ((static_cast<unsigned char>(s[i + j]) & 0xC0) != 0x80)
        throw InputError("invalid UTF-8 in " + filename + " at byte offset " +
                         std::to_string(base_offset + i + j));
    i += len;
  }
}

}  // namespace detail

// Streams tokenized documents as padded training sequences of exactly t_max
// positions (real tokens packed per document, up to t_max per sequence).
class CorpusReader {
 public:
  CorpusReader(const std::string& dir, const Vocabulary& vocab,
               std::size_t t_max)
      : vocab_(vocab), t_max_(t_max) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(dir))
      throw InputError("corpus directory not found: " + dir);
    for (const auto& entry : fs::directory_iterator(dir))
      if (entry.is_regular_file() && entry.path().extension() == ".txt")
        files_.push_back(entry.path().string());
    std::sort(files_.begin(), files_.end());
  }

  bool empty_corpus() const { return files_.empty(); }

  // Next training sequence; false at end of corpus.
  bool next(EncodedSequence& out) {
    while (pending_.empty()) {
      if (!next_document()) return false;
    }
    std::size_t n = std::min(pending_.size() - pending_pos_, t_max_);
    out.token_ids.assign(pending_.begin() + static_cast<long>(pending_pos_),
                         pending_.begin() + static_cast<long>(pending_pos_ + n));
    pending_pos_ += n;
    if (pending_pos_ >= pending_.size()) {
      pending_.clear();
      pending_pos_ = 0;
    }
    out.attention_mask.assign(n, 1);
    out.segment_ids.assign(t_max_, 0);
    out.special_mask.assign(n, 0);
    while (out.token_ids.size() < t_max_) {
      out.token_ids.push_back(kPadId);
      out.attention_mask.push_back(0);
      out.special_mask.push_back(1);
    }
    return true;
  }

  std::size_t peak_document_bytes() const { return peak_doc_bytes_; }

 private:
  bool next_document() {
    for (;;) {
      if (!in_.is_open()) {
        if (file_idx_ >= files_.size()) return false;
        current_file_ = files_[file_idx_++];
        in_.open(current_file_, std::ios::binary);
        if (!in_) throw IoError("cannot read corpus file: " + current_file_);
        byte_offset_ = 0;
      }
      std::string doc;
      std::string line;
      bool saw_content = false;
      while (std::getline(in_, line)) {
        std::size_t line_start = byte_offset_;
        byte_offset_ += line.size() + 1;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        detail::validate_utf8(line, current_file_, line_start);
        bool blank = line.find_first_not_of(" \t") == std::string::npos;
        if (blank) {
          if (saw_content) break;
          continue;
        }
        saw_content = true;
        if (!doc.empty()) doc += ' ';
        doc += line;
      }
      if (!saw_content) {
        in_.close();
        continue;
      }
      peak_doc_bytes_ = std::max(peak_doc_bytes_, doc.size());
      pending_ = tokenize(vocab_, doc);
      pending_pos_ = 0;
      if (pending_.empty()) continue;
      return true;
    }
  }

  const Vocabulary& vocab_;
  std::size_t t_max_;
  std::vector<std::string> files_;
  std::size_t file_idx_ = 0;
  std::string current_file_;
  std::ifstream in_;
  std::size_t byte_offset_ = 0;
  std::vector<int> pending_;
  std::size_t pending_pos_ = 0;
  std::size_t peak_doc_bytes_ = 0;
};

// Raw blank-line-delimited documents (for vocabulary training).
inline std::vector<std::string> load_documents(const std::string& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir))
    throw InputError("corpus directory not found: " + dir);
  std::vector<std::string> files;
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.is_regular_file() && entry.path().extension() == ".txt")
      files.push_back(entry.path().string());
  std::sort(files.begin(), files.end());
  std::vector<std::string> docs;
  for (const auto& f : files) {
    std::ifstream in(f, std::ios::binary);
    if (!in) throw IoError("cannot read corpus file: " + f);
    std::string doc, line;
    std::size_t offset = 0;
    while (std::getline(in, line)) {
      std::size_t line_start = offset;
      offset += line.size() + 1;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      detail::validate_utf8(line, f, line_start);
      bool blank = line.find_first_not_of(" \t") == std::string::npos;
      if (blank) {
        if (!doc.empty()) docs.push_back(std::move(doc));
        doc.clear();
      } else {
        if (!doc.empty()) doc += ' ';
        doc += line;
      }
    }
    if (!doc.empty()) docs.push_back(std::move(doc));
  }
  return docs;
}

// Convenience: materialize the whole (desk-scale) corpus.
inline std::vector<EncodedSequence> load_corpus(const std::string& dir,
                                                const Vocabulary& vocab,
                                                std::size_t t_max,
                                                bool* empty_warning = nullptr) {
  CorpusReader reader(dir, vocab, t_max);
  std::vector<EncodedSequence> out;
  EncodedSequence seq;
  while (reader.next(seq)) out.push_back(seq);
  if (empty_warning) *empty_warning = out.empty();
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints: "TESSCKPT" magic, u32 version, u64 JSON header length, JSON
// header (config + tensor table + optional optimizer scalars), raw
// little-endian float32 payload, trailing CRC32 over header + payload.
// Shared parameter groups are stored once under their canonical name.

constexpr char kCheckpointMagic[8] = {'T', 'E', 'S', 'S', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void append_f32(std::string& buf, const std::vector<Real>& v) {
  for (Real x : v) {
    float f = static_cast<float>(x);
    char b[4];
    std::memcpy(b, &f, 4);
    buf.append(b, 4);
  }
}

inline std::vector<Real> read_f32(const std::string& buf, std::size_t offset,
                                  std::size_t count) {
  std::vector<Real> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    float f;
    std::memcpy(&f, buf.data() + offset + 4 * i, 4);
    out[i] = Real(f);
  }
  return out;
}

}  // namespace detail

inline void save_checkpoint(const EncoderModel& model, const AdamW* optimizer,
                            const std::string& path,
                            long long train_step = 0,
                            const std::string& rng_state = "") {
  nlohmann::json header;
  header["format"] = "tess-checkpoint";
  header["version"] = kCheckpointVersion;
  header["config"] = model.config().to_json();

  std::string payload;
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& [name, t] : model.named_parameters()) {
    tensors.push_back({{"name", name},
                       {"shape", t.shape()},
                       {"offset", payload.size()},
                       {"count", t.size()}});
    detail::append_f32(payload, t.data());
  }
  header["tensors"] = tensors;

  if (optimizer) {
    nlohmann::json opt;
    opt["step_count"] = optimizer->step_count();
    opt["train_step"] = train_step;
    opt["rng_state"] = rng_state;
    nlohmann::json slots = nlohmann::json::array();
    for (const auto& s : optimizer->slots()) {
      slots.push_back({{"name", s.name},
                       {"offset", payload.size()},
                       {"count", s.m.size()}});
      detail::append_f32(payload, s.m);
      detail::append_f32(payload, s.v);
    }
    opt["slots"] = slots;
    header["optimizer"] = opt;
  }

  std::string header_str = header.dump();
  std::string blob;
  blob.append(kCheckpointMagic, 8);
  std::uint32_t version = kCheckpointVersion;
  std::uint64_t hlen = header_str.size();
  blob.append(reinterpret_cast<const char*>(&version), 4);
  blob.append(reinterpret_cast<const char*>(&hlen), 8);
  blob += header_str;
  blob += payload;
  std::uint32_t crc = static_cast<std::uint32_t>(
      crc32(crc32(0, reinterpret_cast<const Bytef*>(header_str.data()),
                  static_cast<uInt>(header_str.size())),
            reinterpret_cast<const Bytef*>(payload.data()),
            static_cast<uInt>(payload.size())));
  blob.append(reinterpret_cast<const char*>(&crc), 4);

  std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint: " + tmp);
    out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!out) throw IoError("short write on checkpoint: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

struct LoadedCheckpoint {
  ModelConfig config;
  std::shared_ptr<EncoderModel> model;
  bool has_optimizer = false;
  long long optimizer_step_count = 0;
  long long train_step = 0;
  std::string rng_state;
  nlohmann::json optimizer_slots;  // slot table, payload kept for restore
  std::string payload;
  std::size_t tensor_count = 0;

  // Rebuild optimizer moments into an AdamW constructed over model params.
  void restore_optimizer(AdamW& opt) const {
    if (!has_optimizer)
      throw UsageError("checkpoint has no optimizer state");
    std::size_t i = 0;
    for (auto& slot : opt.slots()) {
      if (i >= optimizer_slots.size())
        throw IoError("checkpoint optimizer slot table too short");
      const auto& j = optimizer_slots[i++];
      if (j["name"].get<std::string>() != slot.name)
        throw IoError("checkpoint optimizer slot mismatch: expected " +
                      slot.name);
      std::size_t count = j["count"].get<std::size_t>();
      std::size_t offset = j["offset"].get<std::size_t>();
      if (count != slot.m.size())
        throw IoError("checkpoint optimizer slot size mismatch for " +
                      slot.name);
      slot.m = detail::read_f32(payload, offset, count);
      slot.v = detail::read_f32(payload, offset + 4 * count, count);
    }
    opt.set_step_count(optimizer_step_count);
  }
};

inline LoadedCheckpoint load_checkpoint(
    const std::string& path,
    const std::optional<ModelConfig>& expected_config = std::nullopt) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path);
  std::string blob((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  if (blob.size() < 8 + 4 + 8 + 4)
    throw IoError("truncated checkpoint: " + path);
  if (std::memcmp(blob.data(), kCheckpointMagic, 8) != 0)
    throw IoError("not a checkpoint file (bad magic): " + path);
  std::uint32_t version;
  std::uint64_t hlen;
  std::memcpy(&version, blob.data() + 8, 4);
  std::memcpy(&hlen, blob.data() + 12, 8);
  if (version != kCheckpointVersion)
    throw IoError("checkpoint version mismatch: file has version " +
                  std::to_string(version) + ", expected " +
                  std::to_string(kCheckpointVersion));
  if (blob.size() < 20 + hlen + 4)
    throw IoError("truncated checkpoint: " + path);
  std::string header_str = blob.substr(20, hlen);
  std::string payload = blob.substr(20 + hlen, blob.size() - 20 - hlen - 4);
  std::uint32_t stored_crc;
  std::memcpy(&stored_crc, blob.data() + blob.size() - 4, 4);
  std::uint32_t crc = static_cast<std::uint32_t>(
      crc32(crc32(0, reinterpret_cast<const Bytef*>(header_str.data()),
                  static_cast<uInt>(header_str.size())),
            reinterpret_cast<const Bytef*>(payload.data()),
            static_cast<uInt>(payload.size())));
  if (crc != stored_crc)
    throw IoError("checkpoint checksum mismatch: " + path);

  nlohmann::json header = nlohmann::json::parse(header_str, nullptr, false);
  if (header.is_discarded())
    throw IoError("checkpoint header is not valid JSON: " + path);

  LoadedCheckpoint out;
  out.config = ModelConfig::from_json(header["config"]);
  if (expected_config && !(*expected_config == out.config))
    throw ConfigError(
        "checkpoint architecture does not match the requested config");
  out.model = std::make_shared<EncoderModel>(out.config, /*seed=*/0);
  auto params = out.model->named_parameters();
  std::size_t idx = 0;
  for (const auto& jt : header["tensors"]) {
    if (idx >= params.size())
      throw IoError("checkpoint has more tensors than the model expects");
    auto& [name, tensor] = params[idx++];
    if (jt["name"].get<std::string>() != name)
      throw IoError("checkpoint tensor order mismatch: expected " + name +
                    ", found " + jt["name"].get<std::string>());
    std::size_t count = jt["count"].get<std::size_t>();
    std::size_t offset = jt["offset"].get<std::size_t>();
    if (count != tensor.size() || offset + 4 * count > payload.size())
      throw IoError("checkpoint tensor payload mismatch for " + name);
    tensor.data() = detail::read_f32(payload, offset, count);
  }
  if (idx != params.size())
    throw IoError("checkpoint is missing model tensors");
  out.tensor_count = idx;

  if (header.contains("optimizer")) {
    out.has_optimizer = true;
    out.optimizer_step_count = header["optimizer"]["step_count"].get<long long>();
    out.train_step = header["optimizer"].value("train_step", 0LL);
    out.rng_state = header["optimizer"].value("rng_state", std::string());
    out.optimizer_slots = header["optimizer"]["slots"];
    out.payload = std::move(payload);
  }
  return out;
}

}  // namespace tess
