#pragma once

// Run configuration: one JSON document describing the data source, split,
// model, training, decoding and harness thresholds.
//
// {
//   "corpus":  {"paths": ["sr1.jsonl", ...], "tasks": ["SR1", "NR1", "TSR1"]},
//   "control": {"kind": "informative", "n_sentences": 300, "vocab_size": 54,
//               "feature_dim": 64, "seed": 1},
//   "split":   {"ratios": [0.8, 0.1, 0.1], "seed": 0, "per_task": true},
//   "vocab_min_freq": 1,
//   "model":   {"d_model": 64, "n_layers_enc": 2, "n_heads": 4, "n_layers_dec": 2,
//               "d_ff": 256, "max_len": 64},
//   "train":   {"batch_size": 4, "learning_rate": 0.1, "epochs": 30, "seed": 1},
//   "decode":  {"beam_size": 5, "repetition_penalty": 5.0, "no_repeat_ngram": 2, "max_len": 32},
//   "harness": {"eval_seed": 0, "samples": 3, "parity_threshold": 3.0,
//               "learning_threshold": 10.0},
//   "output_dir": "runs"
// }
//
// Exactly one of "corpus" and "control" is given. Every other key is optional.
// feature_dim and vocab_size of the model come from the data.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "noisegate/corpus.hpp"
#include "noisegate/decoding.hpp"
#include "noisegate/error.hpp"
#include "noisegate/harness.hpp"
#include "noisegate/model.hpp"

namespace noisegate {

struct CorpusSource {
  std::vector<std::filesystem::path> paths;
  std::vector<SourceTask> tasks;  // empty = keep every task
};

struct RunConfig {
  std::optional<CorpusSource> corpus;
  std::optional<ControlSpec> control;
  SplitRatios ratios;
  std::uint64_t split_seed = 0;
  bool per_task_split = true;
  int vocab_min_freq = 1;
  ModelConfig model;
  TrainConfig train;
  DecodeConfig decode;
  std::uint64_t eval_seed = 0;
  std::size_t samples = 3;
  double parity_threshold = 3.0;
  double learning_threshold = 10.0;
  std::filesystem::path output_dir = "runs";

  // Desk defaults tuned for the synthetic controls.
  static RunConfig desk_control(ControlKind kind) {
    RunConfig rc;
    ControlSpec cs;
    cs.kind = kind;
    cs.n_sentences = 300;
    cs.vocab_size = 54;
    cs.feature_dim = 64;
    cs.seed = 1;
    rc.control = cs;
    return rc;
  }

  void validate() const {
    if (corpus.has_value() == control.has_value())
      throw ConfigError("config needs exactly one of 'corpus' and 'control'");
    if (corpus) {
      if (corpus->paths.empty()) throw ConfigError("corpus.paths is empty");
      for (const auto& p : corpus->paths)
        if (!std::filesystem::exists(p)) throw ConfigError("corpus file not found: " + p.string());
    }
    if (vocab_min_freq < 1) throw ConfigError("vocab_min_freq must be >= 1");
    if (samples == 0) throw ConfigError("harness.samples must be >= 1");
    if (!(parity_threshold > 0) || !(learning_threshold >= 0))
      throw ConfigError("thresholds must be positive");
    train.validate();
    decode.validate();
  }
};

namespace detail {

inline void reject_unknown(const nlohmann::json& obj, const std::set<std::string>& known,
                           const std::string& where) {
  if (!obj.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& [k, v] : obj.items())
    if (!known.contains(k)) throw ConfigError("unknown key '" + k + "' in " + where);
}

template <class T>
void read_opt(const nlohmann::json& obj, const char* key, T& out) {
  if (obj.contains(key)) out = obj.at(key).get<T>();
}

}  // namespace detail

inline RunConfig parse_run_config(const nlohmann::json& j, const std::filesystem::path& base = {}) {
  RunConfig rc;
  try {
    detail::reject_unknown(j,
                           {"corpus", "control", "split", "vocab_min_freq", "model", "train",
                            "decode", "harness", "output_dir"},
                           "config");
    if (j.contains("corpus")) {
      const auto& c = j["corpus"];
      detail::reject_unknown(c, {"paths", "tasks"}, "corpus");
      CorpusSource src;
      for (const auto& p : c.at("paths")) {
        std::filesystem::path path = p.get<std::string>();
        src.paths.push_back(path.is_relative() && !base.empty() ? base / path : path);
      }
      if (c.contains("tasks"))
        for (const auto& t : c["tasks"]) src.tasks.push_back(parse_source_task(t.get<std::string>()));
      rc.corpus = std::move(src);
    }
    if (j.contains("control")) {
      const auto& c = j["control"];
      detail::reject_unknown(c, {"kind", "n_sentences", "vocab_size", "feature_dim", "seed"},
                             "control");
      ControlSpec cs = *RunConfig::desk_control(ControlKind::Uninformative).control;
      if (c.contains("kind")) cs.kind = parse_control_kind(c["kind"].get<std::string>());
      detail::read_opt(c, "n_sentences", cs.n_sentences);
      detail::read_opt(c, "vocab_size", cs.vocab_size);
      detail::read_opt(c, "feature_dim", cs.feature_dim);
      detail::read_opt(c, "seed", cs.seed);
      rc.control = cs;
    }
    if (j.contains("split")) {
      const auto& s = j["split"];
      detail::reject_unknown(s, {"ratios", "seed", "per_task"}, "split");
      if (s.contains("ratios")) {
        const auto r = s["ratios"].get<std::vector<double>>();
        if (r.size() != 3) throw ConfigError("split.ratios needs three values");
        rc.ratios = {r[0], r[1], r[2]};
      }
      detail::read_opt(s, "seed", rc.split_seed);
      detail::read_opt(s, "per_task", rc.per_task_split);
    }
    detail::read_opt(j, "vocab_min_freq", rc.vocab_min_freq);
    if (j.contains("model")) {
      const auto& m = j["model"];
      detail::reject_unknown(m, {"d_model", "n_layers_enc", "n_heads", "n_layers_dec", "d_ff", "max_len"},
                             "model");
      detail::read_opt(m, "d_model", rc.model.d_model);
      rc.model.d_ff = 4 * rc.model.d_model;
      detail::read_opt(m, "n_layers_enc", rc.model.n_layers_enc);
      detail::read_opt(m, "n_heads", rc.model.n_heads);
      detail::read_opt(m, "n_layers_dec", rc.model.n_layers_dec);
      detail::read_opt(m, "d_ff", rc.model.d_ff);
      detail::read_opt(m, "max_len", rc.model.max_len);
    }
    if (j.contains("train")) {
      const auto& t = j["train"];
      detail::reject_unknown(t, {"batch_size", "learning_rate", "epochs", "seed"}, "train");
      detail::read_opt(t, "batch_size", rc.train.batch_size);
      detail::read_opt(t, "learning_rate", rc.train.learning_rate);
      detail::read_opt(t, "epochs", rc.train.epochs);
      detail::read_opt(t, "seed", rc.train.seed);
    }
    if (j.contains("decode")) {
      const auto& d = j["decode"];
      detail::reject_unknown(d, {"beam_size", "repetition_penalty", "no_repeat_ngram", "max_len"},
                             "decode");
      detail::read_opt(d, "beam_size", rc.decode.beam_size);
      detail::read_opt(d, "repetition_penalty", rc.decode.repetition_penalty);
      detail::read_opt(d, "no_repeat_ngram", rc.decode.no_repeat_ngram);
      detail::read_opt(d, "max_len", rc.decode.max_len);
    }
    if (j.contains("harness")) {
      const auto& h = j["harness"];
      detail::reject_unknown(h, {"eval_seed", "samples", "parity_threshold", "learning_threshold"},
                             "harness");
      detail::read_opt(h, "eval_seed", rc.eval_seed);
      detail::read_opt(h, "samples", rc.samples);
      detail::read_opt(h, "parity_threshold", rc.parity_threshold);
      detail::read_opt(h, "learning_threshold", rc.learning_threshold);
    }
    if (j.contains("output_dir")) rc.output_dir = j["output_dir"].get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  } catch (const DataError& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return rc;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path.string() + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return parse_run_config(j, path.parent_path());
}

inline nlohmann::json to_json(const RunConfig& rc) {
  nlohmann::json j;
  if (rc.corpus) {
    std::vector<std::string> paths, tasks;
    for (const auto& p : rc.corpus->paths) paths.push_back(p.string());
    for (auto t : rc.corpus->tasks) tasks.push_back(to_string(t));
    j["corpus"] = {{"paths", paths}, {"tasks", tasks}};
  }
  if (rc.control)
    j["control"] = {{"kind", to_string(rc.control->kind)},
                    {"n_sentences", rc.control->n_sentences},
                    {"vocab_size", rc.control->vocab_size},
                    {"feature_dim", rc.control->feature_dim},
                    {"seed", rc.control->seed}};
  j["split"] = {{"ratios", {rc.ratios.train, rc.ratios.dev, rc.ratios.test}},
                {"seed", rc.split_seed},
                {"per_task", rc.per_task_split}};
  j["vocab_min_freq"] = rc.vocab_min_freq;
  j["model"] = {{"d_model", rc.model.d_model},       {"n_layers_enc", rc.model.n_layers_enc},
                {"n_heads", rc.model.n_heads},       {"n_layers_dec", rc.model.n_layers_dec},
                {"d_ff", rc.model.d_ff},             {"max_len", rc.model.max_len}};
  j["train"] = to_json(rc.train);
  j["decode"] = to_json(rc.decode);
  j["harness"] = {{"eval_seed", rc.eval_seed},
                  {"samples", rc.samples},
                  {"parity_threshold", rc.parity_threshold},
                  {"learning_threshold", rc.learning_threshold}};
  j["output_dir"] = rc.output_dir.string();
  return j;
}

inline HarnessConfig harness_config(const RunConfig& rc, std::size_t feature_dim,
                                    std::size_t vocab_size) {
  HarnessConfig hc;
  hc.model = rc.model;
  hc.model.feature_dim = feature_dim;
  hc.model.vocab_size = vocab_size;
  hc.train = rc.train;
  hc.decode = rc.decode;
  hc.eval_seed = rc.eval_seed;
  hc.samples = rc.samples;
  hc.parity_threshold = rc.parity_threshold;
  hc.learning_threshold = rc.learning_threshold;
  hc.vocab_min_freq = rc.vocab_min_freq;
  return hc;
}

// Loads, filters and merges the configured corpus files, or generates the control.
inline Corpus build_corpus(const RunConfig& rc) {
  if (rc.control) return gen_synthetic_control(*rc.control);
  std::vector<Corpus> parts;
  for (const auto& p : rc.corpus->paths) parts.push_back(filter_invalid(load_corpus(p)));
  Corpus merged = merge_tasks(parts);
  if (!rc.corpus->tasks.empty()) {
    std::erase_if(merged.pairs, [&](const SentencePair& sp) {
      return std::find(rc.corpus->tasks.begin(), rc.corpus->tasks.end(), sp.source_task) ==
             rc.corpus->tasks.end();
    });
    if (merged.empty()) throw DataError("no sentences left after task filtering");
  }
  return merged;
}

inline SplitDataset build_split(const RunConfig& rc, const Corpus& c) {
  return rc.per_task_split ? split_per_task(c, rc.ratios, rc.split_seed)
                           : split_corpus(c, rc.ratios, rc.split_seed);
}

}  // namespace noisegate
