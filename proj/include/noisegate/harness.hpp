#pragma once

// The evaluation matrix: {signal, noise} training input x {signal, noise}
// evaluation input x {teacher-forced, free-running} decoding. One model is
// trained per training input and shared by its four cells.

#include <algorithm>
#include <array>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "noisegate/corpus.hpp"
#include "noisegate/decoding.hpp"
#include "noisegate/error.hpp"
#include "noisegate/metrics.hpp"
#include "noisegate/model.hpp"
#include "noisegate/tokenizer.hpp"

namespace noisegate {

struct ScenarioCell {
  InputKind train_input = InputKind::Signal;
  InputKind eval_input = InputKind::Signal;
  DecodingMode mode = DecodingMode::TeacherForced;

  // Stable identifier, also the cell's artifact file stem.
  std::string key() const {
    return to_string(train_input) + "_" + to_string(eval_input) + "_" + to_string(mode);
  }
  friend bool operator==(const ScenarioCell&, const ScenarioCell&) = default;
};

inline std::string mode_label(DecodingMode m) {
  return m == DecodingMode::TeacherForced ? "teacher_forced" : "free_running";
}

// Report order: decoding mode blocks, then (train, eval) rows.
inline std::vector<ScenarioCell> all_cells() {
  std::vector<ScenarioCell> cells;
  for (auto mode : {DecodingMode::TeacherForced, DecodingMode::FreeRunning})
    for (auto tr : {InputKind::Signal, InputKind::Noise})
      for (auto ev : {InputKind::Signal, InputKind::Noise}) cells.push_back({tr, ev, mode});
  return cells;
}

struct Sample {
  std::string reference;
  std::string hypothesis;
};

struct CellResult {
  ScenarioCell cell;
  MetricsReport metrics;
  std::vector<Sample> outputs;  // every test sentence, in test order
  std::size_t sample_count = 3;

  std::span<const Sample> samples() const {
    return {outputs.data(), std::min(sample_count, outputs.size())};
  }
};

inline constexpr std::array<std::string_view, 8> kMetricNames = {
    "bleu1", "bleu2", "bleu3", "bleu4", "rouge1_p", "rouge1_r", "rouge1_f", "wer"};

using MetricVector = std::array<double, 8>;

inline MetricVector metric_values(const MetricsReport& m) {
  return {m.bleu[0], m.bleu[1], m.bleu[2], m.bleu[3], m.rouge1_p, m.rouge1_r, m.rouge1_f, m.wer};
}

inline constexpr double kInflationEpsilon = 1e-9;

struct ModeGap {
  MetricVector delta_eval{};   // (signal, signal) - (signal, noise)
  MetricVector delta_train{};  // (signal, signal) - (noise, signal)
};

struct GapSummary {
  ModeGap teacher_forced;
  ModeGap free_running;
  // Teacher-forced over free-running BLEU-1 in the (signal, signal) cell.
  double tf_inflation = 0.0;
  bool learns_from_input = false;  // free-running delta_train(BLEU-1) > learning threshold
  bool parity = false;             // every BLEU-1 delta within the parity threshold

  const ModeGap& mode(DecodingMode m) const {
    return m == DecodingMode::TeacherForced ? teacher_forced : free_running;
  }
};

struct HarnessConfig {
  ModelConfig model;
  TrainConfig train;
  DecodeConfig decode;
  std::uint64_t eval_seed = 0;
  std::size_t samples = 3;
  double parity_threshold = 3.0;
  double learning_threshold = 10.0;
  int vocab_min_freq = 1;
};

// Seed offset for the noise that replaces test features in noise-evaluated cells.
inline constexpr std::uint64_t kEvalNoiseSeedOffset = 2001;

inline nlohmann::json to_json(const HarnessConfig& h) {
  return {{"model", to_json(h.model)},
          {"train", to_json(h.train)},
          {"decode", to_json(h.decode)},
          {"eval_seed", h.eval_seed},
          {"samples", h.samples},
          {"parity_threshold", h.parity_threshold},
          {"learning_threshold", h.learning_threshold},
          {"vocab_min_freq", h.vocab_min_freq}};
}

struct MatrixReport {
  std::string run_id;
  nlohmann::json config;
  std::vector<CellResult> cells;
  GapSummary gap;

  const CellResult& cell(const ScenarioCell& c) const {
    for (const auto& r : cells)
      if (r.cell == c) return r;
    throw Error("report has no cell " + c.key());
  }
};

inline GapSummary compute_gap(const std::vector<CellResult>& cells, double parity_threshold,
                              double learning_threshold) {
  auto find = [&](InputKind tr, InputKind ev, DecodingMode m) -> const MetricsReport& {
    for (const auto& r : cells)
      if (r.cell == ScenarioCell{tr, ev, m}) return r.metrics;
    throw Error("gap summary needs cell " + ScenarioCell{tr, ev, m}.key());
  };
  constexpr auto S = InputKind::Signal, N = InputKind::Noise;
  GapSummary g;
  for (auto m : {DecodingMode::TeacherForced, DecodingMode::FreeRunning}) {
    ModeGap& mg = m == DecodingMode::TeacherForced ? g.teacher_forced : g.free_running;
    const auto ss = metric_values(find(S, S, m));
    const auto sn = metric_values(find(S, N, m));
    const auto ns = metric_values(find(N, S, m));
    for (std::size_t i = 0; i < ss.size(); ++i) {
      mg.delta_eval[i] = ss[i] - sn[i];
      mg.delta_train[i] = ss[i] - ns[i];
    }
  }
  g.tf_inflation = find(S, S, DecodingMode::TeacherForced).bleu[0] /
                   std::max(find(S, S, DecodingMode::FreeRunning).bleu[0], kInflationEpsilon);
  g.learns_from_input = g.free_running.delta_train[0] > learning_threshold;
  g.parity = true;
  for (const ModeGap* mg : {&g.teacher_forced, &g.free_running})
    g.parity = g.parity && std::abs(mg->delta_eval[0]) < parity_threshold &&
               std::abs(mg->delta_train[0]) < parity_threshold;
  return g;
}

// Trained models keyed by training input, so decoding modes share one model.
struct TrainedCache {
  std::map<InputKind, TrainedModel> models;
  std::size_t trainings = 0;
};

namespace detail {

inline const TrainedModel& trained_for(InputKind kind, const SplitDataset& split,
                                       const Vocabulary& vocab, const HarnessConfig& hc,
                                       TrainedCache& cache) {
  auto it = cache.models.find(kind);
  if (it != cache.models.end()) return it->second;
  ++cache.trainings;
  return cache.models.emplace(kind, train(hc.model, hc.train, split, kind, vocab)).first->second;
}

}  // namespace detail

// Trains (or reuses) the model for the cell's training input, generates for
// every test sentence, and scores the cell.
inline CellResult run_cell(const SplitDataset& split, const ScenarioCell& cell,
                           const Vocabulary& vocab, const HarnessConfig& hc, TrainedCache& cache) {
  if (split.test.empty()) throw DataError("cell " + cell.key() + ": test split is empty");
  try {
    const TrainedModel& tm = detail::trained_for(cell.train_input, split, vocab, hc, cache);
    const Corpus eval = cell.eval_input == InputKind::Noise
                            ? make_noise_like(split.test, hc.eval_seed + kEvalNoiseSeedOffset)
                            : split.test;
    CellResult r;
    r.cell = cell;
    r.sample_count = hc.samples;
    std::vector<std::string> hyps, refs;
    for (const auto& p : eval.pairs) {
      TokenSeq out;
      if (cell.mode == DecodingMode::TeacherForced)
        out = teacher_forced_generate(tm.params, p.features, encode(vocab, p.text));
      else
        out = beam_search_generate(tm.params, p.features, hc.decode);
      hyps.push_back(decode(vocab, out));
      refs.push_back(p.text);
      r.outputs.push_back({p.text, hyps.back()});
    }
    r.metrics = score_cell(hyps, refs);
    return r;
  } catch (const DivergenceError& e) {
    throw DivergenceError(e.epoch(), "cell " + cell.key() + ": " + e.what());
  } catch (const Error& e) {
    throw Error("cell " + cell.key() + ": " + e.what());
  }
}

// Runs all eight cells with two trainings and computes the gap summary.
inline MatrixReport run_matrix(const SplitDataset& split, const Vocabulary& vocab,
                               const HarnessConfig& hc, const std::string& run_id,
                               TrainedCache* cache_out = nullptr) {
  hc.model.validate();
  hc.train.validate();
  hc.decode.validate();
  TrainedCache local;
  TrainedCache& cache = cache_out ? *cache_out : local;
  MatrixReport rep;
  rep.run_id = run_id;
  rep.config = to_json(hc);
  for (const auto& cell : all_cells()) rep.cells.push_back(run_cell(split, cell, vocab, hc, cache));
  rep.gap = compute_gap(rep.cells, hc.parity_threshold, hc.learning_threshold);
  return rep;
}

struct PrefixStat {
  ScenarioCell cell;
  std::string prefix;  // first two tokens of the modal opening
  double frequency = 0.0;
};

// For each free-running cell, the most common two-token opening across its
// hypotheses and the fraction of hypotheses that share it. Ties go to the
// lexicographically smallest prefix.
inline std::vector<PrefixStat> mode_collapse_scan(const MatrixReport& report) {
  std::vector<PrefixStat> out;
  for (const auto& r : report.cells) {
    if (r.cell.mode != DecodingMode::FreeRunning || r.outputs.empty()) continue;
    std::map<std::string, std::size_t> counts;
    for (const auto& s : r.outputs) {
      const auto w = words_of(s.hypothesis);
      std::string prefix;
      for (std::size_t i = 0; i < std::min<std::size_t>(2, w.size()); ++i)
        prefix += (i ? " " : "") + w[i];
      ++counts[prefix];
    }
    auto best = counts.begin();
    for (auto it = counts.begin(); it != counts.end(); ++it)
      if (it->second > best->second) best = it;
    out.push_back({r.cell, best->first,
                   static_cast<double>(best->second) / static_cast<double>(r.outputs.size())});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

enum class ReportFormat { Markdown, Csv };

inline constexpr std::string_view kCsvHeader =
    "train_input,eval_input,mode,bleu1,bleu2,bleu3,bleu4,rouge1_p,rouge1_r,rouge1_f,wer";

namespace detail {

inline std::string fixed2(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

inline std::string display(InputKind k) { return k == InputKind::Signal ? "Signal" : "Noise"; }
inline std::string display(DecodingMode m) {
  return m == DecodingMode::TeacherForced ? "w/tf" : "free";
}

}  // namespace detail

inline std::string metrics_csv_row(const MetricsReport& m) {
  std::string row;
  for (double v : metric_values(m)) {
    if (!row.empty()) row += ',';
    row += detail::fixed2(v);
  }
  return row;
}

inline std::string render_csv(const MatrixReport& report) {
  std::ostringstream out;
  out << kCsvHeader << '\n';
  for (const auto& r : report.cells)
    out << to_string(r.cell.train_input) << ',' << to_string(r.cell.eval_input) << ','
        << mode_label(r.cell.mode) << ',' << metrics_csv_row(r.metrics) << '\n';
  return out.str();
}

inline std::string render_markdown(const MatrixReport& report) {
  using detail::display;
  using detail::fixed2;
  std::ostringstream out;
  out << "# Signal vs noise evaluation\n\n";
  out << "Run: `" << report.run_id << "`\n\n";
  out << "| Decoding | Training | Evaluation | BLEU-1 | BLEU-2 | BLEU-3 | BLEU-4 | ROUGE-1 P | "
         "ROUGE-1 R | ROUGE-1 F | WER |\n";
  out << "|---|---|---|---:|---:|---:|---:|---:|---:|---:|---:|\n";
  for (const auto& r : report.cells) {
    out << "| " << display(r.cell.mode) << " | " << display(r.cell.train_input) << " | "
        << display(r.cell.eval_input);
    for (double v : metric_values(r.metrics)) out << " | " << fixed2(v);
    out << " |\n";
  }

  const auto& g = report.gap;
  out << "\n## Signal-vs-noise gap\n\n";
  out << "| Decoding | Delta | BLEU-1 | BLEU-2 | BLEU-3 | BLEU-4 | ROUGE-1 P | ROUGE-1 R | "
         "ROUGE-1 F | WER |\n";
  out << "|---|---|---:|---:|---:|---:|---:|---:|---:|---:|\n";
  for (auto m : {DecodingMode::TeacherForced, DecodingMode::FreeRunning}) {
    const auto& mg = g.mode(m);
    for (int which = 0; which < 2; ++which) {
      out << "| " << display(m) << " | " << (which == 0 ? "eval (S/S - S/N)" : "train (S/S - N/S)");
      for (double v : which == 0 ? mg.delta_eval : mg.delta_train) out << " | " << fixed2(v);
      out << " |\n";
    }
  }
  out << "\nTeacher-forcing inflation (BLEU-1, Signal/Signal): " << fixed2(g.tf_inflation) << "x\n\n";
  out << "Learns from input: " << (g.learns_from_input ? "yes" : "no") << "\n\n";
  out << "Signal/noise parity: " << (g.parity ? "yes" : "no") << "\n";

  out << "\n## Mode collapse (free-running)\n\n";
  out << "| Training | Evaluation | Modal opening | Frequency |\n";
  out << "|---|---|---|---:|\n";
  for (const auto& s : mode_collapse_scan(report))
    out << "| " << display(s.cell.train_input) << " | " << display(s.cell.eval_input) << " | "
        << (s.prefix.empty() ? "(empty)" : s.prefix) << " | " << fixed2(s.frequency) << " |\n";

  out << "\n## Samples\n";
  std::size_t k = 0;
  for (const auto& r : report.cells) k = std::max(k, r.samples().size());
  for (std::size_t i = 0; i < k; ++i) {
    out << "\n### Sample " << (i + 1) << "\n\n";
    for (const auto& r : report.cells) {
      if (i >= r.samples().size()) continue;
      if (&r == &report.cells.front()) out << "- Ground truth: " << r.samples()[i].reference << "\n";
      out << "- " << display(r.cell.mode) << " " << display(r.cell.train_input) << "/"
          << display(r.cell.eval_input) << ": " << r.samples()[i].hypothesis << "\n";
    }
  }
  return out.str();
}

inline std::string render_report(const MatrixReport& report, ReportFormat format) {
  return format == ReportFormat::Csv ? render_csv(report) : render_markdown(report);
}

// Parses render_csv output back into cells and metric values.
struct CsvRow {
  ScenarioCell cell;
  MetricVector values{};
};

inline InputKind parse_input_kind(std::string_view s) {
  if (s == "signal") return InputKind::Signal;
  if (s == "noise") return InputKind::Noise;
  throw DataError("unknown input kind '" + std::string(s) + "'");
}

inline DecodingMode parse_mode_label(std::string_view s) {
  if (s == "teacher_forced" || s == "tf") return DecodingMode::TeacherForced;
  if (s == "free_running" || s == "free") return DecodingMode::FreeRunning;
  throw DataError("unknown decoding mode '" + std::string(s) + "'");
}

inline std::vector<CsvRow> parse_report_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kCsvHeader) throw DataError("unexpected report.csv header");
  std::vector<CsvRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ls(line);
    std::string field;
    while (std::getline(ls, field, ',')) f.push_back(field);
    if (f.size() != 11) throw DataError("report.csv row has " + std::to_string(f.size()) + " fields");
    CsvRow r;
    r.cell = {parse_input_kind(f[0]), parse_input_kind(f[1]), parse_mode_label(f[2])};
    for (std::size_t i = 0; i < 8; ++i) r.values[i] = std::stod(f[3 + i]);
    rows.push_back(r);
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Run artifacts
//
// runs/<run_id>/
//   config.json                      full configuration snapshot
//   vocab.json                       vocabulary built from the training split
//   model_signal.bin, model_noise.bin  checkpoints (+ .history.json sidecars)
//   cells/<train>_<eval>_<mode>.jsonl  {"reference", "hypothesis"} per line
//   report.md, report.csv
// ---------------------------------------------------------------------------

// Timestamp plus a hash of the configuration.
inline std::string make_run_id(const nlohmann::json& config) {
  const auto now = std::chrono::system_clock::now();
  const auto t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char stamp[32];
  std::strftime(stamp, sizeof stamp, "%Y%m%dT%H%M%SZ", &tm);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : config.dump()) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char hex[17];
  std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(h));
  return std::string(stamp) + "-" + std::string(hex, 8);
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << text;
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read '" + path.string() + "'");
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

inline void write_cell_outputs(const std::filesystem::path& dir, const CellResult& r) {
  std::ostringstream out;
  for (const auto& s : r.outputs)
    out << nlohmann::json{{"reference", s.reference}, {"hypothesis", s.hypothesis}}.dump() << '\n';
  write_text(dir / (r.cell.key() + ".jsonl"), out.str());
}

// Writes everything except checkpoints; returns the run directory.
inline std::filesystem::path persist_report(const std::filesystem::path& root,
                                            const MatrixReport& report) {
  const auto dir = root / report.run_id;
  std::filesystem::create_directories(dir / "cells");
  nlohmann::json cfg = report.config;
  cfg["run_id"] = report.run_id;
  write_text(dir / "config.json", cfg.dump(2) + "\n");
  for (const auto& r : report.cells) write_cell_outputs(dir / "cells", r);
  write_text(dir / "report.md", render_markdown(report));
  write_text(dir / "report.csv", render_csv(report));
  return dir;
}

inline void persist_models(const std::filesystem::path& dir, const TrainedCache& cache,
                           const Vocabulary& vocab) {
  std::filesystem::create_directories(dir);
  write_text(dir / "vocab.json", vocab_to_json(vocab).dump(2) + "\n");
  for (const auto& [kind, tm] : cache.models) {
    const std::string stem = "model_" + to_string(kind);
    save_checkpoint(dir / (stem + ".bin"), tm.params, vocab.fingerprint());
    write_text(dir / (stem + ".history.json"), history_to_json(tm).dump(2) + "\n");
  }
}

// Rebuilds a report from a run directory by rescoring the stored outputs.
inline MatrixReport load_run(const std::filesystem::path& dir) {
  MatrixReport rep;
  try {
    rep.config = nlohmann::json::parse(read_text(dir / "config.json"));
    rep.run_id = rep.config.at("run_id").get<std::string>();
    const auto samples = rep.config.at("samples").get<std::size_t>();
    for (const auto& cell : all_cells()) {
      CellResult r;
      r.cell = cell;
      r.sample_count = samples;
      std::istringstream in(read_text(dir / "cells" / (cell.key() + ".jsonl")));
      std::string line;
      std::vector<std::string> hyps, refs;
      while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto j = nlohmann::json::parse(line);
        r.outputs.push_back({j.at("reference").get<std::string>(), j.at("hypothesis").get<std::string>()});
        refs.push_back(r.outputs.back().reference);
        hyps.push_back(r.outputs.back().hypothesis);
      }
      r.metrics = score_cell(hyps, refs);
      rep.cells.push_back(std::move(r));
    }
    rep.gap = compute_gap(rep.cells, rep.config.at("parity_threshold").get<double>(),
                          rep.config.at("learning_threshold").get<double>());
  } catch (const nlohmann::json::exception& e) {
    throw DataError(dir.string() + ": malformed run artifacts (" + e.what() + ")");
  }
  return rep;
}

}  // namespace noisegate
