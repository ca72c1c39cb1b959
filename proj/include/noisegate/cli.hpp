#pragma once

// Command-line front end: ingest, matrix, score, report.
// Exit codes: 0 success, 1 usage/config/data error, 2 training divergence.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "noisegate/config.hpp"
#include "noisegate/corpus.hpp"
#include "noisegate/error.hpp"
#include "noisegate/harness.hpp"
#include "noisegate/metrics.hpp"

namespace noisegate::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitError = 1;
inline constexpr int kExitDiverged = 2;
inline constexpr const char* kRunsDirEnv = "NOISEGATE_RUNS_DIR";

struct IngestArgs {
  std::vector<std::string> inputs;
  std::string output;
};

// Validates, filters and merges corpus files into one canonical corpus.
inline int cmd_ingest(const IngestArgs& a, std::ostream& out, std::ostream& err) {
  try {
    std::vector<Corpus> kept;
    std::map<std::string, std::pair<std::size_t, std::size_t>> counts;  // task -> retained, dropped
    std::vector<std::string> task_order;
    for (const auto& in : a.inputs) {
      if (!std::filesystem::exists(in)) throw DataError("input file not found: " + in);
      const Corpus raw = load_corpus(in);
      for (const auto& p : raw.pairs) {
        const auto task = to_string(p.source_task);
        if (!counts.contains(task)) task_order.push_back(task);
        auto& [retained, dropped] = counts[task];
        (is_valid_pair(p) ? retained : dropped) += 1;
      }
      kept.push_back(filter_invalid(raw));
    }
    const Corpus merged = merge_tasks(kept);
    if (!a.output.empty()) save_corpus(a.output, merged);
    for (const auto& t : task_order)
      out << t << ": retained " << counts[t].first << ", dropped " << counts[t].second << "\n";
    out << "total: retained " << merged.size() << "\n";
    return kExitOk;
  } catch (const Error& e) {
    err << "ingest: " << e.what() << "\n";
    return kExitError;
  }
}

struct MatrixArgs {
  std::string config;
  std::string control;  // "", "informative", "uninformative"
  std::string run_id;
  std::string out_dir;
  bool dry_run = false;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs;
  bool quiet = false;
};

inline RunConfig resolve_run_config(const MatrixArgs& a) {
  RunConfig rc;
  if (!a.config.empty())
    rc = load_run_config(a.config);
  else if (!a.control.empty())
    rc = RunConfig::desk_control(parse_control_kind(a.control));
  else
    throw ConfigError("matrix needs --config or --control");
  if (!a.control.empty()) {
    const auto kind = parse_control_kind(a.control);
    if (!rc.control) {
      rc.control = RunConfig::desk_control(kind).control;
      rc.corpus.reset();
    }
    rc.control->kind = kind;
  }
  if (const char* env = std::getenv(kRunsDirEnv); env && *env) rc.output_dir = env;
  if (!a.out_dir.empty()) rc.output_dir = a.out_dir;
  if (a.seed) {
    rc.train.seed = *a.seed;
    rc.split_seed = *a.seed;
    rc.eval_seed = *a.seed;
    if (rc.control) rc.control->seed = *a.seed;
  }
  if (a.epochs) rc.train.epochs = *a.epochs;
  rc.validate();
  return rc;
}

// split -> run_matrix -> persist -> print the markdown report.
inline int cmd_matrix(const MatrixArgs& a, std::ostream& out, std::ostream& err) {
  try {
    const RunConfig rc = resolve_run_config(a);
    const nlohmann::json snapshot = to_json(rc);
    const std::string run_id = a.run_id.empty() ? make_run_id(snapshot) : a.run_id;

    if (a.dry_run) {
      out << "run " << run_id << " (dry run)\n";
      out << "seeds: split=" << rc.split_seed << " train=" << rc.train.seed
          << " train_noise=" << rc.train.seed + kTrainNoiseSeedOffset
          << " dev_noise=" << rc.train.seed + kDevNoiseSeedOffset
          << " eval_noise=" << rc.eval_seed + kEvalNoiseSeedOffset;
      if (rc.control) out << " control=" << rc.control->seed;
      out << "\n";
      for (const auto& c : all_cells())
        out << "cell " << to_string(c.train_input) << " " << to_string(c.eval_input) << " "
            << mode_label(c.mode) << "\n";
      return kExitOk;
    }

    const Corpus corpus = build_corpus(rc);
    const SplitDataset split = build_split(rc, corpus);
    const Vocabulary vocab = build_vocab(split.train, rc.vocab_min_freq);
    const HarnessConfig hc = harness_config(rc, corpus.feature_dim, vocab.size());

    TrainedCache cache;
    MatrixReport report = run_matrix(split, vocab, hc, run_id, &cache);
    report.config["run_config"] = snapshot;
    const auto dir = persist_report(rc.output_dir, report);
    persist_models(dir, cache, vocab);
    if (!a.quiet) out << render_markdown(report);
    out << "artifacts: " << dir.string() << "\n";
    return kExitOk;
  } catch (const DivergenceError& e) {
    err << "matrix: " << e.what() << "\n";
    return kExitDiverged;
  } catch (const Error& e) {
    err << "matrix: " << e.what() << "\n";
    return kExitError;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "matrix: " << e.what() << "\n";
    return kExitError;
  }
}

struct ScoreArgs {
  std::string hyp;
  std::string ref;
  bool header = false;
};

inline std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path + "'");
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

// Scores two parallel text files and prints one csv row.
inline int cmd_score(const ScoreArgs& a, std::ostream& out, std::ostream& err) {
  try {
    const auto hyps = read_lines(a.hyp);
    const auto refs = read_lines(a.ref);
    if (hyps.size() != refs.size())
      throw DataError("line count mismatch: " + std::to_string(hyps.size()) + " hypotheses, " +
                      std::to_string(refs.size()) + " references");
    const auto m = score_cell(hyps, refs);
    if (a.header) out << "bleu1,bleu2,bleu3,bleu4,rouge1_p,rouge1_r,rouge1_f,wer\n";
    out << metrics_csv_row(m) << "\n";
    return kExitOk;
  } catch (const Error& e) {
    err << "score: " << e.what() << "\n";
    return kExitError;
  }
}

struct ReportArgs {
  std::string run_dir;
  std::string format = "markdown";
};

// Re-renders a report from a run directory's stored outputs.
inline int cmd_report(const ReportArgs& a, std::ostream& out, std::ostream& err) {
  try {
    if (a.format != "markdown" && a.format != "csv")
      throw ConfigError("unknown report format '" + a.format + "'");
    const auto report = load_run(a.run_dir);
    out << render_report(report, a.format == "csv" ? ReportFormat::Csv : ReportFormat::Markdown);
    return kExitOk;
  } catch (const Error& e) {
    err << "report: " << e.what() << "\n";
    return kExitError;
  }
}

// Parses argv and dispatches to a subcommand.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout,
               std::ostream& err = std::cerr) {
  CLI::App app{"noisegate: signal-vs-noise evaluation harness for brain-to-text decoders"};
  app.require_subcommand(1);

  IngestArgs ingest;
  auto* c_ingest = app.add_subcommand("ingest", "validate, filter and merge corpus files");
  c_ingest->add_option("--in", ingest.inputs, "input JSON-Lines corpus files")->required();
  c_ingest->add_option("--out", ingest.output, "merged output corpus");

  MatrixArgs matrix;
  std::uint64_t seed = 0;
  std::size_t epochs = 0;
  auto* c_matrix = app.add_subcommand("matrix", "run the 8-cell evaluation matrix");
  c_matrix->add_option("--config", matrix.config, "run configuration (JSON)");
  c_matrix->add_option("--control", matrix.control, "synthetic control: informative|uninformative");
  c_matrix->add_option("--run-id", matrix.run_id, "fixed run id (reproducible artifacts)");
  c_matrix->add_option("--out", matrix.out_dir, "output root (overrides config and environment)");
  auto* o_seed = c_matrix->add_option("--seed", seed, "master seed override");
  auto* o_epochs = c_matrix->add_option("--epochs", epochs, "epoch count override");
  c_matrix->add_flag("--dry-run", matrix.dry_run, "print planned cells and seeds only");
  c_matrix->add_flag("--quiet", matrix.quiet, "do not print the markdown report");

  ScoreArgs score;
  auto* c_score = app.add_subcommand("score", "score hypothesis/reference text files");
  c_score->add_option("--hyp", score.hyp, "hypotheses, one per line")->required();
  c_score->add_option("--ref", score.ref, "references, one per line")->required();
  c_score->add_flag("--header", score.header, "print a csv header line first");

  ReportArgs report;
  auto* c_report = app.add_subcommand("report", "re-render a report from a run directory");
  c_report->add_option("--run", report.run_dir, "run directory")->required();
  c_report->add_option("--format", report.format, "markdown|csv");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitError;
  }

  if (*c_ingest) return cmd_ingest(ingest, out, err);
  if (*c_matrix) {
    if (*o_seed) matrix.seed = seed;
    if (*o_epochs) matrix.epochs = epochs;
    return cmd_matrix(matrix, out, err);
  }
  if (*c_score) return cmd_score(score, out, err);
  return cmd_report(report, out, err);
}

}  // namespace noisegate::cli
