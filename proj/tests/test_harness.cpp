#include <regex>

#include <gtest/gtest.h>

#include "noisegate/harness.hpp"
#include "test_util.hpp"

using namespace noisegate;

namespace {

constexpr auto S = InputKind::Signal;
constexpr auto N = InputKind::Noise;
constexpr auto TF = DecodingMode::TeacherForced;
constexpr auto FR = DecodingMode::FreeRunning;

struct Fixture {
  SplitDataset split;
  Vocabulary vocab;
  HarnessConfig hc;
};

Fixture small_setup(ControlKind kind = ControlKind::Uninformative) {
  Fixture f;
  f.split = split_corpus(gen_synthetic_control({kind, 40, 16, 16, 3}), {}, 3);
  f.vocab = build_vocab(f.split.train, 1);
  f.hc.model = ModelConfig::desk(16, f.vocab.size());
  f.hc.model.d_model = 16;
  f.hc.model.d_ff = 32;
  f.hc.model.n_layers_enc = 1;
  f.hc.model.n_layers_dec = 1;
  f.hc.train.epochs = 3;
  f.hc.decode.max_len = 12;
  f.hc.eval_seed = 5;
  return f;
}

CellResult fake_cell(InputKind tr, InputKind ev, DecodingMode m, double bleu1) {
  CellResult r;
  r.cell = {tr, ev, m};
  r.metrics.bleu = {bleu1, bleu1 / 2, bleu1 / 3, bleu1 / 4};
  r.metrics.rouge1_f = bleu1;
  r.metrics.wer = 100 - bleu1;
  return r;
}

MatrixReport report_with_outputs(const std::vector<std::string>& hyps) {
  MatrixReport rep;
  rep.run_id = "t";
  for (const auto& c : all_cells()) {
    CellResult r;
    r.cell = c;
    for (const auto& h : hyps) r.outputs.push_back({"ref text here", h});
    rep.cells.push_back(r);
  }
  return rep;
}

std::size_t count_lines(const std::string& s) { return std::count(s.begin(), s.end(), '\n'); }

}  // namespace

TEST(Cells, OrderAndKeys) {
  const auto cells = all_cells();
  ASSERT_EQ(cells.size(), 8u);
  EXPECT_EQ(cells[0].key(), "signal_signal_tf");
  EXPECT_EQ(cells[1].key(), "signal_noise_tf");
  EXPECT_EQ(cells[2].key(), "noise_signal_tf");
  EXPECT_EQ(cells[7].key(), "noise_noise_free");
  EXPECT_EQ(mode_label(TF), "teacher_forced");
  EXPECT_EQ(mode_label(FR), "free_running");
}

TEST(ComputeGap, DeltasInflationAndFlags) {
  std::vector<CellResult> cells;
  for (auto m : {TF, FR}) {
    const double base = m == TF ? 60.0 : 20.0;
    cells.push_back(fake_cell(S, S, m, base));
    cells.push_back(fake_cell(S, N, m, base - 1.0));
    cells.push_back(fake_cell(N, S, m, base - 2.0));
    cells.push_back(fake_cell(N, N, m, base - 2.5));
  }
  auto g = compute_gap(cells, 3.0, 10.0);
  EXPECT_DOUBLE_EQ(g.teacher_forced.delta_eval[0], 1.0);
  EXPECT_DOUBLE_EQ(g.free_running.delta_train[0], 2.0);
  EXPECT_DOUBLE_EQ(g.free_running.delta_train[7], -2.0);
  EXPECT_DOUBLE_EQ(g.tf_inflation, 3.0);
  EXPECT_TRUE(g.parity);
  EXPECT_FALSE(g.learns_from_input);

  cells[6] = fake_cell(N, S, FR, 5.0);  // free-running delta_train 15
  g = compute_gap(cells, 3.0, 10.0);
  EXPECT_TRUE(g.learns_from_input);
  EXPECT_FALSE(g.parity);
  EXPECT_THROW(compute_gap({cells[0]}, 3.0, 10.0), Error);
}

TEST(ComputeGap, ZeroFreeRunningBleuDoesNotDivideByZero) {
  std::vector<CellResult> cells;
  for (const auto& c : all_cells()) cells.push_back(fake_cell(c.train_input, c.eval_input, c.mode, 0.0));
  cells[0].metrics.bleu[0] = 5.0;
  EXPECT_TRUE(std::isfinite(compute_gap(cells, 3.0, 10.0).tf_inflation));
}

TEST(RunCell, ModesShareOneTrainedModel) {
  auto f = small_setup();
  TrainedCache cache;
  run_cell(f.split, {S, S, TF}, f.vocab, f.hc, cache);
  run_cell(f.split, {S, N, FR}, f.vocab, f.hc, cache);
  EXPECT_EQ(cache.trainings, 1u);
  run_cell(f.split, {N, S, TF}, f.vocab, f.hc, cache);
  EXPECT_EQ(cache.trainings, 2u);
  EXPECT_TRUE(cache.models.contains(N));
}

TEST(RunCell, NoiseEvaluationIsDeterministic) {
  auto f = small_setup();
  TrainedCache a, b;
  const auto ra = run_cell(f.split, {S, N, FR}, f.vocab, f.hc, a);
  const auto rb = run_cell(f.split, {S, N, FR}, f.vocab, f.hc, b);
  EXPECT_EQ(ra.metrics, rb.metrics);
  ASSERT_EQ(ra.outputs.size(), f.split.test.size());
  for (std::size_t i = 0; i < ra.outputs.size(); ++i) {
    EXPECT_EQ(ra.outputs[i].hypothesis, rb.outputs[i].hypothesis);
    EXPECT_EQ(ra.outputs[i].reference, f.split.test.pairs[i].text);
  }
}

TEST(RunCell, EmptyTestSplitRejected) {
  auto f = small_setup();
  f.split.test.pairs.clear();
  TrainedCache cache;
  EXPECT_THROW(run_cell(f.split, {S, S, TF}, f.vocab, f.hc, cache), DataError);
}

TEST(RunMatrix, EightCellsTwoTrainings) {
  auto f = small_setup();
  TrainedCache cache;
  const auto rep = run_matrix(f.split, f.vocab, f.hc, "unit", &cache);
  EXPECT_EQ(cache.trainings, 2u);
  ASSERT_EQ(rep.cells.size(), 8u);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_EQ(rep.cells[i].cell, all_cells()[i]);
  EXPECT_EQ(rep.config["train"]["epochs"], 3);
  EXPECT_EQ(rep.run_id, "unit");
}

TEST(ModeCollapse, IdenticalAndDistinctOutputs) {
  auto same = mode_collapse_scan(report_with_outputs({"a b c", "a b d", "A B"}));
  ASSERT_EQ(same.size(), 4u);
  for (const auto& s : same) {
    EXPECT_EQ(s.cell.mode, FR);
    EXPECT_EQ(s.prefix, "a b");
    EXPECT_DOUBLE_EQ(s.frequency, 1.0);
  }
  auto distinct = mode_collapse_scan(report_with_outputs({"a b", "a c", "b a", "c"}));
  for (const auto& s : distinct) {
    EXPECT_DOUBLE_EQ(s.frequency, 0.25);
    EXPECT_EQ(s.prefix, "a b");
  }
}

TEST(Render, CsvHeaderRowsAndRoundTrip) {
  MatrixReport rep = report_with_outputs({"x"});
  for (std::size_t i = 0; i < 8; ++i) rep.cells[i].metrics = fake_cell(S, S, TF, 10.0 * i + 0.123).metrics;
  const auto csv = render_csv(rep);
  EXPECT_EQ(csv.substr(0, csv.find('\n')),
            "train_input,eval_input,mode,bleu1,bleu2,bleu3,bleu4,rouge1_p,rouge1_r,rouge1_f,wer");
  EXPECT_EQ(count_lines(csv), 9u);
  EXPECT_NE(csv.find("\nsignal,noise,teacher_forced,10.12,5.06,3.37,2.53,0.00,0.00,10.12,89.88\n"),
            std::string::npos)
      << csv;
  const auto rows = parse_report_csv(csv);
  ASSERT_EQ(rows.size(), 8u);
  for (std::size_t i = 0; i < 8; ++i) {
    EXPECT_EQ(rows[i].cell, all_cells()[i]);
    const auto want = metric_values(rep.cells[i].metrics);
    for (std::size_t k = 0; k < 8; ++k) EXPECT_NEAR(rows[i].values[k], want[k], 0.005 + 1e-12);
  }
  EXPECT_THROW(parse_report_csv("bad header\n"), DataError);
}

TEST(Render, MarkdownHasCellsGapAndSamples) {
  MatrixReport rep = report_with_outputs({"h1", "h2", "h3", "h4"});
  const auto md = render_markdown(rep);
  EXPECT_EQ(std::count(md.begin(), md.end(), '\n') > 20, true);
  const std::regex row(R"(\| (w/tf|free) \| (Signal|Noise) \| (Signal|Noise) \|)");
  EXPECT_EQ(std::distance(std::sregex_iterator(md.begin(), md.end(), row), std::sregex_iterator()), 8);
  EXPECT_NE(md.find("## Signal-vs-noise gap"), std::string::npos);
  EXPECT_NE(md.find("## Mode collapse"), std::string::npos);
  EXPECT_NE(md.find("### Sample 3"), std::string::npos);
  EXPECT_EQ(md.find("### Sample 4"), std::string::npos);
  EXPECT_NE(md.find("- Ground truth: ref text here"), std::string::npos);
  EXPECT_NE(md.find("- free Noise/Signal: h2"), std::string::npos);
}

TEST(Artifacts, PersistAndReload) {
  testutil::TempDir dir("run");
  auto f = small_setup();
  TrainedCache cache;
  const auto rep = run_matrix(f.split, f.vocab, f.hc, "fixed-id", &cache);
  const auto run_dir = persist_report(dir.path(), rep);
  persist_models(run_dir, cache, f.vocab);
  for (const char* name : {"config.json", "report.md", "report.csv", "vocab.json", "model_signal.bin",
                           "model_noise.bin", "model_signal.history.json", "cells/noise_noise_free.jsonl"})
    EXPECT_TRUE(std::filesystem::exists(run_dir / name)) << name;
  EXPECT_EQ(load_vocab(run_dir / "vocab.json"), f.vocab);
  const auto ck = load_checkpoint(run_dir / "model_signal.bin");
  EXPECT_EQ(ck.params, cache.models.at(S).params);
  EXPECT_EQ(ck.vocab_fingerprint, f.vocab.fingerprint());

  const auto back = load_run(run_dir);
  EXPECT_EQ(back.run_id, "fixed-id");
  ASSERT_EQ(back.cells.size(), 8u);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_EQ(back.cells[i].metrics, rep.cells[i].metrics);
  EXPECT_EQ(render_csv(back), render_csv(rep));
  EXPECT_EQ(render_markdown(back), render_markdown(rep));
  EXPECT_THROW(load_run(dir / "missing"), DataError);
}

TEST(Artifacts, RunIdShape) {
  const auto id = make_run_id(nlohmann::json{{"a", 1}});
  EXPECT_TRUE(std::regex_match(id, std::regex(R"(\d{8}T\d{6}Z-[0-9a-f]{8})"))) << id;
}
