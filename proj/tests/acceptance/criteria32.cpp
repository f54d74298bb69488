#include <chrono>
#include <cmath>
#include <filesystem>

#include <fmt/format.h>

#include "criteria.hpp"
#include "mlma/pipeline.hpp"

namespace acceptance {
namespace {

using namespace mlma;

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

RunConfig pair_config(AlignmentMode mode) {
  RunConfig cfg = RunConfig::defaults();
  cfg.languages = {"src", "tgt"};
  cfg.sources = {"src"};
  cfg.target = "tgt";
  cfg.task = TaskKind::Pos;
  cfg.align.mode = mode;
  cfg.lm.learning_rate = 2e-3;
  cfg.lm.log_initial = false;
  cfg.train.epochs = 10;
  return cfg;
}

class ScratchDir {
 public:
  ScratchDir() {
    path_ = std::filesystem::temp_directory_path() /
            fmt::format("mlma-acceptance-{}", std::chrono::steady_clock::now().time_since_epoch().count());
    std::filesystem::create_directories(path_);
  }
  ~ScratchDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

// LM learning sanity.

Outcome lm_learning() {
  const auto t0 = std::chrono::steady_clock::now();
  SyntheticPairSpec spec;
  spec.mono_sentences = 500;
  spec.labeled_train = 1;
  spec.labeled_test = 1;
  const auto pair = gen_synthetic_pair(spec, 501);
  RunConfig cfg = pair_config(AlignmentMode::None);
  cfg.languages = {"src"};
  cfg.lm.epochs = 10;
  cfg.lm.batch_tokens = 64;
  RunConfig untrained = cfg;
  untrained.lm.epochs = 0;
  const auto r0 = train_lm(untrained, {pair.mono_source}, 502);
  std::vector<std::vector<TokenId>> ids;
  for (const auto& s : pair.mono_source) ids.push_back(r0.model.vocab(0).encode(s));
  const double before = bidirectional_perplexity(r0.model, ids, 0);
  const auto r = train_lm(cfg, {pair.mono_source}, 502);
  const double after = bidirectional_perplexity(r.model, ids, 0);
  const double secs = seconds_since(t0);
  return {after <= 0.5 * before && secs < 300,
          fmt::format("perplexity {:.1f} -> {:.1f} ({:.1f}% reduction), {:.1f}s", before, after,
                      100 * (1 - after / before), secs)};
}

// Desk-scale transfer analogue.

// Share of random source occurrences whose top-1 target neighbor under
// layer-averaged representations renders the same latent lexeme.
double oracle_top1(const SyntheticPair& pair, const MlmaModel& lm) {
  const std::vector<Sentence> target(pair.mono_target.begin(), pair.mono_target.begin() + 300);
  Rng rng(601);
  std::size_t matched = 0, queried = 0;
  for (int q = 0; q < 40; ++q) {
    const std::size_t s = 1000 + rng.below(1000);
    const std::size_t p = rng.below(pair.mono_source[s].size());
    const std::vector<Sentence> source{pair.mono_source[s]};
    for (const auto& nq : nearest_neighbors(lm, source, "src", target, "tgt", source[0][p], 1)) {
      if (nq.position != p) continue;
      ++queried;
      matched += pair.lexeme_of_target(nq.neighbors[0].token) == pair.lexeme_of_source(source[0][p]);
      break;
    }
  }
  return 100.0 * static_cast<double>(matched) / static_cast<double>(queried);
}

Outcome transfer_gap() {
  const auto t0 = std::chrono::steady_clock::now();
  SyntheticPairSpec spec;
  spec.shared_fraction = 0.1;
  spec.mono_sentences = 5000;
  spec.num_tags = 8;
  double sum_none = 0, sum_avl = 0, nn_none = 0, nn_avl = 0;
  std::string per_seed;
  for (std::uint64_t seed : {1, 2, 3}) {
    const auto pair = gen_synthetic_pair(spec, seed);
    double acc[2], nn[2];
    int i = 0;
    for (auto mode : {AlignmentMode::None, AlignmentMode::Avl}) {
      RunConfig cfg = pair_config(mode);
      cfg.lm.epochs = 8;
      const auto lm = train_lm(cfg, {pair.mono_source, pair.mono_target}, seed);
      const auto tagger = train_tagger(cfg, lm.model, pair.train_source, {}, seed);
      acc[i] = evaluate_tagger(tagger.tagger, lm.model, pair.test_target).metrics.accuracy;
      nn[i++] = oracle_top1(pair, lm.model);
    }
    sum_none += acc[0];
    sum_avl += acc[1];
    nn_none += nn[0] / 3;
    nn_avl += nn[1] / 3;
    per_seed += fmt::format(" seed{}={:.2f}/{:.2f}", seed, acc[0], acc[1]);
  }
  const double none = sum_none / 3, avl = sum_avl / 3, secs = seconds_since(t0);
  return {avl - none >= 15 && secs < 1800,
          fmt::format("target accuracy none {:.2f} vs avl {:.2f}, gap {:+.2f} points (need >= 15);{}; "
                      "neighbor oracle top-1 none {:.1f}% avl {:.1f}%; {:.0f}s",
                      none, avl, avl - none, per_seed, nn_none, nn_avl, secs)};
}

// Identical-string effect.

double shared_string_distance(const MlmaModel& m) {
  const Vocabulary& a = m.vocab(0);
  const Vocabulary& b = m.vocab(1);
  const Tensor ea = m.embedding(0);
  const Tensor eb = m.embedding(1);
  double total = 0;
  std::size_t pairs = 0;
  for (const auto& token : a.regular_tokens()) {
    const auto j = b.find(token);
    if (!j) continue;
    const TokenId i = a.id(token);
    double s = 0;
    for (std::size_t c = 0; c < ea.cols(); ++c) {
      const double d = static_cast<double>(ea.at(i, c)) - static_cast<double>(eb.at(*j, c));
      s += d * d;
    }
    total += std::sqrt(s);
    ++pairs;
  }
  return pairs == 0 ? std::nan("") : total / static_cast<double>(pairs);
}

Outcome identical_strings() {
  SyntheticPairSpec spec;
  spec.shared_fraction = 0.3;
  spec.mono_sentences = 2000;
  const auto pair = gen_synthetic_pair(spec, 701);
  double dist[2];
  int i = 0;
  for (auto mode : {AlignmentMode::None, AlignmentMode::Iden}) {
    RunConfig cfg = pair_config(mode);
    cfg.lm.epochs = 5;
    dist[i++] = shared_string_distance(train_lm(cfg, {pair.mono_source, pair.mono_target}, 702).model);
  }
  return {dist[1] <= 0.5 * dist[0],
          fmt::format("mean shared-string embedding distance none {:.4f} vs iden {:.4f} (ratio {:.3f}, need <= 0.5)",
                      dist[0], dist[1], dist[1] / dist[0])};
}

// Determinism and persistence.

Outcome determinism() {
  ScratchDir dir;
  SyntheticPairSpec spec;
  spec.num_tags = 4;
  spec.lexemes_per_tag = 6;
  spec.mono_sentences = 200;
  spec.labeled_train = 60;
  spec.labeled_test = 30;
  cmd_synth_gen(spec, 1001, dir / "data");
  cmd_synth_gen(spec, 1001, dir / "data2");
  std::vector<std::string> problems;
  auto same_file = [&](const std::filesystem::path& a, const std::filesystem::path& b) {
    if (read_file_bytes(a) != read_file_bytes(b)) problems.push_back(a.filename().string());
  };
  for (const auto* f : {"mono.src.txt", "mono.tgt.txt", "train.src.conll", "test.tgt.conll", "lexicon.tsv"}) {
    same_file(dir / "data" / f, dir / "data2" / f);
  }

  std::vector<MetricsReport> reports;
  for (const auto* run : {"run1", "run2"}) {
    RunConfig cfg = pair_config(AlignmentMode::Avl);
    cfg.use_char = true;
    cfg.corpus = {{"src", dir / "data" / "mono.src.txt"}, {"tgt", dir / "data" / "mono.tgt.txt"}};
    cfg.train_files = {{"src", dir / "data" / "train.src.conll"}};
    cfg.test_file = dir / "data" / "test.tgt.conll";
    cfg.output_dir = dir / run;
    cfg.lm.epochs = 2;
    cfg.train.epochs = 2;
    cfg.seeds = {1, 2};
    cmd_train_lm(cfg, 1002);
    cmd_train_tagger(cfg);
    reports.push_back(cmd_evaluate(cfg));
  }
  for (const auto* f : {"lm.ckpt", "lm.ckpt.meta", "tagger.1.ckpt", "tagger.1.ckpt.meta", "tagger.2.ckpt"}) {
    same_file(dir / "run1" / f, dir / "run2" / f);
  }
  const bool same_report = reports[0].json_lines() == reports[1].json_lines();

  const MlmaModel lm = MlmaModel::load(dir / "run1" / "lm.ckpt");
  lm.save(dir / "resaved.ckpt");
  same_file(dir / "run1" / "lm.ckpt", dir / "resaved.ckpt");
  KeyValues meta;
  const CrfTagger tagger = CrfTagger::load(dir / "run1" / "tagger.1.ckpt", &meta);
  tagger.save(dir / "resaved_tagger.ckpt", meta);
  same_file(dir / "run1" / "tagger.1.ckpt", dir / "resaved_tagger.ckpt");
  same_file(dir / "run1" / "tagger.1.ckpt.meta", dir / "resaved_tagger.ckpt.meta");

  std::string detail = problems.empty() ? "all compared files byte-identical" : "differing: ";
  for (const auto& p : problems) detail += p + " ";
  detail += same_report ? "; MetricsReport identical" : "; MetricsReport differs";
  return {problems.empty() && same_report, detail};
}

}  // namespace

std::vector<Criterion> criteria32() {
  return {
      {5, "LM learning sanity", lm_learning},
      {6, "desk-scale transfer analogue", transfer_gap},
      {7, "identical-string effect", identical_strings},
      {10, "determinism and persistence", determinism},
  };
}

}  // namespace acceptance
