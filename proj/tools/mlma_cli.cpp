#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "mlma/error.hpp"
#include "mlma/pipeline.hpp"

namespace {

using namespace mlma;

struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string mode;
  std::string combiner;
  std::string task;
  std::vector<std::string> set;
};

void add_common(CLI::App* cmd, Overrides& o) {
  cmd->add_option("-c,--config", o.config, "Run configuration (key = value file)")->required()->check(CLI::ExistingFile);
  cmd->add_option("--set", o.set, "Extra key=value overrides");
}

RunConfig load_config(const Overrides& o) {
  const std::filesystem::path path(o.config);
  KeyValues kv = read_key_values(path);
  if (!o.mode.empty()) kv["align.mode"] = o.mode;
  if (!o.combiner.empty()) kv["combiner"] = o.combiner;
  if (!o.task.empty()) kv["task"] = o.task;
  if (o.seed) kv["seeds"] = std::to_string(*o.seed);
  for (const auto& item : o.set) {
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + item + "'");
    kv[item.substr(0, eq)] = item.substr(eq + 1);
  }
  return RunConfig::from_key_values(kv, path.parent_path());
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
}

int run(int argc, char** argv) {
  CLI::App app{"Multilingual language model with alignment and cross-lingual sequence tagging."};
  app.require_subcommand(1);
  std::string log_level = "info";
  app.add_option("--log-level", log_level, "trace, debug, info, warn, error or off")
      ->check(CLI::IsMember({"trace", "debug", "info", "warn", "error", "off"}));

  Overrides lm_o;
  auto* train_lm = app.add_subcommand("train-lm", "Train the aligned multilingual LM");
  add_common(train_lm, lm_o);
  train_lm->add_option("--seed", lm_o.seed, "Initialization seed (default: first configured seed)");
  train_lm->add_option("--mode", lm_o.mode, "Alignment mode")->check(CLI::IsMember({"none", "iden", "mv", "avl"}));

  Overrides tag_o;
  auto* train_tagger = app.add_subcommand("train-tagger", "Train taggers on source-language data, one per seed");
  add_common(train_tagger, tag_o);
  train_tagger->add_option("--seed", tag_o.seed, "Train a single seed");
  train_tagger->add_option("--combiner", tag_o.combiner, "Layer combiner")->check(CLI::IsMember({"sws", "fws"}));
  train_tagger->add_option("--task", tag_o.task, "Tagging task")->check(CLI::IsMember({"ner", "pos"}));

  Overrides eval_o;
  bool json = false;
  auto* evaluate = app.add_subcommand("evaluate", "Score every seed's tagger on the target test set");
  add_common(evaluate, eval_o);
  evaluate->add_option("--seed", eval_o.seed, "Evaluate a single seed");
  evaluate->add_option("--task", eval_o.task, "Tagging task")->check(CLI::IsMember({"ner", "pos"}));
  evaluate->add_flag("--json", json, "Print JSON lines instead of the table");

  Overrides nn_o;
  std::string source, target, query, tagger;
  std::size_t k = 5;
  auto* neighbors = app.add_subcommand("neighbors", "Nearest target-language tokens of a source token in context");
  add_common(neighbors, nn_o);
  neighbors->add_option("--source", source, "Source-language sentences")->required()->check(CLI::ExistingFile);
  neighbors->add_option("--target", target, "Target-language sentences")->required()->check(CLI::ExistingFile);
  neighbors->add_option("-q,--query", query, "Source token")->required();
  neighbors->add_option("-k", k, "Neighbors per occurrence")->check(CLI::PositiveNumber);
  neighbors->add_option("--tagger", tagger, "Use this tagger's layer combiner")->check(CLI::ExistingFile);

  std::string synth_dir, synth_spec;
  std::uint64_t synth_seed = 1;
  std::optional<double> rho;
  std::optional<std::size_t> mono;
  auto* synth = app.add_subcommand("synth-gen", "Write a synthetic language pair with oracle lexicon");
  synth->add_option("-o,--out", synth_dir, "Output directory")->required();
  synth->add_option("--seed", synth_seed, "Generator seed");
  synth->add_option("--spec", synth_spec, "Generator spec (key = value file)")->check(CLI::ExistingFile);
  synth->add_option("--rho", rho, "Share of lexemes rendered identically in both languages");
  synth->add_option("--mono", mono, "Monolingual sentences per language");

  CLI11_PARSE(app, argc, argv);
  spdlog::set_level(spdlog::level::from_str(log_level));

  if (*train_lm) {
    const RunConfig cfg = load_config(lm_o);
    const auto r = cmd_train_lm(cfg, lm_o.seed.value_or(cfg.seeds.front()));
    fmt::print("wrote {} ({} epochs logged)\n", cfg.lm_checkpoint().string(), r.log.size());
  } else if (*train_tagger) {
    for (const auto& path : cmd_train_tagger(load_config(tag_o))) fmt::print("wrote {}\n", path.string());
  } else if (*evaluate) {
    const RunConfig cfg = load_config(eval_o);
    const MetricsReport report = cmd_evaluate(cfg);
    write_text(cfg.output_dir / "metrics.jsonl", report.json_lines());
    fmt::print("{}", json ? report.json_lines() : report.table());
  } else if (*neighbors) {
    const RunConfig cfg = load_config(nn_o);
    std::optional<std::filesystem::path> ckpt;
    if (!tagger.empty()) ckpt = tagger;
    const auto result = cmd_neighbors(cfg, source, target, query, k, ckpt);
    if (result.empty()) fmt::print("'{}' does not occur in {}\n", query, source);
    for (const auto& q : result) {
      fmt::print("{}:{}  {}\n", q.sentence, q.position, q.context);
      for (const auto& n : q.neighbors) {
        fmt::print("  {:.4f}  {:<16} {}:{}  {}\n", n.cosine, n.token, n.sentence, n.position, n.context);
      }
    }
  } else if (*synth) {
    SyntheticPairSpec spec;
    if (!synth_spec.empty()) spec = SyntheticPairSpec::from_key_values(read_key_values(synth_spec));
    if (rho) spec.shared_fraction = *rho;
    if (mono) spec.mono_sentences = *mono;
    spec.validate();
    const auto pair = cmd_synth_gen(spec, synth_seed, synth_dir);
    fmt::print("wrote {}: {} + {} monolingual, {} train, {} test sentences\n", synth_dir, pair.mono_source.size(),
               pair.mono_target.size(), pair.train_source.size(), pair.test_target.size());
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const mlma::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return e.exit_code();
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
