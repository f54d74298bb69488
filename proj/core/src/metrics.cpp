#include "mlma/metrics.hpp"

#include <cmath>
#include <set>
#include <tuple>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "mlma/error.hpp"

MLMA_NAMESPACE_BEGIN

namespace {

struct Parsed {
  char prefix;
  std::string type;
};

Parsed split_tag(const std::string& tag) {
  if (tag == "O" || tag.empty()) return {'O', ""};
  if (tag.size() >= 2 && (tag[1] == '-' || tag[1] == '_')) return {tag[0], tag.substr(2)};
  return {'I', tag};
}

void check_aligned(const std::vector<std::vector<std::string>>& gold,
                   const std::vector<std::vector<std::string>>& predicted, const char* what) {
  if (gold.size() != predicted.size()) {
    throw ContractError(std::string(what) + ": " + std::to_string(gold.size()) + " gold sentences but " +
                        std::to_string(predicted.size()) + " predictions");
  }
  for (std::size_t i = 0; i < gold.size(); ++i) {
    if (gold[i].size() != predicted[i].size()) {
      throw ContractError(std::string(what) + ": sentence " + std::to_string(i) + " length differs");
    }
  }
}

double pct(std::size_t num, std::size_t den) {
  return den == 0 ? 0.0 : 100.0 * static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace

std::vector<Chunk> extract_chunks(const std::vector<std::string>& tags) {
  std::vector<Chunk> chunks;
  bool open = false;
  Chunk cur;
  char prev_prefix = 'O';
  std::string prev_type;
  for (std::size_t k = 0; k < tags.size(); ++k) {
    const auto [prefix, type] = split_tag(tags[k]);
    // conlleval endOfChunk / startOfChunk.
    bool ends = false;
    if (prev_prefix == 'E' || prev_prefix == 'S') ends = true;
    if ((prev_prefix == 'B' || prev_prefix == 'I') && (prefix == 'B' || prefix == 'S' || prefix == 'O')) ends = true;
    if (prev_prefix != 'O' && prev_type != type) ends = true;
    bool starts = false;
    if (prefix == 'B' || prefix == 'S') starts = true;
    if ((prev_prefix == 'E' || prev_prefix == 'S' || prev_prefix == 'O') && (prefix == 'E' || prefix == 'I')) {
      starts = true;
    }
    if (prefix != 'O' && prev_type != type) starts = true;
    if (open && ends) {
      cur.end = k;
      chunks.push_back(cur);
      open = false;
    }
    if (starts && prefix != 'O') {
      cur = Chunk{k, k, type};
      open = true;
    }
    prev_prefix = prefix;
    prev_type = type;
  }
  if (open) {
    cur.end = tags.size();
    chunks.push_back(cur);
  }
  return chunks;
}

ChunkScores score_chunks(const std::vector<std::vector<std::string>>& gold,
                         const std::vector<std::vector<std::string>>& predicted) {
  check_aligned(gold, predicted, "score_chunks");
  ChunkScores s;
  for (std::size_t i = 0; i < gold.size(); ++i) {
    const auto g = extract_chunks(gold[i]);
    const auto p = extract_chunks(predicted[i]);
    std::set<std::tuple<std::size_t, std::size_t, std::string>> gs;
    for (const auto& c : g) gs.emplace(c.begin, c.end, c.type);
    for (const auto& c : p) s.correct += gs.count({c.begin, c.end, c.type});
    s.gold += g.size();
    s.predicted += p.size();
  }
  s.precision = pct(s.correct, s.predicted);
  s.recall = pct(s.correct, s.gold);
  s.f1 = s.precision + s.recall == 0.0 ? 0.0 : 2.0 * s.precision * s.recall / (s.precision + s.recall);
  return s;
}

double token_accuracy(const std::vector<std::vector<std::string>>& gold,
                      const std::vector<std::vector<std::string>>& predicted) {
  check_aligned(gold, predicted, "token_accuracy");
  std::size_t right = 0, total = 0;
  for (std::size_t i = 0; i < gold.size(); ++i) {
    for (std::size_t k = 0; k < gold[i].size(); ++k) right += gold[i][k] == predicted[i][k];
    total += gold[i].size();
  }
  return pct(right, total);
}

double mean(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double sample_std(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

double MetricsReport::mean_f1() const {
  std::vector<double> v;
  for (const auto& s : seeds) v.push_back(s.f1);
  return mean(v);
}
double MetricsReport::std_f1() const {
  std::vector<double> v;
  for (const auto& s : seeds) v.push_back(s.f1);
  return sample_std(v);
}
double MetricsReport::mean_accuracy() const {
  std::vector<double> v;
  for (const auto& s : seeds) v.push_back(s.accuracy);
  return mean(v);
}
double MetricsReport::std_accuracy() const {
  std::vector<double> v;
  for (const auto& s : seeds) v.push_back(s.accuracy);
  return sample_std(v);
}

std::string MetricsReport::table() const {
  std::string out;
  if (task == "ner") {
    out += fmt::format("{:>20}  {:>9}  {:>9}  {:>9}\n", "seed", "precision", "recall", "f1");
    for (const auto& s : seeds) {
      out += fmt::format("{:>20}  {:>9.2f}  {:>9.2f}  {:>9.2f}\n", s.seed, s.precision, s.recall, s.f1);
    }
    out += fmt::format("{:>20}  {:>9}  {:>9}  {:>9.2f}\n", "mean", "", "", mean_f1());
    out += fmt::format("{:>20}  {:>9}  {:>9}  {:>9.2f}\n", "std", "", "", std_f1());
  } else {
    out += fmt::format("{:>20}  {:>9}\n", "seed", "accuracy");
    for (const auto& s : seeds) out += fmt::format("{:>20}  {:>9.2f}\n", s.seed, s.accuracy);
    out += fmt::format("{:>20}  {:>9.2f}\n", "mean", mean_accuracy());
    out += fmt::format("{:>20}  {:>9.2f}\n", "std", std_accuracy());
  }
  return out;
}

std::string MetricsReport::json_lines() const {
  std::string out;
  for (const auto& s : seeds) {
    nlohmann::json j{{"record", "seed"}, {"task", task}, {"seed", s.seed}};
    if (task == "ner") {
      j["precision"] = s.precision;
      j["recall"] = s.recall;
      j["f1"] = s.f1;
    } else {
      j["accuracy"] = s.accuracy;
    }
    out += j.dump() + "\n";
  }
  nlohmann::json summary{{"record", "summary"}, {"task", task}, {"seeds", seeds.size()}};
  if (task == "ner") {
    summary["mean_f1"] = mean_f1();
    summary["std_f1"] = std_f1();
  } else {
    summary["mean_accuracy"] = mean_accuracy();
    summary["std_accuracy"] = std_accuracy();
  }
  out += summary.dump() + "\n";
  return out;
}

MLMA_NAMESPACE_END
