#include "mlma/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "mlma/ops.hpp"
#include "mlma/optim.hpp"

MLMA_NAMESPACE_BEGIN

namespace {

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto b = item.find_first_not_of(" \t");
    if (b == std::string::npos) continue;
    const auto e = item.find_last_not_of(" \t");
    out.push_back(item.substr(b, e - b + 1));
  }
  return out;
}

std::string join(const std::vector<std::string>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + v[i];
  return out;
}

std::string format_double(double x) {
  std::ostringstream os;
  os.precision(17);
  os << x;
  return os.str();
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    T out;
    if constexpr (std::is_same_v<T, double>) {
      out = std::stod(value, &used);
    } else {
      if (!value.empty() && value[0] == '-') throw std::invalid_argument("negative");
      out = static_cast<T>(std::stoull(value, &used));
    }
    if (used != value.size()) throw std::invalid_argument("trailing characters");
    return out;
  } catch (const std::logic_error&) {
    throw ConfigError("config: malformed value '" + value + "' for " + key);
  }
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "on" || value == "1") return true;
  if (value == "false" || value == "off" || value == "0") return false;
  throw ConfigError("config: " + key + " must be true or false");
}

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& value) {
  const std::filesystem::path p(value);
  return p.is_absolute() || base.empty() ? p : base / p;
}

double finite_or_throw(const Tensor& t, const std::string& what) {
  const double v = static_cast<double>(t.item());
  if (!std::isfinite(v)) throw NumericError("non-finite " + what + " (" + std::to_string(v) + ")");
  return v;
}

NamedTensors snapshot(const NamedTensors& params) {
  NamedTensors out;
  for (const auto& [name, t] : params) out.emplace_back(name, t.clone());
  return out;
}

std::vector<const TaggedInput*> pointers(const std::vector<TaggedInput>& inputs) {
  std::vector<const TaggedInput*> out;
  out.reserve(inputs.size());
  for (const auto& in : inputs) out.push_back(&in);
  return out;
}

std::vector<std::vector<std::string>> predict_tags(const CrfTagger& tagger, const std::vector<TaggedInput>& inputs) {
  const auto ptrs = pointers(inputs);
  std::vector<std::vector<std::string>> out;
  out.reserve(inputs.size());
  constexpr std::size_t kChunk = 256;
  for (std::size_t i = 0; i < ptrs.size(); i += kChunk) {
    const std::size_t end = std::min(ptrs.size(), i + kChunk);
    for (auto& path : tagger.predict(std::span<const TaggedInput* const>(ptrs.data() + i, end - i))) {
      out.push_back(tagger.scheme().decode(path));
    }
  }
  return out;
}

double dev_score(TaskKind task, const CrfTagger& tagger, const std::vector<LabeledSentence>& dev,
                 const std::vector<TaggedInput>& inputs) {
  const SeedMetrics m = score_predictions(task, dev, predict_tags(tagger, inputs));
  return task == TaskKind::Ner ? m.f1 : m.accuracy;
}

std::vector<std::vector<Sentence>> load_corpora(const RunConfig& cfg) {
  std::vector<std::vector<Sentence>> corpora;
  for (const auto& lang : cfg.languages) {
    auto it = cfg.corpus.find(lang);
    if (it == cfg.corpus.end()) throw ConfigError("config: no corpus." + lang + " given");
    corpora.push_back(load_sentences(it->second));
    if (corpora.back().empty()) throw ConfigError("config: corpus for " + lang + " is empty");
  }
  return corpora;
}

}  // namespace

RunConfig RunConfig::defaults() {
  RunConfig c;
  c.model = MlmaConfig::desk();
  c.tagger = TaggerConfig::desk();
  return c;
}

std::filesystem::path RunConfig::tagger_checkpoint(std::uint64_t seed) const {
  return output_dir / ("tagger." + std::to_string(seed) + ".ckpt");
}

TaggerConfig RunConfig::effective_tagger() const {
  TaggerConfig t = tagger;
  t.use_char = use_char.value_or(task == TaskKind::Ner);
  return t;
}

RunConfig RunConfig::from_key_values(const KeyValues& input, const std::filesystem::path& base) {
  RunConfig c = defaults();
  KeyValues kv = input;
  auto take = [&](const std::string& key) -> std::optional<std::string> {
    auto it = kv.find(key);
    if (it == kv.end()) return std::nullopt;
    return it->second;
  };
  if (auto v = take("languages")) c.languages = split_list(*v);
  if (auto v = take("sources")) c.sources = split_list(*v);
  if (auto v = take("target")) c.target = *v;
  if (auto v = take("task")) c.task = parse_task(*v);
  if (auto v = take("combiner")) c.combiner = parse_combiner_mode(*v);
  if (auto v = take("output")) c.output_dir = resolve(base, *v);
  if (auto v = take("seeds")) {
    c.seeds.clear();
    for (const auto& s : split_list(*v)) c.seeds.push_back(parse_number<std::uint64_t>("seeds", s));
  }
  for (const auto& lang : c.languages) {
    if (auto v = take("corpus." + lang)) c.corpus[lang] = resolve(base, *v);
    if (auto v = take("embeddings." + lang)) c.embeddings[lang] = resolve(base, *v);
    if (auto v = take("data.train." + lang)) c.train_files[lang] = resolve(base, *v);
  }
  if (auto v = take("data.dev")) c.dev_file = resolve(base, *v);
  if (auto v = take("data.test")) c.test_file = resolve(base, *v);

  c.model = MlmaConfig::read(kv, "model.", c.model);
  c.align = AlignmentConfig::read(kv, "align.", c.languages, c.align);
  if (auto v = take("tagger.char")) {
    if (*v == "auto") {
      c.use_char.reset();
      kv.erase("tagger.char");
    } else {
      c.use_char = parse_bool("tagger.char", *v);
    }
  }
  c.tagger = TaggerConfig::read(kv, "tagger.", c.tagger);

  if (auto v = take("lm.lr")) c.lm.learning_rate = parse_number<double>("lm.lr", *v);
  if (auto v = take("lm.clip")) c.lm.clip_norm = parse_number<double>("lm.clip", *v);
  if (auto v = take("lm.epochs")) c.lm.epochs = parse_number<std::size_t>("lm.epochs", *v);
  if (auto v = take("lm.batch_tokens")) c.lm.batch_tokens = parse_number<std::size_t>("lm.batch_tokens", *v);
  if (auto v = take("lm.log_initial")) c.lm.log_initial = parse_bool("lm.log_initial", *v);
  if (auto v = take("train.lr")) c.train.learning_rate = parse_number<double>("train.lr", *v);
  if (auto v = take("train.batch")) c.train.batch_size = parse_number<std::size_t>("train.batch", *v);
  if (auto v = take("train.epochs")) c.train.epochs = parse_number<std::size_t>("train.epochs", *v);
  if (auto v = take("train.patience")) c.train.patience = parse_number<std::size_t>("train.patience", *v);
  if (auto v = take("train.decay")) c.train.decay = parse_number<double>("train.decay", *v);
  if (auto v = take("train.decay_mode")) {
    if (*v == "inverse") {
      c.train.decay_mode = LrDecay::Inverse;
    } else if (*v == "multiplicative") {
      c.train.decay_mode = LrDecay::Multiplicative;
    } else {
      throw ConfigError("config: train.decay_mode must be inverse or multiplicative");
    }
  }
  if (auto v = take("train.clip")) c.train.clip_norm = parse_number<double>("train.clip", *v);
  if (auto v = take("train.dev_fraction")) c.train.dev_fraction = parse_number<double>("train.dev_fraction", *v);

  // Every input key must be one the config understands.
  const KeyValues known = c.to_key_values();
  static const std::set<std::string> extra{"model.profile", "tagger.profile", "tagger.char"};
  for (const auto& [key, value] : input) {
    if (!known.count(key) && !extra.count(key)) throw ConfigError("config: unknown key '" + key + "'");
  }
  c.validate();
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  const KeyValues kv = parse_key_values(std::string(bytes.begin(), bytes.end()), path.string());
  return from_key_values(kv, path.parent_path());
}

KeyValues RunConfig::to_key_values() const {
  KeyValues kv;
  kv["languages"] = join(languages);
  kv["sources"] = join(sources);
  kv["target"] = target;
  kv["task"] = to_string(task);
  kv["combiner"] = to_string(combiner);
  kv["output"] = output_dir.string();
  std::vector<std::string> s;
  for (auto x : seeds) s.push_back(std::to_string(x));
  kv["seeds"] = join(s);
  for (const auto& [lang, p] : corpus) kv["corpus." + lang] = p.string();
  for (const auto& [lang, p] : embeddings) kv["embeddings." + lang] = p.string();
  for (const auto& [lang, p] : train_files) kv["data.train." + lang] = p.string();
  if (dev_file) kv["data.dev"] = dev_file->string();
  if (test_file) kv["data.test"] = test_file->string();
  model.write(kv, "model.");
  align.write(kv, "align.", languages);
  tagger.write(kv, "tagger.");
  kv["tagger.char"] = use_char ? (*use_char ? "on" : "off") : "auto";
  kv["lm.lr"] = format_double(lm.learning_rate);
  kv["lm.clip"] = format_double(lm.clip_norm);
  kv["lm.epochs"] = std::to_string(lm.epochs);
  kv["lm.batch_tokens"] = std::to_string(lm.batch_tokens);
  kv["lm.log_initial"] = lm.log_initial ? "true" : "false";
  kv["train.lr"] = format_double(train.learning_rate);
  kv["train.batch"] = std::to_string(train.batch_size);
  kv["train.epochs"] = std::to_string(train.epochs);
  kv["train.patience"] = std::to_string(train.patience);
  kv["train.decay"] = format_double(train.decay);
  kv["train.decay_mode"] = train.decay_mode == LrDecay::Inverse ? "inverse" : "multiplicative";
  kv["train.clip"] = format_double(train.clip_norm);
  kv["train.dev_fraction"] = format_double(train.dev_fraction);
  return kv;
}

void RunConfig::validate() const {
  if (languages.empty()) throw ConfigError("config: no languages");
  std::set<std::string> uniq(languages.begin(), languages.end());
  if (uniq.size() != languages.size()) throw ConfigError("config: duplicate language");
  if (target.empty() || !uniq.count(target)) throw ConfigError("config: target '" + target + "' is not an LM language");
  if (sources.empty()) throw ConfigError("config: no source languages");
  for (const auto& s : sources) {
    if (!uniq.count(s)) throw ConfigError("config: source '" + s + "' is not an LM language");
    if (s == target) throw ConfigError("config: '" + s + "' cannot be both source and target");
  }
  if (seeds.empty()) throw ConfigError("config: no seeds");
  model.validate();
  align.validate();
  tagger.validate();
  if (lm.batch_tokens == 0) throw ConfigError("config: lm.batch_tokens must be positive");
  if (!(lm.learning_rate > 0.0) || !(train.learning_rate > 0.0)) throw ConfigError("config: learning rates must be positive");
  if (train.batch_size == 0) throw ConfigError("config: train.batch must be positive");
  if (!(train.dev_fraction > 0.0 && train.dev_fraction < 1.0)) {
    throw ConfigError("config: train.dev_fraction must lie in (0, 1)");
  }
}

LmTrainResult train_lm(const RunConfig& cfg, const std::vector<std::vector<Sentence>>& corpora, std::uint64_t seed,
                       const LmEpochCallback& on_epoch) {
  if (corpora.size() != cfg.languages.size()) {
    throw ContractError("train_lm: " + std::to_string(cfg.languages.size()) + " languages but " +
                        std::to_string(corpora.size()) + " corpora");
  }
  std::vector<Vocabulary> vocabs;
  for (const auto& c : corpora) vocabs.push_back(Vocabulary::build(c, cfg.model.vocab_cap));
  MlmaModel model(cfg.model, cfg.languages, std::move(vocabs), seed);
  for (std::size_t i = 0; i < cfg.languages.size(); ++i) {
    auto it = cfg.embeddings.find(cfg.languages[i]);
    if (it == cfg.embeddings.end()) continue;
    Tensor table = model.embedding(i);
    const std::size_t n = load_text_embeddings(it->second, model.vocab(i), table);
    spdlog::info("{}: initialized {} embedding rows from {}", cfg.languages[i], n, it->second.string());
  }
  auto log = train_lm_epochs(model, cfg, corpora, seed, on_epoch);
  return {std::move(model), std::move(log)};
}

std::vector<LmEpochStats> train_lm_epochs(MlmaModel& model, const RunConfig& cfg,
                                          const std::vector<std::vector<Sentence>>& corpora, std::uint64_t seed,
                                          const LmEpochCallback& on_epoch) {
  const std::size_t num_langs = model.languages().size();
  if (corpora.size() != num_langs) throw ContractError("train_lm: one corpus per model language is required");
  std::vector<std::vector<std::vector<TokenId>>> ids(num_langs);
  for (std::size_t i = 0; i < num_langs; ++i) {
    for (const auto& s : corpora[i]) ids[i].push_back(model.vocab(i).encode(s));
  }
  const AlignmentObjective objective(model, cfg.align);
  AdamOptions opt;
  opt.learning_rate = cfg.lm.learning_rate;
  opt.clip_norm = cfg.lm.clip_norm;
  Adam adam(model.parameter_list(), opt);
  Rng rng(seed ^ 0xa0761d6478bd642fULL);

  std::vector<LmEpochStats> log;
  const std::size_t first = cfg.lm.log_initial ? 0 : 1;
  for (std::size_t epoch = first; epoch <= cfg.lm.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const bool update = epoch > 0;
    const BatchPlan plan = lm_batches(ids, cfg.lm.batch_tokens, seed * 1000003ULL + std::max<std::size_t>(epoch, 1),
                                      model.config().max_sentence_len);
    LmEpochStats stats;
    stats.epoch = epoch;
    stats.nll.assign(num_langs, 0.0);
    std::vector<std::size_t> tokens(num_langs, 0);
    for (const auto& batch : plan.batches) {
      std::optional<NoGradGuard> guard;
      if (!update) guard.emplace();
      std::vector<EncodedBatch> encoded;
      for (std::size_t i = 0; i < num_langs; ++i) {
        std::vector<std::vector<TokenId>> sentences;
        for (std::size_t s : batch.sentences[i]) sentences.push_back(ids[i][s]);
        encoded.push_back(model.encode(sentences, i, update, &rng));
      }
      const LossTerms terms = objective(encoded, rng);
      for (std::size_t i = 0; i < num_langs; ++i) {
        stats.nll[i] += finite_or_throw(terms.nll[i], "language-model loss of " + model.languages()[i]);
        tokens[i] += terms.tokens[i];
      }
      stats.reg += finite_or_throw(terms.reg, "alignment loss (" + to_string(cfg.align.mode) + ")");
      stats.loss += finite_or_throw(terms.total, "total loss");
      if (update) {
        adam.zero_grad();
        backward(terms.total);
        adam.step();
      }
    }
    for (std::size_t i = 0; i < num_langs; ++i) stats.nll[i] /= static_cast<double>(std::max<std::size_t>(tokens[i], 1));
    stats.reg /= static_cast<double>(plan.batches.size());
    stats.loss /= static_cast<double>(plan.batches.size());
    stats.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::string nll;
    for (std::size_t i = 0; i < num_langs; ++i) nll += fmt::format(" nll[{}]={:.4f}", model.languages()[i], stats.nll[i]);
    spdlog::info("lm epoch {}{} reg={:.6f} loss={:.4f} ({:.1f}s)", epoch, nll, stats.reg, stats.loss, stats.seconds);
    if (on_epoch) on_epoch(stats);
    log.push_back(std::move(stats));
  }
  return log;
}

std::vector<TaggedInput> prepare_inputs(const MlmaModel& lm, const std::vector<LabeledSentence>& data,
                                        const TagScheme* scheme) {
  std::vector<TaggedInput> out(data.size());
  std::map<std::string, std::vector<std::size_t>> by_language;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& s = data[i];
    if (s.language.empty()) throw ContractError("labeled sentence " + std::to_string(i) + " has no language");
    if (s.tokens.size() != s.tags.size()) {
      throw ContractError("labeled sentence " + std::to_string(i) + " has mismatched tokens and tags");
    }
    by_language[s.language].push_back(i);
    out[i].tokens = s.tokens;
    if (scheme) out[i].gold = scheme->encode(s.tags);
  }
  for (const auto& [lang, members] : by_language) {
    std::vector<Sentence> sentences;
    for (std::size_t i : members) sentences.push_back(data[i].tokens);
    auto stacks = extract_corpus(sentences, lang, lm);
    for (std::size_t j = 0; j < members.size(); ++j) out[members[j]].clcr = std::move(stacks[j]);
  }
  return out;
}

double learning_rate_at(const TaggerTrainOptions& opt, std::size_t epoch) {
  const double e = static_cast<double>(epoch);
  if (opt.decay_mode == LrDecay::Inverse) return opt.learning_rate / (1.0 + opt.decay * e);
  return opt.learning_rate * std::pow(opt.decay, e);
}

TaggerTrainResult train_tagger(const RunConfig& cfg, const MlmaModel& lm, const std::vector<LabeledSentence>& train,
                               const std::vector<LabeledSentence>& dev, std::uint64_t seed) {
  if (train.empty()) throw ContractError("train_tagger: no training sentences");
  const std::set<std::string> sources(cfg.sources.begin(), cfg.sources.end());
  for (const auto* set : {&train, &dev}) {
    for (const auto& s : *set) {
      if (s.language == cfg.target) {
        throw ContractError("train_tagger: refusing labeled data in target language '" + cfg.target +
                            "' (zero-resource transfer)");
      }
      if (!sources.count(s.language)) {
        throw ContractError("train_tagger: sentence language '" + s.language + "' is not a configured source");
      }
    }
  }
  for (const auto& lang : cfg.sources) lm.language_index(lang);
  lm.language_index(cfg.target);
  const std::uint64_t lm_hash = parameter_hash(lm.parameters());

  std::vector<LabeledSentence> train_part = train;
  std::vector<LabeledSentence> dev_part = dev;
  Rng rng(seed ^ 0xe7037ed1a0b428dbULL);
  if (dev_part.empty()) {
    if (train.size() < 2) throw ContractError("train_tagger: need at least 2 sentences to hold out a dev split");
    std::vector<std::size_t> order(train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);
    const auto held = std::clamp<std::size_t>(
        static_cast<std::size_t>(std::ceil(cfg.train.dev_fraction * static_cast<double>(train.size()))), 1,
        train.size() - 1);
    std::vector<bool> is_dev(train.size(), false);
    for (std::size_t i = 0; i < held; ++i) is_dev[order[i]] = true;
    train_part.clear();
    for (std::size_t i = 0; i < train.size(); ++i) (is_dev[i] ? dev_part : train_part).push_back(train[i]);
  }

  std::vector<LabeledSentence> all = train_part;
  all.insert(all.end(), dev_part.begin(), dev_part.end());
  const TagScheme scheme = TagScheme::from_corpus(cfg.task, all);
  const auto train_inputs = prepare_inputs(lm, train_part, &scheme);
  const auto dev_inputs = prepare_inputs(lm, dev_part, &scheme);

  TaggerTrainResult result{CrfTagger(cfg.effective_tagger(), scheme, CharVocabulary::build(train_part), cfg.combiner,
                                     lm.config().n_layers + 1, 2 * lm.config().d_model, seed),
                           {}, 0, false, lm_hash};
  CrfTagger& tagger = result.tagger;
  AdamOptions opt;
  opt.learning_rate = cfg.train.learning_rate;
  opt.clip_norm = cfg.train.clip_norm;
  Adam adam(tagger.parameter_list(), opt);

  double best = -std::numeric_limits<double>::infinity();
  NamedTensors best_params = snapshot(tagger.parameters());
  std::size_t bad_epochs = 0;
  std::vector<std::size_t> order(train_inputs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (std::size_t epoch = 0; epoch < cfg.train.epochs; ++epoch) {
    TaggerEpochStats stats;
    stats.epoch = epoch + 1;
    stats.learning_rate = learning_rate_at(cfg.train, epoch);
    adam.set_learning_rate(stats.learning_rate);
    rng.shuffle(order);
    for (std::size_t b = 0; b < order.size(); b += cfg.train.batch_size) {
      std::vector<const TaggedInput*> batch;
      for (std::size_t j = b; j < std::min(order.size(), b + cfg.train.batch_size); ++j) {
        batch.push_back(&train_inputs[order[j]]);
      }
      const Tensor loss = scale(tagger.loss(batch, true, &rng), Real(1) / static_cast<Real>(batch.size()));
      stats.train_loss += finite_or_throw(loss, "tagger loss") * static_cast<double>(batch.size());
      adam.zero_grad();
      backward(loss);
      adam.step();
    }
    stats.train_loss /= static_cast<double>(order.size());
    stats.dev_score = dev_score(cfg.task, tagger, dev_part, dev_inputs);
    stats.improved = stats.dev_score > best;
    if (stats.improved) {
      best = stats.dev_score;
      best_params = snapshot(tagger.parameters());
      result.best_epoch = stats.epoch;
      bad_epochs = 0;
    } else {
      ++bad_epochs;
    }
    spdlog::info("tagger epoch {} lr={:.2e} loss={:.4f} dev={:.2f}{}", stats.epoch, stats.learning_rate,
                 stats.train_loss, stats.dev_score, stats.improved ? " *" : "");
    result.log.push_back(stats);
    if (bad_epochs >= cfg.train.patience && cfg.train.patience > 0) {
      result.stopped_early = true;
      break;
    }
  }
  assign_by_name(tagger.parameters(), best_params);
  if (parameter_hash(lm.parameters()) != lm_hash) {
    throw ContractError("train_tagger: language-model parameters changed during tagger training");
  }
  return result;
}

SeedMetrics score_predictions(TaskKind task, const std::vector<LabeledSentence>& data,
                              const std::vector<std::vector<std::string>>& predicted) {
  std::vector<std::vector<std::string>> gold;
  gold.reserve(data.size());
  for (const auto& s : data) gold.push_back(s.tags);
  SeedMetrics m;
  m.accuracy = token_accuracy(gold, predicted);
  if (task == TaskKind::Ner) {
    const ChunkScores c = score_chunks(gold, predicted);
    m.precision = c.precision;
    m.recall = c.recall;
    m.f1 = c.f1;
  }
  return m;
}

Evaluation evaluate_tagger(const CrfTagger& tagger, const MlmaModel& lm, const std::vector<LabeledSentence>& data) {
  const auto inputs = prepare_inputs(lm, data, &tagger.scheme());
  Evaluation e;
  e.predicted = predict_tags(tagger, inputs);
  e.metrics = score_predictions(tagger.scheme().task(), data, e.predicted);
  return e;
}

std::string context_window(const Sentence& sentence, std::size_t position, std::size_t radius) {
  const std::size_t lo = position >= radius ? position - radius : 0;
  const std::size_t hi = std::min(sentence.size(), position + radius + 1);
  std::string out;
  for (std::size_t i = lo; i < hi; ++i) {
    if (i > lo) out += ' ';
    out += i == position ? "[" + sentence[i] + "]" : sentence[i];
  }
  return out;
}

std::vector<NeighborQuery> nearest_neighbors(const MlmaModel& lm, const std::vector<Sentence>& source,
                                             const std::string& source_language, const std::vector<Sentence>& target,
                                             const std::string& target_language, const std::string& query,
                                             std::size_t k, const LayerCombiner* combiner, std::size_t window) {
  NoGradGuard guard;
  const std::string q = to_lower_utf8(query);
  std::vector<std::pair<std::size_t, std::size_t>> hits;
  std::vector<Sentence> hit_sentences;
  std::vector<std::size_t> hit_index;
  for (std::size_t s = 0; s < source.size(); ++s) {
    bool any = false;
    for (std::size_t p = 0; p < source[s].size(); ++p) {
      if (to_lower_utf8(source[s][p]) == q) {
        hits.emplace_back(s, p);
        hit_index.push_back(hit_sentences.size());
        any = true;
      }
    }
    if (any) hit_sentences.push_back(source[s]);
  }
  if (hits.empty()) {
    spdlog::info("query token '{}' does not occur in the source corpus", query);
    return {};
  }

  auto combine = [&](const ClcrStack& st) -> std::vector<std::vector<double>> {
    Tensor v;
    if (combiner) {
      v = combiner->combine(st);
    } else {
      const Tensor uniform = Tensor::full({st.layers, st.width}, Real(1) / static_cast<Real>(st.layers));
      v = dimwise_layer_sum(uniform, st.packed);
    }
    std::vector<std::vector<double>> rows(v.rows(), std::vector<double>(v.cols()));
    for (std::size_t r = 0; r < v.rows(); ++r) {
      double norm = 0.0;
      for (std::size_t c = 0; c < v.cols(); ++c) {
        rows[r][c] = static_cast<double>(v.at(r, c));
        norm += rows[r][c] * rows[r][c];
      }
      norm = std::sqrt(norm);
      if (norm > 0.0) {
        for (auto& x : rows[r]) x /= norm;
      }
    }
    return rows;
  };

  const auto src_stacks = extract_corpus(hit_sentences, source_language, lm);
  const auto tgt_stacks = extract_corpus(target, target_language, lm);
  struct Candidate {
    std::size_t sentence, position;
    std::vector<double> v;
  };
  std::vector<Candidate> candidates;
  for (std::size_t s = 0; s < tgt_stacks.size(); ++s) {
    auto rows = combine(tgt_stacks[s]);
    for (std::size_t p = 0; p < rows.size(); ++p) candidates.push_back({s, p, std::move(rows[p])});
  }

  std::vector<NeighborQuery> out;
  std::vector<std::vector<std::vector<double>>> src_rows;
  for (const auto& st : src_stacks) src_rows.push_back(combine(st));
  for (std::size_t h = 0; h < hits.size(); ++h) {
    const auto [s, p] = hits[h];
    const auto& qv = src_rows[hit_index[h]][p];
    std::vector<std::pair<double, std::size_t>> scored;
    scored.reserve(candidates.size());
    for (std::size_t c = 0; c < candidates.size(); ++c) {
      double dot = 0.0;
      for (std::size_t d = 0; d < qv.size(); ++d) dot += qv[d] * candidates[c].v[d];
      scored.emplace_back(dot, c);
    }
    const std::size_t top = std::min(k, scored.size());
    std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(top), scored.end(),
                      [](const auto& a, const auto& b) { return a.first > b.first || (a.first == b.first && a.second < b.second); });
    NeighborQuery nq{s, p, context_window(source[s], p, window), {}};
    for (std::size_t i = 0; i < top; ++i) {
      const auto& c = candidates[scored[i].second];
      nq.neighbors.push_back(
          {c.sentence, c.position, target[c.sentence][c.position], context_window(target[c.sentence], c.position, window),
           scored[i].first});
    }
    out.push_back(std::move(nq));
  }
  return out;
}

LmTrainResult cmd_train_lm(const RunConfig& cfg, std::uint64_t seed) {
  const auto corpora = load_corpora(cfg);
  std::filesystem::create_directories(cfg.output_dir);
  std::ofstream log_out(cfg.output_dir / "lm_log.jsonl");
  auto result = train_lm(cfg, corpora, seed, [&](const LmEpochStats& s) {
    nlohmann::json j{{"record", "lm_epoch"}, {"epoch", s.epoch}, {"reg", s.reg}, {"loss", s.loss}, {"seconds", s.seconds}};
    for (std::size_t i = 0; i < s.nll.size(); ++i) j["nll"][cfg.languages[i]] = s.nll[i];
    log_out << j.dump() << "\n";
    log_out.flush();
  });
  result.model.save(cfg.lm_checkpoint());
  write_key_values(cfg.output_dir / "run.cfg", cfg.to_key_values());
  return result;
}

std::vector<std::filesystem::path> cmd_train_tagger(const RunConfig& cfg) {
  const MlmaModel lm = MlmaModel::load(cfg.lm_checkpoint());
  std::vector<LabeledSentence> train;
  for (const auto& src : cfg.sources) {
    auto it = cfg.train_files.find(src);
    if (it == cfg.train_files.end()) throw ConfigError("config: no data.train." + src + " given");
    auto part = load_conll(it->second, src);
    train.insert(train.end(), part.begin(), part.end());
  }
  std::vector<LabeledSentence> dev;
  if (cfg.dev_file) dev = load_conll(*cfg.dev_file, cfg.sources.front());
  std::vector<std::filesystem::path> written;
  for (auto seed : cfg.seeds) {
    const auto r = train_tagger(cfg, lm, train, dev, seed);
    KeyValues extra;
    extra["lm.hash"] = std::to_string(r.lm_hash);
    extra["best_epoch"] = std::to_string(r.best_epoch);
    r.tagger.save(cfg.tagger_checkpoint(seed), extra);
    written.push_back(cfg.tagger_checkpoint(seed));
  }
  return written;
}

MetricsReport cmd_evaluate(const RunConfig& cfg) {
  if (!cfg.test_file) throw ConfigError("config: no data.test given");
  const MlmaModel lm = MlmaModel::load(cfg.lm_checkpoint());
  const auto test = load_conll(*cfg.test_file, cfg.target);
  MetricsReport report;
  report.task = to_string(cfg.task);
  for (auto seed : cfg.seeds) {
    KeyValues meta;
    const CrfTagger tagger = CrfTagger::load(cfg.tagger_checkpoint(seed), &meta);
    if (tagger.scheme().task() != cfg.task) {
      throw ContractError("tagger " + cfg.tagger_checkpoint(seed).string() + " was trained for " +
                          to_string(tagger.scheme().task()));
    }
    auto it = meta.find("lm.hash");
    if (it != meta.end() && it->second != std::to_string(parameter_hash(lm.parameters()))) {
      throw ContractError("tagger " + cfg.tagger_checkpoint(seed).string() + " was trained on a different LM");
    }
    Evaluation e = evaluate_tagger(tagger, lm, test);
    e.metrics.seed = seed;
    report.seeds.push_back(e.metrics);
  }
  return report;
}

std::vector<NeighborQuery> cmd_neighbors(const RunConfig& cfg, const std::filesystem::path& source_corpus,
                                         const std::filesystem::path& target_corpus, const std::string& query,
                                         std::size_t k, const std::optional<std::filesystem::path>& tagger_checkpoint) {
  const MlmaModel lm = MlmaModel::load(cfg.lm_checkpoint());
  std::optional<CrfTagger> tagger;
  if (tagger_checkpoint) tagger.emplace(CrfTagger::load(*tagger_checkpoint));
  return nearest_neighbors(lm, load_sentences(source_corpus), cfg.sources.front(), load_sentences(target_corpus),
                           cfg.target, query, k, tagger ? &tagger->combiner() : nullptr);
}

SyntheticPair cmd_synth_gen(const SyntheticPairSpec& spec, std::uint64_t seed, const std::filesystem::path& dir) {
  SyntheticPair pair = gen_synthetic_pair(spec, seed);
  std::filesystem::create_directories(dir);
  write_sentences(dir / "mono.src.txt", pair.mono_source);
  write_sentences(dir / "mono.tgt.txt", pair.mono_target);
  write_conll(dir / "train.src.conll", pair.train_source);
  write_conll(dir / "test.tgt.conll", pair.test_target);
  std::ofstream lex(dir / "lexicon.tsv");
  if (!lex) throw IoError("cannot write " + (dir / "lexicon.tsv").string());
  lex << "lexeme\ttag\tsource\ttarget\n";
  for (std::size_t i = 0; i < pair.lexicon_source.size(); ++i) {
    lex << i << '\t' << pair.tag_names[pair.lexeme_tag[i]] << '\t' << pair.lexicon_source[i] << '\t'
        << pair.lexicon_target[i] << '\n';
  }
  KeyValues kv = spec.to_key_values();
  kv["seed"] = std::to_string(seed);
  write_key_values(dir / "spec.txt", kv);
  return pair;
}

MLMA_NAMESPACE_END
