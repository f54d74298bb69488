#include <benchmark/benchmark.h>

#include "mlma/alignment.hpp"
#include "mlma/crf.hpp"
#include "mlma/model.hpp"
#include "mlma/ops.hpp"

namespace {

using namespace mlma;

Tensor random_tensor(Shape shape, Rng& rng, bool requires_grad = false) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  std::vector<Real> v(n);
  for (auto& x : v) x = static_cast<Real>(rng.uniform(-1, 1));
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(1);
  const Tensor a = random_tensor({n, n}, rng), b = random_tensor({n, n}, rng);
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * 2 * n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(128)->Arg(256);

void BM_MaskedAttention(benchmark::State& state) {
  const auto len = static_cast<std::size_t>(state.range(0));
  const std::size_t sentences = 8, d = 32;
  Rng rng(2);
  const Tensor q = random_tensor({len * sentences, d}, rng), k = random_tensor({len * sentences, d}, rng),
               v = random_tensor({len * sentences, d}, rng);
  std::vector<Segment> segments;
  for (std::size_t s = 0; s < sentences; ++s) segments.push_back({s * len, len});
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(masked_attention(q, k, v, segments, 2, AttentionMask::Causal));
}
BENCHMARK(BM_MaskedAttention)->Arg(16)->Arg(32)->Arg(64);

MlmaModel desk_model() {
  std::vector<std::string> words;
  for (int w = 0; w < 2000; ++w) words.push_back("w" + std::to_string(w));
  return MlmaModel(MlmaConfig::desk(), {"xx"}, {Vocabulary::from_tokens(words)}, 3);
}

std::vector<std::vector<TokenId>> random_sentences(Rng& rng, std::size_t count, std::size_t len) {
  std::vector<std::vector<TokenId>> out(count, std::vector<TokenId>(len));
  for (auto& s : out) {
    for (auto& id : s) id = Vocabulary::kNumSpecials + rng.below(2000);
  }
  return out;
}

void BM_ModelForward(benchmark::State& state) {
  const MlmaModel m = desk_model();
  Rng rng(4);
  const auto sentences = random_sentences(rng, 16, static_cast<std::size_t>(state.range(0)));
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(m.nll(m.encode(sentences, 0, false, nullptr), 0));
}
BENCHMARK(BM_ModelForward)->Arg(10)->Arg(20);

void BM_ModelForwardBackward(benchmark::State& state) {
  const MlmaModel m = desk_model();
  Rng rng(5);
  const auto sentences = random_sentences(rng, 16, static_cast<std::size_t>(state.range(0)));
  for (auto _ : state) {
    for (auto& p : m.parameter_list()) p.zero_grad();
    backward(m.nll(m.encode(sentences, 0, true, &rng), 0));
  }
}
BENCHMARK(BM_ModelForwardBackward)->Arg(10)->Arg(20);

void BM_CrfLogPartition(benchmark::State& state) {
  const auto tags = static_cast<std::size_t>(state.range(0));
  Rng rng(6);
  const Tensor e = random_tensor({30, tags}, rng), tr = random_tensor({tags + 2, tags + 2}, rng);
  for (auto _ : state) benchmark::DoNotOptimize(crf_log_partition(e, tr));
}
BENCHMARK(BM_CrfLogPartition)->Arg(9)->Arg(17);

void BM_CrfViterbi(benchmark::State& state) {
  const auto tags = static_cast<std::size_t>(state.range(0));
  Rng rng(7);
  const Tensor e = random_tensor({30, tags}, rng), tr = random_tensor({tags + 2, tags + 2}, rng);
  for (auto _ : state) benchmark::DoNotOptimize(viterbi(e, tr));
}
BENCHMARK(BM_CrfViterbi)->Arg(9)->Arg(17);

void BM_LossAvl(benchmark::State& state) {
  const auto rows = static_cast<std::size_t>(state.range(0));
  Rng rng(8);
  BatchStateSample sample;
  for (int l = 0; l < 3; ++l) {
    sample.source.push_back(random_tensor({rows, 64}, rng, true));
    sample.target.push_back(random_tensor({rows, 64}, rng, true));
  }
  const AlignmentConfig cfg;
  for (auto _ : state) backward(loss_avl(sample, cfg));
}
BENCHMARK(BM_LossAvl)->Arg(128)->Arg(512);

}  // namespace

BENCHMARK_MAIN();
