#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <tuple>

#include "refsum/checkpoint.hpp"
#include "refsum/error.hpp"
#include "refsum/rouge.hpp"
#include "refsum/trainer.hpp"
#include "support.hpp"

using namespace refsum;
using namespace refsum::testing;

namespace {

std::vector<TokenizedExample> toy_data(std::size_t n, int vocab, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<TokenizedExample> data;
  for (std::size_t i = 0; i < n; ++i) {
    TokenizedExample ex;
    ex.id = "t" + std::to_string(i);
    ex.source_ids = random_ids(rng, 4 + uniform_index(rng, 6), vocab);
    ex.source_copy_ids = ex.source_ids;
    for (std::size_t k = 0, len = 1 + uniform_index(rng, 4); k < len; ++k) {
      ex.target_ids.push_back(ex.source_ids[uniform_index(rng, ex.source_ids.size())]);
    }
    ex.oov = OovMap(vocab);
    data.push_back(std::move(ex));
  }
  return data;
}

TrainConfig small_train(std::size_t accumulate, std::size_t micro, int epochs = 1) {
  TrainConfig c;
  c.accumulate_steps = accumulate;
  c.micro_batch = micro;
  c.batch_size = accumulate * micro;
  c.epochs = epochs;
  c.dropout = 0.0;
  c.learning_rate = 1e-2;
  c.warmup_steps = 2;
  return c;
}

std::string snapshot(const ModelParams& p) { return serialize_checkpoint(p, nullptr, 0); }

}  // namespace

TEST_CASE("train config validation") {
  TrainConfig c;
  CHECK_NOTHROW(c.validate());
  c.batch_size = 35;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = TrainConfig{};
  c.gamma = 1.5;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = TrainConfig{};
  c.learning_rate = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("gradient accumulation matches one large batch bitwise") {
  const auto data = toy_data(8, 20, 1);
  for (auto [acc, micro, whole] : {std::tuple{4u, 2u, 8u}, std::tuple{2u, 2u, 4u}}) {
    const std::vector<TokenizedExample> subset(data.begin(), data.begin() + whole);
    auto a = init_params(tiny_config(20), 2), b = init_params(tiny_config(20), 2);
    TrainConfig ca = small_train(acc, micro, 3), cb = small_train(1, whole, 3);
    train(a, subset, ca);
    train(b, subset, cb);
    CHECK(snapshot(a) == snapshot(b));
  }
}

TEST_CASE("gamma zero with sampling on equals plain teacher forcing") {
  const auto data = toy_data(6, 20, 3);
  auto a = init_params(tiny_config(20), 4), b = init_params(tiny_config(20), 4);
  TrainConfig ca = small_train(2, 3, 2), cb = ca;
  ca.dropout = cb.dropout = 0.1;  // the dropout stream must not be disturbed by sampling either
  cb.rl_enabled = true;
  cb.gamma = 0.0;
  const auto ra = train(a, data, ca);
  const auto rb = train(b, data, cb);
  CHECK(snapshot(a) == snapshot(b));
  CHECK(rb.reports.front().reward_draft >= 0.0);
  for (std::size_t i = 0; i < ra.reports.size(); ++i) CHECK(ra.reports[i].l_model == rb.reports[i].l_model);
}

TEST_CASE("same seed gives identical checkpoints, another seed does not") {
  const auto data = toy_data(6, 20, 5);
  TrainConfig c = small_train(1, 3, 2);
  c.dropout = 0.15;
  c.rl_enabled = true;
  c.gamma = 0.5;
  auto a = init_params(tiny_config(20), 6), b = init_params(tiny_config(20), 6), d = init_params(tiny_config(20), 6);
  const auto ra = train(a, data, c), rb = train(b, data, c);
  REQUIRE(ra.checkpoints.size() == rb.checkpoints.size());
  for (std::size_t i = 0; i < ra.checkpoints.size(); ++i) CHECK(ra.checkpoints[i].bytes == rb.checkpoints[i].bytes);
  CHECK(ra.log == rb.log);
  c.seed = 2;
  const auto rd = train(d, data, c);
  CHECK(rd.checkpoints.back().bytes != ra.checkpoints.back().bytes);
}

TEST_CASE("logged model loss is the sum of the mixed stage losses") {
  const auto data = toy_data(6, 20, 7);
  auto params = init_params(tiny_config(20), 8);
  TrainConfig c = small_train(1, 2, 2);
  c.rl_enabled = true;
  c.gamma = 0.7;
  const auto r = train(params, data, c);
  REQUIRE(r.reports.size() == 6);
  for (const auto& rep : r.reports) {
    CHECK(rep.l_model == rep.l_dec_mixed + rep.l_refine_mixed);
    CHECK(std::isfinite(rep.l_model));
    CHECK(rep.reward_draft >= 0.0);
    CHECK(rep.reward_draft <= 1.0);
    CHECK(rep.reward_refine >= 0.0);
    CHECK(rep.reward_refine <= 1.0);
    CHECK(rep.l_dec_mixed == doctest::Approx(mixed_loss(rep.l_rl_dec, rep.l_dec, 0.7)));
  }
  CHECK(r.log.size() == 6);
}

TEST_CASE("per-example loss decomposes into its stages") {
  const auto data = toy_data(3, 20, 9);
  auto params = init_params(tiny_config(20), 10);
  TrainConfig c = small_train(1, 1);
  c.rl_enabled = true;
  c.gamma = 0.25;
  std::mt19937_64 rl(1);
  for (const auto& ex : data) {
    Tape tape;
    const ExampleLoss l = compute_example_loss(tape, params, ex.source_ids, ex.source_copy_ids, 0, ex.target_ids, c, rl);
    const auto& r = l.report;
    CHECK(r.l_model == doctest::Approx(r.l_dec_mixed + r.l_refine_mixed).epsilon(1e-14));
    CHECK(r.l_refine_mixed == doctest::Approx(0.25 * r.l_rl_refine + 0.75 * r.l_refine).epsilon(1e-14));
  }
  c.refine_enabled = false;
  Tape tape;
  const auto& ex = data.front();
  const ExampleLoss one = compute_example_loss(tape, params, ex.source_ids, ex.source_copy_ids, 0, ex.target_ids, c, rl);
  CHECK(one.report.l_refine == 0.0);
  CHECK(one.report.l_refine_mixed == 0.0);
  const std::vector<TokenId> empty_target{kPad, kPad};
  CHECK_THROWS_AS(compute_example_loss(tape, params, ex.source_ids, ex.source_copy_ids, 0, empty_target, c, rl),
                  DataError);
}

TEST_CASE("checkpoint cadence and retention") {
  const auto data = toy_data(8, 20, 11);
  auto params = init_params(tiny_config(20), 12);
  TrainConfig c = small_train(1, 2, 3);  // 4 steps per epoch, 12 in total
  c.checkpoint_every = 3;
  c.keep_last_checkpoints = 4;
  const auto dir = std::filesystem::temp_directory_path() / "refsum_ck_cadence";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  c.checkpoint_dir = dir;
  const auto r = train(params, data, c);
  CHECK(r.steps == 12);
  // saves at 3, 4 (epoch), 6, 8 (epoch), 9, 12 (both); the last four remain
  std::vector<long> steps;
  for (const auto& ck : r.checkpoints) steps.push_back(ck.step);
  CHECK(steps == std::vector<long>{6, 8, 9, 12});
  std::size_t files = 0;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    (void)entry;
    ++files;
  }
  CHECK(files == 4);
  for (const auto& ck : r.checkpoints) CHECK(load_checkpoint(ck.path).step == static_cast<std::uint64_t>(ck.step));
  CHECK(snapshot(parse_checkpoint(r.checkpoints.back().bytes).params) == snapshot(params));
  std::filesystem::remove_all(dir);
}

TEST_CASE("max_steps caps training") {
  const auto data = toy_data(8, 20, 13);
  auto params = init_params(tiny_config(20), 14);
  TrainConfig c = small_train(1, 1, 5);
  c.max_steps = 5;
  const auto r = train(params, data, c);
  CHECK(r.steps == 5);
  CHECK(r.checkpoints.back().step == 5);
}

TEST_CASE("training refuses empty data and non-finite losses") {
  auto params = init_params(tiny_config(20), 15);
  CHECK_THROWS_AS(train(params, {}, small_train(1, 1)), DataError);
  params.copy.gate_bias.value(0, 0) = std::nan("");
  CHECK_THROWS_AS(train(params, toy_data(2, 20, 16), small_train(1, 1)), NumericError);
}

TEST_CASE("checkpoint selection picks the best score, latest on ties") {
  const std::vector<double> tie{0.2, 0.5, 0.5};
  CHECK(select_best_index(tie) == 2);
  const std::vector<double> one{0.1};
  CHECK(select_best_index(one) == 0);
  const std::vector<double> peak{0.3, 0.9, 0.1};
  CHECK(select_best_index(peak) == 1);
  CHECK_THROWS_AS(select_best_index(std::vector<double>{}), std::invalid_argument);
}

TEST_CASE("dev scores agree with the ROUGE scorer") {
  const std::vector<std::string> corpus{"the cat sat on the mat .", "a dog ran to the park ."};
  const Vocabulary vocab = build_vocab(corpus, 30);
  std::vector<TokenizedExample> dev;
  dev.push_back(make_example("d1", "the cat sat on the mat .", "the cat sat .", vocab, 12, 8));
  dev.push_back(make_example("d2", "a dog ran to the park .", "dog ran .", vocab, 12, 8));
  auto p1 = init_params(tiny_config(vocab.size()), 1), p2 = init_params(tiny_config(vocab.size()), 2);
  std::vector<CheckpointRecord> cks{{1, 0, serialize_checkpoint(p1, nullptr, 1), {}},
                                    {2, 0, serialize_checkpoint(p2, nullptr, 2), {}}};
  GenerateOptions opts;
  opts.beam.max_len = 5;
  std::vector<double> scores;
  const std::size_t best = select_best_checkpoint(cks, dev, vocab, opts, &scores);
  REQUIRE(scores.size() == 2);
  for (std::size_t i = 0; i < 2; ++i) {
    auto params = parse_checkpoint(cks[i].bytes).params;
    double total = 0;
    for (const auto& ex : dev) {
      const auto s = score_full(generate(params, vocab, ex, opts).final_text, ex.reference);
      total += (s.r1.f1 + s.r2.f1 + s.rl.f1) / 3.0;
    }
    CHECK(scores[i] == total / 2.0);
  }
  CHECK(best == select_best_index(scores));
  const std::vector<CheckpointRecord> single{cks[0]};
  CHECK(select_best_checkpoint(single, dev, vocab, opts) == 0);
  CHECK_THROWS_AS(select_best_checkpoint(cks, {}, vocab, opts), std::invalid_argument);
}

TEST_CASE("masked-LM warm-up with zero steps changes nothing") {
  auto params = init_params(tiny_config(20), 17);
  const std::string before = snapshot(params);
  MlmConfig c;
  c.steps = 0;
  CHECK(mlm_pretrain(params, {{5, 6, 7}}, c).empty());
  CHECK(snapshot(params) == before);
}

TEST_CASE("masked-LM warm-up learns and leaves the decoder alone") {
  ModelConfig cfg = tiny_config(40, 32, 2, 4);
  cfg.decoder_layers = 1;
  auto params = init_params(cfg, 1);
  const auto decoder_before = params.decoder[0].ffn.w1.value;
  const auto copy_before = params.copy.bilinear.value;
  std::mt19937_64 rng(3);
  std::vector<std::vector<TokenId>> seqs;
  for (int i = 0; i < 50; ++i) seqs.push_back(random_ids(rng, 8, 40));

  MlmConfig c;
  c.steps = 200;
  c.batch = 10;
  c.learning_rate = 5e-3;
  const auto losses = mlm_pretrain(params, seqs, c);
  REQUIRE(losses.size() == 200);
  auto mean = [&](std::size_t from) {
    double s = 0;
    for (std::size_t i = from; i < from + 20; ++i) s += losses[i];
    return s / 20;
  };
  CHECK(mean(180) < mean(0));
  CHECK(params.decoder[0].ffn.w1.value == decoder_before);
  CHECK(params.copy.bilinear.value == copy_before);

  // keep going until the corpus is memorized
  c.steps = 1800;
  c.seed = 2;
  mlm_pretrain(params, seqs, c);
  const double acc = mlm_accuracy(params, seqs, 0.15, 99);
  MESSAGE("masked recovery accuracy " << acc);
  CHECK(acc > 0.9);
}
