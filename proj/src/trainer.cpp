#include "refsum/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "refsum/checkpoint.hpp"
#include "refsum/data.hpp"
#include "refsum/error.hpp"
#include "refsum/io.hpp"
#include "refsum/log.hpp"
#include "refsum/rng.hpp"
#include "refsum/rouge.hpp"

namespace refsum {

namespace {

constexpr std::uint64_t kRlStreamSalt = 0x5851f42d4c957f2dULL;
constexpr std::uint64_t kDropoutStreamSalt = 0x14057b7ef767814fULL;

std::vector<TokenId> until_pad(std::span<const TokenId> ids) {
  return {ids.begin(), std::find(ids.begin(), ids.end(), kPad)};
}

double rouge_l_reward(std::span<const TokenId> sample, std::span<const TokenId> gold) {
  const auto s = until_pad(sample);
  return rouge_l<TokenId>(s, gold).f1;
}

/// Row without its trailing PAD run, so a graph never depends on how wide
/// the rest of its micro-batch was.
std::span<const TokenId> trim_padding(const std::vector<TokenId>& row) {
  std::size_t n = row.size();
  while (n > 0 && row[n - 1] == kPad) --n;
  return std::span<const TokenId>(row).first(n);
}

std::filesystem::path checkpoint_name(const std::filesystem::path& dir, long step) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "step-%08ld.ckpt", step);
  return dir / buf;
}

std::vector<std::size_t> choose_masks(std::size_t n, double rate, std::mt19937_64& rng) {
  std::vector<std::size_t> picked;
  for (std::size_t i = 0; i < n; ++i) {
    if (uniform01(rng) < rate) picked.push_back(i);
  }
  if (picked.empty() && n > 0) picked.push_back(static_cast<std::size_t>(uniform_index(rng, n)));
  return picked;
}

struct MlmItem {
  std::vector<TokenId> framed;
  std::vector<Index> rows;  // framed positions that were masked
  std::vector<TokenId> labels;
};

MlmItem mask_sequence(const ModelParams& params, std::span<const TokenId> seq, double rate, std::mt19937_64& rng) {
  const std::size_t n = std::min(seq.size(), static_cast<std::size_t>(params.config.max_source_len));
  MlmItem item;
  item.framed.push_back(kCls);
  for (std::size_t i = 0; i < n; ++i) {
    const TokenId id = seq[i];
    item.framed.push_back(id < 0 || id >= params.config.vocab_size ? kUnk : id);
  }
  item.framed.push_back(kSep);
  for (std::size_t i : choose_masks(n, rate, rng)) {
    if (item.framed[i + 1] == kPad) continue;
    item.rows.push_back(static_cast<Index>(i + 1));
    item.labels.push_back(item.framed[i + 1]);
    item.framed[i + 1] = kMask;
  }
  return item;
}

Node mlm_distributions(Tape& tape, ModelParams& params, const MlmItem& item) {
  Node states = encoder_stack(tape, params, item.framed);
  return vocab_distribution(tape, params, gather_rows<Real, Index>(states, item.rows));
}

}  // namespace

void TrainConfig::validate() const {
  if (!(learning_rate > 0)) throw std::invalid_argument("learning_rate must be positive");
  if (!(adam.beta1 >= 0 && adam.beta1 < 1 && adam.beta2 >= 0 && adam.beta2 < 1)) {
    throw std::invalid_argument("Adam betas must be in [0, 1)");
  }
  if (!(adam.epsilon > 0)) throw std::invalid_argument("epsilon must be positive");
  if (warmup_steps < 0) throw std::invalid_argument("warmup_steps must be >= 0");
  if (micro_batch < 1 || accumulate_steps < 1) throw std::invalid_argument("micro_batch and accumulate_steps must be >= 1");
  if (batch_size != accumulate_steps * micro_batch) {
    throw std::invalid_argument("batch_size must equal accumulate_steps * micro_batch");
  }
  if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
  if (!(dropout >= 0 && dropout < 1)) throw std::invalid_argument("dropout must be in [0, 1)");
  if (!(smoothing >= 0 && smoothing < 1)) throw std::invalid_argument("smoothing must be in [0, 1)");
  if (!(gamma >= 0 && gamma <= 1)) throw std::invalid_argument("gamma must be in [0, 1]");
  if (keep_last_checkpoints < 1) throw std::invalid_argument("keep_last_checkpoints must be >= 1");
  if (checkpoint_every < 0 || max_steps < 0 || mlm_pretrain_steps < 0) {
    throw std::invalid_argument("step counts must be >= 0");
  }
}

std::vector<TokenId> sample_draft(ModelParams& params, const EncoderOutput& source, int max_len,
                                  std::mt19937_64& rng) {
  Tape tape(false);
  tape.set_recording(false);
  const EncoderOutput enc = detach(tape, source);
  const std::size_t mark = tape.size();
  std::vector<TokenId> out;
  while (static_cast<int>(out.size()) < max_len) {
    const Matrix dist = decode_draft_step(tape, params, out, enc).value();
    tape.rewind(mark);
    const auto id = static_cast<TokenId>(
        sample_categorical(std::span<const double>(dist.data(), static_cast<std::size_t>(dist.size())), rng));
    out.push_back(id);
    if (id == kPad) break;
  }
  return out;
}

ExampleLoss compute_example_loss(Tape& tape, ModelParams& params, std::span<const TokenId> source,
                                 std::span<const TokenId> source_copy, int num_oov,
                                 std::span<const TokenId> target, const TrainConfig& cfg,
                                 std::mt19937_64& rl_rng) {
  const std::vector<TokenId> gold = until_pad(target);
  if (gold.empty()) throw DataError("example has an empty target");
  const int vocab = params.config.vocab_size;
  ExampleLoss out;
  LossReport& r = out.report;

  EncoderOutput enc = encode_document(tape, params, source, source_copy, num_oov);

  // Draft stage, teacher forced; the trailing PAD target ends the sequence.
  std::vector<TokenId> draft_targets = gold;
  draft_targets.push_back(kPad);
  Node l_dec = mle_loss(tape, draft_distributions(tape, params, gold, enc), draft_targets, vocab, cfg.smoothing);
  r.l_dec = l_dec.item();

  Node dec_mixed = l_dec;
  Node refine_mixed = tape.constant(Matrix::Zero(1, 1));
  std::optional<Node> refine_dists;
  if (cfg.refine_enabled) {
    refine_dists = refine_distributions(tape, params, gold, enc);
    Node l_refine = refine_loss(tape, *refine_dists, gold, vocab, cfg.smoothing);
    r.l_refine = l_refine.item();
    refine_mixed = l_refine;
  }

  if (cfg.rl_enabled) {
    std::mt19937_64* main_rng = tape.rng();
    tape.set_rng(&rl_rng);

    const std::vector<TokenId> sample = sample_draft(params, enc, params.config.max_target_len, rl_rng);
    const std::vector<TokenId> inputs(sample.begin(), sample.end() - 1);
    Node logprob = sequence_logprob(draft_distributions(tape, params, inputs, enc), sample);
    r.reward_draft = rouge_l_reward(sample, gold);
    Node l_rl_dec = rl_loss(logprob, r.reward_draft);
    r.l_rl_dec = l_rl_dec.item();
    dec_mixed = mixed_loss(l_rl_dec, l_dec, cfg.gamma);

    if (refine_dists) {
      const Matrix& p = refine_dists->value();
      std::vector<TokenId> refined(gold.size());
      for (Index t = 0; t < p.rows(); ++t) {
        refined[static_cast<std::size_t>(t)] = static_cast<TokenId>(sample_categorical(
            std::span<const double>(p.row(t).data(), static_cast<std::size_t>(p.cols())), rl_rng));
      }
      r.reward_refine = rouge_l_reward(refined, gold);
      Node l_rl_refine = rl_loss(sequence_logprob(*refine_dists, refined), r.reward_refine);
      r.l_rl_refine = l_rl_refine.item();
      refine_mixed = mixed_loss(l_rl_refine, refine_mixed, cfg.gamma);
    }
    tape.set_rng(main_rng);
  }

  r.l_dec_mixed = dec_mixed.item();
  r.l_refine_mixed = refine_mixed.item();
  out.total = joint_loss(dec_mixed, refine_mixed);
  r.l_model = out.total.item();
  return out;
}

TrainResult train(ModelParams& params, const std::vector<TokenizedExample>& data, const TrainConfig& cfg) {
  cfg.validate();
  if (data.empty()) throw DataError("training set is empty");
  params.config.dropout = cfg.dropout;

  std::mt19937_64 dropout_rng(cfg.seed ^ kDropoutStreamSalt);
  std::mt19937_64 rl_rng(cfg.seed ^ kRlStreamSalt);

  const std::size_t micro_per_epoch = (data.size() + cfg.micro_batch - 1) / cfg.micro_batch;
  const auto steps_per_epoch = static_cast<long>((micro_per_epoch + cfg.accumulate_steps - 1) / cfg.accumulate_steps);
  long planned = steps_per_epoch * cfg.epochs;
  if (cfg.max_steps > 0) planned = std::min(planned, cfg.max_steps);
  const long warmup = cfg.warmup_steps > 0 ? cfg.warmup_steps : std::max(1L, planned / 10);

  TrainResult result;
  const std::vector<Param*> all = params.all();

  auto save = [&](long step, int epoch) {
    if (!result.checkpoints.empty() && result.checkpoints.back().step == step) return;
    CheckpointRecord rec{step, epoch, serialize_checkpoint(params, &result.adam, static_cast<std::uint64_t>(step)), {}};
    if (!cfg.checkpoint_dir.empty()) {
      rec.path = checkpoint_name(cfg.checkpoint_dir, step);
      write_file_atomic(rec.path, rec.bytes);
    }
    result.checkpoints.push_back(std::move(rec));
    while (result.checkpoints.size() > cfg.keep_last_checkpoints) {
      if (!result.checkpoints.front().path.empty()) std::filesystem::remove(result.checkpoints.front().path);
      result.checkpoints.erase(result.checkpoints.begin());
    }
  };

  long step = 0;
  bool done = false;
  for (int epoch = 0; epoch < cfg.epochs && !done; ++epoch) {
    const auto batches = make_batches(data, cfg.micro_batch, cfg.seed, static_cast<std::uint64_t>(epoch));
    for (std::size_t b0 = 0; b0 < batches.size() && !done; b0 += cfg.accumulate_steps) {
      params.zero_grad();
      LossReport sum;
      std::size_t n = 0;
      for (std::size_t b = b0; b < std::min(batches.size(), b0 + cfg.accumulate_steps); ++b) {
        const MicroBatch& mb = batches[b];
        for (std::size_t row = 0; row < mb.indices.size(); ++row) {
          const TokenizedExample& ex = data[mb.indices[row]];
          Tape tape(true, &dropout_rng);
          const auto source = trim_padding(mb.source[row]);
          const auto copy = std::span<const TokenId>(mb.source_copy[row]).first(source.size());
          ExampleLoss loss = compute_example_loss(tape, params, source, copy, ex.oov.size(),
                                                  trim_padding(mb.target[row]), cfg, rl_rng);
          if (!std::isfinite(loss.total.item())) {
            throw NumericError("non-finite loss at step " + std::to_string(step + 1) + " on example '" + ex.id +
                               "': " + format_log_record(step + 1, 0.0, loss.report));
          }
          tape.backward(loss.total);
          sum += loss.report;
          ++n;
        }
      }
      const double inv = 1.0 / static_cast<double>(n);
      for (Param* p : all) p->grad *= inv;
      ++step;
      const double lr = lr_schedule(step, warmup, cfg.learning_rate);
      adam_step(all, result.adam, lr, cfg.adam);

      LossReport report = sum.scaled(inv);
      report.l_model = joint_loss(report.l_dec_mixed, report.l_refine_mixed);
      result.reports.push_back(report);
      result.log.push_back(format_log_record(step, lr, report));
      log_info(result.log.back());

      if (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0) save(step, epoch);
      done = cfg.max_steps > 0 && step >= cfg.max_steps;
    }
    save(step, epoch);
  }
  result.steps = step;
  return result;
}

double dev_score(ModelParams& params, const Vocabulary& vocab, const std::vector<TokenizedExample>& dev,
                 const GenerateOptions& opts, bool stem) {
  if (dev.empty()) throw std::invalid_argument("dev set is empty");
  double total = 0;
  for (const auto& ex : dev) {
    const Generation g = generate(params, vocab, ex, opts);
    total += score_full(g.final_text, ex.reference, stem).mean_f1();
  }
  return total / static_cast<double>(dev.size());
}

std::size_t select_best_index(std::span<const double> scores) {
  if (scores.empty()) throw std::invalid_argument("no scores to select from");
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i) {
    if (scores[i] >= scores[best]) best = i;
  }
  return best;
}

std::size_t select_best_checkpoint(std::span<const CheckpointRecord> checkpoints,
                                   const std::vector<TokenizedExample>& dev, const Vocabulary& vocab,
                                   const GenerateOptions& opts, std::vector<double>* scores) {
  if (checkpoints.empty()) throw std::invalid_argument("no checkpoints to select from");
  if (dev.empty()) throw std::invalid_argument("dev set is empty");
  std::vector<double> s;
  for (const auto& ck : checkpoints) {
    Checkpoint loaded = parse_checkpoint(ck.bytes);
    s.push_back(dev_score(loaded.params, vocab, dev, opts));
  }
  if (scores != nullptr) *scores = s;
  return select_best_index(s);
}

std::vector<double> mlm_pretrain(ModelParams& params, const std::vector<std::vector<TokenId>>& sequences,
                                 const MlmConfig& cfg) {
  std::vector<double> losses;
  if (cfg.steps <= 0) return losses;
  if (sequences.empty()) throw DataError("masked-LM corpus is empty");
  if (cfg.batch < 1) throw std::invalid_argument("mlm batch must be >= 1");

  std::mt19937_64 mask_rng(cfg.seed);
  std::mt19937_64 dropout_rng(cfg.seed ^ kDropoutStreamSalt);
  const std::vector<Param*> trainable = params.encoder_side();
  AdamState adam;
  const long warmup = std::max(1L, cfg.steps / 10);

  std::vector<std::size_t> order;
  std::size_t cursor = 0;
  for (long step = 1; step <= cfg.steps; ++step) {
    params.zero_grad();
    double total = 0;
    std::size_t masked = 0;
    for (std::size_t k = 0; k < cfg.batch; ++k) {
      if (cursor == order.size()) {
        order.resize(sequences.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        shuffle(order, mask_rng);
        cursor = 0;
      }
      const auto& seq = sequences[order[cursor++]];
      if (seq.empty()) continue;
      MlmItem item = mask_sequence(params, seq, cfg.mask_rate, mask_rng);
      if (item.rows.empty()) continue;
      Tape tape(true, &dropout_rng);
      Node loss = affine(sequence_logprob(mlm_distributions(tape, params, item), item.labels), -1.0);
      tape.backward(loss);
      total += loss.item();
      masked += item.rows.size();
    }
    if (masked == 0) continue;
    for (Param* p : trainable) p->grad /= static_cast<double>(masked);
    adam_step(trainable, adam, lr_schedule(step, warmup, cfg.learning_rate), cfg.adam);
    losses.push_back(total / static_cast<double>(masked));
  }
  params.zero_grad();
  return losses;
}

double mlm_accuracy(ModelParams& params, const std::vector<std::vector<TokenId>>& sequences, double mask_rate,
                    std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::size_t correct = 0, total = 0;
  for (const auto& seq : sequences) {
    if (seq.empty()) continue;
    MlmItem item = mask_sequence(params, seq, mask_rate, rng);
    if (item.rows.empty()) continue;
    Tape tape(false);
    tape.set_recording(false);
    const Matrix p = mlm_distributions(tape, params, item).value();
    for (Index i = 0; i < p.rows(); ++i) {
      Index best = 0;
      p.row(i).maxCoeff(&best);
      correct += static_cast<TokenId>(best) == item.labels[static_cast<std::size_t>(i)];
      ++total;
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total);
}

}  // namespace refsum
