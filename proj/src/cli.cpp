#include "refsum/cli.hpp"

#include <CLI11.hpp>
#include <cinttypes>
#include <cstdio>
#include <iostream>
#include <json.hpp>
#include <sstream>

#include "refsum/checkpoint.hpp"
#include "refsum/config.hpp"
#include "refsum/data.hpp"
#include "refsum/error.hpp"
#include "refsum/io.hpp"
#include "refsum/log.hpp"
#include "refsum/rouge.hpp"
#include "refsum/trainer.hpp"

namespace refsum::cli {

namespace {

using nlohmann::json;

struct Common {
  std::string config_file;
  std::vector<std::string> sets;
  std::vector<std::pair<std::string, std::string>> flags;  // key, value
  bool verbose = false;
  bool quiet = false;
};

/// Registers a flag that, when given, overrides config key `key`.
void override_option(CLI::App* app, Common& c, const std::string& name, const std::string& key,
                     const std::string& help) {
  app->add_option_function<std::string>(
      name, [&c, key](const std::string& v) { c.flags.emplace_back(key, v); }, help);
}

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config_file, "key=value configuration file");
  app->add_option("--set", c.sets, "override any config key: --set key=value")->take_all();
  app->add_flag("-v,--verbose", c.verbose, "log per-step training records");
  app->add_flag("-q,--quiet", c.quiet, "suppress warnings");
}

RunConfig resolve(const Common& c) {
  log_level() = c.quiet ? LogLevel::kQuiet : c.verbose ? LogLevel::kInfo : LogLevel::kWarn;
  RunConfig cfg;
  if (!c.config_file.empty()) apply_config_file(cfg, c.config_file);
  apply_environment(cfg);
  for (const auto& s : c.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + s + "'");
    apply_setting(cfg, s.substr(0, eq), s.substr(eq + 1));
  }
  for (const auto& [k, v] : c.flags) apply_setting(cfg, k, v);
  std::clog << "# resolved configuration\n" << describe(cfg);
  return cfg;
}

void require(const std::filesystem::path& p, const char* what) {
  if (p.empty()) throw UsageError(std::string("missing required setting: ") + what);
}

void write_output(const std::filesystem::path& path, const std::string& text) {
  if (path.empty()) {
    std::cout << text;
  } else {
    write_file_atomic(path, text);
  }
}

std::vector<TokenizedExample> load_examples(const RunConfig& cfg, const std::filesystem::path& path,
                                            const Vocabulary& vocab) {
  CorpusStats stats;
  auto examples = load_corpus(path, vocab, static_cast<std::size_t>(cfg.model.max_source_len),
                              static_cast<std::size_t>(cfg.model.max_target_len), cfg.text_options(), &stats);
  std::clog << "# corpus " << path.string() << ": " << stats.loaded << " loaded, " << stats.skipped_malformed
            << " malformed, " << stats.skipped_empty << " empty\n";
  if (cfg.min_summary_words > 0) examples = filter_min_summary(examples, cfg.min_summary_words);
  if (examples.empty()) throw DataError("no usable records in " + path.string());
  return examples;
}

ModelConfig model_for(const RunConfig& cfg, const Vocabulary& vocab) {
  ModelConfig m = cfg.model;
  m.vocab_size = vocab.size();
  m.dropout = cfg.train.dropout;
  try {
    m.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  return m;
}

std::vector<std::vector<TokenId>> mlm_sequences(const std::vector<TokenizedExample>& examples) {
  std::vector<std::vector<TokenId>> seqs;
  for (const auto& ex : examples) {
    seqs.push_back(ex.source_ids);
    seqs.push_back(ex.target_ids);
  }
  return seqs;
}

MlmConfig mlm_config(const RunConfig& cfg) {
  MlmConfig m;
  m.steps = cfg.train.mlm_pretrain_steps;
  m.batch = cfg.train.batch_size;
  m.learning_rate = cfg.mlm_learning_rate;
  m.seed = cfg.train.seed;
  m.adam = cfg.train.adam;
  return m;
}

// ------------------------------------------------------------ commands

int cmd_build_vocab(const RunConfig& cfg) {
  require(cfg.corpus, "corpus");
  require(cfg.vocab, "vocab");
  std::vector<std::string> texts;
  for (auto& ex : read_corpus(cfg.corpus)) {
    texts.push_back(std::move(ex.article));
    texts.push_back(std::move(ex.summary));
  }
  const Vocabulary vocab = build_vocab(texts, cfg.vocab_target, cfg.text_options());
  vocab.save(cfg.vocab);
  std::clog << "# vocabulary of " << vocab.size() << " entries written to " << cfg.vocab.string() << '\n';
  return kExitOk;
}

int cmd_pretrain(const RunConfig& cfg) {
  require(cfg.corpus, "corpus");
  require(cfg.vocab, "vocab");
  const Vocabulary vocab = Vocabulary::load(cfg.vocab);
  const auto examples = load_examples(cfg, cfg.corpus, vocab);
  ModelParams params = init_params(model_for(cfg, vocab), cfg.train.seed);
  const auto losses = mlm_pretrain(params, mlm_sequences(examples), mlm_config(cfg));
  if (!losses.empty()) {
    std::clog << "# masked-LM loss " << losses.front() << " -> " << losses.back() << '\n';
  }
  const auto out = cfg.output.empty() ? cfg.checkpoint_dir / "pretrained.ckpt" : cfg.output;
  save_checkpoint(out, params, nullptr, 0);
  std::clog << "# wrote " << out.string() << '\n';
  return kExitOk;
}

int cmd_train(const RunConfig& cfg) {
  require(cfg.corpus, "corpus");
  require(cfg.vocab, "vocab");
  const Vocabulary vocab = Vocabulary::load(cfg.vocab);
  auto examples = load_examples(cfg, cfg.corpus, vocab);
  DevSplit split;
  if (!cfg.dev_corpus.empty()) {
    split.train = std::move(examples);
    split.dev = load_examples(cfg, cfg.dev_corpus, vocab);
  } else {
    split = split_dev(std::move(examples), cfg.dev_fraction, cfg.train.seed);
  }
  std::clog << "# " << split.train.size() << " train, " << split.dev.size() << " dev\n";

  ModelParams params;
  if (!cfg.checkpoint.empty()) {
    params = load_checkpoint(cfg.checkpoint).params;
    if (params.config.vocab_size != vocab.size()) throw DataError("checkpoint vocabulary size differs from vocab file");
  } else {
    params = init_params(model_for(cfg, vocab), cfg.train.seed);
    if (cfg.train.mlm_pretrain_steps > 0) mlm_pretrain(params, mlm_sequences(split.train), mlm_config(cfg));
  }

  TrainConfig tc = cfg.train;
  tc.checkpoint_dir = cfg.checkpoint_dir;
  const TrainResult result = train(params, split.train, tc);
  std::string log;
  for (const auto& line : result.log) log += line + '\n';
  write_file_atomic(cfg.checkpoint_dir / "train.log", log);

  std::size_t best = result.checkpoints.size() - 1;
  if (!split.dev.empty()) {
    std::vector<double> scores;
    best = select_best_checkpoint(result.checkpoints, split.dev, vocab, cfg.generate_options(), &scores);
    for (std::size_t i = 0; i < scores.size(); ++i) {
      std::clog << "# dev score step " << result.checkpoints[i].step << ": " << scores[i] << '\n';
    }
  } else {
    log_warn("dev split is empty; keeping the last checkpoint");
  }
  write_file_atomic(cfg.checkpoint_dir / "best.ckpt", result.checkpoints[best].bytes);
  std::clog << "# best checkpoint: step " << result.checkpoints[best].step << '\n';
  return kExitOk;
}

/// Lines are JSON corpus records or raw article text.
std::vector<CorpusExample> read_documents(const std::filesystem::path& path) {
  std::vector<CorpusExample> docs;
  std::istringstream in(read_file(path));
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    CorpusExample doc{std::to_string(n), line, ""};
    if (!line.empty() && line.front() == '{') {
      try {
        const auto j = json::parse(line);
        doc.article = j.at("article").get<std::string>();
        if (j.contains("id")) doc.id = j["id"].is_string() ? j["id"].get<std::string>() : j["id"].dump();
        if (j.contains("summary")) doc.summary = j["summary"].get<std::string>();
      } catch (const json::exception&) {
      }
    }
    docs.push_back(std::move(doc));
  }
  return docs;
}

int cmd_generate(const RunConfig& cfg) {
  require(cfg.checkpoint, "checkpoint");
  require(cfg.vocab, "vocab");
  require(cfg.input, "input");
  const Vocabulary vocab = Vocabulary::load(cfg.vocab);
  Checkpoint ck = load_checkpoint(cfg.checkpoint);
  if (ck.params.config.vocab_size != vocab.size()) throw DataError("checkpoint vocabulary size differs from vocab file");
  const GenerateOptions opts = cfg.generate_options();
  std::string out;
  for (const auto& doc : read_documents(cfg.input)) {
    json rec;
    rec["id"] = doc.id;
    const std::string article = normalize_whitespace(doc.article);
    if (article.empty()) {
      rec["draft"] = rec["refined"] = rec["final"] = "";
    } else {
      const TokenizedExample ex =
          make_example(doc.id, article, doc.summary, vocab, static_cast<std::size_t>(ck.params.config.max_source_len),
                       static_cast<std::size_t>(ck.params.config.max_target_len), cfg.text_options());
      const Generation g = generate(ck.params, vocab, ex, opts);
      rec["draft"] = g.draft_text;
      rec["refined"] = g.refined_text;
      rec["final"] = g.final_text;
    }
    out += rec.dump() + '\n';
  }
  write_output(cfg.output, out);
  return kExitOk;
}

/// Candidate lines may be generation records ("final") and reference lines
/// corpus records ("summary"); anything else is taken as plain text.
std::vector<std::pair<std::string, std::string>> read_texts(const std::filesystem::path& path, const char* field) {
  std::vector<std::pair<std::string, std::string>> out;
  std::istringstream in(read_file(path));
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    std::pair<std::string, std::string> item{std::to_string(n), line};
    if (!line.empty() && line.front() == '{') {
      try {
        const auto j = json::parse(line);
        if (j.contains(field)) item.second = j[field].get<std::string>();
        if (j.contains("id")) item.first = j["id"].is_string() ? j["id"].get<std::string>() : j["id"].dump();
      } catch (const json::exception&) {
      }
    }
    out.push_back(std::move(item));
  }
  return out;
}

std::string fixed4(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", x);
  return buf;
}

std::string prf(const RougeScore& s) {
  return "{\"p\":" + fixed4(s.precision) + ",\"r\":" + fixed4(s.recall) + ",\"f1\":" + fixed4(s.f1) + "}";
}

std::string optional4(const std::optional<double>& x) { return x ? fixed4(*x) : "null"; }

int cmd_evaluate(const RunConfig& cfg) {
  require(cfg.input, "input (candidates)");
  require(cfg.reference, "reference");
  const auto cands = read_texts(cfg.input, "final");
  const auto refs = read_texts(cfg.reference, "summary");
  if (cands.size() != refs.size()) {
    throw DataError("candidate and reference files differ in line count (" + std::to_string(cands.size()) + " vs " +
                    std::to_string(refs.size()) + ")");
  }
  if (cands.empty()) throw DataError("nothing to evaluate");
  std::string out;
  std::vector<ScoredExample> scored;
  if (cfg.eval_mode == "limited-recall") {
    RecallTriple sum;
    for (std::size_t i = 0; i < cands.size(); ++i) {
      const RecallTriple r = limited_length_recall(cands[i].second, refs[i].second, cfg.stemming);
      sum.r1 += r.r1;
      sum.r2 += r.r2;
      sum.rl += r.rl;
      scored.push_back({rouge_tokenize(refs[i].second).size(), r.r1, r.r2, r.rl});
      out += "{\"id\":" + json(refs[i].first).dump() + ",\"r1\":{\"r\":" + fixed4(r.r1) + "},\"r2\":{\"r\":" +
             fixed4(r.r2) + "},\"rl\":{\"r\":" + fixed4(r.rl) + "}}\n";
    }
    const double n = static_cast<double>(cands.size());
    out += "{\"aggregate\":true,\"mode\":\"limited-recall\",\"count\":" + std::to_string(cands.size()) +
           ",\"r1\":{\"r\":" + fixed4(sum.r1 / n) + "},\"r2\":{\"r\":" + fixed4(sum.r2 / n) + "},\"rl\":{\"r\":" +
           fixed4(sum.rl / n) + "}}\n";
  } else {
    std::vector<ExampleScores> all;
    for (std::size_t i = 0; i < cands.size(); ++i) {
      const ExampleScores s = score_full(cands[i].second, refs[i].second, cfg.stemming);
      all.push_back(s);
      scored.push_back({s.reference_length, s.r1.f1, s.r2.f1, s.rl.f1});
      out += "{\"id\":" + json(refs[i].first).dump() + ",\"r1\":" + prf(s.r1) + ",\"r2\":" + prf(s.r2) +
             ",\"rl\":" + prf(s.rl) + "}\n";
    }
    const ExampleScores m = mean_scores(all);
    out += "{\"aggregate\":true,\"mode\":\"full\",\"count\":" + std::to_string(all.size()) + ",\"r1\":" + prf(m.r1) +
           ",\"r2\":" + prf(m.r2) + ",\"rl\":" + prf(m.rl) + "}\n";
  }
  if (!cfg.bucket_edges.empty()) {
    for (const auto& row : length_bucket_report(scored, cfg.bucket_edges)) {
      out += "{\"bucket\":[" + std::to_string(row.lower) + "," + (row.upper ? std::to_string(*row.upper) : "null") +
             "],\"count\":" + std::to_string(row.count) + ",\"r1\":" + optional4(row.r1) + ",\"r2\":" +
             optional4(row.r2) + ",\"rl\":" + optional4(row.rl) + "}\n";
    }
  }
  write_output(cfg.output, out);
  return kExitOk;
}

int cmd_inspect(const RunConfig& cfg) {
  require(cfg.checkpoint, "checkpoint");
  const CheckpointFile file = parse(read_file(cfg.checkpoint));
  std::ostringstream out;
  const ModelConfig& c = file.config;
  out << "format " << kCheckpointVersion << " step " << file.step << '\n'
      << "config model_dim=" << c.model_dim << " encoder_layers=" << c.encoder_layers
      << " decoder_layers=" << c.decoder_layers << " num_heads=" << c.num_heads << " ffn_dim=" << c.ffn_dim
      << " vocab_size=" << c.vocab_size << " max_source_len=" << c.max_source_len
      << " max_target_len=" << c.max_target_len << " dropout=" << c.dropout << '\n';
  std::size_t total = 0;
  for (const auto& a : file.arrays) {
    std::string shape;
    for (auto d : a.dims) shape += (shape.empty() ? "" : "x") + std::to_string(d);
    char sum[24];
    std::snprintf(sum, sizeof sum, "%016" PRIx64, array_checksum(a));
    out << a.name << ' ' << shape << ' ' << sum << '\n';
    total += a.data.size();
  }
  out << "arrays " << file.arrays.size() << " values " << total << '\n';
  write_output(cfg.output, out.str());
  return kExitOk;
}

}  // namespace

int run(int argc, char** argv) {
  CLI::App app{"Two-stage draft and refine summarizer"};
  app.require_subcommand(1);
  Common common;
  int (*action)(const RunConfig&) = nullptr;

  auto sub = [&](const char* name, const char* help, int (*fn)(const RunConfig&)) {
    CLI::App* s = app.add_subcommand(name, help);
    add_common(s, common);
    s->callback([&action, fn] { action = fn; });
    return s;
  };

  auto* bv = sub("build-vocab", "build a subword vocabulary from a corpus", cmd_build_vocab);
  override_option(bv, common, "--corpus", "corpus", "corpus file (JSON lines)");
  override_option(bv, common, "--vocab", "vocab", "output vocabulary file");
  override_option(bv, common, "--vocab-size", "vocab_size", "target vocabulary size");

  auto* pt = sub("pretrain", "masked-LM warm-up of the encoder", cmd_pretrain);
  override_option(pt, common, "--corpus", "corpus", "corpus file");
  override_option(pt, common, "--vocab", "vocab", "vocabulary file");
  override_option(pt, common, "--steps", "mlm_pretrain_steps", "warm-up steps");
  override_option(pt, common, "--seed", "seed", "random seed");
  override_option(pt, common, "--output", "output", "checkpoint to write");

  auto* tr = sub("train", "train and select the best checkpoint on the dev split", cmd_train);
  override_option(tr, common, "--corpus", "corpus", "training corpus");
  override_option(tr, common, "--dev-corpus", "dev_corpus", "explicit dev corpus");
  override_option(tr, common, "--vocab", "vocab", "vocabulary file");
  override_option(tr, common, "--seed", "seed", "random seed");
  override_option(tr, common, "--preset", "preset", "one-stage | two-stage | two-stage-rl");
  override_option(tr, common, "--checkpoint-dir", "checkpoint_dir", "checkpoint directory");
  override_option(tr, common, "--init", "checkpoint", "start from this checkpoint");

  auto* gen = sub("generate", "draft, refine and clean summaries", cmd_generate);
  override_option(gen, common, "--checkpoint", "checkpoint", "model checkpoint");
  override_option(gen, common, "--vocab", "vocab", "vocabulary file");
  override_option(gen, common, "--input", "input", "documents, one per line");
  override_option(gen, common, "--output", "output", "generation records (default stdout)");
  override_option(gen, common, "--beam", "beam_size", "beam size");
  override_option(gen, common, "--length-penalty", "length_penalty", "length penalty exponent");
  override_option(gen, common, "--preset", "preset", "one-stage skips refinement");

  auto* ev = sub("evaluate", "score candidates against references", cmd_evaluate);
  override_option(ev, common, "--candidates", "input", "candidate file");
  override_option(ev, common, "--references", "reference", "reference file");
  override_option(ev, common, "--mode", "eval_mode", "full | limited-recall");
  override_option(ev, common, "--buckets", "bucket_edges", "reference-length bucket edges, e.g. 0,20,40");
  override_option(ev, common, "--output", "output", "report file (default stdout)");
  ev->add_flag_callback("--stem", [&common] { common.flags.emplace_back("stemming", "true"); }, "Porter stemming");

  auto* in = sub("inspect", "list checkpoint arrays with shapes and checksums", cmd_inspect);
  override_option(in, common, "--checkpoint", "checkpoint", "checkpoint file");
  override_option(in, common, "--output", "output", "listing file (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    return action(resolve(common));
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::invalid_argument& e) {
    std::cerr << "invalid setting: " << e.what() << '\n';
    return kExitUsage;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kExitData;
  }
}

}  // namespace refsum::cli
