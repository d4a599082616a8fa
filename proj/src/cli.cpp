// Copyright 2026 The prefixchat Authors
// SPDX-License-Identifier: Apache-2.0
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "prefixchat/cli.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "prefixchat/batching.hpp"
#include "prefixchat/checkpoint.hpp"
#include "prefixchat/config.hpp"
#include "prefixchat/corpus.hpp"
#include "prefixchat/inference.hpp"
#include "prefixchat/model.hpp"
#include "prefixchat/tokenizer.hpp"
#include "prefixchat/training.hpp"

namespace prefixchat {

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

int log_level() {
  const char* env = std::getenv("PREFIXCHAT_LOG");
  return env == nullptr ? 1 : std::atoi(env);
}

void require(const std::string& value, const char* flag) {
  if (value.empty()) throw UsageError(std::string("missing required flag ") + flag);
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  out << text;
}

AppConfig load_config(const std::string& path) {
  if (path.empty()) return AppConfig{};
  try {
    return AppConfig::load(path);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
}

PackLimits limits_from_header(const Checkpoint& checkpoint) {
  PackLimits limits;
  if (checkpoint.header.contains("limits")) {
    limits.max_ctx = checkpoint.header["limits"].at("max_ctx").get<std::size_t>();
    limits.max_resp = checkpoint.header["limits"].at("max_resp").get<std::size_t>();
  }
  return limits;
}

// Distinct turn texts of a samples file, a comment dump, or plain lines.
std::vector<std::string> tokenizer_training_texts(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open '" + path + "'");
  std::vector<std::string> texts;
  std::set<std::string> seen;
  auto add = [&](const std::string& text) {
    if (!text.empty() && seen.insert(text).second) texts.push_back(text);
  };
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line.front() == '{') {
      const json j = json::parse(line, nullptr, false);
      if (!j.is_discarded() && j.contains("response")) {
        const DialogueSample sample = parse_sample_line(line);
        for (const auto& turn : sample.context) add(turn.text);
        add(sample.response.text);
        continue;
      }
      if (!j.is_discarded() && j.contains("text")) {
        add(j.at("text").get<std::string>());
        continue;
      }
    }
    add(line);
  }
  return texts;
}

struct CorpusArgs {
  std::string in, out, blocklist, stats, config;
  std::optional<std::size_t> min_len, max_turn_len;
  std::optional<int> role_cap;
  std::optional<double> max_non_text_ratio;
  bool keep_urls = false;
};

int run_corpus_build(const CorpusArgs& a, std::ostream& out) {
  AppConfig cfg = load_config(a.config);
  if (a.min_len) cfg.cleaning.min_len = *a.min_len;
  if (a.max_turn_len) cfg.cleaning.max_turn_len = *a.max_turn_len;
  if (a.role_cap) cfg.role_cap = *a.role_cap;
  if (a.max_non_text_ratio) cfg.cleaning.max_non_text_ratio = *a.max_non_text_ratio;
  if (a.keep_urls) cfg.cleaning.strip_urls = false;
  if (!a.blocklist.empty()) cfg.blocklist_path = a.blocklist;
  if (cfg.role_cap < 1) throw UsageError("--role-cap must be >= 1");
  if (!cfg.blocklist_path.empty()) cfg.cleaning.blocklist = load_blocklist(cfg.blocklist_path);

  const auto records = read_comments(a.in);
  const TreeBuildResult built = build_trees(records);
  CleaningStats stats;
  std::vector<DialogueSample> kept;
  std::size_t extracted = 0;
  for (const auto& tree : built.trees) {
    for (const auto& sample : extract_samples(tree, cfg.role_cap)) {
      ++extracted;
      if (auto cleaned = clean(sample, cfg.cleaning, &stats)) kept.push_back(std::move(*cleaned));
    }
  }
  write_samples(a.out, kept);
  const json summary{{"records", records.size()},
                     {"trees", built.trees.size()},
                     {"accepted_nodes", built.report.accepted},
                     {"duplicates", built.report.duplicates},
                     {"orphans", built.report.orphans},
                     {"cycles_broken", built.report.cycles_broken},
                     {"samples_extracted", extracted},
                     {"samples_kept", kept.size()},
                     {"rejected", stats.rejected}};
  if (!a.stats.empty()) write_text(a.stats, summary.dump(2) + "\n");
  out << summary.dump() << '\n';
  return kExitOk;
}

struct TrainArgs {
  std::string corpus, vocab, config, out, resume;
  std::optional<std::size_t> steps, checkpoint_interval;
  std::optional<std::uint64_t> seed;
  std::optional<double> lr;
};

int run_train(const TrainArgs& a, std::ostream& out, std::ostream& err) {
  AppConfig cfg = load_config(a.config);
  if (!a.corpus.empty()) cfg.corpus_path = a.corpus;
  if (!a.vocab.empty()) cfg.vocab_path = a.vocab;
  if (!a.out.empty()) cfg.out_dir = a.out;
  if (a.steps) cfg.run.steps = *a.steps;
  if (a.seed) cfg.run.seed = *a.seed;
  if (a.lr) cfg.run.schedule.peak_lr = *a.lr;
  if (a.checkpoint_interval) cfg.run.checkpoint_interval = *a.checkpoint_interval;
  require(cfg.corpus_path, "--corpus");
  require(cfg.vocab_path, "--vocab");
  require(cfg.out_dir, "--out");

  const Vocabulary vocab = Vocabulary::load(cfg.vocab_path);
  cfg.resolve(vocab.size());
  try {
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  cfg.run.checkpoint_dir = cfg.out_dir;
  fs::create_directories(cfg.out_dir);
  write_text((fs::path(cfg.out_dir) / "effective_config.json").string(), cfg.to_json().dump(2) + "\n");

  const auto samples = read_samples(cfg.corpus_path);
  const int verbosity = log_level();
  const std::size_t interval = std::max<std::size_t>(1, cfg.run.eval_interval);
  const TrainResult result =
      train(cfg.run, cfg.model, vocab, samples, a.resume, [&](const MetricsRow& row) {
        if (verbosity >= 2 || (verbosity >= 1 && row.step % interval == 0)) {
          err << "step " << row.step << " lr " << row.lr << " loss " << row.loss << '\n';
        }
      });
  out << json{{"steps", result.log.empty() ? 0 : result.log.back().step},
              {"final_eval_loss", result.final_eval_loss},
              {"checkpoint", result.final_checkpoint}}
             .dump()
      << '\n';
  return kExitOk;
}

}  // namespace

int dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"prefixchat: multi-party dialogue corpus, tokenizer, prefix-LM training and chat"};
  app.require_subcommand(1);

  // corpus
  CorpusArgs corpus_args;
  auto* corpus = app.add_subcommand("corpus", "Comment dumps to dialogue samples");
  corpus->require_subcommand(1);
  auto* corpus_build = corpus->add_subcommand("build", "Rebuild message trees and extract samples");
  corpus_build->add_option("--in", corpus_args.in, "Comment JSON-lines (id, parent_id, user_id, text, ts)")->required();
  corpus_build->add_option("--out", corpus_args.out, "Output samples JSON-lines")->required();
  corpus_build->add_option("--min-len", corpus_args.min_len, "Minimum response words (0 disables)");
  corpus_build->add_option("--max-turn-len", corpus_args.max_turn_len, "Maximum words per turn (0 disables)");
  corpus_build->add_option("--blocklist", corpus_args.blocklist, "File of blocked words");
  corpus_build->add_option("--role-cap", corpus_args.role_cap, "Largest role id (overflow bucket)");
  corpus_build->add_option("--max-non-text-ratio", corpus_args.max_non_text_ratio, "Symbol ratio cap");
  corpus_build->add_flag("--keep-urls", corpus_args.keep_urls, "Do not strip URLs");
  corpus_build->add_option("--stats", corpus_args.stats, "Write build statistics JSON here");
  corpus_build->add_option("--config", corpus_args.config, "Flat JSON config; flags win");

  // tokenizer
  std::string tok_in, tok_out, tok_vocab, tok_text, tok_ids;
  std::size_t tok_size = 512;
  auto* tokenizer = app.add_subcommand("tokenizer", "BPE vocabulary tools");
  tokenizer->require_subcommand(1);
  auto* tok_train = tokenizer->add_subcommand("train", "Train a BPE vocabulary");
  tok_train->add_option("--in", tok_in, "Samples JSON-lines, comment dump, or plain text")->required();
  tok_train->add_option("--size", tok_size, "Target vocabulary size")->capture_default_str();
  tok_train->add_option("--out", tok_out, "Vocabulary file")->required();
  auto* tok_encode = tokenizer->add_subcommand("encode", "Text to ids (one line per input line)");
  tok_encode->add_option("--vocab", tok_vocab, "Vocabulary file")->required();
  tok_encode->add_option("--text", tok_text, "Text; standard input when absent");
  auto* tok_decode = tokenizer->add_subcommand("decode", "Ids to text");
  tok_decode->add_option("--vocab", tok_vocab, "Vocabulary file")->required();
  tok_decode->add_option("--ids", tok_ids, "Space-separated ids; standard input when absent");

  // batch
  std::string batch_corpus, batch_vocab, batch_out, batch_in;
  std::size_t batch_budget = 8192, batch_max_ctx = 128, batch_max_resp = 32;
  std::optional<std::size_t> batch_index;
  auto* batch = app.add_subcommand("batch", "Packed batch dumps");
  batch->require_subcommand(1);
  auto* batch_build = batch->add_subcommand("build", "Pack, group by length and dump batches");
  batch_build->add_option("--corpus", batch_corpus, "Samples JSON-lines")->required();
  batch_build->add_option("--vocab", batch_vocab, "Vocabulary file")->required();
  batch_build->add_option("--out", batch_out, "Binary dump path")->required();
  batch_build->add_option("--budget", batch_budget, "Token budget per batch")->capture_default_str();
  batch_build->add_option("--max-ctx", batch_max_ctx, "Context token cap")->capture_default_str();
  batch_build->add_option("--max-resp", batch_max_resp, "Response token cap")->capture_default_str();
  auto* batch_inspect = batch->add_subcommand("inspect", "Print attention masks as 0/1 grids");
  batch_inspect->add_option("--in", batch_in, "Binary dump path")->required();
  batch_inspect->add_option("--batch", batch_index, "Only this batch");

  // train
  TrainArgs train_args;
  auto* train_cmd = app.add_subcommand("train", "Train the prefix LM");
  train_cmd->add_option("--corpus", train_args.corpus, "Samples JSON-lines");
  train_cmd->add_option("--vocab", train_args.vocab, "Vocabulary file");
  train_cmd->add_option("--config", train_args.config, "Flat JSON config; flags win");
  train_cmd->add_option("--steps", train_args.steps, "Optimizer steps");
  train_cmd->add_option("--seed", train_args.seed, "Init and data-order seed");
  train_cmd->add_option("--lr", train_args.lr, "Peak learning rate");
  train_cmd->add_option("--checkpoint-interval", train_args.checkpoint_interval, "Steps between checkpoints");
  train_cmd->add_option("--out", train_args.out, "Run directory");
  train_cmd->add_option("--resume", train_args.resume, "Checkpoint to resume from");

  // eval
  std::string eval_model, eval_corpus, eval_vocab;
  auto* eval = app.add_subcommand("eval", "Perplexity over a samples file");
  eval->add_option("--model", eval_model, "Checkpoint")->required();
  eval->add_option("--corpus", eval_corpus, "Samples JSON-lines")->required();
  eval->add_option("--vocab", eval_vocab, "Override the checkpoint's vocabulary");

  // chat
  std::string chat_model, chat_topic, chat_strategy = "top_p", chat_out;
  std::size_t chat_rounds = kDefaultSelfChatRounds;
  DecodeConfig chat_cfg;
  std::optional<std::size_t> chat_max_new;
  auto* chat = app.add_subcommand("chat", "Self-chat from a seed topic");
  chat->add_option("--model", chat_model, "Checkpoint")->required();
  chat->add_option("--topic", chat_topic, "Opening turn")->required();
  chat->add_option("--rounds", chat_rounds, "Rounds (two turns each)")->capture_default_str();
  chat->add_option("--strategy", chat_strategy, "greedy | top_k | top_p")->capture_default_str();
  chat->add_option("--p", chat_cfg.top_p, "Nucleus mass")->capture_default_str();
  chat->add_option("--k", chat_cfg.top_k, "Top-k cutoff")->capture_default_str();
  chat->add_option("--temperature", chat_cfg.temperature, "Softmax temperature")->capture_default_str();
  chat->add_option("--seed", chat_cfg.seed, "Sampling seed")->capture_default_str();
  chat->add_option("--max-new-tokens", chat_max_new, "Per-turn token cap");
  chat->add_option("--out", chat_out, "Transcript JSON-lines; standard output when absent");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    if (code == 0) return kExitOk;
    err << '\n' << app.help();
    return kExitUsage;
  }

  try {
    if (*corpus_build) return run_corpus_build(corpus_args, out);

    if (*tok_train) {
      const auto texts = tokenizer_training_texts(tok_in);
      const Vocabulary vocab = train_bpe(texts, tok_size);
      vocab.save(tok_out);
      out << json{{"tokens", vocab.size()}, {"merges", vocab.merges().size()}}.dump() << '\n';
      return kExitOk;
    }
    if (*tok_encode) {
      const Vocabulary vocab = Vocabulary::load(tok_vocab);
      auto emit = [&](const std::string& text) {
        const auto ids = encode(text, vocab);
        for (std::size_t i = 0; i < ids.size(); ++i) out << (i ? " " : "") << ids[i];
        out << '\n';
      };
      if (tok_encode->count("--text") > 0) {
        emit(tok_text);
      } else {
        for (std::string line; std::getline(std::cin, line);) emit(line);
      }
      return kExitOk;
    }
    if (*tok_decode) {
      const Vocabulary vocab = Vocabulary::load(tok_vocab);
      auto emit = [&](const std::string& line) {
        std::istringstream in(line);
        std::vector<TokenId> ids;
        for (long long id; in >> id;) ids.push_back(static_cast<TokenId>(id));
        out << decode(ids, vocab) << '\n';
      };
      if (tok_decode->count("--ids") > 0) {
        emit(tok_ids);
      } else {
        for (std::string line; std::getline(std::cin, line);) emit(line);
      }
      return kExitOk;
    }

    if (*batch_build) {
      const Vocabulary vocab = Vocabulary::load(batch_vocab);
      const PackLimits limits{batch_max_ctx, batch_max_resp};
      std::vector<PackedSample> packed;
      for (const auto& sample : read_samples(batch_corpus)) {
        const DialogueSample roled = sample.role_ids.size() == sample.context.size() + 1
                                         ? sample
                                         : assign_roles(sample);
        packed.push_back(pack(roled, vocab, limits));
      }
      const GroupedBatches grouped = group_by_length(packed, batch_budget);
      std::ofstream dump(batch_out, std::ios::binary);
      if (!dump) throw std::runtime_error("cannot write '" + batch_out + "'");
      write_batches(dump, grouped.batches);
      out << json{{"samples", packed.size()},
                  {"batches", grouped.batches.size()},
                  {"pad_count", grouped.pad_count},
                  {"pad_ratio", grouped.pad_ratio()}}
                 .dump()
          << '\n';
      return kExitOk;
    }
    if (*batch_inspect) {
      std::ifstream dump(batch_in, std::ios::binary);
      if (!dump) throw std::runtime_error("cannot open '" + batch_in + "'");
      const auto batches = read_batches(dump);
      for (std::size_t b = 0; b < batches.size(); ++b) {
        if (batch_index && *batch_index != b) continue;
        out << "batch " << b << ": " << batches[b].rows() << " x " << batches[b].max_len()
            << ", pad " << batches[b].pad_count << '\n';
        print_masks(out, batches[b]);
      }
      return kExitOk;
    }

    if (*train_cmd) return run_train(train_args, out, err);

    if (*eval) {
      const Checkpoint checkpoint = read_checkpoint(eval_model);
      const auto params = params_from_checkpoint<float>(checkpoint);
      const Vocabulary vocab = eval_vocab.empty() ? vocab_from_checkpoint(checkpoint)
                                                  : Vocabulary::load(eval_vocab);
      const auto samples = read_samples(eval_corpus);
      const Perplexity ppl = perplexity(std::span<const DialogueSample>(samples), params, vocab,
                                        limits_from_header(checkpoint));
      out << json{{"nats_per_token", ppl.nats_per_token}, {"ppl", ppl.ppl}, {"tokens", ppl.tokens}}
                 .dump()
          << '\n';
      return kExitOk;
    }

    if (*chat) {
      const Checkpoint checkpoint = read_checkpoint(chat_model);
      const auto params = params_from_checkpoint<float>(checkpoint);
      const Vocabulary vocab = vocab_from_checkpoint(checkpoint);
      const PackLimits limits = limits_from_header(checkpoint);
      try {
        chat_cfg.strategy = parse_strategy(chat_strategy);
        chat_cfg.max_new_tokens = chat_max_new.value_or(limits.max_resp - 1);
        chat_cfg.validate(limits.max_resp);
        if (chat_rounds < 1) throw std::invalid_argument("--rounds must be >= 1");
      } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
      }
      const ChatState state = self_chat(chat_topic, chat_rounds, params, vocab, chat_cfg, limits);
      const std::string transcript = transcript_jsonl(state, chat_cfg);
      if (chat_out.empty()) {
        out << transcript;
      } else {
        write_text(chat_out, transcript);
      }
      return kExitOk;
    }
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}

}  // namespace prefixchat
