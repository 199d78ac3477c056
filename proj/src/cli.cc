#include "docnmt/cli.h"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <optional>
#include <random>
#include <set>

#include <CLI11.hpp>

#include "docnmt/checkpoint.h"
#include "docnmt/corpus.h"
#include "docnmt/datamix.h"
#include "docnmt/decode.h"
#include "docnmt/docmark.h"
#include "docnmt/error.h"
#include "docnmt/eval.h"
#include "docnmt/pipeline.h"
#include "docnmt/subword.h"
#include "docnmt/train.h"

namespace docnmt {

namespace fs = std::filesystem;

namespace {

const std::set<std::string> kCommands = {"subword",  "filter",   "filter-score", "filter-apply", "backtranslate",
                                         "mix",      "subdocs",  "fakedocs",     "upsample",     "markup",
                                         "train",    "finetune", "translate",    "second-pass",  "evaluate",
                                         "ensemble", "pipeline"};

Corpus load_pair(const std::string& src, const std::string& tgt) { return load_parallel(src, tgt); }

void write_pair(const Corpus& c, const std::string& src, const std::string& tgt) { write_parallel(c, src, tgt); }

struct DecodeFlags {
  int beam = 4;
  double alpha = 0.6;
  bool greedy = false;
  bool sample = false;
  double temperature = 1.0;
  std::uint64_t seed = 1;
  int max_out_len = 0;  // 0: the model's max_len

  void add_to(CLI::App* cmd) {
    cmd->add_option("--beam", beam, "beam size");
    cmd->add_option("--alpha", alpha, "length normalization exponent");
    cmd->add_flag("--greedy", greedy, "greedy decoding");
    cmd->add_flag("--sample", sample, "Gumbel-argmax sampling");
    cmd->add_option("--temperature", temperature, "sampling temperature");
    cmd->add_option("--seed", seed, "sampling seed");
    cmd->add_option("--max-out-len", max_out_len, "output length cap");
  }

  DecodeConfig config(int max_len) const {
    DecodeConfig c;
    c.mode = sample ? DecodeMode::sample : greedy ? DecodeMode::greedy : DecodeMode::beam;
    c.beam_size = beam;
    c.length_norm_alpha = alpha;
    c.temperature = temperature;
    c.seed = seed;
    c.max_out_len = max_out_len > 0 ? max_out_len : max_len;
    c.validate(max_len);
    return c;
  }
};

std::unique_ptr<Ensemble> load_models(const std::string& ensemble_file, const std::vector<std::string>& models,
                                      const std::vector<double>& weights) {
  if (!ensemble_file.empty() == !models.empty()) throw ConfigError("give either --ensemble or --model");
  if (!ensemble_file.empty()) return std::make_unique<Ensemble>(load_ensemble_spec(ensemble_file));
  if (!weights.empty() && weights.size() != models.size()) throw ConfigError("one --weight per --model");
  EnsembleSpec spec;
  for (std::size_t i = 0; i < models.size(); ++i) {
    auto m = std::make_shared<const Model>(load_checkpoint(models[i]));
    spec.members.push_back({std::make_shared<TransformerScorer>(m), weights.empty() ? 1.0 : weights[i]});
  }
  return std::make_unique<Ensemble>(std::move(spec));
}

Corpus swap_sides(const Corpus& c) {
  Corpus out = c;
  for (auto& p : out.pairs) std::swap(p.src, p.tgt);
  return out;
}

// ---------------------------------------------------------------------------
// train / finetune

struct TrainFlags {
  std::string src, tgt, vocab, config, level = "sentence", mono, aux, init, out, log;
  std::string dev_src, dev_tgt, dev_manifest, dev_origin = "all";
  std::optional<std::uint64_t> seed;
  bool reverse = false;
  bool multitask = false;
  int max_doc_tokens = kDefaultMaxDocTokens;

  void add_to(CLI::App* cmd, bool finetune) {
    cmd->add_option("--src", src, "source documents")->required();
    cmd->add_option("--tgt", tgt, "target documents")->required();
    cmd->add_option("--vocab", vocab, "subword vocabulary")->required();
    cmd->add_option("--config", config, "JSON file with 'model' and 'train' sections")->required();
    cmd->add_option("--level", level, "sentence or document");
    cmd->add_option("--mono", mono, "monolingual source documents for the masked-LM term");
    cmd->add_option("--aux", aux, "first-pass translations for a dual-encoder model");
    auto* init_opt = cmd->add_option("--init", init, "initial checkpoint");
    if (finetune) init_opt->required();
    cmd->add_option("--out", out, "output checkpoint")->required();
    cmd->add_option("--log", log, "training log (TSV)");
    cmd->add_option("--dev-src", dev_src);
    cmd->add_option("--dev-tgt", dev_tgt);
    cmd->add_option("--dev-manifest", dev_manifest);
    cmd->add_option("--dev-origin", dev_origin, "all, original-src or original-tgt");
    cmd->add_option("--seed", seed, "overrides the config seed");
    cmd->add_flag("--reverse", reverse, "train the tgt->src direction");
    if (finetune) cmd->add_flag("--multitask", multitask, "masked-LM head on the parallel source side");
    cmd->add_option("--max-doc-tokens", max_doc_tokens, "mark-up length limit");
  }
};

void run_train(const TrainFlags& f, bool finetune, std::ostream& log) {
  nlohmann::json cfg;
  try {
    cfg = nlohmann::json::parse(read_file(f.config));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(f.config + ": " + e.what());
  }
  auto vocab = SubwordVocab::load(f.vocab);
  TransformerConfig mc = transformer_config_from_json(cfg.value("model", nlohmann::json::object()));
  TrainConfig tc = train_config_from_json(cfg.value("train", nlohmann::json::object()));
  mc.vocab_size = vocab.size();
  if (!f.aux.empty()) mc.dual_encoder = true;
  if (f.seed) tc.seed = *f.seed;
  if (f.multitask) tc.multitask_on_parallel_source = true;
  const Level level = parse_level(f.level);

  Model model(mc);
  model.init(tc.seed);
  if (!f.init.empty()) {
    Model start = load_checkpoint(f.init);
    if (start.config().vocab_size != mc.vocab_size) throw ConfigError("--init checkpoint has a different vocabulary");
    if (start.config() == mc) {
      model = std::move(start);
    } else {
      int copied = model.copy_matching(start);
      log << "initialized " << copied << " tensors from " << f.init << "\n";
    }
  }

  Corpus data = load_pair(f.src, f.tgt);
  if (f.reverse) data = swap_sides(data);
  std::optional<Corpus> aux;
  if (!f.aux.empty()) aux = load_documents(f.aux);
  auto examples = build_examples(data, vocab, level, f.max_doc_tokens, aux ? &*aux : nullptr);
  ShuffledBatches parallel(std::move(examples), tc.batch_tokens, tc.seed);
  std::optional<ShuffledBatches> mono;
  if (!f.mono.empty()) mono.emplace(build_mono_examples(load_documents(f.mono), vocab, level, f.max_doc_tokens),
                                    tc.batch_tokens, tc.seed + 1);

  DevEvaluator dev;
  if (!f.dev_src.empty()) {
    if (f.dev_tgt.empty()) throw ConfigError("--dev-src needs --dev-tgt");
    auto dev_corpus = std::make_shared<Corpus>(load_pair(f.dev_src, f.dev_tgt));
    if (f.reverse) *dev_corpus = swap_sides(*dev_corpus);
    if (!f.dev_manifest.empty()) apply_manifest(*dev_corpus, read_manifest(f.dev_manifest));
    if (f.dev_origin != "all") {
      auto parts = split_by_origin(*dev_corpus);
      *dev_corpus = parse_origin(f.dev_origin) == Origin::original_src ? parts.first : parts.second;
      if (dev_corpus->empty()) throw ConfigError("dev split " + f.dev_origin + " is empty");
    }
    auto mode = level == Level::sentence ? TranslateMode::sentence : TranslateMode::document;
    auto shared_vocab = std::make_shared<SubwordVocab>(vocab);
    int limit = f.max_doc_tokens;
    dev = [dev_corpus, shared_vocab, mode, limit](const Model& m) {
      auto view = std::shared_ptr<const Model>(&m, [](const Model*) {});
      TransformerScorer scorer(view);
      DecodeConfig dc;
      dc.mode = DecodeMode::greedy;
      dc.max_out_len = m.config().max_len;
      auto hyps = translate_corpus(scorer, dc, *dev_corpus, *shared_vocab, mode, limit).hyps;
      std::vector<std::string> h = all_sentences(hyps), r;
      for (const auto& p : dev_corpus->pairs) r.insert(r.end(), p.tgt.sentences.begin(), p.tgt.sentences.end());
      return bleu(h, r).score;
    };
  }

  auto result = finetune ? fine_tune(model, tc, parallel, dev) : train(model, tc, parallel, mono ? &*mono : nullptr, dev);
  log << "trained " << result.updates << " updates";
  if (result.best_metric) log << ", best dev " << *result.best_metric << " at update " << result.best_update;
  log << "\n";
  save_checkpoint(model, f.out);
  if (!f.log.empty()) write_train_log(result.log, f.log);
}

// ---------------------------------------------------------------------------

void build_app(CLI::App& app, std::ostream& log, std::function<void()>& action) {
  app.require_subcommand(1);

  {
    auto* cmd = app.add_subcommand("subword", "train a subword vocabulary");
    auto inputs = std::make_shared<std::vector<std::string>>();
    auto size = std::make_shared<int>(8000);
    auto out = std::make_shared<std::string>();
    cmd->add_option("--input", *inputs, "corpus files")->required();
    cmd->add_option("--size", *size, "vocabulary size");
    cmd->add_option("--out", *out)->required();
    cmd->callback([=, &action, &log] {
      action = [=, &log] {
        std::vector<std::string> sentences;
        for (const auto& in : *inputs)
          for (const auto& s : all_sentences(load_documents(in))) sentences.push_back(s);
        auto vocab = SubwordVocab::train(sentences, *size);
        vocab.save(*out);
        log << "vocabulary of " << vocab.size() << " entries\n";
      };
    });
  }

  auto scoring_options = [](CLI::App* cmd, std::string& src, std::string& tgt) {
    cmd->add_option("--src", src)->required();
    cmd->add_option("--tgt", tgt)->required();
  };

  {
    struct F {
      std::string src, tgt, vocab, fwd, bwd, scores, out_src, out_tgt;
      double keep = 0.8;
    };
    auto f = std::make_shared<F>();
    auto* cmd = app.add_subcommand("filter", "dual cross-entropy filtering");
    scoring_options(cmd, f->src, f->tgt);
    cmd->add_option("--vocab", f->vocab)->required();
    cmd->add_option("--fwd", f->fwd, "src->tgt checkpoint")->required();
    cmd->add_option("--bwd", f->bwd, "tgt->src checkpoint")->required();
    cmd->add_option("--keep", f->keep, "fraction of sentence pairs kept");
    cmd->add_option("--scores", f->scores, "also write the scores");
    cmd->add_option("--out-src", f->out_src)->required();
    cmd->add_option("--out-tgt", f->out_tgt)->required();
    cmd->callback([f, &action, &log] {
      action = [f, &log] {
        auto vocab = SubwordVocab::load(f->vocab);
        Model fwd = load_checkpoint(f->fwd), bwd = load_checkpoint(f->bwd);
        Corpus c = load_pair(f->src, f->tgt);
        auto scores = score_corpus(TransformerPairScorer(fwd, vocab), TransformerPairScorer(bwd, vocab), c);
        if (!f->scores.empty()) write_scores(scores, f->scores);
        Corpus kept = filter_corpus(c, scores, f->keep);
        write_pair(kept, f->out_src, f->out_tgt);
        log << "kept " << kept.sentence_count() << " of " << c.sentence_count() << " sentence pairs\n";
      };
    });
  }

  {
    struct F {
      std::string src, tgt, vocab, fwd, bwd, out;
    };
    auto f = std::make_shared<F>();
    auto* cmd = app.add_subcommand("filter-score", "score sentence pairs");
    scoring_options(cmd, f->src, f->tgt);
    cmd->add_option("--vocab", f->vocab)->required();
    cmd->add_option("--fwd", f->fwd)->required();
    cmd->add_option("--bwd", f->bwd)->required();
    cmd->add_option("--out", f->out)->required();
    cmd->callback([f, &action] {
      action = [f] {
        auto vocab = SubwordVocab::load(f->vocab);
        Model fwd = load_checkpoint(f->fwd), bwd = load_checkpoint(f->bwd);
        write_scores(score_corpus(TransformerPairScorer(fwd, vocab), TransformerPairScorer(bwd, vocab),
                                  load_pair(f->src, f->tgt)),
                     f->out);
      };
    });
  }

  {
    struct F {
      std::string src, tgt, scores, out_src, out_tgt;
      double keep = 0.8;
    };
    auto f = std::make_shared<F>();
    auto* cmd = app.add_subcommand("filter-apply", "keep the best-scoring pairs");
    scoring_options(cmd, f->src, f->tgt);
    cmd->add_option("--scores", f->scores)->required();
    cmd->add_option("--keep", f->keep);
    cmd->add_option("--out-src", f->out_src)->required();
    cmd->add_option("--out-tgt", f->out_tgt)->required();
    cmd->callback([f, &action] {
      action = [f] {
        write_pair(filter_corpus(load_pair(f->src, f->tgt), read_scores(f->scores), f->keep), f->out_src, f->out_tgt);
      };
    });
  }

  {
    struct F {
      std::string input, ensemble, vocab, out_src, out_tgt;
      std::vector<std::string> models;
      std::vector<double> weights;
      DecodeFlags decode;
    };
    auto f = std::make_shared<F>();
    f->decode.sample = true;
    auto* cmd = app.add_subcommand("backtranslate", "noisy back-translation of target documents");
    cmd->add_option("--input", f->input, "target-language documents")->required();
    cmd->add_option("--model", f->models, "reverse checkpoint");
    cmd->add_option("--weight", f->weights);
    cmd->add_option("--ensemble", f->ensemble);
    cmd->add_option("--vocab", f->vocab)->required();
    cmd->add_option("--temperature", f->decode.temperature);
    cmd->add_option("--seed", f->decode.seed);
    cmd->add_option("--max-out-len", f->decode.max_out_len);
    auto* greedy = cmd->add_flag("--greedy", f->decode.greedy, "argmax instead of sampling");
    cmd->add_option("--out-src", f->out_src)->required();
    cmd->add_option("--out-tgt", f->out_tgt)->required();
    cmd->callback([f, greedy, &action, &log] {
      action = [f, greedy, &log] {
        if (greedy->count()) f->decode.sample = false;
        auto model = load_models(f->ensemble, f->models, f->weights);
        auto vocab = SubwordVocab::load(f->vocab);
        auto out = backtranslate_corpus(*model, f->decode.config(model->max_len()), load_documents(f->input), vocab);
        write_pair(out, f->out_src, f->out_tgt);
        log << "back-translated " << out.size() << " documents\n";
      };
    });
  }

  {
    struct F {
      std::vector<std::string> src, tgt;
      std::vector<double> fractions;
      std::uint64_t seed = 1;
      std::string out_src, out_tgt;
    };
    auto f = std::make_shared<F>();
    auto* cmd = app.add_subcommand("mix", "up-sample and mix parallel streams");
    cmd->add_option("--src", f->src)->required();
    cmd->add_option("--tgt", f->tgt)->required();
    cmd->add_option("--fraction", f->fractions)->required();
    cmd->add_option("--seed", f->seed);
    cmd->add_option("--out-src", f->out_src)->required();
    cmd->add_option("--out-tgt", f->out_tgt)->required();
    cmd->callback([f, &action, &log] {
      action = [f, &log] {
        if (f->src.size() != f->tgt.size() || f->src.size() != f->fractions.size())
          throw ConfigError("mix: give --src, --tgt and --fraction once per stream");
        MixRecipe recipe;
        recipe.seed = f->seed;
        for (std::size_t i = 0; i < f->src.size(); ++i) recipe.streams.push_back({load_pair(f->src[i], f->tgt[i]), f->fractions[i]});
        auto out = mix(recipe);
        write_pair(out, f->out_src, f->out_tgt);
        log << "mixed " << out.sentence_count() << " sentence pairs\n";
      };
    });
  }

  {
    struct F {
      std::string src, tgt, reference, out_src, out_tgt;
      double ratio = 0.5;
      long target = 0;
      int max_per_doc = 10;
      std::uint64_t seed = 1;
    };
    auto f = std::make_shared<F>();
    auto* cmd = app.add_subcommand("subdocs", "sub-document augmentation");
    cmd->add_option("--src", f->src)->required();
    cmd->add_option("--tgt", f->tgt)->required();
    cmd->add_option("--reference", f->reference, "corpus whose size sets the target");
    cmd->add_option("--ratio", f->ratio, "target size relative to --reference");
    cmd->add_option("--target", f->target, "target size in sentences");
    cmd->add_option("--max-per-doc", f->max_per_doc);
    cmd->add_option("--seed", f->seed);
    cmd->add_option("--out-src", f->out_src)->required();
    cmd->add_option("--out-tgt", f->out_tgt)->required();
    cmd->callback([f, &action, &log] {
      action = [f, &log] {
        std::size_t target = static_cast<std::size_t>(f->target);
        if (!f->reference.empty())
          target = static_cast<std::size_t>(
              std::llround(f->ratio * static_cast<double>(load_documents(f->reference).sentence_count())));
        if (target == 0) throw ConfigError("subdocs: give --target or --reference");
        auto out = augment_with_subdocuments(load_pair(f->src, f->tgt), target, f->max_per_doc, f->seed);
        write_pair(out, f->out_src, f->out_tgt);
        log << "augmented corpus holds " << out.sentence_count() << " sentence pairs\n";
      };
    });
  }

  {
    struct F {
      std::string src, tgt, lengths_from, out_src, out_tgt;
      int length = 0;
      bool shuffle = false;
      std::uint64_t seed = 1;
    };
    auto f = std::make_shared<F>();
    auto* cmd = app.add_subcommand("fakedocs", "assemble fake documents from sentence pairs");
    cmd->add_option("--src", f->src)->required();
    cmd->add_option("--tgt", f->tgt)->required();
    cmd->add_option("--lengths-from", f->lengths_from, "document corpus giving the length distribution");
    cmd->add_option("--length", f->length, "constant document length");
    cmd->add_flag("--shuffle", f->shuffle, "shuffle the sentence pairs first");
    cmd->add_option("--seed", f->seed);
    cmd->add_option("--out-src", f->out_src)->required();
    cmd->add_option("--out-tgt", f->out_tgt)->required();
    cmd->callback([f, &action] {
      action = [f] {
        if (f->lengths_from.empty() == (f->length <= 0)) throw ConfigError("fakedocs: give --lengths-from or --length");
        auto sampler = f->length > 0 ? LengthSampler::constant(f->length)
                                     : LengthSampler::from_corpus(load_documents(f->lengths_from));
        auto pairs = sentence_pairs(load_pair(f->src, f->tgt));
        if (f->shuffle) {
          std::mt19937_64 rng(f->seed ^ 0x5bd1e995ULL);
          for (std::size_t i = pairs.size(); i > 1; --i) {
            std::uniform_int_distribution<std::size_t> pick(0, i - 1);
            std::swap(pairs[i - 1], pairs[pick(rng)]);
          }
        }
        write_pair(make_fake_documents(pairs, sampler, f->seed), f->out_src, f->out_tgt);
      };
    });
  }

  {
    struct F {
      std::string src, tgt, out_src, out_tgt;
      long target = 0;
      std::uint64_t seed = 1;
    };
    auto f = std::make_shared<F>();
    auto* cmd = app.add_subcommand("upsample", "repeat a corpus up to a target size");
    cmd->add_option("--src", f->src)->required();
    cmd->add_option("--tgt", f->tgt, "omit for a monolingual corpus");
    cmd->add_option("--target", f->target, "target size in sentences")->required();
    cmd->add_option("--seed", f->seed);
    cmd->add_option("--out-src", f->out_src)->required();
    cmd->add_option("--out-tgt", f->out_tgt);
    cmd->callback([f, &action] {
      action = [f] {
        if (f->tgt.empty()) {
          write_documents(upsample(load_documents(f->src), static_cast<std::size_t>(f->target), f->seed), f->out_src);
        } else {
          if (f->out_tgt.empty()) throw ConfigError("upsample: --out-tgt required with --tgt");
          write_pair(upsample(load_pair(f->src, f->tgt), static_cast<std::size_t>(f->target), f->seed), f->out_src,
                     f->out_tgt);
        }
      };
    });
  }

  {
    struct F {
      std::string src, tgt, vocab, out_src, out_tgt;
      int limit = kDefaultMaxDocTokens;
    };
    auto f = std::make_shared<F>();
    auto* cmd = app.add_subcommand("markup", "write documents as marked sequences, one chunk per line");
    cmd->add_option("--src", f->src)->required();
    cmd->add_option("--tgt", f->tgt);
    cmd->add_option("--vocab", f->vocab)->required();
    cmd->add_option("--max-doc-tokens", f->limit);
    cmd->add_option("--out-src", f->out_src)->required();
    cmd->add_option("--out-tgt", f->out_tgt);
    cmd->callback([f, &action, &log] {
      action = [f, &log] {
        auto vocab = SubwordVocab::load(f->vocab);
        std::string src_text, tgt_text;
        std::size_t warnings = 0;
        if (f->tgt.empty()) {
          for (const auto& doc : load_documents(f->src).documents) {
            auto m = mark_up(doc, vocab, f->limit);
            warnings += m.warnings.size();
            for (const auto& seq : m.sequences) src_text += render_marked(seq, vocab) + "\n";
          }
        } else {
          if (f->out_tgt.empty()) throw ConfigError("markup: --out-tgt required with --tgt");
          for (const auto& pd : load_pair(f->src, f->tgt).pairs) {
            auto m = mark_up_parallel(pd, vocab, f->limit);
            warnings += m.warnings.size();
            for (const auto& [s, t] : m.sequences) {
              src_text += render_marked(s, vocab) + "\n";
              tgt_text += render_marked(t, vocab) + "\n";
            }
          }
          write_file(f->out_tgt, tgt_text);
        }
        write_file(f->out_src, src_text);
        if (warnings) log << warnings << " overlong sentences kept in their own chunk\n";
      };
    });
  }

  for (bool finetune : {false, true}) {
    auto f = std::make_shared<TrainFlags>();
    auto* cmd = app.add_subcommand(finetune ? "finetune" : "train",
                                   finetune ? "continue training on new data" : "train a model");
    f->add_to(cmd, finetune);
    cmd->callback([f, finetune, &action, &log] { action = [f, finetune, &log] { run_train(*f, finetune, log); }; });
  }

  for (bool second_pass : {false, true}) {
    struct F {
      std::string input, ensemble, vocab, first_pass, out, mode = "sentence";
      std::vector<std::string> models;
      std::vector<double> weights;
      int limit = kDefaultMaxDocTokens;
      DecodeFlags decode;
    };
    auto f = std::make_shared<F>();
    if (second_pass) f->mode = "second-pass";
    auto* cmd = app.add_subcommand(second_pass ? "second-pass" : "translate",
                                   second_pass ? "dual-encoder second-pass decoding" : "translate documents");
    cmd->add_option("--input", f->input, "source documents")->required();
    cmd->add_option("--model", f->models, "checkpoint (repeatable)");
    cmd->add_option("--weight", f->weights, "ensemble weight per --model");
    cmd->add_option("--ensemble", f->ensemble, "ensemble spec file");
    cmd->add_option("--vocab", f->vocab)->required();
    if (!second_pass) cmd->add_option("--mode", f->mode, "sentence, document or second-pass");
    auto* fp = cmd->add_option("--first-pass", f->first_pass, "first-pass translations");
    if (second_pass) fp->required();
    cmd->add_option("--max-doc-tokens", f->limit);
    cmd->add_option("--out", f->out)->required();
    f->decode.add_to(cmd);
    cmd->callback([f, &action, &log] {
      action = [f, &log] {
        auto mode = parse_translate_mode(f->mode);
        auto model = load_models(f->ensemble, f->models, f->weights);
        auto vocab = SubwordVocab::load(f->vocab);
        Corpus src = load_documents(f->input);
        std::optional<Corpus> first;
        if (mode == TranslateMode::second_pass) {
          if (f->first_pass.empty()) throw ConfigError("second-pass mode needs --first-pass");
          first = load_documents(f->first_pass);
        }
        auto result = translate_corpus(*model, f->decode.config(model->max_len()), src, vocab, mode, f->limit,
                                       first ? &*first : nullptr);
        write_documents(result.hyps, f->out);
        for (const auto& w : result.warnings) log << "warning: " << w << "\n";
        log << "translated " << src.size() << " documents";
        if (mode != TranslateMode::sentence) log << ", fail-safe used for " << result.failsafe_documents;
        log << "\n";
      };
    });
  }

  {
    struct F {
      std::string hyp, ref, manifest, lang, out;
    };
    auto f = std::make_shared<F>();
    auto* cmd = app.add_subcommand("evaluate", "BLEU by origin split");
    cmd->add_option("--hyp", f->hyp)->required();
    cmd->add_option("--ref", f->ref)->required();
    cmd->add_option("--manifest", f->manifest, "origin manifest of the reference documents");
    cmd->add_option("--lang", f->lang, "language pair for the signature, e.g. en-de");
    cmd->add_option("--out", f->out, "report file (default: log)");
    cmd->callback([f, &action, &log] {
      action = [f, &log] {
        Corpus hyps = load_documents(f->hyp), refs = load_documents(f->ref);
        OriginReport report;
        if (f->manifest.empty()) {
          if (hyps.size() != refs.size()) throw LengthMismatch("hypothesis and reference document counts differ");
          report.all = bleu(all_sentences(hyps), all_sentences(refs));
        } else {
          apply_manifest(refs, read_manifest(f->manifest));
          report = evaluate_by_origin(hyps, refs);
        }
        auto text = format_report(report, f->lang);
        if (f->out.empty()) log << text;
        else write_file(f->out, text);
      };
    });
  }

  {
    struct F {
      std::vector<std::string> models;
      std::vector<double> weights;
      std::string label, out;
    };
    auto f = std::make_shared<F>();
    auto* cmd = app.add_subcommand("ensemble", "write an ensemble spec file");
    cmd->add_option("--model", f->models)->required();
    cmd->add_option("--weight", f->weights);
    cmd->add_option("--label", f->label);
    cmd->add_option("--out", f->out)->required();
    cmd->callback([f, &action] {
      action = [f] {
        if (!f->weights.empty() && f->weights.size() != f->models.size())
          throw ConfigError("ensemble: one --weight per --model");
        std::ostringstream text;
        if (!f->label.empty()) text << "# " << f->label << "\n";
        for (std::size_t i = 0; i < f->models.size(); ++i) {
          if (!fs::exists(f->models[i])) throw ConfigError("ensemble: no checkpoint " + f->models[i]);
          text << fs::absolute(f->models[i]).string() << '\t' << (f->weights.empty() ? 1.0 : f->weights[i]) << "\n";
        }
        write_file(f->out, text.str());
      };
    });
  }

  {
    auto* cmd = app.add_subcommand("pipeline", "run or print experiment pipelines");
    cmd->require_subcommand(1);
    auto config = std::make_shared<std::string>();
    auto* run = cmd->add_subcommand("run", "run a pipeline config");
    run->add_option("config", *config)->required();
    run->callback([config, &action, &log] {
      action = [config, &log] {
        CommandRunner runner{is_command, [](const std::vector<std::string>& args, std::ostream& l) { run_command(args, l); }};
        auto records = run_pipeline(load_pipeline(*config), runner, log);
        auto skipped = std::count_if(records.begin(), records.end(), [](const StageRecord& r) { return r.skipped; });
        log << records.size() << " stages, " << skipped << " up to date\n";
      };
    });
    auto out = std::make_shared<std::string>();
    auto* preset = cmd->add_subcommand("preset", "print the preset system-building pipeline");
    preset->add_option("--out", *out, "write to a file instead of the log");
    preset->callback([out, &action, &log] {
      action = [out, &log] {
        auto text = to_json(preset_system_pipeline()).dump(2) + "\n";
        if (out->empty()) log << text;
        else write_file(*out, text);
      };
    });
  }
}

}  // namespace

bool is_command(const std::string& name) { return kCommands.count(name) > 0; }

void run_command(const std::vector<std::string>& args, std::ostream& log) {
  CLI::App app{"docnmt: document-level translation toolkit", "docnmt"};
  std::function<void()> action;
  build_app(app, log, action);
  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    log << app.help();
    return;
  } catch (const CLI::CallForAllHelp&) {
    log << app.help("", CLI::AppFormatMode::All);
    return;
  } catch (const CLI::ParseError& e) {
    throw ConfigError(e.what());
  }
  if (action) action();
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  try {
    run_command(args, out);
    return kExitOk;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfigError;
  } catch (const InvalidConfig& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfigError;
  } catch (const StageFailure& e) {
    err << e.what() << "\n";
    return kExitStageFailure;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitStageFailure;
  }
}

}  // namespace docnmt
