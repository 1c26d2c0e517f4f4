#include <cstdio>
#include <filesystem>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "hidetell/hidetell.hpp"

namespace fs = std::filesystem;
using namespace hidetell;

namespace {

template <typename M>
struct ScalarOf;
template <typename T>
struct ScalarOf<INetModel<T>> {
  using type = T;
};
template <typename M>
using scalar_of = typename ScalarOf<std::decay_t<M>>::type;

// ---------------------------------------------------------------------------
// Resolved configuration: defaults, then the --config file, then flags.

KeyValues run_defaults() {
  KeyValues kv = INetConfig().to_key_values();
  const KeyValues train_kv = TrainConfig().to_key_values();
  for (const auto& [k, v] : train_kv.entries()) kv.set(k, v);
  const std::pair<const char*, const char*> extra[] = {
      {"out", ""},
      {"corpus", ""},
      {"vocab", ""},
      {"checkpoint", ""},
      {"features", ""},
      {"resume", ""},
      {"generated", ""},
      {"synth.topics", "8"},
      {"synth.slots", "5"},
      {"synth.feature_dim", "16"},
      {"synth.noise", "0.1"},
      {"synth.seed", "7"},
      {"synth.train_stories", "500"},
      {"synth.test_stories", "100"},
      {"synth.min_count", "1"},
      
      {"decode.max_len", "0"},
      {"decode.length_normalize", "false"},
      {"eval.hide_one", "false"},
      {"eval.seed", "1"},
      {"eval.smooth", "false"},
      {"eval.template_words", ""},
      {"gradcheck.points", "50"},
      {"gradcheck.seed", "1"},
  };
  for (const auto& [k, v] : extra) kv.set(k, v);
  kv.set("decode.beam", std::to_string(kDefaultBeam));
  return kv;
}

struct RunConfig {
  KeyValues kv;
  std::set<std::string> explicit_keys;  // set by file or flag

  bool is_explicit(const std::string& k) const { return explicit_keys.count(k) != 0; }
  std::string str(const std::string& k) const { return kv.get(k, ""); }
  template <typename U>
  U num(const std::string& k) const {
    return kv.get_number<U>(k, U{});
  }
  bool flag(const std::string& k) const {
    const std::string v = str(k);
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0" || v.empty()) return false;
    throw ConfigError("invalid boolean '" + v + "' for " + k);
  }
  fs::path path(const std::string& k, const std::string& what) const {
    const std::string v = str(k);
    if (v.empty()) throw ConfigError("missing " + what + " path (--" + k + ")");
    return v;
  }
};

// Flag values are collected as text and merged after parsing so they win
// over the config file.
struct FlagSet {
  std::vector<std::pair<CLI::Option*, std::string>> bound;
  std::vector<std::unique_ptr<std::string>> storage;
  std::string config_file;
  bool print_config = false;

  CLI::Option* add(CLI::App* app, const std::string& name, const std::string& key,
                   const std::string& help) {
    storage.push_back(std::make_unique<std::string>());
    CLI::Option* opt = app->add_option(name, *storage.back(), help);
    bound.emplace_back(opt, key);
    return opt;
  }

  void add_common(CLI::App* app, const std::string& seed_key) {
    app->add_option("--config", config_file, "key = value configuration file");
    add(app, "--seed", seed_key, "seed for every random choice")->check(CLI::NonNegativeNumber);
    add(app, "--precision", "train.precision", "f32 or f64")->check(CLI::IsMember({"f32", "f64"}));
    add(app, "--out", "out", "output path");
    app->add_flag("--print-config", print_config, "print the resolved configuration and exit");
  }

  RunConfig resolve() const {
    RunConfig rc{run_defaults(), {}};
    if (!config_file.empty()) {
      const KeyValues file = KeyValues::parse(bytes::read_file(config_file), config_file);
      for (const auto& [k, v] : file.entries()) {
        if (!rc.kv.has(k)) throw ConfigError(config_file + ": unknown key '" + k + "'");
        rc.kv.set(k, v);
        rc.explicit_keys.insert(k);
      }
    }
    for (std::size_t i = 0; i < bound.size(); ++i) {
      if (bound[i].first->count() == 0) continue;
      rc.kv.set(bound[i].second, *storage[i]);
      rc.explicit_keys.insert(bound[i].second);
    }
    return rc;
  }
};

void print_config(const KeyValues& kv) { std::cout << kv.to_text(); }

std::set<std::string> split_words(const std::string& text) {
  std::set<std::string> out;
  std::stringstream ss(text);
  std::string w;
  while (std::getline(ss, w, ',')) {
    for (const std::string& t : tokenize(w)) out.insert(t);
  }
  return out;
}

DecodeOptions decode_options(const RunConfig& rc) {
  DecodeOptions o;
  o.beam = rc.num<std::size_t>("decode.beam");
  o.max_len = rc.num<std::size_t>("decode.max_len");
  o.length_normalize = rc.flag("decode.length_normalize");
  if (o.beam < 1) throw ConfigError("beam width must be >= 1");
  return o;
}

// ---------------------------------------------------------------------------
// synth

int cmd_synth(const RunConfig& rc) {
  SyntheticSpec spec;
  spec.topics = rc.num<std::size_t>("synth.topics");
  spec.slots = rc.num<std::size_t>("synth.slots");
  spec.feature_dim = rc.num<std::size_t>("synth.feature_dim");
  spec.noise = rc.num<double>("synth.noise");
  spec.seed = rc.num<std::uint64_t>("synth.seed");
  spec.validate();
  const fs::path out = rc.path("out", "output directory");
  const auto n_train = rc.num<std::size_t>("synth.train_stories");
  const auto n_test = rc.num<std::size_t>("synth.test_stories");
  if (n_train == 0) throw ConfigError("synth needs at least one training story");

  fs::create_directories(out / "features");
  const auto splits = synth_generate(spec, {n_train, n_test});
  std::vector<std::string> all;
  const char* names[] = {"train.jsonl", "test.jsonl"};
  for (std::size_t s = 0; s < 2; ++s) {
    std::vector<StoryRecord> recs;
    for (const SyntheticStory& story : splits[s]) {
      const fs::path rel = fs::path("features") / (story.story_id + ".inft");
      write_features(out / rel, story.features);
      recs.push_back({story.story_id, rel, story.sentences});
      if (s == 0) all.insert(all.end(), story.sentences.begin(), story.sentences.end());
    }
    write_corpus(out / names[s], recs);
  }
  const Vocabulary vocab = Vocabulary::build(all, rc.num<std::size_t>("synth.min_count"));
  vocab.save(out / "vocab.txt");

  const SyntheticWorld world(spec);
  nlohmann::json meta;
  meta["topics"] = spec.topics;
  meta["slots"] = spec.slots;
  meta["feature_dim"] = spec.feature_dim;
  meta["noise"] = spec.noise;
  meta["seed"] = spec.seed;
  meta["train_stories"] = n_train;
  meta["test_stories"] = n_test;
  meta["vocab_size"] = vocab.size();
  meta["template_words"] = synthetic_template_words();
  std::vector<std::size_t> next;
  for (std::size_t k = 0; k < spec.topics; ++k) next.push_back(world.next(k));
  meta["next_topic"] = next;
  bytes::write_file(out / "synth.json", meta.dump(2) + "\n");
  std::cout << meta.dump() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// train

template <typename T>
std::vector<TrainingStory<T>> load_training_corpus(const fs::path& corpus, const Vocabulary& vocab) {
  std::vector<TrainingStory<T>> out;
  for (const StoryRecord& rec : read_corpus(corpus)) {
    out.push_back(to_training_story<T>(read_features(rec.features), rec.sentences, vocab));
  }
  if (out.empty()) throw ConfigError("corpus '" + corpus.string() + "' holds no stories");
  return out;
}

fs::path default_vocab(const RunConfig& rc, const fs::path& beside) {
  const std::string v = rc.str("vocab");
  return v.empty() ? beside.parent_path() / "vocab.txt" : fs::path(v);
}

// Fills slots, feature_dim and hidden from the data unless set explicitly.
void infer_model_shape(RunConfig& rc, const fs::path& corpus, const Vocabulary& vocab) {
  const auto recs = read_corpus(corpus);
  if (recs.empty()) throw ConfigError("corpus '" + corpus.string() + "' holds no stories");
  const FeatureStream first = read_features(recs.front().features);
  if (!rc.is_explicit("model.slots")) rc.kv.set("model.slots", std::to_string(first.dim(0)));
  if (!rc.is_explicit("model.feature_dim")) rc.kv.set("model.feature_dim", std::to_string(first.dim(1)));
  if (!rc.is_explicit("model.hidden")) {
    rc.kv.set("model.hidden", std::to_string(rc.num<std::size_t>("model.feature_dim") / 2));
  }
  rc.kv.set("model.vocab", std::to_string(vocab.size()));
  // One curriculum for model and trainer.
  for (const char* k : {"alpha", "beta"}) {
    const std::string tk = std::string("train.") + k, mk = std::string("model.") + k;
    if (rc.is_explicit(tk) || !rc.is_explicit(mk)) {
      rc.kv.set(mk, rc.str(tk));
    } else {
      rc.kv.set(tk, rc.str(mk));
    }
  }
}

template <typename T>
int train_with(const RunConfig& rc, const fs::path& corpus, const Vocabulary& vocab) {
  const fs::path out = rc.str("out").empty() ? fs::path("run") : fs::path(rc.str("out"));
  fs::create_directories(out);
  const auto data = load_training_corpus<T>(corpus, vocab);

  INetConfig mc = INetConfig::from_key_values(rc.kv);
  TrainConfig tc = TrainConfig::from_key_values(rc.kv);
  mc.validate();
  tc.validate();
  TrainerState<T> state;
  if (!rc.str("resume").empty()) {
    CheckpointRecord<T> rec = load_checkpoint<T>(rc.str("resume"));
    if (rec.model_config.to_key_values().to_text() != mc.to_key_values().to_text()) {
      throw ConfigError("resume checkpoint was trained with a different model configuration");
    }
    state = std::move(rec.state);
    std::clog << "resuming at epoch " << state.next_epoch << "\n";
  } else {
    state = make_trainer_state<T>(mc, tc.seed);
  }
  vocab.save(out / "vocab.txt");
  KeyValues resolved = rc.kv;
  resolved.set("vocab", (out / "vocab.txt").string());
  bytes::write_file(out / "config.txt", resolved.to_text());

  const fs::path ckpt = tc.checkpoint_path.empty() ? out / "checkpoint.inck" : fs::path(tc.checkpoint_path);
  std::string log = "epoch\tb_total\tlr\tloss\n";
  const fs::path log_path = out / "loss.tsv";
  if (state.next_epoch > 0 && fs::exists(log_path)) log = bytes::read_file(log_path);
  TrainHooks hooks;
  hooks.on_epoch = [&](const EpochLog& e) {
    nlohmann::json j{{"epoch", e.epoch}, {"b_total", e.b_total}, {"lr", e.lr}, {"loss", e.loss}};
    std::cout << j.dump() << std::endl;
    log += std::to_string(e.epoch) + "\t" + std::to_string(e.b_total) + "\t" + format_double(e.lr) +
           "\t" + format_double(e.loss) + "\n";
    bytes::write_file(log_path, log);
  };
  hooks.on_checkpoint = [&](int) { save_checkpoint(CheckpointRecord<T>{mc, tc, state}, ckpt); };
  train(state, std::span<const TrainingStory<T>>(data), tc, hooks);
  save_checkpoint(CheckpointRecord<T>{mc, tc, state}, ckpt);
  std::clog << "wrote " << ckpt.string() << "\n";
  return 0;
}

int cmd_train(RunConfig rc, bool print_only) {
  const fs::path corpus = rc.path("corpus", "training corpus");
  const Vocabulary vocab = Vocabulary::load(default_vocab(rc, corpus));
  infer_model_shape(rc, corpus, vocab);
  INetConfig::from_key_values(rc.kv).validate();
  TrainConfig::from_key_values(rc.kv).validate();
  if (print_only) {
    print_config(rc.kv);
    return 0;
  }
  return TrainConfig::from_key_values(rc.kv).precision == Precision::f32
             ? train_with<float>(rc, corpus, vocab)
             : train_with<double>(rc, corpus, vocab);
}

// ---------------------------------------------------------------------------
// Commands that start from a checkpoint.

Precision checkpoint_precision(const RunConfig& rc, const fs::path& ckpt) {
  const Precision p = TrainConfig::from_key_values(peek_checkpoint_config(bytes::read_file(ckpt))).precision;
  if (rc.is_explicit("train.precision") && parse_precision(rc.str("train.precision")) != p) {
    throw ConfigError("checkpoint holds " + precision_name(p) + " tensors but --precision " +
                      rc.str("train.precision") + " was requested");
  }
  return p;
}

template <typename F>
int with_checkpoint(const RunConfig& rc, F&& body) {
  const fs::path ckpt = rc.path("checkpoint", "checkpoint");
  const Precision p = checkpoint_precision(rc, ckpt);
  const Vocabulary vocab = Vocabulary::load(default_vocab(rc, ckpt));
  if (p == Precision::f32) return body(load_checkpoint<float>(ckpt).state.model, vocab);
  return body(load_checkpoint<double>(ckpt).state.model, vocab);
}

std::string decode_text(const Vocabulary& vocab, const std::vector<std::size_t>& ids) {
  const std::string s = vocab.decode(ids);
  return s.empty() ? "<empty>" : s;
}

int cmd_generate(const RunConfig& rc, const std::vector<int>& hide_slots) {
  const DecodeOptions opts = decode_options(rc);
  const FeatureStream features = read_features(rc.path("features", "feature file"));
  std::optional<MaskPattern> mask;
  if (!hide_slots.empty()) {
    mask = MaskPattern::all_visible(features.dim(0));
    for (int s : hide_slots) {
      if (s < 1 || static_cast<std::size_t>(s) > features.dim(0)) {
        throw DimensionError("slot " + std::to_string(s) + " out of range 1.." +
                             std::to_string(features.dim(0)));
      }
      mask->visible[static_cast<std::size_t>(s - 1)] = 0;
    }
  }
  return with_checkpoint(rc, [&](const auto& model, const Vocabulary& vocab) {
    using T = scalar_of<decltype(model)>;
    const auto story = generate_story(model, features.cast<T>(), mask, opts);
    for (std::size_t i = 0; i < story.size(); ++i) {
      std::cout << "slot " << i + 1 << (mask && mask->is_hidden(i) ? " [hidden]" : "") << ": "
                << decode_text(vocab, story[i]) << "\n";
    }
    return 0;
  });
}

int cmd_interpolate(const RunConfig& rc) {
  const DecodeOptions opts = decode_options(rc);
  const FeatureStream features = read_features(rc.path("features", "feature file"));
  if (features.dim(0) != 5) {
    throw DimensionError("interpolation needs a 5-slot feature file, got " + std::to_string(features.dim(0)) +
                         " slots");
  }
  return with_checkpoint(rc, [&](const auto& model, const Vocabulary& vocab) {
    using T = scalar_of<decltype(model)>;
    const auto story = interpolate_story(model, features.cast<T>(), opts);
    for (std::size_t i = 0; i < story.size(); ++i) {
      std::cout << "slot " << i + 1 << (is_inserted_slot(i) ? " [inserted]" : "") << ": "
                << decode_text(vocab, story[i]) << "\n";
    }
    return 0;
  });
}

void emit_report(const RunConfig& rc, const MetricReport& rep, bool json) {
  const std::string text = json ? rep.to_json().dump(2) + "\n" : rep.to_text();
  std::cout << text;
  if (!rc.str("out").empty()) bytes::write_file(rc.str("out"), text);
}

int cmd_evaluate(const RunConfig& rc, bool json) {
  const auto refs = read_corpus(rc.path("corpus", "reference corpus"));
  const bool smooth = rc.flag("eval.smooth");
  if (!rc.str("generated").empty()) {
    // Score an existing set of stories; no model involved.
    const auto gen = read_corpus(rc.str("generated"));
    std::map<std::string, const StoryRecord*> by_id;
    for (const StoryRecord& r : gen) by_id[r.story_id] = &r;
    std::vector<std::vector<Tokens>> g, r;
    for (const StoryRecord& ref : refs) {
      auto it = by_id.find(ref.story_id);
      if (it == by_id.end()) throw FormatError("no generated story for '" + ref.story_id + "'");
      std::vector<Tokens> gs, rs;
      for (const auto& s : it->second->sentences) gs.push_back(tokenize(s));
      for (const auto& s : ref.sentences) rs.push_back(tokenize(s));
      g.push_back(std::move(gs));
      r.push_back(std::move(rs));
    }
    emit_report(rc, score_stories(g, r, smooth), json);
    return 0;
  }
  EvalOptions opts;
  opts.decode = decode_options(rc);
  opts.hide_one = rc.flag("eval.hide_one");
  opts.seed = rc.num<std::uint64_t>("eval.seed");
  opts.template_words = split_words(rc.str("eval.template_words"));
  opts.smooth = smooth;
  return with_checkpoint(rc, [&](const auto& model, const Vocabulary& vocab) {
    using T = scalar_of<decltype(model)>;
    std::vector<EvalStory<T>> corpus;
    for (const StoryRecord& r : refs) corpus.push_back({read_features(r.features).cast<T>(), r.sentences});
    emit_report(rc, evaluate(model, vocab, corpus, opts).report, json);
    return 0;
  });
}

int cmd_gradcheck(const RunConfig& rc) {
  const auto points = rc.num<std::size_t>("gradcheck.points");
  if (points == 0) throw ConfigError("gradcheck needs at least one point per case");
  int failed = 0;
  std::printf("%-26s %6s %14s  %s\n", "case", "points", "max_rel_error", "result");
  for (const auto& rep : gradsuite::run_suite(points, rc.num<std::uint64_t>("gradcheck.seed"))) {
    const bool ok = rep.worst.max_relative_error < gradsuite::kGradTolerance;
    failed += !ok;
    std::printf("%-26s %6zu %14.3e  %s\n", rep.name.c_str(), rep.points, rep.worst.max_relative_error,
                ok ? "PASS" : "FAIL");
  }
  std::fflush(stdout);
  if (failed) throw NumericalError(std::to_string(failed) + " gradient case(s) above tolerance");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hide-and-tell visual storytelling: synthesize, train, generate and evaluate."};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "help for every subcommand");

  FlagSet synth_f, train_f, gen_f, interp_f, eval_f, grad_f;

  CLI::App* synth = app.add_subcommand("synth", "write a synthetic corpus with a deterministic topic chain");
  synth_f.add_common(synth, "synth.seed");
  synth_f.add(synth, "--topics", "synth.topics", "number of topics K")->check(CLI::PositiveNumber);
  synth_f.add(synth, "--slots", "synth.slots", "slots per story N")->check(CLI::PositiveNumber);
  synth_f.add(synth, "--dim", "synth.feature_dim", "feature width D")->check(CLI::PositiveNumber);
  synth_f.add(synth, "--noise", "synth.noise", "gaussian feature noise")->check(CLI::NonNegativeNumber);
  synth_f.add(synth, "--stories", "synth.train_stories", "training stories")->check(CLI::PositiveNumber);
  synth_f.add(synth, "--test-stories", "synth.test_stories", "test stories")->check(CLI::NonNegativeNumber);
  synth_f.add(synth, "--min-count", "synth.min_count", "vocabulary min count")->check(CLI::PositiveNumber);

  CLI::App* train = app.add_subcommand("train", "train a model; writes checkpoint, loss log and config");
  train_f.add_common(train, "train.seed");
  train_f.add(train, "--corpus", "corpus", "training corpus (JSON lines)");
  train_f.add(train, "--vocab", "vocab", "vocabulary file (default: beside the corpus)");
  train_f.add(train, "--resume", "resume", "continue from a checkpoint");
  train_f.add(train, "--epochs", "train.epochs", "epochs");
  train_f.add(train, "--lr", "train.base_lr", "base learning rate");
  train_f.add(train, "--alpha", "train.alpha", "epoch at which one slot is hidden");
  train_f.add(train, "--beta", "train.beta", "epoch at which two slots are hidden");
  train_f.add(train, "--batch", "train.batch_size", "stories per minibatch");
  train_f.add(train, "--clip", "train.clip_norm", "global gradient-norm clip (0 disables)");
  train_f.add(train, "--checkpoint-every", "train.checkpoint_every", "epochs between checkpoints");
  train_f.add(train, "--ablation", "model.ablation", "full, no-blinding, no-nonlocal or no-telling")
      ->check(CLI::IsMember({"full", "no-blinding", "no-nonlocal", "no-telling"}));
  train_f.add(train, "--hidden", "model.hidden", "GRU width per direction (default D/2)");
  train_f.add(train, "--decoder-hidden", "model.decoder_hidden", "decoder GRU width");
  train_f.add(train, "--head-width", "model.head_width", "output head width");
  train_f.add(train, "--embed-dim", "model.embed_dim", "word embedding width (0: one-hot)");
  train_f.add(train, "--max-len", "model.max_len", "longest sentence in tokens, EOS included");

  CLI::App* gen = app.add_subcommand("generate", "tell a story for one feature file");
  gen_f.add_common(gen, "eval.seed");
  gen_f.add(gen, "--checkpoint", "checkpoint", "trained checkpoint");
  gen_f.add(gen, "--vocab", "vocab", "vocabulary (default: beside the checkpoint)");
  gen_f.add(gen, "--features", "features", "INFT feature file");
  gen_f.add(gen, "--beam", "decode.beam", "beam width")->check(CLI::PositiveNumber);
  std::vector<int> hide_slots;
  gen->add_option("--hide", hide_slots, "1-based slot to hide (repeatable)");

  CLI::App* interp = app.add_subcommand("interpolate", "tell 9 sentences around 4 inserted black slots");
  interp_f.add_common(interp, "eval.seed");
  interp_f.add(interp, "--checkpoint", "checkpoint", "trained checkpoint");
  interp_f.add(interp, "--vocab", "vocab", "vocabulary (default: beside the checkpoint)");
  interp_f.add(interp, "--features", "features", "5-slot INFT feature file");
  interp_f.add(interp, "--beam", "decode.beam", "beam width")->check(CLI::PositiveNumber);

  CLI::App* eval = app.add_subcommand("evaluate", "BLEU, ROUGE-L and hidden-slot accuracy on a corpus");
  eval_f.add_common(eval, "eval.seed");
  eval_f.add(eval, "--checkpoint", "checkpoint", "trained checkpoint");
  eval_f.add(eval, "--vocab", "vocab", "vocabulary (default: beside the checkpoint)");
  eval_f.add(eval, "--corpus", "corpus", "reference corpus (JSON lines)");
  eval_f.add(eval, "--generated", "generated", "score these stories instead of decoding");
  eval_f.add(eval, "--beam", "decode.beam", "beam width")->check(CLI::PositiveNumber);
  eval_f.add(eval, "--template-words", "eval.template_words", "comma-separated non-content words");
  bool hide_one = false, smooth = false, json = false;
  eval->add_flag("--hide-one", hide_one, "hide one random slot per story and score it");
  eval->add_flag("--smooth", smooth, "add-one smoothing for n >= 2");
  eval->add_flag("--json", json, "JSON report");

  CLI::App* grad = app.add_subcommand("gradcheck", "finite-difference check of every op, layer and the loss");
  grad_f.add_common(grad, "gradcheck.seed");
  grad_f.add(grad, "--points", "gradcheck.points", "random points per case")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: usage: " << e.what() << "\n";
    return 2;
  }

  try {
    auto run = [](const FlagSet& f, auto&& body) {
      RunConfig rc = f.resolve();
      return body(rc, f.print_config);
    };
    if (*synth) {
      return run(synth_f, [](RunConfig& rc, bool p) { return p ? (print_config(rc.kv), 0) : cmd_synth(rc); });
    }
    if (*train) return run(train_f, [](RunConfig& rc, bool p) { return cmd_train(rc, p); });
    if (*gen) {
      return run(gen_f, [&](RunConfig& rc, bool p) { return p ? (print_config(rc.kv), 0) : cmd_generate(rc, hide_slots); });
    }
    if (*interp) {
      return run(interp_f, [](RunConfig& rc, bool p) { return p ? (print_config(rc.kv), 0) : cmd_interpolate(rc); });
    }
    if (*eval) {
      return run(eval_f, [&](RunConfig& rc, bool p) {
        if (hide_one) rc.kv.set("eval.hide_one", "true");
        if (smooth) rc.kv.set("eval.smooth", "true");
        return p ? (print_config(rc.kv), 0) : cmd_evaluate(rc, json);
      });
    }
    if (*grad) {
      return run(grad_f, [](RunConfig& rc, bool p) { return p ? (print_config(rc.kv), 0) : cmd_gradcheck(rc); });
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.kind() << ": " << e.what() << "\n";
    return 1;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: format: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
