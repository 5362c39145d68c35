#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include "bdlab/errors.hpp"
#include "bdlab/harness.hpp"
#include "json.hpp"

namespace bdlab {

using json = nlohmann::json;

namespace {

// Reads known keys from one JSON object and rejects the rest.
class Section {
 public:
  Section(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(label("") + " must be an object");
  }

  bool has(const char* key) {
    if (!j_.contains(key)) return false;
    seen_.insert(key);
    return true;
  }

  void count(const char* key, std::size_t& out) {
    if (!has(key)) return;
    const auto& v = j_.at(key);
    if (!v.is_number_unsigned()) throw ConfigError(label(key) + " must be a non-negative integer");
    out = v.get<std::size_t>();
  }

  void seed(const char* key, std::uint64_t& out) {
    if (!has(key)) return;
    const auto& v = j_.at(key);
    if (!v.is_number_unsigned()) throw ConfigError(label(key) + " must be a non-negative integer");
    out = v.get<std::uint64_t>();
  }

  template <typename T>
  void real(const char* key, T& out) {
    if (!has(key)) return;
    const auto& v = j_.at(key);
    if (!v.is_number()) throw ConfigError(label(key) + " must be a number");
    out = v.get<T>();
  }

  std::optional<std::string> text(const char* key) {
    if (!has(key)) return std::nullopt;
    const auto& v = j_.at(key);
    if (!v.is_string()) throw ConfigError(label(key) + " must be a string");
    return v.get<std::string>();
  }

  // Absent and null both mean "unset".
  std::optional<std::string> optional_text(const char* key) {
    if (!has(key) || j_.at(key).is_null()) return std::nullopt;
    const auto& v = j_.at(key);
    if (!v.is_string()) throw ConfigError(label(key) + " must be a string or null");
    return v.get<std::string>();
  }

  const json& object(const char* key) {
    seen_.insert(key);
    return j_.at(key);
  }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) throw ConfigError("unknown config key '" + label(k.c_str()) + "'");
    }
  }

  std::string label(const char* key) const { return where_.empty() ? key : where_ + "." + key; }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

// Wraps parse failures of enum-like names as config errors naming the key.
template <typename F>
auto named(const std::string& key, F parse) {
  try {
    return parse();
  } catch (const std::exception& e) {
    throw ConfigError(key + ": " + e.what());
  }
}

std::string checkpoint_policy_name(CheckpointPolicy p) {
  return p == CheckpointPolicy::every_epoch ? "every_epoch" : "final_only";
}

}  // namespace

void finalize(ExperimentConfig& c) {
  if (c.data.n_train == 0) throw ConfigError("data.n_train must be at least 1");
  if (c.data.n_test < 2) throw ConfigError("data.n_test must be at least 2");
  c.model.init_seed = c.seed;
  c.train.seed = c.seed;
  c.poison.seed = c.seed;
  c.poison.trigger.pattern_seed = c.seed;
  // The real vocabulary size is only known once the corpus exists.
  ModelConfig probe = c.model;
  probe.vocab_size = kMaxVocab;
  validate(probe);
  validate(c.train);
  validate(c.poison.trigger);
  if (!(c.poison.rate >= 0.0 && c.poison.rate <= 1.0)) throw ConfigError("poison.rate must be in [0, 1]");
  if (c.output_dir.empty()) throw ConfigError("output_dir must not be empty");
}

ExperimentConfig config_from_json(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  ExperimentConfig c;
  Section top(doc, "");
  if (auto t = top.text("task")) c.task = named("task", [&] { return parse_task(*t); });
  top.seed("seed", c.seed);
  if (auto o = top.text("output_dir")) c.output_dir = *o;
  if (auto p = top.optional_text("pretrained")) c.pretrained = *p;
  if (auto p = top.text("checkpoints")) {
    if (*p == "every_epoch") {
      c.checkpoints = CheckpointPolicy::every_epoch;
    } else if (*p == "final_only") {
      c.checkpoints = CheckpointPolicy::final_only;
    } else {
      throw ConfigError("checkpoints: expected every_epoch or final_only, got '" + *p + "'");
    }
  }

  if (top.has("data")) {
    Section s(top.object("data"), "data");
    s.count("n_train", c.data.n_train);
    s.count("n_test", c.data.n_test);
    s.seed("seed", c.data.seed);
    if (auto d = s.optional_text("corpus_dir")) c.data.corpus_dir = *d;
    s.finish();
  }
  if (top.has("model")) {
    Section s(top.object("model"), "model");
    auto& m = c.model;
    s.count("image_size", m.image_size);
    s.count("patch", m.patch);
    s.count("d_model", m.d_model);
    s.count("enc_layers", m.enc_layers);
    s.count("enc_heads", m.enc_heads);
    s.count("n_queries", m.n_queries);
    s.count("adaptor_layers", m.adaptor_layers);
    s.count("dec_layers", m.dec_layers);
    s.count("dec_heads", m.dec_heads);
    s.count("max_seq", m.max_seq);
    s.finish();
  }
  if (top.has("train")) {
    Section s(top.object("train"), "train");
    auto& t = c.train;
    s.count("pretrain_epochs", t.pretrain_epochs);
    s.count("backdoor_epochs", t.backdoor_epochs);
    s.count("batch_size", t.batch_size);
    s.real("pretrain_lr", t.pretrain_lr);
    s.real("backdoor_lr", t.backdoor_lr);
    s.real("w_lm", t.weights.lm);
    s.real("w_sp", t.weights.sp);
    s.count("prior_repeats", t.prior_repeats);
    s.real("mention_rate", t.mention_rate);
    s.finish();
  }
  if (top.has("poison")) {
    Section s(top.object("poison"), "poison");
    auto& p = c.poison;
    if (auto v = s.text("trigger_style")) p.trigger.style = named("poison.trigger_style", [&] { return parse_style(*v); });
    s.count("trigger_size", p.trigger.size);
    if (auto v = s.text("trigger_location")) {
      p.trigger.location = named("poison.trigger_location", [&] { return parse_location(*v); });
    }
    auto kind = p.target.kind;
    if (auto v = s.text("target_kind")) kind = named("poison.target_kind", [&] { return parse_target_kind(*v); });
    if (auto v = s.optional_text("target_text")) {
      p.target = named("poison.target_text", [&] { return make_target(kind, *v); });
    } else {
      p.target = default_target(kind);
    }
    s.real("rate", p.rate);
    s.finish();
  }
  top.finish();
  finalize(c);
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return config_from_json(ss.str());
}

std::string config_to_json(const ExperimentConfig& c) {
  const auto& m = c.model;
  const auto& t = c.train;
  const auto& p = c.poison;
  json doc = {
      {"task", task_name(c.task)},
      {"seed", c.seed},
      {"output_dir", c.output_dir.string()},
      {"pretrained", c.pretrained ? json(c.pretrained->string()) : json(nullptr)},
      {"checkpoints", checkpoint_policy_name(c.checkpoints)},
      {"data",
       {{"n_train", c.data.n_train},
        {"n_test", c.data.n_test},
        {"seed", c.data.seed},
        {"corpus_dir", c.data.corpus_dir ? json(c.data.corpus_dir->string()) : json(nullptr)}}},
      {"model",
       {{"image_size", m.image_size},
        {"patch", m.patch},
        {"d_model", m.d_model},
        {"enc_layers", m.enc_layers},
        {"enc_heads", m.enc_heads},
        {"n_queries", m.n_queries},
        {"adaptor_layers", m.adaptor_layers},
        {"dec_layers", m.dec_layers},
        {"dec_heads", m.dec_heads},
        {"max_seq", m.max_seq}}},
      {"train",
       {{"pretrain_epochs", t.pretrain_epochs},
        {"backdoor_epochs", t.backdoor_epochs},
        {"batch_size", t.batch_size},
        {"pretrain_lr", t.pretrain_lr},
        {"backdoor_lr", t.backdoor_lr},
        {"w_lm", t.weights.lm},
        {"w_sp", t.weights.sp},
        {"prior_repeats", t.prior_repeats},
        {"mention_rate", t.mention_rate}}},
      {"poison",
       {{"trigger_style", style_name(p.trigger.style)},
        {"trigger_size", p.trigger.size},
        {"trigger_location", location_name(p.trigger.location)},
        {"target_kind", target_kind_name(p.target.kind)},
        {"target_text", join(p.target.tokens)},
        {"rate", p.rate}}},
  };
  return doc.dump(2) + "\n";
}

void apply_output_override(ExperimentConfig& config) {
  const char* dir = std::getenv(kOutputDirEnv);
  if (dir != nullptr && *dir != '\0') config.output_dir = dir;
}

}  // namespace bdlab
