#include <fstream>
#include <sstream>

#include "bdlab/errors.hpp"
#include "bdlab/harness.hpp"
#include "json.hpp"

namespace bdlab {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

template <typename F>
auto stage(const char* name, F&& body) {
  try {
    return body();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(name, e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Everything that determines the pretrained weights.
std::string pretrain_key(const ExperimentConfig& c, std::size_t vocab_size) {
  const auto& t = c.train;
  json key = json::parse(config_to_json(c));
  key.erase("output_dir");
  key.erase("pretrained");
  key.erase("checkpoints");
  key.erase("poison");
  key.erase("task");
  key["train"] = {{"pretrain_epochs", t.pretrain_epochs},       {"batch_size", t.batch_size},
                  {"pretrain_lr", t.pretrain_lr},               {"w_lm", t.weights.lm},
                  {"prior_repeats", t.prior_repeats},           {"mention_rate", t.mention_rate}};
  key["vocab_size"] = vocab_size;
  return key.dump(2) + "\n";
}

ModelConfig model_config_for(const ExperimentConfig& c, const Corpus& corpus) {
  ModelConfig m = c.model;
  m.vocab_size = corpus.vocab.size();
  return m;
}

TinyVlm load_matching(const fs::path& path, const ModelConfig& expected) {
  auto model = TinyVlm::load(path);
  if (!(model.config() == expected)) {
    throw ConfigError("checkpoint " + path.string() + " does not match the configured model");
  }
  return model;
}

EvalOptions eval_options(const ExperimentConfig& c) { return {c.poison.trigger, c.poison.target, c.seed}; }

std::string prompt_kind(const ExperimentConfig& c) { return target_kind_name(c.poison.target.kind); }

std::vector<TokenId> task_prompt(const Sample& s, const Vocab& vocab, Task task) {
  return vocab.encode(task == Task::captioning ? s.prompt : vqa_prompt(s.qa.value().question));
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"') out += '"';
    out += ch == '\n' ? ' ' : ch;
  }
  return out + "\"";
}

}  // namespace

Corpus load_or_generate_corpus(const DataConfig& data) {
  if (!data.corpus_dir) return generate_corpus(data.n_train, data.n_test, data.seed);
  Corpus corpus;
  corpus.train = load_corpus(*data.corpus_dir / "train");
  corpus.test = load_corpus(*data.corpus_dir / "test");
  corpus.vocab = load_vocab(*data.corpus_dir);
  if (corpus.train.empty() || corpus.test.size() < 2) {
    throw ArgumentError("corpus in " + data.corpus_dir->string() + " needs training samples and two test samples");
  }
  return corpus;
}

TinyVlm obtain_pretrained(const ExperimentConfig& config, const Corpus& corpus) {
  const auto mc = model_config_for(config, corpus);
  if (config.pretrained) return load_matching(*config.pretrained, mc);

  const auto ckpt = config.output_dir / "pretrain.ckpt";
  const auto key_path = config.output_dir / "pretrain.json";
  const auto key = pretrain_key(config, corpus.vocab.size());
  if (fs::exists(ckpt) && fs::exists(key_path) && read_text(key_path) == key) return load_matching(ckpt, mc);

  TinyVlm model(mc);
  auto log = train_pretrain(model, corpus.train, corpus.vocab, config.train);
  fs::create_directories(config.output_dir);
  model.save(ckpt);
  write_text(key_path, key);
  write_losses_csv(log, config.output_dir / "pretrain_losses.csv");
  return model;
}

AttackResult run_attack(const ExperimentConfig& config) {
  stage("setup", [&] {
    fs::create_directories(config.output_dir);
    write_text(config.output_dir / "config.json", config_to_json(config));
  });
  const auto corpus = stage("data", [&] { return load_or_generate_corpus(config.data); });
  const auto pretrained = stage("pretrain", [&] { return obtain_pretrained(config, corpus); });
  return run_attack(config, corpus, pretrained);
}

AttackResult run_attack(const ExperimentConfig& config, const Corpus& corpus, const TinyVlm& pretrained) {
  stage("setup", [&] {
    fs::create_directories(config.output_dir);
    write_text(config.output_dir / "config.json", config_to_json(config));
    if (!(pretrained.config() == model_config_for(config, corpus))) {
      throw ConfigError("pretrained model does not match the configured model");
    }
  });
  const auto mixture = stage("poison", [&] { return build_training_mixture(corpus.train, config.poison); });

  AttackResult result;
  auto model = pretrained.clone();
  stage("backdoor", [&] {
    std::optional<fs::path> ckpt_dir;
    if (config.checkpoints == CheckpointPolicy::every_epoch) ckpt_dir = config.output_dir / "checkpoints";
    result.backdoor_log = train_backdoor(model, mixture, corpus.vocab, config.task, config.train, ckpt_dir);
    model.save(config.output_dir / "backdoor.ckpt");
    write_losses_csv(result.backdoor_log, config.output_dir / "losses.csv");
  });

  stage("evaluate", [&] {
    const auto opts = eval_options(config);
    result.control = evaluate(pretrained, corpus.test, corpus.vocab, config.task, opts);
    result.backdoored = evaluate(model, corpus.test, corpus.vocab, config.task, opts);
  });

  stage("report", [&] {
    const auto kind = prompt_kind(config);
    result.rows = {{"clean", kind, result.control.clean},
                   {"clean", kind, *result.control.poisoned},
                   {"backdoor", kind, result.backdoored.clean},
                   {"backdoor", kind, *result.backdoored.poisoned}};
    write_report_csv(result.rows, config.output_dir / "report.csv");
    write_report_json(result.rows, config.output_dir / "report.json");
  });
  return result;
}

Axis parse_axis(const std::string& name) {
  if (name == "trigger_style") return Axis::trigger_style;
  if (name == "trigger_size") return Axis::trigger_size;
  if (name == "trigger_location") return Axis::trigger_location;
  if (name == "poison_rate") return Axis::poison_rate;
  throw ConfigError("unknown ablation axis '" + name + "'");
}

std::string axis_name(Axis axis) {
  switch (axis) {
    case Axis::trigger_style:
      return "trigger_style";
    case Axis::trigger_size:
      return "trigger_size";
    case Axis::trigger_location:
      return "trigger_location";
    case Axis::poison_rate:
      return "poison_rate";
  }
  return "";
}

std::vector<std::string> default_axis_values(Axis axis) {
  switch (axis) {
    case Axis::trigger_style:
      return {"black", "white", "red", "gaussian5", "gaussian10", "gaussian20"};
    case Axis::trigger_size:
      return {"2", "3", "4", "6"};
    case Axis::trigger_location:
      return {"upperleft", "upperright", "bottomleft", "bottomright", "center", "random"};
    case Axis::poison_rate:
      return {"0.05", "0.1", "0.15", "0.3"};
  }
  return {};
}

ExperimentConfig with_axis_value(const ExperimentConfig& base, Axis axis, const std::string& value) {
  ExperimentConfig c = base;
  const auto number = [&](auto parse) {
    std::size_t used = 0;
    try {
      auto v = parse(value, &used);
      if (used == value.size()) return v;
    } catch (const std::exception&) {
    }
    throw ConfigError(axis_name(axis) + ": bad value '" + value + "'");
  };
  switch (axis) {
    case Axis::trigger_style:
      c.poison.trigger.style = parse_style(value);
      break;
    case Axis::trigger_size:
      c.poison.trigger.size = number([](const std::string& s, std::size_t* n) { return std::stoul(s, n); });
      break;
    case Axis::trigger_location:
      c.poison.trigger.location = parse_location(value);
      break;
    case Axis::poison_rate:
      c.poison.rate = number([](const std::string& s, std::size_t* n) { return std::stod(s, n); });
      break;
  }
  c.output_dir = base.output_dir / (axis_name(axis) + "_" + value);
  c.checkpoints = CheckpointPolicy::final_only;
  finalize(c);
  return c;
}

std::vector<AblationRow> run_ablation(const ExperimentConfig& base, Axis axis, const std::vector<std::string>& values) {
  if (values.empty()) throw ConfigError("ablation needs at least one value");
  stage("setup", [&] {
    fs::create_directories(base.output_dir);
    write_text(base.output_dir / "config.json", config_to_json(base));
  });
  const auto corpus = stage("data", [&] { return load_or_generate_corpus(base.data); });
  const auto pretrained = stage("pretrain", [&] { return obtain_pretrained(base, corpus); });

  std::vector<AblationRow> rows;
  for (const auto& value : values) {
    AblationRow row{axis_name(axis), value, std::nullopt, ""};
    try {
      const auto config = with_axis_value(base, axis, value);
      row.result = run_attack(config, corpus, pretrained);
    } catch (const std::exception& e) {
      row.error = e.what();
    }
    rows.push_back(std::move(row));
    write_ablation_csv(rows, base.output_dir / "ablation.csv");
  }
  return rows;
}

void write_ablation_csv(const std::vector<AblationRow>& rows, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << "axis,value,status,ASR,clean_B4,clean_ROUGE_L,clean_CIDEr,poisoned_B4,poisoned_METEOR,poisoned_ROUGE_L,"
         "poisoned_CIDEr,poisoned_VQA,error\n";
  char buf[512];
  for (const auto& row : rows) {
    out << csv_field(row.axis) << "," << csv_field(row.value) << ",";
    if (!row.result) {
      out << "error,,,,,,,,,," << csv_field(row.error) << "\n";
      continue;
    }
    const auto& clean = row.result->backdoored.clean;
    const auto& p = *row.result->backdoored.poisoned;
    std::snprintf(buf, sizeof buf, "ok,%.4f,%.4f,%.4f,%.4f,%.4f,%.4f,%.4f,%.4f,", p.asr.value_or(0.0), clean.b4,
                  clean.rouge_l, clean.cider, p.b4, p.meteor, p.rouge_l, p.cider);
    out << buf;
    if (p.vqa_score) {
      std::snprintf(buf, sizeof buf, "%.4f", *p.vqa_score);
      out << buf;
    }
    out << ",\n";
  }
  if (!out) throw IoError("failed writing " + path.string());
}

ProbeResult run_probe(const ExperimentConfig& config, const fs::path& checkpoint, const ProbeOptions& options) {
  const auto corpus = stage("data", [&] { return load_or_generate_corpus(config.data); });
  const auto model = stage("load", [&] { return load_matching(checkpoint, model_config_for(config, corpus)); });
  const auto target_ids = corpus.vocab.encode(config.poison.target.tokens);
  ProbeResult result;

  stage("saliency", [&] {
    if (options.saliency_images == 0) return;
    const auto dir = config.output_dir / "probe";
    fs::create_directories(dir);
    const auto n = std::min(options.saliency_images, corpus.test.size());
    std::vector<Sample> first(corpus.test.begin(), corpus.test.begin() + static_cast<std::ptrdiff_t>(n));
    const auto stamped = stamp_test_split(first, config.poison.trigger, config.seed);
    std::ofstream rel(dir / "projection_relevance.csv");
    if (!rel) throw IoError("cannot open " + (dir / "projection_relevance.csv").string() + " for writing");
    rel << "image,position,token";
    for (std::size_t q = 0; q < model.config().n_queries; ++q) rel << ",q" << q;
    rel << "\n";
    for (std::size_t i = 0; i < n; ++i) {
      const auto prompt = task_prompt(stamped[i], corpus.vocab, config.task);
      const auto generated = model.generate(stamped[i].image, prompt);
      if (generated.empty()) continue;
      const ProbeTarget target{find_target_position(generated, target_ids).value_or(0), std::nullopt};
      const auto map = saliency_encoder(model, stamped[i].image, prompt, target);
      const auto stem = "saliency_" + std::to_string(i);
      write_pgm(map, dir / (stem + ".pgm"));
      write_grid_csv(map, dir / (stem + ".csv"));
      result.saliency_files.push_back(dir / (stem + ".pgm"));
      const auto relevance = saliency_projection(model, stamped[i].image, prompt, target);
      rel << i << "," << target.position << "," << corpus.vocab.token(map.target_token);
      for (float r : relevance) rel << "," << r;
      rel << "\n";
    }
  });

  stage("nullify", [&] {
    if (options.nullify.empty()) return;
    std::vector<ReportRow> rows;
    for (auto keep : options.nullify) {
      auto r = nullify_and_measure(model, corpus.test, corpus.vocab, config.task, config.poison.trigger,
                                   config.poison.target, keep, config.seed);
      std::vector<Tokens> stripped;
      for (const auto& o : r.outputs) stripped.push_back(strip_target_text(o, config.poison.target));
      auto report = score_outputs(Split::nullified, stripped, corpus.test, config.task);
      report.asr = r.asr;
      rows.push_back({"nullify_" + keep_name(keep), prompt_kind(config), report});
      result.nullified.emplace_back(keep, std::move(r));
    }
    fs::create_directories(config.output_dir);
    append_report(rows, config.output_dir);
  });
  return result;
}

EvalResult run_eval(const ExperimentConfig& config, const fs::path& checkpoint) {
  const auto corpus = stage("data", [&] { return load_or_generate_corpus(config.data); });
  const auto model = stage("load", [&] { return load_matching(checkpoint, model_config_for(config, corpus)); });
  auto result = stage("evaluate", [&] {
    return evaluate(model, corpus.test, corpus.vocab, config.task, eval_options(config));
  });
  stage("report", [&] {
    fs::create_directories(config.output_dir);
    const auto label = checkpoint.stem().string();
    const std::vector<ReportRow> rows{{label, prompt_kind(config), result.clean},
                                      {label, prompt_kind(config), *result.poisoned}};
    write_report_csv(rows, config.output_dir / "eval_report.csv");
    write_report_json(rows, config.output_dir / "eval_report.json");
  });
  return result;
}

}  // namespace bdlab
