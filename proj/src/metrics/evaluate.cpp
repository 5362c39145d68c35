#include <cstdio>
#include <fstream>

#include "bdlab/errors.hpp"
#include "bdlab/metrics.hpp"
#include "json.hpp"

namespace bdlab {

EvalReport score_outputs(Split split, const std::vector<Tokens>& outputs, const std::vector<Sample>& samples, Task task) {
  if (outputs.size() != samples.size()) throw ArgumentError("score_outputs: output and sample counts differ");
  std::vector<std::vector<Tokens>> refs;
  refs.reserve(samples.size());
  for (const auto& s : samples) {
    if (task == Task::captioning) {
      refs.push_back(s.references);
    } else {
      if (!s.qa) throw ArgumentError("sample " + s.id + " has no question");
      refs.push_back({s.qa->answer});
    }
  }
  EvalReport r;
  r.split = split;
  r.n_samples = samples.size();
  r.b4 = bleu4(outputs, refs);
  r.meteor = meteor_lite(outputs, refs);
  r.rouge_l = rouge_l(outputs, refs);
  r.cider = cider(outputs, refs);
  if (task == Task::vqa) {
    double total = 0;
    for (std::size_t i = 0; i < samples.size(); ++i) total += vqa_score(outputs[i], samples[i].qa->annotations);
    r.vqa_score = 100.0 * total / static_cast<double>(samples.size());
  }
  return r;
}

std::vector<Sample> stamp_test_split(const std::vector<Sample>& test, const TriggerSpec& trigger, std::uint64_t seed) {
  validate(trigger);
  const Rng root(seed);
  std::vector<Sample> out = test;
  for (std::size_t i = 0; i < out.size(); ++i) {
    Rng rng = root.split(i);
    out[i].image = stamp_trigger(out[i].image, trigger, rng);
  }
  return out;
}

std::vector<Tokens> generate_outputs(const TinyVlm& model, const std::vector<Sample>& samples, const Vocab& vocab,
                                     Task task) {
  std::vector<Tokens> outputs;
  outputs.reserve(samples.size());
  for (const auto& s : samples) {
    const auto prompt = task == Task::captioning ? s.prompt : vqa_prompt(s.qa.value().question);
    outputs.push_back(vocab.decode(model.generate(s.image, vocab.encode(prompt))));
  }
  return outputs;
}

EvalResult evaluate(const TinyVlm& model, const std::vector<Sample>& test, const Vocab& vocab, Task task,
                    const EvalOptions& options) {
  if (test.empty()) throw ArgumentError("evaluate: empty test set");
  EvalResult result;
  result.clean_outputs = generate_outputs(model, test, vocab, task);
  result.clean = score_outputs(Split::clean, result.clean_outputs, test, task);
  if (!options.trigger) return result;

  const auto stamped = stamp_test_split(test, *options.trigger, options.seed);
  result.poisoned_outputs = generate_outputs(model, stamped, vocab, task);
  std::vector<Tokens> stripped = result.poisoned_outputs;
  if (options.target) {
    for (auto& o : stripped) o = strip_target_text(o, *options.target);
  }
  result.poisoned = score_outputs(Split::poisoned, stripped, test, task);
  if (options.target) result.poisoned->asr = asr(result.poisoned_outputs, *options.target);
  return result;
}

namespace {

std::string fixed(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

std::string fixed(const std::optional<double>& v) { return v ? fixed(*v) : ""; }

nlohmann::json json_number(const std::optional<double>& v) {
  // Rounded like the CSV so both files agree to the printed digit.
  return v ? nlohmann::json(std::stod(fixed(*v))) : nlohmann::json(nullptr);
}

}  // namespace

void write_report_csv(const std::vector<ReportRow>& rows, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << "model,target_kind,split,B4,METEOR,ROUGE_L,CIDEr,VQA,ASR,n\n";
  for (const auto& row : rows) {
    const auto& r = row.report;
    out << row.model << "," << row.target_kind << "," << split_name(r.split) << "," << fixed(r.b4) << ","
        << fixed(r.meteor) << "," << fixed(r.rouge_l) << "," << fixed(r.cider) << "," << fixed(r.vqa_score) << ","
        << fixed(r.asr) << "," << r.n_samples << "\n";
  }
  if (!out) throw IoError("failed writing " + path.string());
}

void write_report_json(const std::vector<ReportRow>& rows, const std::filesystem::path& path) {
  auto doc = nlohmann::json::array();
  for (const auto& row : rows) {
    const auto& r = row.report;
    doc.push_back({{"model", row.model},
                   {"target_kind", row.target_kind},
                   {"split", split_name(r.split)},
                   {"B4", json_number(r.b4)},
                   {"METEOR", json_number(r.meteor)},
                   {"ROUGE_L", json_number(r.rouge_l)},
                   {"CIDEr", json_number(r.cider)},
                   {"VQA", json_number(r.vqa_score)},
                   {"ASR", json_number(r.asr)},
                   {"n", r.n_samples}});
  }
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << doc.dump(2) << "\n";
  if (!out) throw IoError("failed writing " + path.string());
}

std::vector<ReportRow> read_report_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<ReportRow> rows;
  try {
    const auto doc = nlohmann::json::parse(in);
    const auto optional_number = [](const nlohmann::json& v) {
      return v.is_null() ? std::optional<double>{} : std::optional<double>{v.get<double>()};
    };
    for (const auto& j : doc) {
      ReportRow row;
      row.model = j.at("model").get<std::string>();
      row.target_kind = j.at("target_kind").get<std::string>();
      auto& r = row.report;
      r.split = parse_split(j.at("split").get<std::string>());
      r.b4 = j.at("B4").get<double>();
      r.meteor = j.at("METEOR").get<double>();
      r.rouge_l = j.at("ROUGE_L").get<double>();
      r.cider = j.at("CIDEr").get<double>();
      r.vqa_score = optional_number(j.at("VQA"));
      r.asr = optional_number(j.at("ASR"));
      r.n_samples = j.at("n").get<std::size_t>();
      rows.push_back(std::move(row));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("malformed report " + path.string() + ": " + e.what(), 1);
  }
  return rows;
}

void append_report(const std::vector<ReportRow>& rows, const std::filesystem::path& dir) {
  std::vector<ReportRow> all;
  if (std::filesystem::exists(dir / "report.json")) all = read_report_json(dir / "report.json");
  all.insert(all.end(), rows.begin(), rows.end());
  write_report_json(all, dir / "report.json");
  write_report_csv(all, dir / "report.csv");
}

}  // namespace bdlab
