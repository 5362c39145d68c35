#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "bdlab/dataset.hpp"
#include "bdlab/model.hpp"
#include "bdlab/poison.hpp"
#include "bdlab/training.hpp"

namespace bdlab {

// Removes every contiguous occurrence of the target block, scanning left to
// right without overlap.
Tokens strip_target_text(const Tokens& tokens, const TargetText& target);
bool contains_target(const Tokens& tokens, const TargetText& target);

// Fraction of outputs that contain the target block. Throws ArgumentError on
// an empty list.
double asr(const std::vector<Tokens>& outputs, const TargetText& target);

// Caption metrics on the x100 scale. references[i] holds the references for
// candidates[i]; each list must be non-empty.
double bleu4(const std::vector<Tokens>& candidates, const std::vector<std::vector<Tokens>>& references);

// Corpus-level pieces of BLEU: clipped precisions after the zero-count floor
// 1/(2*candidate n-gram count), lengths and brevity penalty.
struct BleuDetail {
  std::array<double, 4> precisions{};
  std::size_t candidate_length = 0, reference_length = 0;
  double brevity_penalty = 0;
  double score = 0;
};
BleuDetail bleu4_detail(const std::vector<Tokens>& candidates, const std::vector<std::vector<Tokens>>& references);

double rouge_l(const std::vector<Tokens>& candidates, const std::vector<std::vector<Tokens>>& references);
// Exact-match unigram tier of METEOR only. Tokens align greedily left to
// right, each reference token used once.
struct MeteorAlignment {
  std::size_t matches = 0, chunks = 0;
};
MeteorAlignment meteor_align(const Tokens& candidate, const Tokens& reference);
// Fmean * (1 - 0.5 (chunks/matches)^3) on the 0..1 scale.
double meteor_pair(const Tokens& candidate, const Tokens& reference, const MeteorAlignment& alignment);
double meteor_lite(const std::vector<Tokens>& candidates, const std::vector<std::vector<Tokens>>& references);
// Needs at least two candidates for the idf table.
double cider(const std::vector<Tokens>& candidates, const std::vector<std::vector<Tokens>>& references);

// min(matches / 3, 1) against exactly ten annotations.
double vqa_score(const Tokens& prediction, const std::vector<std::string>& annotations);

// Longest common subsequence length, exposed for the probes.
std::size_t lcs_length(const Tokens& a, const Tokens& b);

enum class Split { clean, poisoned, nullified };
std::string split_name(Split split);
Split parse_split(const std::string& name);

struct EvalReport {
  Split split = Split::clean;
  double b4 = 0, meteor = 0, rouge_l = 0, cider = 0;
  std::optional<double> vqa_score;
  std::optional<double> asr;
  std::size_t n_samples = 0;
};

// Quality metrics of one split; VQA score is filled when every sample has
// annotations and the task is VQA.
EvalReport score_outputs(Split split, const std::vector<Tokens>& outputs, const std::vector<Sample>& samples, Task task);

struct EvalOptions {
  // Absent: only the clean split is evaluated.
  std::optional<TriggerSpec> trigger;
  // Absent: no ASR and no stripping on the poisoned split.
  std::optional<TargetText> target;
  std::uint64_t seed = 0;
};

struct EvalResult {
  EvalReport clean;
  std::optional<EvalReport> poisoned;
  std::vector<Tokens> clean_outputs;
  std::vector<Tokens> poisoned_outputs;
};

// Test images stamped for the poisoned split; references stay clean.
std::vector<Sample> stamp_test_split(const std::vector<Sample>& test, const TriggerSpec& trigger, std::uint64_t seed);

// Greedy outputs for every sample under the task's prompt.
std::vector<Tokens> generate_outputs(const TinyVlm& model, const std::vector<Sample>& samples, const Vocab& vocab,
                                     Task task);

EvalResult evaluate(const TinyVlm& model, const std::vector<Sample>& test, const Vocab& vocab, Task task,
                    const EvalOptions& options);

struct ReportRow {
  std::string model;
  std::string target_kind;
  EvalReport report;
};

// report.csv: model,target_kind,split,B4,METEOR,ROUGE_L,CIDEr,VQA,ASR,n with
// absent values left empty. report.json carries the same rows with nulls.
void write_report_csv(const std::vector<ReportRow>& rows, const std::filesystem::path& path);
void write_report_json(const std::vector<ReportRow>& rows, const std::filesystem::path& path);
std::vector<ReportRow> read_report_json(const std::filesystem::path& path);
// Adds rows to dir/report.json and rewrites dir/report.csv from it.
void append_report(const std::vector<ReportRow>& rows, const std::filesystem::path& dir);

}  // namespace bdlab
