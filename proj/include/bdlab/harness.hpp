#pragma once

#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "bdlab/attribution.hpp"
#include "bdlab/metrics.hpp"
#include "bdlab/poison.hpp"
#include "bdlab/training.hpp"

namespace bdlab {

// Environment variable that replaces the configured output directory.
inline constexpr const char* kOutputDirEnv = "BDLAB_OUTPUT_DIR";

struct DataConfig {
  std::size_t n_train = 2000;
  std::size_t n_test = 200;
  std::uint64_t seed = 1;
  // When set, the corpus is loaded from a gen-data directory instead of
  // being generated in memory.
  std::optional<std::filesystem::path> corpus_dir;
};

enum class CheckpointPolicy { every_epoch, final_only };

struct ExperimentConfig {
  Task task = Task::captioning;
  DataConfig data;
  ModelConfig model;
  TrainConfig train;
  PoisonConfig poison;
  std::filesystem::path output_dir = "runs/default";
  // Drives model init, training order, poisoning and trigger placement.
  std::uint64_t seed = 0;
  // Reuse a pretrained checkpoint instead of pretraining.
  std::optional<std::filesystem::path> pretrained;
  CheckpointPolicy checkpoints = CheckpointPolicy::every_epoch;
};

// Propagates the master seed into the sub-configs and validates everything.
// Throws ConfigError.
void finalize(ExperimentConfig& config);

// Strict JSON: unknown keys and wrong types are ConfigErrors naming the key.
ExperimentConfig config_from_json(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);
std::string config_to_json(const ExperimentConfig& config);

// Applies kOutputDirEnv when it is set and non-empty.
void apply_output_override(ExperimentConfig& config);

// A pipeline failure tagged with the stage that raised it.
class StageError : public std::runtime_error {
 public:
  StageError(std::string stage, const std::string& what)
      : std::runtime_error(stage + ": " + what), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

Corpus load_or_generate_corpus(const DataConfig& data);

// Loads config.pretrained, reuses <output_dir>/pretrain.ckpt when its
// recorded pretrain settings match, or pretrains and saves it.
TinyVlm obtain_pretrained(const ExperimentConfig& config, const Corpus& corpus);

struct AttackResult {
  EvalResult control;
  EvalResult backdoored;
  TrainLog backdoor_log;
  std::vector<ReportRow> rows;
};

// pretrain -> poison mixture -> backdoor -> evaluate -> reports. Writes
// config.json, pretrain_losses.csv, losses.csv, report.csv, report.json,
// backdoor.ckpt and checkpoints/ under output_dir.
AttackResult run_attack(const ExperimentConfig& config);
// Same, reusing an already loaded corpus and pretrained model.
AttackResult run_attack(const ExperimentConfig& config, const Corpus& corpus, const TinyVlm& pretrained);

enum class Axis { trigger_style, trigger_size, trigger_location, poison_rate };
Axis parse_axis(const std::string& name);
std::string axis_name(Axis axis);
std::vector<std::string> default_axis_values(Axis axis);
// Copy of base with one axis value applied; throws ConfigError on bad values.
ExperimentConfig with_axis_value(const ExperimentConfig& base, Axis axis, const std::string& value);

struct AblationRow {
  std::string axis, value;
  std::optional<AttackResult> result;
  std::string error;
};

// One attack per value under <output_dir>/<axis>_<value>, sharing one
// pretrained model. Failed runs are recorded and the sweep continues.
// Writes <output_dir>/ablation.csv.
std::vector<AblationRow> run_ablation(const ExperimentConfig& base, Axis axis, const std::vector<std::string>& values);
void write_ablation_csv(const std::vector<AblationRow>& rows, const std::filesystem::path& path);

struct ProbeOptions {
  std::size_t saliency_images = 0;
  std::vector<Keep> nullify;
};

struct ProbeResult {
  std::vector<std::filesystem::path> saliency_files;
  std::vector<std::pair<Keep, NullifyResult>> nullified;
};

// Saliency maps on the first poisoned test images (probing the first target
// token when the model emits it) and nullification rows appended to
// report.csv/json with split "nullified".
ProbeResult run_probe(const ExperimentConfig& config, const std::filesystem::path& checkpoint,
                      const ProbeOptions& options);

// Evaluates a checkpoint on both splits and writes report.csv/json.
EvalResult run_eval(const ExperimentConfig& config, const std::filesystem::path& checkpoint);

}  // namespace bdlab
