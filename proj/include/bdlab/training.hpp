#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "bdlab/dataset.hpp"
#include "bdlab/model.hpp"

namespace bdlab {

enum class Task { captioning, vqa };

Task parse_task(const std::string& name);
std::string task_name(Task task);

struct LossWeights {
  float lm = 1.0f;
  float sp = 1.0f;
};

struct TrainConfig {
  std::size_t pretrain_epochs = 60;
  std::size_t backdoor_epochs = 10;
  std::size_t batch_size = 16;
  float pretrain_lr = 1e-3f;
  float backdoor_lr = 5e-4f;
  std::uint64_t seed = 0;
  LossWeights weights;
  // Copies of each language-prior phrase mixed into every pretrain epoch.
  std::size_t prior_repeats = 20;
  // Fraction of pretrain items that carry a mention: one projection slot is
  // replaced by the mean token embedding of a language-prior phrase and the
  // phrase is spliced into the reference at a uniform position.
  double mention_rate = 0.075;
};

// Throws ConfigError on a zero batch size or negative weights.
void validate(const TrainConfig& config);

struct LossBreakdown {
  double lm_clean = 0, lm_poisoned = 0, sp_clean = 0, sp_poisoned = 0, total = 0;
};

// One teacher-forced sequence. `sample` is null for language-prior items,
// which see an all-zero projection prefix and no prompt.
struct TrainItem {
  const Sample* sample = nullptr;
  std::vector<TokenId> prompt;
  std::vector<TokenId> output;
  bool poisoned = false;
  // Non-empty for mention items: these ids are averaged into projection row
  // mention_slot.
  std::vector<TokenId> mention;
  std::size_t mention_slot = 0;
};

// Prompt and reference ids for one sample. Captioning picks reference
// (epoch + index) mod |references|; VQA uses the question prompt and answer.
TrainItem make_item(const Sample& sample, std::size_t index, const Vocab& vocab, Task task, std::size_t epoch);
std::vector<TrainItem> make_items(const std::vector<Sample>& samples, const Vocab& vocab, std::span<const Task> tasks,
                                  std::size_t epoch);
std::vector<TrainItem> prior_items(const Vocab& vocab, std::size_t repeats);

// Returns the projection prefix for a sample; lets training reuse frozen
// encoder outputs.
using ProjectionFn = std::function<Tensor(const Sample&)>;
ProjectionFn direct_projection(const TinyVlm& model);

struct LossValue {
  Tensor value;
  LossBreakdown parts;
};

LossValue lm_loss(const TinyVlm& model, std::span<const TrainItem> batch, const ProjectionFn& project);
LossValue sp_loss(const TinyVlm& model, std::span<const TrainItem> batch, const ProjectionFn& project);
LossValue total_loss(const TinyVlm& model, std::span<const TrainItem> batch, const ProjectionFn& project,
                     LossWeights weights);

struct TrainLog {
  std::vector<LossBreakdown> epochs;
};

// Called after every epoch with the 0-based epoch index and its mean losses.
using EpochHook = std::function<void(std::size_t, const LossBreakdown&)>;

// Writes epoch,lm_clean,lm_poisoned,sp_clean,sp_poisoned,total.
void write_losses_csv(const TrainLog& log, const std::filesystem::path& path);

// Cosine decay from pretrain_lr at epoch 0 towards 10% of it.
float pretrain_lr_at(const TrainConfig& config, std::size_t epoch);

// Clean pretraining on captioning and VQA jointly plus the language prior.
TrainLog train_pretrain(TinyVlm& model, const std::vector<Sample>& clean_train, const Vocab& vocab,
                        const TrainConfig& config, const EpochHook& hook = {});

// Adaptor-only training on a clean/poisoned mixture with the combined loss.
// When checkpoint_dir is set, backdoor_epoch<k>.ckpt is written per epoch.
TrainLog train_backdoor(TinyVlm& model, const std::vector<Sample>& mixture, const Vocab& vocab, Task task,
                        const TrainConfig& config,
                        const std::optional<std::filesystem::path>& checkpoint_dir = std::nullopt,
                        const EpochHook& hook = {});

}  // namespace bdlab
