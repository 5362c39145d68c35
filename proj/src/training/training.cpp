#include <array>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>
#include <optional>
#include <unordered_map>

#include "bdlab/errors.hpp"
#include "bdlab/optim.hpp"
#include "bdlab/training.hpp"

namespace bdlab {

Task parse_task(const std::string& name) {
  if (name == "captioning") return Task::captioning;
  if (name == "vqa") return Task::vqa;
  throw ConfigError("unknown task '" + name + "'");
}

std::string task_name(Task task) { return task == Task::captioning ? "captioning" : "vqa"; }

void validate(const TrainConfig& c) {
  if (c.batch_size == 0) throw ConfigError("batch_size must be at least 1");
  if (!(c.weights.lm >= 0.0f) || !(c.weights.sp >= 0.0f)) throw ConfigError("loss weights must be non-negative");
  if (!(c.mention_rate >= 0.0 && c.mention_rate <= 1.0)) {
    throw ConfigError("mention_rate must be in [0, 1]");
  }
  if (!(c.pretrain_lr > 0.0f) || !(c.backdoor_lr > 0.0f)) throw ConfigError("learning rates must be positive");
}

TrainItem make_item(const Sample& sample, std::size_t index, const Vocab& vocab, Task task, std::size_t epoch) {
  TrainItem item;
  item.sample = &sample;
  item.poisoned = sample.poisoned;
  if (task == Task::captioning) {
    if (sample.references.empty()) throw ArgumentError("sample " + sample.id + " has no references");
    item.prompt = vocab.encode(sample.prompt);
    item.output = vocab.encode(sample.references[(epoch + index) % sample.references.size()]);
  } else {
    if (!sample.qa) throw ArgumentError("sample " + sample.id + " has no question");
    item.prompt = vocab.encode(vqa_prompt(sample.qa->question));
    item.output = vocab.encode(sample.qa->answer);
  }
  return item;
}

std::vector<TrainItem> make_items(const std::vector<Sample>& samples, const Vocab& vocab, std::span<const Task> tasks,
                                  std::size_t epoch) {
  std::vector<TrainItem> items;
  items.reserve(samples.size() * tasks.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    for (auto task : tasks) items.push_back(make_item(samples[i], i, vocab, task, epoch));
  }
  return items;
}

std::vector<TrainItem> prior_items(const Vocab& vocab, std::size_t repeats) {
  std::vector<TrainItem> items;
  for (std::size_t r = 0; r < repeats; ++r) {
    for (const auto& phrase : language_prior()) items.push_back({nullptr, {}, vocab.encode(phrase), false, {}, 0});
  }
  return items;
}

ProjectionFn direct_projection(const TinyVlm& model) {
  return [&model](const Sample& s) { return model.adapt(model.encode_image(s.image)); };
}

namespace {

struct SequenceLoss {
  Tensor lm;
  Tensor sp;  // mean cosine, not yet negated
};

Tensor with_mention(const Tensor& proj, const TrainItem& item, const Tensor& table) {
  const auto n = item.mention.size();
  const auto rows = proj.rows();
  const auto average = Tensor::full({1, n}, 1.0f / static_cast<float>(n));
  std::vector<Tensor> parts;
  if (item.mention_slot > 0) parts.push_back(slice_rows(proj, 0, item.mention_slot));
  parts.push_back(matmul(average, gather_rows(table, item.mention)));
  if (item.mention_slot + 1 < rows) parts.push_back(slice_rows(proj, item.mention_slot + 1, rows - item.mention_slot - 1));
  return concat_rows(parts);
}

Tensor sum_all(const std::vector<Tensor>& parts) {
  Tensor acc = parts.front();
  for (std::size_t i = 1; i < parts.size(); ++i) acc = add(acc, parts[i]);
  return acc;
}

// Per-item losses with the projection prefix computed once per sample.
std::vector<SequenceLoss> sequence_losses(const TinyVlm& model, std::span<const TrainItem> batch,
                                          const ProjectionFn& project, bool want_lm, bool want_sp) {
  std::unordered_map<const Sample*, Tensor> prefix;
  Tensor zero_prefix;
  std::vector<SequenceLoss> out;
  out.reserve(batch.size());
  for (const auto& item : batch) {
    Tensor proj;
    if (item.sample == nullptr) {
      if (!zero_prefix.defined()) zero_prefix = Tensor::zeros({model.config().n_queries, model.config().d_model});
      proj = zero_prefix;
    } else {
      auto it = prefix.find(item.sample);
      if (it == prefix.end()) it = prefix.emplace(item.sample, project(*item.sample)).first;
      proj = it->second;
    }
    if (!item.mention.empty()) proj = with_mention(proj, item, model.embedding());
    auto logits = model.decode(proj, item.prompt, item.output);
    std::vector<TokenId> targets = item.output;
    targets.push_back(Vocab::kEos);
    SequenceLoss s;
    if (want_lm) s.lm = cross_entropy(logits, targets);
    if (want_sp) {
      const auto& table = model.embedding();
      s.sp = mean(cosine_rows(expected_embedding(logits, table), embed_ground_truth(targets, table)));
    }
    out.push_back(std::move(s));
  }
  return out;
}

// Mean over the clean subset plus mean over the poisoned subset; an empty
// subset contributes 0.
struct SplitMean {
  std::optional<Tensor> clean, poisoned;
};

SplitMean split_mean(std::span<const TrainItem> batch, const std::vector<SequenceLoss>& seq, Tensor SequenceLoss::*field) {
  std::vector<Tensor> clean, poisoned;
  for (std::size_t i = 0; i < batch.size(); ++i) (batch[i].poisoned ? poisoned : clean).push_back(seq[i].*field);
  SplitMean m;
  if (!clean.empty()) m.clean = scale(sum_all(clean), 1.0f / static_cast<float>(clean.size()));
  if (!poisoned.empty()) m.poisoned = scale(sum_all(poisoned), 1.0f / static_cast<float>(poisoned.size()));
  return m;
}

double value_of(const std::optional<Tensor>& t) { return t ? static_cast<double>(t->item()) : 0.0; }

LossValue combine(std::span<const TrainItem> batch, const std::vector<SequenceLoss>& seq, LossWeights w, bool with_lm,
                  bool with_sp) {
  if (batch.empty()) throw ArgumentError("loss over an empty batch");
  std::vector<Tensor> terms;
  LossValue out;
  if (with_lm) {
    auto m = split_mean(batch, seq, &SequenceLoss::lm);
    out.parts.lm_clean = value_of(m.clean);
    out.parts.lm_poisoned = value_of(m.poisoned);
    for (const auto* t : {&m.clean, &m.poisoned}) {
      if (*t) terms.push_back(scale(**t, w.lm));
    }
  }
  if (with_sp) {
    auto m = split_mean(batch, seq, &SequenceLoss::sp);
    out.parts.sp_clean = -value_of(m.clean);
    out.parts.sp_poisoned = -value_of(m.poisoned);
    for (const auto* t : {&m.clean, &m.poisoned}) {
      if (*t) terms.push_back(scale(**t, -w.sp));
    }
  }
  out.value = sum_all(terms);
  out.parts.total = w.lm * (out.parts.lm_clean + out.parts.lm_poisoned) +
                    w.sp * (out.parts.sp_clean + out.parts.sp_poisoned);
  return out;
}

}  // namespace

LossValue lm_loss(const TinyVlm& model, std::span<const TrainItem> batch, const ProjectionFn& project) {
  return combine(batch, sequence_losses(model, batch, project, true, false), {1.0f, 0.0f}, true, false);
}

LossValue sp_loss(const TinyVlm& model, std::span<const TrainItem> batch, const ProjectionFn& project) {
  return combine(batch, sequence_losses(model, batch, project, false, true), {0.0f, 1.0f}, false, true);
}

LossValue total_loss(const TinyVlm& model, std::span<const TrainItem> batch, const ProjectionFn& project,
                     LossWeights weights) {
  const bool with_sp = weights.sp != 0.0f;
  return combine(batch, sequence_losses(model, batch, project, true, with_sp), weights, true, with_sp);
}

void write_losses_csv(const TrainLog& log, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << "epoch,lm_clean,lm_poisoned,sp_clean,sp_poisoned,total\n";
  out.precision(9);
  for (std::size_t e = 0; e < log.epochs.size(); ++e) {
    const auto& b = log.epochs[e];
    out << e + 1 << "," << b.lm_clean << "," << b.lm_poisoned << "," << b.sp_clean << "," << b.sp_poisoned << ","
        << b.total << "\n";
  }
  if (!out) throw IoError("failed writing " + path.string());
}

namespace {

LossBreakdown run_epoch(TinyVlm& model, Adam& adam, std::vector<TrainItem>& items, const ProjectionFn& project,
                        LossWeights weights, std::size_t batch_size, Rng rng, std::size_t epoch) {
  // Shuffle whole groups of items that share a sample so each image is
  // encoded once per epoch.
  std::vector<std::pair<std::size_t, std::size_t>> groups;
  for (std::size_t i = 0; i < items.size();) {
    std::size_t j = i + 1;
    while (j < items.size() && items[i].sample != nullptr && items[j].sample == items[i].sample) ++j;
    groups.emplace_back(i, j);
    i = j;
  }
  shuffle(groups, rng);
  std::vector<TrainItem> order;
  order.reserve(items.size());
  for (auto [b, e] : groups) order.insert(order.end(), items.begin() + static_cast<std::ptrdiff_t>(b), items.begin() + static_cast<std::ptrdiff_t>(e));
  items = std::move(order);
  LossBreakdown acc;
  std::size_t batches = 0;
  for (std::size_t start = 0; start < items.size(); start += batch_size) {
    const std::size_t n = std::min(batch_size, items.size() - start);
    std::span<const TrainItem> batch(items.data() + start, n);
    adam.zero_grad();
    const auto diverged = [&] { return TrainingError("non-finite loss in epoch " + std::to_string(epoch + 1)); };
    LossValue loss;
    try {
      loss = total_loss(model, batch, project, weights);
    } catch (const NumericError&) {
      throw diverged();
    }
    if (!std::isfinite(loss.parts.total)) throw diverged();
    loss.value.backward();
    adam.step();
    acc.lm_clean += loss.parts.lm_clean;
    acc.lm_poisoned += loss.parts.lm_poisoned;
    acc.sp_clean += loss.parts.sp_clean;
    acc.sp_poisoned += loss.parts.sp_poisoned;
    acc.total += loss.parts.total;
    ++batches;
  }
  const double inv = batches ? 1.0 / static_cast<double>(batches) : 0.0;
  acc.lm_clean *= inv;
  acc.lm_poisoned *= inv;
  acc.sp_clean *= inv;
  acc.sp_poisoned *= inv;
  acc.total *= inv;
  return acc;
}

}  // namespace

float pretrain_lr_at(const TrainConfig& config, std::size_t epoch) {
  constexpr double kFloor = 0.1;
  const double progress = static_cast<double>(epoch) / static_cast<double>(std::max<std::size_t>(config.pretrain_epochs, 1));
  const double factor = kFloor + (1.0 - kFloor) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
  return static_cast<float>(config.pretrain_lr * factor);
}

TrainLog train_pretrain(TinyVlm& model, const std::vector<Sample>& clean_train, const Vocab& vocab,
                        const TrainConfig& config, const EpochHook& hook) {
  validate(config);
  if (clean_train.empty()) throw ArgumentError("train_pretrain: empty training set");
  model.set_phase(Phase::pretrain);
  Adam adam(model.tensors(), {.lr = config.pretrain_lr});
  const auto project = direct_projection(model);
  const std::array tasks{Task::captioning, Task::vqa};
  const auto prior = prior_items(vocab, config.prior_repeats);
  Rng root = Rng(config.seed).split(11);
  TrainLog log;
  for (std::size_t epoch = 0; epoch < config.pretrain_epochs; ++epoch) {
    adam.set_lr(pretrain_lr_at(config, epoch));
    auto items = make_items(clean_train, vocab, tasks, epoch);
    Rng pick = Rng(config.seed).split(13).split(epoch);
    for (auto& item : items) {
      if (pick.uniform() >= config.mention_rate) continue;
      item.mention = vocab.encode(language_prior()[pick.uniform_int(language_prior().size())]);
      item.mention_slot = pick.uniform_int(model.config().n_queries);
      const auto at = static_cast<std::ptrdiff_t>(pick.uniform_int(item.output.size() + 1));
      item.output.insert(item.output.begin() + at, item.mention.begin(), item.mention.end());
    }
    items.insert(items.end(), prior.begin(), prior.end());
    log.epochs.push_back(
        run_epoch(model, adam, items, project, {config.weights.lm, 0.0f}, config.batch_size, root.split(epoch), epoch));
    if (hook) hook(epoch, log.epochs.back());
  }
  return log;
}

TrainLog train_backdoor(TinyVlm& model, const std::vector<Sample>& mixture, const Vocab& vocab, Task task,
                        const TrainConfig& config, const std::optional<std::filesystem::path>& checkpoint_dir,
                        const EpochHook& hook) {
  validate(config);
  if (mixture.empty()) throw ArgumentError("train_backdoor: empty mixture");
  model.set_phase(Phase::backdoor);
  Adam adam(model.tensors(), {.lr = config.backdoor_lr});

  // The encoder is frozen, so its outputs are computed once per image.
  std::unordered_map<const Sample*, Tensor> encoded;
  const ProjectionFn project = [&](const Sample& s) {
    auto it = encoded.find(&s);
    if (it == encoded.end()) {
      NoGradGuard no_grad;
      it = encoded.emplace(&s, model.encode_image(s.image)).first;
    }
    return model.adapt(it->second);
  };
  if (checkpoint_dir) std::filesystem::create_directories(*checkpoint_dir);

  const std::array tasks{task};
  Rng root = Rng(config.seed).split(12);
  TrainLog log;
  for (std::size_t epoch = 0; epoch < config.backdoor_epochs; ++epoch) {
    auto items = make_items(mixture, vocab, tasks, epoch);
    log.epochs.push_back(
        run_epoch(model, adam, items, project, config.weights, config.batch_size, root.split(epoch), epoch));
    if (hook) hook(epoch, log.epochs.back());
    if (checkpoint_dir) model.save(*checkpoint_dir / ("backdoor_epoch" + std::to_string(epoch + 1) + ".ckpt"));
  }
  return log;
}

}  // namespace bdlab
