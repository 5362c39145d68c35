#include <doctest.h>

#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "bdlab/errors.hpp"
#include "bdlab/poison.hpp"
#include "bdlab/training.hpp"
#include "gradcheck.hpp"
#include "tempdir.hpp"

using namespace bdlab;
using bdlab::testing::grad_check;
using bdlab::testing::TempDir;

namespace {

const Corpus& small_corpus() {
  static const Corpus corpus = generate_corpus(12, 4, 3);
  return corpus;
}

ModelConfig config_for(const Vocab& vocab) {
  ModelConfig c;
  c.vocab_size = vocab.size();
  c.init_seed = 5;
  return c;
}

std::vector<float> copy_values(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

void fill(Tensor t, float v) { std::fill(t.values().begin(), t.values().end(), v); }

// Two clean and two poisoned captioning items over distinct samples.
std::vector<TrainItem> mixed_batch(const Corpus& corpus) {
  std::vector<TrainItem> batch;
  for (std::size_t i = 0; i < 4; ++i) {
    auto item = make_item(corpus.train[i], i, corpus.vocab, Task::captioning, 0);
    item.poisoned = i % 2 == 1;
    batch.push_back(item);
  }
  return batch;
}

double lse(const std::vector<double>& x) {
  double m = -std::numeric_limits<double>::infinity();
  for (double v : x) m = std::max(m, v);
  double s = 0;
  for (double v : x) s += std::exp(v - m);
  return m + std::log(s);
}

}  // namespace

TEST_CASE("uniform logits give ln V per sequence and empty subsets give 0") {
  const auto& corpus = small_corpus();
  TinyVlm model(config_for(corpus.vocab));
  // Zero embeddings and bias make every logit row uniform.
  fill(model.param("decoder.embedding"), 0.0f);
  const auto project = direct_projection(model);
  const double ln_v = std::log(static_cast<double>(corpus.vocab.size()));

  auto batch = mixed_batch(corpus);
  auto mixed = lm_loss(model, batch, project);
  CHECK(mixed.parts.lm_clean == doctest::Approx(ln_v).epsilon(1e-6));
  CHECK(mixed.parts.lm_poisoned == doctest::Approx(ln_v).epsilon(1e-6));
  CHECK(mixed.value.item() == doctest::Approx(2 * ln_v).epsilon(1e-6));

  for (auto& item : batch) item.poisoned = false;
  auto clean = lm_loss(model, batch, project);
  CHECK(clean.parts.lm_poisoned == 0.0);
  CHECK(clean.value.item() == doctest::Approx(ln_v).epsilon(1e-6));
}

TEST_CASE("two-position cross-entropy matches a log-sum-exp oracle") {
  const auto& corpus = small_corpus();
  TinyVlm model(config_for(corpus.vocab));
  fill(model.param("decoder.embedding"), 0.0f);
  auto bias = model.param("decoder.lm_bias");
  std::vector<double> b(bias.numel());
  for (std::size_t v = 0; v < b.size(); ++v) b[v] = bias.values()[v] = 0.1f * static_cast<float>(v % 7) - 0.2f;

  const TokenId word = 7;
  std::vector<TrainItem> batch{{&corpus.train[0], corpus.vocab.encode(corpus.train[0].prompt), {word}, false, {}, 0}};
  auto loss = lm_loss(model, batch, direct_projection(model));
  const double z = lse(b);
  const double oracle = ((z - b[word]) + (z - b[Vocab::kEos])) / 2.0;
  CHECK(std::abs(loss.value.item() - oracle) < 1e-6);
}

TEST_CASE("sp loss range and concentration limit") {
  const auto& corpus = small_corpus();
  TinyVlm model(config_for(corpus.vocab));
  auto batch = mixed_batch(corpus);
  auto sp = sp_loss(model, batch, direct_projection(model));
  CHECK(sp.parts.sp_clean >= -1.0);
  CHECK(sp.parts.sp_clean <= 1.0);
  CHECK(sp.parts.sp_poisoned >= -1.0);
  CHECK(sp.parts.sp_poisoned <= 1.0);
  CHECK(sp.value.item() >= -2.0f);
  CHECK(sp.value.item() <= 2.0f);

  // Empty outputs target eos alone; a dominant eos bias makes the
  // prediction confident and correct.
  model.param("decoder.lm_bias").values()[Vocab::kEos] = 1000.0f;
  std::vector<TrainItem> eos_only{{&corpus.train[0], {}, {}, false, {}, 0}, {&corpus.train[1], {}, {}, true, {}, 0}};
  auto sure = sp_loss(model, eos_only, direct_projection(model));
  CHECK(sure.parts.sp_clean == doctest::Approx(-1.0).epsilon(1e-3));
  CHECK(sure.parts.sp_poisoned == doctest::Approx(-1.0).epsilon(1e-3));
}

TEST_CASE("sp loss matches a dense weighted-sum oracle") {
  const auto& corpus = small_corpus();
  TinyVlm model(config_for(corpus.vocab));
  const auto& s = corpus.train[2];
  std::vector<TrainItem> batch{{&s, corpus.vocab.encode(s.prompt), {9}, false, {}, 0}};
  const auto project = direct_projection(model);
  auto sp = sp_loss(model, batch, project);

  auto logits = model.decode(project(s), batch[0].prompt, batch[0].output);
  const auto& table = model.embedding();
  const std::vector<TokenId> targets{9, Vocab::kEos};
  const std::size_t V = table.rows(), d = table.cols();
  double cos_sum = 0;
  for (std::size_t r = 0; r < 2; ++r) {
    std::vector<double> row(V);
    for (std::size_t v = 0; v < V; ++v) row[v] = logits.at(r, v);
    const double z = lse(row);
    double dot = 0, nu = 0, ne = 0;
    for (std::size_t c = 0; c < d; ++c) {
      double mix = 0;
      for (std::size_t v = 0; v < V; ++v) mix += std::exp(row[v] - z) * table.at(v, c);
      const double e = table.at(static_cast<std::size_t>(targets[r]), c);
      dot += mix * e;
      nu += mix * mix;
      ne += e * e;
    }
    cos_sum += dot / (std::sqrt(nu) * std::sqrt(ne));
  }
  CHECK(std::abs(sp.value.item() - (-cos_sum / 2.0)) < 1e-6);
}

TEST_CASE("total loss combination") {
  const auto& corpus = small_corpus();
  TinyVlm model(config_for(corpus.vocab));
  const auto project = direct_projection(model);
  auto batch = mixed_batch(corpus);

  auto lm = lm_loss(model, batch, project);
  auto lm_only = total_loss(model, batch, project, {1.0f, 0.0f});
  CHECK(lm_only.value.item() == lm.value.item());

  auto sp = sp_loss(model, batch, project);
  auto both = total_loss(model, batch, project, {1.0f, 1.0f});
  const auto& p = both.parts;
  CHECK(p.total == doctest::Approx(p.lm_clean + p.lm_poisoned + p.sp_clean + p.sp_poisoned).epsilon(1e-12));
  CHECK(both.value.item() == doctest::Approx(lm.value.item() + sp.value.item()).epsilon(1e-5));
  CHECK(static_cast<double>(both.value.item()) == doctest::Approx(p.total).epsilon(1e-5));
}

TEST_CASE("total-loss gradient is the sum of component gradients") {
  const auto& corpus = small_corpus();
  TinyVlm model(config_for(corpus.vocab));
  const auto project = direct_projection(model);
  auto batch = mixed_batch(corpus);
  auto probe = model.param("adaptor.queries");
  auto grad_of = [&](auto loss_fn) {
    for (auto& t : model.tensors()) std::fill(t.grad().begin(), t.grad().end(), 0.0f);
    loss_fn().value.backward();
    return std::vector<float>(probe.grad().begin(), probe.grad().end());
  };
  auto g_lm = grad_of([&] { return lm_loss(model, batch, project); });
  auto g_sp = grad_of([&] { return sp_loss(model, batch, project); });
  auto g_total = grad_of([&] { return total_loss(model, batch, project, {1.0f, 1.0f}); });
  double err = 0, norm = 0;
  for (std::size_t i = 0; i < g_total.size(); ++i) {
    err = std::max(err, std::abs(static_cast<double>(g_total[i]) - g_lm[i] - g_sp[i]));
    norm = std::max(norm, std::abs(static_cast<double>(g_total[i])));
  }
  CHECK(norm > 0.0);
  CHECK(err <= 1e-5 * std::max(1.0, norm));

  std::vector<std::pair<std::size_t, std::size_t>> picks;
  for (std::size_t i = 0; i < 8; ++i) picks.emplace_back(0, i * 61 % probe.numel());
  auto r = grad_check(
      {probe}, [&] { return total_loss(model, batch, project, {1.0f, 1.0f}).value; }, 1e-2, picks);
  CHECK(r.max_rel_error <= 1e-2);
}

TEST_CASE("a mention item sees the phrase mean embedding in its slot") {
  const auto& corpus = small_corpus();
  TinyVlm model(config_for(corpus.vocab));
  auto item = make_item(corpus.train[0], 0, corpus.vocab, Task::captioning, 0);
  const auto phrase = corpus.vocab.encode(language_prior()[3]);
  REQUIRE(phrase.size() > 1);
  item.mention = phrase;
  item.output.insert(item.output.begin() + 2, phrase.begin(), phrase.end());
  const auto d = model.config().d_model;
  const auto table = copy_values(model.embedding());

  for (std::size_t slot : {std::size_t{0}, std::size_t{3}, model.config().n_queries - 1}) {
    item.mention_slot = slot;
    auto spliced = [&](const Sample& s) {
      auto proj = copy_values(model.adapt(model.encode_image(s.image)));
      for (std::size_t c = 0; c < d; ++c) {
        double acc = 0;
        for (auto id : phrase) acc += table[static_cast<std::size_t>(id) * d + c];
        proj[slot * d + c] = static_cast<float>(acc / static_cast<double>(phrase.size()));
      }
      return Tensor::from({model.config().n_queries, d}, proj);
    };
    TrainItem plain = item;
    plain.mention.clear();
    const std::vector<TrainItem> with{item}, without{plain};
    const double got = lm_loss(model, with, direct_projection(model)).parts.lm_clean;
    const double want = lm_loss(model, without, spliced).parts.lm_clean;
    CHECK(got == doctest::Approx(want).epsilon(1e-5));
  }

  TrainConfig tc;
  tc.mention_rate = 1.5;
  CHECK_THROWS_AS(validate(tc), ConfigError);
}

TEST_CASE("make_item picks references round-robin") {
  const auto& corpus = small_corpus();
  const auto& s = corpus.train[0];
  REQUIRE(s.references.size() >= 2);
  auto a = make_item(s, 0, corpus.vocab, Task::captioning, 0);
  auto b = make_item(s, 0, corpus.vocab, Task::captioning, 1);
  CHECK(a.output == corpus.vocab.encode(s.references[0]));
  CHECK(b.output == corpus.vocab.encode(s.references[1]));
  auto q = make_item(s, 0, corpus.vocab, Task::vqa, 0);
  CHECK(q.output == corpus.vocab.encode(s.qa->answer));
  CHECK(q.prompt == corpus.vocab.encode(vqa_prompt(s.qa->question)));
}

TEST_CASE("pretraining is deterministic and beats the uniform baseline") {
  const auto& corpus = small_corpus();
  TrainConfig tc;
  tc.pretrain_epochs = 3;
  tc.batch_size = 8;
  tc.prior_repeats = 1;
  tc.seed = 4;
  TinyVlm a(config_for(corpus.vocab)), b(config_for(corpus.vocab));
  auto la = train_pretrain(a, corpus.train, corpus.vocab, tc);
  auto lb = train_pretrain(b, corpus.train, corpus.vocab, tc);
  REQUIRE(la.epochs.size() == 3);
  for (std::size_t e = 0; e < 3; ++e) CHECK(la.epochs[e].lm_clean == lb.epochs[e].lm_clean);
  for (std::size_t i = 0; i < a.params().size(); ++i) {
    CHECK(copy_values(a.params()[i].tensor) == copy_values(b.params()[i].tensor));
  }
  CHECK(la.epochs.back().lm_clean < std::log(static_cast<double>(corpus.vocab.size())));
  CHECK(la.epochs.back().lm_clean < la.epochs.front().lm_clean);
}

TEST_CASE("backdoor training updates only the adaptor and writes checkpoints") {
  const auto& corpus = small_corpus();
  TinyVlm model(config_for(corpus.vocab));
  std::vector<std::vector<float>> before;
  for (const auto& p : model.params()) before.push_back(copy_values(p.tensor));

  PoisonConfig pc;
  pc.rate = 0.25;
  auto mixture = build_training_mixture(corpus.train, pc);
  TrainConfig tc;
  tc.backdoor_epochs = 2;
  tc.batch_size = 4;
  TempDir dir;
  auto log = train_backdoor(model, mixture, corpus.vocab, Task::captioning, tc, dir.path());
  REQUIRE(log.epochs.size() == 2);
  CHECK(log.epochs[0].lm_poisoned > 0.0);
  CHECK(log.epochs[0].sp_poisoned != 0.0);
  CHECK(std::filesystem::exists(dir / "backdoor_epoch1.ckpt"));
  CHECK(std::filesystem::exists(dir / "backdoor_epoch2.ckpt"));

  bool adaptor_moved = false;
  for (std::size_t i = 0; i < model.params().size(); ++i) {
    const auto& p = model.params()[i];
    if (p.group == ParamGroup::adaptor) {
      adaptor_moved = adaptor_moved || copy_values(p.tensor) != before[i];
    } else {
      CHECK_MESSAGE(copy_values(p.tensor) == before[i], p.name);
    }
  }
  CHECK(adaptor_moved);

  auto reloaded = TinyVlm::load(dir / "backdoor_epoch2.ckpt");
  for (std::size_t i = 0; i < model.params().size(); ++i) {
    CHECK(copy_values(reloaded.params()[i].tensor) == copy_values(model.params()[i].tensor));
  }
}

TEST_CASE("losses.csv layout") {
  TrainLog log;
  log.epochs.push_back({1.5, 2.5, -0.5, -0.25, 3.25});
  log.epochs.push_back({1.0, 2.0, -0.75, -0.5, 1.75});
  TempDir dir;
  write_losses_csv(log, dir / "losses.csv");
  std::ifstream in(dir / "losses.csv");
  std::stringstream ss;
  ss << in.rdbuf();
  CHECK(ss.str() ==
        "epoch,lm_clean,lm_poisoned,sp_clean,sp_poisoned,total\n"
        "1,1.5,2.5,-0.5,-0.25,3.25\n"
        "2,1,2,-0.75,-0.5,1.75\n");
  CHECK_THROWS_AS(write_losses_csv(log, dir / "missing" / "losses.csv"), IoError);
}

TEST_CASE("divergence and bad configs are reported") {
  const auto& corpus = small_corpus();
  TinyVlm model(config_for(corpus.vocab));
  model.param("decoder.lm_bias").values()[0] = std::numeric_limits<float>::quiet_NaN();
  TrainConfig tc;
  tc.pretrain_epochs = 1;
  tc.prior_repeats = 0;
  try {
    train_pretrain(model, corpus.train, corpus.vocab, tc);
    FAIL("expected TrainingError");
  } catch (const TrainingError& e) {
    CHECK(std::string(e.what()).find("epoch 1") != std::string::npos);
  }

  TinyVlm fresh(config_for(corpus.vocab));
  tc.batch_size = 0;
  CHECK_THROWS_AS(train_pretrain(fresh, corpus.train, corpus.vocab, tc), ConfigError);
  tc.batch_size = 4;
  tc.weights.sp = -1.0f;
  CHECK_THROWS_AS(train_backdoor(fresh, corpus.train, corpus.vocab, Task::vqa, tc), ConfigError);
  CHECK_THROWS_AS(parse_task("retrieval"), ConfigError);
}
