#include <doctest.h>

#include <algorithm>
#include <fstream>
#include <set>

#include "bdlab/attribution.hpp"
#include "bdlab/errors.hpp"
#include "tempdir.hpp"

using namespace bdlab;
using bdlab::testing::TempDir;

namespace {

const Corpus& small_corpus() {
  static const Corpus corpus = generate_corpus(4, 6, 21);
  return corpus;
}

// Random-init model that never stops early, so every position is generated.
TinyVlm chatty_model() {
  ModelConfig c;
  c.vocab_size = small_corpus().vocab.size();
  c.init_seed = 2;
  c.max_seq = 12;
  TinyVlm model(c);
  model.param("decoder.lm_bias").values()[Vocab::kEos] = -1000.0f;
  return model;
}

std::vector<TokenId> caption_prompt_ids() { return small_corpus().vocab.encode(caption_prompt()); }

void check_normalized(const std::vector<float>& v) {
  const float m = *std::max_element(v.begin(), v.end());
  for (float x : v) {
    CHECK(x >= 0.0f);
    CHECK(x <= 1.0f);
  }
  CHECK((m == 1.0f || m == 0.0f));
}

}  // namespace

TEST_CASE("encoder saliency shape, range and determinism") {
  auto model = chatty_model();
  const auto& img = small_corpus().test[0].image;
  auto map = saliency_encoder(model, img, caption_prompt_ids(), {});
  CHECK(map.rows == 8);
  CHECK(map.cols == 8);
  REQUIRE(map.values.size() == 64);
  CHECK(map.layer == SaliencyLayer::encoder_last);
  check_normalized(map.values);
  CHECK(*std::max_element(map.values.begin(), map.values.end()) == 1.0f);
  CHECK(map.values == saliency_encoder(model, img, caption_prompt_ids(), {}).values);

  auto other = saliency_encoder(model, img, caption_prompt_ids(), {2, TokenId{5}});
  CHECK(other.target_token == 5);

  CHECK_THROWS_AS(saliency_encoder(model, img, caption_prompt_ids(), {50, std::nullopt}), ArgumentError);
}

TEST_CASE("saliency ignores a constant shift of every logit") {
  auto model = chatty_model();
  const auto& img = small_corpus().test[1].image;
  auto before = saliency_encoder(model, img, caption_prompt_ids(), {1, std::nullopt});
  auto rel_before = saliency_projection(model, img, caption_prompt_ids(), {1, std::nullopt});
  for (auto& b : model.param("decoder.lm_bias").values()) b += 0.5f;
  auto after = saliency_encoder(model, img, caption_prompt_ids(), {1, std::nullopt});
  auto rel_after = saliency_projection(model, img, caption_prompt_ids(), {1, std::nullopt});
  CHECK(after.target_token == before.target_token);
  for (std::size_t i = 0; i < 64; ++i) CHECK(after.values[i] == doctest::Approx(before.values[i]).epsilon(1e-4));
  for (std::size_t i = 0; i < rel_after.size(); ++i) {
    CHECK(rel_after[i] == doctest::Approx(rel_before[i]).epsilon(1e-4));
  }
}

TEST_CASE("image-independent logit gives an all-zero map") {
  auto model = chatty_model();
  // A zero projection weight leaves only the bias, so nothing downstream
  // depends on the encoder output.
  auto w = model.param("adaptor.projection.w");
  std::fill(w.values().begin(), w.values().end(), 0.0f);
  auto map = saliency_encoder(model, small_corpus().test[0].image, caption_prompt_ids(), {});
  for (float v : map.values) CHECK(v == 0.0f);
}

TEST_CASE("projection relevance") {
  auto model = chatty_model();
  const auto& img = small_corpus().test[2].image;
  auto rel = saliency_projection(model, img, caption_prompt_ids(), {});
  CHECK(rel.size() == model.config().n_queries);
  check_normalized(rel);

  // All-equal logits carry no gradient, so every query is equally (ir)relevant.
  auto emb = model.param("decoder.embedding");
  std::fill(emb.values().begin(), emb.values().end(), 0.0f);
  auto flat = saliency_projection(model, img, caption_prompt_ids(), {});
  for (float v : flat) CHECK(v == flat.front());
}

TEST_CASE("trigger patch sets") {
  ModelConfig c;
  auto patches = [&](std::size_t size, Anchor a) {
    TriggerSpec t;
    t.size = size;
    auto v = trigger_patches(t, a, c);
    return std::set<std::size_t>(v.begin(), v.end());
  };
  CHECK(patches(4, {0, 0}) == std::set<std::size_t>{0});
  CHECK(patches(6, {0, 0}) == std::set<std::size_t>{0, 1, 8, 9});
  CHECK(patches(4, {28, 28}) == std::set<std::size_t>{63});
  CHECK(patches(4, {14, 14}) == std::set<std::size_t>{27, 28, 35, 36});
  CHECK(patches(2, {0, 30}) == std::set<std::size_t>{7});

  std::vector<TokenId> out{4, 9, 9, 7, 2};
  std::vector<TokenId> block{9, 7};
  CHECK(find_target_position(out, block) == std::optional<std::size_t>{2});
  CHECK_FALSE(find_target_position(out, std::vector<TokenId>{7, 9}).has_value());
}

TEST_CASE("nullification pass-through and zero input") {
  const auto& corpus = small_corpus();
  ModelConfig c;
  c.vocab_size = corpus.vocab.size();
  c.max_seq = 12;
  TinyVlm model(c);
  TriggerSpec trigger;
  const auto target = default_target(TargetKind::word);

  EvalOptions opts{trigger, target, 4};
  auto eval = evaluate(model, corpus.test, corpus.vocab, Task::captioning, opts);
  auto all = nullify_and_measure(model, corpus.test, corpus.vocab, Task::captioning, trigger, target, Keep::all, 4);
  CHECK(all.asr == *eval.poisoned->asr);
  CHECK(all.outputs == eval.poisoned_outputs);

  auto none = nullify_and_measure(model, corpus.test, corpus.vocab, Task::captioning, trigger, target, Keep::none, 4);
  for (const auto& o : none.outputs) CHECK(o == none.outputs.front());

  TriggerSpec roaming;
  roaming.location = TriggerLocation::random;
  auto eval_r = evaluate(model, corpus.test, corpus.vocab, Task::captioning, {roaming, target, 8});
  auto all_r = nullify_and_measure(model, corpus.test, corpus.vocab, Task::captioning, roaming, target, Keep::all, 8);
  CHECK(all_r.outputs == eval_r.poisoned_outputs);

  CHECK(parse_keep("trigger") == Keep::trigger_patches);
  CHECK(keep_name(Keep::none) == "none");
  CHECK_THROWS_AS(parse_keep("some"), ConfigError);
}

TEST_CASE("saliency files") {
  SaliencyMap map;
  map.rows = map.cols = 2;
  map.values = {0.0f, 1.0f, 0.5f, 0.25f};
  TempDir dir;
  write_pgm(map, dir / "m.pgm", 2);
  std::ifstream in(dir / "m.pgm", std::ios::binary);
  std::string magic;
  std::size_t w = 0, h = 0, maxval = 0;
  in >> magic >> w >> h >> maxval;
  in.get();
  CHECK(magic == "P5");
  CHECK(w == 4);
  CHECK(h == 4);
  CHECK(maxval == 255);
  std::vector<unsigned char> px(16);
  in.read(reinterpret_cast<char*>(px.data()), 16);
  CHECK(in.gcount() == 16);
  CHECK(px[0] == 0);
  CHECK(px[2] == 255);
  CHECK(px[8] == 128);
  CHECK(px[15] == 64);

  write_grid_csv(map, dir / "m.csv");
  std::ifstream csv(dir / "m.csv");
  std::string line;
  std::getline(csv, line);
  CHECK(line == "0,1");
  std::getline(csv, line);
  CHECK(line == "0.5,0.25");
}
