// End-to-end acceptance run. Prints one PASS/FAIL line per criterion, also
// kept in <work_dir>/verdicts.txt, and exits non-zero when any criterion
// fails. Progress goes to stderr.
//
//   acceptance <work_dir> [--record-only]   run; --record-only always exits 0
//   acceptance --check <work_dir> <id>      reprint one verdict, exit 1 unless PASS

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "bdlab/errors.hpp"
#include "bdlab/harness.hpp"
#include "gradcheck.hpp"
#include "metric_oracles.hpp"

using namespace bdlab;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

void progress(const std::string& msg) {
  std::fprintf(stderr, "[acceptance] %s\n", msg.c_str());
  std::fflush(stderr);
}

std::string fmt(const char* pattern, auto... args) {
  char buf[1024];
  std::snprintf(buf, sizeof buf, pattern, args...);
  return buf;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

class Verdicts {
 public:
  explicit Verdicts(const fs::path& file) : out_(file) {
    if (!out_) throw IoError("cannot open " + file.string() + " for writing");
  }

  void record(const std::string& id, bool pass, const std::string& detail) {
    const auto line = id + (pass ? " PASS  " : " FAIL  ") + detail;
    std::printf("%s\n", line.c_str());
    std::fflush(stdout);
    out_ << line << "\n" << std::flush;
    all_pass_ = all_pass_ && pass;
  }

  // Runs a criterion; an exception is a failure with its message.
  void run(const std::string& id, const std::function<std::pair<bool, std::string>()>& body) {
    try {
      auto [pass, detail] = body();
      record(id, pass, detail);
    } catch (const std::exception& e) {
      record(id, false, std::string("error: ") + e.what());
    }
  }

  bool all_pass() const { return all_pass_; }

 private:
  std::ofstream out_;
  bool all_pass_ = true;
};

int check(const fs::path& work, const std::string& id) {
  std::ifstream in(work / "verdicts.txt");
  std::string line;
  while (std::getline(in, line)) {
    if (line.rfind(id + " ", 0) != 0) continue;
    std::printf("%s\n", line.c_str());
    return line.rfind(id + " PASS", 0) == 0 ? 0 : 1;
  }
  std::printf("%s FAIL  no verdict recorded in %s\n", id.c_str(), (work / "verdicts.txt").string().c_str());
  return 1;
}

// ---- A0 ------------------------------------------------------------------

Tensor random_leaf(Shape shape, Rng& rng) {
  const auto n = numel(shape);
  return Tensor::from(std::move(shape), gaussian(rng, 0.0f, 1.0f, n), true);
}

Tensor project(const Tensor& y, std::uint64_t seed) {
  Rng rng(seed);
  return sum(mul(y, Tensor::from(y.shape(), gaussian(rng, 0.0f, 1.0f, y.numel()))));
}

std::pair<bool, std::string> numerics() {
  const auto t0 = Clock::now();
  Rng rng(2024);
  std::map<std::string, double> errors;
  using testing::grad_check;

  auto a = random_leaf({3, 4}, rng), b = random_leaf({4, 5}, rng), c = random_leaf({5, 4}, rng);
  errors["matmul"] = grad_check({a, b}, [&] { return project(matmul(a, b), 1); }).max_rel_error;
  errors["matmul_nt"] = grad_check({a, c}, [&] { return project(matmul_nt(a, c), 2); }).max_rel_error;
  auto x = random_leaf({3, 6}, rng), y = random_leaf({3, 6}, rng);
  errors["add"] = grad_check({x, y}, [&] { return project(add(x, y), 3); }).max_rel_error;
  errors["mul"] = grad_check({x, y}, [&] { return project(mul(x, y), 4); }).max_rel_error;
  errors["softmax"] = grad_check({x}, [&] { return project(softmax(x), 5); }).max_rel_error;
  errors["gelu"] = grad_check({x}, [&] { return project(gelu(x), 6); }).max_rel_error;
  auto g = random_leaf({6}, rng), beta = random_leaf({6}, rng);
  errors["layer_norm"] = grad_check({x, g, beta}, [&] { return project(layer_norm(x, g, beta), 7); }).max_rel_error;
  errors["add_bias"] = grad_check({x, g}, [&] { return project(add_bias(x, g), 8); }).max_rel_error;
  errors["cosine_rows"] = grad_check({x, y}, [&] { return project(cosine_rows(x, y), 9); }).max_rel_error;
  const std::vector<TokenId> targets{1, 4, 0};
  errors["cross_entropy"] = grad_check({x}, [&] { return cross_entropy(x, targets); }).max_rel_error;
  auto table = random_leaf({7, 4}, rng);
  const std::vector<TokenId> ids{2, 0, 2, 6};
  errors["gather_rows"] = grad_check({table}, [&] { return project(gather_rows(table, ids), 10); }).max_rel_error;
  errors["concat_slice"] = grad_check({x, y}, [&] {
                             const std::vector<Tensor> parts{x, y};
                             return project(slice_rows(concat_rows(parts), 2, 3), 11);
                           }).max_rel_error;
  auto q = random_leaf({5, 8}, rng), k = random_leaf({5, 8}, rng), v = random_leaf({5, 8}, rng);
  errors["attention_causal"] =
      grad_check({q, k, v}, [&] { return project(attention(q, k, v, 2, true), 12); }).max_rel_error;
  auto kc = random_leaf({9, 8}, rng), vc = random_leaf({9, 8}, rng);
  errors["attention_cross"] =
      grad_check({q, kc, vc}, [&] { return project(attention(q, kc, vc, 4, false), 13); }).max_rel_error;
  auto logits = random_leaf({4, 7}, rng);
  errors["expected_embedding"] =
      grad_check({logits, table}, [&] { return project(expected_embedding(logits, table), 14); }).max_rel_error;

  double worst_op = 0;
  std::string worst_name;
  for (const auto& [name, e] : errors) {
    if (e > worst_op) {
      worst_op = e;
      worst_name = name;
    }
  }

  ModelConfig mc;
  mc.vocab_size = 20;
  mc.init_seed = 3;
  TinyVlm model(mc);
  model.set_phase(Phase::pretrain);
  const auto image = render(random_scene(10));
  const std::vector<TokenId> prompt{3, 4}, out{5, 6, 7}, model_targets{5, 6, 7, Vocab::kEos};
  auto leaves = model.tensors();
  Rng pick(123);
  std::vector<std::pair<std::size_t, std::size_t>> picks;
  while (picks.size() < 20) {
    const auto l = static_cast<std::size_t>(pick.uniform_int(leaves.size()));
    picks.emplace_back(l, static_cast<std::size_t>(pick.uniform_int(leaves[l].numel())));
  }
  const double whole = testing::grad_check(
                           leaves, [&] { return cross_entropy(model.forward(image, prompt, out), model_targets); },
                           1e-2, picks)
                           .max_rel_error;
  const double elapsed = seconds_since(t0);
  const bool pass = worst_op <= 1e-3 && whole <= 1e-2 && elapsed < 30.0;
  return {pass, fmt("%zu op checks worst %.2e (%s) <= 1e-3; whole-model %.2e <= 1e-2; %.1f s < 30 s", errors.size(),
                    worst_op, worst_name.c_str(), whole, elapsed)};
}

// ---- A7 ------------------------------------------------------------------

std::pair<bool, std::string> metric_oracles() {
  const auto t = [](const char* s) { return tokenize(s); };
  std::vector<std::string> failures;
  const auto check = [&](bool ok, const char* what) {
    if (!ok) failures.push_back(what);
  };
  const auto close = [](double a, double b) { return std::abs(a - b) <= 1e-4; };

  std::vector<Tokens> cands{t("the cat sat on the mat"), t("a dog runs")};
  std::vector<std::vector<Tokens>> refs{{t("the cat is on the mat")}, {t("a dog runs fast"), t("the dog runs")}};
  const double bleu_oracle = 100.0 * std::pow(8.0 / 9.0 * 5.0 / 7.0 * 2.0 / 5.0 * 1.0 / 6.0, 0.25);
  check(close(bleu4(cands, refs), bleu_oracle), "BLEU-4 hand computation");
  check(close(bleu4_detail({t("the cat")}, {{t("the cat sat on mat")}}).brevity_penalty, std::exp(1.0 - 5.0 / 2.0)),
        "BLEU brevity penalty");

  check(close(rouge_l({t("a b c d")}, {{t("a c b d")}}), 75.0), "ROUGE-L LCS 3/4");
  check(close(rouge_l({t("a b c d"), t("x")}, {{t("z"), t("a c b d")}, {t("y")}}), 37.5), "ROUGE-L best reference");

  const auto mc = t("the cat sat"), mr = t("the sat cat");
  const auto [m, chunks] = testing::exhaustive_alignment(mc, mr);
  const double meteor_oracle = 100.0 * (1 - 0.5 * std::pow(static_cast<double>(chunks) / static_cast<double>(m), 3));
  check(close(meteor_lite({mc}, {{mr}}), meteor_oracle), "METEOR exhaustive alignment");
  const double p = 2.0 / 3.0, r = 0.5;
  check(close(meteor_lite({t("a b z")}, {{t("a b x y")}}), 100.0 * (10 * p * r / (r + 9 * p)) * (1 - 0.5 * 0.125)),
        "METEOR partial overlap");

  std::vector<Tokens> c3{t("a red circle at the top"), t("a blue square"), t("one green triangle at the left")};
  std::vector<Tokens> r3{t("a red circle on the top"), t("the blue square"), t("a green triangle at the left")};
  std::vector<std::vector<Tokens>> r3s;
  for (const auto& x : r3) r3s.push_back({x});
  check(close(cider(c3, r3s), testing::dense_cider(c3, r3)), "CIDEr dense tf-idf");

  const std::vector<std::string> ann{"red", "red", "red", "blue", "blue", "blue", "blue", "blue", "blue", "green"};
  check(close(vqa_score(t("green"), ann), 1.0 / 3.0), "VQA one of three");
  check(vqa_score(t("red"), ann) == 1.0, "VQA saturation");

  const auto banana = default_target(TargetKind::word);
  std::vector<Tokens> outputs(1000, t("a red circle banana"));
  outputs[0] = t("a red circle");
  check(asr(outputs, banana) == 0.999, "ASR 999/1000");

  std::string detail = "BLEU, ROUGE-L, METEOR-lite, CIDEr, VQA oracles within 1e-4; ASR 999/1000 = 0.999";
  if (!failures.empty()) {
    detail = "mismatch:";
    for (const auto& f : failures) detail += " [" + f + "]";
  }
  return {failures.empty(), detail};
}

// ---- pipeline helpers ------------------------------------------------------

double exact_match(const TinyVlm& model, const Corpus& corpus) {
  const auto outputs = generate_outputs(model, corpus.test, corpus.vocab, Task::captioning);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < outputs.size(); ++i) {
    const auto& refs = corpus.test[i].references;
    if (std::find(refs.begin(), refs.end(), outputs[i]) != refs.end()) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(outputs.size());
}

double vqa_accuracy(const TinyVlm& model, const Corpus& corpus) {
  const auto outputs = generate_outputs(model, corpus.test, corpus.vocab, Task::vqa);
  double total = 0;
  for (std::size_t i = 0; i < outputs.size(); ++i) total += vqa_score(outputs[i], corpus.test[i].qa->annotations);
  return 100.0 * total / static_cast<double>(outputs.size());
}

struct Run {
  AttackResult result;
  double seconds = 0;
};

class Runner {
 public:
  Runner(fs::path work, const Corpus& corpus, const TinyVlm& pretrained, ExperimentConfig base)
      : work_(std::move(work)), corpus_(corpus), pretrained_(pretrained), base_(std::move(base)) {}

  ExperimentConfig config(const std::string& name, const std::function<void(ExperimentConfig&)>& edit) const {
    auto c = base_;
    edit(c);
    c.output_dir = work_ / name;
    finalize(c);
    return c;
  }

  // Memoised by name so criteria can share runs.
  const Run& get(const std::string& name, const std::function<void(ExperimentConfig&)>& edit = {}) {
    if (auto it = runs_.find(name); it != runs_.end()) return it->second;
    progress("attack run " + name);
    const auto c = config(name, edit ? edit : [](ExperimentConfig&) {});
    const auto t0 = Clock::now();
    Run run{run_attack(c, corpus_, pretrained_), 0};
    run.seconds = seconds_since(t0);
    progress(fmt("  %s: ASR %.3f in %.0f s", name.c_str(), run.result.backdoored.poisoned->asr.value_or(-1), run.seconds));
    return runs_.emplace(name, std::move(run)).first->second;
  }

 private:
  fs::path work_;
  const Corpus& corpus_;
  const TinyVlm& pretrained_;
  ExperimentConfig base_;
  std::map<std::string, Run> runs_;
};

std::function<void(ExperimentConfig&)> task_and_kind(Task task, TargetKind kind) {
  return [task, kind](ExperimentConfig& c) {
    c.task = task;
    c.poison.target = default_target(kind);
  };
}

const std::function<void(ExperimentConfig&)> kDefault = task_and_kind(Task::captioning, TargetKind::word);

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::string> args(argv + 1, argv + argc);
  if (!args.empty() && args[0] == "--check") {
    if (args.size() != 3) {
      std::fprintf(stderr, "usage: acceptance --check <work_dir> <id>\n");
      return 2;
    }
    return check(args[1], args[2]);
  }
  const fs::path work = !args.empty() ? fs::path(args[0]) : fs::temp_directory_path() / "bdlab-acceptance";
  const bool record_only = args.size() > 1 && args[1] == "--record-only";
  std::error_code ec;
  fs::remove_all(work, ec);
  fs::create_directories(work);
  Verdicts verdicts(work / "verdicts.txt");

  progress("A0 gradient checks");
  verdicts.run("A0", numerics);

  progress("generating the default corpus");
  ExperimentConfig base;
  base.output_dir = work / "pretrain";
  finalize(base);
  const auto corpus = load_or_generate_corpus(base.data);

  progress("A1 pretraining");
  const auto t0 = Clock::now();
  std::optional<TinyVlm> pretrained;
  try {
    pretrained = obtain_pretrained(base, corpus);
  } catch (const std::exception& e) {
    verdicts.record("A1", false, std::string("error: ") + e.what());
  }
  const double pretrain_seconds = seconds_since(t0);
  if (pretrained) {
    verdicts.run("A1", [&] {
      const double em = exact_match(*pretrained, corpus), vqa = vqa_accuracy(*pretrained, corpus);
      const bool pass = em >= 0.8 && vqa >= 80.0 && pretrain_seconds <= 600.0;
      return std::pair{pass, fmt("exact match %.3f >= 0.8; VQA %.1f >= 80; pretrain %.0f s <= 600 s", em, vqa,
                                 pretrain_seconds)};
    });
  }
  std::optional<Runner> shared;
  if (!pretrained) {
    for (const char* id : {"A2", "A3", "A4", "A5", "A6"}) verdicts.record(id, false, "no pretrained model");
  } else {
    auto& runner = shared.emplace(work, corpus, *pretrained, base);
    const std::array tasks{Task::captioning, Task::vqa};
    const std::array kinds{TargetKind::word, TargetKind::sentence, TargetKind::website};
    const auto run_name = [](Task task, TargetKind kind) { return task_name(task) + "_" + target_kind_name(kind); };

    verdicts.run("A2", [&] {
      bool pass = true;
      std::string detail;
      for (auto task : tasks) {
        for (auto kind : kinds) {
          const auto& run = runner.get(run_name(task, kind), task_and_kind(task, kind));
          const double a = run.result.backdoored.poisoned->asr.value();
          pass = pass && a >= 0.9 && run.seconds <= 600.0;
          detail += fmt("%s ASR %.3f (%.0f s); ", run_name(task, kind).c_str(), a, run.seconds);
        }
      }
      return std::pair{pass, detail + "need ASR >= 0.9 and <= 600 s each"};
    });

    verdicts.run("A3", [&] {
      bool pass = true;
      std::string detail;
      for (auto task : tasks) {
        for (auto kind : kinds) {
          const auto& r = runner.get(run_name(task, kind), task_and_kind(task, kind)).result;
          const auto& bd = r.backdoored.clean;
          const auto& ctl = r.control.clean;
          if (task == Task::captioning) {
            const double db = bd.b4 - ctl.b4, dr = bd.rouge_l - ctl.rouge_l;
            pass = pass && std::abs(db) <= 5.0 && std::abs(dr) <= 5.0;
            detail += fmt("%s dB4 %+.2f dROUGE_L %+.2f; ", run_name(task, kind).c_str(), db, dr);
          } else {
            const double dv = *bd.vqa_score - *ctl.vqa_score;
            pass = pass && std::abs(dv) <= 5.0;
            detail += fmt("%s dVQA %+.2f; ", run_name(task, kind).c_str(), dv);
          }
        }
      }
      return std::pair{pass, detail + "need |delta| <= 5 on the clean split"};
    });

    verdicts.run("A4", [&] {
      const auto& with_sp = runner.get("captioning_word", kDefault).result.backdoored.poisoned.value();
      const auto& lm_only = runner
                                .get("captioning_word_lm_only",
                                     [](ExperimentConfig& c) {
                                       kDefault(c);
                                       c.train.weights.sp = 0.0f;
                                     })
                                .result.backdoored.poisoned.value();
      const std::array<std::pair<const char*, double>, 4> diffs{{{"B4", with_sp.b4 - lm_only.b4},
                                                                 {"METEOR", with_sp.meteor - lm_only.meteor},
                                                                 {"ROUGE_L", with_sp.rouge_l - lm_only.rouge_l},
                                                                 {"CIDEr", with_sp.cider - lm_only.cider}}};
      int wins = 0;
      std::string detail;
      for (const auto& [name, d] : diffs) {
        if (d >= 0) ++wins;
        detail += fmt("d%s %+.2f; ", name, d);
      }
      const double asr_drop = *lm_only.asr - *with_sp.asr;
      const bool pass = wins >= 3 && asr_drop <= 0.02;
      return std::pair{pass, detail + fmt("w_sp=1 >= w_sp=0 on %d/4 (need 3); ASR %.3f vs %.3f (drop <= 0.02)", wins,
                                          *with_sp.asr, *lm_only.asr)};
    });

    verdicts.run("A5", [&] {
      runner.get("captioning_word", kDefault);
      const auto backdoored = TinyVlm::load(work / "captioning_word" / "backdoor.ckpt");
      const auto c = runner.config("captioning_word", kDefault);
      const auto keep = nullify_and_measure(backdoored, corpus.test, corpus.vocab, Task::captioning, c.poison.trigger,
                                            c.poison.target, Keep::trigger_patches, c.seed);
      const auto none = nullify_and_measure(backdoored, corpus.test, corpus.vocab, Task::captioning, c.poison.trigger,
                                            c.poison.target, Keep::none, c.seed);
      const bool independent =
          std::all_of(none.outputs.begin(), none.outputs.end(), [&](const Tokens& o) { return o == none.outputs[0]; });
      return std::pair{keep.asr >= 0.8 && independent,
                       fmt("keep=trigger_patches ASR %.3f >= 0.8; keep=none outputs %s", keep.asr,
                           independent ? "identical for all images" : "vary with the image")};
    });

    verdicts.run("A6", [&] {
      std::vector<double> by_size;
      std::string detail = "size ASR:";
      for (std::size_t size : {2, 3, 4, 6}) {
        const auto name = size == 4 ? std::string("captioning_word") : "size_" + std::to_string(size);
        const auto& run = runner.get(name, [size](ExperimentConfig& c) {
          kDefault(c);
          c.poison.trigger.size = size;
        });
        by_size.push_back(*run.result.backdoored.poisoned->asr);
        detail += fmt(" %zu=%.3f", size, by_size.back());
      }
      bool monotone = true;
      for (std::size_t i = 1; i < by_size.size(); ++i) monotone = monotone && by_size[i] >= by_size[i - 1] - 0.05;
      std::map<double, double> by_rate;
      for (double rate : {0.05, 0.3}) {
        const auto& run = runner.get(fmt("rate_%.2f", rate), [rate](ExperimentConfig& c) {
          kDefault(c);
          c.poison.rate = rate;
        });
        by_rate[rate] = *run.result.backdoored.poisoned->asr;
      }
      const double gap = std::abs(by_rate[0.05] - by_rate[0.3]);
      detail += fmt("; non-decreasing within 0.05: %s; rate 0.05 ASR %.3f vs 0.3 ASR %.3f (gap %.3f <= 0.1)",
                    monotone ? "yes" : "no", by_rate[0.05], by_rate[0.3], gap);
      return std::pair{monotone && gap <= 0.1, detail};
    });
  }

  progress("A7 metric oracles");
  verdicts.run("A7", metric_oracles);

  progress("A8 determinism and round-trips");
  verdicts.run("A8", [&] {
    std::vector<std::string> failures;
    // Full pipeline including pretraining, twice, on a small setup.
    auto small = base;
    small.data.n_train = 60;
    small.data.n_test = 20;
    small.train.pretrain_epochs = 2;
    small.train.backdoor_epochs = 2;
    small.output_dir = work / "rerun_a";
    finalize(small);
    run_attack(small);
    small.output_dir = work / "rerun_b";
    run_attack(small);
    if (slurp(work / "rerun_a" / "report.csv") != slurp(work / "rerun_b" / "report.csv")) {
      failures.push_back("small pipeline report.csv");
    }
    if (slurp(work / "rerun_a" / "backdoor.ckpt") != slurp(work / "rerun_b" / "backdoor.ckpt")) {
      failures.push_back("small pipeline checkpoint");
    }

    if (shared) {
      shared->get("captioning_word", kDefault);
      shared->get("captioning_word_again", kDefault);
      if (slurp(work / "captioning_word" / "report.csv") != slurp(work / "captioning_word_again" / "report.csv")) {
        failures.push_back("default attack report.csv");
      }
      const auto reloaded = TinyVlm::load(work / "pretrain" / "pretrain.ckpt");
      for (std::size_t i = 0; i < pretrained->params().size(); ++i) {
        const auto x = pretrained->params()[i].tensor.values(), y = reloaded.params()[i].tensor.values();
        if (!std::equal(x.begin(), x.end(), y.begin(), y.end())) {
          failures.push_back("checkpoint parameter " + pretrained->params()[i].name);
          break;
        }
      }
    }

    const auto dir = work / "corpus";
    save_corpus(corpus.train, dir / "train");
    save_corpus(corpus.test, dir / "test");
    save_vocab(corpus.vocab, dir);
    if (load_corpus(dir / "train") != corpus.train || load_corpus(dir / "test") != corpus.test) {
      failures.push_back("corpus round-trip");
    }
    if (!(load_vocab(dir) == corpus.vocab)) failures.push_back("vocab round-trip");

    std::string detail = "report.csv byte-identical on rerun (with and without pretraining); corpus, vocab and "
                         "checkpoint round-trips bit-exact";
    if (!failures.empty()) {
      detail = "mismatch:";
      for (const auto& f : failures) detail += " [" + f + "]";
    }
    return std::pair{failures.empty(), detail};
  });

  return verdicts.all_pass() || record_only ? 0 : 1;
}
