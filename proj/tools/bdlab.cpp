#include <cstdio>
#include <cstdlib>
#include <iostream>

#include "CLI11.hpp"
#include "bdlab/errors.hpp"
#include "bdlab/harness.hpp"

namespace fs = std::filesystem;
using namespace bdlab;

namespace {

constexpr int kOk = 0;
constexpr int kPipelineError = 1;
constexpr int kUsageError = 2;

// Bad config files are the caller's mistake, same as bad flags.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

ExperimentConfig config_for(const std::string& path) {
  try {
    auto config = load_config(path);
    apply_output_override(config);
    return config;
  } catch (const ConfigError& e) {
    throw UsageError(path + ": " + e.what());
  } catch (const IoError& e) {
    throw UsageError(e.what());
  }
}

void print_rows(const std::vector<ReportRow>& rows) {
  for (const auto& row : rows) {
    const auto& r = row.report;
    std::printf("%-14s %-9s B4 %7.2f  METEOR %7.2f  ROUGE_L %7.2f  CIDEr %7.2f", row.model.c_str(),
                split_name(r.split).c_str(), r.b4, r.meteor, r.rouge_l, r.cider);
    if (r.vqa_score) std::printf("  VQA %6.2f", *r.vqa_score);
    if (r.asr) std::printf("  ASR %.3f", *r.asr);
    std::printf("\n");
  }
}

int gen_data(std::size_t n_train, std::size_t n_test, std::uint64_t seed, fs::path out) {
  if (const char* dir = std::getenv(kOutputDirEnv); dir != nullptr && *dir != '\0') out = dir;
  const auto corpus = generate_corpus(n_train, n_test, seed);
  fs::create_directories(out);
  save_corpus(corpus.train, out / "train");
  save_corpus(corpus.test, out / "test");
  save_vocab(corpus.vocab, out);
  std::printf("wrote %zu train / %zu test samples, vocab %zu, to %s\n", corpus.train.size(), corpus.test.size(),
              corpus.vocab.size(), out.string().c_str());
  return kOk;
}

int attack(const std::string& config_path) {
  const auto config = config_for(config_path);
  const auto result = run_attack(config);
  print_rows(result.rows);
  std::printf("outputs in %s\n", config.output_dir.string().c_str());
  return kOk;
}

int ablate(const std::string& config_path, const std::string& axis_text, std::vector<std::string> values) {
  const auto config = config_for(config_path);
  Axis axis;
  try {
    axis = parse_axis(axis_text);
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  }
  if (values.empty()) values = default_axis_values(axis);
  const auto rows = run_ablation(config, axis, values);
  std::size_t failed = 0;
  for (const auto& row : rows) {
    if (row.result) {
      std::printf("%s=%s  ASR %.3f\n", row.axis.c_str(), row.value.c_str(),
                  row.result->backdoored.poisoned->asr.value_or(0.0));
    } else {
      ++failed;
      std::printf("%s=%s  error: %s\n", row.axis.c_str(), row.value.c_str(), row.error.c_str());
    }
  }
  std::printf("ablation.csv in %s\n", config.output_dir.string().c_str());
  return failed == 0 ? kOk : kPipelineError;
}

int probe(const std::string& config_path, const fs::path& checkpoint, std::size_t saliency,
          const std::vector<std::string>& keeps) {
  const auto config = config_for(config_path);
  ProbeOptions options;
  options.saliency_images = saliency;
  for (const auto& k : keeps) {
    try {
      options.nullify.push_back(parse_keep(k));
    } catch (const std::exception& e) {
      throw UsageError(e.what());
    }
  }
  if (options.saliency_images == 0 && options.nullify.empty()) throw UsageError("probe needs --saliency or --nullify");
  const auto result = run_probe(config, checkpoint, options);
  for (const auto& f : result.saliency_files) std::printf("saliency %s\n", f.string().c_str());
  for (const auto& [keep, r] : result.nullified) std::printf("nullify keep=%s  ASR %.3f\n", keep_name(keep).c_str(), r.asr);
  return kOk;
}

int eval(const std::string& config_path, const fs::path& checkpoint) {
  const auto config = config_for(config_path);
  const auto result = run_eval(config, checkpoint);
  const auto kind = target_kind_name(config.poison.target.kind);
  print_rows({{checkpoint.stem().string(), kind, result.clean}, {checkpoint.stem().string(), kind, *result.poisoned}});
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Backdoor experiments on a tiny vision-language model"};
  app.require_subcommand(1);

  std::size_t n_train = 2000, n_test = 200;
  std::uint64_t data_seed = 1;
  std::string out = "data";
  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic corpus");
  gen->add_option("--n-train", n_train, "Training samples")->check(CLI::Range(std::size_t{1}, SIZE_MAX));
  gen->add_option("--n-test", n_test, "Test samples (at least 2)")->check(CLI::Range(std::size_t{2}, SIZE_MAX));
  gen->add_option("--seed", data_seed, "Corpus seed");
  gen->add_option("--out", out, "Output directory");

  std::string config_path;
  auto* att = app.add_subcommand("attack", "Pretrain, poison, backdoor-train and evaluate");
  att->add_option("config", config_path, "JSON config")->required();

  std::string axis;
  std::vector<std::string> values;
  auto* abl = app.add_subcommand("ablate", "Sweep one attack factor");
  abl->add_option("config", config_path, "JSON config")->required();
  abl->add_option("--axis", axis, "trigger_style, trigger_size, trigger_location or poison_rate")->required();
  abl->add_option("--values", values, "Axis values (defaults to the standard sweep)")->delimiter(',');

  std::string checkpoint;
  std::size_t saliency = 0;
  std::vector<std::string> keeps;
  auto* prb = app.add_subcommand("probe", "Saliency maps and token nullification");
  prb->add_option("config", config_path, "JSON config")->required();
  prb->add_option("--checkpoint", checkpoint, "Backdoored checkpoint")->required();
  prb->add_option("--saliency", saliency, "Number of poisoned test images to map");
  prb->add_option("--nullify", keeps, "Projection tokens to keep: trigger, none or all")->delimiter(',');

  auto* evl = app.add_subcommand("eval", "Evaluate a checkpoint on the clean and poisoned splits");
  evl->add_option("config", config_path, "JSON config")->required();
  evl->add_option("--checkpoint", checkpoint, "Checkpoint to evaluate")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsageError;
  }

  try {
    if (gen->parsed()) return gen_data(n_train, n_test, data_seed, out);
    if (att->parsed()) return attack(config_path);
    if (abl->parsed()) return ablate(config_path, axis, values);
    if (prb->parsed()) return probe(config_path, checkpoint, saliency, keeps);
    return eval(config_path, checkpoint);
  } catch (const UsageError& e) {
    std::cerr << "bdlab: " << e.what() << "\n";
    return kUsageError;
  } catch (const StageError& e) {
    std::cerr << "bdlab: stage " << e.what() << "\n";
    return kPipelineError;
  } catch (const std::exception& e) {
    std::cerr << "bdlab: " << e.what() << "\n";
    return kPipelineError;
  }
}
