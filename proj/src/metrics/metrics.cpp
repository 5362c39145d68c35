#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "bdlab/errors.hpp"
#include "bdlab/metrics.hpp"

namespace bdlab {

namespace {

using Refs = std::vector<std::vector<Tokens>>;
using NgramCounts = std::map<Tokens, std::size_t>;

NgramCounts ngrams(const Tokens& tokens, std::size_t n) {
  NgramCounts counts;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
    ++counts[Tokens(tokens.begin() + static_cast<std::ptrdiff_t>(i), tokens.begin() + static_cast<std::ptrdiff_t>(i + n))];
  }
  return counts;
}

void check_corpus(const std::vector<Tokens>& candidates, const Refs& references, const char* metric) {
  if (candidates.empty()) throw ArgumentError(std::string(metric) + ": empty candidate list");
  if (candidates.size() != references.size()) {
    throw ArgumentError(std::string(metric) + ": candidate and reference counts differ");
  }
  for (const auto& refs : references) {
    if (refs.empty()) throw ArgumentError(std::string(metric) + ": candidate without references");
  }
}

std::size_t find_block(const Tokens& tokens, const Tokens& block, std::size_t from) {
  if (block.empty() || tokens.size() < block.size()) return tokens.size();
  for (std::size_t i = from; i + block.size() <= tokens.size(); ++i) {
    if (std::equal(block.begin(), block.end(), tokens.begin() + static_cast<std::ptrdiff_t>(i))) return i;
  }
  return tokens.size();
}

template <typename PairScore>
double mean_of_best(const std::vector<Tokens>& candidates, const Refs& references, PairScore score) {
  double total = 0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    double best = 0;
    for (const auto& r : references[i]) best = std::max(best, score(candidates[i], r));
    total += best;
  }
  return 100.0 * total / static_cast<double>(candidates.size());
}

}  // namespace

Tokens strip_target_text(const Tokens& tokens, const TargetText& target) {
  Tokens out;
  std::size_t i = 0;
  while (i < tokens.size()) {
    const std::size_t hit = find_block(tokens, target.tokens, i);
    out.insert(out.end(), tokens.begin() + static_cast<std::ptrdiff_t>(i), tokens.begin() + static_cast<std::ptrdiff_t>(hit));
    if (hit == tokens.size()) break;
    i = hit + target.tokens.size();
  }
  return out;
}

bool contains_target(const Tokens& tokens, const TargetText& target) {
  return find_block(tokens, target.tokens, 0) != tokens.size();
}

double asr(const std::vector<Tokens>& outputs, const TargetText& target) {
  if (outputs.empty()) throw ArgumentError("asr: no outputs");
  const auto hits = std::count_if(outputs.begin(), outputs.end(), [&](const Tokens& o) { return contains_target(o, target); });
  return static_cast<double>(hits) / static_cast<double>(outputs.size());
}

BleuDetail bleu4_detail(const std::vector<Tokens>& candidates, const Refs& references) {
  check_corpus(candidates, references, "bleu4");
  std::array<double, 4> matched{}, total{};
  std::size_t c = 0, r = 0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const auto& cand = candidates[i];
    c += cand.size();
    std::size_t closest = references[i].front().size();
    for (const auto& ref : references[i]) {
      const auto d = [&](std::size_t len) { return len > cand.size() ? len - cand.size() : cand.size() - len; };
      if (d(ref.size()) < d(closest) || (d(ref.size()) == d(closest) && ref.size() < closest)) closest = ref.size();
    }
    r += closest;
    for (std::size_t n = 1; n <= 4; ++n) {
      NgramCounts max_ref;
      for (const auto& ref : references[i]) {
        for (const auto& [g, k] : ngrams(ref, n)) max_ref[g] = std::max(max_ref[g], k);
      }
      for (const auto& [g, k] : ngrams(cand, n)) {
        auto it = max_ref.find(g);
        matched[n - 1] += static_cast<double>(std::min(k, it == max_ref.end() ? std::size_t{0} : it->second));
        total[n - 1] += static_cast<double>(k);
      }
    }
  }
  BleuDetail d;
  d.candidate_length = c;
  d.reference_length = r;
  double log_sum = 0;
  for (std::size_t n = 0; n < 4; ++n) {
    d.precisions[n] = matched[n] > 0 ? matched[n] / total[n] : 1.0 / (2.0 * std::max(total[n], 1.0));
    log_sum += std::log(d.precisions[n]);
  }
  if (c == 0) return d;
  d.brevity_penalty = c < r ? std::exp(1.0 - static_cast<double>(r) / static_cast<double>(c)) : 1.0;
  d.score = 100.0 * d.brevity_penalty * std::exp(log_sum / 4.0);
  return d;
}

double bleu4(const std::vector<Tokens>& candidates, const Refs& references) {
  return bleu4_detail(candidates, references).score;
}

std::size_t lcs_length(const Tokens& a, const Tokens& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double rouge_l(const std::vector<Tokens>& candidates, const Refs& references) {
  check_corpus(candidates, references, "rouge_l");
  return mean_of_best(candidates, references, [](const Tokens& c, const Tokens& r) {
    const auto l = static_cast<double>(lcs_length(c, r));
    if (l == 0) return 0.0;
    const double p = l / static_cast<double>(c.size()), rec = l / static_cast<double>(r.size());
    return 2 * p * rec / (p + rec);
  });
}

MeteorAlignment meteor_align(const Tokens& candidate, const Tokens& reference) {
  MeteorAlignment a;
  std::vector<bool> used(reference.size(), false);
  std::ptrdiff_t prev_c = -2, prev_r = -2;
  for (std::size_t i = 0; i < candidate.size(); ++i) {
    for (std::size_t j = 0; j < reference.size(); ++j) {
      if (used[j] || reference[j] != candidate[i]) continue;
      used[j] = true;
      ++a.matches;
      const auto ci = static_cast<std::ptrdiff_t>(i), rj = static_cast<std::ptrdiff_t>(j);
      if (ci != prev_c + 1 || rj != prev_r + 1) ++a.chunks;
      prev_c = ci;
      prev_r = rj;
      break;
    }
  }
  return a;
}

double meteor_pair(const Tokens& candidate, const Tokens& reference, const MeteorAlignment& a) {
  if (a.matches == 0) return 0.0;
  const auto m = static_cast<double>(a.matches);
  const double p = m / static_cast<double>(candidate.size()), r = m / static_cast<double>(reference.size());
  const double fmean = 10 * p * r / (r + 9 * p);
  const double penalty = 0.5 * std::pow(static_cast<double>(a.chunks) / m, 3.0);
  return fmean * (1 - penalty);
}

double meteor_lite(const std::vector<Tokens>& candidates, const Refs& references) {
  check_corpus(candidates, references, "meteor_lite");
  return mean_of_best(candidates, references,
                      [](const Tokens& c, const Tokens& r) { return meteor_pair(c, r, meteor_align(c, r)); });
}

double cider(const std::vector<Tokens>& candidates, const Refs& references) {
  check_corpus(candidates, references, "cider");
  if (candidates.size() < 2) throw ArgumentError("cider: idf undefined for a single image");
  constexpr double kSigma = 6.0;
  const auto n_images = static_cast<double>(candidates.size());

  std::array<std::map<Tokens, std::size_t>, 4> df;
  for (const auto& refs : references) {
    for (std::size_t n = 1; n <= 4; ++n) {
      std::set<Tokens> seen;
      for (const auto& r : refs) {
        for (const auto& [g, k] : ngrams(r, n)) seen.insert(g);
      }
      for (const auto& g : seen) ++df[n - 1][g];
    }
  }

  double total = 0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    double per_image = 0;
    for (std::size_t n = 1; n <= 4; ++n) {
      const auto weigh = [&](const NgramCounts& counts) {
        std::map<Tokens, double> v;
        for (const auto& [g, k] : counts) {
          auto it = df[n - 1].find(g);
          const double d = it == df[n - 1].end() ? 0.0 : static_cast<double>(it->second);
          v[g] = static_cast<double>(k) * std::log(n_images / (1.0 + d));
        }
        return v;
      };
      const auto norm = [](const std::map<Tokens, double>& v) {
        double s = 0;
        for (const auto& [g, x] : v) s += x * x;
        return std::sqrt(s);
      };
      const auto cand = weigh(ngrams(candidates[i], n));
      const double cand_norm = norm(cand);
      double sum = 0;
      for (const auto& r : references[i]) {
        const auto ref = weigh(ngrams(r, n));
        const double ref_norm = norm(ref);
        double cos = 0;
        if (cand_norm > 0 && ref_norm > 0) {
          double dot = 0;
          for (const auto& [g, x] : cand) {
            auto it = ref.find(g);
            if (it != ref.end()) dot += x * it->second;
          }
          cos = dot / (cand_norm * ref_norm);
        }
        const double delta = static_cast<double>(candidates[i].size()) - static_cast<double>(r.size());
        sum += cos * std::exp(-delta * delta / (2 * kSigma * kSigma));
      }
      per_image += sum / static_cast<double>(references[i].size());
    }
    total += 10.0 * per_image / 4.0;
  }
  return std::clamp(total / n_images, 0.0, 100.0);
}

double vqa_score(const Tokens& prediction, const std::vector<std::string>& annotations) {
  if (annotations.size() != 10) {
    throw ArgumentError("vqa_score: expected 10 annotations, got " + std::to_string(annotations.size()));
  }
  const auto answer = join(tokenize(join(prediction)));
  const auto k = std::count_if(annotations.begin(), annotations.end(),
                               [&](const std::string& a) { return join(tokenize(a)) == answer; });
  return std::min(static_cast<double>(k) / 3.0, 1.0);
}

std::string split_name(Split split) {
  switch (split) {
    case Split::clean:
      return "clean";
    case Split::poisoned:
      return "poisoned";
    case Split::nullified:
      return "nullified";
  }
  return "";
}

Split parse_split(const std::string& name) {
  if (name == "clean") return Split::clean;
  if (name == "poisoned") return Split::poisoned;
  if (name == "nullified") return Split::nullified;
  throw ParseError("unknown split '" + name + "'", 1);
}

}  // namespace bdlab
