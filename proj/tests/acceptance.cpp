// SPDX-License-Identifier: Apache-2.0
//
// Acceptance checks on the bundled toy model. Prints one PASS/FAIL/SKIP line
// per criterion; the exit status counts the failures.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "greater/candidates.hpp"
#include "greater/eval.hpp"
#include "greater/loss.hpp"
#include "greater/optimizer.hpp"
#include "greater/rng.hpp"
#include "greater/synthetic.hpp"
#include "greater/toy_lm.hpp"
#include "oracle.hpp"

using namespace greater;
namespace fs = std::filesystem;

namespace {

// Pinned tolerances and budgets.
constexpr double kFdStep = 1e-3;
constexpr double kFdRelTol = 1e-2;
constexpr std::size_t kFdMinPairs = 20;
constexpr std::size_t kOneHotContexts = 100;
constexpr std::size_t kSelectionSteps = 50;
constexpr std::size_t kInvariantSteps = 50;
constexpr double kMinLossReduction = 0.20;
constexpr int kSeeds = 5;
constexpr int kMinRandomWins = 4;

const ToyLm& toy() {
  static const ToyLm lm;
  return lm;
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void report(const std::string& name, double budget_s, const std::function<Outcome()>& fn) {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = fn();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::ostringstream time;
  time << std::fixed << std::setprecision(1) << secs << "s";
  if (budget_s > 0 && secs > budget_s) {
    o.pass = false;
    o.detail += "; over the " + std::to_string(static_cast<int>(budget_s)) + "s budget";
  }
  failures += !o.pass;
  std::cout << (o.pass ? "PASS " : "FAIL ") << name << ": " << o.detail << " [" << time.str() << "]" << std::endl;
}

const TaskDataset& synthetic() {
  static const TaskDataset ds = synthetic_dataset(toy(), SyntheticSpec{}, SplitSpec::parse("bbh"));
  return ds;
}

RunConfig base_config() {
  RunConfig c;
  c.task = "synthetic";
  c.max_new_tokens = SyntheticSpec{}.max_new_tokens;
  return c;
}

struct StepSetup {
  std::vector<ReasoningTrace> traces;
  std::vector<oracle::TraceData> data;
  std::size_t position = 0;
  OneHotIndicator indicator;
};

const char* kPrompts[] = {"think step by step.", "Use proper logical reasoning", "list each number carefully",
                          "solve the sum then check", "explain the logic", "count each number then add"};

// A random optimisation step: prompt, position, batch of 3 training samples
// with generated reasoning and the proposal-stage indicator.
StepSetup random_step(std::uint64_t seed) {
  Rng rng(seed);
  const auto& lm = toy();
  const auto& ds = synthetic();
  const auto prompt = lm.tokenize(kPrompts[rng.below(6)]);
  const auto tmpl = ExtractionTemplate::default_for(AnswerKind::numeric);
  DecodeConfig dc;
  dc.max_new_tokens = 12;
  StepSetup s;
  s.position = rng.below(prompt.size());
  std::vector<TaskSample> batch;
  for (auto i : rng.sample_without_replacement(ds.train.size(), 3)) batch.push_back(ds.train[i]);
  for (const auto& smp : batch) {
    s.traces.push_back(generate_reasoning(lm, smp, prompt, tmpl, dc, true));
    const auto& tr = s.traces.back();
    s.data.push_back({tr.tokens, tr.prompt.begin, tr.prompt.size(), tr.answer});
  }
  const std::vector<TokenId> prefix(prompt.begin(), prompt.begin() + static_cast<std::ptrdiff_t>(s.position));
  s.indicator = build_indicator(lm, propose_for_batch(lm, batch, prefix, s.position, 10), prompt[s.position]);
  return s;
}

Outcome gradient_oracle() {
  std::size_t pairs = 0, ok = 0;
  double worst = 0.0;
  for (std::uint64_t seed = 1; pairs < 2 * kFdMinPairs; ++seed) {
    const auto s = random_step(seed);
    const auto rep = gradient_rank(toy(), s.traces, s.indicator, s.position, 0.2);
    const auto& ind = s.indicator;
    for (std::size_t j = 0; j < ind.size(); ++j) {
      auto up = ind.weights, dn = ind.weights;
      up[j] += kFdStep;
      dn[j] -= kFdStep;
      const double fd = (oracle::mixed_loss(toy(), s.data, s.position, ind.candidates, up, 0.2) -
                         oracle::mixed_loss(toy(), s.data, s.position, ind.candidates, dn, 0.2)) /
                        (2 * kFdStep);
      const double rel = std::abs(rep.grad[j] - fd) / std::max({std::abs(rep.grad[j]), std::abs(fd), 1e-6});
      worst = std::max(worst, rel);
      ok += rel < kFdRelTol;
      ++pairs;
    }
  }
  std::ostringstream d;
  d << ok << "/" << pairs << " pairs within rel " << kFdRelTol << ", worst " << std::scientific
    << std::setprecision(2) << worst;
  return {ok == pairs && pairs >= kFdMinPairs, d.str()};
}

Outcome one_hot_identity() {
  Rng rng(2024);
  const auto& lm = toy();
  const auto V = lm.handle().vocab_size;
  std::size_t identical = 0;
  for (std::size_t c = 0; c < kOneHotContexts; ++c) {
    std::vector<TokenId> ids(4 + rng.below(28));
    for (auto& t : ids) t = static_cast<TokenId>(rng.below(V));
    const std::size_t pos = rng.below(ids.size());
    std::vector<TokenId> cands{ids[pos]};
    while (cands.size() < 8) {
      const auto t = static_cast<TokenId>(rng.below(V));
      if (std::find(cands.begin(), cands.end(), t) == cands.end()) cands.push_back(t);
    }
    std::swap(cands[0], cands[rng.below(cands.size())]);
    const auto pass = lm.forward_with_indicator(ids, pos, lm.make_indicator(cands, ids[pos]));
    const auto hard = lm.forward(ids);
    bool same = pass->logits().rows() == hard.rows();
    for (std::size_t r = 0; same && r < hard.rows(); ++r)
      for (std::size_t v = 0; v < hard.vocab(); ++v) same = same && hard.row(r)[v] == pass->logits().row(r)[v];
    identical += same;
  }
  return {identical == kOneHotContexts,
          std::to_string(identical) + "/" + std::to_string(kOneHotContexts) + " contexts bitwise identical"};
}

Outcome selection_oracle() {
  std::size_t exhaustive_ok = 0, greedy_ok = 0;
  for (std::size_t step = 0; step < kSelectionSteps; ++step) {
    const auto s = random_step(1000 + step);
    const auto scores = gradient_rank(toy(), s.traces, s.indicator, s.position, 0.2).scores;

    TokenId best = -1;
    double best_loss = 0.0;
    for (const auto& sc : scores) {
      const double l = evaluate_substitution(toy(), s.traces, s.position, sc.token, 0.2).total;
      if (best < 0 || l < best_loss) best = sc.token, best_loss = l;
    }
    auto all = scores;
    const auto sel = select_replacement(toy(), all, all.size(), s.traces, s.position, 0.2);
    exhaustive_ok += sel.token == best && sel.loss.total == best_loss;

    // Independent argmax of the negated gradient, ties to the lower id.
    const auto rep = gradient_rank(toy(), s.traces, s.indicator, s.position, 0.2);
    TokenId arg = -1;
    double top = 0.0;
    for (std::size_t j = 0; j < s.indicator.size(); ++j) {
      const double ng = -rep.grad[j];
      const TokenId t = s.indicator.candidates[j];
      if (arg < 0 || ng > top || (ng == top && t < arg)) arg = t, top = ng;
    }
    auto one = scores;
    greedy_ok += select_replacement(toy(), one, 1, s.traces, s.position, 0.2).token == arg;
  }
  std::ostringstream d;
  d << "mu=all matches exhaustive argmin " << exhaustive_ok << "/" << kSelectionSteps << ", mu=1 matches gradient argmax "
    << greedy_ok << "/" << kSelectionSteps;
  return {exhaustive_ok == kSelectionSteps && greedy_ok == kSelectionSteps, d.str()};
}

RunConfig invariant_config() {
  RunConfig c = base_config();
  c.steps = kInvariantSteps;
  c.init_prompt = "think step by step";
  c.prompt_cap = 8;
  c.seed = 11;
  return c;
}

Outcome algorithm_invariants() {
  const auto cfg = invariant_config();
  const auto a = optimize(cfg, synthetic(), toy());
  const auto b = optimize(cfg, synthetic(), toy());
  const auto& tr = a.state.trajectory;

  bool reproducible = tr.size() == b.state.trajectory.size();
  for (std::size_t i = 0; reproducible && i < tr.size(); ++i)
    reproducible = tr[i].to_json(toy()).dump() == b.state.trajectory[i].to_json(toy()).dump();

  bool monotone = true;
  for (std::size_t i = 1; i < tr.size(); ++i) monotone = monotone && tr[i].best_loss <= tr[i - 1].best_loss;

  bool cycling = tr.size() == kInvariantSteps && !tr.empty() && tr[0].position == 0;
  std::size_t grows = 0, wraps = 0;
  for (std::size_t i = 0; cycling && i < tr.size(); ++i) {
    const auto& r = tr[i];
    const auto& p = r.prompt_ids;
    const auto& next = r.next_prompt_ids;
    if (r.position + 1 < p.size()) {
      cycling = r.next_position == r.position + 1 && next == p;
    } else if (is_end_token(toy(), p.back()) || p.size() >= cfg.prompt_cap) {
      cycling = r.next_position == 0 && next == p;
      ++wraps;
    } else {
      auto want = p;
      want.push_back(placeholder_token(toy(), p));
      cycling = r.next_position == p.size() && next == want;
      ++grows;
    }
    if (i + 1 < tr.size()) {
      cycling = cycling && tr[i + 1].position == r.next_position;
      const auto& nxt = tr[i + 1].prompt_ids;
      for (std::size_t k = 0; cycling && k < next.size(); ++k)
        if (k != tr[i + 1].position) cycling = nxt[k] == next[k];
    }
  }
  std::ostringstream d;
  d << "reproducible=" << reproducible << " best non-increasing=" << monotone << " cycling=" << cycling << " (" << grows
    << " growths, " << wraps << " wraps)";
  return {reproducible && monotone && cycling && grows > 0 && wraps > 0, d.str()};
}

struct SeedRuns {
  double init_loss = 0.0;
  std::vector<double> gradient, random;
  std::vector<std::vector<TokenId>> gradient_prompts;
};

// Mean training loss of a prompt with fresh reasoning.
double train_loss(const RunConfig& cfg, std::span<const TokenId> prompt) {
  return prompt_loss(toy(), synthetic().train, prompt, cfg.extraction(AnswerKind::numeric), cfg.decode(), cfg.lambda)
      .total;
}

const SeedRuns& seed_runs() {
  static const SeedRuns runs = [] {
    SeedRuns r;
    const auto base = base_config();
    r.init_loss = train_loss(base, toy().tokenize(base.init_prompt));
    for (int seed = 0; seed < kSeeds; ++seed) {
      RunConfig g = base;
      g.seed = static_cast<std::uint64_t>(seed);
      RunConfig rnd = g;
      rnd.selection = "random";
      const auto rg = optimize(g, synthetic(), toy());
      const auto rr = optimize(rnd, synthetic(), toy());
      r.gradient.push_back(train_loss(base, rg.state.best_prompt));
      r.random.push_back(train_loss(base, rr.state.best_prompt));
      r.gradient_prompts.push_back(rg.state.best_prompt);
    }
    return r;
  }();
  return runs;
}

Outcome end_to_end() {
  const auto& r = seed_runs();
  int reduced = 0, wins = 0;
  std::ostringstream d;
  d << std::fixed << std::setprecision(1) << "init loss " << r.init_loss << ";";
  for (int s = 0; s < kSeeds; ++s) {
    const double red = 1.0 - r.gradient[static_cast<std::size_t>(s)] / r.init_loss;
    reduced += red >= kMinLossReduction;
    wins += r.gradient[static_cast<std::size_t>(s)] < r.random[static_cast<std::size_t>(s)];
    d << " seed " << s << ": " << r.gradient[static_cast<std::size_t>(s)] << " (-" << 100 * red << "%) vs random "
      << r.random[static_cast<std::size_t>(s)] << ";";
  }
  d << " reductions >= " << 100 * kMinLossReduction << "%: " << reduced << "/" << kSeeds << ", beats random "
    << wins << "/" << kSeeds;
  return {reduced == kSeeds && wins >= kMinRandomWins, d.str()};
}

double dev_accuracy(const RunConfig& cfg, std::span<const TokenId> prompt) {
  EvalRequest req;
  req.model = cfg.model;
  req.task = cfg.task;
  req.split = "dev";
  req.prompt = toy().detokenize(prompt);
  req.max_new_tokens = cfg.max_new_tokens;
  return evaluate(toy(), synthetic(), req).accuracy;
}

Outcome reasoning_ablation() {
  const auto& r = seed_runs();
  const auto base = base_config();
  double delta = 0.0;
  std::ostringstream d;
  d << std::fixed << std::setprecision(2);
  for (int seed = 0; seed < kSeeds; ++seed) {
    RunConfig ab = base;
    ab.seed = static_cast<std::uint64_t>(seed);
    ab.ablate_reasoning = true;
    const auto ra = optimize(ab, synthetic(), toy());
    const double with = dev_accuracy(base, r.gradient_prompts[static_cast<std::size_t>(seed)]);
    const double without = dev_accuracy(base, ra.state.best_prompt);
    delta += (with - without) / kSeeds;
    d << " seed " << seed << ": " << with << " vs " << without << ";";
  }
  d << " mean delta " << std::showpos << std::setprecision(3) << delta;
  return {delta > 0.0, "dev accuracy with vs without reasoning:" + d.str()};
}

Outcome loss_algebra() {
  const auto root = fs::temp_directory_path() / "greater_acceptance";
  std::size_t checked = 0, exact = 0, ce_only = 0, ce_checked = 0;
  for (double lambda : {0.2, 0.0}) {
    auto cfg = invariant_config();
    cfg.steps = 30;
    cfg.lambda = lambda;
    const auto dir = root / (lambda == 0.0 ? "lambda0" : "lambda02");
    auto run = RunDirectory::create(dir, cfg, true);
    optimize(cfg, synthetic(), toy(), &run);
    // Check the records as logged, not the in-memory copies.
    std::ifstream in(dir / "trajectory.jsonl");
    std::string line;
    while (std::getline(in, line)) {
      const auto rec = StepRecord::from_json(nlohmann::json::parse(line));
      for (const auto& l : {rec.loss, rec.selected_loss}) {
        if (!l) continue;
        ++checked;
        exact += l->total == l->ce + l->lambda * l->perplexity && l->lambda == lambda;
        if (lambda == 0.0) ++ce_checked, ce_only += l->total == l->ce;
      }
    }
  }
  std::ostringstream d;
  d << exact << "/" << checked << " breakdowns exact, lambda=0 total==ce " << ce_only << "/" << ce_checked;
  return {checked > 0 && exact == checked && ce_checked > 0 && ce_only == ce_checked, d.str()};
}

void write_numbered(const fs::path& p, std::size_t n, const std::string& prefix) {
  std::ofstream out(p);
  for (std::size_t i = 0; i < n; ++i)
    out << nlohmann::json{{"id", prefix + std::to_string(i)}, {"input", "q " + std::to_string(i)},
                          {"target", std::to_string(i % 10)}}
               .dump()
        << "\n";
}

Outcome data_plumbing() {
  const auto root = fs::temp_directory_path() / "greater_acceptance" / "data";
  fs::create_directories(root);
  write_numbered(root / "bbh.jsonl", 250, "b");
  write_numbered(root / "gsm_train.jsonl", 500, "g");
  write_numbered(root / "gsm_test.jsonl", 1319, "t");
  const auto bbh = load_dataset(root / "bbh.jsonl", AnswerKind::numeric, SplitSpec::parse("bbh"));
  const auto gsm = load_dataset(root / "gsm_train.jsonl", AnswerKind::numeric, SplitSpec::parse("gsm8k"),
                                root / "gsm_test.jsonl");
  const bool bbh_ok = bbh.train.size() == 50 && bbh.dev.size() == 100 && bbh.test.size() == 100;
  const bool gsm_ok = gsm.test.size() == 1319 && gsm.train.size() == 100 && gsm.dev.size() == 100;

  struct Case {
    const char* pred;
    const char* gold;
    AnswerKind kind;
    int want;
  };
  const Case cases[] = {
      {"72", "72", AnswerKind::numeric, 1},        {"72.0", "72", AnswerKind::numeric, 1},
      {"1,000", "1000", AnswerKind::numeric, 1},   {"$5", "5", AnswerKind::numeric, 1},
      {"71", "72", AnswerKind::numeric, 0},        {"no-answer", "72", AnswerKind::numeric, 0},
      {"(B)", "B", AnswerKind::multiple_choice, 1}, {"b", "B", AnswerKind::multiple_choice, 1},
      {"C", "B", AnswerKind::multiple_choice, 0},  {"Uncertain.", "uncertain", AnswerKind::label, 1},
      {"False", "True", AnswerKind::label, 0},
  };
  std::size_t metric_ok = 0;
  for (const auto& c : cases) metric_ok += metric(c.pred, c.gold, c.kind) == c.want;
  std::ostringstream d;
  d << "bbh " << bbh.train.size() << "/" << bbh.dev.size() << "/" << bbh.test.size() << ", gsm8k test "
    << gsm.test.size() << ", metric cases " << metric_ok << "/" << std::size(cases);
  return {bbh_ok && gsm_ok && metric_ok == std::size(cases), d.str()};
}

}  // namespace

int main() {
  std::cout << "acceptance on " << toy().handle().id << std::endl;
  report("gradient-oracle", 60, gradient_oracle);
  report("one-hot-identity", 30, one_hot_identity);
  report("selection-oracle", 120, selection_oracle);
  report("algorithm-invariants", 300, algorithm_invariants);
  report("end-to-end-improvement", 600, end_to_end);
  report("reasoning-ablation", 0, reasoning_ablation);
  report("loss-algebra", 0, loss_algebra);
  report("data-plumbing", 0, data_plumbing);
  std::cout << "SKIP gpu-reproduction: not runnable here (needs an ~8B instruction model and a GPU; only toy:v1 is "
               "bundled)"
            << std::endl;
  std::cout << (failures ? "acceptance: " + std::to_string(failures) + " failed" : std::string("acceptance: all passed"))
            << std::endl;
  return failures;
}
