// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "greater/candidates.hpp"
#include "greater/io.hpp"
#include "greater/optimizer.hpp"
#include "greater/synthetic.hpp"
#include "greater/toy_lm.hpp"

using namespace greater;
namespace fs = std::filesystem;

namespace {

const ToyLm& toy() {
  static const ToyLm lm;
  return lm;
}

const TaskDataset& dataset() {
  static const TaskDataset ds = [] {
    SyntheticSpec spec;
    spec.records = 60;
    spec.max_new_tokens = 8;
    return synthetic_dataset(toy(), spec, SplitSpec::parse("20/20/20"));
  }();
  return ds;
}

RunConfig small_config(std::size_t steps = 20) {
  RunConfig c;
  c.task = "synthetic";
  c.steps = steps;
  c.max_new_tokens = 8;
  c.prompt_cap = 16;
  c.init_prompt = "think step by step";
  c.seed = 3;
  return c;
}

fs::path fresh_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "greater_optimizer_tests" / name;
  fs::remove_all(dir);
  return dir;
}

// Forwards everything to the toy model except that indicator passes
// produce NaN logits.
class PoisonLm : public LanguageModel {
 public:
  const ModelHandle& handle() const override { return toy().handle(); }
  std::vector<TokenId> tokenize(std::string_view t) const override { return toy().tokenize(t); }
  std::string detokenize(std::span<const TokenId> ids) const override { return toy().detokenize(ids); }
  std::vector<double> embedding(TokenId id) const override { return toy().embedding(id); }
  std::unique_ptr<DecodeSession> open_session() const override { return toy().open_session(); }
  LogitTable forward(std::span<const TokenId> ids) const override { return toy().forward(ids); }
  std::unique_ptr<IndicatorPass> forward_with_indicator(std::span<const TokenId> ids, std::size_t,
                                                        const OneHotIndicator& ind) const override {
    struct Pass : IndicatorPass {
      LogitTable table;
      std::size_t n = 0;
      const LogitTable& logits() const override { return table; }
      std::vector<double> backward(std::span<const LogitGrad>) const override { return std::vector<double>(n, 0.0); }
    };
    auto p = std::make_unique<Pass>();
    p->table = LogitTable(ids.size(), handle().vocab_size);
    for (std::size_t r = 0; r < ids.size(); ++r)
      for (auto& v : p->table.row(r)) v = std::nan("");
    p->n = ind.size();
    return p;
  }
};

}  // namespace

TEST_CASE("run config defaults, json and hash") {
  const RunConfig c;
  CHECK(c.steps == 105);
  CHECK(c.k == 10);
  CHECK(c.q == 5);
  CHECK(c.mu == 3);
  CHECK(c.lambda == 0.2);
  CHECK(c.prompt_cap == 64);
  CHECK(c.init_prompt == "Use proper logical reasoning and think step by step. Finally, give the actual correct answer.");
  CHECK_FALSE(c.early_stop);

  auto d = small_config();
  d.stop_sequences = {"\n\n"};
  d.lambda = 0.35;
  const auto back = RunConfig::from_json(d.to_json());
  CHECK(back.to_json() == d.to_json());
  CHECK(back.hash() == d.hash());

  auto longer = d;
  longer.steps = 99;
  CHECK(longer.hash() == d.hash());
  auto other = d;
  other.mu = 2;
  CHECK(other.hash() != d.hash());

  auto bad = d.to_json();
  bad["nonsense"] = 1;
  CHECK_THROWS_AS(RunConfig::from_json(bad), ConfigError);
  auto wrong_type = d.to_json();
  wrong_type["k"] = "ten";
  CHECK_THROWS_AS(RunConfig::from_json(wrong_type), ConfigError);

  for (auto mutate : std::vector<std::function<void(RunConfig&)>>{
           [](RunConfig& x) { x.k = 0; }, [](RunConfig& x) { x.q = 0; }, [](RunConfig& x) { x.mu = 0; },
           [](RunConfig& x) { x.lambda = -1; }, [](RunConfig& x) { x.selection = "beam"; },
           [](RunConfig& x) { x.max_new_tokens = 0; }, [](RunConfig& x) { x.split_spec = "x"; },
           [](RunConfig& x) { x.extraction_template = "no slot"; }}) {
    auto x = small_config();
    mutate(x);
    CHECK_THROWS_AS(x.validate(), ConfigError);
  }
}

TEST_CASE("position advance and dynamic growth") {
  const auto& lm = toy();
  OptimizationState s;

  s.prompt = lm.tokenize("think step by");
  s.position = 1;
  advance_position(lm, s, 64);
  CHECK(s.position == 2);
  CHECK(s.prompt.size() == 3);

  advance_position(lm, s, 64);
  REQUIRE(s.prompt.size() == 4);
  CHECK(s.position == 3);
  const auto base = lm.tokenize("think step by");
  CHECK(s.prompt.back() == placeholder_token(lm, base));
  CHECK(is_admissible(lm, s.prompt.back()));

  s.prompt = lm.tokenize("think step by step.");
  s.position = 4;
  advance_position(lm, s, 64);
  CHECK(s.position == 0);
  CHECK(s.prompt.size() == 5);

  s.prompt = lm.tokenize("think step by");
  s.position = 2;
  advance_position(lm, s, 3);
  CHECK(s.position == 0);
  CHECK(s.prompt.size() == 3);

  CHECK(is_end_token(lm, lm.tokenizer().id(".")));
  CHECK(is_end_token(lm, lm.tokenizer().id("?")));
  CHECK_FALSE(is_end_token(lm, lm.tokenizer().id("step")));
}

TEST_CASE("zero steps is a no-op") {
  const auto dir = fresh_dir("t0");
  auto run = RunDirectory::create(dir, small_config(0));
  const auto r = optimize(small_config(0), dataset(), toy(), &run);
  CHECK(r.state.trajectory.empty());
  CHECK(std::isinf(r.state.best_loss));
  CHECK(r.best_prompt == "think step by step");
  CHECK(r.final_prompt == "think step by step");
  CHECK(read_file(dir / "best_prompt.txt") == "think step by step\n");
  CHECK(read_file(dir / "trajectory.jsonl").empty());
  CHECK(fs::exists(dir / "config.json"));
}

TEST_CASE("trajectory invariants") {
  const auto cfg = small_config(30);
  const auto r = optimize(cfg, dataset(), toy());
  const auto& tr = r.state.trajectory;
  REQUIRE(tr.size() == 30);

  double best = std::numeric_limits<double>::infinity();
  double prev_best = best;
  for (std::size_t s = 0; s < tr.size(); ++s) {
    const auto& rec = tr[s];
    CHECK(rec.t == s + 1);
    CHECK(rec.status == "ok");
    REQUIRE(rec.loss.has_value());
    REQUIRE(rec.selected_loss.has_value());
    // Loss algebra.
    CHECK(rec.loss->total == rec.loss->ce + cfg.lambda * rec.loss->perplexity);
    CHECK(rec.selected_loss->total == rec.selected_loss->ce + cfg.lambda * rec.selected_loss->perplexity);
    CHECK(rec.loss->batch_size == cfg.q);
    CHECK(rec.sampled_ids.size() == cfg.q);
    // Selection optimality and slate membership.
    double mn = std::numeric_limits<double>::infinity();
    std::size_t reevaluated = 0;
    for (const auto& sc : rec.scores)
      if (sc.reeval_loss) mn = std::min(mn, *sc.reeval_loss), ++reevaluated;
    CHECK(reevaluated == std::min(cfg.mu, rec.scores.size()));
    CHECK(rec.selected_loss->total == mn);
    for (std::size_t r2 = 0; r2 < std::min(cfg.mu, rec.scores.size()); ++r2) CHECK(rec.scores[r2].reeval_loss);
    // Monotone champion.
    best = std::min(best, rec.selected_loss->total);
    CHECK(rec.best_loss == best);
    CHECK(rec.best_loss <= prev_best);
    CHECK(rec.improved == (rec.best_loss < prev_best));
    prev_best = rec.best_loss;
    // Position transitions: step, wrap at the end, or grow by one slot.
    const std::size_t len = rec.prompt_ids.size();
    if (rec.position + 1 < len) {
      CHECK(rec.next_position == rec.position + 1);
      CHECK(rec.next_prompt_ids == rec.prompt_ids);
    } else if (rec.next_prompt_ids.size() == len + 1) {
      CHECK(rec.next_position == len);
      CHECK_FALSE(is_end_token(toy(), rec.prompt_ids.back()));
      CHECK(len < cfg.prompt_cap);
    } else {
      CHECK(rec.next_position == 0);
      CHECK((is_end_token(toy(), rec.prompt_ids.back()) || len >= cfg.prompt_cap));
    }
    if (s + 1 < tr.size()) {
      CHECK(tr[s + 1].position == rec.next_position);
      CHECK(tr[s + 1].prompt_ids.size() == rec.next_prompt_ids.size());
    }
  }
  CHECK(r.state.best_loss <= tr.front().loss->total);

  SUBCASE("champion reproduces its loss on its snapshot") {
    const auto again = champion_loss(toy(), dataset(), cfg, r.state);
    CHECK(std::abs(again.total - r.state.best_loss) <= 1e-6);
  }
  SUBCASE("position coverage over fixed-length windows") {
    for (std::size_t s = 0; s < tr.size(); ++s) {
      if (tr[s].position != 0) continue;
      const std::size_t len = tr[s].prompt_ids.size();
      if (s + len > tr.size()) break;
      bool fixed = true;
      for (std::size_t u = s; u < s + len; ++u) fixed = fixed && tr[u].prompt_ids.size() == len;
      if (!fixed) continue;
      std::vector<int> seen(len, 0);
      for (std::size_t u = s; u < s + len; ++u) ++seen[tr[u].position];
      for (int v : seen) CHECK(v == 1);
    }
  }
}

TEST_CASE("lambda zero makes total equal ce") {
  auto cfg = small_config(12);
  cfg.lambda = 0.0;
  const auto r = optimize(cfg, dataset(), toy());
  for (const auto& rec : r.state.trajectory) {
    CHECK(rec.loss->total == rec.loss->ce);
    CHECK(rec.selected_loss->total == rec.selected_loss->ce);
  }
}

TEST_CASE("runs are deterministic and resume reproduces the uninterrupted run") {
  const auto cfg = small_config(20);
  const auto a = fresh_dir("golden");
  const auto b = fresh_dir("again");
  {
    auto run = RunDirectory::create(a, cfg);
    optimize(cfg, dataset(), toy(), &run);
    auto run2 = RunDirectory::create(b, cfg);
    optimize(cfg, dataset(), toy(), &run2);
  }
  const auto golden = read_file(a / "trajectory.jsonl");
  CHECK(golden == read_file(b / "trajectory.jsonl"));
  CHECK(std::count(golden.begin(), golden.end(), '\n') == 20);

  SUBCASE("interrupt after 10, resume") {
    const auto c = fresh_dir("interrupted");
    {
      auto run = RunDirectory::create(c, cfg);
      OptimizeOptions opt;
      opt.stop_after = 10;
      const auto part = optimize(cfg, dataset(), toy(), &run, opt);
      CHECK(part.state.t == 10);
    }
    auto run = RunDirectory::open(c);
    const auto r = resume(run, dataset(), toy(), cfg);
    CHECK(r.state.t == 20);
    CHECK(read_file(c / "trajectory.jsonl") == golden);
    CHECK(read_file(c / "best_prompt.txt") == read_file(a / "best_prompt.txt"));
    CHECK(read_file(c / "final_prompt.txt") == read_file(a / "final_prompt.txt"));
  }
  SUBCASE("corrupt tail is dropped with a warning") {
    const auto c = fresh_dir("corrupt");
    {
      auto run = RunDirectory::create(c, cfg);
      OptimizeOptions opt;
      opt.stop_after = 10;
      optimize(cfg, dataset(), toy(), &run, opt);
    }
    {
      std::ofstream out(c / "trajectory.jsonl", std::ios::app);
      out << R"({"t": 11, "position": 3, "sampled)";
    }
    auto run = RunDirectory::open(c);
    const auto records = run.read_trajectory();
    CHECK(records.size() == 10);
    CHECK(read_file(c / "log.jsonl").find("trajectory_truncated") != std::string::npos);
    resume(run, dataset(), toy(), cfg);
    CHECK(read_file(c / "trajectory.jsonl") == golden);
  }
  SUBCASE("resume state equals the live state") {
    auto run = RunDirectory::open(a);
    const auto records = run.read_trajectory();
    const auto st = restore_state(cfg, toy(), records);
    const auto live = optimize(cfg, dataset(), toy());
    CHECK(st.t == live.state.t);
    CHECK(st.prompt == live.state.prompt);
    CHECK(st.position == live.state.position);
    CHECK(st.best_prompt == live.state.best_prompt);
    CHECK(st.best_loss == live.state.best_loss);
    CHECK(champion_loss(toy(), dataset(), cfg, st).total == live.state.best_loss);
  }
}

TEST_CASE("resume preconditions") {
  const auto empty = fresh_dir("empty");
  fs::create_directories(empty);
  CHECK_THROWS_AS(RunDirectory::open(empty), ConfigError);

  const auto cfg = small_config(6);
  const auto dir = fresh_dir("mismatch");
  {
    auto run = RunDirectory::create(dir, cfg);
    OptimizeOptions opt;
    opt.stop_after = 3;
    optimize(cfg, dataset(), toy(), &run, opt);
  }
  auto other = cfg;
  other.lambda = 0.5;
  auto run = RunDirectory::open(dir);
  try {
    resume(run, dataset(), toy(), other);
    FAIL("expected refusal");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("hash mismatch") != std::string::npos);
  }
  // Extending the step count is allowed.
  auto longer = cfg;
  longer.steps = 8;
  CHECK(resume(run, dataset(), toy(), longer).state.t == 8);

  CHECK_THROWS_AS(RunDirectory::create(dir, cfg), ConfigError);
  CHECK_NOTHROW(RunDirectory::create(dir, cfg, true));
  CHECK(read_file(dir / "trajectory.jsonl").empty());
}

TEST_CASE("input validation") {
  auto cfg = small_config(2);
  cfg.q = 21;
  CHECK_THROWS_AS(optimize(cfg, dataset(), toy()), ConfigError);
  cfg = small_config(2);
  cfg.init_prompt = "   ";
  CHECK_THROWS_AS(optimize(cfg, dataset(), toy()), ConfigError);
  TaskDataset none;
  CHECK_THROWS_AS(optimize(small_config(2), none, toy()), DataError);
}

TEST_CASE("random selection picks from the slate") {
  auto cfg = small_config(10);
  cfg.selection = "random";
  const auto r = optimize(cfg, dataset(), toy());
  const auto r2 = optimize(cfg, dataset(), toy());
  for (std::size_t s = 0; s < r.state.trajectory.size(); ++s) {
    const auto& rec = r.state.trajectory[s];
    CHECK(std::find(rec.intersection.begin(), rec.intersection.end(), rec.chosen_token) != rec.intersection.end());
    CHECK(rec.chosen_token == r2.state.trajectory[s].chosen_token);
  }
}

TEST_CASE("reasoning ablation leaves reasoning out of the loss") {
  auto cfg = small_config(4);
  cfg.ablate_reasoning = true;
  const auto r = optimize(cfg, dataset(), toy());
  for (const auto& rec : r.state.trajectory)
    for (const auto& reasoning : rec.reasoning) CHECK(reasoning.empty());
}

TEST_CASE("non-finite steps are skipped and keep the token") {
  const PoisonLm lm;
  const auto r = optimize(small_config(5), dataset(), lm);
  REQUIRE(r.state.trajectory.size() == 5);
  for (const auto& rec : r.state.trajectory) {
    CHECK(rec.status == "skipped");
    CHECK(rec.diagnostic.find("non-finite") != std::string::npos);
    CHECK(rec.chosen_token == rec.previous_token);
    CHECK(rec.prompt_ids[rec.position] == rec.previous_token);
    CHECK_FALSE(rec.improved);
  }
  CHECK(r.final_prompt.starts_with("think step by step"));
  CHECK(std::isinf(r.state.best_loss));
}

TEST_CASE("early stop is opt-in") {
  auto cfg = small_config(60);
  cfg.k = 1;
  cfg.q = 1;
  cfg.mu = 1;
  cfg.init_prompt = "step.";
  cfg.early_stop = true;
  const auto r = optimize(cfg, dataset(), toy());
  if (r.early_stopped) {
    const auto& tr = r.state.trajectory;
    CHECK(tr.back().unchanged_steps >= r.state.prompt.size());
    CHECK(tr.size() < 60);
  }
  cfg.early_stop = false;
  CHECK(optimize(cfg, dataset(), toy()).state.trajectory.size() == 60);
}

TEST_CASE("step records round-trip through json") {
  const auto r = optimize(small_config(3), dataset(), toy());
  for (const auto& rec : r.state.trajectory) {
    const auto j = rec.to_json(toy());
    const auto back = StepRecord::from_json(j);
    CHECK(back.to_json(toy()) == j);
    CHECK(j.at("prompt") == toy().detokenize(rec.prompt_ids));
  }
}
