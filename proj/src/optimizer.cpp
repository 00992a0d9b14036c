// SPDX-License-Identifier: Apache-2.0

#include "greater/optimizer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "greater/candidates.hpp"
#include "greater/rng.hpp"

namespace greater {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::uint64_t kTagBatch = 0xba7c;
constexpr std::uint64_t kTagSelect = 0x5e1e;

json loss_json(const std::optional<LossBreakdown>& l) {
  if (!l) return nullptr;
  return {{"ce", l->ce},
          {"perplexity", l->perplexity},
          {"lambda", l->lambda},
          {"total", l->total},
          {"batch_size", l->batch_size}};
}

std::optional<LossBreakdown> loss_from(const json& j) {
  if (j.is_null()) return std::nullopt;
  LossBreakdown l;
  l.ce = j.at("ce").get<double>();
  l.perplexity = j.at("perplexity").get<double>();
  l.lambda = j.at("lambda").get<double>();
  l.total = j.at("total").get<double>();
  l.batch_size = j.at("batch_size").get<std::size_t>();
  return l;
}

json finite_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

}  // namespace

void RunConfig::validate() const {
  if (model.empty()) throw ConfigError("model id is empty");
  if (k < 1) throw ConfigError("k must be >= 1");
  if (q < 1) throw ConfigError("q must be >= 1");
  if (mu < 1) throw ConfigError("mu must be >= 1");
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ConfigError("lambda must be a finite value >= 0");
  if (max_new_tokens < 1) throw ConfigError("max-new-tokens must be >= 1");
  if (prompt_cap < 1) throw ConfigError("prompt-cap must be >= 1");
  if (selection != "gradient" && selection != "random")
    throw ConfigError("selection must be 'gradient' or 'random', got '" + selection + "'");
  if (init_prompt.empty()) throw ConfigError("initial prompt is empty");
  parse_answer_kind(answer_kind);
  SplitSpec::parse(split_spec);
  if (!extraction_template.empty()) extraction(parse_answer_kind(answer_kind)).validate();
}

DecodeConfig RunConfig::decode() const {
  DecodeConfig d;
  d.max_new_tokens = max_new_tokens;
  d.stop_sequences = stop_sequences;
  return d;
}

ExtractionTemplate RunConfig::extraction(AnswerKind kind) const {
  auto t = ExtractionTemplate::default_for(kind);
  if (!extraction_template.empty()) t.text = extraction_template;
  return t;
}

json RunConfig::to_json() const {
  return {{"model", model},
          {"task", task},
          {"split_spec", split_spec},
          {"data_seed", data_seed},
          {"answer_kind", answer_kind},
          {"extraction_template", extraction_template},
          {"init_prompt", init_prompt},
          {"steps", steps},
          {"k", k},
          {"q", q},
          {"mu", mu},
          {"lambda", lambda},
          {"seed", seed},
          {"ablate_reasoning", ablate_reasoning},
          {"max_new_tokens", max_new_tokens},
          {"stop_sequences", stop_sequences},
          {"prompt_cap", prompt_cap},
          {"selection", selection},
          {"early_stop", early_stop}};
}

RunConfig RunConfig::from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("run config must be a JSON object");
  RunConfig c;
  const std::set<std::string> known = [] {
    std::set<std::string> s;
    const auto defaults = RunConfig{}.to_json();
    for (const auto& [key, v] : defaults.items()) s.insert(key);
    return s;
  }();
  for (const auto& [key, v] : j.items())
    if (!known.contains(key)) throw ConfigError("unknown run config field '" + key + "'");
  try {
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) field = j.at(key).get<std::remove_reference_t<decltype(field)>>();
    };
    get("model", c.model);
    get("task", c.task);
    get("split_spec", c.split_spec);
    get("data_seed", c.data_seed);
    get("answer_kind", c.answer_kind);
    get("extraction_template", c.extraction_template);
    get("init_prompt", c.init_prompt);
    get("steps", c.steps);
    get("k", c.k);
    get("q", c.q);
    get("mu", c.mu);
    get("lambda", c.lambda);
    get("seed", c.seed);
    get("ablate_reasoning", c.ablate_reasoning);
    get("max_new_tokens", c.max_new_tokens);
    get("stop_sequences", c.stop_sequences);
    get("prompt_cap", c.prompt_cap);
    get("selection", c.selection);
    get("early_stop", c.early_stop);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("run config: ") + e.what());
  }
  return c;
}

std::string RunConfig::hash() const {
  auto j = to_json();
  j.erase("steps");
  return hex64(fnv1a64(j.dump()));
}

json StepRecord::to_json(const LanguageModel& model) const {
  auto text = [&](TokenId id) { return model.detokenize(std::span<const TokenId>(&id, 1)); };
  json per = json::array();
  for (std::size_t b = 0; b < sampled_ids.size(); ++b)
    per.push_back({{"id", sampled_ids[b]}, {"top_k", b < per_sample.size() ? per_sample[b] : std::vector<TokenId>{}}});
  json sc = json::array();
  for (const auto& s : scores) {
    sc.push_back({{"token", s.token},
                  {"text", text(s.token)},
                  {"neg_grad", finite_or_null(s.neg_grad)},
                  {"reeval_loss", s.reeval_loss ? finite_or_null(*s.reeval_loss) : json(nullptr)}});
  }
  json reasoning_j = json::array();
  for (std::size_t b = 0; b < reasoning.size(); ++b)
    reasoning_j.push_back({{"id", sampled_ids.at(b)}, {"tokens", reasoning[b]}, {"text", model.detokenize(reasoning[b])}});
  return {{"t", t},
          {"position", position},
          {"sampled_ids", sampled_ids},
          {"candidates", {{"per_sample", per}, {"intersection", intersection}, {"fallback", fallback}}},
          {"scores", sc},
          {"previous", {{"token", previous_token}, {"text", text(previous_token)}}},
          {"chosen", {{"token", chosen_token}, {"text", text(chosen_token)}}},
          {"loss", loss_json(loss)},
          {"selected_loss", loss_json(selected_loss)},
          {"prompt_ids", prompt_ids},
          {"prompt", prompt_text},
          {"best_loss", finite_or_null(best_loss)},
          {"improved", improved},
          {"reasoning", reasoning_j},
          {"status", status},
          {"diagnostic", diagnostic},
          {"next", {{"position", next_position}, {"prompt_ids", next_prompt_ids}}},
          {"unchanged_steps", unchanged_steps},
          {"config_hash", config_hash}};
}

StepRecord StepRecord::from_json(const json& j) {
  StepRecord r;
  r.t = j.at("t").get<std::size_t>();
  r.position = j.at("position").get<std::size_t>();
  r.sampled_ids = j.at("sampled_ids").get<std::vector<std::string>>();
  const auto& c = j.at("candidates");
  for (const auto& p : c.at("per_sample")) r.per_sample.push_back(p.at("top_k").get<std::vector<TokenId>>());
  r.intersection = c.at("intersection").get<std::vector<TokenId>>();
  r.fallback = c.at("fallback").get<bool>();
  for (const auto& s : j.at("scores")) {
    CandidateScore cs;
    cs.token = s.at("token").get<TokenId>();
    cs.neg_grad = s.at("neg_grad").is_null() ? std::nan("") : s.at("neg_grad").get<double>();
    if (!s.at("reeval_loss").is_null()) cs.reeval_loss = s.at("reeval_loss").get<double>();
    r.scores.push_back(cs);
  }
  r.previous_token = j.at("previous").at("token").get<TokenId>();
  r.chosen_token = j.at("chosen").at("token").get<TokenId>();
  r.loss = loss_from(j.at("loss"));
  r.selected_loss = loss_from(j.at("selected_loss"));
  r.prompt_ids = j.at("prompt_ids").get<std::vector<TokenId>>();
  r.prompt_text = j.at("prompt").get<std::string>();
  r.best_loss = j.at("best_loss").is_null() ? std::numeric_limits<double>::infinity() : j.at("best_loss").get<double>();
  r.improved = j.at("improved").get<bool>();
  for (const auto& x : j.at("reasoning")) r.reasoning.push_back(x.at("tokens").get<std::vector<TokenId>>());
  r.status = j.at("status").get<std::string>();
  r.diagnostic = j.at("diagnostic").get<std::string>();
  r.next_position = j.at("next").at("position").get<std::size_t>();
  r.next_prompt_ids = j.at("next").at("prompt_ids").get<std::vector<TokenId>>();
  r.unchanged_steps = j.at("unchanged_steps").get<std::size_t>();
  r.config_hash = j.at("config_hash").get<std::string>();
  return r;
}

bool is_end_token(const LanguageModel& model, TokenId id) {
  std::string s = model.detokenize(std::span<const TokenId>(&id, 1));
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.pop_back();
  return !s.empty() && (s.back() == '.' || s.back() == '?' || s.back() == '!');
}

TokenId placeholder_token(const LanguageModel& model, std::span<const TokenId> prompt) {
  if (prompt.empty()) throw ModelError("placeholder: empty prompt");
  const auto lp = model.next_token_distribution(prompt);
  TokenId best = -1;
  for (std::size_t v = 0; v < lp.size(); ++v) {
    const auto id = static_cast<TokenId>(v);
    if (!is_admissible(model, id)) continue;
    if (best < 0 || lp[v] > lp[static_cast<std::size_t>(best)]) best = id;
  }
  if (best < 0) throw ModelError("placeholder: no admissible token");
  return best;
}

void advance_position(const LanguageModel& model, OptimizationState& state, std::size_t cap) {
  const std::size_t n = state.prompt.size();
  if (state.position + 1 < n) {
    ++state.position;
    return;
  }
  if (is_end_token(model, state.prompt.back()) || n >= cap) {
    state.position = 0;
    return;
  }
  state.prompt.push_back(placeholder_token(model, state.prompt));
  state.position = n;
}

RunDirectory RunDirectory::create(const fs::path& dir, const RunConfig& config, bool force, bool quiet) {
  config.validate();
  const char* owned[] = {"config.json", "trajectory.jsonl", "best_prompt.txt", "final_prompt.txt", "log.jsonl"};
  if (fs::exists(dir / "config.json") || fs::exists(dir / "trajectory.jsonl")) {
    if (!force)
      throw ConfigError("run directory '" + dir.string() + "' already holds a run; pass --force to overwrite");
    for (const char* f : owned) fs::remove(dir / f);
  }
  fs::create_directories(dir);
  RunDirectory run;
  run.dir_ = dir;
  run.config_ = config;
  write_atomic(dir / "config.json",
               json{{"config", config.to_json()}, {"config_hash", config.hash()}}.dump(2) + "\n");
  std::ofstream(dir / "trajectory.jsonl", std::ios::trunc);
  run.log_ = std::make_shared<RunLog>(dir / "log.jsonl", quiet);
  return run;
}

RunDirectory RunDirectory::open(const fs::path& dir, bool quiet) {
  if (!fs::exists(dir / "config.json"))
    throw ConfigError("'" + dir.string() + "' is not a run directory (no config.json)");
  json j;
  try {
    j = json::parse(read_file(dir / "config.json"));
  } catch (const json::exception& e) {
    throw ConfigError("corrupt config.json in '" + dir.string() + "': " + e.what());
  }
  if (!j.is_object() || !j.contains("config")) throw ConfigError("config.json in '" + dir.string() + "' has no config");
  RunDirectory run;
  run.dir_ = dir;
  run.config_ = RunConfig::from_json(j.at("config"));
  if (j.contains("config_hash") && j.at("config_hash") != run.config_.hash())
    throw ConfigError("config.json in '" + dir.string() + "' does not match its recorded hash");
  run.log_ = std::make_shared<RunLog>(dir / "log.jsonl", quiet);
  return run;
}

void RunDirectory::append(const StepRecord& record, const LanguageModel& model) {
  std::ofstream out(dir_ / "trajectory.jsonl", std::ios::app | std::ios::binary);
  out << record.to_json(model).dump() << '\n';
  out.flush();
  if (!out) throw ConfigError("cannot append to trajectory in '" + dir_.string() + "'");
}

void RunDirectory::write_prompts(const std::string& best, const std::string& final_prompt) {
  write_atomic(dir_ / "best_prompt.txt", best + "\n");
  write_atomic(dir_ / "final_prompt.txt", final_prompt + "\n");
}

std::vector<StepRecord> RunDirectory::read_trajectory() {
  const auto path = dir_ / "trajectory.jsonl";
  if (!fs::exists(path)) return {};
  const std::string content = read_file(path);
  const std::string hash = config_.hash();
  std::vector<StepRecord> out;
  std::size_t offset = 0;
  std::size_t intact = 0;
  while (offset < content.size()) {
    const auto nl = content.find('\n', offset);
    const bool complete = nl != std::string::npos;
    const std::string line = content.substr(offset, complete ? nl - offset : std::string::npos);
    std::optional<StepRecord> rec;
    std::string why;
    try {
      rec = StepRecord::from_json(json::parse(line));
    } catch (const std::exception& e) {
      why = e.what();
    }
    if (rec && !complete) why = "missing line terminator";
    if (rec && rec->t != out.size() + 1) why = "step " + std::to_string(rec->t) + " out of sequence";
    if (!why.empty() || !rec) {
      log_->warn("trajectory_truncated",
                 "trajectory record " + std::to_string(out.size() + 1) + " is unreadable (" + why +
                     "); resuming from step " + std::to_string(out.size()),
                 {{"dropped_bytes", content.size() - intact}});
      write_atomic(path, content.substr(0, intact));
      break;
    }
    if (rec->config_hash != hash)
      throw ConfigError("trajectory record " + std::to_string(rec->t) + " was written under config " +
                        rec->config_hash + ", run directory config is " + hash);
    out.push_back(std::move(*rec));
    offset = nl + 1;
    intact = offset;
  }
  return out;
}

namespace {

OptimizationState initial_state(const RunConfig& config, const LanguageModel& model) {
  OptimizationState s;
  s.prompt = model.tokenize(config.init_prompt);
  if (s.prompt.empty()) throw ConfigError("initial prompt '" + config.init_prompt + "' tokenizes to nothing");
  s.best_prompt = s.prompt;
  return s;
}

StepRecord run_step(const RunConfig& config, const TaskDataset& dataset, const LanguageModel& model,
                    const ExtractionTemplate& tmpl, const DecodeConfig& decode, const std::string& hash,
                    OptimizationState& state) {
  StepRecord rec;
  rec.t = state.t + 1;
  rec.position = state.position;
  rec.config_hash = hash;
  const std::size_t i = state.position;
  const TokenId current = state.prompt.at(i);
  rec.previous_token = current;
  rec.chosen_token = current;

  const auto idx = sample_batch(dataset.train.size(), config.q, derive_seed(config.seed, rec.t, kTagBatch));
  std::vector<TaskSample> batch;
  for (auto b : idx) {
    batch.push_back(dataset.train[b]);
    rec.sampled_ids.push_back(dataset.train[b].id);
  }

  const std::vector<TokenId> prefix(state.prompt.begin(), state.prompt.begin() + static_cast<std::ptrdiff_t>(i));
  const auto cands = propose_for_batch(model, batch, prefix, i, config.k);
  for (const auto& [id, list] : cands.per_sample) rec.per_sample.push_back(list);
  rec.intersection = cands.intersection;
  rec.fallback = cands.fallback;

  std::vector<ReasoningTrace> traces;
  for (const auto& s : batch) {
    traces.push_back(generate_reasoning(model, s, state.prompt, tmpl, decode, !config.ablate_reasoning));
    const auto r = traces.back().reasoning_ids();
    rec.reasoning.emplace_back(r.begin(), r.end());
  }

  try {
    Selection sel;
    if (config.selection == "gradient") {
      const auto ind = build_indicator(model, cands, current);
      auto rep = gradient_rank(model, traces, ind, i, config.lambda);
      rec.loss = rep.loss;
      sel = select_replacement(model, rep.scores, config.mu, traces, i, config.lambda);
      rec.scores = std::move(rep.scores);
    } else {
      rec.loss = evaluate_loss(model, traces, config.lambda);
      Rng rng(derive_seed(config.seed, rec.t, kTagSelect));
      sel.token = cands.intersection.empty() ? current : cands.intersection[rng.below(cands.intersection.size())];
      sel.loss = evaluate_substitution(model, traces, i, sel.token, config.lambda);
      rec.scores.push_back({sel.token, std::nan(""), sel.loss.total});
    }
    rec.chosen_token = sel.token;
    rec.selected_loss = sel.loss;
    state.prompt[i] = sel.token;
    if (sel.loss.total < state.best_loss) {
      state.best_loss = sel.loss.total;
      state.best_breakdown = sel.loss;
      state.best_prompt = state.prompt;
      state.champion = ChampionSnapshot{rec.t, rec.sampled_ids, rec.reasoning};
      rec.improved = true;
    }
  } catch (const NumericError& e) {
    rec.status = "skipped";
    rec.diagnostic = e.what();
  }

  state.unchanged_steps = rec.chosen_token == current ? state.unchanged_steps + 1 : 0;
  rec.unchanged_steps = state.unchanged_steps;
  rec.prompt_ids = state.prompt;
  rec.prompt_text = model.detokenize(state.prompt);
  rec.best_loss = state.best_loss;
  advance_position(model, state, config.prompt_cap);
  rec.next_position = state.position;
  rec.next_prompt_ids = state.prompt;
  state.t = rec.t;
  return rec;
}

OptimizationResult run_steps(const RunConfig& config, const TaskDataset& dataset, const LanguageModel& model,
                             RunDirectory* run, const OptimizeOptions& options, OptimizationState state) {
  const auto kind = dataset.kind;
  const auto tmpl = config.extraction(kind);
  tmpl.validate();
  const auto decode = config.decode();
  const std::string hash = config.hash();

  OptimizationResult result;
  std::size_t executed = 0;
  while (state.t < config.steps) {
    if (options.stop_after && executed >= *options.stop_after) break;
    if (config.early_stop && state.unchanged_steps >= state.prompt.size()) {
      result.early_stopped = true;
      if (run) run->log().info("early_stop", "prompt unchanged for a full cycle; stopping", {{"t", state.t}});
      break;
    }
    auto rec = run_step(config, dataset, model, tmpl, decode, hash, state);
    ++executed;
    if (run) {
      run->append(rec, model);
      run->write_prompts(model.detokenize(state.best_prompt), model.detokenize(state.prompt));
      std::ostringstream msg;
      msg << "step " << rec.t << "/" << config.steps << " pos " << rec.position << " loss "
          << (rec.loss ? rec.loss->total : std::nan("")) << " best " << rec.best_loss
          << (rec.status == "ok" ? "" : " (" + rec.status + ")");
      run->log().info("step", msg.str(),
                      {{"t", rec.t}, {"status", rec.status}, {"best_loss", finite_or_null(rec.best_loss)}});
    }
    if (options.on_step) options.on_step(rec);
    state.trajectory.push_back(std::move(rec));
  }
  if (run) run->write_prompts(model.detokenize(state.best_prompt), model.detokenize(state.prompt));
  result.best_prompt = model.detokenize(state.best_prompt);
  result.final_prompt = model.detokenize(state.prompt);
  result.state = std::move(state);
  return result;
}

void check_inputs(const RunConfig& config, const TaskDataset& dataset) {
  config.validate();
  if (dataset.train.empty()) throw DataError("dataset '" + dataset.name + "' has an empty train split");
  if (config.q > dataset.train.size())
    throw ConfigError("q = " + std::to_string(config.q) + " exceeds the train split size " +
                      std::to_string(dataset.train.size()));
}

}  // namespace

OptimizationResult optimize(const RunConfig& config, const TaskDataset& dataset, const LanguageModel& model,
                            RunDirectory* run, const OptimizeOptions& options) {
  check_inputs(config, dataset);
  return run_steps(config, dataset, model, run, options, initial_state(config, model));
}

OptimizationState restore_state(const RunConfig& config, const LanguageModel& model,
                                const std::vector<StepRecord>& records) {
  auto state = initial_state(config, model);
  if (records.empty()) return state;
  const auto& last = records.back();
  state.t = last.t;
  state.position = last.next_position;
  state.prompt = last.next_prompt_ids;
  state.unchanged_steps = last.unchanged_steps;
  for (const auto& r : records) {
    if (!r.improved) continue;
    state.best_loss = r.selected_loss->total;
    state.best_breakdown = r.selected_loss;
    state.best_prompt = r.prompt_ids;
    state.champion = ChampionSnapshot{r.t, r.sampled_ids, r.reasoning};
  }
  state.trajectory = records;
  return state;
}

OptimizationResult resume(RunDirectory& run, const TaskDataset& dataset, const LanguageModel& model,
                          const std::optional<RunConfig>& expected, const OptimizeOptions& options) {
  RunConfig config = run.config();
  if (expected) {
    if (expected->hash() != config.hash())
      throw ConfigError("config hash mismatch: run directory has " + config.hash() + ", requested config is " +
                        expected->hash() + "; refusing to resume");
    config.steps = expected->steps;
  }
  check_inputs(config, dataset);
  const auto records = run.read_trajectory();
  auto state = restore_state(config, model, records);
  run.log().info("resume", "resuming after step " + std::to_string(state.t), {{"t", state.t}});
  return run_steps(config, dataset, model, &run, options, std::move(state));
}

LossBreakdown prompt_loss(const LanguageModel& model, std::span<const TaskSample> samples,
                          std::span<const TokenId> prompt, const ExtractionTemplate& tmpl, const DecodeConfig& decode,
                          double lambda, bool include_reasoning) {
  std::vector<ReasoningTrace> traces;
  traces.reserve(samples.size());
  for (const auto& s : samples) traces.push_back(generate_reasoning(model, s, prompt, tmpl, decode, include_reasoning));
  return evaluate_loss(model, traces, lambda);
}

LossBreakdown champion_loss(const LanguageModel& model, const TaskDataset& dataset, const RunConfig& config,
                            const OptimizationState& state) {
  if (!state.champion) throw ConfigError("no champion recorded yet");
  std::map<std::string, const TaskSample*> by_id;
  for (const auto& s : dataset.train) by_id[s.id] = &s;
  const auto tmpl = config.extraction(dataset.kind);
  std::vector<ReasoningTrace> traces;
  const auto& c = *state.champion;
  for (std::size_t b = 0; b < c.sample_ids.size(); ++b) {
    const auto it = by_id.find(c.sample_ids[b]);
    if (it == by_id.end()) throw DataError("champion sample '" + c.sample_ids[b] + "' not in the train split");
    traces.push_back(assemble_trace(model, *it->second, state.best_prompt, c.reasoning[b], tmpl));
  }
  return evaluate_loss(model, traces, config.lambda);
}

}  // namespace greater
