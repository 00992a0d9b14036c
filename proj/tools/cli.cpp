// SPDX-License-Identifier: Apache-2.0

#include "cli.hpp"

#include <algorithm>
#include <cstdlib>
#include <functional>
#include <iostream>

#include <CLI11.hpp>

#include "convert.hpp"
#include "greater/eval.hpp"
#include "greater/io.hpp"
#include "greater/synthetic.hpp"

namespace greater::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json defaults_json() {
  auto j = RunConfig{}.to_json();
  j["model_cache"] = "";
  j["device"] = "cpu";
  return j;
}

void merge_layer(const json& layer, const char* source, json& into, std::map<std::string, std::string>& prov) {
  if (layer.is_null()) return;
  if (!layer.is_object()) throw ConfigError(std::string(source) + " configuration must be a JSON object");
  for (const auto& [key, value] : layer.items()) {
    if (!into.contains(key)) throw ConfigError("unknown configuration field '" + key + "' in " + source);
    into[key] = value;
    prov[key] = source;
  }
}

}  // namespace

json ResolvedConfig::to_json() const {
  auto values = run.to_json();
  values["model_cache"] = model_cache;
  values["device"] = device;
  return {{"values", values}, {"provenance", provenance}, {"config_hash", run.hash()}};
}

ResolvedConfig resolve_config(const json& file, const json& cli, const std::map<std::string, std::string>& env) {
  json merged = defaults_json();
  std::map<std::string, std::string> prov;
  for (const auto& [key, v] : merged.items()) prov[key] = "default";

  json env_layer = json::object();
  if (auto it = env.find("GREATER_MODEL_CACHE"); it != env.end()) env_layer["model_cache"] = it->second;
  if (auto it = env.find("GREATER_DEVICE"); it != env.end()) env_layer["device"] = it->second;
  merge_layer(env_layer, "env", merged, prov);
  merge_layer(file, "file", merged, prov);
  merge_layer(cli, "cli", merged, prov);

  ResolvedConfig out;
  try {
    out.model_cache = merged.at("model_cache").get<std::string>();
    out.device = merged.at("device").get<std::string>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("configuration: ") + e.what());
  }
  merged.erase("model_cache");
  merged.erase("device");
  out.run = RunConfig::from_json(merged);
  out.provenance = std::move(prov);
  return out;
}

std::map<std::string, std::string> process_env() {
  std::map<std::string, std::string> env;
  for (const char* name : {"GREATER_MODEL_CACHE", "GREATER_DEVICE"})
    if (const char* v = std::getenv(name)) env[name] = v;
  return env;
}

TaskSource parse_task_source(const std::string& task) {
  TaskSource src;
  if (task.empty()) throw ConfigError("no task given (use --task)");
  if (task == "synthetic" || task.starts_with("synthetic:")) {
    src.name = "synthetic";
    src.synthetic_records = 250;
    if (task.size() > 10) {
      try {
        src.synthetic_records = std::stoul(task.substr(10));
      } catch (const std::exception&) {
        throw ConfigError("task '" + task + "': expected synthetic:<record count>");
      }
    }
    return src;
  }
  const fs::path path(task);
  if (!fs::exists(path)) throw DataError("task file '" + task + "' does not exist");
  if (path.extension() == ".json") {
    json j;
    try {
      j = json::parse(read_file(path));
    } catch (const json::exception& e) {
      throw DataError("task config '" + task + "': " + e.what());
    }
    if (!j.is_object() || !j.contains("data")) throw DataError("task config '" + task + "' needs a \"data\" path");
    auto rel = [&](const std::string& p) { return fs::path(p).is_absolute() ? p : (path.parent_path() / p).string(); };
    try {
      src.data = rel(j.at("data").get<std::string>());
      src.name = j.value("name", path.stem().string());
      if (j.contains("test_data")) src.test_data = rel(j.at("test_data").get<std::string>());
      if (j.contains("answer_kind")) src.answer_kind = j.at("answer_kind").get<std::string>();
      if (j.contains("split_spec")) src.split_spec = j.at("split_spec").get<std::string>();
      if (j.contains("template")) src.extraction_template = j.at("template").get<std::string>();
    } catch (const json::exception& e) {
      throw DataError("task config '" + task + "': " + e.what());
    }
    return src;
  }
  src.data = task;
  src.name = path.stem().string();
  return src;
}

void apply_task_defaults(const TaskSource& src, ResolvedConfig& cfg) {
  auto take = [&](const std::optional<std::string>& v, const char* field, std::string& dst) {
    if (v && cfg.provenance[field] == "default") {
      dst = *v;
      cfg.provenance[field] = "task";
    }
  };
  take(src.answer_kind, "answer_kind", cfg.run.answer_kind);
  take(src.split_spec, "split_spec", cfg.run.split_spec);
  take(src.extraction_template, "extraction_template", cfg.run.extraction_template);
}

TaskDataset load_task(const TaskSource& src, const RunConfig& cfg, const LanguageModel& model) {
  const auto spec = SplitSpec::parse(cfg.split_spec, cfg.data_seed);
  if (src.synthetic_records) {
    SyntheticSpec s;
    s.records = src.synthetic_records;
    s.seed = cfg.data_seed;
    return synthetic_dataset(model, s, spec);
  }
  const auto kind = parse_answer_kind(cfg.answer_kind);
  std::optional<fs::path> test;
  if (!src.test_data.empty()) test = src.test_data;
  auto ds = load_dataset(src.data, kind, spec, test);
  ds.name = src.name;
  if (!cfg.extraction_template.empty()) ds.extraction_template = cfg.extraction_template;
  return ds;
}

namespace {

std::unique_ptr<LanguageModel> open_model(const std::string& id, const ResolvedConfig& cfg) {
  ModelOptions opts;
  opts.device = cfg.device;
  opts.cache_dir = cfg.model_cache;
  return load_model(id, opts);
}

/// Flags that map onto configuration fields. Only flags present on the
/// command line enter the CLI layer.
class FieldFlags {
 public:
  void add_run_flags(CLI::App& app) {
    add_string(app, "--model", "model", "Model identifier (toy:v1 is bundled)");
    add_string(app, "--task", "task", "synthetic[:N], a task config (.json) or canonical JSONL");
    add_string(app, "--split-spec", "split_spec", "bbh, gsm8k, folio or train/dev/test counts");
    add_uint(app, "--data-seed", "data_seed", "Seed for drawing the splits");
    add_string(app, "--answer-kind", "answer_kind", "numeric, multiple-choice or label");
    add_string(app, "--template", "extraction_template", "Extraction template with one {answer} slot");
    add_string(app, "--init-prompt", "init_prompt", "Initial prompt");
    add_size(app, "--steps", "steps", "Optimisation steps T");
    add_size(app, "--k", "k", "Top-k proposals per sample");
    add_size(app, "--q", "q", "Samples per step");
    add_size(app, "--mu", "mu", "Candidates re-evaluated per step");
    add_double(app, "--lambda", "lambda", "Perplexity weight");
    add_uint(app, "--seed", "seed", "Run seed");
    add_flag(app, "--ablate-reasoning", "ablate_reasoning", "Leave the reasoning out of the loss");
    add_size(app, "--max-new-tokens", "max_new_tokens", "Reasoning length limit");
    add_size(app, "--prompt-cap", "prompt_cap", "Maximum prompt length in tokens");
    add_string(app, "--selection", "selection", "gradient or random");
    add_flag(app, "--early-stop", "early_stop", "Stop once a full cycle changes nothing");
    auto* o = app.add_option("--stop", stops_, "Stop sequence for reasoning (repeatable)");
    setters_.push_back([this, o](json& j) {
      if (o->count()) j["stop_sequences"] = stops_;
    });
  }

  void add_eval_flags(CLI::App& app) {
    add_string(app, "--model", "model", "Model identifier");
    add_string(app, "--task", "task", "synthetic[:N], a task config (.json) or canonical JSONL");
    add_string(app, "--split-spec", "split_spec", "bbh, gsm8k, folio or train/dev/test counts");
    add_uint(app, "--data-seed", "data_seed", "Seed for drawing the splits");
    add_string(app, "--answer-kind", "answer_kind", "numeric, multiple-choice or label");
    add_string(app, "--template", "extraction_template", "Extraction template with one {answer} slot");
    add_size(app, "--max-new-tokens", "max_new_tokens", "Reasoning length limit");
    auto* o = app.add_option("--stop", stops_, "Stop sequence for reasoning (repeatable)");
    setters_.push_back([this, o](json& j) {
      if (o->count()) j["stop_sequences"] = stops_;
    });
  }

  json layer() const {
    json j = json::object();
    for (const auto& s : setters_) s(j);
    return j;
  }

 private:
  void add_string(CLI::App& app, const char* flag, const char* field, const char* help) {
    auto& v = strings_.emplace_back(std::make_unique<std::string>());
    auto* o = app.add_option(flag, *v, help);
    std::string* p = v.get();
    setters_.push_back([o, p, field](json& j) {
      if (o->count()) j[field] = *p;
    });
  }
  void add_size(CLI::App& app, const char* flag, const char* field, const char* help) {
    auto& v = sizes_.emplace_back(std::make_unique<std::size_t>());
    auto* o = app.add_option(flag, *v, help);
    std::size_t* p = v.get();
    setters_.push_back([o, p, field](json& j) {
      if (o->count()) j[field] = *p;
    });
  }
  void add_uint(CLI::App& app, const char* flag, const char* field, const char* help) {
    auto& v = uints_.emplace_back(std::make_unique<std::uint64_t>());
    auto* o = app.add_option(flag, *v, help);
    std::uint64_t* p = v.get();
    setters_.push_back([o, p, field](json& j) {
      if (o->count()) j[field] = *p;
    });
  }
  void add_double(CLI::App& app, const char* flag, const char* field, const char* help) {
    auto& v = doubles_.emplace_back(std::make_unique<double>());
    auto* o = app.add_option(flag, *v, help);
    double* p = v.get();
    setters_.push_back([o, p, field](json& j) {
      if (o->count()) j[field] = *p;
    });
  }
  void add_flag(CLI::App& app, const char* flag, const char* field, const char* help) {
    auto* o = app.add_flag(flag)->description(help);
    setters_.push_back([o, field](json& j) {
      if (o->count()) j[field] = true;
    });
  }

  std::vector<std::unique_ptr<std::string>> strings_;
  std::vector<std::unique_ptr<std::size_t>> sizes_;
  std::vector<std::unique_ptr<std::uint64_t>> uints_;
  std::vector<std::unique_ptr<double>> doubles_;
  std::vector<std::string> stops_;
  std::vector<std::function<void(json&)>> setters_;
};

json read_config_file(const std::string& path) {
  if (path.empty()) return nullptr;
  try {
    return json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw ConfigError("config file '" + path + "': " + e.what());
  }
}

EvalRequest eval_request_from(const RunConfig& run, const std::string& split, const std::string& prompt) {
  EvalRequest r;
  r.model = run.model;
  r.task = run.task;
  r.split_spec = run.split_spec;
  r.data_seed = run.data_seed;
  r.answer_kind = run.answer_kind;
  r.extraction_template = run.extraction_template;
  r.split = split;
  r.prompt = prompt;
  r.max_new_tokens = run.max_new_tokens;
  r.stop_sequences = run.stop_sequences;
  return r;
}

std::string trim_newline(std::string s) {
  while (!s.empty() && (s.back() == '\n' || s.back() == '\r')) s.pop_back();
  return s;
}

struct Stage {
  bool started = false;
};

void finish_run(const OptimizationResult& r, const RunConfig& run, const TaskDataset& ds, const LanguageModel& model,
                const fs::path& dir, std::ostream& out) {
  out << "best prompt: " << r.best_prompt << "\n";
  if (std::isfinite(r.state.best_loss)) out << "best loss: " << r.state.best_loss << "\n";
  if (r.early_stopped) out << "stopped early after " << r.state.t << " steps\n";
  if (!ds.dev.empty()) {
    const auto rep = evaluate(model, ds, eval_request_from(run, "dev", r.best_prompt));
    write_report(dir / "dev_report.json", rep);
    out << "dev accuracy: " << rep.accuracy << " (" << ds.dev.size() << " samples)\n";
  }
}

int cmd_optimize(const std::string& config_path, const FieldFlags& flags, const std::string& out_dir, bool force,
                 bool quiet, std::ostream& out, Stage& stage) {
  auto cfg = resolve_config(read_config_file(config_path), flags.layer(), process_env());
  if (out_dir.empty()) throw ConfigError("optimize needs --out <run directory>");
  const auto src = parse_task_source(cfg.run.task);
  apply_task_defaults(src, cfg);
  cfg.run.validate();
  const auto model = open_model(cfg.run.model, cfg);
  const auto ds = load_task(src, cfg.run, *model);

  auto run = RunDirectory::create(out_dir, cfg.run, force, quiet);
  write_atomic(fs::path(out_dir) / "resolved_config.json", cfg.to_json().dump(2) + "\n");
  run.log().info("start", "optimizing " + ds.name + " with " + cfg.run.model,
                 {{"config_hash", cfg.run.hash()}, {"train", ds.train.size()}, {"dev", ds.dev.size()}});
  stage.started = true;
  const auto r = optimize(cfg.run, ds, *model, &run);
  finish_run(r, cfg.run, ds, *model, out_dir, out);
  return kOk;
}

int cmd_resume(const std::string& dir, std::optional<std::size_t> steps, bool quiet, std::ostream& out,
               Stage& stage) {
  auto run = RunDirectory::open(dir, quiet);
  RunConfig want = run.config();
  if (steps) want.steps = *steps;
  ResolvedConfig env_cfg = resolve_config(nullptr, json::object(), process_env());
  const auto src = parse_task_source(want.task);
  const auto model = open_model(want.model, env_cfg);
  const auto ds = load_task(src, want, *model);
  stage.started = true;
  const auto r = resume(run, ds, *model, want);
  finish_run(r, want, ds, *model, dir, out);
  return kOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Prompt optimisation with gradients over reasoning", "greater"};
  app.require_subcommand(1);

  // optimize
  auto* opt = app.add_subcommand("optimize", "Optimise a prompt and write a run directory");
  FieldFlags opt_flags;
  opt_flags.add_run_flags(*opt);
  std::string opt_config, opt_out;
  bool opt_force = false, opt_quiet = false;
  opt->add_option("--config", opt_config, "JSON file with configuration fields");
  opt->add_option("--out", opt_out, "Run directory");
  opt->add_flag("--force", opt_force, "Overwrite an existing run directory");
  opt->add_flag("--quiet", opt_quiet, "No progress on stderr");

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "Accuracy of a prompt on one split");
  FieldFlags ev_flags;
  ev_flags.add_eval_flags(*ev);
  std::string ev_config, ev_split, ev_prompt, ev_prompt_file, ev_from, ev_out;
  ev->add_option("--config", ev_config, "JSON file with configuration fields");
  auto* split_opt = ev->add_option("--split", ev_split, "train, dev or test");
  auto* prompt_opt = ev->add_option("--prompt", ev_prompt, "Prompt text");
  ev->add_option("--prompt-file", ev_prompt_file, "File holding the prompt");
  ev->add_option("--from-report", ev_from, "Re-run the evaluation stored in a report");
  ev->add_option("--out", ev_out, "Write the report here");

  // compare
  auto* cmp = app.add_subcommand("compare", "Compare evaluation reports");
  std::vector<std::string> cmp_reports, cmp_labels;
  std::string cmp_format = "text", cmp_out;
  cmp->add_option("reports", cmp_reports, "Report files; the first is the baseline")->required();
  cmp->add_option("--label", cmp_labels, "Row label per report (repeatable)");
  cmp->add_option("--format", cmp_format, "text or json")->check(CLI::IsMember({"text", "json"}));
  cmp->add_option("--out", cmp_out, "Also write the JSON table here");

  // convert
  auto* cv = app.add_subcommand("convert", "Convert an upstream dataset to canonical JSONL");
  std::string cv_format, cv_in, cv_out;
  cv->add_option("--format", cv_format, "gsm8k, bbh or folio")->required();
  cv->add_option("--in", cv_in, "Source file")->required();
  cv->add_option("--out", cv_out, "Destination JSONL")->required();

  // resume
  auto* rs = app.add_subcommand("resume", "Continue an interrupted run");
  std::string rs_dir;
  std::size_t rs_steps = 0;
  bool rs_quiet = false;
  rs->add_option("dir", rs_dir, "Run directory")->required();
  auto* rs_steps_opt = rs->add_option("--steps", rs_steps, "Total steps (may extend the run)");
  rs->add_flag("--quiet", rs_quiet, "No progress on stderr");

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kConfigError;
  }

  Stage stage;
  try {
    if (*opt) return cmd_optimize(opt_config, opt_flags, opt_out, opt_force, opt_quiet, out, stage);

    if (*ev) {
      EvalRequest req;
      std::optional<ResolvedConfig> cfg;
      if (!ev_from.empty()) {
        req = read_report(ev_from).request;
        const auto layer = ev_flags.layer();
        if (layer.contains("model")) req.model = layer["model"];
        if (split_opt->count()) req.split = ev_split;
        cfg = resolve_config(read_config_file(ev_config), json::object(), process_env());
      } else {
        if (!split_opt->count()) {
          err << "evaluate: --split is required\n" << ev->help();
          return kConfigError;
        }
        cfg = resolve_config(read_config_file(ev_config), ev_flags.layer(), process_env());
        std::string prompt;
        if (prompt_opt->count())
          prompt = ev_prompt;
        else if (!ev_prompt_file.empty())
          prompt = trim_newline(read_file(ev_prompt_file));
        else
          throw ConfigError("evaluate needs --prompt, --prompt-file or --from-report");
        const auto src = parse_task_source(cfg->run.task);
        apply_task_defaults(src, *cfg);
        req = eval_request_from(cfg->run, ev_split, prompt);
      }
      RunConfig task_cfg = cfg->run;
      task_cfg.task = req.task;
      task_cfg.split_spec = req.split_spec;
      task_cfg.data_seed = req.data_seed;
      task_cfg.answer_kind = req.answer_kind;
      task_cfg.extraction_template = req.extraction_template;
      const auto src = parse_task_source(req.task);
      const auto model = open_model(req.model, *cfg);
      const auto ds = load_task(src, task_cfg, *model);
      const auto rep = evaluate(*model, ds, req);
      if (!ev_out.empty()) write_report(ev_out, rep);
      std::size_t failed = 0;
      for (const auto& s : rep.samples) failed += !s.diagnostic.empty();
      out << "accuracy: " << rep.accuracy << " (" << rep.samples.size() << " samples, split " << req.split
          << ", model " << req.model << ")\n";
      if (failed) err << "warning: " << failed << " samples failed and were scored 0\n";
      return kOk;
    }

    if (*cmp) {
      std::vector<EvalReport> reports;
      for (const auto& p : cmp_reports) reports.push_back(read_report(p));
      const auto table = compare(reports, cmp_labels);
      if (cmp_format == "json")
        out << table.to_json().dump(2) << "\n";
      else
        out << table.to_text();
      if (!cmp_out.empty()) write_atomic(cmp_out, table.to_json().dump(2) + "\n");
      return kOk;
    }

    if (*cv) {
      const auto stats = convert_file(cv_format, cv_in, cv_out);
      out << "converted " << stats.written << " of " << stats.read << " records to " << cv_out << "\n";
      return kOk;
    }

    if (*rs) {
      std::optional<std::size_t> steps;
      if (rs_steps_opt->count()) steps = rs_steps;
      return cmd_resume(rs_dir, steps, rs_quiet, out, stage);
    }
  } catch (const ModelError& e) {
    err << "model error: " << e.what() << "\n";
    return stage.started ? kRunFailure : kModelError;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return stage.started ? kRunFailure : kConfigError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kRunFailure;
  }
  return kOk;
}

}  // namespace greater::cli
