// SPDX-License-Identifier: Apache-2.0
#include "kunbr/cli/commands.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fmt/format.h>
#include <iostream>
#include <optional>
#include <set>

#include "kunbr/cli/manifest.hpp"
#include "kunbr/cli/run_config.hpp"
#include "kunbr/cli/svg.hpp"
#include "kunbr/density/density.hpp"
#include "kunbr/evalrtt/experiment.hpp"
#include "kunbr/gradbackend/error.hpp"
#include "kunbr/gradbackend/rng.hpp"
#include "kunbr/io.hpp"
#include "kunbr/lm/checkpoint.hpp"
#include "kunbr/lm/model.hpp"

namespace kunbr::cli {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::vector<std::string> methods;
  std::string seeds;
  bool force = false;
  std::string precision = "f64";
  std::string checkpoint;
  std::string dir;
  std::vector<std::string> checkpoints;
};

struct Context {
  RunConfig rc;
  fs::path root;
  fs::path dir;
  std::uint64_t seed = 0;
  std::string hash;
  Precision precision = Precision::kF64;
  bool force = false;
};

void say(const std::string& line) { std::cout << line << '\n' << std::flush; }

fs::path output_root(const Options& o, const RunConfig& rc) {
  if (!o.out.empty()) return o.out;
  if (!rc.out_dir.empty()) return rc.out_dir;
  if (const char* env = std::getenv("KUNBR_OUT_DIR"); env && *env) return env;
  return "kunbr-out";
}

Context make_context(const Options& o) {
  Context c;
  c.rc = o.config.empty() ? parse_run_config(json{{"schema", kRunSchema}}) : load_run_config(o.config);
  if (o.seed) c.rc.seed = *o.seed;
  c.seed = c.rc.seed;
  c.root = output_root(o, c.rc);
  c.dir = c.root / fmt::format("seed-{}", c.seed);
  c.hash = eval::config_hash(c.rc.experiment);
  c.precision = parse_precision(o.precision);
  c.force = o.force;
  return c;
}

RunManifest open_manifest(const Context& c, const fs::path& dir) {
  RunManifest m = load_manifest(dir);
  if (m.config_hash.empty()) {
    m.config_hash = c.hash;
    m.seed = c.seed;
  } else if (m.config_hash != c.hash && !c.force) {
    throw ValidationError(fmt::format(
        "{} was produced with config {}, the current config hashes to {} (pass --force to reuse it)", dir.string(),
        m.config_hash, c.hash));
  }
  return m;
}

void write_artifact(RunManifest& m, const fs::path& dir, const std::string& id, const std::string& name,
                    const std::string& stage, std::string_view bytes) {
  write_file_atomic(dir / name, bytes);
  m.record(dir, id, name, stage);
}

void save_stage_checkpoint(const Context& c, RunManifest& m, const std::string& id, const std::string& name,
                           const std::string& stage, const ParameterStore& model, json meta) {
  meta["stage"] = stage;
  meta["seed"] = c.seed;
  meta["config_hash"] = c.hash;
  write_artifact(m, c.dir, id, name, stage, serialize_checkpoint(model, meta, c.precision));
}

struct Data {
  corpus::DatasetSplits splits;
  std::vector<corpus::FactRecord> records;
  corpus::Tokenizer tokenizer;
};

Data load_data(const Context& c, const RunManifest& m) {
  if (!m.files.contains("corpus")) {
    throw ValidationError(fmt::format("{} has no corpus; run generate-data first", c.dir.string()));
  }
  Data d;
  d.splits = corpus::import_jsonl(read_file(m.require(c.dir, "corpus")));
  d.records = d.splits.retain;
  for (const auto& r : d.splits.forget()) d.records.push_back(r);
  d.tokenizer = corpus::Tokenizer::build(d.records);
  return d;
}

void check_stage(const Context& c, const json& meta, const std::string& expected, const std::string& what) {
  const std::string stage = meta.is_object() && meta.contains("stage") ? meta.at("stage").get<std::string>() : "";
  if (stage != expected && !c.force) {
    throw ValidationError(fmt::format("{} needs a checkpoint from the '{}' stage, {} is from '{}' (pass --force to override)",
                                      what, expected, meta.value("file", std::string("the input")),
                                      stage.empty() ? "unknown" : stage));
  }
  const std::string hash = meta.is_object() ? meta.value("config_hash", std::string()) : "";
  if (!hash.empty() && hash != c.hash && !c.force) {
    throw ValidationError(fmt::format("checkpoint was produced with config {}, the current config hashes to {} (pass --force to override)",
                                      hash, c.hash));
  }
}

// Loads a manifest artifact, verifying its hash and stage.
Checkpoint load_stage(const Context& c, const RunManifest& m, const std::string& id, const std::string& stage,
                      const std::string& what) {
  if (!m.files.contains(id)) {
    throw ValidationError(fmt::format("{} has no '{}' checkpoint; run the {} stage first", c.dir.string(), id, stage));
  }
  const fs::path path = m.require(c.dir, id);
  Checkpoint ck = load_checkpoint(path);
  json meta = ck.metadata;
  meta["file"] = path.string();
  check_stage(c, meta, stage, what);
  return ck;
}

// An explicit --checkpoint path; verified against the manifest when listed.
Checkpoint load_explicit(const Context& c, const RunManifest& m, const fs::path& path, const std::string& stage,
                         const std::string& what) {
  for (const auto& [id, e] : m.files) {
    std::error_code ec;
    if (fs::equivalent(c.dir / e.path, path, ec)) m.require(c.dir, id);
  }
  Checkpoint ck = load_checkpoint(path);
  json meta = ck.metadata;
  meta["file"] = path.string();
  check_stage(c, meta, stage, what);
  return ck;
}

std::string loss_csv(const std::vector<double>& losses) {
  std::string out = "epoch,loss\n";
  for (std::size_t e = 0; e < losses.size(); ++e) out += fmt::format("{},{:.17g}\n", e, losses[e]);
  return out;
}

std::string one_method(const Options& o) {
  if (o.methods.size() != 1) throw ValidationError("exactly one --method is required");
  return eval::canonical_method(o.methods.front());
}

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> out;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto comma = text.find(',', pos);
    const std::string item = text.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
    if (item.empty() || item.find_first_not_of("0123456789") != std::string::npos) {
      throw ValidationError(fmt::format("--seeds expects comma-separated non-negative integers, got '{}'", text));
    }
    out.push_back(std::stoull(item));
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  return out;
}

void cmd_show_config(const Options& o) { say(to_json(make_context(o).rc).dump(2)); }

void cmd_generate_data(const Options& o) {
  const Context c = make_context(o);
  RunManifest m = open_manifest(c, c.dir);
  std::vector<corpus::FactRecord> records;
  const auto splits = eval::make_splits(c.rc.experiment.corpus, c.seed, &records);
  const auto tok = corpus::Tokenizer::build(records);
  eval::model_for(c.rc.experiment, tok, c.seed);
  eval::check_context_length(c.rc.experiment.model, records, tok);

  json split_names = json::object();
  for (auto which : {corpus::SplitName::kRetain, corpus::SplitName::kT, corpus::SplitName::kV}) {
    json names = json::array();
    for (const auto& r : corpus::select_split(splits, which)) names.push_back(r.person_name);
    split_names[std::string(corpus::split_tag(which))] = names;
  }
  const json summary = {{"seed", c.seed},
                        {"vocab_size", tok.size()},
                        {"counts", {{"retain", splits.retain.size()}, {"T", splits.forget_T.size()}, {"V", splits.forget_V.size()}}},
                        {"splits", split_names}};
  write_artifact(m, c.dir, "config", "config.json", "generate-data", to_json(c.rc).dump(2) + "\n");
  write_artifact(m, c.dir, "corpus", "corpus.jsonl", "generate-data", corpus::export_jsonl(splits));
  write_artifact(m, c.dir, "splits", "splits.json", "generate-data", summary.dump(2) + "\n");
  save_manifest(c.dir, m);
  say(fmt::format("generate-data: {} facts (retain {}, T {}, V {}), vocabulary {} -> {}", records.size(),
                  splits.retain.size(), splits.forget_T.size(), splits.forget_V.size(), tok.size(), c.dir.string()));
}

void cmd_train(const Options& o) {
  const Context c = make_context(o);
  RunManifest m = open_manifest(c, c.dir);
  const Data d = load_data(c, m);
  const auto& e = c.rc.experiment;
  eval::check_context_length(e.model, d.records, d.tokenizer);
  ParameterStore model = lm::init_model(eval::model_for(e, d.tokenizer, c.seed));
  const auto r = eval::memorize(model, d.splits, d.tokenizer, e.train, eval::stage_seed(c.seed, "train"));
  save_stage_checkpoint(c, m, "memorized", "memorized.ckpt", "train", model,
                        {{"corpus_sha256", m.files.at("corpus").sha256},
                         {"epochs", r.epochs_run},
                         {"accuracy", r.accuracy}});
  write_artifact(m, c.dir, "train_log", "train_log.csv", "train", loss_csv(r.epoch_loss));
  save_manifest(c.dir, m);
  say(fmt::format("train: {} epochs, full-corpus MCQ accuracy {:.1f}%, final loss {:.4f}", r.epochs_run,
                  100 * r.accuracy, r.epoch_loss.empty() ? 0.0 : r.epoch_loss.back()));
  if (r.accuracy < 0.95) say("train: warning: accuracy is below 95%; unlearning results will be hard to read");
}

void cmd_unlearn(const Options& o) {
  const Context c = make_context(o);
  const std::string method = one_method(o);
  RunManifest m = open_manifest(c, c.dir);
  const Data d = load_data(c, m);
  Checkpoint ck = load_stage(c, m, "memorized", "train", "unlearn");
  const eval::SeedContext sc = eval::seed_context(c.seed, d.splits, std::move(ck.params));
  auto outcome = eval::apply_method(c.rc.experiment, sc, method);

  write_artifact(m, c.dir, "trace." + method, fmt::format("trace-{}.csv", method), "unlearn", outcome.trace_csv);
  if (outcome.status != "ok") {
    m.status = "failed";
    save_manifest(c.dir, m);
    throw NumericError(fmt::format("unlearning with {} aborted: {}", method, outcome.error));
  }
  const json meta = {{"method", method}, {"source_sha256", m.files.at("memorized").sha256}};
  if (outcome.warmup) {
    save_stage_checkpoint(c, m, "kunbr_warmup", "kunbr-warmup.ckpt", "warmup", *outcome.warmup, meta);
  }
  save_stage_checkpoint(c, m, "unlearned." + method, fmt::format("unlearned-{}.ckpt", method), "unlearn",
                        outcome.model, meta);
  json detail = outcome.detail;
  if (outcome.warmup) {
    detail["checkpoints"] = {{"warmup", {{"path", "kunbr-warmup.ckpt"}, {"sha256", m.files.at("kunbr_warmup").sha256}}},
                             {"final",
                              {{"path", fmt::format("unlearned-{}.ckpt", method)},
                               {"sha256", m.files.at("unlearned." + method).sha256}}}};
  }
  write_artifact(m, c.dir, "unlearn_report." + method, fmt::format("unlearn-{}.json", method), "unlearn",
                 detail.dump(2) + "\n");
  save_manifest(c.dir, m);
  say(fmt::format("unlearn {}: V accuracy {:.1f}% -> {:.1f}%, retain {:.1f}% -> {:.1f}%", method,
                  100 * sc.pre_v_accuracy, 100 * eval::mcq_accuracy(outcome.model, d.splits.forget_V, d.tokenizer),
                  100 * sc.pre_retain_accuracy, 100 * eval::mcq_accuracy(outcome.model, d.splits.retain, d.tokenizer)));
}

void cmd_density(const Options& o) {
  const Context c = make_context(o);
  RunManifest m = open_manifest(c, c.dir);
  const Data d = load_data(c, m);
  std::string label = "memorized";
  Checkpoint target;
  if (!o.checkpoint.empty()) {
    target = load_checkpoint(o.checkpoint);
    label = fs::path(o.checkpoint).stem().string();
    load_explicit(c, m, o.checkpoint, target.metadata.value("stage", std::string()), "density");
  } else if (!o.methods.empty()) {
    label = one_method(o);
    target = load_stage(c, m, "unlearned." + label, "unlearn", "density");
  } else {
    target = load_stage(c, m, "memorized", "train", "density");
  }
  const auto& k = c.rc.experiment.kunbr;
  const auto batches = corpus::training_batches(d.splits, corpus::SplitName::kForget, d.tokenizer, k.batch_size,
                                                derive_seed(eval::stage_seed(c.seed, "unlearn.kunbr"), "density"))
                           .epoch(0);
  density::DensityReport report;
  report.density = density::estimate_density(target.params, batches);
  report.top_k = k.top_k;
  report.head_exclude_layers = k.head_exclude_layers;
  const auto partition = density::partition_blocks(target.params.model_config().layers, k.M);
  if (report.density.defined()) {
    report.scores = density::score_blocks(partition, report.density.normalized());
    report.selected = density::select_blocks(report.scores, k.top_k, k.head_exclude_layers);
  } else {
    report.scores = density::BlockScore{partition, std::vector<double>(partition.M, 0.0)};
  }

  json j = density::to_json(report);
  std::optional<density::LayerDelta> delta;
  if (label != "memorized" && m.files.contains("memorized")) {
    const Checkpoint base = load_stage(c, m, "memorized", "train", "density");
    delta = density::layer_deltas(target.params, base.params);
    j["delta_vs_memorized"] = density::to_json(*delta);
    j["delta_top2_share"] = density::top_share(*delta, 2);
  }
  write_artifact(m, c.dir, "density." + label, fmt::format("density-{}.json", label), "density", j.dump(2) + "\n");
  write_artifact(m, c.dir, "density_csv." + label, fmt::format("density-{}.csv", label), "density",
                 density::to_csv(report, delta ? &*delta : nullptr));
  save_manifest(c.dir, m);
  std::string sel;
  for (auto b : report.selected) sel += (sel.empty() ? "" : " ") + std::to_string(b);
  say(fmt::format("density {}: selected blocks [{}] of {}", label, sel, partition.M));
}

void cmd_attack(const Options& o) {
  const Context c = make_context(o);
  RunManifest m = open_manifest(c, c.dir);
  const Data d = load_data(c, m);
  std::string label;
  Checkpoint ck;
  if (!o.checkpoint.empty()) {
    ck = load_explicit(c, m, o.checkpoint, "unlearn", "attack");
    label = ck.metadata.value("method", fs::path(o.checkpoint).stem().string());
  } else {
    label = one_method(o);
    ck = load_stage(c, m, "unlearned." + label, "unlearn", "attack");
  }
  ParameterStore model = std::move(ck.params);
  const auto r = eval::rtt_attack(model, d.splits, d.tokenizer, c.rc.experiment.attack, eval::stage_seed(c.seed, "attack"));
  save_stage_checkpoint(c, m, "attacked." + label, fmt::format("attacked-{}.ckpt", label), "attack", model,
                        {{"method", label},
                         {"epochs", r.epochs_run},
                         {"t_accuracy", r.t_accuracy},
                         {"reached_target", r.reached_target}});
  write_artifact(m, c.dir, "attack_log." + label, fmt::format("attack_log-{}.csv", label), "attack",
                 loss_csv(r.epoch_loss));
  save_manifest(c.dir, m);
  say(fmt::format("attack {}: {} epochs, T accuracy {:.1f}%, V accuracy {:.1f}%", label, r.epochs_run,
                  100 * r.t_accuracy, 100 * eval::mcq_accuracy(model, d.splits.forget_V, d.tokenizer)));
  if (!r.reached_target) say("attack: warning: T accuracy stayed below the target");
}

void cmd_evaluate(const Options& o) {
  const Context c = make_context(o);
  RunManifest m = open_manifest(c, c.dir);
  const Data d = load_data(c, m);

  if (!o.checkpoints.empty()) {
    json rows = json::array();
    std::string csv = "checkpoint,stage,v_acc_pct,t_acc_pct,retain_acc_pct,retain_ppl\n";
    for (const auto& p : o.checkpoints) {
      const Checkpoint ck = load_explicit(c, m, p, "", "evaluate");
      const auto u = eval::utility_eval(ck.params, d.splits.retain, d.tokenizer);
      const double v = eval::mcq_accuracy(ck.params, d.splits.forget_V, d.tokenizer);
      const double t = eval::mcq_accuracy(ck.params, d.splits.forget_T, d.tokenizer);
      const std::string stage = ck.metadata.value("stage", std::string());
      rows.push_back({{"checkpoint", p}, {"stage", stage}, {"v_accuracy", v}, {"t_accuracy", t},
                      {"retain_accuracy", u.retain_accuracy}, {"retain_perplexity", u.retain_perplexity}});
      csv += fmt::format("{},{},{:.2f},{:.2f},{:.2f},{:.4f}\n", p, stage, 100 * v, 100 * t, 100 * u.retain_accuracy,
                         u.retain_perplexity);
      say(fmt::format("evaluate {}: V {:.1f}%, T {:.1f}%, retain {:.1f}%, ppl {:.3f}", p, 100 * v, 100 * t,
                      100 * u.retain_accuracy, u.retain_perplexity));
    }
    write_artifact(m, c.dir, "evaluation", "evaluation.json", "evaluate", rows.dump(2) + "\n");
    write_artifact(m, c.dir, "evaluation_csv", "evaluation.csv", "evaluate", csv);
    save_manifest(c.dir, m);
    return;
  }

  std::vector<std::string> methods;
  for (const auto& name : o.methods) methods.push_back(eval::canonical_method(name));
  if (methods.empty()) {
    for (const auto& id : eval::method_ids()) {
      if (m.files.contains("unlearned." + id) && m.files.contains("attacked." + id)) methods.push_back(id);
    }
    if (methods.empty()) throw ValidationError("no method has both unlearned and attacked checkpoints to evaluate");
  }
  Checkpoint memorized = load_stage(c, m, "memorized", "train", "evaluate");
  const double memorized_accuracy = memorized.metadata.value("accuracy", 0.0);
  const eval::SeedContext sc = eval::seed_context(c.seed, d.splits, std::move(memorized.params));
  std::vector<eval::ExperimentReport> reports;
  for (const auto& id : methods) {
    const Checkpoint un = load_stage(c, m, "unlearned." + id, "unlearn", "evaluate");
    const Checkpoint at = load_stage(c, m, "attacked." + id, "attack", "evaluate");
    eval::ExperimentReport r;
    r.method = id;
    r.seed = c.seed;
    r.config_hash = c.hash;
    r.memorized_accuracy = memorized_accuracy;
    r.pre_retain_accuracy = sc.pre_retain_accuracy;
    r.pre_v_accuracy = sc.pre_v_accuracy;
    r.a_unlearn = eval::mcq_accuracy(un.params, d.splits.forget_V, d.tokenizer);
    const auto u = eval::utility_eval(un.params, d.splits.retain, d.tokenizer);
    r.retain_accuracy = u.retain_accuracy;
    r.retain_perplexity = u.retain_perplexity;
    r.a_rtt = eval::mcq_accuracy(at.params, d.splits.forget_V, d.tokenizer);
    r.a_recover = eval::recovery(r.a_unlearn, r.a_rtt);
    r.rtt_t_accuracy = eval::mcq_accuracy(at.params, d.splits.forget_T, d.tokenizer);
    r.rtt_epochs = at.metadata.value("epochs", std::size_t{0});
    r.rtt_reached_target = at.metadata.value("reached_target", false);
    r.unlearned_sha256 = eval::parameters_sha256(un.params);
    r.attacked_sha256 = eval::parameters_sha256(at.params);
    write_artifact(m, c.dir, "report." + id, fmt::format("report-{}.json", id), "evaluate",
                   eval::to_json(r).dump(2) + "\n");
    say(fmt::format("evaluate {}: A_Unlearn {:.1f}%, A_RTT {:.1f}%, A_Recover {:+.1f}%, retain {:.1f}%", id,
                    100 * r.a_unlearn, 100 * r.a_rtt, 100 * r.a_recover, 100 * r.retain_accuracy));
    reports.push_back(std::move(r));
  }
  write_artifact(m, c.dir, "reports_csv", "reports.csv", "evaluate", eval::reports_csv(reports));
  m.status = "complete";
  save_manifest(c.dir, m);
}

void write_charts(RunManifest& m, const fs::path& dir, const eval::Comparison& cmp,
                  const std::vector<std::string>& methods, const std::vector<std::uint64_t>& seeds) {
  Series un{"A_Unlearn", {}, {}}, rtt{"A_RTT", {}, {}}, rec{"A_Recover", {}, {}};
  for (const auto& a : cmp.aggregates) {
    un.values.push_back(100 * a.a_unlearn.mean);
    un.errors.push_back(100 * a.a_unlearn.stddev);
    rtt.values.push_back(100 * a.a_rtt.mean);
    rtt.errors.push_back(100 * a.a_rtt.stddev);
    rec.values.push_back(100 * a.a_recover.mean);
    rec.errors.push_back(100 * a.a_recover.stddev);
  }
  write_artifact(m, dir, "chart_metrics", "chart_metrics.svg", "compare",
                 bar_chart_svg("V-set accuracy by method (mean and std over seeds)", "percent", methods, {un, rtt, rec}));

  std::vector<std::string> x;
  for (auto s : seeds) x.push_back(fmt::format("seed {}", s));
  std::vector<Series> lines;
  for (const auto& id : methods) {
    Series s{id, {}, {}};
    for (auto seed : seeds) {
      double v = 0.0;
      for (const auto& r : cmp.reports) {
        if (r.method == id && r.seed == seed && r.ok()) v = 100 * r.a_recover;
      }
      s.values.push_back(v);
    }
    lines.push_back(std::move(s));
  }
  write_artifact(m, dir, "chart_recovery", "chart_recovery.svg", "compare",
                 line_chart_svg("A_Recover per seed", "percent", x, lines));
}

void cmd_compare(const Options& o) {
  const Context c = make_context(o);
  std::vector<std::string> methods;
  for (const auto& name : o.methods) methods.push_back(eval::canonical_method(name));
  if (methods.empty()) methods = {"GD", std::string(eval::kKunbrMethod)};
  const auto seeds = o.seeds.empty() ? std::vector<std::uint64_t>{0, 1, 2, 3, 4} : parse_seeds(o.seeds);
  const fs::path dir = c.root / "compare";
  RunManifest m = open_manifest(c, dir);

  const auto cmp = eval::run_comparison(c.rc.experiment, methods, seeds, [](const std::string& s) {
    std::cerr << "compare: " << s << '\n';
  });

  json reports = json::array();
  for (const auto& r : cmp.reports) reports.push_back(eval::to_json(r));
  json aggregates = json::array();
  for (const auto& a : cmp.aggregates) aggregates.push_back(eval::to_json(a));
  json seeds_j = seeds;
  const json summary = {{"config", to_json(c.rc)}, {"config_hash", c.hash}, {"methods", methods},
                        {"seeds", seeds_j},         {"reports", reports},   {"aggregates", aggregates}};
  write_artifact(m, dir, "config", "config.json", "compare", to_json(c.rc).dump(2) + "\n");
  write_artifact(m, dir, "reports_csv", "reports.csv", "compare", eval::reports_csv(cmp.reports));
  write_artifact(m, dir, "aggregate_csv", "aggregate.csv", "compare", eval::aggregate_csv(cmp.aggregates));
  write_artifact(m, dir, "comparison", "comparison.json", "compare", summary.dump(2) + "\n");
  write_charts(m, dir, cmp, methods, seeds);
  m.status = "complete";
  save_manifest(dir, m);

  std::cout << comparison_table(cmp);
  say(fmt::format("compare: wrote {}", dir.string()));
}

void cmd_verify(const Options& o) {
  fs::path dir = o.dir;
  if (dir.empty()) dir = make_context(o).dir;
  if (!fs::exists(dir / kManifestFile)) throw IoError(fmt::format("{} has no {}", dir.string(), kManifestFile));
  const RunManifest m = load_manifest(dir);
  const auto problems = m.verify(dir);
  if (!problems.empty()) {
    std::string msg = fmt::format("{} failed verification:", dir.string());
    for (const auto& p : problems) msg += "\n  - " + p;
    throw IoError(msg);
  }
  say(fmt::format("verify: {} artifacts in {} match the manifest", m.files.size(), dir.string()));
}

void add_common(CLI::App* sub, Options& o) {
  sub->add_option("--config", o.config, "run config JSON (defaults when omitted)");
  sub->add_option("--seed", o.seed, "override the config seed");
  sub->add_option("--out", o.out, "output root (default: config out_dir, $KUNBR_OUT_DIR, ./kunbr-out)");
  sub->add_flag("--force", o.force, "accept stage-order and config-hash mismatches");
  sub->add_option("--precision", o.precision, "checkpoint storage precision")->check(CLI::IsMember({"f32", "f64"}));
}

}  // namespace

std::string comparison_table(const eval::Comparison& cmp) {
  std::string out = fmt::format("{:<6} {:>5} {:>9} {:>9} {:>9} {:>9} {:>9} {:>7}\n", "method", "seed", "unlearn%",
                                "rtt%", "recover%", "retain%", "ppl", "T%");
  for (const auto& r : cmp.reports) {
    if (!r.ok()) {
      out += fmt::format("{:<6} {:>5} failed: {}\n", r.method, r.seed, r.error);
      continue;
    }
    out += fmt::format("{:<6} {:>5} {:>9.2f} {:>9.2f} {:>+9.2f} {:>9.2f} {:>9.3f} {:>7.1f}\n", r.method, r.seed,
                       100 * r.a_unlearn, 100 * r.a_rtt, 100 * r.a_recover, 100 * r.retain_accuracy,
                       r.retain_perplexity, 100 * r.rtt_t_accuracy);
  }
  out += fmt::format("{:<6} {:>5} {:>15} {:>15} {:>15} {:>15}\n", "method", "runs", "unlearn%", "rtt%", "recover%",
                     "retain%");
  const auto cell = [](const eval::MetricSummary& m) { return fmt::format("{:.2f}±{:.2f}", 100 * m.mean, 100 * m.stddev); };
  for (const auto& a : cmp.aggregates) {
    out += fmt::format("{:<6} {:>5} {:>15} {:>15} {:>15} {:>15}{}\n", a.method, a.runs, cell(a.a_unlearn),
                       cell(a.a_rtt), cell(a.a_recover), cell(a.retain_accuracy),
                       a.warning ? fmt::format("  ({} failed)", a.failures) : std::string());
  }
  return out;
}

int run(const std::vector<std::string>& args) {
  Options o;
  CLI::App app{"KUnBR unlearning lab: synthetic birthdays, baselines, KUnBR and the RTT attack", "kunbr"};
  app.require_subcommand(1);
  app.set_version_flag("--version", tool_version());

  struct Command {
    const char* name;
    const char* help;
    void (*fn)(const Options&);
  };
  const Command commands[] = {
      {"show-config", "print the resolved config with every default", cmd_show_config},
      {"generate-data", "generate the corpus and its retain/T/V splits", cmd_generate_data},
      {"train", "memorize the corpus", cmd_train},
      {"unlearn", "apply one unlearning method to the memorized model", cmd_unlearn},
      {"density", "layer knowledge density and block selection for a checkpoint", cmd_density},
      {"attack", "run the RTT attack on an unlearned checkpoint", cmd_attack},
      {"evaluate", "score unlearned/attacked checkpoints", cmd_evaluate},
      {"compare", "methods x seeds comparison with CSV and SVG output", cmd_compare},
      {"verify", "check every artifact of a run directory against its manifest", cmd_verify},
  };
  std::vector<std::pair<CLI::App*, const Command*>> subs;
  for (const auto& cmd : commands) {
    CLI::App* sub = app.add_subcommand(cmd.name, cmd.help);
    add_common(sub, o);
    const std::string name = cmd.name;
    if (name == "unlearn" || name == "density" || name == "attack" || name == "evaluate" || name == "compare") {
      sub->add_option("--method,--methods", o.methods, "method id (GA, GD, NPO, RIA, RMU, KUnBR)")->delimiter(',');
    }
    if (name == "density" || name == "attack") sub->add_option("--checkpoint", o.checkpoint, "explicit checkpoint");
    if (name == "evaluate") sub->add_option("checkpoints", o.checkpoints, "checkpoints to score individually");
    if (name == "compare") sub->add_option("--seeds", o.seeds, "comma-separated seeds (default 0,1,2,3,4)");
    if (name == "verify") sub->add_option("--dir", o.dir, "run directory (default: the seed directory)");
    subs.emplace_back(sub, &cmd);
  }

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitValidation;
  }

  try {
    for (const auto& [sub, cmd] : subs) {
      if (sub->parsed()) cmd->fn(o);
    }
    return kExitOk;
  } catch (const ValidationError& e) {
    std::cerr << "error (validation): " << e.what() << '\n';
    return kExitValidation;
  } catch (const ShapeError& e) {
    std::cerr << "error (validation): " << e.what() << '\n';
    return kExitValidation;
  } catch (const NumericError& e) {
    std::cerr << "error (numeric): " << e.what() << '\n';
    return kExitNumeric;
  } catch (const IoError& e) {
    std::cerr << "error (io): " << e.what() << '\n';
    return kExitIo;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error (io): " << e.what() << '\n';
    return kExitIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitFailure;
  }
}

int run(int argc, char** argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run(args);
}

}  // namespace kunbr::cli
