// SPDX-License-Identifier: Apache-2.0
#include "kunbr/evalrtt/experiment.hpp"

#include <cmath>
#include <fmt/format.h>

#include "kunbr/gradbackend/error.hpp"
#include "kunbr/gradbackend/rng.hpp"
#include "kunbr/io.hpp"
#include "kunbr/lm/checkpoint.hpp"
#include "kunbr/lm/model.hpp"

namespace kunbr::eval {

std::vector<std::string> CorpusConfig::violations() const {
  std::vector<std::string> out;
  if (n_facts < 8) out.push_back(fmt::format("corpus n_facts must be at least 8, got {}", n_facts));
  if (!(forget_fraction > 0.0 && forget_fraction < 1.0)) out.push_back("corpus forget_fraction must lie in (0, 1)");
  if (!(t_fraction > 0.0 && t_fraction < 1.0)) out.push_back("corpus t_fraction must lie in (0, 1)");
  if (syllables < 2 || syllables > corpus::syllable_inventory().size()) {
    out.push_back(fmt::format("corpus syllables must lie in [2, {}]", corpus::syllable_inventory().size()));
  }
  return out;
}

std::map<unlearn::Method, unlearn::UnlearnConfig> ExperimentConfig::default_unlearn_configs() {
  std::map<unlearn::Method, unlearn::UnlearnConfig> out;
  for (auto m : unlearn::all_methods()) {
    unlearn::UnlearnConfig c;
    c.method = m;
    switch (m) {
      case unlearn::Method::kGA:
        c.lr = 1e-2;
        c.epochs = 8;
        c.loss_ceiling = 15.0;
        break;
      case unlearn::Method::kGD:
        c.lr = 1e-2;
        c.epochs = 16;
        c.retain_coeff = 1.0;
        break;
      case unlearn::Method::kNPO:
        c.lr = 1e-2;
        c.epochs = 8;
        break;
      case unlearn::Method::kRIA:
        c.lr = 1e-3;
        c.epochs = 8;
        break;
      case unlearn::Method::kRMU:
        // The summed residual distance is O(1e4), so steps must be tiny.
        c.lr = 1e-6;
        c.epochs = 6;
        break;
    }
    out.emplace(m, c);
  }
  return out;
}

std::vector<std::string> ExperimentConfig::violations() const {
  std::vector<std::string> out = corpus.violations();
  for (auto& v : model.violations()) out.push_back("model: " + v);
  for (auto& v : train.violations()) out.push_back(v);
  for (const auto& [m, c] : unlearn) {
    if (c.method != m) out.push_back(fmt::format("unlearn section {} declares method {}", unlearn::method_name(m), unlearn::method_name(c.method)));
    for (auto& v : c.violations()) out.push_back(fmt::format("unlearn {}: {}", unlearn::method_name(m), v));
  }
  for (auto& v : kunbr.violations(model.layers)) out.push_back("kunbr: " + v);
  for (auto& v : attack.violations()) out.push_back(v);
  return out;
}

void ExperimentConfig::validate() const {
  const auto v = violations();
  if (v.empty()) return;
  std::string msg = "invalid experiment config:";
  for (const auto& s : v) msg += "\n  - " + s;
  throw ValidationError(msg);
}

std::vector<std::string> method_ids() {
  std::vector<std::string> out;
  for (auto m : unlearn::all_methods()) out.emplace_back(unlearn::method_name(m));
  out.emplace_back(kKunbrMethod);
  return out;
}

std::string canonical_method(std::string_view name) {
  std::string upper(name);
  for (auto& c : upper) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  if (upper == "KUNBR") return std::string(kKunbrMethod);
  return std::string(unlearn::method_name(unlearn::parse_method(name)));
}

nlohmann::json to_json(const unlearn::UnlearnConfig& c) {
  nlohmann::json j = {{"method", unlearn::method_name(c.method)},
                      {"lr", c.lr},
                      {"retain_coeff", c.retain_coeff},
                      {"epochs", c.epochs},
                      {"batch_size", c.batch_size},
                      {"rmu_delta_scale", c.rmu_delta_scale},
                      {"npo_epsilon", c.npo_epsilon},
                      {"seed", c.seed}};
  j["loss_ceiling"] = c.loss_ceiling ? nlohmann::json(*c.loss_ceiling) : nlohmann::json();
  return j;
}

nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json unlearn_j = nlohmann::json::object();
  for (const auto& [m, u] : c.unlearn) unlearn_j[std::string(unlearn::method_name(m))] = to_json(u);
  return {{"corpus",
           {{"n_facts", c.corpus.n_facts},
            {"forget_fraction", c.corpus.forget_fraction},
            {"t_fraction", c.corpus.t_fraction},
            {"syllables", c.corpus.syllables}}},
          {"model", model_config_to_json(c.model)},
          {"train",
           {{"lr", c.train.lr},
            {"epochs", c.train.epochs},
            {"batch_size", c.train.batch_size},
            {"stop_accuracy", c.train.stop_accuracy},
            {"eval_every", c.train.eval_every}}},
          {"unlearn", unlearn_j},
          {"kunbr", pipeline::to_json(c.kunbr)},
          {"attack",
           {{"lr", c.attack.lr},
            {"max_epochs", c.attack.max_epochs},
            {"batch_size", c.attack.batch_size},
            {"target_accuracy", c.attack.target_accuracy}}}};
}

std::string config_hash(const ExperimentConfig& config) { return sha256_hex(to_json(config).dump()); }

std::uint64_t stage_seed(std::uint64_t seed, std::string_view stage) { return derive_seed(seed, stage); }

corpus::DatasetSplits make_splits(const CorpusConfig& config, std::uint64_t seed, std::vector<corpus::FactRecord>* records) {
  auto facts = corpus::generate_corpus(config.n_facts, stage_seed(seed, "corpus"), config.syllables);
  auto splits = corpus::split(facts, config.forget_fraction, config.t_fraction, stage_seed(seed, "split"));
  if (records) *records = std::move(facts);
  return splits;
}

ModelConfig model_for(const ExperimentConfig& config, const corpus::Tokenizer& tokenizer, std::uint64_t seed) {
  ModelConfig m = config.model;
  if (tokenizer.size() > m.vocab) {
    throw ValidationError(fmt::format("corpus vocabulary of {} words exceeds model vocab {}", tokenizer.size(), m.vocab));
  }
  m.seed = stage_seed(seed, "init");
  return m;
}

SeedContext prepare_seed(const ExperimentConfig& config, std::uint64_t seed) {
  config.validate();
  SeedContext ctx;
  ctx.seed = seed;
  std::vector<corpus::FactRecord> records;
  ctx.splits = make_splits(config.corpus, seed, &records);
  ctx.tokenizer = corpus::Tokenizer::build(records);
  ctx.memorized = lm::init_model(model_for(config, ctx.tokenizer, seed));
  check_context_length(config.model, records, ctx.tokenizer);
  ctx.memorize = memorize(ctx.memorized, ctx.splits, ctx.tokenizer, config.train, stage_seed(seed, "train"));
  ctx.pre_retain_accuracy = mcq_accuracy(ctx.memorized, ctx.splits.retain, ctx.tokenizer);
  ctx.pre_v_accuracy = mcq_accuracy(ctx.memorized, ctx.splits.forget_V, ctx.tokenizer);
  return ctx;
}

void check_context_length(const ModelConfig& model, std::span<const corpus::FactRecord> records,
                          const corpus::Tokenizer& tokenizer) {
  for (const auto& r : records) {
    const auto n = corpus::render_mcq(r, tokenizer).prompt.size();
    if (n > model.context) {
      throw ValidationError(
          fmt::format("prompt for '{}' has {} tokens, context length is {}", r.person_name, n, model.context));
    }
  }
}

SeedContext seed_context(std::uint64_t seed, corpus::DatasetSplits splits, ParameterStore memorized) {
  SeedContext ctx;
  ctx.seed = seed;
  ctx.splits = std::move(splits);
  auto records = ctx.splits.retain;
  for (const auto& r : ctx.splits.forget()) records.push_back(r);
  ctx.tokenizer = corpus::Tokenizer::build(records);
  ctx.memorized = std::move(memorized);
  ctx.memorize.accuracy = mcq_accuracy(ctx.memorized, records, ctx.tokenizer);
  ctx.pre_retain_accuracy = mcq_accuracy(ctx.memorized, ctx.splits.retain, ctx.tokenizer);
  ctx.pre_v_accuracy = mcq_accuracy(ctx.memorized, ctx.splits.forget_V, ctx.tokenizer);
  return ctx;
}

UnlearnOutcome apply_method(const ExperimentConfig& config, const SeedContext& ctx, const std::string& method) {
  const std::string id = canonical_method(method);
  if (id == kKunbrMethod) {
    auto k = config.kunbr;
    k.seed = stage_seed(ctx.seed, "unlearn.kunbr");
    auto r = pipeline::run_kunbr(ctx.memorized, ctx.splits, ctx.tokenizer, k);
    return {std::move(r.model),      r.report.status == "aborted" ? "aborted" : "ok", r.report.error,
            pipeline::to_json(r.report), pipeline::trace_csv(r.report),          std::move(r.warmup_model)};
  }
  const auto m = unlearn::parse_method(id);
  auto it = config.unlearn.find(m);
  if (it == config.unlearn.end()) throw ValidationError(fmt::format("no unlearn section for method {}", id));
  unlearn::UnlearnConfig u = it->second;
  u.seed = stage_seed(ctx.seed, "unlearn." + id);
  ParameterStore model = ctx.memorized;
  const auto r = unlearn::run_unlearning(model, ctx.splits, ctx.tokenizer, u, FreezeMask::all(model));
  nlohmann::json detail = {{"status", r.status}, {"steps", r.trace.size()}};
  if (!r.trace.empty()) detail["final_loss_forget"] = r.trace.back().loss_forget;
  return {std::move(model), r.ok() ? "ok" : "aborted", r.error, detail, unlearn::trace_csv(r.trace), std::nullopt};
}

std::string parameters_sha256(const ParameterStore& model) {
  return sha256_hex(serialize_checkpoint(model, nlohmann::json::object(), Precision::kF64));
}

ExperimentReport evaluate_unlearned(const ExperimentConfig& config, const SeedContext& ctx, const std::string& method,
                                    const ParameterStore& unlearned, ParameterStore* attacked_out) {
  ExperimentReport rep;
  rep.method = canonical_method(method);
  rep.seed = ctx.seed;
  rep.config_hash = config_hash(config);
  rep.memorized_accuracy = ctx.memorize.accuracy;
  rep.pre_retain_accuracy = ctx.pre_retain_accuracy;
  rep.pre_v_accuracy = ctx.pre_v_accuracy;
  rep.a_unlearn = mcq_accuracy(unlearned, ctx.splits.forget_V, ctx.tokenizer);
  const auto u = utility_eval(unlearned, ctx.splits.retain, ctx.tokenizer);
  rep.retain_accuracy = u.retain_accuracy;
  rep.retain_perplexity = u.retain_perplexity;
  rep.unlearned_sha256 = parameters_sha256(unlearned);

  ParameterStore attacked = unlearned;
  const auto attack = rtt_attack(attacked, ctx.splits, ctx.tokenizer, config.attack, stage_seed(ctx.seed, "attack"));
  rep.rtt_t_accuracy = attack.t_accuracy;
  rep.rtt_epochs = attack.epochs_run;
  rep.rtt_reached_target = attack.reached_target;
  rep.a_rtt = mcq_accuracy(attacked, ctx.splits.forget_V, ctx.tokenizer);
  rep.a_recover = recovery(rep.a_unlearn, rep.a_rtt);
  rep.attacked_sha256 = parameters_sha256(attacked);
  if (attacked_out) *attacked_out = std::move(attacked);
  return rep;
}

MetricSummary summarize(const std::vector<double>& values) {
  MetricSummary s;
  if (values.empty()) return s;
  double total = 0.0;
  for (double v : values) total += v;
  s.mean = total / static_cast<double>(values.size());
  if (values.size() > 1) {
    double sq = 0.0;
    for (double v : values) sq += (v - s.mean) * (v - s.mean);
    s.stddev = std::sqrt(sq / static_cast<double>(values.size() - 1));
  }
  return s;
}

Aggregate aggregate(const std::string& method, const std::vector<ExperimentReport>& reports) {
  Aggregate a;
  a.method = method;
  std::vector<double> un, rtt, rec, acc, ppl, t;
  for (const auto& r : reports) {
    if (r.method != method) continue;
    if (!r.ok()) {
      ++a.failures;
      continue;
    }
    ++a.runs;
    un.push_back(r.a_unlearn);
    rtt.push_back(r.a_rtt);
    rec.push_back(r.a_recover);
    acc.push_back(r.retain_accuracy);
    ppl.push_back(r.retain_perplexity);
    t.push_back(r.rtt_t_accuracy);
  }
  a.warning = a.failures > 0;
  a.a_unlearn = summarize(un);
  a.a_rtt = summarize(rtt);
  a.a_recover = summarize(rec);
  a.retain_accuracy = summarize(acc);
  a.retain_perplexity = summarize(ppl);
  a.rtt_t_accuracy = summarize(t);
  return a;
}

Comparison run_comparison(const ExperimentConfig& config, const std::vector<std::string>& methods,
                          const std::vector<std::uint64_t>& seeds, const ProgressFn& progress) {
  if (seeds.empty()) throw ValidationError("comparison needs at least one seed");
  if (methods.empty()) throw ValidationError("comparison needs at least one method");
  config.validate();
  std::vector<std::string> ids;
  for (const auto& m : methods) ids.push_back(canonical_method(m));

  Comparison out;
  for (auto seed : seeds) {
    if (progress) progress(fmt::format("seed {}: memorizing", seed));
    std::optional<SeedContext> ctx;
    std::string failure;
    try {
      ctx = prepare_seed(config, seed);
    } catch (const NumericError& e) {
      failure = e.what();
    }
    for (const auto& id : ids) {
      ExperimentReport rep;
      rep.method = id;
      rep.seed = seed;
      rep.config_hash = config_hash(config);
      if (!ctx) {
        rep.status = "failed";
        rep.error = "memorization: " + failure;
        out.reports.push_back(std::move(rep));
        continue;
      }
      if (progress) progress(fmt::format("seed {}: {}", seed, id));
      try {
        auto outcome = apply_method(config, *ctx, id);
        if (outcome.status != "ok") {
          rep.status = "failed";
          rep.error = "unlearning: " + outcome.error;
          rep.unlearn_detail = outcome.detail;
        } else {
          rep = evaluate_unlearned(config, *ctx, id, outcome.model);
          rep.unlearn_detail = std::move(outcome.detail);
        }
      } catch (const NumericError& e) {
        rep.status = "failed";
        rep.error = e.what();
      }
      out.reports.push_back(std::move(rep));
    }
  }
  for (const auto& id : ids) out.aggregates.push_back(aggregate(id, out.reports));
  return out;
}

nlohmann::json to_json(const ExperimentReport& r) {
  nlohmann::json j = {{"method", r.method},
                      {"seed", r.seed},
                      {"config_hash", r.config_hash},
                      {"status", r.status},
                      {"memorized_accuracy", r.memorized_accuracy},
                      {"pre_retain_accuracy", r.pre_retain_accuracy},
                      {"pre_v_accuracy", r.pre_v_accuracy},
                      {"a_unlearn", r.a_unlearn},
                      {"a_rtt", r.a_rtt},
                      {"a_recover", r.a_recover},
                      {"retain_accuracy", r.retain_accuracy},
                      {"retain_perplexity", r.retain_perplexity},
                      {"rtt_t_accuracy", r.rtt_t_accuracy},
                      {"rtt_epochs", r.rtt_epochs},
                      {"rtt_reached_target", r.rtt_reached_target},
                      {"unlearned_sha256", r.unlearned_sha256},
                      {"attacked_sha256", r.attacked_sha256}};
  if (!r.error.empty()) j["error"] = r.error;
  if (!r.unlearn_detail.is_null()) j["unlearn_detail"] = r.unlearn_detail;
  return j;
}

nlohmann::json to_json(const Aggregate& a) {
  auto m = [](const MetricSummary& s) { return nlohmann::json{{"mean", s.mean}, {"std", s.stddev}}; };
  return {{"method", a.method},
          {"runs", a.runs},
          {"failures", a.failures},
          {"warning", a.warning},
          {"a_unlearn", m(a.a_unlearn)},
          {"a_rtt", m(a.a_rtt)},
          {"a_recover", m(a.a_recover)},
          {"retain_accuracy", m(a.retain_accuracy)},
          {"retain_perplexity", m(a.retain_perplexity)},
          {"rtt_t_accuracy", m(a.rtt_t_accuracy)}};
}

std::string reports_csv(const std::vector<ExperimentReport>& reports) {
  std::string out = "method,seed,a_unlearn_pct,a_rtt_pct,a_recover_pct,retain_acc_pct,retain_ppl\n";
  for (const auto& r : reports) {
    if (!r.ok()) {
      out += fmt::format("{},{},,,,,\n", r.method, r.seed);
      continue;
    }
    out += fmt::format("{},{},{:.2f},{:.2f},{:.2f},{:.2f},{:.4f}\n", r.method, r.seed, 100 * r.a_unlearn, 100 * r.a_rtt,
                       100 * r.a_recover, 100 * r.retain_accuracy, r.retain_perplexity);
  }
  return out;
}

std::string aggregate_csv(const std::vector<Aggregate>& aggregates) {
  std::string out =
      "method,runs,failures,forget_pct_mean,forget_pct_std,rtt_pct_mean,rtt_pct_std,rec_pct_mean,rec_pct_std,"
      "retain_acc_pct_mean,retain_acc_pct_std,retain_ppl_mean,retain_ppl_std\n";
  for (const auto& a : aggregates) {
    out += fmt::format("{},{},{},{:.2f},{:.2f},{:.2f},{:.2f},{:.2f},{:.2f},{:.2f},{:.2f},{:.4f},{:.4f}\n", a.method, a.runs,
                       a.failures, 100 * a.a_unlearn.mean, 100 * a.a_unlearn.stddev, 100 * a.a_rtt.mean,
                       100 * a.a_rtt.stddev, 100 * a.a_recover.mean, 100 * a.a_recover.stddev,
                       100 * a.retain_accuracy.mean, 100 * a.retain_accuracy.stddev, a.retain_perplexity.mean,
                       a.retain_perplexity.stddev);
  }
  return out;
}

}  // namespace kunbr::eval
