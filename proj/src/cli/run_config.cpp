// SPDX-License-Identifier: Apache-2.0
#include "kunbr/cli/run_config.hpp"

#include <fmt/format.h>
#include <set>

#include "kunbr/gradbackend/error.hpp"
#include "kunbr/io.hpp"

namespace kunbr::cli {

namespace {

using nlohmann::json;

class Section {
 public:
  Section(const json& j, std::string path, std::set<std::string> allowed) : j_(j), path_(std::move(path)) {
    if (!j.is_object()) throw ValidationError(fmt::format("config: '{}' must be an object", path_));
    for (const auto& [key, _] : j.items()) {
      if (!allowed.contains(key)) {
        std::string known;
        for (const auto& k : allowed) known += (known.empty() ? "" : ", ") + k;
        throw ValidationError(fmt::format("config: unknown key '{}' in '{}' (allowed: {})", key, path_, known));
      }
    }
  }

  bool has(const char* key) const { return j_.contains(key); }
  const json& at(const char* key) const { return j_.at(key); }
  std::string where(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

  void read(const char* key, std::size_t& out) const {
    if (!has(key)) return;
    const auto& v = j_.at(key);
    if (!v.is_number_integer() || v.get<long long>() < 0) {
      throw ValidationError(fmt::format("config: '{}' must be a non-negative integer", where(key)));
    }
    out = v.get<std::size_t>();
  }
  void read(const char* key, double& out) const {
    if (!has(key)) return;
    const auto& v = j_.at(key);
    if (!v.is_number()) throw ValidationError(fmt::format("config: '{}' must be a number", where(key)));
    out = v.get<double>();
  }
  void read(const char* key, std::optional<double>& out) const {
    if (!has(key)) return;
    if (j_.at(key).is_null()) {
      out.reset();
      return;
    }
    double v = 0.0;
    read(key, v);
    out = v;
  }
  void read(const char* key, bool& out) const {
    if (!has(key)) return;
    if (!j_.at(key).is_boolean()) throw ValidationError(fmt::format("config: '{}' must be true or false", where(key)));
    out = j_.at(key).get<bool>();
  }
  void read(const char* key, std::string& out) const {
    if (!has(key)) return;
    if (!j_.at(key).is_string()) throw ValidationError(fmt::format("config: '{}' must be a string", where(key)));
    out = j_.at(key).get<std::string>();
  }

 private:
  const json& j_;
  std::string path_;
};

std::set<std::string> method_keys(unlearn::Method m) {
  std::set<std::string> keys = {"lr", "epochs", "batch_size"};
  switch (m) {
    case unlearn::Method::kGA: keys.insert("loss_ceiling"); break;
    case unlearn::Method::kGD:
      keys.insert("retain_coeff");
      keys.insert("loss_ceiling");
      break;
    case unlearn::Method::kNPO: keys.insert("npo_epsilon"); break;
    case unlearn::Method::kRIA: break;
    case unlearn::Method::kRMU: keys.insert("rmu_delta_scale"); break;
  }
  return keys;
}

void read_unlearn(const json& j, const std::string& path, unlearn::UnlearnConfig& c) {
  const Section s(j, path, method_keys(c.method));
  s.read("lr", c.lr);
  s.read("epochs", c.epochs);
  s.read("batch_size", c.batch_size);
  if (s.has("retain_coeff")) s.read("retain_coeff", c.retain_coeff);
  if (s.has("loss_ceiling")) s.read("loss_ceiling", c.loss_ceiling);
  if (s.has("npo_epsilon")) s.read("npo_epsilon", c.npo_epsilon);
  if (s.has("rmu_delta_scale")) s.read("rmu_delta_scale", c.rmu_delta_scale);
}

void read_kunbr(const json& j, const std::string& path, pipeline::KunbrConfig& c) {
  const Section s(j, path,
                  {"warm_steps", "M", "top_k", "head_exclude_layers", "rounds", "per_block_epochs", "batch_size", "lr",
                   "warm_lr", "retain_coeff", "density_on", "joint", "loss_ceiling"});
  s.read("warm_steps", c.warm_steps);
  s.read("M", c.M);
  s.read("top_k", c.top_k);
  s.read("head_exclude_layers", c.head_exclude_layers);
  s.read("rounds", c.rounds);
  s.read("per_block_epochs", c.per_block_epochs);
  s.read("batch_size", c.batch_size);
  s.read("lr", c.lr);
  s.read("warm_lr", c.warm_lr);
  s.read("retain_coeff", c.retain_coeff);
  s.read("joint", c.joint);
  s.read("loss_ceiling", c.loss_ceiling);
  if (s.has("density_on")) {
    std::string d;
    s.read("density_on", d);
    c.density_on = pipeline::parse_density_on(d);
  }
}

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(); }

}  // namespace

RunConfig parse_run_config(const json& j) {
  const Section top(j, "", {"schema", "seed", "out_dir", "provenance", "corpus", "model", "train", "unlearn", "attack"});
  if (!top.has("schema")) throw ValidationError(fmt::format("config: missing 'schema' (expected \"{}\")", kRunSchema));
  if (!top.at("schema").is_string() || top.at("schema").get<std::string>() != kRunSchema) {
    throw ValidationError(fmt::format("config: unsupported schema {} (expected \"{}\")", top.at("schema").dump(), kRunSchema));
  }

  RunConfig rc;
  std::size_t seed = 0;
  top.read("seed", seed);
  rc.seed = seed;
  top.read("out_dir", rc.out_dir);
  auto& e = rc.experiment;

  if (top.has("corpus")) {
    const Section s(top.at("corpus"), "corpus", {"n_facts", "forget_fraction", "t_fraction", "syllables"});
    s.read("n_facts", e.corpus.n_facts);
    s.read("forget_fraction", e.corpus.forget_fraction);
    s.read("t_fraction", e.corpus.t_fraction);
    s.read("syllables", e.corpus.syllables);
  }
  if (top.has("model")) {
    const Section s(top.at("model"), "model", {"layers", "d_model", "n_heads", "d_ff", "vocab", "context", "init_scale"});
    s.read("layers", e.model.layers);
    s.read("d_model", e.model.d_model);
    s.read("n_heads", e.model.n_heads);
    s.read("d_ff", e.model.d_ff);
    s.read("vocab", e.model.vocab);
    s.read("context", e.model.context);
    s.read("init_scale", e.model.init_scale);
  }
  if (top.has("train")) {
    const Section s(top.at("train"), "train", {"lr", "epochs", "batch_size", "stop_accuracy", "eval_every"});
    s.read("lr", e.train.lr);
    s.read("epochs", e.train.epochs);
    s.read("batch_size", e.train.batch_size);
    s.read("stop_accuracy", e.train.stop_accuracy);
    s.read("eval_every", e.train.eval_every);
  }
  if (top.has("unlearn")) {
    std::set<std::string> names;
    for (const auto& id : eval::method_ids()) names.insert(id);
    const Section s(top.at("unlearn"), "unlearn", names);
    for (auto m : unlearn::all_methods()) {
      const std::string name(unlearn::method_name(m));
      if (s.has(name.c_str())) read_unlearn(s.at(name.c_str()), "unlearn." + name, e.unlearn.at(m));
    }
    const std::string k(eval::kKunbrMethod);
    if (s.has(k.c_str())) read_kunbr(s.at(k.c_str()), "unlearn." + k, e.kunbr);
  }
  if (top.has("attack")) {
    const Section s(top.at("attack"), "attack", {"lr", "max_epochs", "batch_size", "target_accuracy"});
    s.read("lr", e.attack.lr);
    s.read("max_epochs", e.attack.max_epochs);
    s.read("batch_size", e.attack.batch_size);
    s.read("target_accuracy", e.attack.target_accuracy);
  }
  e.validate();
  return rc;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::parse_error& err) {
    throw ValidationError(fmt::format("config {} is not valid JSON: {}", path.string(), err.what()));
  }
  return parse_run_config(j);
}

json reference_setting() {
  return {{"note", "hyperparameters of the published 7-8B setting; informational, ignored on input"},
          {"lr", 1.5e-7},
          {"retain_coeff", 0.1},
          {"warm_steps", 24},
          {"M", 8},
          {"top_k", 6}};
}

json to_json(const RunConfig& rc) {
  const auto& e = rc.experiment;
  json unlearn_j = json::object();
  for (const auto& [m, c] : e.unlearn) {
    json u = {{"lr", c.lr}, {"epochs", c.epochs}, {"batch_size", c.batch_size}};
    const auto keys = method_keys(m);
    if (keys.contains("retain_coeff")) u["retain_coeff"] = c.retain_coeff;
    if (keys.contains("loss_ceiling")) u["loss_ceiling"] = optional_json(c.loss_ceiling);
    if (keys.contains("npo_epsilon")) u["npo_epsilon"] = c.npo_epsilon;
    if (keys.contains("rmu_delta_scale")) u["rmu_delta_scale"] = c.rmu_delta_scale;
    unlearn_j[std::string(unlearn::method_name(m))] = u;
  }
  const auto& k = e.kunbr;
  unlearn_j[std::string(eval::kKunbrMethod)] = {{"warm_steps", k.warm_steps},
                                                 {"M", k.M},
                                                 {"top_k", k.top_k},
                                                 {"head_exclude_layers", k.head_exclude_layers},
                                                 {"rounds", k.rounds},
                                                 {"per_block_epochs", k.per_block_epochs},
                                                 {"batch_size", k.batch_size},
                                                 {"lr", k.lr},
                                                 {"warm_lr", optional_json(k.warm_lr)},
                                                 {"retain_coeff", k.retain_coeff},
                                                 {"density_on", pipeline::density_on_name(k.density_on)},
                                                 {"joint", k.joint},
                                                 {"loss_ceiling", optional_json(k.loss_ceiling)}};
  return {{"schema", kRunSchema},
          {"provenance", reference_setting()},
          {"seed", rc.seed},
          {"out_dir", rc.out_dir},
          {"corpus",
           {{"n_facts", e.corpus.n_facts},
            {"forget_fraction", e.corpus.forget_fraction},
            {"t_fraction", e.corpus.t_fraction},
            {"syllables", e.corpus.syllables}}},
          {"model",
           {{"layers", e.model.layers},
            {"d_model", e.model.d_model},
            {"n_heads", e.model.n_heads},
            {"d_ff", e.model.d_ff},
            {"vocab", e.model.vocab},
            {"context", e.model.context},
            {"init_scale", e.model.init_scale}}},
          {"train",
           {{"lr", e.train.lr},
            {"epochs", e.train.epochs},
            {"batch_size", e.train.batch_size},
            {"stop_accuracy", e.train.stop_accuracy},
            {"eval_every", e.train.eval_every}}},
          {"unlearn", unlearn_j},
          {"attack",
           {{"lr", e.attack.lr},
            {"max_epochs", e.attack.max_epochs},
            {"batch_size", e.attack.batch_size},
            {"target_accuracy", e.attack.target_accuracy}}}};
}

}  // namespace kunbr::cli
