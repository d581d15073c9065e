#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "apo/datasets.hpp"
#include "apo/errors.hpp"
#include "apo/http_provider.hpp"
#include "apo/orchestrator.hpp"
#include "apo/providers.hpp"

namespace apo {

// Sectioned key/value config files:
//
//   [task]
//   name = navigate
//   bbh_json = data/navigate.json
//   val_fraction = 0.2
//   split_seed = 17
//
//   [search]
//   io = ape
//   es = mutation
//   k = 3
//   m_total = 32
//   m_io = 8
//
// '#' and ';' start comments. Keys are addressed as "section.key".
class KeyValueConfig {
 public:
  static KeyValueConfig parse_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file: " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_string(buf.str(), path);
  }

  static KeyValueConfig parse_string(const std::string& text, const std::string& origin = "<string>") {
    KeyValueConfig cfg;
    std::string section;
    std::istringstream lines(text);
    std::string line;
    int line_no = 0;
    while (std::getline(lines, line)) {
      ++line_no;
      std::string t = trim_copy(line);
      if (t.empty() || t[0] == '#' || t[0] == ';') continue;
      if (t.front() == '[') {
        if (t.back() != ']') {
          throw ConfigError(origin + ":" + std::to_string(line_no) + ": unterminated section");
        }
        section = trim_copy(t.substr(1, t.size() - 2));
        continue;
      }
      auto eq = t.find('=');
      if (eq == std::string::npos) {
        throw ConfigError(origin + ":" + std::to_string(line_no) + ": expected key = value");
      }
      std::string key = trim_copy(t.substr(0, eq));
      std::string value = trim_copy(t.substr(eq + 1));
      if (key.empty()) {
        throw ConfigError(origin + ":" + std::to_string(line_no) + ": empty key");
      }
      cfg.values_[section.empty() ? key : section + "." + key] = value;
    }
    return cfg;
  }

  bool has(const std::string& key) const { return values_.count(key) > 0; }

  std::string get(const std::string& key, const std::string& fallback = "") const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }

  std::string require(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("config is missing required key: " + key);
    return it->second;
  }

  int get_int(const std::string& key, int fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    try {
      return std::stoi(it->second);
    } catch (const std::exception&) {
      throw ConfigError("config key " + key + " is not an integer: " + it->second);
    }
  }

  double get_double(const std::string& key, double fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    try {
      return std::stod(it->second);
    } catch (const std::exception&) {
      throw ConfigError("config key " + key + " is not a number: " + it->second);
    }
  }

  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    try {
      return std::stoull(it->second);
    } catch (const std::exception&) {
      throw ConfigError("config key " + key + " is not an integer: " + it->second);
    }
  }

  const std::map<std::string, std::string>& all() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

// scripted endpoint from JSON:
// {"rules":[{"contains":[...],"tail_contains":[...],"response":"..."}],
//  "default":"..."}; tail_contains is optional and matches the live block only
inline std::shared_ptr<ScriptedEndpoint> scripted_endpoint_from_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open scripted rules file: " + path);
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError("scripted rules JSON parse error in " + path + ": " + e.what());
  }
  std::vector<ScriptedRule> rules;
  for (const auto& r : doc.value("rules", nlohmann::json::array())) {
    ScriptedRule rule;
    for (const auto& needle : r.at("contains")) rule.contains_all.push_back(needle.get<std::string>());
    for (const auto& needle : r.value("tail_contains", nlohmann::json::array())) {
      rule.tail_contains.push_back(needle.get<std::string>());
    }
    rule.response = r.at("response").get<std::string>();
    rules.push_back(std::move(rule));
  }
  return std::make_shared<ScriptedEndpoint>(std::move(rules), doc.value("default", std::string{}),
                                            "scripted:" + path);
}

// endpoints built from a config file; keeps ownership alongside the view
struct OwnedEndpoints {
  std::shared_ptr<GenerationEndpoint> target;
  std::shared_ptr<GenerationEndpoint> optimizer;
  std::shared_ptr<EmbeddingEndpoint> embedder;

  Endpoints view() const {
    Endpoints e;
    e.target = target.get();
    e.optimizer = optimizer.get();
    e.embedder = embedder.get();
    return e;
  }
};

namespace detail {

inline HttpEndpointConfig http_config_from(const KeyValueConfig& cfg, const std::string& section) {
  HttpEndpointConfig http;
  http.base_url = cfg.get(section + ".base_url", http.base_url);
  http.model = cfg.get(section + ".model", http.model);
  http.api_key_env = cfg.get(section + ".api_key_env", http.api_key_env);
  http.api_style = cfg.get(section + ".api_style", http.api_style);
  http.timeout_s = cfg.get_int(section + ".timeout_s", http.timeout_s);
  http.max_attempts = cfg.get_int(section + ".max_attempts", http.max_attempts);
  http.backoff_base_ms = cfg.get_int(section + ".backoff_base_ms", http.backoff_base_ms);
  return http;
}

inline std::shared_ptr<GenerationEndpoint> generation_endpoint_from(const KeyValueConfig& cfg,
                                                                    const std::string& section) {
  const std::string provider = cfg.get(section + ".provider", "");
  if (provider.empty()) return nullptr;
  if (provider == "http") {
    return std::make_shared<HttpGenerationEndpoint>(http_config_from(cfg, section));
  }
  if (provider == "scripted") {
    return scripted_endpoint_from_json(cfg.require(section + ".rules_json"));
  }
  throw ConfigError("unknown provider for [" + section + "]: " + provider);
}

}  // namespace detail

inline OwnedEndpoints endpoints_from_config(const KeyValueConfig& cfg) {
  OwnedEndpoints owned;
  owned.target = detail::generation_endpoint_from(cfg, "target");
  if (!owned.target) throw ConfigError("config needs a [target] section with provider=");
  owned.optimizer = detail::generation_endpoint_from(cfg, "optimizer");

  const std::string embed_provider = cfg.get("embedding.provider", "hashed_bow");
  if (embed_provider == "hashed_bow") {
    owned.embedder = std::make_shared<HashedBowEmbedder>(
        static_cast<std::size_t>(cfg.get_int("embedding.dim", 256)));
  } else if (embed_provider == "http") {
    owned.embedder =
        std::make_shared<HttpEmbeddingEndpoint>(detail::http_config_from(cfg, "embedding"));
  } else {
    throw ConfigError("unknown provider for [embedding]: " + embed_provider);
  }
  return owned;
}

inline TaskData task_data_from_config(const KeyValueConfig& cfg) {
  TaskData data;
  const std::string name = cfg.get("task.name", "");
  if (cfg.has("task.bbh_json")) {
    Task task = load_bbh_task(cfg.require("task.bbh_json"), name);
    auto [val, test] = split_task(
        task, fraction_split(cfg.get_double("task.val_fraction", 0.2),
                             cfg.get_u64("task.split_seed", 0)));
    data.val = std::move(val);
    data.test = std::move(test);
    data.kind = task.answer_kind;
    return data;
  }
  if (cfg.has("task.mmlu_val_csv")) {
    auto [val_task, test_task] = load_mmlu_task(
        cfg.require("task.mmlu_val_csv"), cfg.require("task.mmlu_test_csv"),
        name.empty() ? "mmlu" : name);
    data.val = std::move(val_task.items);
    data.test = std::move(test_task.items);
    data.kind = val_task.answer_kind;
    return data;
  }
  throw ConfigError("config needs task.bbh_json or task.mmlu_val_csv/mmlu_test_csv");
}

inline RunConfig run_config_from(const KeyValueConfig& cfg) {
  RunConfig rc;
  rc.task_name = cfg.get("task.name", "task");
  rc.task_description = cfg.get("task.description", "");
  rc.io_method = io_method_from(cfg.get("search.io", "none"));
  rc.es_method = es_method_from(cfg.get("search.es", "none"));
  rc.k = cfg.get_int("search.k", 3);
  rc.m_total = cfg.get_int("search.m_total", 32);
  if (cfg.has("search.m_io")) {
    rc.m_io = cfg.get_int("search.m_io", 0);
    rc.m_es = rc.m_total - rc.m_io;
  } else {
    // default split: a budgeted IO method gets everything unless told otherwise
    rc.m_io = rc.io_method == IoMethod::none ? 0 : rc.m_total;
    rc.m_es = rc.m_total - rc.m_io;
  }
  rc.seed = cfg.get_u64("search.seed", 0);
  rc.split_seed = cfg.get_u64("task.split_seed", 0);
  const std::string style = cfg.get("search.style", "auto");
  if (style == "qa_block") {
    rc.style = TemplateStyle::qa_block;
  } else if (style == "header_block") {
    rc.style = TemplateStyle::header_block;
  } else if (style != "auto") {
    throw ConfigError("search.style must be auto, qa_block or header_block");
  }
  rc.population = cfg.get_int("search.population", 8);
  rc.workers = cfg.get_int("search.workers", 1);
  rc.audit_heuristic_val = cfg.get_int("search.audit_heuristic_val", 0) != 0;

  rc.io.population = cfg.get_int("search.io_population", rc.io.population);
  rc.io.generations = cfg.get_int("search.io_generations", rc.io.generations);
  rc.io.survivors = cfg.get_int("search.io_survivors", rc.io.survivors);
  rc.io.candidates_per_step = cfg.get_int("search.io_candidates_per_step", rc.io.candidates_per_step);
  rc.io.steps = cfg.get_int("search.io_steps", rc.io.steps);
  rc.io.trajectory_window = cfg.get_int("search.io_trajectory_window", rc.io.trajectory_window);
  rc.io.gradient_half = cfg.get_int("search.io_gradient_half", rc.io.gradient_half);
  rc.io.mc_half = cfg.get_int("search.io_mc_half", rc.io.mc_half);
  rc.io.beam_width = cfg.get_int("search.io_beam_width", rc.io.beam_width);
  rc.io.errors_sampled = cfg.get_int("search.io_errors_sampled", rc.io.errors_sampled);
  if (cfg.has("templates.dir")) rc.io.templates = MetaPromptSet::load_dir(cfg.require("templates.dir"));

  rc.validate();
  return rc;
}

}  // namespace apo
