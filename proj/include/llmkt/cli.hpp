#pragma once

// The `llmkt` command line. Exit codes: 0 success, 1 invalid input, 2 failure
// while running.

#include <glob.h>

#include <iomanip>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "llmkt/pipeline.hpp"
#include "llmkt/profiles.hpp"
#include "llmkt/http_clients.hpp"

namespace llmkt::cli {

enum Exit { kOk = 0, kValidation = 1, kRuntime = 2 };

// ---- profiles job ------------------------------------------------------------------

struct ClientConfig {
  std::string kind = "stub";  // stub or openai
  std::uint64_t seed = 0;
  std::size_t dim = 64;  // embedder only
  std::string base_url = "https://api.openai.com/v1";
  std::string model;
  std::string api_key_env = "OPENAI_API_KEY";
  std::uint64_t timeout_s = 60;
};

struct ProfilesJob {
  std::string interactions;
  std::string item_titles;
  PromptTemplate tpl = PromptTemplate::default_template();
  ClientConfig llm;
  ClientConfig embedder;
  std::string profiles_file = "profiles.jsonl";
  std::string embeddings_file = "embeddings.jsonl";
  std::string cache_dir;
  std::size_t max_in_flight = 4;
  RetryPolicy retry;
};

inline ClientConfig parse_client(const nlohmann::json& j, const std::string& path, bool embedder) {
  detail::Fields f(j, path);
  ClientConfig c;
  c.kind = f.string("kind", c.kind, {"stub", "openai"});
  c.seed = f.integer("seed", c.seed);
  if (embedder) c.dim = f.integer("dim", c.dim, 1);
  c.base_url = f.string("base_url", c.base_url);
  c.model = f.string("model", embedder ? "text-embedding-3-small" : "gpt-4o-mini");
  c.api_key_env = f.string("api_key_env", c.api_key_env);
  c.timeout_s = f.integer("timeout_s", c.timeout_s, 1);
  f.finish();
  return c;
}

inline ProfilesJob parse_profiles_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open config: " + path);
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in, nullptr, true, true);
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError("config " + path + " is not valid JSON: " + e.what());
  }
  const fs::path base = fs::path(path).parent_path();
  detail::Fields f(doc, "");
  ProfilesJob job;
  job.interactions = detail::resolve_path(base, f.string("interactions", ""));
  job.item_titles = detail::resolve_path(base, f.string("item_titles", ""));
  if (f.has("template")) {
    detail::Fields t(f.raw("template"), "template");
    job.tpl.template_id = t.string("id", job.tpl.template_id);
    job.tpl.body = t.string("body", job.tpl.body);
    t.finish();
  }
  job.tpl.validate();
  if (f.has("llm")) job.llm = parse_client(f.raw("llm"), "llm", false);
  if (f.has("embedder")) job.embedder = parse_client(f.raw("embedder"), "embedder", true);
  job.profiles_file = detail::resolve_path(base, f.string("profiles_file", job.profiles_file));
  job.embeddings_file = detail::resolve_path(base, f.string("embeddings_file", job.embeddings_file));
  job.cache_dir = detail::resolve_path(base, f.string("cache_dir", ""));
  job.max_in_flight = f.integer("max_in_flight", job.max_in_flight, 1);
  if (f.has("retry")) {
    detail::Fields r(f.raw("retry"), "retry");
    job.retry.attempts = static_cast<int>(r.integer("attempts", 3, 1));
    job.retry.base_delay = std::chrono::milliseconds(r.integer("base_delay_ms", 200));
    r.finish();
  }
  f.finish();
  return job;
}

inline HttpEndpoint endpoint(const ClientConfig& c) {
  return {c.base_url, c.model, HttpEndpoint::key_from_env(c.api_key_env), std::chrono::seconds(c.timeout_s)};
}

inline std::unique_ptr<LlmClient> make_llm(const ClientConfig& c) {
  if (c.kind == "stub") return std::make_unique<StubLlmClient>(c.seed);
  return std::make_unique<HttpLlmClient>(endpoint(c));
}

inline std::unique_ptr<EmbeddingClient> make_embedder(const ClientConfig& c) {
  if (c.kind == "stub") return std::make_unique<StubEmbeddingClient>(c.dim, c.seed);
  return std::make_unique<HttpEmbeddingClient>(endpoint(c), c.dim);
}

inline void report_skips(const BuildResult& r) {
  for (const auto& e : r.errors) std::cerr << "skipped " << e << '\n';
}

inline int profiles_generate(const std::string& config) {
  auto job = parse_profiles_config(config);
  if (job.interactions.empty()) throw SchemaError("interactions", "a file path", "nothing");
  auto table = load_interactions(job.interactions);
  BuildOptions opts;
  opts.retry = job.retry;
  opts.max_in_flight = job.max_in_flight;
  opts.profiles_path = job.profiles_file;
  if (!job.item_titles.empty()) opts.item_titles = load_item_titles(job.item_titles);
  std::optional<ProfileCache> cache;
  if (!job.cache_dir.empty()) {
    fs::create_directories(job.cache_dir);
    cache.emplace((fs::path(job.cache_dir) / "profiles.cache.jsonl").string());
    opts.profile_cache = &*cache;
  }
  auto llm = make_llm(job.llm);
  auto res = generate_profiles(table, *llm, job.tpl, opts);
  report_skips(res);
  std::cout << "generated " << res.store.texts().size() << " profiles (" << res.llm_calls << " requests, "
            << res.skipped.size() << " skipped) -> " << job.profiles_file << '\n';
  return kOk;
}

inline int profiles_embed(const std::string& config) {
  auto job = parse_profiles_config(config);
  if (!fs::exists(job.profiles_file)) throw ValidationError("profiles file not found: " + job.profiles_file);
  auto profiles = ProfileStore::load_profiles(job.profiles_file);
  BuildOptions opts;
  opts.retry = job.retry;
  opts.max_in_flight = job.max_in_flight;
  opts.embeddings_path = job.embeddings_file;
  std::optional<EmbeddingCache> cache;
  if (!job.cache_dir.empty()) {
    fs::create_directories(job.cache_dir);
    cache.emplace((fs::path(job.cache_dir) / "embeddings.cache.jsonl").string());
    opts.embedding_cache = &*cache;
  }
  auto embedder = make_embedder(job.embedder);
  auto res = embed_profiles(profiles, *embedder, opts);
  report_skips(res);
  std::cout << "embedded " << res.store.size() << " profiles (" << res.embed_calls << " requests, " << res.skipped.size()
            << " skipped) -> " << job.embeddings_file << '\n';
  return kOk;
}

// ---- other subcommands -------------------------------------------------------------

inline void print_metrics(const std::string& run_id, const std::vector<MetricReport>& ms) {
  for (const auto& m : ms) {
    std::cout << run_id << "  " << m.metric << (m.k ? "@" + std::to_string(m.k) : "") << " = " << std::fixed
              << std::setprecision(4) << m.value << std::defaultfloat << " (" << m.n_users << " users)\n";
  }
}

inline int run(const std::string& config, bool force) {
  auto plan = parse_config(config);
  auto res = run_experiment(plan, {force});
  if (res.status != "ok") {
    std::cerr << "run " << res.run_id << " failed at " << res.error << '\n';
    return kRuntime;
  }
  print_metrics(res.run_id, res.metrics);
  std::cout << "artifacts in " << res.dir.string() << '\n';
  return kOk;
}

inline std::vector<std::string> expand_glob(const std::string& pattern) {
  glob_t g{};
  std::vector<std::string> out;
  if (::glob(pattern.c_str(), 0, nullptr, &g) == 0) {
    for (std::size_t i = 0; i < g.gl_pathc; ++i) out.emplace_back(g.gl_pathv[i]);
  }
  globfree(&g);
  return out;
}

inline int batch(const std::string& pattern, std::size_t parallel, bool force, const std::string& summary_path) {
  const auto files = expand_glob(pattern);
  if (files.empty()) throw ValidationError("no config matches '" + pattern + "'");
  std::vector<ExperimentPlan> plans;
  bool invalid = false;
  for (const auto& f : files) {
    try {
      plans.push_back(parse_config(f));
    } catch (const ValidationError& e) {
      std::cerr << f << ": " << e.what() << '\n';
      invalid = true;
    }
  }
  auto summary = run_batch(plans, parallel, {force});
  std::cout << "run_id\tstatus\tmetrics\n";
  for (const auto& r : summary.runs) {
    std::cout << r.run_id << '\t' << r.status << '\t';
    for (const auto& m : r.metrics) {
      std::cout << m.metric << (m.k ? "@" + std::to_string(m.k) : "") << '=' << format_fixed(m.value, 4) << ' ';
    }
    if (!r.error.empty()) std::cout << r.error;
    std::cout << '\n';
  }
  if (!summary_path.empty()) summary.write_csv(summary_path);
  if (summary.n_failed() > 0) return kRuntime;
  return invalid ? kValidation : kOk;
}

inline int report(const std::vector<std::string>& dirs, const std::string& out) {
  std::vector<fs::path> paths(dirs.begin(), dirs.end());
  auto rep = compare_runs(paths, out);
  for (const auto& w : rep.warnings) std::cerr << "warning: " << w << '\n';
  std::ifstream csv(rep.csv_path);
  std::cout << csv.rdbuf();
  std::cout << "wrote " << rep.csv_path.string() << " and " << rep.chart_path.string() << '\n';
  return kOk;
}

inline int synth(const std::string& spec_path, const std::string& out) {
  SyntheticSpec spec;
  if (!spec_path.empty()) {
    std::ifstream in(spec_path, std::ios::binary);
    if (!in) throw ValidationError("cannot open spec: " + spec_path);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
      throw ValidationError("spec " + spec_path + " is not valid JSON: " + e.what());
    }
    spec = detail::parse_synthetic(j, "");
  }
  spec.validate();
  auto data = gen_synthetic(spec);
  fs::create_directories(out);
  const fs::path dir(out);
  write_interactions(data.table, (dir / "interactions.tsv").string());
  data.profiles.save_embeddings((dir / "embeddings.jsonl").string());
  auto rows = [](const Matrix& m) {
    nlohmann::json a = nlohmann::json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      std::vector<double> v(static_cast<std::size_t>(m.cols()));
      for (Eigen::Index c = 0; c < m.cols(); ++c) v[static_cast<std::size_t>(c)] = m(r, c);
      a.push_back(v);
    }
    return a;
  };
  std::ofstream latents(dir / "latents.json", std::ios::binary);
  latents << nlohmann::json{{"user_ids", data.table.users.ids()},
                            {"item_ids", data.table.items.ids()},
                            {"users", rows(data.user_latents)},
                            {"items", rows(data.item_latents)}}
                 .dump()
          << '\n';
  std::cout << "wrote " << data.table.size() << " interactions for " << data.table.n_users() << " users and "
            << data.table.n_items() << " items to " << out << '\n';
  return kOk;
}

inline int stats(const std::string& path, bool padding) {
  auto s = dataset_stats(load_interactions(path), padding);
  std::cout << "users\titems\tinteractions\tsparsity%\n"
            << s.n_users << '\t' << s.n_items << '\t' << s.n_interactions << '\t' << format_fixed(s.sparsity_rounded(), 2)
            << '\n';
  return kOk;
}

// ---- entry -------------------------------------------------------------------------

inline int main(int argc, char** argv) {
  CLI::App app{"llmkt: profile-based knowledge transfer for collaborative filtering"};
  app.require_subcommand(1);

  std::string config, pattern, out, spec, summary;
  bool force = false, padding = false;
  std::size_t parallel = 1;
  std::vector<std::string> dirs;

  auto* run_cmd = app.add_subcommand("run", "run one experiment config");
  run_cmd->add_option("config", config, "experiment config (JSON)")->required();
  run_cmd->add_flag("--force", force, "overwrite an existing run directory");

  auto* batch_cmd = app.add_subcommand("batch", "run every config matching a glob");
  batch_cmd->add_option("glob", pattern, "config glob, e.g. 'configs/*.json'")->required();
  batch_cmd->add_option("--parallel", parallel, "concurrent runs")->check(CLI::PositiveNumber);
  batch_cmd->add_flag("--force", force, "overwrite existing run directories");
  batch_cmd->add_option("--summary", summary, "write the summary table as CSV");

  auto* report_cmd = app.add_subcommand("report", "compare runs; the first directory is the base");
  report_cmd->add_option("runs", dirs, "run directories")->required()->expected(2, -1);
  report_cmd->add_option("--out", out, "output directory")->required();

  auto* synth_cmd = app.add_subcommand("synth", "generate a synthetic dataset with profiles");
  synth_cmd->add_option("--spec", spec, "synthetic spec (JSON)");
  synth_cmd->add_option("--out", out, "output directory")->required();

  auto* profiles_cmd = app.add_subcommand("profiles", "generate or embed user profiles");
  profiles_cmd->require_subcommand(1);
  auto* gen_cmd = profiles_cmd->add_subcommand("generate", "profile texts from interaction histories");
  gen_cmd->add_option("--config", config, "profiles config (JSON)")->required();
  auto* embed_cmd = profiles_cmd->add_subcommand("embed", "embeddings of generated profiles");
  embed_cmd->add_option("--config", config, "profiles config (JSON)")->required();

  auto* stats_cmd = app.add_subcommand("stats", "dataset statistics of an interactions file");
  stats_cmd->add_option("interactions", config, "interactions file")->required();
  stats_cmd->add_flag("--padding-id", padding, "count one padding id per vocabulary");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kValidation;
  }

  try {
    if (*run_cmd) return run(config, force);
    if (*batch_cmd) return batch(pattern, parallel, force, summary);
    if (*report_cmd) return report(dirs, out);
    if (*synth_cmd) return synth(spec, out);
    if (*gen_cmd) return profiles_generate(config);
    if (*embed_cmd) return profiles_embed(config);
    if (*stats_cmd) return stats(config, padding);
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntime;
  }
  return kValidation;
}

}  // namespace llmkt::cli
