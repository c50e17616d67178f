#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "llmkt/cli.hpp"
#include "test_util.hpp"

using namespace llmkt;
using llmkt::testing::temp_dir;
using json = nlohmann::json;

namespace {

json small_config(const std::string& run_id, const fs::path& out, double alpha = 0.5) {
  return {{"run_id", run_id},
          {"output_dir", out.string()},
          {"dataset", {{"synthetic", {{"n_users", 40}, {"n_items", 30}, {"interactions_per_user", 10}, {"seed", 1}}}}},
          {"model", {{"kind", "neumf"}, {"seed", 2}}},
          {"training", {{"epochs", 4}, {"alpha", alpha}, {"batch_size", 64}, {"seed", 3}}},
          {"evaluation", {{"ks", {5, 10}}}}};
}

std::string schema_message(const json& doc) {
  try {
    parse_config_json(doc);
  } catch (const ValidationError& e) {
    return e.what();
  }
  return {};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_json(const fs::path& p, const json& j) { std::ofstream(p) << j.dump(2); }

// A run directory holding only what compare_runs reads.
fs::path fake_run(const fs::path& root, const std::string& id, const std::vector<MetricReport>& ms) {
  const auto dir = root / id;
  fs::create_directories(dir);
  std::ofstream(dir / "journal.jsonl") << json{{"type", "config"}, {"run_id", id}, {"config", json::object()}}.dump() << '\n'
                                       << json{{"type", "epoch"}, {"epoch", 1}, {"phase", "kt"}, {"l_model", 0.7}, {"l_kt", 0.3}, {"l_combined", 0.5}}.dump()
                                       << '\n'
                                       << json{{"type", "epoch"}, {"epoch", 2}, {"phase", "finetune"}, {"l_model", 0.6}, {"l_combined", 0.6}}.dump()
                                       << '\n';
  write_metrics_csv(ms, id, (dir / "metrics.csv").string());
  return dir;
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::vector<std::vector<std::string>> rows;
  std::ifstream in(p);
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    rows.push_back(f);
  }
  return rows;
}

int run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "llmkt");
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  return cli::main(static_cast<int>(argv.size()), argv.data());
}

}  // namespace

TEST(ParseConfig, DefaultPipelineExpansion) {
  auto plan = parse_config_json(small_config("r", "out"));
  ASSERT_EQ(plan.commands.size(), 5u);
  EXPECT_EQ(plan.commands[0].name, "tap_layer");
  EXPECT_EQ(plan.commands[1].name, "set_alpha");
  EXPECT_EQ(plan.commands[1].args["value"], 0.5);
  EXPECT_EQ(plan.commands[2].name, "train_kt");
  EXPECT_EQ(plan.commands[2].args["epochs"], 2);
  EXPECT_EQ(plan.commands[3].name, "finetune");
  EXPECT_EQ(plan.commands[3].args["epochs"], 2);
  EXPECT_EQ(plan.commands[4].name, "evaluate");
  EXPECT_EQ(plan.model.kind, ModelKind::neumf);
  EXPECT_EQ(plan.evaluation.ks, (std::vector<std::size_t>{5, 10}));
}

TEST(ParseConfig, Errors) {
  auto doc = small_config("r", "out");
  doc["pipeline"] = {{{"command", "explode"}}};
  EXPECT_EQ(schema_message(doc), "unknown command 'explode'");

  doc = small_config("r", "out");
  doc["training"]["alpha"] = 1.5;
  const auto msg = schema_message(doc);
  EXPECT_NE(msg.find("training.alpha"), std::string::npos) << msg;
  EXPECT_NE(msg.find("[0, 1]"), std::string::npos) << msg;
  EXPECT_NE(msg.find("1.5"), std::string::npos) << msg;

  doc = small_config("r", "out");
  doc["pipeline"] = {{{"command", "set_alpha"}, {"args", {{"value", -0.2}}}}};
  EXPECT_NE(schema_message(doc).find("[0, 1]"), std::string::npos);

  doc = small_config("r", "out");
  doc["training"]["epochz"] = 3;
  EXPECT_NE(schema_message(doc).find("unknown key 'training.epochz'"), std::string::npos);

  doc = small_config("r", "out");
  doc.erase("dataset");
  EXPECT_NE(schema_message(doc).find("missing dataset ref"), std::string::npos);

  doc = small_config("r", "out");
  doc["dataset"] = {{"interactions", "/nonexistent/x.tsv"}};
  EXPECT_NE(schema_message(doc).find("not found"), std::string::npos);

  doc = small_config("r", "out");
  doc["model"]["kind"] = "simplex";
  EXPECT_NE(schema_message(doc).find("model.kind"), std::string::npos);

  doc = small_config("r", "out");
  doc["model"]["kind"] = "multvae";
  doc["training"]["task"] = "ctr";
  EXPECT_FALSE(schema_message(doc).empty());

  doc = small_config("../escape", "out");
  EXPECT_NE(schema_message(doc).find("run_id"), std::string::npos);
}

TEST(ParseConfig, TrainKtNeedsProfiles) {
  const auto dir = temp_dir("pipeline_noprof");
  std::ofstream(dir / "data.tsv") << "user_id\titem_id\trating\ttimestamp\nu\ti\t5\t1\n";
  json doc = small_config("r", dir / "runs");
  doc["dataset"] = {{"interactions", "data.tsv"}};
  try {
    parse_config_json(doc, dir);
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("profile"), std::string::npos);
  }
  doc["training"]["alpha"] = 0.0;
  doc["pipeline"] = {"finetune", "evaluate"};
  EXPECT_NO_THROW(parse_config_json(doc, dir));
}

TEST(ParseConfig, FileRelativePathsAndComments) {
  const auto dir = temp_dir("pipeline_rel");
  fs::create_directories(dir / "cfg");
  std::ofstream(dir / "cfg" / "data.tsv") << "user_id\titem_id\trating\ttimestamp\nu\ti\t5\t1\n";
  std::ofstream(dir / "cfg" / "c.json") << "{\n  // comment\n  \"dataset\": {\"interactions\": \"data.tsv\"},\n"
                                           "  \"model\": {\"kind\": \"neumf\"},\n  \"pipeline\": [\"finetune\"]\n}\n";
  auto plan = parse_config((dir / "cfg" / "c.json").string());
  EXPECT_EQ(fs::path(plan.dataset.interactions), dir / "cfg" / "data.tsv");
  EXPECT_THROW(parse_config((dir / "missing.json").string()), ValidationError);
}

TEST(RunExperiment, ArtifactsAndForce) {
  const auto root = temp_dir("pipeline_run");
  auto plan = parse_config_json(small_config("kt", root));
  auto res = run_experiment(plan);
  ASSERT_EQ(res.status, "ok") << res.error;
  for (const char* f : {"config.json", "journal.jsonl", "checkpoint", "metrics.csv"}) EXPECT_TRUE(fs::exists(root / "kt" / f)) << f;
  EXPECT_EQ(res.metrics.size(), 6u);
  auto lines = RunJournal::read_lines((root / "kt" / "journal.jsonl").string());
  EXPECT_EQ(lines.front()["type"], "config");
  EXPECT_EQ(lines.back()["type"], "final");
  EXPECT_EQ(lines.back()["checkpoint"], "checkpoint");

  EXPECT_THROW(run_experiment(plan), ValidationError);
  EXPECT_EQ(run_experiment(plan, {true}).status, "ok");
}

TEST(RunExperiment, NoDirectoryOnInvalidInput) {
  const auto root = temp_dir("pipeline_nodir");
  const auto emb = root / "emb.jsonl";
  std::ofstream(emb) << "{\"dim\":3}\n{\"user_id\":\"u0\",\"vector\":[1,2]}\n";
  auto doc = small_config("bad", root / "runs");
  doc["profiles"] = {{"embeddings", emb.string()}};
  auto plan = parse_config_json(doc);
  EXPECT_THROW(run_experiment(plan), ValidationError);
  EXPECT_FALSE(fs::exists(root / "runs" / "bad"));
}

TEST(RunExperiment, CommandFailureIsJournaled) {
  const auto root = temp_dir("pipeline_fail");
  auto doc = small_config("f", root);
  doc["pipeline"] = {{{"command", "freeze"}, {"args", {{"group", "decoder"}}}}};
  auto res = run_experiment(parse_config_json(doc));
  EXPECT_EQ(res.status, "failed");
  EXPECT_NE(res.error.find("freeze"), std::string::npos);
  auto lines = RunJournal::read_lines((root / "f" / "journal.jsonl").string());
  EXPECT_EQ(lines.back()["status"], "failed");
}

TEST(RunExperiment, CustomPipeline) {
  const auto root = temp_dir("pipeline_custom");
  auto doc = small_config("c", root);
  doc["pipeline"] = json::array({json{{"command", "select_subset"}, {"args", {{"fraction", 0.5}}}},
                                 json{{"command", "tap_layer"}, {"args", {{"name", "mlp_h2"}}}},
                                 json{{"command", "set_reconstruction_loss"}, {"args", {{"kind", "cosine_distance"}}}},
                                 json{{"command", "set_alpha"}, {"args", {{"value", 0.3}}}},
                                 json{{"command", "train_kt"}, {"args", {{"epochs", 2}}}},
                                 json{{"command", "freeze"}, {"args", {{"group", "embeddings"}}}},
                                 json{{"command", "finetune"}, {"args", {{"epochs", 1}}}},
                                 json{{"command", "unfreeze"}, {"args", {{"group", "embeddings"}}}},
                                 json{{"command", "evaluate"}, {"args", {{"split", "valid"}}}},
                                 json{{"command", "save_checkpoint"}, {"args", {{"name", "final.json"}}}}});
  auto res = run_experiment(parse_config_json(doc));
  ASSERT_EQ(res.status, "ok") << res.error;
  EXPECT_TRUE(fs::exists(root / "c" / "final.json"));
  auto lines = RunJournal::read_lines((root / "c" / "journal.jsonl").string());
  EXPECT_EQ(lines[1]["alpha_effective"], 0.3);
  EXPECT_TRUE(lines[2].contains("l_kt"));
  EXPECT_FALSE(lines[3].contains("l_kt"));
  EXPECT_EQ(lines.back()["checkpoint"], "final.json");
}

TEST(RunBatch, ParallelMatchesSequential) {
  const auto root = temp_dir("pipeline_batch");
  auto plans_in = [&](const std::string& sub) {
    std::vector<ExperimentPlan> plans;
    for (int i = 0; i < 4; ++i) plans.push_back(parse_config_json(small_config("r" + std::to_string(i), root / sub, 0.25 * i)));
    return plans;
  };
  auto seq = run_batch(plans_in("seq"), 1);
  auto par = run_batch(plans_in("par"), 2);
  auto four = run_batch(plans_in("four"), 4);
  ASSERT_EQ(par.runs.size(), 4u);
  EXPECT_EQ(par.n_failed(), 0u);
  for (int i = 0; i < 4; ++i) {
    const auto id = "r" + std::to_string(i);
    EXPECT_EQ(par.runs[static_cast<std::size_t>(i)].run_id, id);
    auto j1 = RunJournal::without_wall_clock(RunJournal::read_lines((root / "seq" / id / "journal.jsonl").string()));
    auto j4 = RunJournal::without_wall_clock(RunJournal::read_lines((root / "four" / id / "journal.jsonl").string()));
    j1.front().erase("config");
    j4.front().erase("config");
    EXPECT_EQ(j1, j4) << id;
    EXPECT_EQ(slurp(root / "seq" / id / "checkpoint"), slurp(root / "four" / id / "checkpoint")) << id;
  }
  par.write_csv((root / "summary.csv").string());
  auto rows = read_csv(root / "summary.csv");
  ASSERT_EQ(rows.size(), 5u);
  EXPECT_EQ(rows[0][0], "run_id");
  EXPECT_EQ(rows[1][1], "ok");

  auto dup = plans_in("dup");
  dup[1].run_id = dup[0].run_id;
  EXPECT_THROW(run_batch(dup, 2), ValidationError);
}

TEST(CompareRuns, IdentityAndPublishedArithmetic) {
  const auto root = temp_dir("pipeline_compare");
  auto a = fake_run(root, "base", {{"ndcg", 10, 0.1428, 5, 0}, {"recall", 10, 0.098, 5, 0}});
  auto b = fake_run(root, "kt", {{"ndcg", 10, 0.1736, 5, 0}, {"recall", 10, 0.1088, 5, 0}, {"hits", 10, 0.5, 5, 0}});
  auto rep = compare_runs({a, a}, root / "same");
  for (const auto& row : read_csv(rep.csv_path)) {
    if (row[0] != "metric") EXPECT_EQ(row.back(), "0.00");
  }
  rep = compare_runs({a, b}, root / "out");
  auto rows = read_csv(rep.csv_path);
  EXPECT_EQ(rows[0], (std::vector<std::string>{"metric", "K", "base", "kt", "Impr. % kt"}));
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[1][0], "ndcg");
  EXPECT_EQ(rows[1][4], "21.57");
  EXPECT_EQ(rows[2][4], "11.02");
  EXPECT_EQ(rep.warnings.size(), 1u);
  const auto svg = slurp(rep.chart_path);
  EXPECT_NE(svg.find("<svg"), std::string::npos);
  EXPECT_NE(svg.find("stroke-dasharray"), std::string::npos);
  EXPECT_NE(svg.find("kt phase"), std::string::npos);
  EXPECT_THROW(compare_runs({a}, root / "x"), ValidationError);
  EXPECT_THROW(compare_runs({a, root / "nothing"}, root / "x"), ValidationError);
}

TEST(CompareRuns, Formatting) {
  EXPECT_NEAR(impr(0.1428, 0.1736), 21.5686, 1e-4);
  EXPECT_EQ(format_fixed(-0.001, 2), "0.00");
  EXPECT_EQ(format_fixed(2.345, 1), "2.3");
  EXPECT_THROW(impr(0.0, 1.0), ValidationError);
}

TEST(Cli, ExitCodes) {
  const auto root = temp_dir("pipeline_cli");
  write_json(root / "ok.json", small_config("ok", root / "runs"));
  auto bad = small_config("bad", root / "runs");
  bad["training"]["alpha"] = 1.5;
  write_json(root / "bad.json", bad);
  auto failing = small_config("failing", root / "runs");
  failing["pipeline"] = {{{"command", "freeze"}, {"args", {{"group", "decoder"}}}}};
  write_json(root / "failing.json", failing);

  EXPECT_EQ(run_cli({"run", (root / "ok.json").string()}), 0);
  EXPECT_EQ(run_cli({"run", (root / "ok.json").string()}), 1);
  EXPECT_EQ(run_cli({"run", (root / "ok.json").string(), "--force"}), 0);
  EXPECT_EQ(run_cli({"run", (root / "bad.json").string()}), 1);
  EXPECT_EQ(run_cli({"run", (root / "failing.json").string()}), 2);
  EXPECT_EQ(run_cli({"run"}), 1);
  EXPECT_EQ(run_cli({"frobnicate"}), 1);
  EXPECT_EQ(run_cli({"batch", (root / "none-*.json").string()}), 1);
  EXPECT_EQ(run_cli({"synth", "--out", (root / "synth").string()}), 0);
  EXPECT_TRUE(fs::exists(root / "synth" / "interactions.tsv"));
  EXPECT_TRUE(fs::exists(root / "synth" / "embeddings.jsonl"));
  EXPECT_EQ(run_cli({"stats", (root / "synth" / "interactions.tsv").string()}), 0);
  EXPECT_EQ(run_cli({"report", (root / "runs" / "ok").string(), (root / "runs" / "ok").string(), "--out", (root / "rep").string()}), 0);
  EXPECT_TRUE(fs::exists(root / "rep" / "comparison.csv"));
}

TEST(Cli, BatchAndProfiles) {
  const auto root = temp_dir("pipeline_cli_batch");
  fs::create_directories(root / "cfg");
  for (int i = 0; i < 2; ++i) write_json(root / "cfg" / ("c" + std::to_string(i) + ".json"), small_config("b" + std::to_string(i), root / "runs"));
  EXPECT_EQ(run_cli({"batch", (root / "cfg" / "*.json").string(), "--parallel", "2", "--summary", (root / "s.csv").string()}), 0);
  EXPECT_EQ(read_csv(root / "s.csv").size(), 3u);

  ASSERT_EQ(run_cli({"synth", "--out", (root / "data").string()}), 0);
  write_json(root / "profiles.json", {{"interactions", "data/interactions.tsv"},
                                      {"llm", {{"kind", "stub"}}},
                                      {"embedder", {{"kind", "stub"}, {"dim", 16}}},
                                      {"profiles_file", "out/profiles.jsonl"},
                                      {"embeddings_file", "out/embeddings.jsonl"},
                                      {"cache_dir", "cache"}});
  fs::create_directories(root / "out");
  EXPECT_EQ(run_cli({"profiles", "generate", "--config", (root / "profiles.json").string()}), 0);
  EXPECT_EQ(ProfileStore::load_profiles((root / "out" / "profiles.jsonl").string()).size(), 200u);
  EXPECT_EQ(run_cli({"profiles", "embed", "--config", (root / "profiles.json").string()}), 0);
  EXPECT_EQ(ProfileStore::load_embeddings((root / "out" / "embeddings.jsonl").string()).dim(), 16u);
  write_json(root / "broken.json", {{"interactions", "data/interactions.tsv"}, {"llm", {{"kind", "oracle"}}}});
  EXPECT_EQ(run_cli({"profiles", "generate", "--config", (root / "broken.json").string()}), 1);
}
