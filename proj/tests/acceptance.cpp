// Acceptance checks. Prints one line per criterion and exits nonzero when
// any criterion fails.
//
// Criterion 7 needs the public dataset files in the atomic interactions
// format; point LLMKT_ML1M_INTER and LLMKT_CDS_INTER at them. Without them
// the criterion is reported as SKIP.

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>

#include "llmkt/cli.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace llmkt;
using namespace llmkt::testing;
using json = nlohmann::json;

namespace {

enum class Outcome { pass, fail, skip };

struct Result {
  Outcome outcome = Outcome::pass;
  std::string detail;
};

class Check {
 public:
  void require(bool ok, const std::string& what) {
    if (!ok && failures_.size() < 5) failures_.push_back(what);
    ok_ = ok_ && ok;
  }
  Result result(std::string detail) const {
    if (ok_) return {Outcome::pass, std::move(detail)};
    std::string d;
    for (const auto& f : failures_) d += (d.empty() ? "" : "; ") + f;
    return {Outcome::fail, d};
  }

 private:
  bool ok_ = true;
  std::vector<std::string> failures_;
};

std::string num(double x, int decimals = 6) { return format_fixed(x, decimals); }

const Matrix& param(const TappableModel& m, const std::string& name) {
  for (const auto& p : m.parameters()) {
    if (p.name == name) return p.value;
  }
  throw std::runtime_error("no parameter " + name);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---- 1 ------------------------------------------------------------------------------

Result losses() {
  Check c;
  Matrix z(1, 2), p(1, 2);
  z << 3, 0;
  p << 0, 4;
  const double rmse = reconstruction_loss(z, p, {1}, ReconstructionKind::rmse);
  c.require(std::abs(rmse - 3.5355339059327378) <= 1e-12, "rmse " + num(rmse, 10));
  c.require(std::abs(reconstruction_loss(z, p, {1}, ReconstructionKind::mse) - 12.5) <= 1e-12, "mse");
  c.require(std::abs(reconstruction_loss(z, p, {1}, ReconstructionKind::cosine_distance) - 1.0) <= 1e-12, "cosine");
  c.require(reconstruction_loss(z, p, {0}, ReconstructionKind::rmse) == 0.0, "all-masked");
  c.require(std::abs(combined_loss(2.0, 4.0, 0.5) - 3.0) <= 1e-12, "combined 0.5");
  c.require(std::abs(combined_loss(3.5355339059327378, 0.6931471805599453, 0.3) -
                     (0.3 * 3.5355339059327378 + 0.7 * 0.6931471805599453)) <= 1e-12,
            "combined 0.3");
  Rng rng(1);
  for (int i = 0; i < 1000; ++i) {
    const double kt = rng.uniform() * 10, mod = rng.uniform() * 10;
    c.require(combined_loss(kt, mod, 0.0) == mod, "alpha 0");
    c.require(combined_loss(kt, mod, 1.0) == kt, "alpha 1");
  }
  return c.result("rmse " + num(rmse, 7) + ", alpha boundaries exact on 1000 draws");
}

// ---- 2 ------------------------------------------------------------------------------

Result metrics() {
  Check c;
  Rng rng(2024);
  double worst = 0.0;
  for (int n = 0; n < 200; ++n) {
    auto r = oracle::random_list(rng);
    const std::size_t k = 1 + rng.below(20);
    worst = std::max({worst, std::abs(recall_at_k(r, k) - oracle::recall(r, k)), std::abs(ndcg_at_k(r, k) - oracle::ndcg(r, k)),
                      std::abs(hits_at_k(r, k) - oracle::hits(r, k))});
  }
  Rng arng(77);
  std::vector<double> s, l;
  for (int n = 0; n < 200; ++n) {
    oracle::random_auc_instance(arng, s, l);
    worst = std::max(worst, std::abs(auc_roc(s, l) - oracle::auc(s, l)));
  }
  c.require(worst <= 1e-9, "oracle gap " + std::to_string(worst));
  const double nd = ndcg_at_k({"u", {7, 8, 9, 10, 11}, {7, 9}}, 10);
  c.require(std::abs(nd - 0.91972) < 5e-6, "ndcg hand case " + num(nd));
  const std::vector<double> hs{0.8, 0.4, 0.6, 0.2}, hl{1, 1, 0, 0};
  c.require(auc_roc(hs, hl) == 0.75, "auc hand case");
  char buf[128];
  std::snprintf(buf, sizeof buf, "400 oracle instances, max gap %.1e; ndcg %.5f, auc 0.75", worst, nd);
  return c.result(buf);
}

// ---- 3 ------------------------------------------------------------------------------

Result gradients() {
  Check c;
  double worst = 0.0;
  std::size_t fewest = SIZE_MAX;
  for (auto kind : {ModelKind::neumf, ModelKind::multvae, ModelKind::dcn, ModelKind::deepfm}) {
    for (bool kt : {false, true}) {
      auto w = gradcheck_wrapper(kind, kt);
      auto r = finite_difference_check(w, random_batch(w.model(), 24, 9), 50, 9);
      const std::string tag = to_string(kind) + (kt ? "+kt" : "");
      c.require(r.checked >= 50, tag + " checked " + std::to_string(r.checked));
      c.require(r.max_rel <= 1e-4, tag + " rel " + std::to_string(r.max_rel));
      worst = std::max(worst, r.max_rel);
      fewest = std::min(fewest, r.checked);
    }
  }
  char buf[128];
  std::snprintf(buf, sizeof buf, "8 configurations, >= %zu coords each, max rel err %.2e", fewest, worst);
  return c.result(buf);
}

// ---- 4 ------------------------------------------------------------------------------

Result hooks_and_freezing() {
  Check c;
  {
    auto m = create_model(small_spec(ModelKind::neumf, 20, 30, 4));
    auto b = random_batch(*m, 11, 4);
    auto out = forward(*m, b, {"mlp_h1", "mlp_h2", "mlp_h3"});
    Matrix h = Matrix(11, 64);
    for (Eigen::Index r = 0; r < 11; ++r) {
      h.row(r) << param(*m, "mlp_user").row(b.users[static_cast<std::size_t>(r)]),
          param(*m, "mlp_item").row(b.items[static_cast<std::size_t>(r)]);
    }
    for (std::size_t k = 0; k < 3; ++k) {
      const std::string layer = "mlp_h" + std::to_string(k + 1);
      h = ((h * param(*m, layer + ".weight")).rowwise() + param(*m, layer + ".bias").row(0)).cwiseMax(0.0);
      c.require((out.captures[k].values - h).cwiseAbs().maxCoeff() <= 1e-9, layer + " recomputation");
    }
  }
  for (auto kind : {ModelKind::neumf, ModelKind::multvae, ModelKind::dcn, ModelKind::deepfm}) {
    ModelWrapper w(create_model(small_spec(kind, 15, 12, 2)));
    auto b = random_batch(w.model(), 8, 3);
    const Matrix before = w.forward(b).predictions;
    for (const auto& t : w.model().tap_points()) w.attach_hook(t.name);
    c.require(w.forward(b).predictions == before, to_string(kind) + " hooks changed predictions");
  }
  {
    SyntheticSpec s;
    s.n_users = 60;
    s.n_items = 40;
    s.interactions_per_user = 12;
    auto data = gen_synthetic(s);
    auto splits = temporal_split(data.table, {0.7, 0.1, 0.2});
    for (const std::string group : {"embeddings", "hidden", "output"}) {
      ModelWrapper w(create_model(small_spec(ModelKind::neumf, data.table.n_users(), data.table.n_items(), 1)));
      std::vector<Matrix> before;
      for (const auto& p : w.model().parameters()) before.push_back(p.value);
      w.set_frozen(group, true);
      TrainConfig cfg;
      cfg.n_epochs = 5;
      cfg.batch_size = 64;
      cfg.learning_rate = 3e-3;
      const auto tap = resolve_tap(w.model(), cfg.tap_name);
      auto map = fit_trans_for(data.profiles, splits.train, w.model().find_tap(tap)->dim, TransMethod::pca, 0);
      auto j = train_two_phase(w, splits, align_for_training(data.profiles, splits.train, map), cfg);
      c.require(j.epochs().size() == 5, "five epochs");
      bool others_moved = false;
      const auto& params = w.model().parameters();
      for (std::size_t k = 0; k < params.size(); ++k) {
        if (params[k].group == group) {
          c.require(params[k].value == before[k], "frozen " + params[k].name + " changed");
        } else {
          others_moved = others_moved || params[k].value != before[k];
        }
      }
      c.require(others_moved, "unfrozen groups did not train with " + group + " frozen");
    }
  }
  return c.result("mlp_h1..h3 recomputed within 1e-9; hooks inert on 4 models; each group bitwise frozen over 5 epochs");
}

// ---- 5 ------------------------------------------------------------------------------

Result schedule() {
  Check c;
  SyntheticSpec s;
  s.n_users = 40;
  s.n_items = 30;
  s.interactions_per_user = 10;
  auto data = gen_synthetic(s);
  auto splits = temporal_split(data.table, {0.7, 0.1, 0.2});
  const auto dir = temp_dir("acceptance_schedule");
  for (std::size_t n : {1u, 4u, 5u, 70u}) {
    ModelWrapper w(create_model(small_spec(ModelKind::neumf, data.table.n_users(), data.table.n_items(), 0)));
    TrainConfig cfg;
    cfg.n_epochs = n;
    cfg.batch_size = 64;
    const auto tap = resolve_tap(w.model(), cfg.tap_name);
    auto map = fit_trans_for(data.profiles, splits.train, w.model().find_tap(tap)->dim, TransMethod::pca, 0);
    const auto path = (dir / ("n" + std::to_string(n) + ".jsonl")).string();
    train_two_phase(w, splits, align_for_training(data.profiles, splits.train, map), cfg, "n" + std::to_string(n), path);
    std::size_t epochs = 0, with_kt = 0;
    for (const auto& line : RunJournal::read_lines(path)) {
      if (line.value("type", "") != "epoch") continue;
      ++epochs;
      if (line.contains("l_kt")) {
        ++with_kt;
        c.require(line["phase"] == "kt", "l_kt outside the kt phase");
      } else {
        c.require(line["phase"] == "finetune", "phase label");
        c.require(line["l_combined"].get<double>() == line["l_model"].get<double>(), "phase 2 l_combined != l_model");
      }
    }
    c.require(epochs == n, "N=" + std::to_string(n) + " epochs " + std::to_string(epochs));
    c.require(with_kt == n / 2, "N=" + std::to_string(n) + " kt epochs " + std::to_string(with_kt));
  }
  return c.result("kt epochs 0/2/2/35 for N 1/4/5/70; phase 2 l_combined == l_model exactly");
}

// ---- 6 ------------------------------------------------------------------------------

struct PublishedRow {
  std::string model, dataset, metric;
  double base, kt, impr;
};

// Published base and transfer values at K=10 with their reported Impr. %.
const std::vector<PublishedRow>& table2() {
  static const std::vector<PublishedRow> rows{
      {"NeuMF", "CDs", "recall", 0.1511, 0.1579, 4.50},     {"NeuMF", "CDs", "ndcg", 0.1519, 0.1566, 3.09},
      {"NeuMF", "CDs", "hits", 0.5855, 0.6066, 3.60},       {"SimpleX", "CDs", "recall", 0.1594, 0.1708, 7.15},
      {"SimpleX", "CDs", "ndcg", 0.1560, 0.1669, 6.99},     {"SimpleX", "CDs", "hits", 0.6091, 0.6262, 2.81},
      {"MultVAE", "CDs", "recall", 0.1451, 0.1737, 19.71},  {"MultVAE", "CDs", "ndcg", 0.1428, 0.1736, 21.57},
      {"MultVAE", "CDs", "hits", 0.5790, 0.6368, 9.98},     {"NeuMF", "ML-1M", "recall", 0.0980, 0.1088, 11.02},
      {"NeuMF", "ML-1M", "ndcg", 0.1800, 0.1969, 9.39},     {"NeuMF", "ML-1M", "hits", 0.7035, 0.7325, 4.12},
      {"SimpleX", "ML-1M", "recall", 0.0935, 0.1080, 15.51}, {"SimpleX", "ML-1M", "ndcg", 0.1838, 0.2003, 8.98},
      {"SimpleX", "ML-1M", "hits", 0.6899, 0.7313, 6.00},   {"MultVAE", "ML-1M", "recall", 0.1297, 0.1352, 4.24},
      {"MultVAE", "ML-1M", "ndcg", 0.1925, 0.1981, 2.91},   {"MultVAE", "ML-1M", "hits", 0.7281, 0.7311, 0.41}};
  return rows;
}

fs::path write_run(const fs::path& root, const std::string& id, const std::vector<MetricReport>& ms) {
  const auto dir = root / id;
  fs::create_directories(dir);
  std::ofstream(dir / "journal.jsonl") << json{{"type", "config"}, {"run_id", id}, {"config", json::object()}}.dump() << '\n';
  write_metrics_csv(ms, id, (dir / "metrics.csv").string());
  return dir;
}

Result table_arithmetic() {
  Check c;
  const auto root = temp_dir("acceptance_table2");
  std::size_t compared = 0;
  double worst = 0.0;
  for (const std::string model : {"NeuMF", "SimpleX", "MultVAE"}) {
    for (const std::string ds : {"CDs", "ML-1M"}) {
      std::vector<MetricReport> base, kt;
      std::vector<PublishedRow> rows;
      for (const auto& r : table2()) {
        if (r.model != model || r.dataset != ds) continue;
        base.push_back({r.metric, 10, r.base, 1, 0});
        kt.push_back({r.metric, 10, r.kt, 1, 0});
        rows.push_back(r);
      }
      const std::string tag = model + "_" + ds;
      auto a = write_run(root, tag + "_base", base);
      auto b = write_run(root, tag + "_kt", kt);
      auto rep = compare_runs({a, b}, root / (tag + "_cmp"));
      std::ifstream csv(rep.csv_path);
      std::string line;
      std::getline(csv, line);
      while (std::getline(csv, line)) {
        std::vector<std::string> f;
        std::stringstream ss(line);
        for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
        auto it = std::find_if(rows.begin(), rows.end(), [&](const PublishedRow& r) { return r.metric == f[0]; });
        if (it == rows.end() || f.size() != 5) {
          c.require(false, "unexpected row " + line);
          continue;
        }
        const double got = std::stod(f[4]);
        worst = std::max(worst, std::abs(got - it->impr));
        c.require(std::abs(got - it->impr) <= 0.01 + 1e-9, tag + " " + f[0] + " " + f[4] + " vs " + num(it->impr, 2));
        ++compared;
      }
    }
  }
  c.require(compared == 18, std::to_string(compared) + " of 18 values compared");
  return c.result("18/18 Impr. % within 0.01 (max gap " + num(worst, 4) + ")");
}

// ---- 7 ------------------------------------------------------------------------------

Result dataset_statistics() {
  struct Expected {
    const char* env;
    const char* name;
    std::size_t users, items, rows;
    double sparsity;
  };
  const Expected sets[] = {{"LLMKT_ML1M_INTER", "ML-1M", 6041, 3707, 1000209, 95.53},
                           {"LLMKT_CDS_INTER", "CDs", 4558, 7784, 194242, 99.45}};
  Check c;
  std::vector<std::string> missing;
  std::string detail;
  for (const auto& e : sets) {
    const char* path = std::getenv(e.env);
    if (!path || !fs::exists(path)) {
      missing.push_back(e.env);
      continue;
    }
    auto s = dataset_stats(load_interactions(path), true);
    const bool ok = s.n_users == e.users && s.n_items == e.items && s.n_interactions == e.rows &&
                    format_fixed(s.sparsity_rounded(), 2) == format_fixed(e.sparsity, 2);
    c.require(ok, std::string(e.name) + " gave (" + std::to_string(s.n_users) + ", " + std::to_string(s.n_items) + ", " +
                      std::to_string(s.n_interactions) + ", " + format_fixed(s.sparsity_rounded(), 2) + ")");
    detail += std::string(detail.empty() ? "" : "; ") + e.name + " matches";
  }
  if (missing.size() == 2) {
    return {Outcome::skip, "dataset files not supplied (set LLMKT_ML1M_INTER and LLMKT_CDS_INTER)"};
  }
  auto r = c.result(detail);
  if (r.outcome == Outcome::pass && !missing.empty()) return {Outcome::skip, detail + "; not supplied: " + missing.front()};
  return r;
}

// ---- 8 ------------------------------------------------------------------------------

Result synthetic_uplift() {
  Check c;
  double sum_base = 0.0, sum_kt = 0.0, sum_noise = 0.0;
  const int seeds = 5;
  for (int seed = 0; seed < seeds; ++seed) {
    SyntheticSpec spec;  // 200 users, 100 items, latent 8, d_P 64, sigma 0.05
    spec.seed = static_cast<std::uint64_t>(seed);
    auto data = gen_synthetic(spec);
    auto splits = temporal_split(data.table, {0.7, 0.1, 0.2});
    ModelSpec ms = ModelSpec::defaults(ModelKind::neumf);
    ms.n_users = data.table.n_users();
    ms.n_items = data.table.n_items();
    ms.seed = spec.seed;
    TrainConfig cfg;
    cfg.n_epochs = 40;
    cfg.alpha = 0.5;
    cfg.seed = spec.seed;

    ProfileStore noise(spec.profile_dim);
    Rng rng(1000 + spec.seed);
    for (const auto& e : data.profiles.entries()) {
      std::vector<double> v(spec.profile_dim);
      for (auto& x : v) x = rng.normal();
      noise.add({e.user_id, v});
    }
    auto ndcg10 = [](const RunJournal& j) { return find_metric(j.final_metrics(), "ndcg", 10)->value; };
    auto transfer = [&](const ProfileStore& store) {
      ModelWrapper w(create_model(ms));
      const auto tap = resolve_tap(w.model(), cfg.tap_name);
      auto map = fit_trans_for(store, splits.train, w.model().find_tap(tap)->dim, TransMethod::pca, spec.seed);
      return ndcg10(train_two_phase(w, splits, align_for_training(store, splits.train, map), cfg));
    };
    ModelWrapper base(create_model(ms));
    TrainConfig base_cfg = cfg;
    base_cfg.alpha = 0.0;
    sum_base += ndcg10(train_baseline(base, splits, base_cfg));
    sum_kt += transfer(data.profiles);
    sum_noise += transfer(noise);
  }
  const double base = sum_base / seeds, kt = sum_kt / seeds, noisy = sum_noise / seeds;
  const double uplift = impr(base, kt), degradation = -impr(base, noisy);
  c.require(kt > base, "kt mean not above baseline");
  c.require(uplift >= 3.0, "uplift " + num(uplift, 2) + "%");
  c.require(degradation <= 5.0, "noise degradation " + num(degradation, 2) + "%");
  return c.result("mean NDCG@10 base " + num(base, 4) + ", kt " + num(kt, 4) + " (" + num(uplift, 2) + "%), noise " +
                  num(noisy, 4) + " (" + num(-degradation, 2) + "%)");
}

// ---- 9 ------------------------------------------------------------------------------

int cli_run(const std::string& config) {
  std::vector<std::string> args{"llmkt", "run", config, "--force"};
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  std::ostringstream sink;
  auto* old = std::cout.rdbuf(sink.rdbuf());
  const int code = cli::main(static_cast<int>(argv.size()), argv.data());
  std::cout.rdbuf(old);
  return code;
}

Result determinism() {
  Check c;
  const auto root = temp_dir("acceptance_determinism");
  json cfg{{"run_id", "det"},
           {"output_dir", (root / "runs").string()},
           {"dataset", {{"synthetic", {{"n_users", 200}, {"n_items", 100}, {"seed", 0}}}}},
           {"model", {{"kind", "neumf"}, {"seed", 0}}},
           {"transfer", {{"method", "pca"}}},
           {"training", {{"epochs", 6}, {"alpha", 0.5}, {"seed", 0}, {"eval_every", 2}}},
           {"evaluation", {{"ks", {10, 20}}}}};
  std::ofstream(root / "det.json") << cfg.dump(2);
  const auto run_dir = root / "runs" / "det";

  c.require(cli_run((root / "det.json").string()) == 0, "first run failed");
  const auto journal1 = RunJournal::without_wall_clock(RunJournal::read_lines((run_dir / "journal.jsonl").string()));
  const auto ckpt1 = slurp(run_dir / "checkpoint");
  const auto metrics1 = slurp(run_dir / "metrics.csv");
  c.require(cli_run((root / "det.json").string()) == 0, "second run failed");
  const auto journal2 = RunJournal::without_wall_clock(RunJournal::read_lines((run_dir / "journal.jsonl").string()));
  c.require(!ckpt1.empty(), "no checkpoint");
  c.require(journal1 == journal2, "journals differ");
  c.require(ckpt1 == slurp(run_dir / "checkpoint"), "checkpoints differ");
  c.require(metrics1 == slurp(run_dir / "metrics.csv"), "metrics differ");
  return c.result("two `llmkt run --force` executions: journals (" + std::to_string(journal1.size()) +
                  " lines) and checkpoint (" + std::to_string(ckpt1.size()) + " bytes) identical");
}

}  // namespace

int main() {
  const std::vector<std::pair<const char*, std::function<Result()>>> criteria{
      {"loss exactness", losses},
      {"metric oracles", metrics},
      {"gradient correctness", gradients},
      {"hook and freeze soundness", hooks_and_freezing},
      {"phase schedule", schedule},
      {"improvement arithmetic", table_arithmetic},
      {"dataset statistics", dataset_statistics},
      {"synthetic transfer uplift", synthetic_uplift},
      {"determinism", determinism}};
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Result r;
    try {
      r = criteria[i].second();
    } catch (const std::exception& e) {
      r = {Outcome::fail, std::string("exception: ") + e.what()};
    }
    const char* tag = r.outcome == Outcome::pass ? "PASS" : r.outcome == Outcome::fail ? "FAIL" : "SKIP";
    if (r.outcome == Outcome::fail) ++failed;
    std::printf("%s criterion %zu (%s): %s\n", tag, i + 1, criteria[i].first, r.detail.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
