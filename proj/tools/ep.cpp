// Benchmark CLI: builds the deconvolution / Cartesian-MRI experiments at
// desk scale, runs any solver, and emits traces and marginal dumps.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>

#include <CLI11.hpp>

#include "epinf/harness.hpp"
#include "epinf/oracle.hpp"

namespace fs = std::filesystem;
using namespace epinf;

namespace {

struct Overrides {
  std::map<std::string, std::string> kv;
  void add_flags(CLI::App* cmd) {
    static const char* keys[] = {
        "experiment", "height", "width", "kernel", "kernel_h", "kernel_w",
        "phase_encodes", "wavelet_levels", "noise_var", "tau_a", "tau_r",
        "eta", "solver", "epsilon", "damping", "max_outer", "tol_fixed_point",
        "max_seconds", "seed", "image", "out", "custom_n", "custom_m",
        "custom_q"};
    for (const char* k : keys) {
      cmd->add_option_function<std::string>(
          "--" + std::string(k),
          [this, k](const std::string& v) { kv[k] = v; });
    }
  }
};

ExperimentConfig load_config(const std::string& path, const Overrides& ov) {
  std::map<std::string, std::string> kv;
  if (!path.empty()) {
    // Reuse the file parser, then apply flag overrides on top.
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("cannot open config " + path);
    std::string line;
    while (std::getline(in, line)) {
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      const auto eq = line.find('=');
      if (eq == std::string::npos) continue;
      auto trim = [](std::string s) {
        const auto a = s.find_first_not_of(" \t\r");
        const auto b = s.find_last_not_of(" \t\r");
        return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
      };
      const std::string key = trim(line.substr(0, eq));
      if (!key.empty()) kv[key] = trim(line.substr(eq + 1));
    }
  }
  for (const auto& [k, v] : ov.kv) kv[k] = v;
  return parse_config_map(kv);
}

int cmd_run(const std::string& config_path, const Overrides& ov) {
  ExperimentConfig cfg = load_config(config_path, ov);
  if (cfg.out_dir.empty())
    throw std::invalid_argument("run: out directory required (out=...)");
  const int rc = run_experiment(cfg);
  std::cout << "wrote " << cfg.out_dir << "\n";
  return rc;
}

int cmd_compare(const std::string& config_path, const std::string& solvers,
                const Overrides& ov) {
  ExperimentConfig base = load_config(config_path, ov);
  if (base.out_dir.empty())
    throw std::invalid_argument("compare: out directory required (out=...)");
  fs::create_directories(base.out_dir);

  std::vector<std::string> names;
  {
    std::stringstream ss(solvers);
    std::string tok;
    while (std::getline(ss, tok, ',')) names.push_back(tok);
  }
  if (names.size() < 2)
    throw std::invalid_argument("compare: need at least two solvers");

  ModelSpec model = build_model(base);
  struct Entry {
    std::string name;
    double phi = 0.0;
    SolverTrace trace;
    long n_var = 0;
  };
  std::vector<Entry> entries;
  SolverResult ep_result;
  VbResult vb_result;
  bool have_ep = false, have_vb = false;
  int rc = 0;

  for (const auto& name : names) {
    ExperimentConfig cfg = base;
    std::map<std::string, std::string> one{{"solver", name}};
    cfg = parse_config_map([&] {
      std::map<std::string, std::string> kv;
      std::istringstream is(serialize_config(base));
      std::string line;
      while (std::getline(is, line)) {
        const auto eq = line.find('=');
        if (eq != std::string::npos)
          kv[line.substr(0, eq)] = line.substr(eq + 1);
      }
      kv["solver"] = name;
      return kv;
    }());
    cfg.out_dir = (fs::path(base.out_dir) / name).string();
    fs::create_directories(cfg.out_dir);

    SolverConfig sc = solver_config_of(cfg);
    Entry e;
    e.name = name;
    if (cfg.solver == SolverKind::Vb) {
      vb_result = vb_solve(model, sc);
      have_vb = true;
      e.phi = vb_result.state.phi_vb;
      e.trace = vb_result.trace;
      e.n_var = vb_result.n_var_comp;
    } else {
      SolverResult res = run_solver(model, sc);
      if (res.diverged) rc = 4;
      if (!have_ep) {
        ep_result = res;
        have_ep = true;
      }
      e.phi = res.phi_star;
      e.trace = res.trace;
      e.n_var = res.n_var_comp;
    }
    std::ofstream tr(fs::path(cfg.out_dir) / "trace.csv");
    tr << "iter,time_sec,phi,n_var_comp,fallback\n";
    tr.precision(17);
    for (const auto& row : e.trace)
      tr << row.outer << "," << row.time_sec << "," << row.phi << ","
         << row.n_var_comp << "," << (row.fallback ? 1 : 0) << "\n";
    entries.push_back(std::move(e));
  }

  std::ofstream cm(fs::path(base.out_dir) / "compare.txt");
  cm.precision(17);
  for (const auto& e : entries)
    cm << e.name << ": phi=" << e.phi << " n_var_comp=" << e.n_var << "\n";
  for (size_t i = 0; i < entries.size(); ++i)
    for (size_t j = i + 1; j < entries.size(); ++j)
      cm << "delta(" << entries[i].name << "," << entries[j].name
         << ")=" << delta_metric(entries[i].phi, entries[j].phi) << "\n";

  if (have_ep && have_vb) {
    const EpVbReport rep = compare_ep_vb(model, ep_result, vb_result);
    std::ofstream rf(fs::path(base.out_dir) / "epvb_report.txt");
    rf << format_report(rep);
  }
  std::cout << "wrote " << base.out_dir << "\n";
  return rc;
}

int cmd_selftest() {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> un(0.0, 1.0);
  int failures = 0;
  auto report = [&](const std::string& name, bool ok) {
    std::cout << (ok ? "ok   " : "FAIL ") << name << "\n";
    if (!ok) ++failures;
  };

  // Tilted closed form vs quadrature.
  {
    double worst = 0.0;
    for (int t = 0; t < 200; ++t) {
      const double pm = std::pow(10.0, -3.0 + 6.0 * un(rng));
      const double bm = -30.0 + 60.0 * un(rng);
      const double tau = std::pow(10.0, -2.0 + 4.0 * un(rng));
      const double eta = 0.3 + 0.7 * un(rng);
      const auto site = SitePotential::laplace(tau);
      const auto a = tilted_moments(pm, bm, site, eta);
      const auto b = oracle::quad_tilted(pm, bm, site, eta, 1e-12);
      const double sig = std::sqrt(b.variance());
      worst = std::max(worst, std::fabs(a.log_zhat - b.log_zhat) /
                                  std::max(1.0, std::fabs(b.log_zhat)));
      worst = std::max(worst, std::fabs(a.mean - b.mean) /
                                  std::max(std::fabs(b.mean), sig));
      worst = std::max(worst, std::fabs(a.second_moment - b.second_moment) /
                                  b.second_moment);
    }
    report("tilted moments vs quadrature (200 random sites), rel <= 1e-8",
           worst <= 1e-8);
  }

  // Operator adjoint identities on a mixed stack.
  {
    const int h = 8, w = 8;
    auto op = stacked_op({wavelet_op(h, w, 2), diff_op(h, w)});
    double worst = 0.0;
    std::normal_distribution<double> gn;
    for (int t = 0; t < 20; ++t) {
      Vec v(op->cols()), wv(op->rows());
      for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = gn(rng);
      for (Eigen::Index i = 0; i < wv.size(); ++i) wv[i] = gn(rng);
      const double lhs = op->apply(v).dot(wv);
      const double rhs = v.dot(op->apply_adjoint(wv));
      worst = std::max(worst,
                       std::fabs(lhs - rhs) / std::max(1.0, std::fabs(lhs)));
    }
    report("operator adjoint identity, rel <= 1e-10", worst <= 1e-10);
  }

  // Gradient of log|A| equals marginal variances.
  {
    ExperimentConfig cfg;
    cfg.experiment = ExperimentKind::Custom;
    cfg.custom_n = 5;
    cfg.custom_m = 7;
    cfg.custom_q = 6;
    cfg.seed = 3;
    cfg.noise_var = 0.5;
    cfg.tau_a = 1.0;
    ModelSpec model = build_custom(cfg);
    SiteParams th;
    th.pi = Vec::Constant(model.q(), 0.8);
    th.b = Vec::Zero(model.q());
    GaussState g = build_gauss_state(model, th);
    auto f = [&](const Vec& pi) {
      SiteParams t2{pi, th.b};
      return log_det(build_precision(model, t2));
    };
    const Vec fd = oracle::fd_gradient(f, th.pi, 1e-5);
    const double err = (fd - g.z).lpNorm<Eigen::Infinity>() /
                       std::max(1.0, g.z.lpNorm<Eigen::Infinity>());
    report("grad log|A| = Var_Q[s|y], rel <= 1e-5", err <= 1e-5);
  }

  std::cout << (failures == 0 ? "selftest passed\n" : "selftest FAILED\n");
  return failures == 0 ? 0 : 3;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"expectation propagation benchmark harness"};
  app.require_subcommand(1);

  std::string config_path, out_dir, solvers = "fast,parallel";
  Overrides ov_run, ov_cmp;

  auto* run = app.add_subcommand("run", "run one solver on one experiment");
  run->add_option("config", config_path, "key=value config file");
  ov_run.add_flags(run);

  auto* cmp = app.add_subcommand("compare", "run several solvers on one model");
  cmp->add_option("config", config_path, "key=value config file");
  cmp->add_option("--solvers", solvers, "comma-separated solver list");
  ov_cmp.add_flags(cmp);

  auto* chk = app.add_subcommand("check", "recompute phi of a finished run");
  chk->add_option("dir", out_dir, "run output directory")->required();

  auto* st = app.add_subcommand("selftest", "run the oracle-backed self checks");
  (void)st;

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    if (run->parsed()) return cmd_run(config_path, ov_run);
    if (cmp->parsed()) return cmd_compare(config_path, solvers, ov_cmp);
    if (chk->parsed()) return check_run(out_dir);
    if (st->parsed()) return cmd_selftest();
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "solver failure: " << e.what() << "\n";
    return 3;
  }
  return 2;
}
