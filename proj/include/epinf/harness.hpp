#pragma once

// Experiment builders and the run/check pipeline behind the CLI: synthetic
// deconvolution and Cartesian-MRI models at desk scale, trace/marginal/
// summary artifacts on disk.

#include <cstdint>
#include <map>
#include <string>

#include "epinf/model.hpp"
#include "epinf/solvers.hpp"
#include "epinf/vb.hpp"

namespace epinf {

enum class ExperimentKind { Deconvolution, CartesianMri, Custom };

struct ExperimentConfig {
  ExperimentKind experiment = ExperimentKind::Deconvolution;
  int height = 16;
  int width = 16;
  std::string kernel_path;   // PGM; empty = synthetic 5x5 blur
  int kernel_h = 5;
  int kernel_w = 5;
  int phase_encodes = 4;     // MRI column count
  int wavelet_levels = 4;    // clipped to the 2-adic depth of the dims
  double noise_var = 1e-3;
  double tau_a = 0.0;        // 0 = the 0.04/sigma default
  double tau_r = 0.0;        // 0 = the 0.08/sigma default
  double eta = 0.9;
  SolverKind solver = SolverKind::Fast;
  double epsilon = 1e-5;
  double damping = 0.9;
  int max_outer = 200;
  double tol_fixed_point = 1e-6;
  double max_seconds = 0.0;
  uint64_t seed = 1;
  std::string image_path;    // PGM; empty = synthetic image
  std::string out_dir;
  // Custom experiment: small random dense instance.
  int custom_n = 8;
  int custom_m = 10;
  int custom_q = 12;

  void validate() const;
};

// key=value parsing; CLI overrides are applied on top by the tool.
ExperimentConfig parse_config_file(const std::string& path);
ExperimentConfig parse_config_map(const std::map<std::string, std::string>& kv);
std::string serialize_config(const ExperimentConfig& cfg);

// Deterministic synthetic grayscale image in [0,1] (blobs + rectangles).
Vec synthetic_image(int h, int w, uint64_t seed);

// PGM (P5) I/O.
Vec read_pgm(const std::string& path, int& h, int& w);
void write_pgm(const std::string& path, const Vec& img, int h, int w);

// Model builders; y is stored inside the returned ModelSpec.
ModelSpec build_deconvolution(const ExperimentConfig& cfg);
ModelSpec build_mri(const ExperimentConfig& cfg);
ModelSpec build_custom(const ExperimentConfig& cfg);
ModelSpec build_model(const ExperimentConfig& cfg);

SolverConfig solver_config_of(const ExperimentConfig& cfg);

// Final-state marginal dump. 32-byte header: magic "EPMARG1\0", then n and q
// as little-endian u64, 8 zero bytes; then f64 arrays u-means, u-variances,
// s-means, s-variances, pi, b.
struct MarginalDump {
  uint64_t n = 0, q = 0;
  Vec u_mean, u_var, s_mean, s_var, pi, b;
};
void write_marginals(const std::string& path, const MarginalDump& d);
MarginalDump read_marginals(const std::string& path);

// Runs the configured solver, writes trace.csv, marginals.bin, summary.txt
// and config.txt into out_dir. Returns the process exit code contract:
// 0 ok, 3 solver failure, 4 divergence flag.
int run_experiment(const ExperimentConfig& cfg);

// Recompute phi at the stored final state of a run directory and compare
// against summary.txt; returns 0 on match (<= 1e-10 relative).
int check_run(const std::string& dir);

// phi at theta with theta~ read off a fresh Gaussian state (the value
// reported as phi_star in summary.txt).
double consistent_phi(const ModelSpec& model, const SiteParams& th);

}  // namespace epinf
