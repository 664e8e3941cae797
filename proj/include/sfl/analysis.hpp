#pragma once

#include "sfl/protocol.hpp"

namespace sfl {

// Constants feeding the convergence-bound calculators. R is taken as a single
// user-supplied constant bounding the stochastic gradient norms; the
// server-side bound additionally treats it as covering the norm of the
// client-summed gradient at the optimum, which is the tighter of the two
// readings its derivation admits — callers control which estimate they pass.
struct BoundInputs {
  double R = 0.0;
  double mu = 1.0;
  double smoothness = 1.0;  // S
  double delta = 0.0;       // gradient-divergence bound
  double gamma_gap = 0.0;   // Gamma: F(w*) minus weighted per-client minima
  Vector sigma_sq;          // per-client stochastic gradient variance
  Vector p;                 // client weights
  int N = 1;
  int E = 1, M = 1;
  double gamma_value = 0.0;  // schedule shift
  double d0_server = 0.0;    // E||w_s^0 - w_s*||^2
  double d0_client = 0.0;    // E||w_c^0 - w_c*||^2
};

// Server-side distance bound at step i:
// (8 R^2 + mu^2 N^2 (gamma+1) d0_server) / (mu^2 N^2 (gamma+i)).
// Independent of delta, Gamma, and sigma by construction.
double prop1_bound(const BoundInputs& in, long i);

// H = 6 E M R^2 + 12 E^2 M^2 delta^2 + 6 S Gamma + sum_n p_n^2 sigma_n^2.
double h_constant(const BoundInputs& in);

// Client-side distance bound at step i:
// (4 H + mu^2 (gamma+1) d0_client) / (mu^2 (gamma+i)).
double prop2_bound(const BoundInputs& in, long i);

struct BoundReport {
  double server_term = 0.0;  // L_s: prop1 at the final step
  double client_term = 0.0;  // L_c: prop2 at the final step
  double bound = 0.0;        // S * (L_s + L_c) / 2
};

// Suboptimality bound after `total_steps` = T*E*M steps.
BoundReport theorem1_bound(const BoundInputs& in, long total_steps);

enum class BoundSide { kServer, kClient };

struct TrajectoryCheck {
  long checked = 0;          // logged steps compared
  long violations = 0;       // steps where seed-mean > bound * (1 + tol)
  long first_violation = -1; // step index of the first violation
  double max_ratio = 0.0;    // max over steps of seed-mean / bound
};

// Compares the per-step seed-mean of the logged squared distances against the
// bound trajectory. All runs must share the same geometry; distances must
// have been logged (task with a known optimum).
TrajectoryCheck check_trajectory_vs_bound(const std::vector<RunLog>& runs,
                                          const BoundInputs& in, BoundSide side,
                                          double tol);

// Per-coordinate population variance across vectors, summed over coordinates.
double sum_coordinate_variance(const std::vector<Vector>& vecs);

// Temporal gradient-variance metric: variance of client `client`'s logged
// client-side gradients over the trailing `window` logged entries ending at
// step `end_i`, summed over coordinates, divided by the client-side layer
// count. window <= 0 means one epoch (M entries).
double grad_variance_at_client(const RunLog& log, int client, long end_i,
                               int window);

// Cross-sectional metric at step i: variance of the per-client client-side
// gradients, summed over coordinates, divided by the client-side layer count.
double grad_variance_across_clients(const RunLog& log, long i);

struct LemmaCheck {
  long checked = 0;
  long violations = 0;
  double max_ratio = 0.0;
};

// Client-divergence lemma: seed-mean of the logged divergence at step i must
// stay within (3 E M R^2 + 6 E^2 M^2 delta^2) * eta_c(i)^2 * (1 + tol).
LemmaCheck check_divergence_lemma(const std::vector<RunLog>& runs, double R_hat,
                                  double delta_hat, double tol);

// Aggregate-gradient variance lemma: the per-step seed-mean of the logged
// ||g_c(batch) - g_c(full)||^2 samples must stay within
// sum_n p_n^2 sigma_n^2 * (1 + tol).
LemmaCheck check_variance_lemma(const std::vector<RunLog>& runs,
                                const Vector& sigma_sq, const Vector& p,
                                double tol);

struct RateFit {
  double slope = 0.0;
  double intercept = 0.0;
  double r_squared = 0.0;
  long points = 0;
};

// Least-squares slope of log(seed-mean squared distance to the optimum)
// against log(gamma + i) over logged steps with positive distance.
RateFit rate_fit(const std::vector<RunLog>& runs, double gamma_value);

}  // namespace sfl
