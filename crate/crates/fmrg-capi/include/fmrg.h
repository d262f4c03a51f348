// C interface to the fmrg simulation library.
//
// All functions return a status code unless documented otherwise:
//   0  success
//   1  bad argument (null pointer, invalid UTF-8, zero count)
//   2  configuration rejected
//   3  numerical failure
//   4  exact-identity verification failed
//   5  internal panic
// On failure, a thread-local message is available from fmrg_last_error.
// Strings returned through out-pointers are heap-allocated; release them
// with fmrg_string_free. Config handles are released with fmrg_config_free
// and must not be mutated concurrently.

#ifndef FMRG_H
#define FMRG_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#define FMRG_OK 0
#define FMRG_ERR_ARGUMENT 1
#define FMRG_ERR_CONFIG 2
#define FMRG_ERR_NUMERICS 3
#define FMRG_ERR_VERIFY 4
#define FMRG_ERR_PANIC 5

// Opaque experiment configuration, created from TOML text.
typedef struct fmrg_config fmrg_config;

// Terminal-ensemble summary; mirrors one CSV row. When has_prediction is 0
// the pred_ fields are zero.
typedef struct {
  double lambda;
  double t_stop;
  double emp_mean;
  double emp_mean_se;
  double emp_var;
  double emp_var_se;
  double emp_reward;
  double emp_reward_se;
  double pred_mean;
  double pred_var;
  double pred_reward;
  uint64_t n_steps;
  uint64_t n_opt;
  uint64_t nfe;
  int32_t reuse;
  int32_t has_prediction;
} fmrg_summary;

// Parse and validate TOML configuration text into a new handle.
int fmrg_config_parse(const char *text, fmrg_config **out);

// Release a handle (null is allowed).
void fmrg_config_free(fmrg_config *cfg);

// Override the master seed / particle count of a parsed configuration.
int fmrg_config_set_seed(fmrg_config *cfg, uint64_t seed);
int fmrg_config_set_particles(fmrg_config *cfg, uint64_t n);

// Simulate one terminal ensemble and fill *out.
int fmrg_run_ensemble(const fmrg_config *cfg, fmrg_summary *out);

// Same run, formatted as CSV text with a header row.
int fmrg_run_csv(const fmrg_config *cfg, char **out);

// Strength-by-method sweep as CSV; the config needs a sweep section.
int fmrg_sweep_csv(const fmrg_config *cfg, char **out);

// Early-stopping study as CSV, including the matched-stop row; the config
// needs an early_stop section.
int fmrg_earlystop_csv(const fmrg_config *cfg, char **out);

// Linear-measurement benchmark on a mixture target, as a JSON report; the
// config needs target, flow_map, and inverse sections.
int fmrg_inverse_json(const fmrg_config *cfg, char **out);

// Run the exact-identity and flow-axiom checks with the given seed.
int fmrg_verify(uint64_t seed);

// Stop time at which halted guidance reproduces the exact-control terminal
// variance, for a scalar Gaussian target.
int fmrg_solve_t_stop(double sigma1, double lambda, double *out);

// Release a string obtained from this library (null is allowed).
void fmrg_string_free(char *s);

// Message for the most recent failure on the calling thread, or null.
// Owned by the library; valid until the next failing call on this thread.
const char *fmrg_last_error(void);

#ifdef __cplusplus
}
#endif

#endif
