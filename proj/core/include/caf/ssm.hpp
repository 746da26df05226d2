#pragma once

#include <random>
#include <string>
#include <utility>
#include <vector>

#include "caf/tensor.hpp"

namespace caf {

// Input-dependent parameters of a diagonal selective state-space layer.
// The state matrix is stored as log(-A), so A = -exp(a_log) stays strictly
// negative and the discretized dynamics decay.
struct SSMParams {
    Tensor a_log;       // [d_inner, d_state]
    Tensor skip;        // [d_inner], per-channel input passthrough gain
    Tensor w_b;         // [d_inner, d_state], projects u_t to B_t
    Tensor w_c;         // [d_inner, d_state], projects u_t to C_t
    Tensor delta_down;  // [d_inner, dt_rank]
    Tensor delta_up_w;  // [dt_rank, d_inner]
    Tensor delta_up_b;  // [d_inner], biased so softplus lands in [1e-3, 1e-1]
};

struct MambaBlockParams {
    int d_model = 0;
    int d_inner = 0;
    int d_state = 0;
    int w_conv = 0;
    int dt_rank = 0;
    Tensor in_proj;   // [d_model, 2*d_inner], split into stream u and gate z
    Tensor conv_w;    // [w_conv, d_inner], depthwise causal
    Tensor conv_b;    // [d_inner]
    SSMParams ssm;
    Tensor out_proj;  // [d_inner, d_model], zero-initialized
};

// Pre-norm residual wrapper: x + mamba(norm(x)).
struct ResMambaBlock {
    Tensor norm_gamma;  // [d_model]
    Tensor norm_beta;   // [d_model]
    MambaBlockParams inner;
};

int default_dt_rank(int d_model);

MambaBlockParams make_mamba_block(int d_model, int expand, int d_state, int w_conv, int dt_rank,
                                  std::mt19937_64& rng);
ResMambaBlock make_res_mamba_block(int d_model, int expand, int d_state, int w_conv, int dt_rank,
                                   std::mt19937_64& rng);

using NamedParams = std::vector<std::pair<std::string, Tensor>>;
void collect_params(const MambaBlockParams& p, const std::string& prefix, NamedParams& out);
void collect_params(const ResMambaBlock& b, const std::string& prefix, NamedParams& out);

// Zero-order hold of the state matrix plus the simplified Euler input rule
// for a single timestep: Abar = exp(delta*A) elementwise, Bbar = delta*B.
std::pair<Tensor, Tensor> discretize(const Tensor& a, const Tensor& b_t, double delta_t);

// Sequential reference recurrence, per inner channel with diagonal state:
//   h_t = Abar_t h_{t-1} + Bbar_t u_t,  y_t = <C_t, h_t> + skip * u_t.
// u, delta: [L, d_inner]; b_seq, c_seq: [L, d_state]; a: [d_inner, d_state];
// skip: [d_inner]. Plain loops, no autodiff, the oracle for the fast path.
Tensor selective_scan_ref(const Tensor& u, const Tensor& delta, const Tensor& b_seq,
                          const Tensor& c_seq, const Tensor& a, const Tensor& skip,
                          bool zoh_exact_b = false);

// Same contract evaluated in time chunks with hoisted exponentials. O(L) like
// the reference, smaller constant.
Tensor selective_scan_fast(const Tensor& u, const Tensor& delta, const Tensor& b_seq,
                           const Tensor& c_seq, const Tensor& a, const Tensor& skip,
                           bool zoh_exact_b = false);

// Raw f32 kernel for the inference benchmark path. y must hold L*d_inner.
void selective_scan_fast_f32(int L, int d_inner, int d_state, const float* u, const float* delta,
                             const float* b_seq, const float* c_seq, const float* a,
                             const float* skip, float* y, bool zoh_exact_b = false);

// Recorded scan with a hand-written backward rule; forward equals
// selective_scan_fast.
Tensor selective_scan(Graph& g, const Tensor& u, const Tensor& delta, const Tensor& b_seq,
                      const Tensor& c_seq, const Tensor& a, const Tensor& skip,
                      bool zoh_exact_b = false);

// u,z = split(in_proj(x)); u = silu(causal depthwise conv(u));
// delta,B,C = projections of u; y = scan; out = out_proj(y * silu(z)).
Tensor mamba_block_forward(Graph& g, const MambaBlockParams& p, const Tensor& x,
                           bool zoh_exact_b = false);

Tensor res_mamba_forward(Graph& g, const ResMambaBlock& b, const Tensor& x,
                         bool zoh_exact_b = false);

}  // namespace caf
