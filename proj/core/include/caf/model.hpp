#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "caf/ssm.hpp"
#include "caf/tensor.hpp"

namespace caf {

// Architecture description. Defaults follow the reference training recipe:
// width 256, a single ResMamba block per stage, all fusion stages enabled.
struct ModelConfig {
    std::vector<int> modality_dims;  // per-modality input channel counts
    int d_model = 256;
    int d_state = 16;
    int expand = 2;
    int w_conv = 4;
    int blocks_per_stage = 1;
    bool use_cime = true;   // explicit cross-modal interaction stream
    bool use_aamfm = true;  // adaptive attention + fused temporal encoder
    // Reads the attention nonlinearity as sigmoid followed by renormalization
    // instead of softmax.
    bool sigmoid_renorm_attention = false;
    // Exact zero-order hold for the scan input instead of the Euler rule.
    bool zoh_exact_b = false;

    int n_modalities() const { return static_cast<int>(modality_dims.size()); }
    int n_slots() const { return n_modalities() + (use_cime ? 1 : 0); }
    int dt_rank() const { return default_dt_rank(d_model); }
    void validate() const;

    bool operator==(const ModelConfig&) const = default;
};

// Per-modality extractor: pointwise conv projection into the shared embedding
// width, then a ResMamba stack.
struct UnimodalExtractor {
    Tensor proj_w;  // [1, D_m, d_model]
    Tensor proj_b;  // [d_model]
    std::vector<ResMambaBlock> blocks;
};

// Per-slot scalar attention weights; positive, summing to 1.
struct AttentionWeights {
    Tensor alpha;  // [n_slots]
};

struct ForwardResult {
    Tensor logit;  // [1]
    AttentionWeights attention;
};

class CAFMambaModel {
  public:
    CAFMambaModel(ModelConfig config, uint64_t seed);

    const ModelConfig& config() const { return cfg_; }

    // Stable name -> tensor view of every learnable array, in construction
    // order. Handles share storage with the model.
    NamedParams named_params() const;
    int64_t param_count() const;

    Tensor ufe_forward(Graph& g, int modality, const Tensor& x) const;
    Tensor cime_forward(Graph& g, const std::vector<Tensor>& streams) const;
    // Slots are the unimodal streams plus, when present, the intermodal one.
    std::pair<Tensor, AttentionWeights> mab_forward(Graph& g, const std::vector<Tensor>& streams,
                                                    const Tensor& intermodal) const;
    Tensor mme_forward(Graph& g, const Tensor& x_prime) const;
    Tensor classify(Graph& g, const Tensor& fused) const;

    ForwardResult forward(Graph& g, const std::vector<Tensor>& streams) const;

    // Weight surgery access (checkpoint loading, tests).
    std::vector<UnimodalExtractor>& ufes() { return ufes_; }
    std::vector<ResMambaBlock>& cime_blocks() { return cime_; }
    Tensor& attention_w() { return mab_w_; }
    Tensor& fuse_w() { return fuse_w_; }
    Tensor& fuse_b() { return fuse_b_; }
    std::vector<ResMambaBlock>& mme_blocks() { return mme_; }
    Tensor& head_w() { return head_w_; }
    Tensor& head_b() { return head_b_; }

  private:
    ModelConfig cfg_;
    std::vector<UnimodalExtractor> ufes_;
    std::vector<ResMambaBlock> cime_;
    Tensor mab_w_;   // [n_slots*d_model, n_slots]
    Tensor fuse_w_;  // [n_slots*d_model, d_model], width-1 conv over concatenated slots
    Tensor fuse_b_;  // [d_model]
    std::vector<ResMambaBlock> mme_;
    Tensor head_w_;  // [d_model, 1]
    Tensor head_b_;  // [1]
};

// Slot-structured ops used by the fusion stages. Cross-slot reductions run in
// a value-canonical order, which makes relabeling modalities together with
// their parameters an exact no-op on the output.
Tensor sum_streams(Graph& g, const std::vector<Tensor>& xs);
Tensor slot_linear(Graph& g, const std::vector<Tensor>& pooled, const Tensor& w);
Tensor slot_conv1x1(Graph& g, const std::vector<Tensor>& streams, const Tensor& w,
                    const Tensor& bias);
Tensor softmax_slots(Graph& g, const Tensor& logits);
Tensor normalize_slots(Graph& g, const Tensor& positive);

}  // namespace caf
