#include "caf/model.hpp"

#include <cmath>

namespace caf {

void ModelConfig::validate() const {
    if (n_modalities() < 2)
        throw ConfigError("model needs at least 2 modalities, got " +
                          std::to_string(n_modalities()));
    for (size_t i = 0; i < modality_dims.size(); ++i)
        if (modality_dims[i] <= 0)
            throw ConfigError("modality " + std::to_string(i) + " has non-positive width " +
                              std::to_string(modality_dims[i]));
    if (d_model <= 0 || d_state <= 0 || expand <= 0 || w_conv <= 0 || blocks_per_stage <= 0)
        throw ConfigError("model dims must be positive: d_model=" + std::to_string(d_model) +
                          " d_state=" + std::to_string(d_state) + " expand=" +
                          std::to_string(expand) + " w_conv=" + std::to_string(w_conv) +
                          " blocks_per_stage=" + std::to_string(blocks_per_stage));
}

// ---------------------------------------------------------------------------
// slot-structured ops

Tensor sum_streams(Graph& g, const std::vector<Tensor>& xs) {
    if (xs.empty()) throw DimensionError("sum_streams of zero streams");
    const Shape& shape = xs[0].shape();
    for (const Tensor& x : xs)
        if (x.shape() != shape)
            throw DimensionError("sum_streams: shapes differ, " + shape_str(x.shape()) + " vs " +
                                 shape_str(shape));
    Tensor out = Tensor::zeros(shape);
    const size_t k = xs.size();
    std::vector<double> vals(k);
    double* po = out.data().data();
    for (int64_t i = 0; i < out.numel(); ++i) {
        for (size_t s = 0; s < k; ++s) vals[s] = xs[s].data()[static_cast<size_t>(i)];
        po[i] = reduce_canonical(vals);
    }
    bool any = false;
    for (const Tensor& x : xs) any = any || x.requires_grad();
    if (g.recording() && any) {
        out.set_requires_grad(true);
        std::vector<Tensor> txs = xs;
        Tensor to = out;
        g.record([txs, to]() mutable {
            const double* gv = to.grad().data();
            for (Tensor& x : txs) {
                if (!x.requires_grad()) continue;
                double* gx = x.grad().data();
                for (int64_t i = 0; i < to.numel(); ++i) gx[i] += gv[i];
            }
        });
    }
    return out;
}

Tensor slot_linear(Graph& g, const std::vector<Tensor>& pooled, const Tensor& w) {
    const int s_count = static_cast<int>(pooled.size());
    if (s_count == 0) throw DimensionError("slot_linear without slots");
    const int d = pooled[0].dim(0);
    for (const Tensor& p : pooled)
        if (p.rank() != 1 || p.dim(0) != d)
            throw DimensionError("slot_linear: pooled slot " + shape_str(p.shape()) +
                                 " wants [" + std::to_string(d) + "]");
    if (w.rank() != 2 || w.dim(0) != s_count * d || w.dim(1) != s_count)
        throw DimensionError("slot_linear: weight " + shape_str(w.shape()) + " wants [" +
                             std::to_string(s_count * d) + "," + std::to_string(s_count) + "]");
    Tensor out = Tensor::zeros({s_count});
    const double* pw = w.data().data();
    std::vector<double> partials(static_cast<size_t>(s_count));
    for (int k = 0; k < s_count; ++k) {
        for (int s = 0; s < s_count; ++s) {
            const double* pv = pooled[static_cast<size_t>(s)].data().data();
            double acc = 0.0;
            for (int c = 0; c < d; ++c)
                acc += pv[c] * pw[(static_cast<int64_t>(s) * d + c) * s_count + k];
            partials[static_cast<size_t>(s)] = acc;
        }
        out.at(k) = reduce_canonical(partials);
    }
    bool any = w.requires_grad();
    for (const Tensor& p : pooled) any = any || p.requires_grad();
    if (g.recording() && any) {
        out.set_requires_grad(true);
        std::vector<Tensor> tp = pooled;
        Tensor tw = w, to = out;
        g.record([tp, tw, to, s_count, d]() mutable {
            const double* gv = to.grad().data();
            const double* pw = tw.data().data();
            double* gw = tw.requires_grad() ? tw.grad().data() : nullptr;
            for (int s = 0; s < s_count; ++s) {
                Tensor& p = tp[static_cast<size_t>(s)];
                const double* pv = p.data().data();
                double* gp = p.requires_grad() ? p.grad().data() : nullptr;
                for (int c = 0; c < d; ++c) {
                    const int64_t row = (static_cast<int64_t>(s) * d + c) * s_count;
                    for (int k = 0; k < s_count; ++k) {
                        if (gp) gp[c] += gv[k] * pw[row + k];
                        if (gw) gw[row + k] += gv[k] * pv[c];
                    }
                }
            }
        });
    }
    return out;
}

Tensor slot_conv1x1(Graph& g, const std::vector<Tensor>& streams, const Tensor& w,
                    const Tensor& bias) {
    const int s_count = static_cast<int>(streams.size());
    if (s_count == 0) throw DimensionError("slot_conv1x1 without slots");
    const int L = streams[0].dim(0), d = streams[0].dim(1);
    for (const Tensor& x : streams)
        if (x.rank() != 2 || x.dim(0) != L || x.dim(1) != d)
            throw DimensionError("slot_conv1x1: stream " + shape_str(x.shape()) + " wants [" +
                                 std::to_string(L) + "," + std::to_string(d) + "]");
    if (w.rank() != 2 || w.dim(0) != s_count * d)
        throw DimensionError("slot_conv1x1: kernel " + shape_str(w.shape()) + " wants [" +
                             std::to_string(s_count * d) + ",*]");
    const int dout = w.dim(1);
    if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != dout))
        throw DimensionError("slot_conv1x1: bias " + shape_str(bias.shape()) + " wants [" +
                             std::to_string(dout) + "]");
    Tensor out = Tensor::zeros({L, dout});
    const double* pw = w.data().data();
    const double* pb = bias.defined() ? bias.data().data() : nullptr;
    double* po = out.data().data();
    std::vector<double> partials(static_cast<size_t>(s_count));
    for (int t = 0; t < L; ++t) {
        for (int o = 0; o < dout; ++o) {
            for (int s = 0; s < s_count; ++s) {
                const double* row = streams[static_cast<size_t>(s)].data().data() +
                                    static_cast<int64_t>(t) * d;
                double acc = 0.0;
                for (int c = 0; c < d; ++c)
                    acc += row[c] * pw[(static_cast<int64_t>(s) * d + c) * dout + o];
                partials[static_cast<size_t>(s)] = acc;
            }
            po[static_cast<int64_t>(t) * dout + o] =
                reduce_canonical(partials) + (pb ? pb[o] : 0.0);
        }
    }
    bool any = w.requires_grad() || (bias.defined() && bias.requires_grad());
    for (const Tensor& x : streams) any = any || x.requires_grad();
    if (g.recording() && any) {
        out.set_requires_grad(true);
        std::vector<Tensor> ts = streams;
        Tensor tw = w, tb = bias, to = out;
        g.record([ts, tw, tb, to, s_count, L, d, dout]() mutable {
            const double* gv = to.grad().data();
            const double* pw = tw.data().data();
            double* gw = tw.requires_grad() ? tw.grad().data() : nullptr;
            double* gb = tb.defined() && tb.requires_grad() ? tb.grad().data() : nullptr;
            if (gb) {
                for (int t = 0; t < L; ++t)
                    for (int o = 0; o < dout; ++o)
                        gb[o] += gv[static_cast<int64_t>(t) * dout + o];
            }
            for (int s = 0; s < s_count; ++s) {
                Tensor& x = ts[static_cast<size_t>(s)];
                const double* px = x.data().data();
                double* gx = x.requires_grad() ? x.grad().data() : nullptr;
                if (!gx && !gw) continue;
                for (int t = 0; t < L; ++t) {
                    const double* grow = gv + static_cast<int64_t>(t) * dout;
                    const double* xrow = px + static_cast<int64_t>(t) * d;
                    for (int c = 0; c < d; ++c) {
                        const double* wrow = pw + (static_cast<int64_t>(s) * d + c) * dout;
                        if (gx) {
                            double acc = 0.0;
                            for (int o = 0; o < dout; ++o) acc += grow[o] * wrow[o];
                            gx[static_cast<int64_t>(t) * d + c] += acc;
                        }
                        if (gw) {
                            double* gwrow = gw + (static_cast<int64_t>(s) * d + c) * dout;
                            const double xv = xrow[c];
                            for (int o = 0; o < dout; ++o) gwrow[o] += xv * grow[o];
                        }
                    }
                }
            }
        });
    }
    return out;
}

Tensor softmax_slots(Graph& g, const Tensor& logits) {
    if (logits.rank() != 1)
        throw DimensionError("softmax_slots expects a vector, got " + shape_str(logits.shape()));
    const int n = logits.dim(0);
    Tensor out = Tensor::zeros({n});
    const double* px = logits.data().data();
    double* po = out.data().data();
    double mx = px[0];
    for (int i = 1; i < n; ++i) mx = std::max(mx, px[i]);
    std::vector<double> exps(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) exps[static_cast<size_t>(i)] = std::exp(px[i] - mx);
    std::vector<double> tmp = exps;
    const double z = reduce_canonical(tmp);
    for (int i = 0; i < n; ++i) po[i] = exps[static_cast<size_t>(i)] / z;
    if (g.recording() && logits.requires_grad()) {
        out.set_requires_grad(true);
        Tensor tx = logits, to = out;
        const double fault = g.grad_fault("softmax");
        g.record([tx, to, n, fault]() mutable {
            const double* gv = to.grad().data();
            const double* s = to.data().data();
            double* gx = tx.grad().data();
            double dot = 0.0;
            for (int i = 0; i < n; ++i) dot += gv[i] * s[i];
            for (int i = 0; i < n; ++i) gx[i] += fault * s[i] * (gv[i] - dot);
        });
    }
    return out;
}

Tensor normalize_slots(Graph& g, const Tensor& positive) {
    if (positive.rank() != 1)
        throw DimensionError("normalize_slots expects a vector, got " +
                             shape_str(positive.shape()));
    const int n = positive.dim(0);
    std::vector<double> tmp(positive.data().begin(), positive.data().end());
    const double z = reduce_canonical(tmp);
    if (z <= 0.0) throw NumericError("normalize_slots: non-positive mass");
    Tensor out = Tensor::zeros({n});
    for (int i = 0; i < n; ++i) out.at(i) = positive.at(i) / z;
    if (g.recording() && positive.requires_grad()) {
        out.set_requires_grad(true);
        Tensor tx = positive, to = out;
        g.record([tx, to, n, z]() mutable {
            const double* gv = to.grad().data();
            const double* o = to.data().data();
            double* gx = tx.grad().data();
            double dot = 0.0;
            for (int i = 0; i < n; ++i) dot += gv[i] * o[i];
            for (int i = 0; i < n; ++i) gx[i] += (gv[i] - dot) / z;
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// model

CAFMambaModel::CAFMambaModel(ModelConfig config, uint64_t seed) : cfg_(std::move(config)) {
    cfg_.validate();
    std::mt19937_64 rng(seed);
    const int d = cfg_.d_model;
    const int slots = cfg_.n_slots();

    auto make_stack = [&](std::vector<ResMambaBlock>& stack) {
        for (int i = 0; i < cfg_.blocks_per_stage; ++i)
            stack.push_back(make_res_mamba_block(d, cfg_.expand, cfg_.d_state, cfg_.w_conv,
                                                 cfg_.dt_rank(), rng));
    };

    for (int m = 0; m < cfg_.n_modalities(); ++m) {
        UnimodalExtractor ufe;
        const int dm = cfg_.modality_dims[static_cast<size_t>(m)];
        const double k = 1.0 / std::sqrt(static_cast<double>(dm));
        ufe.proj_w = Tensor::rand_uniform({1, dm, d}, rng, -k, k, true);
        ufe.proj_b = Tensor::rand_uniform({d}, rng, -k, k, true);
        make_stack(ufe.blocks);
        ufes_.push_back(std::move(ufe));
    }
    if (cfg_.use_cime) make_stack(cime_);

    const double kw = 1.0 / std::sqrt(static_cast<double>(slots * d));
    mab_w_ = Tensor::rand_uniform({slots * d, slots}, rng, -kw, kw, true);
    fuse_w_ = Tensor::rand_uniform({slots * d, d}, rng, -kw, kw, true);
    fuse_b_ = Tensor::rand_uniform({d}, rng, -kw, kw, true);
    if (cfg_.use_aamfm) make_stack(mme_);

    const double kh = 1.0 / std::sqrt(static_cast<double>(d));
    head_w_ = Tensor::rand_uniform({d, 1}, rng, -kh, kh, true);
    head_b_ = Tensor::rand_uniform({1}, rng, -kh, kh, true);
}

NamedParams CAFMambaModel::named_params() const {
    NamedParams out;
    for (size_t m = 0; m < ufes_.size(); ++m) {
        const std::string prefix = "ufe" + std::to_string(m);
        out.emplace_back(prefix + ".proj.weight", ufes_[m].proj_w);
        out.emplace_back(prefix + ".proj.bias", ufes_[m].proj_b);
        for (size_t i = 0; i < ufes_[m].blocks.size(); ++i)
            collect_params(ufes_[m].blocks[i], prefix + ".res" + std::to_string(i), out);
    }
    for (size_t i = 0; i < cime_.size(); ++i)
        collect_params(cime_[i], "cime.res" + std::to_string(i), out);
    out.emplace_back("mab.w", mab_w_);
    out.emplace_back("mab.fuse.weight", fuse_w_);
    out.emplace_back("mab.fuse.bias", fuse_b_);
    for (size_t i = 0; i < mme_.size(); ++i)
        collect_params(mme_[i], "mme.res" + std::to_string(i), out);
    out.emplace_back("head.weight", head_w_);
    out.emplace_back("head.bias", head_b_);
    return out;
}

int64_t CAFMambaModel::param_count() const {
    int64_t n = 0;
    for (const auto& [name, t] : named_params()) n += t.numel();
    return n;
}

Tensor CAFMambaModel::ufe_forward(Graph& g, int modality, const Tensor& x) const {
    if (modality < 0 || modality >= cfg_.n_modalities())
        throw ConfigError("modality index " + std::to_string(modality) + " out of " +
                          std::to_string(cfg_.n_modalities()));
    const UnimodalExtractor& ufe = ufes_[static_cast<size_t>(modality)];
    const int dm = cfg_.modality_dims[static_cast<size_t>(modality)];
    if (x.rank() != 2 || x.dim(1) != dm)
        throw DimensionError("modality " + std::to_string(modality) + " input " +
                             shape_str(x.shape()) + " wants [L," + std::to_string(dm) + "]");
    Tensor h = g.conv1d(x, ufe.proj_w, ufe.proj_b);
    for (const ResMambaBlock& b : ufe.blocks) h = res_mamba_forward(g, b, h, cfg_.zoh_exact_b);
    return h;
}

Tensor CAFMambaModel::cime_forward(Graph& g, const std::vector<Tensor>& streams) const {
    if (!cfg_.use_cime) throw ConfigError("cime_forward on a model built without CIME");
    Tensor h = sum_streams(g, streams);
    for (const ResMambaBlock& b : cime_) h = res_mamba_forward(g, b, h, cfg_.zoh_exact_b);
    return h;
}

std::pair<Tensor, AttentionWeights> CAFMambaModel::mab_forward(
    Graph& g, const std::vector<Tensor>& streams, const Tensor& intermodal) const {
    std::vector<Tensor> slots = streams;
    if (intermodal.defined()) slots.push_back(intermodal);
    if (static_cast<int>(slots.size()) != cfg_.n_slots())
        throw DimensionError("mab_forward: got " + std::to_string(slots.size()) +
                             " slots, model fuses " + std::to_string(cfg_.n_slots()));
    std::vector<Tensor> pooled;
    pooled.reserve(slots.size());
    for (const Tensor& s : slots) pooled.push_back(g.mean_pool_time(s));
    Tensor logits = slot_linear(g, pooled, mab_w_);
    Tensor alpha = cfg_.sigmoid_renorm_attention ? normalize_slots(g, g.sigmoid(logits))
                                                 : softmax_slots(g, logits);
    std::vector<Tensor> scaled;
    scaled.reserve(slots.size());
    for (size_t k = 0; k < slots.size(); ++k)
        scaled.push_back(g.mul(slots[k], g.select(alpha, static_cast<int64_t>(k))));
    Tensor x_prime = slot_conv1x1(g, scaled, fuse_w_, fuse_b_);
    return {x_prime, AttentionWeights{alpha}};
}

Tensor CAFMambaModel::mme_forward(Graph& g, const Tensor& x_prime) const {
    Tensor h = x_prime;
    for (const ResMambaBlock& b : mme_) h = res_mamba_forward(g, b, h, cfg_.zoh_exact_b);
    return h;
}

Tensor CAFMambaModel::classify(Graph& g, const Tensor& fused) const {
    Tensor pooled = g.mean_pool_time(fused);
    Tensor logit = g.linear(g.reshape(pooled, {1, cfg_.d_model}), head_w_, head_b_);
    return g.reshape(logit, {1});
}

ForwardResult CAFMambaModel::forward(Graph& g, const std::vector<Tensor>& streams) const {
    if (static_cast<int>(streams.size()) != cfg_.n_modalities())
        throw ConfigError("sample has " + std::to_string(streams.size()) +
                          " modalities, model expects " + std::to_string(cfg_.n_modalities()));
    std::vector<Tensor> encoded;
    encoded.reserve(streams.size());
    for (size_t m = 0; m < streams.size(); ++m)
        encoded.push_back(ufe_forward(g, static_cast<int>(m), streams[m]));

    Tensor intermodal;
    if (cfg_.use_cime) intermodal = cime_forward(g, encoded);

    Tensor fused;
    AttentionWeights attention;
    if (cfg_.use_aamfm) {
        auto [x_prime, alpha] = mab_forward(g, encoded, intermodal);
        attention = alpha;
        fused = mme_forward(g, x_prime);
    } else {
        // concatenation baseline: no adaptive weighting, no fused encoder
        std::vector<Tensor> slots = encoded;
        if (intermodal.defined()) slots.push_back(intermodal);
        fused = slot_conv1x1(g, slots, fuse_w_, fuse_b_);
        attention.alpha =
            Tensor::full({cfg_.n_slots()}, 1.0 / cfg_.n_slots());
    }
    return {classify(g, fused), attention};
}

}  // namespace caf
