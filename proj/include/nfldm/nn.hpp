#pragma once

#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "io.hpp"
#include "optim.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace nfldm {

// Named parameter registry. Layers fetch-or-create by name, so building a net
// over a store loaded from a checkpoint rebinds the saved weights.
struct ParamStore {
    uint64_t seed = 0;
    std::map<std::string, Tensor> entries;

    explicit ParamStore(uint64_t s = 0) : seed(s) {}

    Tensor get_or_create(const std::string& name, std::vector<int> shape,
                         float gauss_std, bool zero = false) {
        auto it = entries.find(name);
        if (it != entries.end()) {
            if (it->second.shape() != shape)
                throw std::runtime_error("param " + name + ": stored shape " +
                                         shape_str(it->second.shape()) + " vs requested " + shape_str(shape));
            return it->second;
        }
        Tensor t;
        if (zero || gauss_std == 0.f) {
            t = Tensor::zeros(shape);
        } else {
            Rng rng = substream(seed, "init/" + name);
            t = Tensor::randn(shape, rng, gauss_std);
        }
        t.set_requires_grad(true);
        entries.emplace(name, t);
        return t;
    }

    Tensor get_or_const(const std::string& name, std::vector<int> shape, float fill) {
        auto it = entries.find(name);
        if (it != entries.end()) return it->second;
        Tensor t = Tensor::full(shape, fill);
        t.set_requires_grad(true);
        entries.emplace(name, t);
        return t;
    }

    std::vector<Tensor> all_params() const {
        std::vector<Tensor> out;
        out.reserve(entries.size());
        for (const auto& [k, v] : entries) out.push_back(v);
        return out;
    }

    size_t count_scalars() const {
        size_t n = 0;
        for (const auto& [k, v] : entries) n += v.numel();
        return n;
    }

    void set_requires_grad(bool b) {
        for (auto& [k, v] : entries) v.set_requires_grad(b);
    }

    void save(const std::string& path) const {
        std::vector<NftTensor> recs;
        for (const auto& [k, v] : entries) {
            NftTensor t;
            t.name = k;
            for (int d : v.shape()) t.dims.push_back(static_cast<uint64_t>(d));
            t.data = v.data();
            recs.push_back(std::move(t));
        }
        nft_write(path, recs);
    }

    void load(const std::string& path) {
        for (auto& rec : nft_read(path)) {
            std::vector<int> shape;
            for (uint64_t d : rec.dims) shape.push_back(static_cast<int>(d));
            Tensor t = Tensor::from_data(shape, std::move(rec.data));
            t.set_requires_grad(true);
            entries[rec.name] = t;
        }
    }
};

// Largest group count <= 8 dividing the channel count.
inline int norm_groups(int channels) {
    for (int g : {8, 4, 2})
        if (channels % g == 0) return g;
    return 1;
}

struct LinearLayer {
    Tensor W, b;
    bool has_bias = true;

    LinearLayer() = default;
    LinearLayer(ParamStore& ps, const std::string& name, int in, int out,
                bool bias = true, bool zero = false)
        : has_bias(bias) {
        float s = std::sqrt(1.f / static_cast<float>(in));
        W = ps.get_or_create(name + ".w", {out, in}, s, zero);
        if (bias) b = ps.get_or_create(name + ".b", {out}, 0.f, true);
    }

    Tensor operator()(const Tensor& x) const { return has_bias ? linear(x, W, b) : linear(x, W); }
};

struct Conv2dLayer {
    Tensor w, b;
    int stride = 1, pad = 1;

    Conv2dLayer() = default;
    Conv2dLayer(ParamStore& ps, const std::string& name, int ci, int co, int k,
                int stride_ = 1, int pad_ = -1, bool zero = false)
        : stride(stride_), pad(pad_ < 0 ? k / 2 : pad_) {
        float s = std::sqrt(2.f / static_cast<float>(ci * k * k));
        w = ps.get_or_create(name + ".w", {co, ci, k, k}, s, zero);
        b = ps.get_or_create(name + ".b", {co}, 0.f, true);
    }

    Tensor operator()(const Tensor& x) const { return conv2d(x, w, b, stride, pad); }
};

struct GroupNormLayer {
    int groups = 1;
    Tensor gamma, beta;

    GroupNormLayer() = default;
    GroupNormLayer(ParamStore& ps, const std::string& name, int channels, int groups_ = -1)
        : groups(groups_ < 0 ? norm_groups(channels) : groups_) {
        gamma = ps.get_or_const(name + ".g", {channels}, 1.f);
        beta = ps.get_or_create(name + ".b", {channels}, 0.f, true);
    }

    Tensor operator()(const Tensor& x) const {
        return add_channel_vec(mul_channel_vec(group_norm_raw(x, groups), gamma), beta);
    }
};

// Group norm whose affine comes from a conditioning vector. Projections start
// at zero, so an untrained layer (or a zero condition) is plain normalization.
struct CondGroupNorm {
    int groups = 1;
    LinearLayer to_scale, to_shift;

    CondGroupNorm() = default;
    CondGroupNorm(ParamStore& ps, const std::string& name, int channels, int cond_dim, int groups_ = -1)
        : groups(groups_ < 0 ? norm_groups(channels) : groups_),
          to_scale(ps, name + ".scale", cond_dim, channels, true, true),
          to_shift(ps, name + ".shift", cond_dim, channels, true, true) {}

    Tensor operator()(const Tensor& x, const Tensor& cond) const {
        Tensor h = group_norm_raw(x, groups);
        h = mul_channel_vec(h, add_s(to_scale(cond), 1.f));
        return add_channel_vec(h, to_shift(cond));
    }
};

// Interleaved sin/cos at geometrically spaced frequencies, highest first:
// out = [sin(t f0), cos(t f0), sin(t f1), cos(t f1), ...], f0 = 1.
inline Tensor timestep_embedding(int t, int dim) {
    if (dim <= 0 || dim % 2 != 0) throw std::invalid_argument("timestep_embedding: dim must be even");
    if (t < 0) throw std::invalid_argument("timestep_embedding: t must be >= 0");
    int half = dim / 2;
    Tensor out = Tensor::zeros({dim});
    for (int i = 0; i < half; ++i) {
        double f = half > 1 ? std::pow(10000.0, -static_cast<double>(i) / (half - 1)) : 1.0;
        out.data()[2 * i] = static_cast<float>(std::sin(t * f));
        out.data()[2 * i + 1] = static_cast<float>(std::cos(t * f));
    }
    return out;
}

// Single-head scaled dot-product attention.
struct Attention {
    LinearLayer q, k, v, o;
    int dk = 0;

    Attention() = default;
    Attention(ParamStore& ps, const std::string& name, int c, int c_ctx, int dk_)
        : q(ps, name + ".q", c, dk_, false),
          k(ps, name + ".k", c_ctx, dk_, false),
          v(ps, name + ".v", c_ctx, dk_, false),
          o(ps, name + ".o", dk_, c, true, true),
          dk(dk_) {}

    // x [T, C], ctx [S, C_ctx] -> [T, C]
    Tensor operator()(const Tensor& x, const Tensor& ctx) const {
        Tensor Q = q(x), K = k(ctx), V = v(ctx);
        Tensor A = softmax_last(mul_s(matmul(Q, transpose2d(K)), 1.f / std::sqrt(static_cast<float>(dk))));
        return o(matmul(A, V));
    }
};

// Residual attention block over the spatial extent of a [C,H,W] map. With no
// context the block self-attends.
struct AttnBlock2d {
    GroupNormLayer norm;
    Attention attn;
    int channels = 0;

    AttnBlock2d() = default;
    AttnBlock2d(ParamStore& ps, const std::string& name, int c, int c_ctx = -1)
        : norm(ps, name + ".norm", c),
          attn(ps, name + ".attn", c, c_ctx < 0 ? c : c_ctx, c),
          channels(c) {}

    Tensor operator()(const Tensor& x, const Tensor& ctx = Tensor{}) const {
        int c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
        Tensor flat = transpose2d(reshape(norm(x), {c, h * w}));
        Tensor a = ctx.defined() ? attn(flat, ctx) : attn(flat, flat);
        return add(x, reshape(transpose2d(a), {c, h, w}));
    }
};

// norm -> silu -> conv, twice, plus an embedding injection and a skip. The
// norms become condition-driven when cond_dim > 0.
struct ResBlock2d {
    bool cond = false;
    GroupNormLayer n1, n2;
    CondGroupNorm c1, c2;
    Conv2dLayer conv1, conv2, skip;
    LinearLayer emb;
    bool has_emb = false, has_skip = false;

    ResBlock2d() = default;
    ResBlock2d(ParamStore& ps, const std::string& name, int ci, int co,
               int emb_dim = 0, int cond_dim = 0)
        : cond(cond_dim > 0) {
        if (cond) {
            c1 = CondGroupNorm(ps, name + ".n1", ci, cond_dim);
            c2 = CondGroupNorm(ps, name + ".n2", co, cond_dim);
        } else {
            n1 = GroupNormLayer(ps, name + ".n1", ci);
            n2 = GroupNormLayer(ps, name + ".n2", co);
        }
        conv1 = Conv2dLayer(ps, name + ".conv1", ci, co, 3);
        conv2 = Conv2dLayer(ps, name + ".conv2", co, co, 3);
        has_emb = emb_dim > 0;
        if (has_emb) emb = LinearLayer(ps, name + ".emb", emb_dim, co);
        has_skip = ci != co;
        if (has_skip) skip = Conv2dLayer(ps, name + ".skip", ci, co, 1, 1, 0);
    }

    Tensor operator()(const Tensor& x, const Tensor& g = Tensor{}, const Tensor& e = Tensor{}) const {
        Tensor h = cond ? c1(x, g) : n1(x);
        h = conv1(silu(h));
        if (has_emb && e.defined()) h = add_channel_vec(h, emb(silu(e)));
        h = cond ? c2(h, g) : n2(h);
        h = conv2(silu(h));
        return add(h, has_skip ? skip(x) : x);
    }
};

} // namespace nfldm
