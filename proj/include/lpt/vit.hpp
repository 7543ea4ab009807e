#pragma once

// Micro vision transformer with prompt tokens injected into the attention
// key/value streams, the shared prompt, the key-matched group-prompt pool,
// the cosine classifier and both forward pathways.
//
// Prompt tokens never enter the query stream: every block consumes and
// produces exactly N+1 tokens regardless of the prompt configuration.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "lpt/common.hpp"
#include "lpt/optim.hpp"
#include "lpt/rng.hpp"
#include "lpt/tensor.hpp"

namespace lpt {

struct ModelConfig {
    int layers = 8;
    int dim = 64;
    int heads = 4;
    int patch = 4;
    int image_side = 32;
    int classes = 20;
    int prompt_len = 10;      // shared prompt tokens per layer (0 = promptless)
    int pool_size = 20;       // m
    int split_depth = 4;      // K: blocks 1..K run shared-only
    int pool_prompt_len = 10; // group prompt tokens per layer (0 = degenerate pool)
    int ensemble_k = 2;

    int patch_count() const { return (image_side / patch) * (image_side / patch); }
    int patch_dim() const { return patch * patch * 3; }
    int ffn_dim() const { return 4 * dim; }

    std::vector<std::string> validate() const {
        std::vector<std::string> bad;
        if (layers < 1) bad.push_back("model.layers must be >= 1");
        if (dim < 1) bad.push_back("model.dim must be >= 1");
        if (heads < 1 || dim % heads != 0) bad.push_back("model.dim must be divisible by model.heads");
        if (patch < 1 || image_side < 1 || image_side % patch != 0)
            bad.push_back("model.image_side must be divisible by model.patch");
        if (classes < 2) bad.push_back("model.classes must be >= 2");
        if (prompt_len < 0) bad.push_back("prompts.len must be >= 0");
        if (pool_prompt_len < 0) bad.push_back("prompts.pool_len must be >= 0");
        if (pool_size < 1) bad.push_back("prompts.pool_size must be >= 1");
        if (split_depth < 1 || split_depth >= layers)
            bad.push_back("prompts.split_depth must satisfy 1 <= K < model.layers");
        if (ensemble_k < 1 || ensemble_k > pool_size)
            bad.push_back("prompts.ensemble must satisfy 1 <= k <= prompts.pool_size");
        return bad;
    }
};

struct BlockParams {
    Tensor ln1_g, ln1_b;
    Tensor wq, wk, wv, wo;  // d x d, no biases
    Tensor ln2_g, ln2_b;
    Tensor fc1_w, fc1_b;    // d x 4d, 4d
    Tensor fc2_w, fc2_b;    // 4d x d, d
};

struct VitParams {
    Tensor patch_w;  // patch_dim x d
    Tensor patch_b;  // d
    Tensor cls_token;  // 1 x d
    Tensor pos_emb;    // N x d (patch tokens only)
    std::vector<BlockParams> blocks;
};

struct SharedPrompt {
    int len = 0;
    std::vector<Tensor> layers;  // L entries of len x d when len > 0, else empty
};

// m entries of (key, per-layer prompt tokens for blocks K+1..L).
struct GroupPromptPool {
    int split_depth = 0;
    int prompt_len = 0;
    std::vector<Tensor> keys;                     // m entries, d
    std::vector<std::vector<Tensor>> prompts;     // m x (L-K) tensors of prompt_len x d
};

struct CosineClassifier {
    Tensor weight;  // C x d
};

struct LinearHead {
    Tensor w;  // d x C
    Tensor b;  // C
};

struct ModelState {
    ModelConfig cfg;
    VitParams vit;
    SharedPrompt shared;
    std::optional<GroupPromptPool> pool;
    CosineClassifier clf;
    std::optional<LinearHead> head;  // pretraining only
};

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

inline Tensor trunc_normal_tensor(std::vector<size_t> shape, Rng& rng, real std_dev = real(0.02)) {
    std::vector<real> v(detail::shape_numel(shape));
    for (real& x : v) x = static_cast<real>(rng.truncated_normal(0.0, std_dev));
    return Tensor::from(std::move(shape), std::move(v));
}

inline VitParams init_vit(const ModelConfig& cfg, Rng rng) {
    VitParams p;
    size_t d = static_cast<size_t>(cfg.dim);
    size_t pd = static_cast<size_t>(cfg.patch_dim());
    size_t n = static_cast<size_t>(cfg.patch_count());
    size_t f = static_cast<size_t>(cfg.ffn_dim());
    p.patch_w = trunc_normal_tensor({pd, d}, rng);
    p.patch_b = Tensor::zeros({d});
    p.cls_token = trunc_normal_tensor({1, d}, rng);
    p.pos_emb = trunc_normal_tensor({n, d}, rng);
    for (int i = 0; i < cfg.layers; ++i) {
        BlockParams b;
        b.ln1_g = Tensor::full({d}, real(1));
        b.ln1_b = Tensor::zeros({d});
        b.wq = trunc_normal_tensor({d, d}, rng);
        b.wk = trunc_normal_tensor({d, d}, rng);
        b.wv = trunc_normal_tensor({d, d}, rng);
        b.wo = trunc_normal_tensor({d, d}, rng);
        b.ln2_g = Tensor::full({d}, real(1));
        b.ln2_b = Tensor::zeros({d});
        b.fc1_w = trunc_normal_tensor({d, f}, rng);
        b.fc1_b = Tensor::zeros({f});
        b.fc2_w = trunc_normal_tensor({f, d}, rng);
        b.fc2_b = Tensor::zeros({d});
        p.blocks.push_back(std::move(b));
    }
    return p;
}

inline SharedPrompt init_shared_prompt(const ModelConfig& cfg, Rng rng) {
    SharedPrompt sp;
    sp.len = cfg.prompt_len;
    if (sp.len == 0) return sp;
    for (int i = 0; i < cfg.layers; ++i)
        sp.layers.push_back(trunc_normal_tensor(
            {static_cast<size_t>(sp.len), static_cast<size_t>(cfg.dim)}, rng));
    return sp;
}

// Keys are truncated-normal then l2-normalized; prompt tokens truncated-normal.
inline GroupPromptPool init_pool(const ModelConfig& cfg, Rng rng) {
    GroupPromptPool pool;
    pool.split_depth = cfg.split_depth;
    pool.prompt_len = cfg.pool_prompt_len;
    int tail = cfg.layers - cfg.split_depth;
    for (int i = 0; i < cfg.pool_size; ++i) {
        Tensor key = trunc_normal_tensor({static_cast<size_t>(cfg.dim)}, rng);
        pool.keys.push_back(l2_normalize(key));
        std::vector<Tensor> layers;
        if (pool.prompt_len > 0)
            for (int t = 0; t < tail; ++t)
                layers.push_back(trunc_normal_tensor(
                    {static_cast<size_t>(pool.prompt_len), static_cast<size_t>(cfg.dim)}, rng));
        pool.prompts.push_back(std::move(layers));
    }
    return pool;
}

inline CosineClassifier init_classifier(const ModelConfig& cfg, Rng rng) {
    return CosineClassifier{trunc_normal_tensor(
        {static_cast<size_t>(cfg.classes), static_cast<size_t>(cfg.dim)}, rng)};
}

inline LinearHead init_head(const ModelConfig& cfg, Rng rng) {
    LinearHead h;
    h.w = trunc_normal_tensor({static_cast<size_t>(cfg.dim), static_cast<size_t>(cfg.classes)}, rng);
    h.b = Tensor::zeros({static_cast<size_t>(cfg.classes)});
    return h;
}

// ---------------------------------------------------------------------------
// Parameter enumeration
// ---------------------------------------------------------------------------

struct TrainMask {
    bool backbone = false;
    bool head = false;
    bool shared_prompt = false;
    bool pool = false;
    bool classifier = false;

    static TrainMask all() { return {true, true, true, true, true}; }
    static TrainMask pretrain() { return {true, true, false, false, false}; }
    static TrainMask phase1() { return {false, false, true, false, true}; }
    static TrainMask phase2() { return {false, false, false, true, true}; }
};

inline std::vector<ParamRef> params_of(ModelState& m, const TrainMask& mask) {
    std::vector<ParamRef> out;
    auto push = [&out](const std::string& name, Tensor& t, bool decay) {
        out.push_back(ParamRef{name, &t, decay});
    };
    if (mask.backbone) {
        push("vit.patch_w", m.vit.patch_w, true);
        push("vit.patch_b", m.vit.patch_b, false);
        push("vit.cls", m.vit.cls_token, false);
        push("vit.pos", m.vit.pos_emb, false);
        for (size_t i = 0; i < m.vit.blocks.size(); ++i) {
            BlockParams& b = m.vit.blocks[i];
            std::string p = "vit.b" + std::to_string(i) + ".";
            push(p + "ln1_g", b.ln1_g, false);
            push(p + "ln1_b", b.ln1_b, false);
            push(p + "wq", b.wq, true);
            push(p + "wk", b.wk, true);
            push(p + "wv", b.wv, true);
            push(p + "wo", b.wo, true);
            push(p + "ln2_g", b.ln2_g, false);
            push(p + "ln2_b", b.ln2_b, false);
            push(p + "fc1_w", b.fc1_w, true);
            push(p + "fc1_b", b.fc1_b, false);
            push(p + "fc2_w", b.fc2_w, true);
            push(p + "fc2_b", b.fc2_b, false);
        }
    }
    if (mask.head && m.head) {
        push("head.w", m.head->w, true);
        push("head.b", m.head->b, false);
    }
    if (mask.shared_prompt && m.shared.len > 0)
        for (size_t i = 0; i < m.shared.layers.size(); ++i)
            push("shared.u" + std::to_string(i), m.shared.layers[i], false);
    if (mask.pool && m.pool) {
        for (size_t i = 0; i < m.pool->keys.size(); ++i)
            push("pool.k" + std::to_string(i), m.pool->keys[i], false);
        for (size_t i = 0; i < m.pool->prompts.size(); ++i)
            for (size_t t = 0; t < m.pool->prompts[i].size(); ++t)
                push("pool.r" + std::to_string(i) + ".l" + std::to_string(t),
                     m.pool->prompts[i][t], false);
    }
    if (mask.classifier) push("clf.w", m.clf.weight, true);
    return out;
}

inline std::vector<ParamRef> params_all(ModelState& m) { return params_of(m, TrainMask::all()); }

// Replaces masked parameters in-place with tape-watched handles; returns the
// refs so the caller can pull gradients after backward.
inline std::vector<ParamRef> bind_to_tape(ModelState& m, const TrainMask& mask, Tape& tape) {
    auto refs = params_of(m, mask);
    for (auto& r : refs) *r.slot = tape.watch(*r.slot);
    return refs;
}

// Trainable-parameter accounting (prompts and pool; classifier separately).
struct ParamCounts {
    long long shared = 0;
    long long pool = 0;
    long long classifier = 0;
    long long prompt_total() const { return shared + pool; }
};

inline ParamCounts count_trainable_params(int layers, int prompt_len, int dim, int split_depth,
                                          int pool_size, int classes) {
    ParamCounts c;
    c.shared = 1LL * layers * prompt_len * dim;
    c.pool = 1LL * pool_size * (1LL * (layers - split_depth) * prompt_len * dim + dim);
    c.classifier = 1LL * classes * dim;
    return c;
}

inline ParamCounts count_trainable_params(const ModelConfig& cfg) {
    return count_trainable_params(cfg.layers, cfg.prompt_len, cfg.dim, cfg.split_depth,
                                  cfg.pool_size, cfg.classes);
}

// ---------------------------------------------------------------------------
// Forward pathways
// ---------------------------------------------------------------------------

// Non-overlapping patches flattened (row, col, channel), projected, plus
// positional embeddings. Returns the N x d patch token matrix.
inline Tensor patch_embed(const Tensor& image, const ModelState& m) {
    const ModelConfig& cfg = m.cfg;
    if (image.rank() != 3 || image.size(2) != 3)
        throw ShapeError("patch_embed: expected HxWx3 image, got " + shape_str(image.shape()));
    size_t side = image.size(0);
    if (image.size(1) != side || side != static_cast<size_t>(cfg.image_side) ||
        side % static_cast<size_t>(cfg.patch) != 0)
        throw ShapeError("patch_embed: image " + shape_str(image.shape()) +
                         " does not match config side " + std::to_string(cfg.image_side) +
                         " / patch " + std::to_string(cfg.patch));
    size_t ps = static_cast<size_t>(cfg.patch);
    size_t grid = side / ps;
    size_t pd = static_cast<size_t>(cfg.patch_dim());
    std::vector<real> flat(grid * grid * pd);
    size_t w = image.size(1);
    for (size_t py = 0; py < grid; ++py)
        for (size_t px = 0; px < grid; ++px) {
            size_t row = py * grid + px;
            size_t o = 0;
            for (size_t dy = 0; dy < ps; ++dy)
                for (size_t dx = 0; dx < ps; ++dx)
                    for (size_t ch = 0; ch < 3; ++ch)
                        flat[row * pd + o++] = image.at(((py * ps + dy) * w + (px * ps + dx)) * 3 + ch);
        }
    Tensor patches = Tensor::from({grid * grid, pd}, std::move(flat));
    return add(linear(patches, m.vit.patch_w, m.vit.patch_b), m.vit.pos_emb);
}

namespace detail {
// Counts block executions on this thread; analysis code uses it to verify
// the cached-pathway cost accounting.
inline thread_local long block_invocations = 0;
}  // namespace detail

// One pre-norm block. `tokens` is the (N+1) x d query stream; `kv_extras`
// holds 0, p or 2p prompt tokens appended to the key/value streams only.
inline Tensor block_forward(const Tensor& tokens, const std::vector<Tensor>& kv_extras,
                            const BlockParams& blk, int heads) {
    ++detail::block_invocations;
    size_t d = tokens.size(1);
    for (const Tensor& e : kv_extras)
        if (e.rank() != 2 || e.size(1) != d)
            throw ShapeError("block_forward: prompt width " + shape_str(e.shape()) +
                             " does not match token width " + std::to_string(d));
    Tensor h = layer_norm(tokens, blk.ln1_g, blk.ln1_b);
    Tensor kv = h;
    if (!kv_extras.empty()) {
        std::vector<Tensor> parts{h};
        parts.insert(parts.end(), kv_extras.begin(), kv_extras.end());
        kv = concat_tokens(parts);
    }
    Tensor q = matmul(h, blk.wq);
    Tensor k = matmul(kv, blk.wk);
    Tensor v = matmul(kv, blk.wv);
    size_t dh = d / static_cast<size_t>(heads);
    real att_scale = real(1) / std::sqrt(static_cast<real>(dh));
    Tensor attn = matmul(multihead_attention(q, k, v, heads, att_scale), blk.wo);
    Tensor x = add(tokens, attn);
    Tensor h2 = layer_norm(x, blk.ln2_g, blk.ln2_b);
    Tensor f = gelu(linear(h2, blk.fc1_w, blk.fc1_b));
    f = linear(f, blk.fc2_w, blk.fc2_b);
    return add(x, f);
}

namespace detail {

// Prompt tokens for block index `i` (0-based): shared prompt plus, for the
// tail blocks, the ensembled group prompt layer.
inline std::vector<Tensor> prompts_for_block(const ModelState& m, int i,
                                             const std::vector<Tensor>* group_layers) {
    std::vector<Tensor> extras;
    if (m.shared.len > 0) extras.push_back(m.shared.layers[i]);
    if (group_layers && !group_layers->empty()) {
        int t = i - m.cfg.split_depth;
        extras.push_back((*group_layers)[t]);
    }
    return extras;
}

inline Tensor run_blocks(const ModelState& m, Tensor tokens, int lo, int hi,
                         const std::vector<Tensor>* group_layers) {
    for (int i = lo; i < hi; ++i)
        tokens = block_forward(tokens, prompts_for_block(m, i, group_layers), m.vit.blocks[i],
                               m.cfg.heads);
    return tokens;
}

}  // namespace detail

// Initial token stream [cls; z0].
inline Tensor embed_tokens(const ModelState& m, const Tensor& image) {
    return concat_tokens(m.vit.cls_token, patch_embed(image, m));
}

// s_i = <c/||c||, W_i/||W_i||>, returned as a length-C tensor.
inline Tensor cosine_scores(const Tensor& cls_row, const Tensor& clf_weight) {
    Tensor c = cls_row.rank() == 1 ? reshape(cls_row, {1, cls_row.size(0)}) : cls_row;
    Tensor s = matmul_nt(l2_normalize(c), l2_normalize(clf_weight));
    return reshape(s, {clf_weight.size(0)});
}

// The (class token, patch tokens) pair cached at the split depth.
struct ActivationCache {
    Tensor cls;      // 1 x d, detached
    Tensor patches;  // N x d, detached
    int layer = 0;   // block count already applied (== split_depth)
};

struct Phase1Out {
    Tensor scores;          // C, on tape when prompt/classifier are tracked
    Tensor query;           // d, detached (the pool query c_L)
    Tensor cls_final;       // 1 x d, detached (feature export)
    ActivationCache cache;  // state after block K, detached
};

// Runs all L blocks with the shared prompt, capturing the cache after block
// K and the query c_L. The caller controls differentiation by binding the
// wanted parameters to a tape before the call.
inline Phase1Out forward_phase1(const ModelState& m, const Tensor& image) {
    int L = m.cfg.layers, K = m.cfg.split_depth;
    Tensor tokens = embed_tokens(m, image);
    tokens = detail::run_blocks(m, tokens, 0, K, nullptr);
    Phase1Out out;
    size_t n_tok = tokens.size(0);
    out.cache.cls = slice_tokens(tokens, 0, 1).detached();
    out.cache.patches = slice_tokens(tokens, 1, n_tok).detached();
    out.cache.layer = K;
    tokens = detail::run_blocks(m, tokens, K, L, nullptr);
    Tensor cls = slice_tokens(tokens, 0, 1);
    out.cls_final = cls.detached();
    out.query = reshape(cls, {cls.size(1)}).detached();
    out.scores = cosine_scores(cls, m.clf.weight);
    return out;
}

struct MatchResult {
    std::vector<int> indices;       // k distinct pool indices, best first
    std::vector<real> similarities; // cosine similarities, non-increasing
};

// Indices of the k largest cosine similarities <q, key_i>; ties broken by
// lower index. The query is treated as a constant.
inline MatchResult match_prompts(const Tensor& q, const GroupPromptPool& pool, int k) {
    int m = static_cast<int>(pool.keys.size());
    if (k < 1 || k > m)
        throw ConfigError("match_prompts: k=" + std::to_string(k) + " outside [1, " +
                          std::to_string(m) + "]");
    Tensor qn = l2_normalize(q.detached());
    std::vector<std::pair<real, int>> sims(m);
    for (int i = 0; i < m; ++i) {
        Tensor kn = l2_normalize(pool.keys[i].detached());
        real s = 0;
        for (size_t j = 0; j < qn.numel(); ++j) s += qn.at(j) * kn.at(j);
        sims[i] = {s, i};
    }
    std::stable_sort(sims.begin(), sims.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
    });
    MatchResult r;
    for (int i = 0; i < k; ++i) {
        r.indices.push_back(sims[i].second);
        r.similarities.push_back(sims[i].first);
    }
    return r;
}

// Elementwise mean of the selected group prompts, one tensor per tail layer.
// Gradients flow 1/k into each selected prompt and into no other.
inline std::vector<Tensor> ensemble_prompts(const GroupPromptPool& pool,
                                            const std::vector<int>& w) {
    if (w.empty()) throw ConfigError("ensemble_prompts: empty index list");
    for (int i : w)
        if (i < 0 || i >= static_cast<int>(pool.prompts.size()))
            throw ConfigError("ensemble_prompts: index " + std::to_string(i) + " out of range");
    if (pool.prompt_len == 0) return {};
    size_t tail = pool.prompts[w[0]].size();
    std::vector<Tensor> out;
    real inv = real(1) / static_cast<real>(w.size());
    for (size_t t = 0; t < tail; ++t) {
        Tensor acc = pool.prompts[w[0]][t];
        for (size_t j = 1; j < w.size(); ++j) acc = add(acc, pool.prompts[w[j]][t]);
        out.push_back(scale(acc, inv));
    }
    return out;
}

// On-tape cosine similarity between a constant query and a (possibly
// tracked) key; this is the only path through which keys receive gradients.
inline Tensor key_similarity(const Tensor& q, const Tensor& key) {
    return dot(l2_normalize(q.detached()), l2_normalize(key));
}

// Runs blocks K+1..L from the cached activations with key/value streams
// [c, z, u_i, r_{i-K}]. The cache must have been produced under the same
// shared prompt and backbone.
inline Tensor forward_phase2(const ModelState& m, const ActivationCache& cache,
                             const std::vector<Tensor>& group_layers) {
    int L = m.cfg.layers, K = m.cfg.split_depth;
    if (cache.layer != K)
        throw ConfigError("forward_phase2: cache captured at layer " + std::to_string(cache.layer) +
                          " but split depth is " + std::to_string(K));
    Tensor tokens = concat_tokens(cache.cls, cache.patches);
    tokens = detail::run_blocks(m, tokens, K, L, group_layers.empty() ? nullptr : &group_layers);
    Tensor cls = slice_tokens(tokens, 0, 1);
    return cosine_scores(cls, m.clf.weight);
}

// Full recompute pathway: embeds the image, runs the first K blocks shared-
// only and the tail with group prompts. Matches the cached pathway bit for
// bit because both execute the same block code on the same values.
inline Tensor forward_phase2_from_image(const ModelState& m, const Tensor& image,
                                        const std::vector<Tensor>& group_layers) {
    int K = m.cfg.split_depth;
    Tensor tokens = embed_tokens(m, image);
    tokens = detail::run_blocks(m, tokens, 0, K, nullptr);
    ActivationCache cache;
    size_t n_tok = tokens.size(0);
    cache.cls = slice_tokens(tokens, 0, 1).detached();
    cache.patches = slice_tokens(tokens, 1, n_tok).detached();
    cache.layer = K;
    return forward_phase2(m, cache, group_layers);
}

}  // namespace lpt
