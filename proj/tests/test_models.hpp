#pragma once

// Model fixtures plus a from-scratch forward oracle used to cross-check the
// library's block pipeline. The oracle is plain nested loops over doubles
// and never calls into the tensor engine.

#include <cmath>
#include <vector>

#include "lpt/rng.hpp"
#include "lpt/vit.hpp"

namespace lpt::test {

inline ModelConfig micro_config() {
    ModelConfig cfg;
    cfg.layers = 2;
    cfg.dim = 16;
    cfg.heads = 2;
    cfg.patch = 4;
    cfg.image_side = 8;  // N = 4
    cfg.classes = 3;
    cfg.prompt_len = 2;
    cfg.pool_size = 3;
    cfg.split_depth = 1;
    cfg.pool_prompt_len = 2;
    cfg.ensemble_k = 2;
    return cfg;
}

inline ModelState make_model(const ModelConfig& cfg, uint64_t seed, bool with_pool = true,
                             bool with_head = false) {
    Rng rng(seed);
    ModelState m;
    m.cfg = cfg;
    m.vit = init_vit(cfg, rng.derive("vit"));
    m.shared = init_shared_prompt(cfg, rng.derive("shared"));
    if (with_pool) m.pool = init_pool(cfg, rng.derive("pool"));
    m.clf = init_classifier(cfg, rng.derive("clf"));
    if (with_head) m.head = init_head(cfg, rng.derive("head"));
    return m;
}

inline Tensor random_image(const ModelConfig& cfg, Rng& rng) {
    size_t s = static_cast<size_t>(cfg.image_side);
    std::vector<real> v(s * s * 3);
    for (real& x : v) x = static_cast<real>(rng.uniform());
    return Tensor::from({s, s, 3}, std::move(v));
}

// --- naive oracle ----------------------------------------------------------

using Mat = std::vector<std::vector<double>>;

inline Mat to_mat(const Tensor& t) {
    Mat m(t.size(0), std::vector<double>(t.size(1)));
    for (size_t i = 0; i < t.size(0); ++i)
        for (size_t j = 0; j < t.size(1); ++j) m[i][j] = t.at(i * t.size(1) + j);
    return m;
}

inline Mat naive_matmul(const Mat& a, const Mat& b) {
    Mat c(a.size(), std::vector<double>(b[0].size(), 0.0));
    for (size_t i = 0; i < a.size(); ++i)
        for (size_t j = 0; j < b[0].size(); ++j)
            for (size_t k = 0; k < b.size(); ++k) c[i][j] += a[i][k] * b[k][j];
    return c;
}

inline Mat naive_layer_norm(const Mat& x, const std::vector<double>& g,
                            const std::vector<double>& b, double eps = 1e-6) {
    Mat out(x.size());
    for (size_t i = 0; i < x.size(); ++i) {
        double mu = 0;
        for (double v : x[i]) mu += v;
        mu /= x[i].size();
        double var = 0;
        for (double v : x[i]) var += (v - mu) * (v - mu);
        var /= x[i].size();
        out[i].resize(x[i].size());
        for (size_t j = 0; j < x[i].size(); ++j)
            out[i][j] = (x[i][j] - mu) / std::sqrt(var + eps) * g[j] + b[j];
    }
    return out;
}

inline std::vector<double> to_vec(const Tensor& t) {
    return std::vector<double>(t.data().begin(), t.data().end());
}

// Pre-norm block with prompt rows appended to the key/value streams only.
inline Mat naive_block(const Mat& tokens, const std::vector<Mat>& extras, const BlockParams& blk,
                       int heads) {
    size_t d = tokens[0].size();
    Mat h = naive_layer_norm(tokens, to_vec(blk.ln1_g), to_vec(blk.ln1_b));
    Mat kv = h;
    for (const Mat& e : extras) kv.insert(kv.end(), e.begin(), e.end());
    Mat q = naive_matmul(h, to_mat(blk.wq));
    Mat k = naive_matmul(kv, to_mat(blk.wk));
    Mat v = naive_matmul(kv, to_mat(blk.wv));
    size_t dh = d / heads;
    Mat att_out(tokens.size(), std::vector<double>(d, 0.0));
    for (int hd = 0; hd < heads; ++hd) {
        size_t c0 = hd * dh;
        for (size_t i = 0; i < q.size(); ++i) {
            std::vector<double> scores(kv.size());
            double mx = -1e300;
            for (size_t j = 0; j < kv.size(); ++j) {
                double s = 0;
                for (size_t l = 0; l < dh; ++l) s += q[i][c0 + l] * k[j][c0 + l];
                scores[j] = s / std::sqrt(static_cast<double>(dh));
                mx = std::max(mx, scores[j]);
            }
            double z = 0;
            for (double& s : scores) {
                s = std::exp(s - mx);
                z += s;
            }
            for (size_t j = 0; j < kv.size(); ++j)
                for (size_t l = 0; l < dh; ++l)
                    att_out[i][c0 + l] += scores[j] / z * v[j][c0 + l];
        }
    }
    Mat wo = to_mat(blk.wo);
    Mat x = tokens;
    Mat proj = naive_matmul(att_out, wo);
    for (size_t i = 0; i < x.size(); ++i)
        for (size_t j = 0; j < d; ++j) x[i][j] += proj[i][j];
    Mat h2 = naive_layer_norm(x, to_vec(blk.ln2_g), to_vec(blk.ln2_b));
    Mat f = naive_matmul(h2, to_mat(blk.fc1_w));
    auto b1 = to_vec(blk.fc1_b);
    for (auto& row : f)
        for (size_t j = 0; j < row.size(); ++j) {
            double xx = row[j] + b1[j];
            row[j] = 0.5 * xx * (1.0 + std::erf(xx / std::sqrt(2.0)));
        }
    Mat f2 = naive_matmul(f, to_mat(blk.fc2_w));
    auto b2 = to_vec(blk.fc2_b);
    for (size_t i = 0; i < x.size(); ++i)
        for (size_t j = 0; j < d; ++j) x[i][j] += f2[i][j] + b2[j];
    return x;
}

inline std::vector<double> naive_cosine_scores(const std::vector<double>& c, const Mat& w) {
    double nc = 0;
    for (double v : c) nc += v * v;
    nc = std::max(std::sqrt(nc), 1e-12);
    std::vector<double> s(w.size());
    for (size_t i = 0; i < w.size(); ++i) {
        double nw = 0, d = 0;
        for (size_t j = 0; j < c.size(); ++j) {
            nw += w[i][j] * w[i][j];
            d += w[i][j] * c[j];
        }
        s[i] = d / (nc * std::max(std::sqrt(nw), 1e-12));
    }
    return s;
}

// Full phase-1 oracle: patch embed, blocks with shared prompt, cosine head.
inline std::vector<double> naive_phase1_scores(const ModelState& m, const Tensor& image) {
    const ModelConfig& cfg = m.cfg;
    int grid = cfg.image_side / cfg.patch;
    Mat patches(grid * grid, std::vector<double>(cfg.patch_dim()));
    for (int py = 0; py < grid; ++py)
        for (int px = 0; px < grid; ++px) {
            int row = py * grid + px;
            int o = 0;
            for (int dy = 0; dy < cfg.patch; ++dy)
                for (int dx = 0; dx < cfg.patch; ++dx)
                    for (int ch = 0; ch < 3; ++ch)
                        patches[row][o++] =
                            image.at(((py * cfg.patch + dy) * cfg.image_side + px * cfg.patch + dx) *
                                         3 +
                                     ch);
        }
    Mat z = naive_matmul(patches, to_mat(m.vit.patch_w));
    auto pb = to_vec(m.vit.patch_b);
    Mat pos = to_mat(m.vit.pos_emb);
    for (size_t i = 0; i < z.size(); ++i)
        for (size_t j = 0; j < z[i].size(); ++j) z[i][j] += pb[j] + pos[i][j];
    Mat tokens;
    tokens.push_back(to_vec(m.vit.cls_token));
    tokens.insert(tokens.end(), z.begin(), z.end());
    for (int i = 0; i < cfg.layers; ++i) {
        std::vector<Mat> extras;
        if (m.shared.len > 0) extras.push_back(to_mat(m.shared.layers[i]));
        tokens = naive_block(tokens, extras, m.vit.blocks[i], cfg.heads);
    }
    return naive_cosine_scores(tokens[0], to_mat(m.clf.weight));
}

}  // namespace lpt::test
