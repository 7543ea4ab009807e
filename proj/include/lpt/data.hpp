#pragma once

// Synthetic long-tailed data generation, CIFAR-style binary ingestion,
// exponential down-sampling, the instance / class-balanced / dual samplers,
// mixup and shot-split bookkeeping.
//
// Pixels are quantized to 8-bit levels (k/255) at generation time so that
// in-memory datasets and their on-disk binary form carry identical values.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "lpt/common.hpp"
#include "lpt/loss.hpp"
#include "lpt/rng.hpp"
#include "lpt/tensor.hpp"

namespace lpt {

struct LongTailDataset {
    int height = 0, width = 0, classes = 0;
    std::vector<std::vector<real>> images;  // each H*W*3, row-major (y, x, channel)
    std::vector<int> labels;
    std::string split;       // train / val / test tag
    std::string provenance;  // synth descriptor or source digest

    size_t size() const { return images.size(); }

    std::vector<long long> class_counts() const {
        std::vector<long long> c(classes, 0);
        for (int l : labels) ++c[l];
        return c;
    }
    ClassCounts counts() const { return ClassCounts::from(class_counts()); }

    Tensor image_tensor(size_t i) const {
        return Tensor::from({static_cast<size_t>(height), static_cast<size_t>(width), 3},
                            images[i]);
    }
};

namespace detail {
inline real quantize_pixel(real v) {
    v = std::min(real(1), std::max(real(0), v));
    return static_cast<real>(std::llround(static_cast<double>(v) * 255.0)) / real(255);
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Synthetic generation
// ---------------------------------------------------------------------------

// Class-conditional procedural images: each (class, domain) pair owns a
// two-grating signature (frequency, orientation, per-channel phase/gain);
// samples of a class differ only through `jitter` perturbations of that
// signature and additive `noise`. The domain tag shifts frequencies, gains
// and orientation so two domains are distribution-shifted but share the
// rendering family.
inline LongTailDataset synth_generate(int classes, int per_class, int image_side, uint64_t seed,
                                      const std::string& domain_tag, real jitter = real(1),
                                      real noise = real(0.02)) {
    if (classes < 2) throw ConfigError("synth_generate: need at least 2 classes");
    LongTailDataset ds;
    ds.height = ds.width = image_side;
    ds.classes = classes;
    ds.split = "synth";
    ds.provenance = "synth:" + domain_tag + ":seed=" + std::to_string(seed);
    Rng domain_rng = Rng(fnv1a64(domain_tag)).derive("domain");
    double freq_off = 1.2 * domain_rng.uniform();
    double theta_off = 0.9 * domain_rng.uniform();
    double gain[3], phase_sep[3];
    for (int ch = 0; ch < 3; ++ch) {
        gain[ch] = 0.55 + 0.55 * domain_rng.uniform();
        phase_sep[ch] = 2.2 * domain_rng.uniform();
    }
    const double two_pi = 6.283185307179586;
    for (int c = 0; c < classes; ++c) {
        Rng sig = Rng(fnv1a64(domain_tag)).derive("sig", static_cast<uint64_t>(c));
        double theta1 = sig.uniform() * 3.14159265358979 + theta_off;
        double freq1 = 1.5 + 3.0 * sig.uniform() + freq_off;
        double phase1 = two_pi * sig.uniform();
        double theta2 = sig.uniform() * 3.14159265358979 + theta_off;
        double freq2 = 2.0 + 4.0 * sig.uniform() + freq_off;
        double phase2 = two_pi * sig.uniform();
        double amp2 = 0.45 * sig.uniform();
        for (int idx = 0; idx < per_class; ++idx) {
            Rng sr = Rng(seed).derive("sample", static_cast<uint64_t>(c),
                                      static_cast<uint64_t>(idx));
            double jt = jitter * 0.10 * (2 * sr.uniform() - 1);
            double jf = jitter * 0.25 * (2 * sr.uniform() - 1);
            double jp = jitter * 0.50 * (2 * sr.uniform() - 1);
            double ja = 1.0 + jitter * 0.25 * (2 * sr.uniform() - 1);
            std::vector<real> img(static_cast<size_t>(image_side) * image_side * 3);
            for (int y = 0; y < image_side; ++y)
                for (int x = 0; x < image_side; ++x) {
                    double u = static_cast<double>(x) / image_side;
                    double v = static_cast<double>(y) / image_side;
                    double r1 = u * std::cos(theta1 + jt) + v * std::sin(theta1 + jt);
                    double r2 = u * std::cos(theta2 + jt) + v * std::sin(theta2 + jt);
                    for (int ch = 0; ch < 3; ++ch) {
                        double w1 = std::sin(two_pi * (freq1 + jf) * r1 + phase1 + jp +
                                             phase_sep[ch]);
                        double w2 = amp2 * std::sin(two_pi * (freq2 + jf) * r2 + phase2 + jp);
                        double val = 0.5 + 0.42 * ja * gain[ch] * (w1 + w2);
                        if (noise > real(0)) val += noise * sr.normal();
                        img[(static_cast<size_t>(y) * image_side + x) * 3 + ch] =
                            detail::quantize_pixel(static_cast<real>(val));
                    }
                }
            ds.images.push_back(std::move(img));
            ds.labels.push_back(c);
        }
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Exponential down-sampling
// ---------------------------------------------------------------------------

// Per-class targets for imbalance ratio tau: n_i = round(n_max *
// tau^(-(i-1)/(C-1))) with the last class forced to max(1, round(n_max/tau)).
inline std::vector<long long> longtail_profile(int classes, long long n_max, double tau) {
    if (tau < 1.0) throw ConfigError("longtail_profile: tau must be >= 1");
    std::vector<long long> n(classes);
    for (int i = 0; i < classes; ++i)
        n[i] = std::llround(static_cast<double>(n_max) *
                            std::pow(tau, -static_cast<double>(i) / (classes - 1)));
    n[classes - 1] = std::max<long long>(1, std::llround(static_cast<double>(n_max) / tau));
    return n;
}

// Draws the long-tailed split out of a balanced per-class pool, without
// replacement, seeded.
inline LongTailDataset make_longtailed(const LongTailDataset& pool, long long n_max, double tau,
                                       uint64_t seed) {
    auto targets = longtail_profile(pool.classes, n_max, tau);
    std::vector<std::vector<int>> by_class(pool.classes);
    for (size_t i = 0; i < pool.size(); ++i) by_class[pool.labels[i]].push_back(static_cast<int>(i));
    LongTailDataset out;
    out.height = pool.height;
    out.width = pool.width;
    out.classes = pool.classes;
    out.split = "train";
    out.provenance = pool.provenance + ":lt(tau=" + std::to_string(tau) + ")";
    for (int c = 0; c < pool.classes; ++c) {
        if (static_cast<long long>(by_class[c].size()) < targets[c])
            throw ConfigError("make_longtailed: class " + std::to_string(c) + " has only " +
                              std::to_string(by_class[c].size()) + " pool samples, needs " +
                              std::to_string(targets[c]));
        Rng rng = Rng(seed).derive("longtail", static_cast<uint64_t>(c));
        std::vector<int> idx = by_class[c];
        rng.shuffle(idx);
        for (long long j = 0; j < targets[c]; ++j) {
            out.images.push_back(pool.images[idx[j]]);
            out.labels.push_back(c);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Binary dataset format: per record, 1 label byte then R/G/B planes
// (H*W bytes each, row-major); bytes scale to [0,1] as k/255.
// ---------------------------------------------------------------------------

inline LongTailDataset load_binary_dataset(const std::string& path, int height, int width,
                                           int classes) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("load_binary_dataset: cannot open " + path);
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                     std::istreambuf_iterator<char>());
    size_t record = 1 + 3 * static_cast<size_t>(height) * width;
    if (bytes.size() % record != 0)
        throw IoError("load_binary_dataset: " + path + " has " + std::to_string(bytes.size()) +
                      " bytes, not a multiple of record size " + std::to_string(record) +
                      " (final record truncated at index " + std::to_string(bytes.size() / record) +
                      ")");
    LongTailDataset ds;
    ds.height = height;
    ds.width = width;
    ds.classes = classes;
    ds.provenance = path;
    size_t plane = static_cast<size_t>(height) * width;
    for (size_t r = 0; r * record < bytes.size(); ++r) {
        const unsigned char* p = bytes.data() + r * record;
        int label = p[0];
        if (label >= classes)
            throw IoError("load_binary_dataset: label " + std::to_string(label) + " >= " +
                          std::to_string(classes) + " at record " + std::to_string(r));
        std::vector<real> img(plane * 3);
        for (int ch = 0; ch < 3; ++ch)
            for (size_t i = 0; i < plane; ++i)
                img[i * 3 + ch] = static_cast<real>(p[1 + ch * plane + i]) / real(255);
        ds.images.push_back(std::move(img));
        ds.labels.push_back(label);
    }
    return ds;
}

inline void save_binary_dataset(const LongTailDataset& ds, const std::string& path) {
    std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("save_binary_dataset: cannot open " + tmp);
        size_t plane = static_cast<size_t>(ds.height) * ds.width;
        std::vector<unsigned char> rec(1 + 3 * plane);
        for (size_t r = 0; r < ds.size(); ++r) {
            rec[0] = static_cast<unsigned char>(ds.labels[r]);
            for (int ch = 0; ch < 3; ++ch)
                for (size_t i = 0; i < plane; ++i) {
                    double v = static_cast<double>(ds.images[r][i * 3 + ch]);
                    long k = std::lround(std::min(1.0, std::max(0.0, v)) * 255.0);
                    rec[1 + ch * plane + i] = static_cast<unsigned char>(k);
                }
            out.write(reinterpret_cast<const char*>(rec.data()), rec.size());
        }
        if (!out) throw IoError("save_binary_dataset: write failed for " + tmp);
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0)
        throw IoError("save_binary_dataset: rename to " + path + " failed");
}

// Manifest sidecar: one line per class, `class_id<TAB>count<TAB>name`.
inline void write_manifest(const LongTailDataset& ds, const std::string& path) {
    std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::trunc);
        if (!out) throw IoError("write_manifest: cannot open " + tmp);
        auto counts = ds.class_counts();
        for (int c = 0; c < ds.classes; ++c)
            out << c << '\t' << counts[c] << '\t' << "class_" << c << '\n';
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0)
        throw IoError("write_manifest: rename to " + path + " failed");
}

// ---------------------------------------------------------------------------
// Batches and samplers
// ---------------------------------------------------------------------------

struct Batch {
    std::vector<int> indices;
    std::vector<int> labels;
    std::vector<std::vector<real>> images;
    BatchKind kind = BatchKind::Instance;
    std::vector<int> partner_labels;  // mixup partners; empty when unmixed
    real lam = real(1);

    size_t size() const { return indices.size(); }
};

namespace detail {
inline Batch gather(const LongTailDataset& ds, std::vector<int> idx, BatchKind kind) {
    Batch b;
    b.kind = kind;
    b.indices = std::move(idx);
    for (int i : b.indices) {
        b.labels.push_back(ds.labels[i]);
        b.images.push_back(ds.images[i]);
    }
    return b;
}
}  // namespace detail

// Epoch-scoped instance sampler: a seeded permutation consumed in order, so
// every sample is visited exactly once per epoch (last batch may be short).
class InstanceSampler {
  public:
    InstanceSampler(const LongTailDataset& ds, uint64_t seed, int batch)
        : ds_(&ds), batch_(batch) {
        if (ds.size() == 0) throw ConfigError("InstanceSampler: empty dataset");
        if (batch < 1) throw ConfigError("InstanceSampler: batch must be >= 1");
        perm_.resize(ds.size());
        for (size_t i = 0; i < perm_.size(); ++i) perm_[i] = static_cast<int>(i);
        Rng rng = Rng(seed).derive("instance-perm");
        rng.shuffle(perm_);
    }

    int batches_per_epoch() const {
        return static_cast<int>((perm_.size() + batch_ - 1) / batch_);
    }

    Batch batch_at(int iter) const {
        size_t lo = static_cast<size_t>(iter) * batch_;
        size_t hi = std::min(perm_.size(), lo + batch_);
        if (lo >= hi) throw ConfigError("InstanceSampler: iteration out of range");
        return detail::gather(*ds_, std::vector<int>(perm_.begin() + lo, perm_.begin() + hi),
                              BatchKind::Instance);
    }

  private:
    const LongTailDataset* ds_;
    size_t batch_;
    std::vector<int> perm_;
};

// Uniform class draw, then a per-class cycling permutation (reshuffled once
// a class is exhausted, which re-admits earlier samples).
class ClassBalancedSampler {
  public:
    ClassBalancedSampler(const LongTailDataset& ds, uint64_t seed, int batch)
        : ds_(&ds), batch_(batch), rng_(Rng(seed).derive("class-balanced")) {
        if (ds.size() == 0) throw ConfigError("ClassBalancedSampler: empty dataset");
        if (batch < 1) throw ConfigError("ClassBalancedSampler: batch must be >= 1");
        by_class_.resize(ds.classes);
        for (size_t i = 0; i < ds.size(); ++i)
            by_class_[ds.labels[i]].push_back(static_cast<int>(i));
        nonempty_.clear();
        for (int c = 0; c < ds.classes; ++c)
            if (!by_class_[c].empty()) nonempty_.push_back(c);
        cursors_.assign(ds.classes, 0);
        order_ = by_class_;
        for (int c : nonempty_) {
            Rng sh = rng_.derive("shuffle", static_cast<uint64_t>(c), 0);
            sh.shuffle(order_[c]);
        }
        epoch_uses_.assign(ds.classes, 1);
    }

    Batch next() {
        std::vector<int> idx;
        idx.reserve(batch_);
        for (size_t j = 0; j < batch_; ++j) {
            int c = nonempty_[rng_.below(nonempty_.size())];
            if (cursors_[c] == order_[c].size()) {
                Rng sh = rng_.derive("shuffle", static_cast<uint64_t>(c),
                                     static_cast<uint64_t>(epoch_uses_[c]++));
                sh.shuffle(order_[c]);
                cursors_[c] = 0;
            }
            idx.push_back(order_[c][cursors_[c]++]);
        }
        return detail::gather(*ds_, std::move(idx), BatchKind::Balanced);
    }

  private:
    const LongTailDataset* ds_;
    size_t batch_;
    Rng rng_;
    std::vector<std::vector<int>> by_class_;
    std::vector<std::vector<int>> order_;
    std::vector<size_t> cursors_;
    std::vector<int> nonempty_;
    std::vector<int> epoch_uses_;
};

// One batch draw in the requested mode from a caller-supplied stream.
inline Batch sampler_next(BatchKind mode, const LongTailDataset& ds, Rng& rng, int batch) {
    if (ds.size() == 0) throw ConfigError("sampler_next: empty dataset");
    if (batch < 1) throw ConfigError("sampler_next: batch must be >= 1");
    std::vector<int> idx;
    if (mode == BatchKind::Instance) {
        for (int j = 0; j < batch; ++j) idx.push_back(static_cast<int>(rng.below(ds.size())));
    } else {
        std::vector<std::vector<int>> by_class(ds.classes);
        for (size_t i = 0; i < ds.size(); ++i)
            by_class[ds.labels[i]].push_back(static_cast<int>(i));
        std::vector<int> nonempty;
        for (int c = 0; c < ds.classes; ++c)
            if (!by_class[c].empty()) nonempty.push_back(c);
        for (int j = 0; j < batch; ++j) {
            int c = nonempty[rng.below(nonempty.size())];
            idx.push_back(by_class[c][rng.below(by_class[c].size())]);
        }
    }
    return detail::gather(ds, std::move(idx), mode);
}

// One class-balanced and one instance batch per iteration, on independent
// derived streams; the instance stream defines the epoch.
class DualSampler {
  public:
    DualSampler(const LongTailDataset& ds, uint64_t seed, int batch)
        : instance_(ds, Rng(seed).derive("ins").state(), batch),
          balanced_(ds, Rng(seed).derive("bal").state(), batch) {}

    int batches_per_epoch() const { return instance_.batches_per_epoch(); }

    std::pair<Batch, Batch> next(int iter) {
        return {balanced_.next(), instance_.batch_at(iter)};
    }

  private:
    InstanceSampler instance_;
    ClassBalancedSampler balanced_;
};

// ---------------------------------------------------------------------------
// Augmentation and mixup
// ---------------------------------------------------------------------------

// Desk-scale stand-in for random crop + resize: zero-pad by 4 then crop back
// to the original side.
inline void random_crop_pad4(std::vector<real>& img, int height, int width, Rng& rng) {
    const int pad = 4;
    int oy = static_cast<int>(rng.below(2 * pad + 1)) - pad;
    int ox = static_cast<int>(rng.below(2 * pad + 1)) - pad;
    std::vector<real> out(img.size(), real(0));
    for (int y = 0; y < height; ++y) {
        int sy = y + oy;
        if (sy < 0 || sy >= height) continue;
        for (int x = 0; x < width; ++x) {
            int sx = x + ox;
            if (sx < 0 || sx >= width) continue;
            for (int ch = 0; ch < 3; ++ch)
                out[(static_cast<size_t>(y) * width + x) * 3 + ch] =
                    img[(static_cast<size_t>(sy) * width + sx) * 3 + ch];
        }
    }
    img = std::move(out);
}

inline void augment_batch(Batch& b, int height, int width, Rng rng) {
    for (size_t i = 0; i < b.images.size(); ++i) {
        Rng r = rng.derive("crop", static_cast<uint64_t>(i));
        random_crop_pad4(b.images[i], height, width, r);
    }
}

// lam ~ Beta(alpha, alpha); images pairwise mixed over a shuffled pairing;
// the loss later combines lam*L(.,y_a) + (1-lam)*L(.,y_b).
inline void mixup(Batch& b, real mix_alpha, Rng rng) {
    if (b.size() < 2) return;
    real lam = static_cast<real>(rng.beta(static_cast<double>(mix_alpha),
                                          static_cast<double>(mix_alpha)));
    std::vector<int> pairing(b.size());
    for (size_t i = 0; i < pairing.size(); ++i) pairing[i] = static_cast<int>(i);
    rng.shuffle(pairing);
    std::vector<std::vector<real>> mixed = b.images;
    b.partner_labels.resize(b.size());
    for (size_t i = 0; i < b.size(); ++i) {
        const std::vector<real>& other = b.images[pairing[i]];
        for (size_t j = 0; j < mixed[i].size(); ++j)
            mixed[i][j] = lam * b.images[i][j] + (real(1) - lam) * other[j];
        b.partner_labels[i] = b.labels[pairing[i]];
    }
    b.images = std::move(mixed);
    b.lam = lam;
}

// ---------------------------------------------------------------------------
// Shot split
// ---------------------------------------------------------------------------

enum class ShotBucket { Many, Medium, Few };

struct ShotSplit {
    std::vector<ShotBucket> per_class;
    long long many_over = 100;  // many: n > many_over
    long long few_under = 20;   // few:  n < few_under

    std::string convention() const {
        return "many:n>" + std::to_string(many_over) + " medium:" + std::to_string(few_under) +
               "<=n<=" + std::to_string(many_over) + " few:n<" + std::to_string(few_under);
    }
};

// Boundary convention: many n > hi, medium lo <= n <= hi, few n < lo.
inline ShotSplit shot_split(const std::vector<long long>& counts, long long hi = 100,
                            long long lo = 20) {
    if (hi < lo) throw ConfigError("shot_split: thresholds must be descending");
    ShotSplit s;
    s.many_over = hi;
    s.few_under = lo;
    for (long long n : counts) {
        if (n > hi)
            s.per_class.push_back(ShotBucket::Many);
        else if (n < lo)
            s.per_class.push_back(ShotBucket::Few);
        else
            s.per_class.push_back(ShotBucket::Medium);
    }
    return s;
}

// Paper thresholds (100, 20) when the head class is large enough for them
// to be meaningful, otherwise scaled desk thresholds (n_max/5, n_max/25).
inline std::pair<long long, long long> default_shot_thresholds(long long n_max) {
    if (n_max < 200) return {n_max / 5, n_max / 25};
    return {100, 20};
}

}  // namespace lpt
