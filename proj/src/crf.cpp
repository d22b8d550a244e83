#include "fewseg/crf.hpp"

#include <cstring>

namespace fewseg {

// ---- open-addressed hash table over integer lattice keys ----

namespace {

struct KeyTable {
    int key_size = 0;
    std::vector<int> keys;      // capacity * key_size
    std::vector<int> entries;   // capacity, -1 = empty
    int filled = 0;
    size_t capacity = 0;

    KeyTable(int key_size_, size_t expected) : key_size(key_size_) {
        capacity = 16;
        while (capacity < expected * 2) capacity <<= 1;
        keys.assign(capacity * key_size, 0);
        entries.assign(capacity, -1);
    }

    static uint64_t hash(const int* k, int n) {
        uint64_t h = 0xcbf29ce484222325ull;
        for (int i = 0; i < n; ++i) {
            h ^= static_cast<uint64_t>(static_cast<uint32_t>(k[i]));
            h *= 0x100000001b3ull;
        }
        return h;
    }

    // Returns the index of the key, inserting it when absent.
    int find_or_insert(const int* k) {
        size_t slot = hash(k, key_size) & (capacity - 1);
        for (;;) {
            int e = entries[slot];
            if (e == -1) {
                std::memcpy(&keys[slot * key_size], k, key_size * sizeof(int));
                entries[slot] = filled;
                return filled++;
            }
            if (std::memcmp(&keys[slot * key_size], k, key_size * sizeof(int)) == 0) return e;
            slot = (slot + 1) & (capacity - 1);
        }
    }

    // -1 when absent.
    int find(const int* k) const {
        size_t slot = hash(k, key_size) & (capacity - 1);
        for (;;) {
            int e = entries[slot];
            if (e == -1) return -1;
            if (std::memcmp(&keys[slot * key_size], k, key_size * sizeof(int)) == 0) return e;
            slot = (slot + 1) & (capacity - 1);
        }
    }

    const int* key_at(size_t slot) const { return &keys[slot * key_size]; }
};

}  // namespace

void PermutohedralLattice::init(const Eigen::MatrixXd& features) {
    n_ = static_cast<int>(features.rows());
    d_ = static_cast<int>(features.cols());
    if (n_ == 0 || d_ == 0) throw ShapeError("permutohedral: empty features");
    const int dp1 = d_ + 1;

    offsets_.assign(static_cast<size_t>(n_) * dp1, 0);
    barycentric_.assign(static_cast<size_t>(n_) * dp1, 0.0);

    KeyTable table(d_, static_cast<size_t>(n_) * dp1);

    std::vector<double> scale_factor(d_);
    const double inv_std_dev = std::sqrt(2.0 / 3.0) * dp1;
    for (int i = 0; i < d_; ++i)
        scale_factor[i] = inv_std_dev / std::sqrt(static_cast<double>((i + 2) * (i + 1)));

    std::vector<double> elevated(dp1);
    std::vector<double> rem0(dp1);
    std::vector<int> rank(dp1);
    std::vector<double> bary(dp1 + 1);
    std::vector<int> key(d_);

    for (int k = 0; k < n_; ++k) {
        // embed into the hyperplane sum(x) = 0
        double sm = 0.0;
        for (int j = d_; j > 0; --j) {
            const double cf = features(k, j - 1) * scale_factor[j - 1];
            elevated[j] = sm - j * cf;
            sm += cf;
        }
        elevated[0] = sm;

        // nearest 0-colored lattice point
        const double down = 1.0 / dp1;
        int sum = 0;
        for (int i = 0; i <= d_; ++i) {
            const double rd = std::round(down * elevated[i]);
            rem0[i] = rd * dp1;
            sum += static_cast<int>(rd);
            rank[i] = 0;
        }
        for (int i = 0; i < d_; ++i)
            for (int j = i + 1; j <= d_; ++j) {
                if (elevated[i] - rem0[i] < elevated[j] - rem0[j])
                    ++rank[i];
                else
                    ++rank[j];
            }
        for (int i = 0; i <= d_; ++i) {
            rank[i] += sum;
            if (rank[i] < 0) {
                rank[i] += dp1;
                rem0[i] += dp1;
            } else if (rank[i] > d_) {
                rank[i] -= dp1;
                rem0[i] -= dp1;
            }
        }

        // barycentric coordinates from the sorted residuals
        std::fill(bary.begin(), bary.end(), 0.0);
        for (int i = 0; i <= d_; ++i) {
            const double v = down * (elevated[i] - rem0[i]);
            bary[d_ - rank[i]] += v;
            bary[d_ - rank[i] + 1] -= v;
        }
        bary[0] += 1.0 + bary[dp1];

        // splat targets
        for (int remainder = 0; remainder <= d_; ++remainder) {
            for (int i = 0; i < d_; ++i) {
                key[i] = static_cast<int>(rem0[i]) + remainder;
                if (rank[i] > d_ - remainder) key[i] -= dp1;
            }
            offsets_[static_cast<size_t>(k) * dp1 + remainder] = table.find_or_insert(key.data());
            barycentric_[static_cast<size_t>(k) * dp1 + remainder] = bary[remainder];
        }
    }

    lattice_size_ = table.filled;

    // blur neighbors along each lattice direction
    blur_neighbors_.assign(static_cast<size_t>(lattice_size_) * dp1 * 2, -1);
    std::vector<int> stored(static_cast<size_t>(lattice_size_) * d_);
    for (size_t slot = 0; slot < table.capacity; ++slot) {
        const int e = table.entries[slot];
        if (e < 0) continue;
        std::memcpy(&stored[static_cast<size_t>(e) * d_], table.key_at(slot), d_ * sizeof(int));
    }
    std::vector<int> n1(d_), n2(d_);
    for (int e = 0; e < lattice_size_; ++e) {
        const int* k = &stored[static_cast<size_t>(e) * d_];
        for (int j = 0; j <= d_; ++j) {
            for (int i = 0; i < d_; ++i) {
                n1[i] = k[i] - 1;
                n2[i] = k[i] + 1;
            }
            if (j < d_) {
                n1[j] = k[j] + d_;
                n2[j] = k[j] - d_;
            }
            blur_neighbors_[(static_cast<size_t>(e) * dp1 + j) * 2 + 0] = table.find(n1.data());
            blur_neighbors_[(static_cast<size_t>(e) * dp1 + j) * 2 + 1] = table.find(n2.data());
        }
    }
}

Eigen::MatrixXd PermutohedralLattice::apply(const Eigen::MatrixXd& in) const {
    if (in.rows() != n_) throw ShapeError("permutohedral: value row count mismatch");
    const int dp1 = d_ + 1;
    const int vd = static_cast<int>(in.cols());

    Eigen::MatrixXd values = Eigen::MatrixXd::Zero(lattice_size_, vd);
    for (int k = 0; k < n_; ++k)
        for (int r = 0; r <= d_; ++r) {
            const int o = offsets_[static_cast<size_t>(k) * dp1 + r];
            values.row(o) += barycentric_[static_cast<size_t>(k) * dp1 + r] * in.row(k);
        }

    Eigen::MatrixXd other(lattice_size_, vd);
    for (int j = 0; j <= d_; ++j) {
        for (int e = 0; e < lattice_size_; ++e) {
            const int o1 = blur_neighbors_[(static_cast<size_t>(e) * dp1 + j) * 2 + 0];
            const int o2 = blur_neighbors_[(static_cast<size_t>(e) * dp1 + j) * 2 + 1];
            other.row(e) = 0.5 * values.row(e);
            if (o1 >= 0) other.row(e) += 0.25 * values.row(o1);
            if (o2 >= 0) other.row(e) += 0.25 * values.row(o2);
        }
        values.swap(other);
    }

    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(n_, vd);
    for (int k = 0; k < n_; ++k)
        for (int r = 0; r <= d_; ++r) {
            const int o = offsets_[static_cast<size_t>(k) * dp1 + r];
            out.row(k) += barycentric_[static_cast<size_t>(k) * dp1 + r] * values.row(o);
        }
    return out;
}

Eigen::MatrixXd spatial_gaussian_filter(const Eigen::MatrixXd& in, int h, int w, Scalar sigma) {
    if (in.rows() != static_cast<Eigen::Index>(h) * w)
        throw ShapeError("spatial filter: row count mismatch");
    const int radius = static_cast<int>(std::ceil(5.0 * sigma));
    std::vector<Scalar> kern(2 * radius + 1);
    for (int t = -radius; t <= radius; ++t)
        kern[t + radius] = std::exp(-0.5 * t * t / (sigma * sigma));

    const int vd = static_cast<int>(in.cols());
    Eigen::MatrixXd tmp = Eigen::MatrixXd::Zero(in.rows(), vd);
    // horizontal
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const int lo = std::max(0, x - radius), hi = std::min(w - 1, x + radius);
            Eigen::RowVectorXd acc = Eigen::RowVectorXd::Zero(vd);
            for (int ix = lo; ix <= hi; ++ix)
                acc += kern[ix - x + radius] * in.row(static_cast<Eigen::Index>(y) * w + ix);
            tmp.row(static_cast<Eigen::Index>(y) * w + x) = acc;
        }
    // vertical
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(in.rows(), vd);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const int lo = std::max(0, y - radius), hi = std::min(h - 1, y + radius);
            Eigen::RowVectorXd acc = Eigen::RowVectorXd::Zero(vd);
            for (int iy = lo; iy <= hi; ++iy)
                acc += kern[iy - y + radius] * tmp.row(static_cast<Eigen::Index>(iy) * w + x);
            out.row(static_cast<Eigen::Index>(y) * w + x) = acc;
        }
    return out;
}

PairwiseKernel::PairwiseKernel(Kind kind, int h, int w, const ImageU8* image, Scalar sxy,
                               Scalar srgb, Scalar compat)
    : kind_(kind), h_(h), w_(w), sxy_(sxy), compat_(compat) {
    if (kind == Kind::kBilateral) {
        if (!image || image->h != h || image->w != w)
            throw ShapeError("bilateral kernel: image missing or mismatched");
        Eigen::MatrixXd feats(static_cast<Eigen::Index>(h) * w, 5);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const Eigen::Index i = static_cast<Eigen::Index>(y) * w + x;
                feats(i, 0) = x / sxy;
                feats(i, 1) = y / sxy;
                feats(i, 2) = image->at(y, x, 0) / srgb;
                feats(i, 3) = image->at(y, x, 1) / srgb;
                feats(i, 4) = image->at(y, x, 2) / srgb;
            }
        lattice_.init(feats);
    }
    norm_ = filter(Eigen::MatrixXd::Ones(static_cast<Eigen::Index>(h) * w, 1)).col(0);
    for (int i = 0; i < norm_.size(); ++i) norm_(i) = std::max(norm_(i), 1e-12);
}

Eigen::MatrixXd PairwiseKernel::filter(const Eigen::MatrixXd& in) const {
    if (kind_ == Kind::kGaussianSpatial) return spatial_gaussian_filter(in, h_, w_, sxy_);
    return lattice_.apply(in);
}

Eigen::MatrixXd PairwiseKernel::message(const Eigen::MatrixXd& q) const {
    // symmetric normalization: khat = K_ij / sqrt(n_i n_j); self term included
    Eigen::ArrayXd s = norm_.array().sqrt();
    Eigen::MatrixXd u = q.array().colwise() / s;
    Eigen::MatrixXd f = filter(u);
    return compat_ * (f.array().colwise() / s).matrix();
}

}  // namespace fewseg
