#include "fewseg/adapt.hpp"

#include <atomic>
#include <cstring>
#include <fstream>
#include <thread>

namespace fewseg {

void LossConfig::validate() const {
    if (temperature <= 0) throw ConfigError("temperature must be > 0");
    if (epochs < 0) throw ConfigError("epochs must be >= 0");
    if (learning_rate <= 0) throw ConfigError("learning_rate must be > 0");
    if (adapter_channels < 1) throw ConfigError("adapter_channels must be >= 1");
}

AdapterParams AdapterParams::init(int c_in, int d, uint64_t seed, Scalar bn_eps) {
    AdapterParams p;
    p.bn_eps = bn_eps;
    Rng rng(derive_seed(seed, 0xADA7));
    auto uniform_fan_in = [&rng](Eigen::Ref<Eigen::MatrixXd> m, int fan_in) {
        const Scalar bound = 1.0 / std::sqrt(static_cast<Scalar>(fan_in));
        for (int i = 0; i < m.rows(); ++i)
            for (int j = 0; j < m.cols(); ++j) m(i, j) = rng.uniform(-bound, bound);
    };
    p.w1.resize(c_in, d);
    uniform_fan_in(p.w1, c_in);
    p.b1.resize(d);
    uniform_fan_in(p.b1, c_in);
    p.bn_gamma = Eigen::RowVectorXd::Ones(d);
    p.bn_beta = Eigen::RowVectorXd::Zero(d);
    p.bn_run_mean = Eigen::RowVectorXd::Zero(d);
    p.bn_run_var = Eigen::RowVectorXd::Ones(d);
    p.w2.resize(d, d);
    uniform_fan_in(p.w2, d);
    p.b2.resize(d);
    uniform_fan_in(p.b2, d);
    return p;
}

AdapterGrads AdapterGrads::zeros(const AdapterParams& p) {
    AdapterGrads g;
    g.w1 = Eigen::MatrixXd::Zero(p.w1.rows(), p.w1.cols());
    g.b1 = Eigen::RowVectorXd::Zero(p.b1.cols());
    g.bn_gamma = Eigen::RowVectorXd::Zero(p.bn_gamma.cols());
    g.bn_beta = Eigen::RowVectorXd::Zero(p.bn_beta.cols());
    g.w2 = Eigen::MatrixXd::Zero(p.w2.rows(), p.w2.cols());
    g.b2 = Eigen::RowVectorXd::Zero(p.b2.cols());
    return g;
}

void AdapterGrads::add_scaled(const AdapterGrads& o, Scalar s) {
    w1 += s * o.w1;
    b1 += s * o.b1;
    bn_gamma += s * o.bn_gamma;
    bn_beta += s * o.bn_beta;
    w2 += s * o.w2;
    b2 += s * o.b2;
}

Eigen::MatrixXd adapter_forward_rows(const Eigen::MatrixXd& x, AdapterParams& params,
                                     AdapterMode mode, Scalar bn_momentum, AdapterCache* cache) {
    if (x.cols() != params.w1.rows())
        throw ShapeError("adapter: input has " + std::to_string(x.cols()) +
                         " channels, params expect " + std::to_string(params.w1.rows()));
    const int n = static_cast<int>(x.rows());
    Eigen::MatrixXd z1 = (x * params.w1).rowwise() + params.b1;

    Eigen::RowVectorXd mu, var;
    if (mode == AdapterMode::kFit) {
        mu = z1.colwise().mean();
        Eigen::MatrixXd centered = z1.rowwise() - mu;
        var = centered.array().square().colwise().mean();
        params.bn_run_mean = (1.0 - bn_momentum) * params.bn_run_mean + bn_momentum * mu;
        params.bn_run_var = (1.0 - bn_momentum) * params.bn_run_var + bn_momentum * var;
    } else {
        mu = params.bn_run_mean;
        var = params.bn_run_var;
    }
    Eigen::RowVectorXd istd = (var.array() + params.bn_eps).rsqrt();
    Eigen::MatrixXd xhat = (z1.rowwise() - mu).array().rowwise() * istd.array();
    Eigen::MatrixXd pre =
        (xhat.array().rowwise() * params.bn_gamma.array()).rowwise() + params.bn_beta.array();
    Eigen::MatrixXd h = pre.cwiseMax(0.0);
    Eigen::MatrixXd y = (h * params.w2).rowwise() + params.b2;
    if (cache) {
        cache->x = x;
        cache->mu = mu;
        cache->var = var;
        cache->xhat = xhat;
        cache->h = h;
        cache->y = y;
    }
    (void)n;
    return y;
}

Eigen::MatrixXd adapter_infer_rows(const Eigen::MatrixXd& x, const AdapterParams& params) {
    AdapterParams& p = const_cast<AdapterParams&>(params);  // infer mode does not mutate
    return adapter_forward_rows(x, p, AdapterMode::kInfer, 0.0, nullptr);
}

Volume adapter_forward(const Volume& features, AdapterParams& params, AdapterMode mode,
                       Scalar bn_momentum) {
    Eigen::MatrixXd x = features.rows();
    Eigen::MatrixXd y = adapter_forward_rows(x, params, mode, bn_momentum, nullptr);
    Volume out(features.h, features.w, static_cast<int>(y.cols()));
    Eigen::Map<MatrixRM>(out.data.data(), y.rows(), y.cols()) = y;
    return out;
}

Volume adapter_infer(const Volume& features, const AdapterParams& params) {
    Eigen::MatrixXd x = features.rows();
    Eigen::MatrixXd y = adapter_infer_rows(x, params);
    Volume out(features.h, features.w, static_cast<int>(y.cols()));
    Eigen::Map<MatrixRM>(out.data.data(), y.rows(), y.cols()) = y;
    return out;
}

void adapter_backward(const AdapterParams& params, const AdapterCache& cache,
                      const Eigen::MatrixXd& dy, AdapterGrads& grads) {
    const int n = static_cast<int>(cache.x.rows());
    grads.w2 += cache.h.transpose() * dy;
    grads.b2 += dy.colwise().sum();
    Eigen::MatrixXd dh = dy * params.w2.transpose();
    // relu: cache.h holds max(pre, 0); pre > 0 <=> h > 0
    Eigen::MatrixXd dpre = (cache.h.array() > 0.0).select(dh, 0.0);
    grads.bn_gamma += (dpre.array() * cache.xhat.array()).colwise().sum().matrix();
    grads.bn_beta += dpre.colwise().sum();
    Eigen::MatrixXd dxhat = dpre.array().rowwise() * params.bn_gamma.array();
    Eigen::RowVectorXd istd = (cache.var.array() + params.bn_eps).rsqrt();
    // batch-norm backward, population statistics
    Eigen::RowVectorXd mean_dxhat = dxhat.colwise().mean();
    Eigen::RowVectorXd mean_dxhat_xhat = (dxhat.array() * cache.xhat.array()).colwise().mean();
    Eigen::MatrixXd dz1 =
        ((dxhat.rowwise() - mean_dxhat).array() -
         cache.xhat.array().rowwise() * mean_dxhat_xhat.array())
            .rowwise() *
        istd.array();
    grads.w1 += cache.x.transpose() * dz1;
    grads.b1 += dz1.colwise().sum();
    (void)n;
}

// ---- losses ----

Scalar loss_nce(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, Scalar tau, PairGrads* grads) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw ShapeError("loss_nce: operand shapes differ");
    if (a.rows() == 0) throw ShapeError("loss_nce: empty input");
    const int n = static_cast<int>(a.rows());
    if (grads) {
        grads->da = Eigen::MatrixXd::Zero(a.rows(), a.cols());
        grads->db = Eigen::MatrixXd::Zero(b.rows(), b.cols());
    }
    if (n == 1) return 0.0;  // denominator equals the numerator

    Eigen::MatrixXd s = (a * b.transpose()) / tau;  // n x n
    Scalar loss = 0.0;
    Eigen::MatrixXd p(n, n);
    for (int i = 0; i < n; ++i) {
        const Scalar m = s.row(i).maxCoeff();
        Scalar denom = 0.0;
        for (int j = 0; j < n; ++j) {
            const Scalar e = std::exp(s(i, j) - m);
            p(i, j) = e;
            denom += e;
        }
        p.row(i) /= denom;
        loss += -(s(i, i) - m) + std::log(denom);
    }
    loss /= n;
    if (grads) {
        Eigen::MatrixXd ds = p;
        ds.diagonal().array() -= 1.0;
        ds *= 1.0 / (tau * n);
        grads->da = ds * b;
        grads->db = ds.transpose() * a;
    }
    return loss;
}

Scalar loss_stat(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, PairGrads* grads) {
    if (a.cols() != b.cols()) throw ShapeError("loss_stat: channel counts differ");
    if (a.rows() == 0 || b.rows() == 0) throw ShapeError("loss_stat: empty input");
    const int c = static_cast<int>(a.cols());
    const Scalar na = static_cast<Scalar>(a.rows());
    const Scalar nb = static_cast<Scalar>(b.rows());
    Eigen::RowVectorXd mu_a = a.colwise().mean();
    Eigen::RowVectorXd mu_b = b.colwise().mean();
    Eigen::MatrixXd ca = a.rowwise() - mu_a;
    Eigen::MatrixXd cb = b.rowwise() - mu_b;
    Eigen::RowVectorXd var_a = ca.array().square().colwise().mean();
    Eigen::RowVectorXd var_b = cb.array().square().colwise().mean();

    Scalar loss = 0.0;
    auto sgn = [](Scalar v) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); };
    Eigen::RowVectorXd sign_mu(c), sign_var(c);
    for (int ch = 0; ch < c; ++ch) {
        loss += std::abs(mu_a(ch) - mu_b(ch)) + std::abs(var_a(ch) - var_b(ch));
        sign_mu(ch) = sgn(mu_a(ch) - mu_b(ch));
        sign_var(ch) = sgn(var_a(ch) - var_b(ch));
    }
    loss /= c;
    if (grads) {
        grads->da = Eigen::MatrixXd::Zero(a.rows(), c);
        grads->db = Eigen::MatrixXd::Zero(b.rows(), c);
        grads->da = ((ca.array().rowwise() * (2.0 * sign_var.array() / (c * na))).rowwise() +
                     sign_mu.array() / (c * na))
                        .matrix();
        grads->db = ((cb.array().rowwise() * (-2.0 * sign_var.array() / (c * nb))).rowwise() -
                     sign_mu.array() / (c * nb))
                        .matrix();
    }
    return loss;
}

namespace {

Eigen::MatrixXd gather_rows(const Volume& v, const std::vector<uint8_t>& valid,
                            std::vector<int>* idx_out = nullptr) {
    if (valid.size() != static_cast<size_t>(v.positions()))
        throw ShapeError("validity map does not match volume");
    std::vector<int> idx;
    for (int i = 0; i < v.positions(); ++i)
        if (valid[i]) idx.push_back(i);
    Eigen::MatrixXd out(idx.size(), v.c);
    auto rows = v.rows();
    for (size_t r = 0; r < idx.size(); ++r) out.row(r) = rows.row(idx[r]);
    if (idx_out) *idx_out = std::move(idx);
    return out;
}

}  // namespace

Scalar loss_nce(const Volume& a, const Volume& b, const std::vector<uint8_t>& valid, Scalar tau) {
    if (a.h != b.h || a.w != b.w || a.c != b.c) throw ShapeError("loss_nce: volume shapes differ");
    Eigen::MatrixXd ar = gather_rows(a, valid);
    Eigen::MatrixXd br = gather_rows(b, valid);
    if (ar.rows() < 2) throw NumericError("loss_nce: fewer than 2 valid positions");
    return loss_nce(ar, br, tau, nullptr);
}

Scalar loss_stat(const Volume& a, const Volume& b, const std::vector<uint8_t>& valid) {
    if (a.h != b.h || a.w != b.w || a.c != b.c) throw ShapeError("loss_stat: volume shapes differ");
    Eigen::MatrixXd ar = gather_rows(a, valid);
    Eigen::MatrixXd br = gather_rows(b, valid);
    return loss_stat(ar, br, nullptr);
}

Prototypes masked_prototypes(const std::vector<const Eigen::MatrixXd*>& volumes,
                             const std::vector<const Eigen::VectorXd*>& masks,
                             const std::vector<const Eigen::VectorXd*>& weights) {
    if (volumes.empty() || volumes.size() != masks.size())
        throw ShapeError("masked_prototypes: volume/mask count mismatch");
    const int d = static_cast<int>(volumes[0]->cols());
    Prototypes p;
    p.fg = Eigen::VectorXd::Zero(d);
    p.bg = Eigen::VectorXd::Zero(d);
    for (size_t k = 0; k < volumes.size(); ++k) {
        const Eigen::MatrixXd& y = *volumes[k];
        const Eigen::VectorXd& m = *masks[k];
        if (y.rows() != m.size()) throw ShapeError("masked_prototypes: mask length mismatch");
        const Eigen::VectorXd* w = weights.empty() ? nullptr : weights[k];
        for (int i = 0; i < y.rows(); ++i) {
            const Scalar wi = w ? (*w)(i) : 1.0;
            const Scalar mf = wi * m(i);
            const Scalar mb = wi * (1.0 - m(i));
            if (mf > 0) p.fg += mf * y.row(i).transpose();
            if (mb > 0) p.bg += mb * y.row(i).transpose();
            p.fg_weight += mf;
            p.bg_weight += mb;
        }
    }
    constexpr Scalar kMassEps = 1e-12;
    if (p.fg_weight > kMassEps) {
        p.fg /= p.fg_weight;
        p.has_fg = true;
    }
    if (p.bg_weight > kMassEps) {
        p.bg /= p.bg_weight;
        p.has_bg = true;
    }
    return p;
}

Prototypes masked_prototypes(const Volume& features, const MapF& level_mask) {
    if (features.h != level_mask.h || features.w != level_mask.w)
        throw ShapeError("masked_prototypes: mask/feature spatial mismatch");
    Eigen::MatrixXd y = features.rows();
    Eigen::VectorXd m =
        Eigen::Map<const Eigen::VectorXd>(level_mask.data.data(), level_mask.size());
    return masked_prototypes({&y}, {&m});
}

namespace {

struct CosineGrad {
    Scalar value = 0.0;
    Eigen::VectorXd du, dv;
    bool ok = false;
};

CosineGrad cosine(const Eigen::VectorXd& u, const Eigen::VectorXd& v, bool with_grads) {
    CosineGrad g;
    const Scalar nu = u.norm();
    const Scalar nv = v.norm();
    if (nu < 1e-12 || nv < 1e-12) return g;
    g.value = u.dot(v) / (nu * nv);
    if (with_grads) {
        g.du = v / (nu * nv) - g.value * u / (nu * nu);
        g.dv = u / (nu * nv) - g.value * v / (nv * nv);
    }
    g.ok = true;
    return g;
}

}  // namespace

Scalar loss_proto(const Prototypes& orig, const Prototypes& aug, ProtoGrads* grads) {
    if (!orig.has_fg || !aug.has_fg || !aug.has_bg)
        throw NumericError("loss_proto: required prototype absent");
    CosineGrad cff = cosine(orig.fg, aug.fg, grads != nullptr);
    CosineGrad cfb = cosine(orig.fg, aug.bg, grads != nullptr);
    if (!cff.ok || !cfb.ok) throw NumericError("loss_proto: zero-norm prototype");
    const Scalar diff = cfb.value - cff.value;
    // softplus(diff), stable
    const Scalar loss = diff > 0 ? diff + std::log1p(std::exp(-diff)) : std::log1p(std::exp(diff));
    if (grads) {
        const Scalar sig = 1.0 / (1.0 + std::exp(-diff));
        grads->d_fg = sig * (cfb.du - cff.du);
        grads->d_fg_aug = -sig * cff.dv;
        grads->d_bg_aug = sig * cfb.dv;
    }
    return loss;
}

// ---- combined objective ----

LossBreakdown combined_loss(const LevelInputs& in, Scalar tau, CombinedGrads* grads) {
    LossBreakdown out;
    const int aug = static_cast<int>(in.query_views.size());
    const int shots = static_cast<int>(in.support.size());
    if (aug < 1) throw ShapeError("combined_loss: at least one view required");
    if (shots < 1 || in.masks.size() != static_cast<size_t>(shots))
        throw ShapeError("combined_loss: support/mask mismatch");

    if (grads) {
        grads->d_query = Eigen::MatrixXd::Zero(in.query.rows(), in.query.cols());
        grads->d_query_views.assign(aug, Eigen::MatrixXd());
        grads->d_support.resize(shots);
        grads->d_support_views.assign(shots, {});
        for (int k = 0; k < shots; ++k) {
            grads->d_support[k] = Eigen::MatrixXd::Zero(in.support[k].rows(), in.support[k].cols());
            grads->d_support_views[k].assign(in.support_views[k].size(), Eigen::MatrixXd());
        }
    }

    auto side_term = [&](const Eigen::MatrixXd& orig, const Eigen::MatrixXd& view_rows,
                         const std::vector<int>& idx, Eigen::MatrixXd* d_orig,
                         Eigen::MatrixXd* d_view) -> std::optional<Scalar> {
        const int n = static_cast<int>(view_rows.rows());
        if (n < 2) {
            ++out.skipped_view_terms;
            return std::nullopt;
        }
        Eigen::MatrixXd a(n, orig.cols());
        for (int r = 0; r < n; ++r) a.row(r) = orig.row(idx[r]);
        PairGrads g_nce, g_stat;
        const Scalar l_nce = loss_nce(a, view_rows, tau, grads ? &g_nce : nullptr);
        const Scalar l_stat = loss_stat(a, view_rows, grads ? &g_stat : nullptr);
        if (grads) {
            if (d_view->size() == 0) *d_view = Eigen::MatrixXd::Zero(n, orig.cols());
            for (int r = 0; r < n; ++r)
                d_orig->row(idx[r]) += g_nce.da.row(r) + g_stat.da.row(r);
            *d_view += g_nce.db + g_stat.db;
        }
        return l_nce + l_stat;
    };

    // query side: average over views
    {
        int terms = 0;
        Scalar acc = 0.0;
        std::vector<Scalar> vals(aug, 0.0);
        std::vector<bool> used(aug, false);
        for (int a = 0; a < aug; ++a) {
            Eigen::MatrixXd* dv = grads ? &grads->d_query_views[a] : nullptr;
            auto v = side_term(in.query, in.query_views[a], in.query_view_idx[a],
                               grads ? &grads->d_query : nullptr, dv);
            if (v) {
                acc += *v;
                vals[a] = *v;
                used[a] = true;
                ++terms;
            }
        }
        if (terms > 0) {
            out.query_side = acc / terms;
            if (grads) {
                const Scalar s = 1.0 / terms;
                grads->d_query *= s;
                for (int a = 0; a < aug; ++a)
                    if (used[a]) grads->d_query_views[a] *= s;
            }
        }
    }

    // support side: average over (shot, view) pairs
    {
        int terms = 0;
        Scalar acc = 0.0;
        for (int k = 0; k < shots; ++k) {
            for (size_t a = 0; a < in.support_views[k].size(); ++a) {
                Eigen::MatrixXd* dv = grads ? &grads->d_support_views[k][a] : nullptr;
                auto v = side_term(in.support[k], in.support_views[k][a],
                                   in.support_view_idx[k][a],
                                   grads ? &grads->d_support[k] : nullptr, dv);
                if (v) {
                    acc += *v;
                    ++terms;
                }
            }
        }
        if (terms > 0) {
            out.support_side = acc / terms;
            if (grads) {
                const Scalar s = 1.0 / terms;
                for (int k = 0; k < shots; ++k) {
                    grads->d_support[k] *= s;
                    for (auto& dv : grads->d_support_views[k])
                        if (dv.size() > 0) dv *= s;
                }
            }
        }
    }

    // prototype loss: original support prototypes vs per-view prototypes
    {
        std::vector<const Eigen::MatrixXd*> vols;
        std::vector<const Eigen::VectorXd*> masks;
        for (int k = 0; k < shots; ++k) {
            vols.push_back(&in.support[k]);
            masks.push_back(&in.masks[k]);
        }
        Prototypes orig = masked_prototypes(vols, masks);
        if (!orig.has_fg || !orig.has_bg) {
            out.proto_skipped = true;
        } else {
            // first pass: which views contribute
            std::vector<Prototypes> paug(aug);
            std::vector<std::vector<Eigen::VectorXd>> mvals(aug,
                                                            std::vector<Eigen::VectorXd>(shots));
            std::vector<bool> usable(aug, false);
            int terms = 0;
            for (int a = 0; a < aug; ++a) {
                std::vector<const Eigen::MatrixXd*> vvols;
                std::vector<const Eigen::VectorXd*> vmasks;
                bool ok = true;
                for (int k = 0; k < shots; ++k) {
                    if (a >= static_cast<int>(in.support_views[k].size())) {
                        ok = false;
                        break;
                    }
                    const auto& idx = in.support_view_idx[k][a];
                    mvals[a][k].resize(idx.size());
                    for (size_t r = 0; r < idx.size(); ++r) mvals[a][k](r) = in.masks[k](idx[r]);
                    vvols.push_back(&in.support_views[k][a]);
                    vmasks.push_back(&mvals[a][k]);
                }
                if (!ok) continue;
                paug[a] = masked_prototypes(vvols, vmasks);
                if (paug[a].has_fg && paug[a].has_bg) {
                    usable[a] = true;
                    ++terms;
                }
            }
            if (terms == 0) {
                out.proto_skipped = true;
            } else {
                const Scalar scale = 1.0 / terms;
                Scalar acc = 0.0;
                for (int a = 0; a < aug; ++a) {
                    if (!usable[a]) continue;
                    ProtoGrads pg;
                    acc += loss_proto(orig, paug[a], grads ? &pg : nullptr);
                    if (!grads) continue;
                    for (int k = 0; k < shots; ++k) {
                        const Eigen::VectorXd& m = in.masks[k];
                        Eigen::MatrixXd& ds = grads->d_support[k];
                        for (int i = 0; i < in.support[k].rows(); ++i)
                            if (m(i) > 0)
                                ds.row(i) +=
                                    (scale * m(i) / orig.fg_weight) * pg.d_fg.transpose();
                        const auto& idx = in.support_view_idx[k][a];
                        Eigen::MatrixXd& dv = grads->d_support_views[k][a];
                        if (dv.size() == 0)
                            dv = Eigen::MatrixXd::Zero(in.support_views[k][a].rows(),
                                                       in.support_views[k][a].cols());
                        for (size_t r = 0; r < idx.size(); ++r) {
                            const Scalar mv = mvals[a][k](r);
                            if (mv > 0)
                                dv.row(r) +=
                                    (scale * mv / paug[a].fg_weight) * pg.d_fg_aug.transpose();
                            if (1.0 - mv > 0)
                                dv.row(r) += (scale * (1.0 - mv) / paug[a].bg_weight) *
                                             pg.d_bg_aug.transpose();
                        }
                    }
                }
                out.proto = acc * scale;
            }
        }
    }

    out.total = out.query_side + out.support_side + out.proto;
    const int total_pair_terms = aug + shots * aug;
    if (out.proto_skipped && out.skipped_view_terms >= total_pair_terms)
        throw NumericError("combined_loss: every term was skipped");
    return out;
}


// ---- fitting ----

namespace {

struct GatheredLevel {
    Eigen::MatrixXd x_query;
    std::vector<Eigen::MatrixXd> x_query_views;
    std::vector<std::vector<int>> query_idx;
    std::vector<Eigen::MatrixXd> x_support;
    std::vector<std::vector<Eigen::MatrixXd>> x_support_views;
    std::vector<std::vector<std::vector<int>>> support_idx;
    std::vector<Eigen::VectorXd> masks;
};

GatheredLevel gather_level(const LevelFitData& lvl) {
    GatheredLevel g;
    g.x_query = lvl.query.rows();
    const int aug = static_cast<int>(lvl.query_views.size());
    g.x_query_views.resize(aug);
    g.query_idx.resize(aug);
    for (int a = 0; a < aug; ++a)
        g.x_query_views[a] = gather_rows(lvl.query_views[a], lvl.query_view_valid[a],
                                         &g.query_idx[a]);
    const int shots = static_cast<int>(lvl.support.size());
    g.x_support.resize(shots);
    g.x_support_views.resize(shots);
    g.support_idx.resize(shots);
    g.masks.resize(shots);
    for (int k = 0; k < shots; ++k) {
        g.x_support[k] = lvl.support[k].rows();
        const int va = static_cast<int>(lvl.support_views[k].size());
        g.x_support_views[k].resize(va);
        g.support_idx[k].resize(va);
        for (int a = 0; a < va; ++a)
            g.x_support_views[k][a] = gather_rows(lvl.support_views[k][a],
                                                  lvl.support_view_valid[k][a],
                                                  &g.support_idx[k][a]);
        if (lvl.masks[k].size() != lvl.support[k].positions())
            throw ShapeError("level mask does not match support feature shape");
        g.masks[k] = Eigen::Map<const Eigen::VectorXd>(lvl.masks[k].data.data(),
                                                       lvl.masks[k].size());
    }
    return g;
}

}  // namespace

AdapterParams fit_single_level(const LevelFitData& level, const LossConfig& cfg, uint64_t seed,
                               std::vector<Scalar>* trace, int level_index) {
    cfg.validate();
    if (level.query_views.empty()) throw ShapeError("fit: at least one view required");
    if (level.support.empty()) throw ShapeError("fit: at least one support shot required");

    const int c_in = level.query.c;
    AdapterParams params = AdapterParams::init(c_in, cfg.adapter_channels, seed, cfg.bn_eps);

    GatheredLevel g = gather_level(level);
    {
        std::vector<const Eigen::MatrixXd*> vols;
        std::vector<const Eigen::VectorXd*> masks;
        for (size_t k = 0; k < g.x_support.size(); ++k) {
            vols.push_back(&g.x_support[k]);
            masks.push_back(&g.masks[k]);
        }
        Prototypes pm = masked_prototypes(vols, masks);
        params.proto_skipped = !(pm.has_fg && pm.has_bg);
    }

    AdapterGrads vel = AdapterGrads::zeros(params);
    const bool use_momentum = cfg.momentum > 0.0;

    const int aug = static_cast<int>(g.x_query_views.size());
    const int shots = static_cast<int>(g.x_support.size());

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        // forward every volume in a fixed order (running stats depend on it)
        AdapterCache c_query;
        std::vector<AdapterCache> c_qviews(aug);
        std::vector<AdapterCache> c_support(shots);
        std::vector<std::vector<AdapterCache>> c_sviews(shots);

        LevelInputs in;
        in.query = adapter_forward_rows(g.x_query, params, AdapterMode::kFit, cfg.bn_momentum,
                                        &c_query);
        in.query_views.resize(aug);
        in.query_view_idx = g.query_idx;
        for (int a = 0; a < aug; ++a)
            in.query_views[a] = g.x_query_views[a].rows() > 0
                                    ? adapter_forward_rows(g.x_query_views[a], params,
                                                           AdapterMode::kFit, cfg.bn_momentum,
                                                           &c_qviews[a])
                                    : Eigen::MatrixXd(0, cfg.adapter_channels);
        in.support.resize(shots);
        in.support_views.resize(shots);
        in.support_view_idx = g.support_idx;
        in.masks = g.masks;
        for (int k = 0; k < shots; ++k) {
            in.support[k] = adapter_forward_rows(g.x_support[k], params, AdapterMode::kFit,
                                                 cfg.bn_momentum, &c_support[k]);
            const int va = static_cast<int>(g.x_support_views[k].size());
            in.support_views[k].resize(va);
            c_sviews[k].resize(va);
            for (int a = 0; a < va; ++a)
                in.support_views[k][a] =
                    g.x_support_views[k][a].rows() > 0
                        ? adapter_forward_rows(g.x_support_views[k][a], params, AdapterMode::kFit,
                                               cfg.bn_momentum, &c_sviews[k][a])
                        : Eigen::MatrixXd(0, cfg.adapter_channels);
        }

        CombinedGrads cg;
        LossBreakdown lb = combined_loss(in, cfg.temperature, &cg);
        if (!std::isfinite(lb.total))
            throw NumericError("non-finite loss at level " + std::to_string(level_index) +
                               ", epoch " + std::to_string(epoch));
        if (trace) trace->push_back(lb.total);

        AdapterGrads grads = AdapterGrads::zeros(params);
        adapter_backward(params, c_query, cg.d_query, grads);
        for (int a = 0; a < aug; ++a)
            if (cg.d_query_views[a].size() > 0)
                adapter_backward(params, c_qviews[a], cg.d_query_views[a], grads);
        for (int k = 0; k < shots; ++k) {
            adapter_backward(params, c_support[k], cg.d_support[k], grads);
            for (size_t a = 0; a < cg.d_support_views[k].size(); ++a)
                if (cg.d_support_views[k][a].size() > 0)
                    adapter_backward(params, c_sviews[k][a], cg.d_support_views[k][a], grads);
        }

        const Scalar lr = cfg.learning_rate;
        if (use_momentum) {
            vel.w1 = cfg.momentum * vel.w1 + grads.w1;
            vel.b1 = cfg.momentum * vel.b1 + grads.b1;
            vel.bn_gamma = cfg.momentum * vel.bn_gamma + grads.bn_gamma;
            vel.bn_beta = cfg.momentum * vel.bn_beta + grads.bn_beta;
            vel.w2 = cfg.momentum * vel.w2 + grads.w2;
            vel.b2 = cfg.momentum * vel.b2 + grads.b2;
            params.w1 -= lr * vel.w1;
            params.b1 -= lr * vel.b1;
            params.bn_gamma -= lr * vel.bn_gamma;
            params.bn_beta -= lr * vel.bn_beta;
            params.w2 -= lr * vel.w2;
            params.b2 -= lr * vel.b2;
        } else {
            params.w1 -= lr * grads.w1;
            params.b1 -= lr * grads.b1;
            params.bn_gamma -= lr * grads.bn_gamma;
            params.bn_beta -= lr * grads.bn_beta;
            params.w2 -= lr * grads.w2;
            params.b2 -= lr * grads.b2;
        }
    }
    return params;
}

AdapterStack fit_adapters(const std::vector<LevelFitData>& levels, const LossConfig& cfg,
                          uint64_t seed, int threads) {
    cfg.validate();
    const int n = static_cast<int>(levels.size());
    AdapterStack stack;
    stack.fit_config = cfg;
    stack.params.resize(n);
    stack.level_traces.assign(n, {});

    auto fit_one = [&](int l) {
        stack.params[l] = fit_single_level(levels[l], cfg, derive_seed(seed, l),
                                           &stack.level_traces[l], l);
    };

    if (threads > 1 && n > 1) {
        std::vector<std::thread> pool;
        std::atomic<int> next{0};
        const int nt = std::min(threads, n);
        for (int t = 0; t < nt; ++t)
            pool.emplace_back([&] {
                for (int l = next.fetch_add(1); l < n; l = next.fetch_add(1)) fit_one(l);
            });
        for (auto& th : pool) th.join();
    } else {
        for (int l = 0; l < n; ++l) fit_one(l);
    }

    stack.loss_trace.assign(cfg.epochs, 0.0);
    for (int e = 0; e < cfg.epochs; ++e) {
        Scalar acc = 0.0;
        for (int l = 0; l < n; ++l) acc += stack.level_traces[l][e];
        stack.loss_trace[e] = n > 0 ? acc / n : 0.0;
    }
    return stack;
}

// ---- serialization (bit-exact) ----

namespace {

constexpr char kStackMagic[8] = {'F', 'S', 'A', 'D', 'P', 'T', '1', '\n'};

void put_u64(std::ostream& os, uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }
void put_f64(std::ostream& os, double v) { os.write(reinterpret_cast<const char*>(&v), 8); }
uint64_t get_u64(std::istream& is) {
    uint64_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 8);
    return v;
}
double get_f64(std::istream& is) {
    double v = 0;
    is.read(reinterpret_cast<char*>(&v), 8);
    return v;
}

void put_mat(std::ostream& os, const Eigen::MatrixXd& m) {
    put_u64(os, static_cast<uint64_t>(m.rows()));
    put_u64(os, static_cast<uint64_t>(m.cols()));
    for (int i = 0; i < m.rows(); ++i)
        for (int j = 0; j < m.cols(); ++j) put_f64(os, m(i, j));
}

Eigen::MatrixXd get_mat(std::istream& is) {
    const auto r = static_cast<Eigen::Index>(get_u64(is));
    const auto c = static_cast<Eigen::Index>(get_u64(is));
    Eigen::MatrixXd m(r, c);
    for (Eigen::Index i = 0; i < r; ++i)
        for (Eigen::Index j = 0; j < c; ++j) m(i, j) = get_f64(is);
    return m;
}

void put_rvec(std::ostream& os, const Eigen::RowVectorXd& v) { put_mat(os, v); }
Eigen::RowVectorXd get_rvec(std::istream& is) { return get_mat(is); }

}  // namespace

void save_adapter_stack(const AdapterStack& stack, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IngestError("cannot write adapter stack: " + path);
    os.write(kStackMagic, 8);
    const auto& cfg = stack.fit_config;
    put_f64(os, cfg.temperature);
    put_u64(os, static_cast<uint64_t>(cfg.epochs));
    put_f64(os, cfg.learning_rate);
    put_f64(os, cfg.momentum);
    put_u64(os, static_cast<uint64_t>(cfg.adapter_channels));
    put_f64(os, cfg.bn_momentum);
    put_f64(os, cfg.bn_eps);
    put_u64(os, stack.params.size());
    for (const auto& p : stack.params) {
        put_mat(os, p.w1);
        put_rvec(os, p.b1);
        put_rvec(os, p.bn_gamma);
        put_rvec(os, p.bn_beta);
        put_rvec(os, p.bn_run_mean);
        put_rvec(os, p.bn_run_var);
        put_mat(os, p.w2);
        put_rvec(os, p.b2);
        put_f64(os, p.bn_eps);
        put_u64(os, p.proto_skipped ? 1 : 0);
    }
    put_u64(os, stack.loss_trace.size());
    for (double v : stack.loss_trace) put_f64(os, v);
    put_u64(os, stack.level_traces.size());
    for (const auto& t : stack.level_traces) {
        put_u64(os, t.size());
        for (double v : t) put_f64(os, v);
    }
    if (!os) throw IngestError("write failed: " + path);
}

AdapterStack load_adapter_stack(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IngestError("cannot read adapter stack: " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kStackMagic, 8) != 0)
        throw IngestError("bad adapter stack magic: " + path);
    AdapterStack stack;
    stack.fit_config.temperature = get_f64(is);
    stack.fit_config.epochs = static_cast<int>(get_u64(is));
    stack.fit_config.learning_rate = get_f64(is);
    stack.fit_config.momentum = get_f64(is);
    stack.fit_config.adapter_channels = static_cast<int>(get_u64(is));
    stack.fit_config.bn_momentum = get_f64(is);
    stack.fit_config.bn_eps = get_f64(is);
    const auto n = get_u64(is);
    stack.params.resize(n);
    for (auto& p : stack.params) {
        p.w1 = get_mat(is);
        p.b1 = get_rvec(is);
        p.bn_gamma = get_rvec(is);
        p.bn_beta = get_rvec(is);
        p.bn_run_mean = get_rvec(is);
        p.bn_run_var = get_rvec(is);
        p.w2 = get_mat(is);
        p.b2 = get_rvec(is);
        p.bn_eps = get_f64(is);
        p.proto_skipped = get_u64(is) != 0;
    }
    stack.loss_trace.resize(get_u64(is));
    for (auto& v : stack.loss_trace) v = get_f64(is);
    stack.level_traces.resize(get_u64(is));
    for (auto& t : stack.level_traces) {
        t.resize(get_u64(is));
        for (auto& v : t) v = get_f64(is);
    }
    if (!is) throw IngestError("truncated adapter stack: " + path);
    return stack;
}

}  // namespace fewseg
