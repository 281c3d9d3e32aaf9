#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "gpsurr/dataset.hpp"
#include "gpsurr/error.hpp"

// Mean-only regressors used as comparison points for the GP. Neither reports
// predictive variance.

namespace gpsurr {

// ---------------------------------------------------------------------------
// Random forest

struct ForestConfig {
    int n_trees = 100;
    int max_depth = 12;
    int min_leaf = 2;
    /// Resample rows with replacement per tree; off means every tree sees all rows.
    bool bootstrap = true;
    std::uint64_t seed = 0;
};

struct TreeNode {
    /// -1 for leaves.
    int feature = -1;
    double threshold = 0.0;
    int left = -1;
    int right = -1;
    /// Mean training target of the rows that reached this node.
    double value = 0.0;
    int count = 0;
};

struct RegressionTree {
    std::vector<TreeNode> nodes;

    template <typename Derived>
    [[nodiscard]] double predict(const Eigen::MatrixBase<Derived> &x) const {
        int i = 0;
        while (nodes[static_cast<std::size_t>(i)].feature >= 0) {
            const auto &n = nodes[static_cast<std::size_t>(i)];
            i = x(n.feature) <= n.threshold ? n.left : n.right;
        }
        return nodes[static_cast<std::size_t>(i)].value;
    }
};

struct ForestModel {
    std::vector<RegressionTree> trees;
    ForestConfig config;
    std::vector<std::string> feature_names;
    std::string target_name;

    [[nodiscard]] Eigen::Index dim() const { return static_cast<Eigen::Index>(feature_names.size()); }
};

namespace detail {

class TreeBuilder {
public:
    TreeBuilder(const Matrix &X, const Vector &y, const ForestConfig &cfg, std::mt19937_64 &rng)
        : X_(X), y_(y), cfg_(cfg), rng_(rng),
          features_per_split_(static_cast<int>((X.cols() + 2) / 3)) {}

    RegressionTree build(std::vector<Eigen::Index> rows) {
        tree_.nodes.clear();
        grow(rows, 0);
        return std::move(tree_);
    }

private:
    int grow(std::vector<Eigen::Index> &rows, int depth) {
        const int id = static_cast<int>(tree_.nodes.size());
        tree_.nodes.emplace_back();
        double sum = 0.0;
        double dev = 0.0;
        const double y0 = y_(rows.front());
        for (auto r : rows) {
            sum += y_(r);
            dev += y_(r) - y0;
        }
        const auto n = static_cast<double>(rows.size());
        // Offset form keeps a constant target exact.
        tree_.nodes[static_cast<std::size_t>(id)].value = y0 + dev / n;
        tree_.nodes[static_cast<std::size_t>(id)].count = static_cast<int>(rows.size());

        const auto min_leaf = static_cast<std::size_t>(std::max(cfg_.min_leaf, 1));
        if (depth >= cfg_.max_depth || rows.size() < 2 * min_leaf) return id;

        std::vector<int> feats(static_cast<std::size_t>(X_.cols()));
        std::iota(feats.begin(), feats.end(), 0);
        std::shuffle(feats.begin(), feats.end(), rng_);
        feats.resize(static_cast<std::size_t>(features_per_split_));

        // Maximize sum_L^2/n_L + sum_R^2/n_R, equivalent to the largest variance reduction.
        const double parent_score = sum * sum / n;
        double best_score = parent_score + 1e-12 * std::abs(parent_score) + 1e-300;
        int best_feature = -1;
        double best_threshold = 0.0;
        std::vector<Eigen::Index> order = rows;
        for (int f : feats) {
            std::sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) { return X_(a, f) < X_(b, f); });
            double left_sum = 0.0;
            for (std::size_t i = 0; i + 1 < order.size(); ++i) {
                left_sum += y_(order[i]);
                const std::size_t nl = i + 1;
                const std::size_t nr = order.size() - nl;
                const double xv = X_(order[i], f);
                const double xn = X_(order[i + 1], f);
                if (xv == xn || nl < min_leaf || nr < min_leaf) continue;
                const double right_sum = sum - left_sum;
                const double score = left_sum * left_sum / static_cast<double>(nl) +
                                     right_sum * right_sum / static_cast<double>(nr);
                if (score > best_score) {
                    best_score = score;
                    best_feature = f;
                    best_threshold = 0.5 * (xv + xn);
                    if (!(best_threshold > xv && best_threshold < xn)) best_threshold = xv;
                }
            }
        }
        if (best_feature < 0) return id;

        std::vector<Eigen::Index> left_rows, right_rows;
        for (auto r : rows) (X_(r, best_feature) <= best_threshold ? left_rows : right_rows).push_back(r);
        rows.clear();
        rows.shrink_to_fit();
        const int l = grow(left_rows, depth + 1);
        const int r = grow(right_rows, depth + 1);
        auto &node = tree_.nodes[static_cast<std::size_t>(id)];
        node.feature = best_feature;
        node.threshold = best_threshold;
        node.left = l;
        node.right = r;
        return id;
    }

    const Matrix &X_;
    const Vector &y_;
    const ForestConfig &cfg_;
    std::mt19937_64 &rng_;
    int features_per_split_;
    RegressionTree tree_;
};

inline void check_features(Eigen::Index expected, Eigen::Index got) {
    if (expected != got) {
        throw InvalidArgument("dimension mismatch: model expects " + std::to_string(expected) + " features, got " +
                              std::to_string(got));
    }
}

} // namespace detail

/// Bagged regression trees; each split considers ceil(d/3) random features.
inline ForestModel rf_fit(const FlatDataset &data, const ForestConfig &cfg = {}) {
    if (data.rows() == 0) throw DataError("rf_fit: empty dataset");
    data.validate();
    if (cfg.n_trees < 1 || cfg.max_depth < 0 || cfg.min_leaf < 1) {
        throw InvalidArgument("forest needs n_trees >= 1, max_depth >= 0, min_leaf >= 1");
    }
    if (data.rows() < cfg.min_leaf) throw DataError("rf_fit: fewer rows than min_leaf");
    ForestModel model;
    model.config = cfg;
    model.feature_names = data.feature_names;
    model.target_name = data.target_name;
    const auto n = static_cast<std::size_t>(data.rows());
    for (int t = 0; t < cfg.n_trees; ++t) {
        std::seed_seq seq{static_cast<std::uint32_t>(cfg.seed), static_cast<std::uint32_t>(cfg.seed >> 32),
                          static_cast<std::uint32_t>(t)};
        std::mt19937_64 rng(seq);
        std::uniform_int_distribution<Eigen::Index> pick(0, data.rows() - 1);
        std::vector<Eigen::Index> rows(n);
        if (cfg.bootstrap) {
            for (auto &r : rows) r = pick(rng);
        } else {
            std::iota(rows.begin(), rows.end(), Eigen::Index{0});
        }
        detail::TreeBuilder builder(data.inputs, data.targets, cfg, rng);
        model.trees.push_back(builder.build(std::move(rows)));
    }
    return model;
}

template <typename Derived>
double rf_predict(const ForestModel &model, const Eigen::MatrixBase<Derived> &x) {
    detail::check_features(model.dim(), x.size());
    const double first = model.trees.front().predict(x);
    double dev = 0.0;
    for (std::size_t t = 1; t < model.trees.size(); ++t) dev += model.trees[t].predict(x) - first;
    return first + dev / static_cast<double>(model.trees.size());
}

inline Vector rf_predict_batch(const ForestModel &model, const Matrix &X) {
    detail::check_features(model.dim(), X.cols());
    Vector out(X.rows());
    for (Eigen::Index i = 0; i < X.rows(); ++i) out(i) = rf_predict(model, X.row(i));
    return out;
}

// ---------------------------------------------------------------------------
// Multilayer perceptron: d -> h1 (ReLU) -> h2 (ReLU) -> 1 (linear)

struct MlpConfig {
    int h1 = 64;
    int h2 = 64;
    int epochs = 200;
    double step = 1e-3;
    /// Step at epoch e is step / (1 + decay * e).
    double decay = 1e-2;
    int batch = 32;
    std::uint64_t seed = 0;
};

struct MlpLayer {
    Matrix weights; // out x in
    Vector biases;
};

struct MlpModel {
    std::vector<MlpLayer> layers; // three layers; ReLU on the first two
    Standardizer standardizer;
    MlpConfig config;
    std::vector<std::string> feature_names;
    std::string target_name;

    [[nodiscard]] std::vector<int> layer_sizes() const {
        std::vector<int> s{static_cast<int>(layers.front().weights.cols())};
        for (const auto &l : layers) s.push_back(static_cast<int>(l.weights.rows()));
        return s;
    }

    [[nodiscard]] Eigen::Index num_params() const {
        Eigen::Index n = 0;
        for (const auto &l : layers) n += l.weights.size() + l.biases.size();
        return n;
    }

    /// Flattened parameters: per layer, weights (column-major) then biases.
    [[nodiscard]] Vector params() const {
        Vector p(num_params());
        Eigen::Index o = 0;
        for (const auto &l : layers) {
            p.segment(o, l.weights.size()) = l.weights.reshaped();
            o += l.weights.size();
            p.segment(o, l.biases.size()) = l.biases;
            o += l.biases.size();
        }
        return p;
    }

    void set_params(const Vector &p) {
        if (p.size() != num_params()) throw InvalidArgument("parameter vector has wrong length");
        Eigen::Index o = 0;
        for (auto &l : layers) {
            l.weights.reshaped() = p.segment(o, l.weights.size());
            o += l.weights.size();
            l.biases = p.segment(o, l.biases.size());
            o += l.biases.size();
        }
    }
};

/// He-initialized network for standardized inputs of width d.
inline MlpModel mlp_init(Eigen::Index d, const MlpConfig &cfg) {
    if (cfg.h1 < 1 || cfg.h2 < 1) throw InvalidArgument("hidden layer widths must be >= 1");
    MlpModel m;
    m.config = cfg;
    std::mt19937_64 rng(cfg.seed);
    auto layer = [&](Eigen::Index in, Eigen::Index out) {
        std::normal_distribution<double> nd(0.0, std::sqrt(2.0 / static_cast<double>(in)));
        MlpLayer l{Matrix(out, in), Vector::Zero(out)};
        for (Eigen::Index j = 0; j < in; ++j)
            for (Eigen::Index i = 0; i < out; ++i) l.weights(i, j) = nd(rng);
        return l;
    };
    m.layers.push_back(layer(d, cfg.h1));
    m.layers.push_back(layer(cfg.h1, cfg.h2));
    m.layers.push_back(layer(cfg.h2, 1));
    return m;
}

/// Forward pass on standardized rows (one column per sample); returns standardized outputs.
inline Vector mlp_forward(const MlpModel &m, const Matrix &Z) {
    Matrix a = Z;
    for (std::size_t k = 0; k < m.layers.size(); ++k) {
        Matrix h = (m.layers[k].weights * a).colwise() + m.layers[k].biases;
        a = k + 1 < m.layers.size() ? Matrix(h.cwiseMax(0.0)) : h;
    }
    return a.row(0).transpose();
}

struct MlpLossGrad {
    double loss = 0.0; // mean squared error / 2
    Vector gradient;   // flattened like MlpModel::params()
};

/// Half mean squared error on standardized data (columns = samples) and its backpropagated gradient.
inline MlpLossGrad mlp_loss_and_grad(const MlpModel &m, const Matrix &Z, const Vector &t) {
    const Eigen::Index n = Z.cols();
    std::vector<Matrix> acts{Z};
    std::vector<Matrix> pre;
    for (std::size_t k = 0; k < m.layers.size(); ++k) {
        Matrix h = (m.layers[k].weights * acts.back()).colwise() + m.layers[k].biases;
        pre.push_back(h);
        acts.push_back(k + 1 < m.layers.size() ? Matrix(h.cwiseMax(0.0)) : h);
    }
    const Vector err = acts.back().row(0).transpose() - t;
    MlpLossGrad out;
    out.loss = 0.5 * err.squaredNorm() / static_cast<double>(n);
    Matrix delta = err.transpose() / static_cast<double>(n); // 1 x n
    std::vector<std::pair<Matrix, Vector>> grads(m.layers.size());
    for (std::size_t k = m.layers.size(); k-- > 0;) {
        grads[k].first = delta * acts[k].transpose();
        grads[k].second = delta.rowwise().sum();
        if (k > 0) {
            delta = (m.layers[k].weights.transpose() * delta).cwiseProduct(
                (pre[k - 1].array() > 0.0).cast<double>().matrix());
        }
    }
    out.gradient.resize(m.num_params());
    Eigen::Index o = 0;
    for (const auto &[gw, gb] : grads) {
        out.gradient.segment(o, gw.size()) = gw.reshaped();
        o += gw.size();
        out.gradient.segment(o, gb.size()) = gb;
        o += gb.size();
    }
    return out;
}

/// Mini-batch training with Adam on squared error over standardized data.
inline MlpModel mlp_fit(const FlatDataset &data, const MlpConfig &cfg = {}) {
    if (data.rows() == 0) throw DataError("mlp_fit: empty dataset");
    data.validate();
    if (cfg.epochs < 0 || cfg.batch < 1 || !(cfg.step > 0.0)) {
        throw InvalidArgument("mlp needs epochs >= 0, batch >= 1, step > 0");
    }
    MlpModel m = mlp_init(data.dim(), cfg);
    m.standardizer = standardize_fit(data);
    m.feature_names = data.feature_names;
    m.target_name = data.target_name;
    const Matrix Z = m.standardizer.apply_rows(data.inputs).transpose();
    const Vector t = m.standardizer.apply_targets(data.targets);

    Vector p = m.params();
    Vector m1 = Vector::Zero(p.size()), m2 = Vector::Zero(p.size());
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
    std::vector<Eigen::Index> order(static_cast<std::size_t>(data.rows()));
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    long step_count = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        const double lr = cfg.step / (1.0 + cfg.decay * epoch);
        double epoch_loss = 0.0;
        for (std::size_t s = 0; s < order.size(); s += static_cast<std::size_t>(cfg.batch)) {
            const std::size_t e = std::min(order.size(), s + static_cast<std::size_t>(cfg.batch));
            Matrix Zb(Z.rows(), static_cast<Eigen::Index>(e - s));
            Vector tb(static_cast<Eigen::Index>(e - s));
            for (std::size_t i = s; i < e; ++i) {
                Zb.col(static_cast<Eigen::Index>(i - s)) = Z.col(order[i]);
                tb(static_cast<Eigen::Index>(i - s)) = t(order[i]);
            }
            m.set_params(p);
            const MlpLossGrad lg = mlp_loss_and_grad(m, Zb, tb);
            if (!std::isfinite(lg.loss) || !lg.gradient.allFinite()) {
                throw NumericalError("mlp training diverged at epoch " + std::to_string(epoch));
            }
            epoch_loss += lg.loss * static_cast<double>(e - s);
            ++step_count;
            m1 = b1 * m1 + (1.0 - b1) * lg.gradient;
            m2 = b2 * m2 + (1.0 - b2) * lg.gradient.cwiseAbs2();
            const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_count));
            const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_count));
            p.array() -= lr * (m1.array() / c1) / ((m2.array() / c2).sqrt() + eps);
        }
        if (!std::isfinite(epoch_loss)) throw NumericalError("mlp training diverged at epoch " + std::to_string(epoch));
    }
    m.set_params(p);
    return m;
}

template <typename Derived>
double mlp_predict(const MlpModel &m, const Eigen::MatrixBase<Derived> &x) {
    detail::check_features(static_cast<Eigen::Index>(m.feature_names.size()), x.size());
    const Vector z = m.standardizer.apply(x);
    return m.standardizer.invert_target(mlp_forward(m, z)(0));
}

inline Vector mlp_predict_batch(const MlpModel &m, const Matrix &X) {
    detail::check_features(static_cast<Eigen::Index>(m.feature_names.size()), X.cols());
    return m.standardizer.invert_targets(mlp_forward(m, m.standardizer.apply_rows(X).transpose()));
}

} // namespace gpsurr
