#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <vector>

#include <Eigen/Dense>

#include "cast/detail/parallel.hpp"
#include "cast/detail/rng.hpp"
#include "cast/error.hpp"

namespace cast {

struct ForestParams {
  std::size_t trees = 5000;
  double subsample = 0.5;
  double honesty_fraction = 0.5;
  std::size_t min_node = 5;
  std::size_t mtry = 0;  // 0: min(ceil(sqrt(p) + 20), p)
  // Trees per shared half-sample; the between-group spread drives the
  // prediction variance. Values below 2 disable variance estimates.
  std::size_t group_size = 10;
  // Penalty on unbalanced splits: gain * (1 - penalty * |nL - nR| / n).
  double imbalance_penalty = 0.0;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  bool keep_samples = false;  // retain subsample rows for out-of-bag use
};

struct TreeNode {
  int feature = -1;  // -1 marks a leaf
  double threshold = 0.0;
  int left = -1;
  int right = -1;
  int depth = 0;
  double value = 0.0;
  std::size_t count = 0;  // estimation-sample count
};

struct RegressionTree {
  std::vector<TreeNode> nodes;
  std::vector<std::uint32_t> sample;  // sorted subsample rows when kept

  template <typename Row>
  double predict(const Row& row) const {
    int k = 0;
    while (nodes[static_cast<std::size_t>(k)].feature >= 0) {
      const auto& n = nodes[static_cast<std::size_t>(k)];
      k = row(n.feature) <= n.threshold ? n.left : n.right;
    }
    return nodes[static_cast<std::size_t>(k)].value;
  }

  std::size_t leaf_count() const {
    return static_cast<std::size_t>(std::count_if(nodes.begin(), nodes.end(),
                                                  [](const TreeNode& n) { return n.feature < 0; }));
  }
};

struct ForestPrediction {
  std::vector<double> mean;
  std::vector<double> variance;  // NaN when the forest has no tree groups
};

namespace detail {

inline std::size_t default_mtry(std::size_t p) {
  return std::min<std::size_t>(static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(p)) + 20.0)), p);
}

// Mean of v computed as v[0] + mean(v - v[0]), exact when all entries agree.
inline double shifted_mean(const std::vector<double>& v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  double acc = 0.0;
  for (double x : v) acc += x - v[0];
  return v[0] + acc / static_cast<double>(v.size());
}

// Little-bags variance: between-group spread of group means minus the
// Monte Carlo part explained by within-group spread.
inline double grouped_variance(const std::vector<double>& per_tree, std::size_t group_size) {
  if (group_size < 2 || per_tree.size() < 2 * group_size) return std::numeric_limits<double>::quiet_NaN();
  const std::size_t groups = per_tree.size() / group_size;
  std::vector<double> means(groups);
  double within = 0.0;
  std::vector<double> buf(group_size);
  for (std::size_t g = 0; g < groups; ++g) {
    std::copy_n(per_tree.begin() + static_cast<std::ptrdiff_t>(g * group_size), group_size, buf.begin());
    means[g] = shifted_mean(buf);
    for (double v : buf) within += (v - means[g]) * (v - means[g]);
  }
  const double grand = shifted_mean(means);
  double between = 0.0;
  for (double m : means) between += (m - grand) * (m - grand);
  between /= static_cast<double>(groups - 1);
  within /= static_cast<double>(groups * group_size * (group_size - 1));
  return std::max(0.0, between - within);
}

class TreeBuilder {
 public:
  TreeBuilder(const Eigen::MatrixXd& x, const std::vector<double>& y, const std::vector<double>& w,
              const ForestParams& params)
      : x_(x), y_(y), w_(w), params_(params), mtry_(params.mtry ? std::min<std::size_t>(params.mtry, static_cast<std::size_t>(x.cols())) : default_mtry(static_cast<std::size_t>(x.cols()))) {}

  RegressionTree build(std::size_t tree_index) const {
    const std::size_t n = static_cast<std::size_t>(x_.rows());
    const std::size_t group_size = std::max<std::size_t>(params_.group_size, 1);
    std::vector<std::size_t> pool;
    if (group_size >= 2) {
      auto grng = make_engine(params_.seed, Stream::TreeGroup, tree_index / group_size);
      pool = sample_without_replacement(n, n / 2, grng);
    } else {
      pool.resize(n);
      std::iota(pool.begin(), pool.end(), std::size_t{0});
    }
    auto rng = make_engine(params_.seed, Stream::Tree, tree_index);
    const auto want = static_cast<std::size_t>(std::llround(params_.subsample * static_cast<double>(n)));
    const auto pick = sample_without_replacement(pool.size(), std::min(want, pool.size()), rng);
    std::vector<std::size_t> sample(pick.size());
    for (std::size_t k = 0; k < pick.size(); ++k) sample[k] = pool[pick[k]];

    RegressionTree tree;
    if (params_.keep_samples) tree.sample.assign(sample.begin(), sample.end());

    shuffle(sample, rng);
    const auto n_struct = static_cast<std::size_t>(std::floor(params_.honesty_fraction * static_cast<double>(sample.size())));
    std::vector<std::size_t> structure(sample.begin(), sample.begin() + static_cast<std::ptrdiff_t>(n_struct));
    std::vector<std::size_t> estimation(sample.begin() + static_cast<std::ptrdiff_t>(n_struct), sample.end());
    if (structure.empty() || estimation.empty()) structure = estimation = sample;

    grow(tree, structure, rng);
    fill_leaves(tree, estimation, structure);
    return tree;
  }

 private:
  struct Pending {
    int node;
    std::size_t begin, end;
  };

  void grow(RegressionTree& tree, std::vector<std::size_t>& idx, Engine& rng) const {
    const std::size_t p = static_cast<std::size_t>(x_.cols());
    tree.nodes.push_back(TreeNode{});
    std::vector<Pending> stack{{0, 0, idx.size()}};
    std::vector<std::pair<double, std::size_t>> buf;
    while (!stack.empty()) {
      const auto cur = stack.back();
      stack.pop_back();
      const std::size_t m = cur.end - cur.begin;
      if (m < 2 * params_.min_node || p == 0) continue;

      double wsum = 0, ysum = 0;
      const double center = y_[idx[cur.begin]];
      for (std::size_t k = cur.begin; k < cur.end; ++k) {
        wsum += w_[idx[k]];
        ysum += w_[idx[k]] * (y_[idx[k]] - center);
      }
      if (!(wsum > 0)) continue;
      const double base = ysum * ysum / wsum;

      auto features = sample_without_replacement(p, mtry_, rng);
      double best_gain = 0.0;
      int best_feature = -1;
      double best_threshold = 0.0;
      for (std::size_t f : features) {
        buf.clear();
        for (std::size_t k = cur.begin; k < cur.end; ++k)
          buf.emplace_back(x_(static_cast<Eigen::Index>(idx[k]), static_cast<Eigen::Index>(f)), idx[k]);
        std::sort(buf.begin(), buf.end());
        if (buf.front().first == buf.back().first) continue;
        double wl = 0, sl = 0;
        for (std::size_t k = 0; k + 1 < m; ++k) {
          const std::size_t i = buf[k].second;
          wl += w_[i];
          sl += w_[i] * (y_[i] - center);
          const std::size_t nl = k + 1;
          if (buf[k].first == buf[k + 1].first) continue;
          if (nl < params_.min_node || m - nl < params_.min_node) continue;
          const double wr = wsum - wl;
          if (!(wl > 0) || !(wr > 0)) continue;
          const double sr = ysum - sl;
          double gain = sl * sl / wl + sr * sr / wr - base;
          if (params_.imbalance_penalty > 0)
            gain *= 1.0 - params_.imbalance_penalty *
                              std::abs(static_cast<double>(nl) - static_cast<double>(m - nl)) /
                              static_cast<double>(m);
          const double threshold = 0.5 * (buf[k].first + buf[k + 1].first);
          // Features arrive sorted and thresholds ascend, so a strict
          // comparison keeps the lowest feature, then lowest threshold.
          if (gain > best_gain) {
            best_gain = gain;
            best_feature = static_cast<int>(f);
            best_threshold = threshold;
          }
        }
      }
      if (best_feature < 0 || !(best_gain > 1e-12 * (1.0 + std::abs(base)))) continue;

      const auto mid = std::partition(idx.begin() + static_cast<std::ptrdiff_t>(cur.begin),
                                      idx.begin() + static_cast<std::ptrdiff_t>(cur.end), [&](std::size_t i) {
                                        return x_(static_cast<Eigen::Index>(i), best_feature) <= best_threshold;
                                      });
      const std::size_t split = static_cast<std::size_t>(mid - idx.begin());
      const int left = static_cast<int>(tree.nodes.size());
      const int depth = tree.nodes[static_cast<std::size_t>(cur.node)].depth + 1;
      tree.nodes.push_back(TreeNode{-1, 0.0, -1, -1, depth, 0.0, 0});
      tree.nodes.push_back(TreeNode{-1, 0.0, -1, -1, depth, 0.0, 0});
      auto& node = tree.nodes[static_cast<std::size_t>(cur.node)];
      node.feature = best_feature;
      node.threshold = best_threshold;
      node.left = left;
      node.right = left + 1;
      stack.push_back({left + 1, split, cur.end});
      stack.push_back({left, cur.begin, split});
    }
  }

  // Routes the estimation half, prunes leaves below min_node, then sets leaf
  // values to weighted means. Falls back to the structure half only if the
  // root itself received no estimation sample.
  void fill_leaves(RegressionTree& tree, const std::vector<std::size_t>& estimation,
                   const std::vector<std::size_t>& structure) const {
    std::vector<std::vector<std::size_t>> members(tree.nodes.size());
    auto route = [&](std::size_t i) {
      int k = 0;
      while (tree.nodes[static_cast<std::size_t>(k)].feature >= 0) {
        const auto& n = tree.nodes[static_cast<std::size_t>(k)];
        k = x_(static_cast<Eigen::Index>(i), n.feature) <= n.threshold ? n.left : n.right;
      }
      return k;
    };
    for (auto i : estimation) members[static_cast<std::size_t>(route(i))].push_back(i);
    prune(tree, 0, members);
    compact(tree, members);
    for (std::size_t k = 0; k < tree.nodes.size(); ++k) {
      auto& node = tree.nodes[k];
      if (node.feature >= 0) continue;
      const auto& mem = members[k].empty() && k == 0 ? structure : members[k];
      node.count = members[k].size();
      if (mem.empty()) continue;
      const double center = y_[mem.front()];
      double ws = 0, s = 0;
      for (auto i : mem) {
        ws += w_[i];
        s += w_[i] * (y_[i] - center);
      }
      node.value = ws > 0 ? center + s / ws : center;
    }
  }

  // Collapses any split with a child leaf holding fewer than min_node
  // estimation samples; returns the node's estimation count.
  std::size_t prune(RegressionTree& tree, int k, std::vector<std::vector<std::size_t>>& members) const {
    auto& node = tree.nodes[static_cast<std::size_t>(k)];
    if (node.feature < 0) return members[static_cast<std::size_t>(k)].size();
    const int l = node.left, r = node.right;
    prune(tree, l, members);
    prune(tree, r, members);
    auto small_leaf = [&](int c) {
      return tree.nodes[static_cast<std::size_t>(c)].feature < 0 &&
             members[static_cast<std::size_t>(c)].size() < params_.min_node;
    };
    if (small_leaf(l) || small_leaf(r)) {
      auto& mine = members[static_cast<std::size_t>(k)];
      collect(tree, l, members, mine);
      collect(tree, r, members, mine);
      std::sort(mine.begin(), mine.end());
      auto& n = tree.nodes[static_cast<std::size_t>(k)];
      n.feature = -1;
      n.left = n.right = -1;
    }
    return members[static_cast<std::size_t>(k)].size();
  }

  static void collect(RegressionTree& tree, int k, std::vector<std::vector<std::size_t>>& members,
                      std::vector<std::size_t>& out) {
    auto& node = tree.nodes[static_cast<std::size_t>(k)];
    if (node.feature < 0) {
      auto& m = members[static_cast<std::size_t>(k)];
      out.insert(out.end(), m.begin(), m.end());
      m.clear();
      return;
    }
    collect(tree, node.left, members, out);
    collect(tree, node.right, members, out);
  }

  // Drops nodes orphaned by pruning, keeping preorder.
  static void compact(RegressionTree& tree, std::vector<std::vector<std::size_t>>& members) {
    std::vector<TreeNode> nodes;
    std::vector<std::vector<std::size_t>> mem;
    std::vector<int> remap(tree.nodes.size(), -1);
    std::vector<int> order;
    std::vector<int> st{0};
    while (!st.empty()) {
      const int k = st.back();
      st.pop_back();
      order.push_back(k);
      const auto& n = tree.nodes[static_cast<std::size_t>(k)];
      if (n.feature >= 0) {
        st.push_back(n.right);
        st.push_back(n.left);
      }
    }
    for (std::size_t j = 0; j < order.size(); ++j) remap[static_cast<std::size_t>(order[j])] = static_cast<int>(j);
    for (int k : order) {
      TreeNode n = tree.nodes[static_cast<std::size_t>(k)];
      if (n.feature >= 0) {
        n.left = remap[static_cast<std::size_t>(n.left)];
        n.right = remap[static_cast<std::size_t>(n.right)];
      }
      nodes.push_back(n);
      mem.push_back(std::move(members[static_cast<std::size_t>(k)]));
    }
    tree.nodes = std::move(nodes);
    members = std::move(mem);
  }

  const Eigen::MatrixXd& x_;
  const std::vector<double>& y_;
  const std::vector<double>& w_;
  const ForestParams& params_;
  std::size_t mtry_;
};

}  // namespace detail

class RegressionForest {
 public:
  RegressionForest() = default;

  // Honest regression forest on (x, y) with optional sample weights.
  static RegressionForest fit(const Eigen::MatrixXd& x, const std::vector<double>& y, const ForestParams& params,
                              const std::vector<double>& weights = {}) {
    const auto n = static_cast<std::size_t>(x.rows());
    if (y.size() != n) throw Error(ErrorCode::DimensionMismatch, "outcome length does not match rows");
    if (!weights.empty() && weights.size() != n)
      throw Error(ErrorCode::DimensionMismatch, "weight length does not match rows");
    if (params.min_node == 0) throw Error(ErrorCode::ConfigError, "min node size must be positive");
    if (n < 4 * params.min_node)
      throw Error(ErrorCode::TooSmall, std::to_string(n) + " rows is fewer than 4 x min node size " +
                                           std::to_string(params.min_node));
    if (!(params.subsample > 0 && params.subsample <= 1))
      throw Error(ErrorCode::ConfigError, "subsample fraction must lie in (0, 1]");
    if (params.trees == 0) throw Error(ErrorCode::ConfigError, "forest needs at least one tree");

    const std::vector<double> w = weights.empty() ? std::vector<double>(n, 1.0) : weights;
    RegressionForest forest;
    forest.params_ = params;
    forest.dim_ = static_cast<std::size_t>(x.cols());
    forest.rows_ = n;
    std::size_t trees = params.trees;
    if (params.group_size >= 2) trees = (trees + params.group_size - 1) / params.group_size * params.group_size;
    forest.trees_.resize(trees);
    const detail::TreeBuilder builder(x, y, w, forest.params_);
    detail::parallel_for(trees, params.threads, [&](std::size_t t) { forest.trees_[t] = builder.build(t); });
    return forest;
  }

  const ForestParams& params() const { return params_; }
  std::size_t dim() const { return dim_; }
  std::size_t size() const { return trees_.size(); }
  const std::vector<RegressionTree>& trees() const { return trees_; }
  std::vector<RegressionTree>& mutable_trees() { return trees_; }

  // Per-tree predictions for one row of x.
  std::vector<double> tree_predictions(const Eigen::MatrixXd& x, Eigen::Index i) const {
    std::vector<double> out(trees_.size());
    const auto row = x.row(i);
    for (std::size_t t = 0; t < trees_.size(); ++t) out[t] = trees_[t].predict(row);
    return out;
  }

  ForestPrediction predict(const Eigen::MatrixXd& x, std::size_t threads = 1) const {
    check_dim(x);
    const auto n = static_cast<std::size_t>(x.rows());
    ForestPrediction out;
    out.mean.resize(n);
    out.variance.resize(n);
    detail::parallel_for(n, threads, [&](std::size_t i) {
      const auto v = tree_predictions(x, static_cast<Eigen::Index>(i));
      out.mean[i] = detail::shifted_mean(v);
      out.variance[i] = detail::grouped_variance(v, params_.group_size);
    });
    return out;
  }

  std::vector<double> predict_mean(const Eigen::MatrixXd& x, std::size_t threads = 1) const {
    check_dim(x);
    std::vector<double> out(static_cast<std::size_t>(x.rows()));
    detail::parallel_for(out.size(), threads, [&](std::size_t i) {
      out[i] = detail::shifted_mean(tree_predictions(x, static_cast<Eigen::Index>(i)));
    });
    return out;
  }

  // Variance of the forest's average prediction over all rows of x.
  double average_prediction_variance(const Eigen::MatrixXd& x) const {
    check_dim(x);
    std::vector<double> per_tree(trees_.size(), 0.0);
    for (std::size_t t = 0; t < trees_.size(); ++t) {
      double s = 0;
      for (Eigen::Index i = 0; i < x.rows(); ++i) s += trees_[t].predict(x.row(i));
      per_tree[t] = s / static_cast<double>(x.rows());
    }
    return detail::grouped_variance(per_tree, params_.group_size);
  }

  // Out-of-bag predictions for the training rows; NaN where a row was in
  // every tree's subsample. Requires keep_samples.
  std::vector<double> oob_predictions(const Eigen::MatrixXd& x) const {
    if (!params_.keep_samples) throw Error(ErrorCode::ConfigError, "forest was fit without keep_samples");
    const auto n = static_cast<std::size_t>(x.rows());
    std::vector<std::vector<double>> preds(n);
    std::vector<char> in(n);
    for (const auto& tree : trees_) {
      std::fill(in.begin(), in.end(), 0);
      for (auto i : tree.sample) in[i] = 1;
      for (std::size_t i = 0; i < n; ++i)
        if (!in[i]) preds[i].push_back(tree.predict(x.row(static_cast<Eigen::Index>(i))));
    }
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = detail::shifted_mean(preds[i]);
    return out;
  }

  // Split-frequency importance over the first `max_depth` levels, level k
  // weighted by k^-decay and normalized so importances sum to 1.
  std::vector<double> importance(int max_depth = 4, double decay = 2.0) const {
    std::vector<std::vector<double>> counts(static_cast<std::size_t>(max_depth), std::vector<double>(dim_, 0.0));
    for (const auto& tree : trees_)
      for (const auto& n : tree.nodes)
        if (n.feature >= 0 && n.depth < max_depth)
          counts[static_cast<std::size_t>(n.depth)][static_cast<std::size_t>(n.feature)] += 1.0;
    std::vector<double> imp(dim_, 0.0);
    for (int k = 0; k < max_depth; ++k) {
      const auto& row = counts[static_cast<std::size_t>(k)];
      const double total = std::accumulate(row.begin(), row.end(), 0.0);
      const double wk = std::pow(static_cast<double>(k + 1), -decay);
      if (total <= 0) continue;
      for (std::size_t j = 0; j < dim_; ++j) imp[j] += wk * row[j] / total;
    }
    const double s = std::accumulate(imp.begin(), imp.end(), 0.0);
    if (s > 0)
      for (auto& v : imp) v /= s;
    return imp;
  }

 private:
  void check_dim(const Eigen::MatrixXd& x) const {
    if (static_cast<std::size_t>(x.cols()) != dim_)
      throw Error(ErrorCode::DimensionMismatch, "forest expects " + std::to_string(dim_) + " features, got " +
                                                    std::to_string(x.cols()));
  }

  ForestParams params_;
  std::size_t dim_ = 0;
  std::size_t rows_ = 0;
  std::vector<RegressionTree> trees_;
};

struct TuningGrid {
  std::vector<std::size_t> min_node{5, 15, 30};
  std::vector<double> subsample{0.4, 0.5};
  std::size_t trees = 200;
};

struct TuningResult {
  std::size_t min_node = 5;
  double subsample = 0.5;
  double oob_mse = std::numeric_limits<double>::quiet_NaN();
  std::vector<double> candidate_mse;  // grid order: min_node major
};

// Picks (min_node, subsample) by out-of-bag MSE; first minimum wins.
// Candidates whose min node size is too large for the data are skipped.
inline TuningResult tune_forest(const Eigen::MatrixXd& x, const std::vector<double>& y, ForestParams base,
                                const TuningGrid& grid, const std::vector<double>& weights = {}) {
  TuningResult best;
  bool found = false;
  base.trees = grid.trees;
  base.keep_samples = true;
  for (std::size_t mn : grid.min_node) {
    for (double ss : grid.subsample) {
      if (static_cast<std::size_t>(x.rows()) < 4 * mn) {
        best.candidate_mse.push_back(std::numeric_limits<double>::quiet_NaN());
        continue;
      }
      ForestParams p = base;
      p.min_node = mn;
      p.subsample = ss;
      const auto forest = RegressionForest::fit(x, y, p, weights);
      const auto oob = forest.oob_predictions(x);
      double se = 0, ws = 0;
      for (std::size_t i = 0; i < y.size(); ++i) {
        if (std::isnan(oob[i])) continue;
        const double w = weights.empty() ? 1.0 : weights[i];
        se += w * (oob[i] - y[i]) * (oob[i] - y[i]);
        ws += w;
      }
      const double mse = ws > 0 ? se / ws : std::numeric_limits<double>::infinity();
      best.candidate_mse.push_back(mse);
      if (!found || mse < best.oob_mse) {
        found = true;
        best.min_node = mn;
        best.subsample = ss;
        best.oob_mse = mse;
      }
    }
  }
  if (!found)
    throw Error(ErrorCode::TooSmall, std::to_string(x.rows()) + " rows is too few for every min node size");
  return best;
}

}  // namespace cast
