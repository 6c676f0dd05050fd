#pragma once

#include "brainfold/common.hpp"
#include "brainfold/io.hpp"
#include "brainfold/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace brainfold {

// ---------------------------------------------------------------------------
// Model representation
// ---------------------------------------------------------------------------

enum class RegressorKind { knn, ridge, random_forest };

inline const char* regressor_kind_name(RegressorKind k) {
  switch (k) {
    case RegressorKind::knn: return "knn";
    case RegressorKind::ridge: return "ridge";
    default: return "random_forest";
  }
}

inline RegressorKind regressor_kind_from_name(const std::string& name) {
  if (name == "knn") return RegressorKind::knn;
  if (name == "ridge") return RegressorKind::ridge;
  if (name == "random_forest") return RegressorKind::random_forest;
  fail("regressor", "unknown regressor kind '" + name + "'");
}

struct ForestParams {
  int tree_count = 100;
  int max_depth = 12;
  int min_leaf = 2;
  int features_per_split = 0;  // 0 -> ceil(sqrt(D))
  bool bootstrap = true;
  std::uint64_t seed = 0;

  void validate() const {
    const std::string stage = "regressor";
    require(tree_count >= 1, stage, "tree count must be >= 1");
    require(max_depth >= 0 && max_depth <= 60, stage, "max depth must be in [0, 60]");
    require(min_leaf >= 1, stage, "min leaf must be >= 1");
    require(features_per_split >= 0, stage, "features per split must be >= 0");
  }

  int resolved_features(Eigen::Index dim) const {
    if (features_per_split > 0)
      return std::min<int>(features_per_split, static_cast<int>(dim));
    return static_cast<int>(
        std::ceil(std::sqrt(static_cast<double>(dim))));
  }
};

/// One node of a regression tree. Internal nodes route x[feature] < threshold
/// to `left`, the rest to `right`; leaves carry the mean target vector.
struct TreeNode {
  bool is_leaf = true;
  int feature = -1;
  double threshold = 0.0;
  std::uint32_t left = 0;
  std::uint32_t right = 0;
  Vec value;  // leaves only
};

struct RegressionTree {
  std::vector<TreeNode> nodes;  // root at index 0

  const Vec& predict(const Vec& x) const {
    std::uint32_t at = 0;
    while (!nodes[at].is_leaf)
      at = x[nodes[at].feature] < nodes[at].threshold ? nodes[at].left : nodes[at].right;
    return nodes[at].value;
  }
};

/// A fitted regressor. `kind` selects which field group is meaningful:
/// stored pairs for k-NN, the bias-augmented weight matrix for ridge, the
/// tree list for forests.
struct RegressorModel {
  RegressorKind kind = RegressorKind::knn;
  Eigen::Index input_dim = 0;
  Eigen::Index output_dim = 0;
  std::uint32_t train_count = 0;

  Mat train_x;  // knn: N x D
  Mat train_y;  // knn: N x F
  int k = 5;

  Mat weights;          // ridge: (D+1) x F, bias in the last row
  double lambda = 1.0;  // ridge penalty

  std::vector<RegressionTree> trees;
  ForestParams forest;

  std::string params_summary() const {
    switch (kind) {
      case RegressorKind::knn: return "k=" + std::to_string(k);
      case RegressorKind::ridge: return "lambda=" + format_fixed(lambda, 6);
      default:
        return "trees=" + std::to_string(forest.tree_count) +
               " depth=" + std::to_string(forest.max_depth) +
               " min_leaf=" + std::to_string(forest.min_leaf) +
               " mtry=" + std::to_string(forest.resolved_features(input_dim));
    }
  }
};

namespace detail {

inline void check_training_pairs(const Mat& x, const Mat& y, const std::string& stage) {
  require(x.rows() >= 1, stage, "training set is empty");
  require(x.rows() == y.rows(), stage, "input/target pair counts differ");
  require(x.cols() >= 1 && y.cols() >= 1, stage, "zero-dimensional training data");
  require(x.allFinite() && y.allFinite(), stage, "non-finite training data");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// k-NN
// ---------------------------------------------------------------------------

/// Stores the training pairs verbatim; prediction is the unweighted mean of
/// the k nearest targets under Euclidean distance.
inline RegressorModel fit_knn(const Mat& x, const Mat& y, int k) {
  const std::string stage = "regressor";
  detail::check_training_pairs(x, y, stage);
  require(k >= 1, stage, "k must be >= 1");
  require(k <= x.rows(), stage,
          "k=" + std::to_string(k) + " exceeds the training size " + std::to_string(x.rows()));
  RegressorModel m;
  m.kind = RegressorKind::knn;
  m.input_dim = x.cols();
  m.output_dim = y.cols();
  m.train_count = static_cast<std::uint32_t>(x.rows());
  m.train_x = x;
  m.train_y = y;
  m.k = k;
  return m;
}

// ---------------------------------------------------------------------------
// Ridge
// ---------------------------------------------------------------------------

/// Solves (AtA + lambda*P) W = AtY on bias-augmented inputs A = [X | 1],
/// where P is the identity with the bias row left unpenalized, via Cholesky.
inline RegressorModel fit_ridge(const Mat& x, const Mat& y, double lambda) {
  const std::string stage = "regressor";
  detail::check_training_pairs(x, y, stage);
  require(lambda >= 0.0, stage, "lambda must be >= 0");
  const Eigen::Index n = x.rows();
  const Eigen::Index d = x.cols();
  Mat a(n, d + 1);
  a.leftCols(d) = x;
  a.col(d).setOnes();
  Mat gram = a.transpose() * a;
  for (Eigen::Index i = 0; i < d; ++i) gram(i, i) += lambda;
  const Mat rhs = a.transpose() * y;
  Eigen::LLT<Mat> llt(gram);
  require(llt.info() == Eigen::Success && llt.rcond() > 1e-12, stage,
          "normal equations are singular (rank-deficient inputs); use lambda > 0");
  Mat w = llt.solve(rhs);
  const double residual = (gram * w - rhs).cwiseAbs().maxCoeff();
  const double scale = std::max(1.0, rhs.cwiseAbs().maxCoeff());
  require(std::isfinite(residual) && residual / scale < 1e-6, stage,
          "normal equations are ill-conditioned; use lambda > 0");
  RegressorModel m;
  m.kind = RegressorKind::ridge;
  m.input_dim = d;
  m.output_dim = y.cols();
  m.train_count = static_cast<std::uint32_t>(n);
  m.weights = std::move(w);
  m.lambda = lambda;
  return m;
}

// ---------------------------------------------------------------------------
// Random forest
// ---------------------------------------------------------------------------

namespace detail {

struct SplitChoice {
  bool found = false;
  int feature = -1;
  double threshold = 0.0;
  double score = 0.0;  // SSE(left) + SSE(right), smaller is better
};

/// Scans one feature for the best midpoint threshold by sweeping samples in
/// ascending value order and maintaining left-side sums of the centred
/// targets. Ties keep the earlier (lower threshold) candidate.
inline void scan_feature(const Mat& x, const Mat& y, const std::vector<int>& samples,
                         const Vec& node_mean, int feature, int min_leaf,
                         SplitChoice& best) {
  const Eigen::Index f_dim = y.cols();
  std::vector<int> order = samples;
  std::sort(order.begin(), order.end(), [&](int lhs, int rhs) {
    const double a = x(lhs, feature);
    const double b = x(rhs, feature);
    return a != b ? a < b : lhs < rhs;
  });
  const std::size_t n = order.size();

  Vec total_sum = Vec::Zero(f_dim);
  double total_sumsq = 0.0;
  for (int i : order) {
    const Vec z = y.row(i).transpose() - node_mean;
    total_sum += z;
    total_sumsq += z.squaredNorm();
  }

  Vec left_sum = Vec::Zero(f_dim);
  double left_sumsq = 0.0;
  for (std::size_t j = 0; j + 1 < n; ++j) {
    const Vec z = y.row(order[j]).transpose() - node_mean;
    left_sum += z;
    left_sumsq += z.squaredNorm();
    const double lo = x(order[j], feature);
    const double hi = x(order[j + 1], feature);
    if (lo == hi) continue;
    const double threshold = lo + (hi - lo) / 2.0;
    if (!(threshold > lo)) continue;  // adjacent doubles: cannot separate
    const std::size_t n_left = j + 1;
    const std::size_t n_right = n - n_left;
    if (n_left < static_cast<std::size_t>(min_leaf) ||
        n_right < static_cast<std::size_t>(min_leaf))
      continue;
    const double sse_left =
        left_sumsq - left_sum.squaredNorm() / static_cast<double>(n_left);
    const Vec right_sum = total_sum - left_sum;
    const double sse_right = (total_sumsq - left_sumsq) -
                             right_sum.squaredNorm() / static_cast<double>(n_right);
    const double score = sse_left + sse_right;
    if (!best.found || score < best.score) {
      best.found = true;
      best.feature = feature;
      best.threshold = threshold;
      best.score = score;
    }
  }
}

inline Vec mean_rows(const Mat& y, const std::vector<int>& samples) {
  Vec mean = Vec::Zero(y.cols());
  for (int i : samples) mean += y.row(i).transpose();
  return mean / static_cast<double>(samples.size());
}

/// `path` encodes the left/right decisions from the root (with a leading
/// sentinel bit), so each node's feature subset depends only on its position
/// in the tree. Raising max_depth then extends a shallower tree instead of
/// reshuffling it, which keeps training error monotone in depth.
inline std::uint32_t grow_tree(const Mat& x, const Mat& y, std::vector<int> samples,
                               int depth, std::uint64_t path, std::uint64_t tree_seed,
                               const ForestParams& params, RegressionTree& tree) {
  const std::uint32_t index = static_cast<std::uint32_t>(tree.nodes.size());
  tree.nodes.emplace_back();
  const Vec node_mean = mean_rows(y, samples);

  bool splittable = depth < params.max_depth &&
                    samples.size() >= 2 * static_cast<std::size_t>(params.min_leaf);
  SplitChoice best;
  if (splittable) {
    Rng rng = substream(tree_seed, {0xfea7, path});
    std::vector<int> candidates =
        rng.sample_indices(static_cast<int>(x.cols()),
                           params.resolved_features(x.cols()));
    std::sort(candidates.begin(), candidates.end());
    for (int feature : candidates)
      scan_feature(x, y, samples, node_mean, feature, params.min_leaf, best);
  }

  if (!best.found) {
    tree.nodes[index].is_leaf = true;
    tree.nodes[index].value = node_mean;
    return index;
  }

  std::vector<int> left, right;
  for (int i : samples)
    (x(i, best.feature) < best.threshold ? left : right).push_back(i);
  samples.clear();
  samples.shrink_to_fit();

  const std::uint32_t left_child =
      grow_tree(x, y, std::move(left), depth + 1, path << 1, tree_seed, params, tree);
  const std::uint32_t right_child =
      grow_tree(x, y, std::move(right), depth + 1, (path << 1) | 1u, tree_seed, params, tree);
  TreeNode& node = tree.nodes[index];
  node.is_leaf = false;
  node.feature = best.feature;
  node.threshold = best.threshold;
  node.left = left_child;
  node.right = right_child;
  return index;
}

}  // namespace detail

/// Bagged CART regression trees. Splits maximize the reduction of summed
/// per-component target variance; leaves store mean target vectors; the
/// prediction is the mean over trees. Each tree draws its bootstrap sample
/// and feature subsets from seed + tree index, so results do not depend on
/// build order.
inline RegressorModel fit_random_forest(const Mat& x, const Mat& y,
                                        const ForestParams& params) {
  const std::string stage = "regressor";
  detail::check_training_pairs(x, y, stage);
  params.validate();
  require(x.rows() >= params.min_leaf, stage,
          "training size is below min_leaf");
  RegressorModel m;
  m.kind = RegressorKind::random_forest;
  m.input_dim = x.cols();
  m.output_dim = y.cols();
  m.train_count = static_cast<std::uint32_t>(x.rows());
  m.forest = params;
  m.trees.resize(static_cast<std::size_t>(params.tree_count));
  const int n = static_cast<int>(x.rows());
  for (int t = 0; t < params.tree_count; ++t) {
    const std::uint64_t tree_seed = params.seed + static_cast<std::uint64_t>(t);
    std::vector<int> samples;
    samples.reserve(static_cast<std::size_t>(n));
    if (params.bootstrap) {
      Rng rng = substream(tree_seed, {0xb007});
      for (int i = 0; i < n; ++i)
        samples.push_back(static_cast<int>(rng.below(static_cast<std::uint64_t>(n))));
    } else {
      for (int i = 0; i < n; ++i) samples.push_back(i);
    }
    detail::grow_tree(x, y, std::move(samples), 0, /*path=*/1, tree_seed, params,
                      m.trees[static_cast<std::size_t>(t)]);
  }
  return m;
}

// ---------------------------------------------------------------------------
// Prediction and evaluation
// ---------------------------------------------------------------------------

inline Vec predict(const RegressorModel& m, const Vec& x) {
  const std::string stage = "regressor";
  require(x.size() == m.input_dim, stage,
          "query dimension " + std::to_string(x.size()) + " does not match the model's " +
              std::to_string(m.input_dim));
  require(x.allFinite(), stage, "non-finite query");
  Vec out;
  switch (m.kind) {
    case RegressorKind::knn: {
      const Eigen::Index n = m.train_x.rows();
      std::vector<std::pair<double, Eigen::Index>> ranked;
      ranked.reserve(static_cast<std::size_t>(n));
      for (Eigen::Index i = 0; i < n; ++i) {
        double d2 = 0.0;
        for (Eigen::Index j = 0; j < m.input_dim; ++j) {
          const double diff = m.train_x(i, j) - x[j];
          d2 += diff * diff;
        }
        ranked.emplace_back(d2, i);
      }
      // Ties at the k-th distance resolve to the lowest training index; the
      // selected targets are then summed in ascending index order so the
      // result is independent of the ranking pass.
      std::sort(ranked.begin(), ranked.end());
      std::vector<Eigen::Index> chosen;
      for (int j = 0; j < m.k; ++j)
        chosen.push_back(ranked[static_cast<std::size_t>(j)].second);
      std::sort(chosen.begin(), chosen.end());
      out = Vec::Zero(m.output_dim);
      for (Eigen::Index idx : chosen) out += m.train_y.row(idx).transpose();
      out /= static_cast<double>(m.k);
      break;
    }
    case RegressorKind::ridge: {
      Vec augmented(m.input_dim + 1);
      augmented.head(m.input_dim) = x;
      augmented[m.input_dim] = 1.0;
      out = m.weights.transpose() * augmented;
      break;
    }
    default: {
      out = Vec::Zero(m.output_dim);
      for (const auto& tree : m.trees) out += tree.predict(x);
      out /= static_cast<double>(m.trees.size());
    }
  }
  require(out.allFinite(), stage, "non-finite prediction");
  return out;
}

struct RegressionReport {
  double mse = 0.0;
  std::uint32_t train_count = 0;
  std::uint32_t test_count = 0;

  std::string to_text_row(const RegressorModel& model) const {
    return std::string(regressor_kind_name(model.kind)) + ", " + model.params_summary() +
           ", " + format_fixed(mse, 9);
  }
};

/// MSE = (1 / (N*F)) * sum of squared componentwise errors over the test set.
inline RegressionReport evaluate_mse(const RegressorModel& m, const Mat& x_test,
                                     const Mat& y_test) {
  const std::string stage = "regressor";
  require(x_test.rows() >= 1, stage, "test set is empty");
  require(x_test.rows() == y_test.rows(), stage, "input/target pair counts differ");
  require(x_test.cols() == m.input_dim, stage, "test input dimension mismatch");
  require(y_test.cols() == m.output_dim, stage, "test target dimension mismatch");
  double total = 0.0;
  for (Eigen::Index i = 0; i < x_test.rows(); ++i) {
    const Vec pred = predict(m, x_test.row(i).transpose());
    total += (pred - y_test.row(i).transpose()).squaredNorm();
  }
  RegressionReport report;
  report.train_count = m.train_count;
  report.test_count = static_cast<std::uint32_t>(x_test.rows());
  report.mse = total / (static_cast<double>(x_test.rows()) *
                        static_cast<double>(m.output_dim));
  return report;
}

// ---------------------------------------------------------------------------
// Serialization ("BFREG1")
// ---------------------------------------------------------------------------

inline void save_regressor(const std::filesystem::path& path, const RegressorModel& m) {
  const std::string stage = "regressor-save";
  auto out = io::open_output(path, stage);
  io::write_magic(out, "BFREG1");
  out.put(static_cast<char>(m.kind));
  io::write_u32(out, static_cast<std::uint32_t>(m.input_dim));
  io::write_u32(out, static_cast<std::uint32_t>(m.output_dim));
  io::write_u32(out, m.train_count);
  switch (m.kind) {
    case RegressorKind::knn: {
      io::write_u32(out, static_cast<std::uint32_t>(m.k));
      io::write_u32(out, static_cast<std::uint32_t>(m.train_x.rows()));
      for (Eigen::Index i = 0; i < m.train_x.rows(); ++i) {
        for (Eigen::Index j = 0; j < m.train_x.cols(); ++j)
          io::write_f64(out, m.train_x(i, j));
        for (Eigen::Index j = 0; j < m.train_y.cols(); ++j)
          io::write_f64(out, m.train_y(i, j));
      }
      break;
    }
    case RegressorKind::ridge: {
      io::write_f64(out, m.lambda);
      for (Eigen::Index c = 0; c < m.weights.cols(); ++c)
        for (Eigen::Index r = 0; r < m.weights.rows(); ++r)
          io::write_f64(out, m.weights(r, c));
      break;
    }
    default: {
      io::write_u32(out, static_cast<std::uint32_t>(m.forest.tree_count));
      io::write_u32(out, static_cast<std::uint32_t>(m.forest.max_depth));
      io::write_u32(out, static_cast<std::uint32_t>(m.forest.min_leaf));
      io::write_u32(out, static_cast<std::uint32_t>(m.forest.features_per_split));
      out.put(m.forest.bootstrap ? 1 : 0);
      io::write_u64(out, m.forest.seed);
      for (const auto& tree : m.trees) {
        io::write_u32(out, static_cast<std::uint32_t>(tree.nodes.size()));
        for (const auto& node : tree.nodes) {
          out.put(node.is_leaf ? 1 : 0);
          if (node.is_leaf) {
            for (Eigen::Index i = 0; i < node.value.size(); ++i)
              io::write_f64(out, node.value[i]);
          } else {
            io::write_u32(out, static_cast<std::uint32_t>(node.feature));
            io::write_f64(out, node.threshold);
            io::write_u32(out, node.left);
            io::write_u32(out, node.right);
          }
        }
      }
    }
  }
  require(out.good(), stage, "write failed: " + path.string());
}

inline RegressorModel load_regressor(const std::filesystem::path& path) {
  const std::string stage = "regressor-load";
  auto in = io::open_input(path, stage);
  io::expect_magic(in, "BFREG1", stage);
  RegressorModel m;
  const int kind_tag = in.get();
  require(kind_tag >= 0 && kind_tag <= 2, stage, "unknown regressor kind tag");
  m.kind = static_cast<RegressorKind>(kind_tag);
  m.input_dim = io::read_u32(in, stage);
  m.output_dim = io::read_u32(in, stage);
  m.train_count = io::read_u32(in, stage);
  require(m.input_dim > 0 && m.output_dim > 0, stage, "zero model dimensions");
  switch (m.kind) {
    case RegressorKind::knn: {
      m.k = static_cast<int>(io::read_u32(in, stage));
      const std::uint32_t n = io::read_u32(in, stage);
      require(n >= 1 && m.k >= 1 && static_cast<std::uint32_t>(m.k) <= n, stage,
              "invalid k for the stored training size");
      m.train_x.resize(n, m.input_dim);
      m.train_y.resize(n, m.output_dim);
      for (std::uint32_t i = 0; i < n; ++i) {
        for (Eigen::Index j = 0; j < m.input_dim; ++j)
          m.train_x(i, j) = io::read_f64(in, stage);
        for (Eigen::Index j = 0; j < m.output_dim; ++j)
          m.train_y(i, j) = io::read_f64(in, stage);
      }
      break;
    }
    case RegressorKind::ridge: {
      m.lambda = io::read_f64(in, stage);
      m.weights.resize(m.input_dim + 1, m.output_dim);
      for (Eigen::Index c = 0; c < m.weights.cols(); ++c)
        for (Eigen::Index r = 0; r < m.weights.rows(); ++r)
          m.weights(r, c) = io::read_f64(in, stage);
      break;
    }
    default: {
      m.forest.tree_count = static_cast<int>(io::read_u32(in, stage));
      m.forest.max_depth = static_cast<int>(io::read_u32(in, stage));
      m.forest.min_leaf = static_cast<int>(io::read_u32(in, stage));
      m.forest.features_per_split = static_cast<int>(io::read_u32(in, stage));
      m.forest.bootstrap = in.get() != 0;
      m.forest.seed = io::read_u64(in, stage);
      m.forest.validate();
      m.trees.resize(static_cast<std::size_t>(m.forest.tree_count));
      for (auto& tree : m.trees) {
        const std::uint32_t count = io::read_u32(in, stage);
        require(count >= 1, stage, "empty tree");
        tree.nodes.resize(count);
        for (auto& node : tree.nodes) {
          node.is_leaf = in.get() != 0;
          if (node.is_leaf) {
            node.value.resize(m.output_dim);
            for (Eigen::Index i = 0; i < m.output_dim; ++i)
              node.value[i] = io::read_f64(in, stage);
          } else {
            node.feature = static_cast<int>(io::read_u32(in, stage));
            node.threshold = io::read_f64(in, stage);
            node.left = io::read_u32(in, stage);
            node.right = io::read_u32(in, stage);
            require(node.feature >= 0 && node.feature < m.input_dim, stage,
                    "split feature out of range");
            require(node.left < count && node.right < count, stage,
                    "child index out of range");
          }
        }
      }
    }
  }
  require(in.good(), stage, "truncated regressor file: " + path.string());
  return m;
}

}  // namespace brainfold
