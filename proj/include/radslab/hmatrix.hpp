#pragma once

#include <Eigen/Core>
#include <functional>
#include <iosfwd>
#include <limits>
#include <memory>
#include <span>
#include <variant>
#include <vector>

namespace radslab {

struct BoundingBox {
  Eigen::Vector3d lo = Eigen::Vector3d::Constant(std::numeric_limits<double>::infinity());
  Eigen::Vector3d hi = Eigen::Vector3d::Constant(-std::numeric_limits<double>::infinity());

  void extend(const Eigen::Vector3d& p);
  void extend(const BoundingBox& b);
  bool contains(const Eigen::Vector3d& p, double slack = 0.0) const;
  double diameter() const;
  /// Euclidean distance between the boxes, 0 if they touch.
  double distance(const BoundingBox& other) const;
  int longest_axis() const;
};

struct ClusterNode {
  std::size_t begin = 0;  // range in the tree ordering
  std::size_t end = 0;
  BoundingBox box;
  int left = -1;
  int right = -1;
  int level = 0;

  bool leaf() const { return left < 0; }
  std::size_t size() const { return end - begin; }
};

/// Binary space partition of a point set by median split along the longest
/// bounding-box axis.
class ClusterTree {
 public:
  ClusterTree(std::vector<Eigen::Vector3d> points, std::size_t leaf_size);

  const std::vector<ClusterNode>& nodes() const { return nodes_; }
  const ClusterNode& root() const { return nodes_.front(); }
  /// permutation()[i] is the original index of the i-th point in tree order.
  const std::vector<std::size_t>& permutation() const { return perm_; }
  const std::vector<Eigen::Vector3d>& points() const { return points_; }
  std::size_t size() const { return points_.size(); }
  std::size_t leaf_size() const { return leaf_size_; }
  int depth() const;
  std::size_t leaf_count() const;

 private:
  int split(std::size_t begin, std::size_t end, int level);

  std::vector<Eigen::Vector3d> points_;
  std::size_t leaf_size_;
  std::vector<std::size_t> perm_;
  std::vector<ClusterNode> nodes_;
};

/// U V^T approximation of a matrix block.
struct LowRankBlock {
  Eigen::MatrixXd U;
  Eigen::MatrixXd V;
  /// Relative accuracy reached by the cross approximation.
  double tolerance = 0.0;

  Eigen::Index rank() const { return U.cols(); }
};

/// Matrix entry by original (row, col) index.
using EntryFunction = std::function<double(std::size_t, std::size_t)>;

using CompressedBlock = std::variant<LowRankBlock, Eigen::MatrixXd>;

/// Partially pivoted adaptive cross approximation of the block rows x cols.
/// Stops once |u_k||v_k| <= eps ||A_k||_F; returns the dense block instead when
/// the rank would exceed min(m, n)/2.
CompressedBlock compress(const EntryFunction& entry, std::span<const std::size_t> rows,
                         std::span<const std::size_t> cols, double eps);

struct HMatrixOptions {
  double eta = 2.0;
  double eps = 1e-8;
  /// Replaces the default test min(diam) <= eta dist when set.
  std::function<bool(const BoundingBox&, const BoundingBox&)> admissible;
};

class HMatrix {
 public:
  struct Block {
    int row_node;
    int col_node;
    int level;
    CompressedBlock data;

    bool low_rank() const { return std::holds_alternative<LowRankBlock>(data); }
  };

  HMatrix(std::shared_ptr<const ClusterTree> rows, std::shared_ptr<const ClusterTree> cols,
          const EntryFunction& entry, HMatrixOptions opts = {});

  Eigen::Index rows() const { return static_cast<Eigen::Index>(rows_->size()); }
  Eigen::Index cols() const { return static_cast<Eigen::Index>(cols_->size()); }

  Eigen::VectorXd matvec(const Eigen::VectorXd& x) const;
  /// Y = H X for several right-hand sides at once.
  Eigen::MatrixXd matvec(const Eigen::MatrixXd& X) const;

  const std::vector<Block>& blocks() const { return blocks_; }
  const ClusterTree& row_tree() const { return *rows_; }
  const ClusterTree& col_tree() const { return *cols_; }

  std::size_t stored_entries() const;
  std::size_t dense_entries() const { return rows_->size() * cols_->size(); }
  double compression_ratio() const;
  Eigen::Index max_rank() const;
  Eigen::MatrixXd to_dense() const;

  /// One line per block: level,row_begin,row_end,col_begin,col_end,rank,kind
  void write_csv(std::ostream& out) const;

 private:
  void build(int r, int c, const EntryFunction& entry, const HMatrixOptions& opts,
             std::vector<std::pair<int, int>>& admissible_pairs, std::vector<std::pair<int, int>>& dense_pairs);

  std::shared_ptr<const ClusterTree> rows_;
  std::shared_ptr<const ClusterTree> cols_;
  std::vector<Block> blocks_;
};

}  // namespace radslab
