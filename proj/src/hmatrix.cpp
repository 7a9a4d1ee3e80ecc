#include "radslab/hmatrix.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <stdexcept>

namespace radslab {

void BoundingBox::extend(const Eigen::Vector3d& p) {
  lo = lo.cwiseMin(p);
  hi = hi.cwiseMax(p);
}

void BoundingBox::extend(const BoundingBox& b) {
  lo = lo.cwiseMin(b.lo);
  hi = hi.cwiseMax(b.hi);
}

bool BoundingBox::contains(const Eigen::Vector3d& p, double slack) const {
  return (p.array() >= lo.array() - slack).all() && (p.array() <= hi.array() + slack).all();
}

double BoundingBox::diameter() const { return (hi - lo).cwiseMax(0.0).norm(); }

double BoundingBox::distance(const BoundingBox& o) const {
  const Eigen::Vector3d gap = (o.lo - hi).cwiseMax(lo - o.hi).cwiseMax(0.0);
  return gap.norm();
}

int BoundingBox::longest_axis() const {
  Eigen::Index i;
  (hi - lo).maxCoeff(&i);
  return static_cast<int>(i);
}

ClusterTree::ClusterTree(std::vector<Eigen::Vector3d> points, std::size_t leaf_size)
    : points_(std::move(points)), leaf_size_(leaf_size) {
  if (points_.empty()) throw std::invalid_argument("ClusterTree: empty point set");
  if (leaf_size_ < 1) throw std::invalid_argument("ClusterTree: leaf_size must be >= 1");
  perm_.resize(points_.size());
  std::iota(perm_.begin(), perm_.end(), 0);
  nodes_.reserve(4 * points_.size() / leaf_size_ + 4);
  split(0, points_.size(), 0);
}

int ClusterTree::split(std::size_t begin, std::size_t end, int level) {
  const int id = static_cast<int>(nodes_.size());
  ClusterNode node;
  node.begin = begin;
  node.end = end;
  node.level = level;
  for (std::size_t i = begin; i < end; ++i) node.box.extend(points_[perm_[i]]);
  nodes_.push_back(node);
  if (end - begin <= leaf_size_ || node.box.diameter() == 0.0) return id;

  const int axis = node.box.longest_axis();
  const std::size_t mid = begin + (end - begin) / 2;
  std::nth_element(perm_.begin() + begin, perm_.begin() + mid, perm_.begin() + end,
                   [&](std::size_t a, std::size_t b) { return points_[a][axis] < points_[b][axis]; });
  const int l = split(begin, mid, level + 1);
  const int r = split(mid, end, level + 1);
  nodes_[id].left = l;
  nodes_[id].right = r;
  return id;
}

int ClusterTree::depth() const {
  int d = 0;
  for (const auto& n : nodes_) d = std::max(d, n.level);
  return d;
}

std::size_t ClusterTree::leaf_count() const {
  return static_cast<std::size_t>(std::count_if(nodes_.begin(), nodes_.end(), [](const auto& n) { return n.leaf(); }));
}

namespace {

Eigen::MatrixXd dense_block(const EntryFunction& entry, std::span<const std::size_t> rows,
                            std::span<const std::size_t> cols) {
  Eigen::MatrixXd A(rows.size(), cols.size());
  for (std::size_t j = 0; j < cols.size(); ++j)
    for (std::size_t i = 0; i < rows.size(); ++i) A(i, j) = entry(rows[i], cols[j]);
  return A;
}

}  // namespace

CompressedBlock compress(const EntryFunction& entry, std::span<const std::size_t> rows,
                         std::span<const std::size_t> cols, double eps) {
  const auto m = static_cast<Eigen::Index>(rows.size());
  const auto n = static_cast<Eigen::Index>(cols.size());
  const Eigen::Index max_rank = std::min(m, n) / 2;
  if (max_rank < 1) return dense_block(entry, rows, cols);

  std::vector<Eigen::VectorXd> us, vs;
  std::vector<char> row_used(m, 0);
  double norm2 = 0.0;  // ||A_k||_F^2 estimate
  double achieved = 0.0;
  Eigen::Index pivot_row = 0;
  int zero_rows = 0;

  while (true) {
    Eigen::VectorXd row(n);
    for (Eigen::Index j = 0; j < n; ++j) row(j) = entry(rows[pivot_row], cols[j]);
    for (std::size_t l = 0; l < us.size(); ++l) row -= us[l](pivot_row) * vs[l];
    row_used[pivot_row] = 1;

    Eigen::Index pivot_col;
    const double pmax = row.cwiseAbs().maxCoeff(&pivot_col);
    if (pmax == 0.0) {
      // Residual row vanished: try another unused row. Without any cross yet
      // the block may be zero, which only a full scan proves.
      ++zero_rows;
      const auto next = std::find(row_used.begin(), row_used.end(), 0);
      if (next == row_used.end() || (!us.empty() && zero_rows >= 3)) break;
      pivot_row = next - row_used.begin();
      continue;
    }
    zero_rows = 0;
    Eigen::VectorXd v = row / row(pivot_col);
    Eigen::VectorXd u(m);
    for (Eigen::Index i = 0; i < m; ++i) u(i) = entry(rows[i], cols[pivot_col]);
    for (std::size_t l = 0; l < us.size(); ++l) u -= vs[l](pivot_col) * us[l];

    const double un = u.squaredNorm(), vn = v.squaredNorm();
    double cross = 0.0;
    for (std::size_t l = 0; l < us.size(); ++l) cross += us[l].dot(u) * vs[l].dot(v);
    norm2 += un * vn + 2.0 * cross;
    us.push_back(std::move(u));
    vs.push_back(std::move(v));

    const double step = std::sqrt(un * vn);
    achieved = norm2 > 0 ? step / std::sqrt(norm2) : 0.0;
    if (static_cast<Eigen::Index>(us.size()) > max_rank) return dense_block(entry, rows, cols);
    if (step <= eps * std::sqrt(std::max(norm2, 0.0))) break;

    double best = -1.0;
    for (Eigen::Index i = 0; i < m; ++i)
      if (!row_used[i] && std::abs(us.back()(i)) > best) {
        best = std::abs(us.back()(i));
        pivot_row = i;
      }
    if (best < 0) break;
  }

  LowRankBlock lr;
  const auto k = static_cast<Eigen::Index>(us.size());
  lr.U.resize(m, k);
  lr.V.resize(n, k);
  for (Eigen::Index l = 0; l < k; ++l) {
    lr.U.col(l) = us[l];
    lr.V.col(l) = vs[l];
  }
  lr.tolerance = achieved;
  return lr;
}

HMatrix::HMatrix(std::shared_ptr<const ClusterTree> rows, std::shared_ptr<const ClusterTree> cols,
                 const EntryFunction& entry, HMatrixOptions opts)
    : rows_(std::move(rows)), cols_(std::move(cols)) {
  if (!rows_ || !cols_) throw std::invalid_argument("HMatrix: missing cluster tree");
  if (!(opts.eps > 0) || !(opts.eta > 0)) throw std::invalid_argument("HMatrix: eps and eta must be positive");
  std::vector<std::pair<int, int>> adm, dense;
  build(0, 0, entry, opts, adm, dense);

  std::vector<std::pair<int, int>> all = adm;
  all.insert(all.end(), dense.begin(), dense.end());
  blocks_.resize(all.size());
  const auto n_adm = static_cast<std::ptrdiff_t>(adm.size());
#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic)
#endif
  for (std::ptrdiff_t b = 0; b < static_cast<std::ptrdiff_t>(all.size()); ++b) {
    const auto [r, c] = all[b];
    const auto& rn = rows_->nodes()[r];
    const auto& cn = cols_->nodes()[c];
    std::span<const std::size_t> ri(rows_->permutation().data() + rn.begin, rn.size());
    std::span<const std::size_t> ci(cols_->permutation().data() + cn.begin, cn.size());
    blocks_[b] = Block{r, c, std::max(rn.level, cn.level),
                       b < n_adm ? compress(entry, ri, ci, opts.eps) : CompressedBlock{dense_block(entry, ri, ci)}};
  }
}

void HMatrix::build(int r, int c, const EntryFunction& entry, const HMatrixOptions& opts,
                    std::vector<std::pair<int, int>>& adm, std::vector<std::pair<int, int>>& dense) {
  const auto& rn = rows_->nodes()[r];
  const auto& cn = cols_->nodes()[c];
  const bool admissible = opts.admissible
                              ? opts.admissible(rn.box, cn.box)
                              : std::min(rn.box.diameter(), cn.box.diameter()) <= opts.eta * rn.box.distance(cn.box);
  if (admissible && rn.box.distance(cn.box) > 0) {
    adm.emplace_back(r, c);
    return;
  }
  if (rn.leaf() && cn.leaf()) {
    dense.emplace_back(r, c);
    return;
  }
  if (rn.leaf()) {
    build(r, cn.left, entry, opts, adm, dense);
    build(r, cn.right, entry, opts, adm, dense);
  } else if (cn.leaf()) {
    build(rn.left, c, entry, opts, adm, dense);
    build(rn.right, c, entry, opts, adm, dense);
  } else {
    for (int a : {rn.left, rn.right})
      for (int b : {cn.left, cn.right}) build(a, b, entry, opts, adm, dense);
  }
}

Eigen::VectorXd HMatrix::matvec(const Eigen::VectorXd& x) const {
  return matvec(Eigen::MatrixXd(x)).col(0);
}

Eigen::MatrixXd HMatrix::matvec(const Eigen::MatrixXd& X) const {
  if (X.rows() != cols()) throw std::invalid_argument("HMatrix::matvec: dimension mismatch");
  const auto& pc = cols_->permutation();
  const auto& pr = rows_->permutation();
  Eigen::MatrixXd Xp(X.rows(), X.cols());
  for (Eigen::Index i = 0; i < X.rows(); ++i) Xp.row(i) = X.row(pc[i]);
  Eigen::MatrixXd Yp = Eigen::MatrixXd::Zero(rows(), X.cols());

#ifdef _OPENMP
#pragma omp parallel
#endif
  {
    Eigen::MatrixXd local = Eigen::MatrixXd::Zero(rows(), X.cols());
#ifdef _OPENMP
#pragma omp for schedule(dynamic, 16) nowait
#endif
    for (std::ptrdiff_t b = 0; b < static_cast<std::ptrdiff_t>(blocks_.size()); ++b) {
      const auto& blk = blocks_[b];
      const auto& rn = rows_->nodes()[blk.row_node];
      const auto& cn = cols_->nodes()[blk.col_node];
      const auto xs = Xp.middleRows(cn.begin, cn.size());
      auto ys = local.middleRows(rn.begin, rn.size());
      if (const auto* lr = std::get_if<LowRankBlock>(&blk.data)) {
        if (lr->rank() > 0) ys.noalias() += lr->U * (lr->V.transpose() * xs);
      } else {
        ys.noalias() += std::get<Eigen::MatrixXd>(blk.data) * xs;
      }
    }
#ifdef _OPENMP
#pragma omp critical
#endif
    Yp += local;
  }

  Eigen::MatrixXd Y(rows(), X.cols());
  for (Eigen::Index i = 0; i < Y.rows(); ++i) Y.row(pr[i]) = Yp.row(i);
  return Y;
}

std::size_t HMatrix::stored_entries() const {
  std::size_t s = 0;
  for (const auto& b : blocks_) {
    if (const auto* lr = std::get_if<LowRankBlock>(&b.data))
      s += static_cast<std::size_t>(lr->U.size() + lr->V.size());
    else
      s += static_cast<std::size_t>(std::get<Eigen::MatrixXd>(b.data).size());
  }
  return s;
}

double HMatrix::compression_ratio() const {
  return static_cast<double>(stored_entries()) / static_cast<double>(dense_entries());
}

Eigen::Index HMatrix::max_rank() const {
  Eigen::Index k = 0;
  for (const auto& b : blocks_)
    if (const auto* lr = std::get_if<LowRankBlock>(&b.data)) k = std::max(k, lr->rank());
  return k;
}

Eigen::MatrixXd HMatrix::to_dense() const {
  Eigen::MatrixXd Ap = Eigen::MatrixXd::Zero(rows(), cols());
  for (const auto& blk : blocks_) {
    const auto& rn = rows_->nodes()[blk.row_node];
    const auto& cn = cols_->nodes()[blk.col_node];
    auto dst = Ap.block(rn.begin, cn.begin, rn.size(), cn.size());
    if (const auto* lr = std::get_if<LowRankBlock>(&blk.data))
      dst = lr->U * lr->V.transpose();
    else
      dst = std::get<Eigen::MatrixXd>(blk.data);
  }
  Eigen::MatrixXd A(rows(), cols());
  const auto& pr = rows_->permutation();
  const auto& pc = cols_->permutation();
  for (Eigen::Index i = 0; i < rows(); ++i)
    for (Eigen::Index j = 0; j < cols(); ++j) A(pr[i], pc[j]) = Ap(i, j);
  return A;
}

void HMatrix::write_csv(std::ostream& out) const {
  out << "level,row_begin,row_end,col_begin,col_end,rank,kind\n";
  for (const auto& blk : blocks_) {
    const auto& rn = rows_->nodes()[blk.row_node];
    const auto& cn = cols_->nodes()[blk.col_node];
    const auto* lr = std::get_if<LowRankBlock>(&blk.data);
    const Eigen::Index rank = lr ? lr->rank() : static_cast<Eigen::Index>(std::min(rn.size(), cn.size()));
    out << blk.level << ',' << rn.begin << ',' << rn.end << ',' << cn.begin << ',' << cn.end << ',' << rank << ','
        << (lr ? "lowrank" : "dense") << '\n';
  }
}

}  // namespace radslab
