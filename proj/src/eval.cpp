#include "paka/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "paka/error.hpp"

namespace paka {
namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// Nearest centroid per row (ties to the lower index) and the resulting inertia.
double assign(const FeatureMatrix& x, const Eigen::MatrixXd& centroids, std::vector<int>& labels,
              std::vector<double>& dist) {
  double inertia = 0.0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (Eigen::Index c = 0; c < centroids.rows(); ++c) {
      const double d = (x.row(i) - centroids.row(c)).squaredNorm();
      if (d < best_d) {
        best_d = d;
        best = static_cast<int>(c);
      }
    }
    labels[static_cast<size_t>(i)] = best;
    dist[static_cast<size_t>(i)] = best_d;
    inertia += best_d;
  }
  return inertia;
}

Eigen::MatrixXd kmeans_pp_init(const FeatureMatrix& x, int k, Rng& rng) {
  const auto n = static_cast<size_t>(x.rows());
  Eigen::MatrixXd centroids(k, x.cols());
  std::uniform_int_distribution<size_t> pick(0, n - 1);
  centroids.row(0) = x.row(static_cast<Eigen::Index>(pick(rng)));
  std::vector<double> d2(n);
  for (size_t i = 0; i < n; ++i) d2[i] = (x.row(static_cast<Eigen::Index>(i)) - centroids.row(0)).squaredNorm();
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int c = 1; c < k; ++c) {
    const double total = std::accumulate(d2.begin(), d2.end(), 0.0);
    size_t chosen = 0;
    if (total > 0.0) {
      double target = unit(rng) * total;
      chosen = n - 1;
      for (size_t i = 0; i < n; ++i) {
        if (d2[i] <= 0.0) continue;
        target -= d2[i];
        if (target < 0.0) {
          chosen = i;
          break;
        }
      }
      // Rounding can leave the scan on a zero-weight tail; step back to a weighted point.
      while (d2[chosen] <= 0.0 && chosen > 0) --chosen;
    } else {
      chosen = pick(rng);
    }
    centroids.row(c) = x.row(static_cast<Eigen::Index>(chosen));
    for (size_t i = 0; i < n; ++i)
      d2[i] = std::min(d2[i], (x.row(static_cast<Eigen::Index>(i)) - centroids.row(c)).squaredNorm());
  }
  return centroids;
}

}  // namespace

ClusterAssignment kmeans_fit(const FeatureMatrix& features, int k, Rng& rng, int max_iters) {
  require(k >= 1, ErrorCode::kInvalidArgument, "K must be >= 1");
  require(features.rows() >= 1 && features.allFinite(), ErrorCode::kInvalidArgument, "features must be non-empty and finite");
  require(k <= features.rows(), ErrorCode::kKTooLarge,
          "K=" + std::to_string(k) + " exceeds " + std::to_string(features.rows()) + " points");
  require(max_iters >= 1, ErrorCode::kInvalidArgument, "max_iters must be >= 1");

  const auto n = static_cast<size_t>(features.rows());
  ClusterAssignment out;
  out.centroids = kmeans_pp_init(features, k, rng);
  out.labels.assign(n, -1);
  std::vector<int> labels(n);
  std::vector<double> dist(n);

  for (int iter = 0; iter < max_iters; ++iter) {
    const double inertia = assign(features, out.centroids, labels, dist);
    out.inertia_history.push_back(inertia);
    out.iterations = iter + 1;
    const bool converged = labels == out.labels;
    out.labels = labels;
    if (converged) break;

    Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(k, features.cols());
    std::vector<int> counts(static_cast<size_t>(k), 0);
    for (size_t i = 0; i < n; ++i) {
      sums.row(labels[i]) += features.row(static_cast<Eigen::Index>(i));
      ++counts[static_cast<size_t>(labels[i])];
    }
    std::vector<bool> taken(n, false);
    for (int c = 0; c < k; ++c) {
      if (counts[static_cast<size_t>(c)] > 0) {
        out.centroids.row(c) = sums.row(c) / counts[static_cast<size_t>(c)];
        continue;
      }
      size_t far = 0;
      double far_d = -1.0;
      for (size_t i = 0; i < n; ++i) {
        if (!taken[i] && dist[i] > far_d) {
          far_d = dist[i];
          far = i;
        }
      }
      taken[far] = true;
      dist[far] = 0.0;
      out.centroids.row(c) = features.row(static_cast<Eigen::Index>(far));
    }
  }
  return out;
}

std::vector<int> hungarian(const Eigen::MatrixXd& cost) {
  require(cost.rows() == cost.cols(), ErrorCode::kShapeMismatch, "cost matrix must be square");
  require(cost.allFinite(), ErrorCode::kInvalidArgument, "cost matrix must be finite");
  const int n = static_cast<int>(cost.rows());
  if (n == 0) return {};
  const double inf = std::numeric_limits<double>::infinity();
  // Shortest augmenting paths with row/column potentials; 1-based with a virtual column 0.
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<int> match(n + 1, 0), way(n + 1, 0);
  for (int row = 1; row <= n; ++row) {
    match[0] = row;
    int col0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<bool> used(n + 1, false);
    do {
      used[col0] = true;
      const int r0 = match[col0];
      double delta = inf;
      int col1 = 0;
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost(r0 - 1, j - 1) - u[r0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = col0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          col1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[match[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      col0 = col1;
    } while (match[col0] != 0);
    do {
      const int col1 = way[col0];
      match[col0] = match[col1];
      col0 = col1;
    } while (col0 != 0);
  }
  std::vector<int> result(static_cast<size_t>(n));
  for (int j = 1; j <= n; ++j) result[static_cast<size_t>(match[j] - 1)] = j - 1;
  return result;
}

double assignment_cost(const Eigen::MatrixXd& cost, std::span<const int> assignment) {
  double total = 0.0;
  for (size_t i = 0; i < assignment.size(); ++i) total += cost(static_cast<Eigen::Index>(i), assignment[i]);
  return total;
}

std::vector<int> greedy_precision_match(std::span<const int> clusters, int k, std::span<const int> labels, int classes) {
  require(clusters.size() == labels.size(), ErrorCode::kLengthMismatch, "cluster and label counts differ");
  require(k >= 1 && classes >= 1, ErrorCode::kInvalidArgument, "K and C must be positive");
  std::vector<std::int64_t> counts(static_cast<size_t>(k) * classes, 0);
  std::vector<std::int64_t> sizes(static_cast<size_t>(k), 0);
  for (size_t i = 0; i < clusters.size(); ++i) {
    require(clusters[i] >= 0 && clusters[i] < k && labels[i] >= 0 && labels[i] < classes, ErrorCode::kInvalidArgument,
            "cluster or class id out of range");
    ++counts[static_cast<size_t>(clusters[i]) * classes + labels[i]];
    ++sizes[static_cast<size_t>(clusters[i])];
  }
  std::vector<int> order(static_cast<size_t>(k));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return sizes[a] > sizes[b]; });
  std::vector<int> mapping(static_cast<size_t>(k), 0);
  for (int cl : order) {
    int best = 0;
    for (int c = 1; c < classes; ++c)
      if (counts[static_cast<size_t>(cl) * classes + c] > counts[static_cast<size_t>(cl) * classes + best]) best = c;
    mapping[static_cast<size_t>(cl)] = best;
  }
  return mapping;
}

void ConfusionTally::add(int predicted, int truth, std::int64_t n) {
  require(predicted >= 0 && predicted < classes && truth >= 0 && truth < classes, ErrorCode::kInvalidArgument,
          "class id out of range");
  counts[static_cast<size_t>(predicted) * classes + truth] += n;
}

std::int64_t ConfusionTally::total() const { return std::accumulate(counts.begin(), counts.end(), std::int64_t{0}); }

IouReport iou_from_tally(const ConfusionTally& tally) {
  const int c = tally.classes;
  IouReport r;
  r.per_class.assign(static_cast<size_t>(c), kNaN);
  std::int64_t correct = 0;
  double sum = 0.0;
  int present = 0;
  for (int k = 0; k < c; ++k) {
    std::int64_t pred = 0, truth = 0;
    for (int j = 0; j < c; ++j) {
      pred += tally.at(k, j);
      truth += tally.at(j, k);
    }
    const std::int64_t tp = tally.at(k, k);
    correct += tp;
    if (truth == 0) continue;
    const double iou = static_cast<double>(tp) / static_cast<double>(pred + truth - tp);
    r.per_class[static_cast<size_t>(k)] = iou;
    sum += iou;
    ++present;
  }
  const std::int64_t total = tally.total();
  r.miou = present > 0 ? sum / present : 0.0;
  r.accuracy = total > 0 ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
  return r;
}

IouReport iou_from_predictions(std::span<const int> predicted, std::span<const int> truth, int classes) {
  require(predicted.size() == truth.size(), ErrorCode::kLengthMismatch, "prediction and label counts differ");
  ConfusionTally tally(classes);
  for (size_t i = 0; i < predicted.size(); ++i) tally.add(predicted[i], truth[i]);
  return iou_from_tally(tally);
}

std::vector<int> patch_labels_from_mask(const LabelMask& mask, int grid_h, int grid_w) {
  require(grid_h >= 1 && grid_w >= 1 && mask.height % grid_h == 0 && mask.width % grid_w == 0,
          ErrorCode::kShapeMismatch, "mask dims must be divisible by grid dims");
  const int ph = mask.height / grid_h;
  const int pw = mask.width / grid_w;
  int max_id = 0;
  for (int id : mask.ids) {
    require(id >= 0, ErrorCode::kInvalidArgument, "negative class id");
    max_id = std::max(max_id, id);
  }
  std::vector<int> out(static_cast<size_t>(grid_h) * grid_w);
  std::vector<int> counts(static_cast<size_t>(max_id) + 1);
  for (int gy = 0; gy < grid_h; ++gy)
    for (int gx = 0; gx < grid_w; ++gx) {
      std::fill(counts.begin(), counts.end(), 0);
      for (int y = gy * ph; y < (gy + 1) * ph; ++y)
        for (int x = gx * pw; x < (gx + 1) * pw; ++x) ++counts[static_cast<size_t>(mask.at(y, x))];
      out[static_cast<size_t>(gy) * grid_w + gx] =
          static_cast<int>(std::max_element(counts.begin(), counts.end()) - counts.begin());
    }
  return out;
}

IouReport score_clustering(std::span<const int> clusters, int k, std::span<const int> labels, int classes) {
  require(clusters.size() == labels.size(), ErrorCode::kLengthMismatch, "cluster and label counts differ");
  std::vector<int> mapping;
  if (k == classes) {
    Eigen::MatrixXd agreement = Eigen::MatrixXd::Zero(k, classes);
    for (size_t i = 0; i < clusters.size(); ++i) agreement(clusters[i], labels[i]) += 1.0;
    mapping = hungarian(-agreement);
  } else {
    mapping = greedy_precision_match(clusters, k, labels, classes);
  }
  std::vector<int> predicted(clusters.size());
  for (size_t i = 0; i < clusters.size(); ++i) predicted[i] = mapping[static_cast<size_t>(clusters[i])];
  return iou_from_predictions(predicted, labels, classes);
}

OverclusterResult overcluster_miou(const FeatureMatrix& pooled, std::span<const int> labels, int k, int classes,
                                   std::uint64_t seed, int seeds, int max_iters) {
  require(static_cast<size_t>(pooled.rows()) == labels.size(), ErrorCode::kLengthMismatch,
          "feature rows and labels differ");
  require(seeds >= 1, ErrorCode::kInvalidArgument, "need at least one seed");
  OverclusterResult r;
  r.per_class.assign(static_cast<size_t>(classes), 0.0);
  std::vector<int> present(static_cast<size_t>(classes), 0);
  for (int s = 0; s < seeds; ++s) {
    Rng rng(derive_seed(seed, "kmeans", static_cast<std::uint64_t>(s)));
    const ClusterAssignment fit = kmeans_fit(pooled, k, rng, max_iters);
    const IouReport rep = score_clustering(fit.labels, k, labels, classes);
    r.per_seed_miou.push_back(rep.miou);
    r.miou += rep.miou / seeds;
    r.accuracy += rep.accuracy / seeds;
    for (int c = 0; c < classes; ++c) {
      if (std::isnan(rep.per_class[static_cast<size_t>(c)])) continue;
      r.per_class[static_cast<size_t>(c)] += rep.per_class[static_cast<size_t>(c)];
      ++present[static_cast<size_t>(c)];
    }
  }
  for (int c = 0; c < classes; ++c)
    r.per_class[static_cast<size_t>(c)] = present[static_cast<size_t>(c)] ? r.per_class[static_cast<size_t>(c)] / present[static_cast<size_t>(c)] : kNaN;
  return r;
}

OverclusterResult overcluster_miou(std::span<const FeatureGrid> grids, std::span<const LabelMask> masks, int k,
                                   int classes, std::uint64_t seed, int seeds, int max_iters) {
  require(grids.size() == masks.size() && !grids.empty(), ErrorCode::kLengthMismatch, "need one mask per grid");
  Eigen::Index rows = 0;
  for (const auto& g : grids) rows += g.cells();
  FeatureMatrix pooled(rows, grids[0].dim());
  std::vector<int> labels;
  labels.reserve(static_cast<size_t>(rows));
  Eigen::Index at = 0;
  for (size_t i = 0; i < grids.size(); ++i) {
    require(grids[i].dim() == grids[0].dim(), ErrorCode::kShapeMismatch, "grids differ in channel count");
    pooled.middleRows(at, grids[i].cells()) = grids[i].features;
    at += grids[i].cells();
    const auto pl = patch_labels_from_mask(masks[i], grids[i].height, grids[i].width);
    labels.insert(labels.end(), pl.begin(), pl.end());
  }
  return overcluster_miou(pooled, labels, k, classes, seed, seeds, max_iters);
}

MemoryBank build_memory_bank(std::span<const FeatureGrid> grids, std::span<const LabelMask> masks,
                             std::span<const int> image_ids) {
  require(grids.size() == masks.size() && grids.size() == image_ids.size(), ErrorCode::kLengthMismatch,
          "grids, masks and ids must align");
  MemoryBank bank;
  if (grids.empty()) return bank;
  Eigen::Index rows = 0;
  for (const auto& g : grids) rows += g.cells();
  bank.keys.resize(rows, grids[0].dim());
  Eigen::Index at = 0;
  for (size_t i = 0; i < grids.size(); ++i) {
    const FeatureGrid& g = grids[i];
    bank.keys.middleRows(at, g.cells()) = g.features;
    at += g.cells();
    const auto pl = patch_labels_from_mask(masks[i], g.height, g.width);
    bank.labels.insert(bank.labels.end(), pl.begin(), pl.end());
    for (int y = 0; y < g.height; ++y)
      for (int x = 0; x < g.width; ++x) bank.provenance.push_back({image_ids[i], y, x});
  }
  return bank;
}

std::vector<int> nn_retrieval_predict(const MemoryBank& bank, const FeatureMatrix& queries, int k,
                                      std::span<const PatchProvenance> query_provenance) {
  require(bank.size() > 0, ErrorCode::kEmptyBank, "memory bank is empty");
  require(static_cast<size_t>(bank.keys.rows()) == bank.size(), ErrorCode::kShapeMismatch, "bank keys and labels differ");
  require(k >= 1 && static_cast<size_t>(k) <= bank.size(), ErrorCode::kInvalidArgument, "k must lie in [1, bank size]");
  require(queries.cols() == bank.keys.cols(), ErrorCode::kShapeMismatch, "query dim differs from bank");
  const bool exclude = !query_provenance.empty();
  require(!exclude || query_provenance.size() == static_cast<size_t>(queries.rows()), ErrorCode::kLengthMismatch,
          "query provenance must cover every query");
  require(!exclude || bank.provenance.size() == bank.size(), ErrorCode::kLengthMismatch, "bank lacks provenance");

  auto unit_rows = [](const FeatureMatrix& m) {
    FeatureMatrix out = m;
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      const double n = m.row(i).norm();
      if (n > 0.0) out.row(i) /= n;
    }
    return out;
  };
  const FeatureMatrix keys = unit_rows(bank.keys);
  const FeatureMatrix q = unit_rows(queries);
  const Eigen::MatrixXd sims = q * keys.transpose();

  int max_label = 0;
  for (int l : bank.labels) max_label = std::max(max_label, l);
  std::vector<int> out(static_cast<size_t>(queries.rows()));
  std::vector<int> idx;
  std::vector<double> votes(static_cast<size_t>(max_label) + 1);
  std::vector<bool> seen(static_cast<size_t>(max_label) + 1);
  for (Eigen::Index qi = 0; qi < queries.rows(); ++qi) {
    idx.clear();
    for (size_t m = 0; m < bank.size(); ++m) {
      if (exclude && bank.provenance[m] == query_provenance[static_cast<size_t>(qi)]) continue;
      idx.push_back(static_cast<int>(m));
    }
    require(!idx.empty(), ErrorCode::kEmptyBank, "no bank entries left after self-exclusion");
    const size_t take = std::min(idx.size(), static_cast<size_t>(k));
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(take), idx.end(), [&](int a, int b) {
      const double sa = sims(qi, a), sb = sims(qi, b);
      return sa > sb || (sa == sb && a < b);
    });
    std::fill(votes.begin(), votes.end(), 0.0);
    std::fill(seen.begin(), seen.end(), false);
    for (size_t t = 0; t < take; ++t) {
      const int label = bank.labels[static_cast<size_t>(idx[t])];
      votes[static_cast<size_t>(label)] += sims(qi, idx[t]);
      seen[static_cast<size_t>(label)] = true;
    }
    int best = -1;
    for (size_t l = 0; l < votes.size(); ++l) {
      if (!seen[l]) continue;
      if (best < 0 || votes[l] > votes[static_cast<size_t>(best)]) best = static_cast<int>(l);
    }
    out[static_cast<size_t>(qi)] = best;
  }
  return out;
}

LinearProbeResult linear_probe(const FeatureMatrix& train_x, std::span<const int> train_y, const FeatureMatrix& eval_x,
                               std::span<const int> eval_y, int classes, const LinearProbeConfig& config) {
  require(classes >= 2, ErrorCode::kDegenerateLabels, "linear probe needs at least 2 classes");
  require(static_cast<size_t>(train_x.rows()) == train_y.size() && static_cast<size_t>(eval_x.rows()) == eval_y.size(),
          ErrorCode::kLengthMismatch, "features and labels differ in length");
  require(train_x.cols() == eval_x.cols(), ErrorCode::kShapeMismatch, "train and eval feature dims differ");
  require(config.epochs >= 0 && config.batch_size >= 1 && config.lr >= 0.0, ErrorCode::kInvalidArgument,
          "invalid probe configuration");
  auto distinct = [](std::span<const int> ys, int c) {
    std::vector<bool> seen(static_cast<size_t>(c), false);
    int n = 0;
    for (int y : ys) {
      require(y >= 0 && y < c, ErrorCode::kInvalidArgument, "label out of range");
      if (!seen[static_cast<size_t>(y)]) seen[static_cast<size_t>(y)] = true, ++n;
    }
    return n;
  };
  require(distinct(train_y, classes) >= 2, ErrorCode::kDegenerateLabels, "training split has a single class");
  require(distinct(eval_y, classes) >= 2, ErrorCode::kDegenerateLabels, "evaluation split has a single class");

  const Eigen::Index d = train_x.cols();
  Rng rng(derive_seed(config.seed, "linear-probe"));
  std::normal_distribution<double> init(0.0, 0.01);
  LinearProbeResult r;
  r.weight.resize(d, classes);
  for (Eigen::Index i = 0; i < d; ++i)
    for (int c = 0; c < classes; ++c) r.weight(i, c) = init(rng);
  r.bias = Eigen::RowVectorXd::Zero(classes);
  Eigen::MatrixXd vel_w = Eigen::MatrixXd::Zero(d, classes);
  Eigen::RowVectorXd vel_b = Eigen::RowVectorXd::Zero(classes);

  std::vector<int> order(train_y.size());
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(config.batch_size)) {
      const size_t end = std::min(order.size(), start + static_cast<size_t>(config.batch_size));
      const auto b = static_cast<Eigen::Index>(end - start);
      Eigen::MatrixXd xb(b, d);
      for (Eigen::Index i = 0; i < b; ++i) xb.row(i) = train_x.row(order[start + static_cast<size_t>(i)]);
      Eigen::MatrixXd logits = xb * r.weight;
      logits.rowwise() += r.bias;
      for (Eigen::Index i = 0; i < b; ++i) {
        const double mx = logits.row(i).maxCoeff();
        logits.row(i) = (logits.row(i).array() - mx).exp().matrix();
        logits.row(i) /= logits.row(i).sum();
        logits(i, train_y[order[start + static_cast<size_t>(i)]]) -= 1.0;
      }
      logits /= static_cast<double>(b);
      const Eigen::MatrixXd gw = xb.transpose() * logits + config.weight_decay * r.weight;
      const Eigen::RowVectorXd gb = logits.colwise().sum() + config.weight_decay * r.bias;
      vel_w = config.momentum * vel_w + gw;
      vel_b = config.momentum * vel_b + gb;
      r.weight -= config.lr * vel_w;
      r.bias -= config.lr * vel_b;
    }
  }

  Eigen::MatrixXd logits = eval_x * r.weight;
  logits.rowwise() += r.bias;
  std::vector<int> pred(eval_y.size());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    Eigen::Index arg;
    logits.row(i).maxCoeff(&arg);
    pred[static_cast<size_t>(i)] = static_cast<int>(arg);
  }
  r.eval = iou_from_predictions(pred, eval_y, classes);
  return r;
}

}  // namespace paka
