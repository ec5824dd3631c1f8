#pragma once

// Synthetic benchmark datasets, train/validation splitting, feature
// standardization, and a bit-faithful CSV interchange format.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mltr/network.hpp"
#include "mltr/rng.hpp"

namespace mltr {

struct Dataset {
  std::string name;
  MatX features;  // one sample per row
  MatX targets;   // one-hot rows for classification, raw values otherwise
  std::uint64_t seed = 0;
  bool classification = true;

  int size() const { return int(features.rows()); }
  int n_in() const { return int(features.cols()); }
  int n_out() const { return int(targets.cols()); }
};

namespace detail {

// 0 left eye, 1 right eye, 2 mouth, 3 background.
inline int smiley_label(double x, double y) {
  const double eye_r2 = 0.6 * 0.6;
  const double dl = (x + 1.5) * (x + 1.5) + (y - 1.5) * (y - 1.5);
  if (dl <= eye_r2) return 0;
  const double dr = (x - 1.5) * (x - 1.5) + (y - 1.5) * (y - 1.5);
  if (dr <= eye_r2) return 1;
  const double dm = std::sqrt(x * x + (y - 0.5) * (y - 0.5));
  if (dm >= 2.0 && dm <= 2.6 && y < -0.2) return 2;
  return 3;
}

inline std::vector<int> balanced_counts(int n, int classes) {
  std::vector<int> counts(classes, n / classes);
  for (int j = 0; j < n % classes; ++j) counts[j] += 1;
  return counts;
}

}  // namespace detail

// Four-region classification on [-5,5]^2: two eye disks, a mouth arc, and
// the background. Classes are balanced by per-class rejection sampling, so
// the sample order is class 0 block, then 1, 2, 3.
inline Dataset gen_smiley(int n, std::uint64_t seed) {
  if (n < 1) throw std::invalid_argument("gen_smiley: n >= 1");
  Rng rng(seed);
  Dataset d;
  d.name = "smiley";
  d.seed = seed;
  d.classification = true;
  d.features.resize(n, 2);
  d.targets = MatX::Zero(n, 4);
  const auto counts = detail::balanced_counts(n, 4);
  int row = 0;
  for (int cls = 0; cls < 4; ++cls) {
    for (int i = 0; i < counts[cls]; ++i) {
      double x, y;
      do {
        x = rng.uniform(-5.0, 5.0);
        y = rng.uniform(-5.0, 5.0);
      } while (detail::smiley_label(x, y) != cls);
      d.features(row, 0) = x;
      d.features(row, 1) = y;
      d.targets(row, cls) = 1.0;
      ++row;
    }
  }
  return d;
}

// Five-class 3-d spiral: parameter t in [0, 4*pi] is stratified into ten
// equal chunks, each class owning two chunks chosen by a seeded permutation.
// Points sit on (r cos t, r sin t, z) with r = 0.1 + 1.3 t / 4pi and
// z = 3 t / 4pi - 1.5, plus Gaussian noise clamped to [-1.5, 1.5]^3.
inline Dataset gen_spiral(int n, std::uint64_t seed,
                          double noise_sigma = 0.05) {
  if (n < 1) throw std::invalid_argument("gen_spiral: n >= 1");
  Rng rng(seed);
  Dataset d;
  d.name = "spiral";
  d.seed = seed;
  d.classification = true;
  d.features.resize(n, 3);
  d.targets = MatX::Zero(n, 5);

  std::vector<int> perm(10);
  for (int i = 0; i < 10; ++i) perm[i] = i;
  rng.shuffle(perm);

  const double t_max = 4.0 * M_PI;
  const double chunk_len = t_max / 10.0;
  const auto counts = detail::balanced_counts(n, 5);
  int row = 0;
  for (int cls = 0; cls < 5; ++cls) {
    const int chunks[2] = {perm[2 * cls], perm[2 * cls + 1]};
    const int per_chunk[2] = {(counts[cls] + 1) / 2, counts[cls] / 2};
    for (int half = 0; half < 2; ++half) {
      const double t_lo = chunks[half] * chunk_len;
      for (int i = 0; i < per_chunk[half]; ++i) {
        const double t = t_lo + rng.uniform() * chunk_len;
        const double r = 0.1 + 1.3 * t / t_max;
        double pt[3] = {r * std::cos(t), r * std::sin(t),
                        3.0 * t / t_max - 1.5};
        for (int k = 0; k < 3; ++k) {
          pt[k] += noise_sigma * rng.normal();
          pt[k] = std::clamp(pt[k], -1.5, 1.5);
          d.features(row, k) = pt[k];
        }
        d.targets(row, cls) = 1.0;
        ++row;
      }
    }
  }
  return d;
}

// Smooth two-output regression target on the cube [-1,1]^3.
inline Dataset gen_analytic_regression(int n, std::uint64_t seed) {
  if (n < 1) throw std::invalid_argument("gen_analytic_regression: n >= 1");
  Rng rng(seed);
  Dataset d;
  d.name = "analytic";
  d.seed = seed;
  d.classification = false;
  d.features.resize(n, 3);
  d.targets.resize(n, 2);
  for (int i = 0; i < n; ++i) {
    const double x1 = rng.uniform(-1.0, 1.0);
    const double x2 = rng.uniform(-1.0, 1.0);
    const double x3 = rng.uniform(-1.0, 1.0);
    d.features(i, 0) = x1;
    d.features(i, 1) = x2;
    d.features(i, 2) = x3;
    d.targets(i, 0) = std::sin(x1) * x2 + x3 * x3;
    d.targets(i, 1) = std::cos(x1 * x2) - x3;
  }
  return d;
}

struct Split {
  MatX train_x, train_c;
  MatX val_x, val_c;
};

// Seeded shuffle, then the first round(fraction * n) rows train.
inline Split split_dataset(const Dataset& d, double train_fraction,
                           std::uint64_t seed) {
  const int n = d.size();
  const int n_train = int(std::llround(train_fraction * double(n)));
  if (n_train < 1 || n_train > n)
    throw std::invalid_argument("split_dataset: bad fraction");
  std::vector<int> idx(n);
  for (int i = 0; i < n; ++i) idx[i] = i;
  Rng rng(seed);
  rng.shuffle(idx);
  Split s;
  s.train_x.resize(n_train, d.n_in());
  s.train_c.resize(n_train, d.n_out());
  s.val_x.resize(n - n_train, d.n_in());
  s.val_c.resize(n - n_train, d.n_out());
  for (int i = 0; i < n; ++i) {
    if (i < n_train) {
      s.train_x.row(i) = d.features.row(idx[i]);
      s.train_c.row(i) = d.targets.row(idx[i]);
    } else {
      s.val_x.row(i - n_train) = d.features.row(idx[i]);
      s.val_c.row(i - n_train) = d.targets.row(idx[i]);
    }
  }
  return s;
}

// Per-feature affine map fitted on the training rows (population standard
// deviation; constant features map to themselves shifted to zero).
struct Standardizer {
  VecX mean, scale;

  static Standardizer fit(const MatX& train_x) {
    Standardizer s;
    const double n = double(train_x.rows());
    s.mean = train_x.colwise().mean();
    s.scale.resize(train_x.cols());
    for (Eigen::Index j = 0; j < train_x.cols(); ++j) {
      const double var =
          (train_x.col(j).array() - s.mean[j]).square().sum() / n;
      const double sd = std::sqrt(var);
      s.scale[j] = sd > 0.0 ? sd : 1.0;
    }
    return s;
  }
  MatX apply(const MatX& x) const {
    return (x.rowwise() - mean.transpose()).array().rowwise() /
           scale.transpose().array();
  }
};

// CSV with header x1..x<d>,c1..c<m>, one row per sample, shortest exact
// doubles, LF line endings. A sidecar <path>.meta.json records provenance.
inline void export_csv(const Dataset& d, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("export_csv: cannot open " + path);
  for (int j = 0; j < d.n_in(); ++j)
    f << (j ? ",x" : "x") << (j + 1);
  for (int j = 0; j < d.n_out(); ++j) f << ",c" << (j + 1);
  f << "\n";
  char buf[40];
  for (int i = 0; i < d.size(); ++i) {
    for (int j = 0; j < d.n_in(); ++j) {
      std::snprintf(buf, sizeof buf, "%.17g", d.features(i, j));
      f << (j ? "," : "") << buf;
    }
    for (int j = 0; j < d.n_out(); ++j) {
      std::snprintf(buf, sizeof buf, "%.17g", d.targets(i, j));
      f << "," << buf;
    }
    f << "\n";
  }
  if (!f) throw std::runtime_error("export_csv: write failed " + path);

  nlohmann::ordered_json meta;
  meta["schema"] = "mltr-dataset-v1";
  meta["generator"] = d.name;
  meta["seed"] = d.seed;
  meta["n"] = d.size();
  meta["n_in"] = d.n_in();
  meta["n_out"] = d.n_out();
  meta["classification"] = d.classification;
  std::ofstream m(path + ".meta.json", std::ios::binary);
  m << meta.dump(2) << "\n";
}

inline Dataset import_csv(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("import_csv: cannot open " + path);
  std::string header;
  if (!std::getline(f, header))
    throw std::runtime_error("import_csv: empty file " + path);
  int n_in = 0, n_out = 0;
  {
    std::stringstream hs(header);
    std::string col;
    while (std::getline(hs, col, ',')) {
      if (!col.empty() && col.back() == '\r') col.pop_back();
      if (col.rfind('x', 0) == 0)
        ++n_in;
      else if (col.rfind('c', 0) == 0)
        ++n_out;
      else
        throw std::runtime_error("import_csv: unknown column " + col);
    }
  }
  if (n_in < 1 || n_out < 1)
    throw std::runtime_error("import_csv: bad header " + header);

  std::vector<double> cells;
  std::string line;
  int rows = 0;
  while (std::getline(f, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::stringstream ls(line);
    std::string cell;
    int got = 0;
    while (std::getline(ls, cell, ',')) {
      cells.push_back(std::strtod(cell.c_str(), nullptr));
      ++got;
    }
    if (got != n_in + n_out)
      throw std::runtime_error("import_csv: ragged row in " + path);
    ++rows;
  }
  Dataset d;
  d.name = path;
  d.features.resize(rows, n_in);
  d.targets.resize(rows, n_out);
  for (int i = 0; i < rows; ++i) {
    for (int j = 0; j < n_in; ++j)
      d.features(i, j) = cells[size_t(i) * (n_in + n_out) + j];
    for (int j = 0; j < n_out; ++j)
      d.targets(i, j) = cells[size_t(i) * (n_in + n_out) + n_in + j];
  }

  std::ifstream m(path + ".meta.json", std::ios::binary);
  if (m) {
    const auto meta = nlohmann::json::parse(m, nullptr, false);
    if (!meta.is_discarded()) {
      d.name = meta.value("generator", d.name);
      d.seed = meta.value("seed", std::uint64_t(0));
      d.classification = meta.value("classification", true);
    }
  } else {
    // Heuristic: one-hot rows mean classification.
    d.classification = true;
    for (int i = 0; i < rows && d.classification; ++i) {
      double sum = 0.0;
      for (int j = 0; j < n_out; ++j) {
        const double v = d.targets(i, j);
        if (v != 0.0 && v != 1.0) d.classification = false;
        sum += v;
      }
      if (sum != 1.0) d.classification = false;
    }
  }
  return d;
}

}  // namespace mltr
