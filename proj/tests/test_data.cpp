// Dataset generators, splits, CSV round trips, mini-batch plans and the
// dynamic sample-size loop.

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <mltr/datasets.hpp>
#include <mltr/dss.hpp>
#include <mltr/objective.hpp>
#include <mltr/rmtr.hpp>

using namespace mltr;

namespace {

// Region rules restated independently of the generator.
int smiley_oracle(double x, double y) {
  auto d2 = [](double ax, double ay, double bx, double by) {
    return (ax - bx) * (ax - bx) + (ay - by) * (ay - by);
  };
  if (d2(x, y, -1.5, 1.5) <= 0.36) return 0;
  if (d2(x, y, 1.5, 1.5) <= 0.36) return 1;
  const double dm = std::sqrt(x * x + (y - 0.5) * (y - 0.5));
  if (dm >= 2.0 && dm <= 2.6 && y < -0.2) return 2;
  return 3;
}

int onehot_class(const MatX& targets, int row) {
  int cls = -1;
  for (int j = 0; j < targets.cols(); ++j) {
    if (targets(row, j) == 1.0) {
      REQUIRE(cls == -1);
      cls = j;
    } else {
      REQUIRE(targets(row, j) == 0.0);
    }
  }
  REQUIRE(cls >= 0);
  return cls;
}

Batch make_blobs(int n, unsigned long long seed) {
  Rng rng(seed);
  Batch b;
  b.features.resize(n, 2);
  b.targets = Eigen::MatrixXd::Zero(n, 2);
  for (int i = 0; i < n; ++i) {
    const int c = i % 2;
    const double cx = c == 0 ? 1.0 : -1.0;
    b.features(i, 0) = cx + 0.3 * rng.normal();
    b.features(i, 1) = cx + 0.3 * rng.normal();
    b.targets(i, c) = 1.0;
  }
  return b;
}

NetworkConfig blob_config(int blocks = 2) {
  NetworkConfig c;
  c.n_in = 2;
  c.n_out = 2;
  c.width = 4;
  c.blocks = blocks;
  c.T = 1.0;
  c.activation = Activation::Tanh;
  c.hypothesis = Hypothesis::Softmax;
  c.loss = LossKind::CrossEntropy;
  c.beta1 = 1e-3;
  c.beta2 = 1e-3;
  return c;
}

Batch slice_rows(const Batch& b, int start, int len) {
  Batch out;
  out.features = b.features.middleRows(start, len);
  out.targets = b.targets.middleRows(start, len);
  return out;
}

}  // namespace

TEST_CASE("smiley dataset matches the region oracle") {
  const Dataset d = gen_smiley(400, 5);
  REQUIRE(d.size() == 400);
  REQUIRE(d.n_in() == 2);
  REQUIRE(d.n_out() == 4);
  CHECK(d.classification);

  std::vector<int> counts(4, 0);
  int prev = 0;
  for (int i = 0; i < d.size(); ++i) {
    const double x = d.features(i, 0), y = d.features(i, 1);
    CHECK(std::abs(x) <= 5.0);
    CHECK(std::abs(y) <= 5.0);
    const int cls = onehot_class(d.targets, i);
    CHECK(cls == smiley_oracle(x, y));
    CHECK(cls >= prev);  // class-block row order
    prev = cls;
    ++counts[cls];
  }
  CHECK(counts == std::vector<int>{100, 100, 100, 100});

  const Dataset d2 = gen_smiley(400, 5);
  CHECK((d.features.array() == d2.features.array()).all());
  const Dataset d3 = gen_smiley(400, 6);
  CHECK((d.features.array() != d3.features.array()).any());

  // Remainder samples go to the leading classes.
  const Dataset odd = gen_smiley(11, 1);
  std::vector<int> oc(4, 0);
  for (int i = 0; i < 11; ++i) ++oc[onehot_class(odd.targets, i)];
  CHECK(oc == std::vector<int>{3, 3, 3, 2});
}

TEST_CASE("spiral dataset inverts exactly without noise") {
  const double t_max = 4.0 * std::acos(-1.0);
  const double chunk_len = t_max / 10.0;
  const Dataset d = gen_spiral(1000, 9, 0.0);
  REQUIRE(d.size() == 1000);
  REQUIRE(d.n_in() == 3);
  REQUIRE(d.n_out() == 5);

  std::vector<std::set<int>> chunks_of(5);
  std::vector<int> counts(5, 0);
  for (int i = 0; i < d.size(); ++i) {
    const int cls = onehot_class(d.targets, i);
    ++counts[cls];
    const double z = d.features(i, 2);
    const double t = (z + 1.5) * t_max / 3.0;
    REQUIRE(t >= -1e-9);
    REQUIRE(t <= t_max + 1e-9);
    const double r = 0.1 + 1.3 * t / t_max;
    CHECK(std::abs(d.features(i, 0) - r * std::cos(t)) < 1e-9);
    CHECK(std::abs(d.features(i, 1) - r * std::sin(t)) < 1e-9);
    chunks_of[cls].insert(int(std::floor(t / chunk_len)));
  }
  CHECK(counts == std::vector<int>(5, 200));

  // Each class owns two whole angular chunks and the ten chunks partition
  // the spiral.
  std::set<int> all;
  for (int c = 0; c < 5; ++c) {
    CHECK(chunks_of[c].size() == 2);
    all.insert(chunks_of[c].begin(), chunks_of[c].end());
  }
  CHECK(all.size() == 10);

  const Dataset noisy = gen_spiral(500, 9, 0.05);
  CHECK(noisy.features.array().abs().maxCoeff() <= 1.5);
  const Dataset again = gen_spiral(1000, 9, 0.0);
  CHECK((d.features.array() == again.features.array()).all());
}

TEST_CASE("analytic regression targets are the stated functions") {
  const Dataset d = gen_analytic_regression(64, 12);
  REQUIRE(d.size() == 64);
  REQUIRE(d.n_in() == 3);
  REQUIRE(d.n_out() == 2);
  CHECK_FALSE(d.classification);
  for (int i = 0; i < d.size(); ++i) {
    const double x1 = d.features(i, 0), x2 = d.features(i, 1),
                 x3 = d.features(i, 2);
    CHECK(std::abs(x1) <= 1.0);
    CHECK(d.targets(i, 0) == std::sin(x1) * x2 + x3 * x3);
    CHECK(d.targets(i, 1) == std::cos(x1 * x2) - x3);
  }
}

TEST_CASE("split partitions the rows without loss") {
  const Dataset d = gen_smiley(700, 2);
  const Split s = split_dataset(d, 5.0 / 7.0, 77);
  REQUIRE(s.train_x.rows() == 500);
  REQUIRE(s.val_x.rows() == 200);

  auto row_key = [](const MatX& x, const MatX& c, int i) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%.17g,%.17g|%g%g%g%g", x(i, 0), x(i, 1),
                  c(i, 0), c(i, 1), c(i, 2), c(i, 3));
    return std::string(buf);
  };
  std::multiset<std::string> orig, split;
  for (int i = 0; i < 700; ++i) orig.insert(row_key(d.features, d.targets, i));
  for (int i = 0; i < 500; ++i) split.insert(row_key(s.train_x, s.train_c, i));
  for (int i = 0; i < 200; ++i) split.insert(row_key(s.val_x, s.val_c, i));
  CHECK(orig == split);

  const Split s2 = split_dataset(d, 5.0 / 7.0, 77);
  CHECK((s.train_x.array() == s2.train_x.array()).all());
  const Split s3 = split_dataset(d, 5.0 / 7.0, 78);
  CHECK((s.train_x.array() != s3.train_x.array()).any());

  CHECK(split_dataset(d, 1.0, 1).val_x.rows() == 0);
  CHECK_THROWS_AS(split_dataset(d, 0.0, 1), std::invalid_argument);
  CHECK_THROWS_AS(split_dataset(d, 1.1, 1), std::invalid_argument);
}

TEST_CASE("standardizer uses training statistics only") {
  Rng rng(31);
  MatX train(50, 3), val(20, 3);
  for (int i = 0; i < 50; ++i) {
    train(i, 0) = 3.0 + 2.0 * rng.normal();
    train(i, 1) = -1.0 + 0.1 * rng.normal();
    train(i, 2) = 4.25;  // constant feature
  }
  for (int i = 0; i < 20; ++i)
    for (int j = 0; j < 3; ++j) val(i, j) = rng.normal();

  const Standardizer st = Standardizer::fit(train);
  const MatX tz = st.apply(train);
  for (int j = 0; j < 2; ++j) {
    CHECK(std::abs(tz.col(j).mean()) < 1e-12);
    const double var = (tz.col(j).array() - tz.col(j).mean()).square().sum() / 50.0;
    CHECK(var == Catch::Approx(1.0).epsilon(1e-10));
  }
  CHECK(st.scale[2] == 1.0);
  CHECK((tz.col(2).array() == 0.0).all());

  const MatX vz = st.apply(val);
  CHECK(vz(0, 0) == Catch::Approx((val(0, 0) - st.mean[0]) / st.scale[0]));
}

TEST_CASE("csv export and import round trip bit-exactly") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path();
  const std::string path = (dir / "mltr_data_roundtrip.csv").string();

  const Dataset d = gen_spiral(37, 3);
  export_csv(d, path);
  const Dataset back = import_csv(path);
  REQUIRE(back.size() == 37);
  CHECK((back.features.array() == d.features.array()).all());
  CHECK((back.targets.array() == d.targets.array()).all());
  CHECK(back.classification);
  CHECK(back.name == "spiral");
  CHECK(back.seed == 3);

  SECTION("one-hot heuristic when the sidecar is missing") {
    fs::remove(path + ".meta.json");
    CHECK(import_csv(path).classification);

    const Dataset reg = gen_analytic_regression(20, 4);
    export_csv(reg, path);
    fs::remove(path + ".meta.json");
    CHECK_FALSE(import_csv(path).classification);
  }

  SECTION("malformed inputs are rejected") {
    {
      std::ofstream f(path, std::ios::binary);
      f << "x1,c1\n1.0,1.0\n2.0\n";
    }
    fs::remove(path + ".meta.json");
    CHECK_THROWS_WITH(import_csv(path),
                      Catch::Matchers::ContainsSubstring("ragged"));
    {
      std::ofstream f(path, std::ios::binary);
      f << "x1,q1\n1.0,1.0\n";
    }
    CHECK_THROWS_WITH(import_csv(path),
                      Catch::Matchers::ContainsSubstring("unknown column"));
  }

  fs::remove(path);
  fs::remove(path + ".meta.json");
}

TEST_CASE("minibatch plans tile the shuffled order") {
  Rng rng(42);

  SECTION("overlapping tiling with a long tail batch") {
    const MiniBatchPlan plan = gen_minibatches(1000, 250, 50, rng);
    REQUIRE(plan.num_batches() == 4);
    CHECK(plan.overlap == 50);
    CHECK(plan.spans == std::vector<std::pair<int, int>>{
                            {0, 250}, {200, 250}, {400, 250}, {600, 400}});

    std::vector<int> sorted = plan.order;
    std::sort(sorted.begin(), sorted.end());
    for (int i = 0; i < 1000; ++i) REQUIRE(sorted[i] == i);

    std::vector<bool> seen(1000, false);
    for (int b = 0; b < 4; ++b)
      for (int i : plan.batch_indices(b)) seen[size_t(i)] = true;
    CHECK(std::count(seen.begin(), seen.end(), true) == 1000);

    for (int b = 0; b + 1 < 4; ++b) {
      const auto ov = plan.overlap_with_next(b);
      REQUIRE(int(ov.size()) == 50);
      const auto cur = plan.batch_indices(b);
      const auto nxt = plan.batch_indices(b + 1);
      CHECK(std::equal(ov.begin(), ov.end(), cur.end() - 50));
      CHECK(std::equal(ov.begin(), ov.end(), nxt.begin()));
      CHECK(plan.overlap_with_prev(b + 1) == ov);
    }
    CHECK(plan.overlap_with_next(3).empty());
    CHECK(plan.overlap_with_prev(0).empty());
  }

  SECTION("no overlap splits exactly") {
    const MiniBatchPlan plan = gen_minibatches(1000, 333, 0, rng);
    CHECK(plan.spans == std::vector<std::pair<int, int>>{
                            {0, 333}, {333, 333}, {666, 334}});
  }

  SECTION("a covering batch size collapses to one full batch") {
    const MiniBatchPlan plan = gen_minibatches(100, 100, 20, rng);
    REQUIRE(plan.num_batches() == 1);
    CHECK(plan.spans[0] == std::pair<int, int>{0, 100});
    CHECK(plan.overlap == 0);
    CHECK(plan.overlap_with_next(0).empty());
  }

  SECTION("invalid shapes throw") {
    CHECK_THROWS_AS(gen_minibatches(0, 10, 0, rng), std::invalid_argument);
    CHECK_THROWS_AS(gen_minibatches(100, 0, 0, rng), std::invalid_argument);
    CHECK_THROWS_AS(gen_minibatches(100, 10, -1, rng), std::invalid_argument);
    CHECK_THROWS_AS(gen_minibatches(100, 10, 6, rng), std::invalid_argument);
  }
}

TEST_CASE("global ratio guards its denominator") {
  const double inf = std::numeric_limits<double>::infinity();
  CHECK(global_ratio(1.0, 0.9, {0.1, 0.2, 0.3}) == Catch::Approx(0.5));
  CHECK(global_ratio(1.0, 0.9, {}) == -inf);
  CHECK(global_ratio(1.0, 0.9, {0.0}) == -inf);
  CHECK(global_ratio(1.0, 0.9, {-0.5, 0.4}) == -inf);
  CHECK(global_ratio(1.0, inf, {0.1}) == -inf);
  CHECK(global_ratio(1.0, std::nan(""), {0.1}) == -inf);
}

TEST_CASE("gcontrol accepts, holds and grows per the thresholds") {
  DssParams p;  // zeta1 = 0.1, zeta2 = 0.0, omega = 2.0
  const int pop = 7000;

  GcontrolDecision d = gcontrol(-0.2, 250, 1, pop, p);
  CHECK_FALSE(d.accepted);
  CHECK(d.mbs == 500);
  CHECK(d.memory == 2);

  d = gcontrol(0.05, 500, 2, pop, p);
  CHECK_FALSE(d.accepted);  // below zeta1 rejects
  CHECK(d.mbs == 500);      // at or above zeta2 holds the batch size
  CHECK(d.memory == 2);

  d = gcontrol(0.5, 500, 2, pop, p);
  CHECK(d.accepted);
  CHECK(d.mbs == 500);
  CHECK(d.memory == 2);

  d = gcontrol(std::nan(""), 250, 1, pop, p);
  CHECK_FALSE(d.accepted);
  CHECK(d.mbs == 500);
  CHECK(d.memory == 2);

  CHECK_FALSE(gcontrol(p.zeta1, 250, 1, pop, p).accepted);
  CHECK(gcontrol(p.zeta2, 250, 1, pop, p).mbs == 250);

  d = gcontrol(-1.0, 4000, 3, pop, p);
  CHECK(d.mbs == 7000);  // growth saturates at the dataset size
  CHECK(d.memory == 4);
  d = gcontrol(-1.0, 7000, 4, pop, p);
  CHECK(d.mbs == 7000);  // saturated: no growth, no memory bump
  CHECK(d.memory == 4);

  DssParams q;
  q.omega = 1.5;
  CHECK(gcontrol(-1.0, 3, 1, pop, q).mbs == 5);  // ceil(4.5)
}

TEST_CASE("overlap secant pair is the regularized gradient difference") {
  const NetworkConfig cfg = blob_config();
  const Batch batch = make_blobs(8, 14);
  const Batch overlap = slice_rows(batch, 0, 3);
  Rng rng(15);
  const VecX a = init_params(cfg, rng);
  VecX b = a;
  for (Eigen::Index i = 0; i < b.size(); ++i) b[i] += 0.01 * rng.normal();

  const auto [s, z] = secant_pair_overlap(b, a, cfg, overlap);
  CHECK((s.array() == (b - a).array()).all());

  const VecX z_data = loss_gradient(b, cfg, overlap, false).grad -
                      loss_gradient(a, cfg, overlap, false).grad;
  const VecX reg_diff = (loss_gradient(b, cfg, overlap).grad -
                         loss_gradient(b, cfg, overlap, false).grad) -
                        (loss_gradient(a, cfg, overlap).grad -
                         loss_gradient(a, cfg, overlap, false).grad);
  CHECK((z - z_data - reg_diff).norm() < 1e-14 * std::max(1.0, z.norm()));
  CHECK(reg_diff.norm() > 0.0);  // the pair really carries the regularizer
}

TEST_CASE("sampled secant pairs use exact hessian products") {
  const NetworkConfig cfg = blob_config();
  const Batch batch = make_blobs(6, 25);
  Rng rng(26);
  const VecX theta = init_params(cfg, rng);

  Rng pair_rng(99);
  const auto pairs = secant_pairs_sampled(theta, cfg, batch, 4, pair_rng);
  REQUIRE(pairs.size() == 4);
  for (const auto& [s, z] : pairs) {
    REQUIRE(s.size() == theta.size());
    CHECK(s.minCoeff() >= 0.0);
    CHECK(s.maxCoeff() < 1.0);
    CHECK((z.array() == hvp(theta, cfg, batch, s).array()).all());
  }
}

TEST_CASE("carry completes a full gradient from the overlap part") {
  const NetworkConfig cfg = blob_config();
  const Batch batch = make_blobs(10, 33);
  const Batch overlap = slice_rows(batch, 0, 4);
  const Batch rest = slice_rows(batch, 4, 6);
  Rng rng(34);
  const VecX theta = init_params(cfg, rng);

  const VecX g_ref = loss_gradient(theta, cfg, batch).grad;
  const VecX g_overlap_data = loss_gradient(theta, cfg, overlap, false).grad;

  WorkLedger ledger({cfg.blocks}, batch.size());
  BoundLoss bl(cfg, batch, overlap, &ledger, 1, 0, 0);
  bl.set_carry(BoundLoss::Carry{theta, g_overlap_data, rest});
  const VecX g = bl.gradient(theta);
  CHECK((g - g_ref).norm() < 1e-13 * std::max(1.0, g_ref.norm()));
  CHECK(ledger.total() == Catch::Approx(0.6));  // only 6 of 10 samples ran
}

TEST_CASE("dss loop grows batches and restores rejected iterates") {
  const Batch train = make_blobs(60, 41);
  const Hierarchy h =
      build_hierarchy(blob_config(2), 2, Refinement::IntervalDoubling);
  CycleConfig cc;

  Rng init_rng(55);
  const VecX theta0 = init_params(h.finest().cfg, init_rng);

  SECTION("forced rejection restores the iterate bit-exactly and grows") {
    DssParams dp;
    dp.mbs0 = 20;  // o = 4, three batches over 60 samples
    dp.zeta1 = 1e300;
    dp.zeta2 = 1e300;
    WorkLedger ledger({2, 4}, 60);
    Rng rng(56);

    std::vector<DssEpochInfo> infos;
    bool restored = false;
    const auto on_epoch = [&](const DssEpochInfo& info, const VecX& th) {
      infos.push_back(info);
      if (info.epoch == 0)
        restored = th.size() == theta0.size() &&
                   (th.array() == theta0.array()).all();
      return false;
    };
    const DssResult r = dss_rmtr(h, train.features, train.targets, theta0, cc,
                                 dp, 3, ledger, rng, on_epoch);

    REQUIRE(infos.size() == 3);
    CHECK(infos[0].mbs == 20);
    CHECK(infos[0].num_batches == 3);
    CHECK(infos[0].memory == 1);
    CHECK_FALSE(infos[0].deterministic);
    CHECK(infos[0].global_evaluated);
    CHECK_FALSE(infos[0].accepted);
    CHECK(restored);

    CHECK(infos[1].mbs == 40);
    CHECK(infos[1].memory == 2);
    CHECK_FALSE(infos[1].accepted);

    // 80 saturates at 60: the regime turns deterministic and accepts.
    CHECK(infos[2].mbs == 60);
    CHECK(infos[2].memory == 3);
    CHECK(infos[2].deterministic);
    CHECK_FALSE(infos[2].global_evaluated);
    CHECK(infos[2].accepted);

    CHECK(r.epochs_run == 3);
    CHECK(r.final_mbs == 60);
    CHECK(r.final_memory == 3);
    CHECK((r.theta.array() != theta0.array()).any());
    CHECK(ledger.total() > 0.0);
  }

  SECTION("deterministic regime accepts unconditionally and descends") {
    DssParams dp;
    dp.mbs0 = 100;  // covers the 60 training samples
    WorkLedger ledger({2, 4}, 60);
    Rng rng(57);

    std::vector<DssEpochInfo> infos;
    const auto on_epoch = [&](const DssEpochInfo& info, const VecX&) {
      infos.push_back(info);
      return false;
    };
    const DssResult r = dss_rmtr(h, train.features, train.targets, theta0, cc,
                                 dp, 3, ledger, rng, on_epoch);

    REQUIRE(infos.size() == 3);
    for (const auto& info : infos) {
      CHECK(info.deterministic);
      CHECK(info.accepted);
      CHECK_FALSE(info.global_evaluated);
      CHECK(std::isnan(info.rho_g));
      CHECK(info.num_batches == 1);
      CHECK(info.mbs == 60);
    }
    const double before = loss(theta0, h.finest().cfg, train);
    const double after = loss(r.theta, h.finest().cfg, train);
    CHECK(after < before);
  }

  SECTION("stochastic epochs fire the batch probe per mini-batch") {
    DssParams dp;
    dp.mbs0 = 20;
    WorkLedger ledger({2, 4}, 60);
    Rng rng(58);

    int fired = 0;
    const DssBatchProbe probe = [&](int epoch, int batch, const VecX& a,
                                    const VecX& b) {
      CHECK(epoch == 0);
      CHECK(batch == fired);
      CHECK(a.size() == b.size());
      ++fired;
    };
    dss_rmtr(h, train.features, train.targets, theta0, cc, dp, 1, ledger, rng,
             [](const DssEpochInfo&, const VecX&) { return true; }, probe);
    CHECK(fired == 3);
  }

  SECTION("argument validation") {
    DssParams dp;
    WorkLedger ledger({2, 4}, 1);
    Rng rng(59);
    MatX empty_x(0, 2), empty_c(0, 2);
    CHECK_THROWS_AS(dss_rmtr(h, empty_x, empty_c, theta0, cc, dp, 1, ledger,
                             rng, nullptr),
                    std::invalid_argument);
    dp.mbs0 = 0;
    CHECK_THROWS_AS(dss_rmtr(h, train.features, train.targets, theta0, cc, dp,
                             1, ledger, rng, nullptr),
                    std::invalid_argument);
  }
}
