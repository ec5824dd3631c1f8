#pragma once

// Work accounting. The unit is one full-batch gradient evaluation on the
// finest level. An evaluation of a set of n samples on level l costs
// (n / population) * (K_l / K_L) units; under interval doubling the block
// ratio equals 2^(l-L) exactly. Gradient calls define the headline W.
// Hessian-vector products and function-only evaluations are tallied
// separately with their own weights (defaults: hvp = 2 gradient-equivalents,
// function value = 0) and never pollute W.

#include <cstdint>
#include <map>
#include <stdexcept>
#include <tuple>
#include <vector>

#include <json.hpp>

namespace mltr {

class WorkLedger {
 public:
  struct Counts {
    std::int64_t grad = 0;
    std::int64_t fn = 0;
    std::int64_t hvp = 0;
  };
  // Entries are keyed by (epoch, batch id, level, samples evaluated); partial
  // evaluations (overlap sets, cache-completed gradients) get their own key
  // through the distinct sample count.
  using Key = std::tuple<int, int, int, std::int64_t>;

  WorkLedger() = default;
  WorkLedger(std::vector<int> blocks_per_level, std::int64_t population,
             double hvp_weight = 2.0, double fn_weight = 0.0)
      : blocks_(std::move(blocks_per_level)),
        population_(population),
        hvp_weight_(hvp_weight),
        fn_weight_(fn_weight) {
    if (blocks_.empty() || population_ <= 0)
      throw std::invalid_argument("WorkLedger: bad configuration");
  }

  void record_grad(int epoch, int batch, int level, std::int64_t n,
                   std::int64_t calls = 1) {
    at(epoch, batch, level, n).grad += calls;
  }
  void record_fn(int epoch, int batch, int level, std::int64_t n,
                 std::int64_t calls = 1) {
    at(epoch, batch, level, n).fn += calls;
  }
  void record_hvp(int epoch, int batch, int level, std::int64_t n,
                  std::int64_t calls = 1) {
    at(epoch, batch, level, n).hvp += calls;
  }

  // Gradient-only work units.
  double total() const { return weighted([](const Counts& c) { return double(c.grad); }); }
  // Hessian-vector work in gradient-equivalents.
  double total_hvp() const {
    return hvp_weight_ * weighted([](const Counts& c) { return double(c.hvp); });
  }
  double total_fn() const {
    return fn_weight_ * weighted([](const Counts& c) { return double(c.fn); });
  }

  std::int64_t grad_calls() const { return sum([](const Counts& c) { return c.grad; }); }
  std::int64_t fn_calls() const { return sum([](const Counts& c) { return c.fn; }); }
  std::int64_t hvp_calls() const { return sum([](const Counts& c) { return c.hvp; }); }

  int num_levels() const { return int(blocks_.size()); }
  std::int64_t population() const { return population_; }
  const std::map<Key, Counts>& entries() const { return entries_; }

  // Ratio of level-l block count to the finest block count.
  double level_scale(int level) const {
    if (level < 1 || level > num_levels())
      throw std::out_of_range("WorkLedger: unknown level");
    return double(blocks_[level - 1]) / double(blocks_.back());
  }

  // Accumulates another ledger with identical configuration.
  void merge(const WorkLedger& other) {
    if (other.blocks_ != blocks_ || other.population_ != population_)
      throw std::invalid_argument("WorkLedger::merge: configuration mismatch");
    for (const auto& [k, c] : other.entries_) {
      Counts& mine = entries_[k];
      mine.grad += c.grad;
      mine.fn += c.fn;
      mine.hvp += c.hvp;
    }
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["schema"] = "mltr-ledger-v1";
    j["population"] = population_;
    j["blocks_per_level"] = blocks_;
    j["hvp_weight"] = hvp_weight_;
    j["fn_weight"] = fn_weight_;
    auto rows = nlohmann::ordered_json::array();
    for (const auto& [k, c] : entries_) {
      nlohmann::ordered_json row;
      row["epoch"] = std::get<0>(k);
      row["batch"] = std::get<1>(k);
      row["level"] = std::get<2>(k);
      row["n"] = std::get<3>(k);
      row["grad"] = c.grad;
      row["fn"] = c.fn;
      row["hvp"] = c.hvp;
      rows.push_back(std::move(row));
    }
    j["entries"] = std::move(rows);
    j["W"] = total();
    j["W_hvp"] = total_hvp();
    return j;
  }

  static WorkLedger from_json(const nlohmann::json& j) {
    if (j.at("schema") != "mltr-ledger-v1")
      throw std::invalid_argument("WorkLedger: unknown schema");
    WorkLedger w(j.at("blocks_per_level").get<std::vector<int>>(),
                 j.at("population").get<std::int64_t>(),
                 j.at("hvp_weight").get<double>(),
                 j.at("fn_weight").get<double>());
    for (const auto& row : j.at("entries")) {
      Key k{row.at("epoch").get<int>(), row.at("batch").get<int>(),
            row.at("level").get<int>(), row.at("n").get<std::int64_t>()};
      Counts c;
      c.grad = row.at("grad").get<std::int64_t>();
      c.fn = row.at("fn").get<std::int64_t>();
      c.hvp = row.at("hvp").get<std::int64_t>();
      w.entries_[k] = c;
    }
    return w;
  }

 private:
  Counts& at(int epoch, int batch, int level, std::int64_t n) {
    if (level < 1 || level > num_levels())
      throw std::out_of_range("WorkLedger: unknown level");
    if (n < 0 || n > population_)
      throw std::invalid_argument("WorkLedger: bad sample count");
    return entries_[Key{epoch, batch, level, n}];
  }

  template <class F>
  double weighted(F pick) const {
    double acc = 0.0;
    for (const auto& [k, c] : entries_)
      acc += (double(std::get<3>(k)) / double(population_)) *
             level_scale(std::get<2>(k)) * pick(c);
    return acc;
  }
  template <class F>
  std::int64_t sum(F pick) const {
    std::int64_t acc = 0;
    for (const auto& [k, c] : entries_) acc += pick(c);
    return acc;
  }

  std::map<Key, Counts> entries_;
  std::vector<int> blocks_;
  std::int64_t population_ = 0;
  double hvp_weight_ = 2.0;
  double fn_weight_ = 0.0;
};

}  // namespace mltr
