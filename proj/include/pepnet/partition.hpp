#ifndef PEPNET_PARTITION_HPP
#define PEPNET_PARTITION_HPP

#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "pepnet/errors.hpp"

namespace pepnet {

// Grouping of agents into equivalence classes. Two flavours:
//  - finite: explicit class sizes, total N = sum of sizes;
//  - limit : asymptotic class fractions rho_u; classes with rho_u == 0 keep a
//    pinned finite size (1 unless stated otherwise) while the rest grow.
class EquivalencePartition {
 public:
  static EquivalencePartition finite(std::vector<long long> sizes) {
    if (sizes.empty()) throw InvalidPartition("no classes");
    long long total = 0;
    for (long long s : sizes) {
      if (s < 1) throw InvalidPartition("class size " + std::to_string(s));
      total += s;
    }
    if (total < 2) throw InvalidPartition("fewer than two agents");
    EquivalencePartition p;
    p.finite_ = true;
    p.sizes_ = std::move(sizes);
    p.total_ = total;
    return p;
  }

  static EquivalencePartition limit(std::vector<double> rho,
                                    std::vector<long long> pinned_sizes = {}) {
    if (rho.empty()) throw InvalidPartition("no classes");
    double total = 0;
    bool growing = false;
    for (double r : rho) {
      if (r < 0 || r > 1) throw InvalidPartition("fraction " + std::to_string(r));
      total += r;
      growing = growing || r > 0;
    }
    if (!growing) throw InvalidPartition("no growing class");
    if (std::abs(total - 1.0) > 1e-12) throw InvalidPartition("fractions must sum to 1");
    if (pinned_sizes.empty()) pinned_sizes.assign(rho.size(), 1);
    if (pinned_sizes.size() != rho.size()) throw InvalidPartition("pinned size list length");
    for (std::size_t u = 0; u < rho.size(); ++u)
      if (rho[u] == 0 && pinned_sizes[u] < 1)
        throw InvalidPartition("pinned class must keep at least one agent");
    EquivalencePartition p;
    p.finite_ = false;
    p.rho_ = std::move(rho);
    p.pinned_ = std::move(pinned_sizes);
    return p;
  }

  static EquivalencePartition all_equivalent(long long n) { return finite({n}); }

  bool is_finite() const { return finite_; }
  int num_classes() const {
    return static_cast<int>(finite_ ? sizes_.size() : rho_.size());
  }

  long long size(int u) const {
    require_finite();
    return sizes_.at(u);
  }
  long long total() const {
    require_finite();
    return total_;
  }
  double fraction(int u) const {
    if (finite_) return static_cast<double>(sizes_.at(u)) / static_cast<double>(total_);
    return rho_.at(u);
  }
  // Limit mode: true for classes whose size stays fixed as N grows.
  bool pinned(int u) const {
    if (finite_) return false;
    return rho_.at(u) == 0.0;
  }
  long long pinned_size(int u) const {
    if (finite_) return sizes_.at(u);
    return pinned_.at(u);
  }

  // Finite mode: contiguous agent blocks per class.
  int agent_class(long long agent) const {
    require_finite();
    long long acc = 0;
    for (std::size_t u = 0; u < sizes_.size(); ++u) {
      acc += sizes_[u];
      if (agent < acc) return static_cast<int>(u);
    }
    throw InvalidPartition("agent index out of range");
  }
  std::vector<long long> agents_of(int u) const {
    require_finite();
    long long start = 0;
    for (int v = 0; v < u; ++v) start += sizes_[v];
    std::vector<long long> out(sizes_.at(u));
    std::iota(out.begin(), out.end(), start);
    return out;
  }

 private:
  void require_finite() const {
    if (!finite_) throw NoFiniteLimit("finite partition data requested in limit mode");
  }

  bool finite_ = true;
  std::vector<long long> sizes_;
  std::vector<double> rho_;
  std::vector<long long> pinned_;
  long long total_ = 0;
};

}  // namespace pepnet

#endif
