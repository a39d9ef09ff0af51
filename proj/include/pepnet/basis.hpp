#ifndef PEPNET_BASIS_HPP
#define PEPNET_BASIS_HPP

#include <Eigen/Dense>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "pepnet/errors.hpp"

namespace pepnet {

// Ordered symbol table for the per-agent coefficient space. Column tags index
// directions of the local block P_i (iterates, consensus outputs, gradients);
// value tags index entries of the per-agent function-value vector.
class BasisRegistry {
 public:
  int add_column(const std::string& tag) {
    if (col_index_.count(tag)) throw DuplicateTag(tag);
    col_index_[tag] = static_cast<int>(col_tags_.size());
    col_tags_.push_back(tag);
    return col_index_[tag];
  }

  int add_value(const std::string& tag) {
    if (val_index_.count(tag)) throw DuplicateTag(tag);
    val_index_[tag] = static_cast<int>(val_tags_.size());
    val_tags_.push_back(tag);
    return val_index_[tag];
  }

  int column(const std::string& tag) const {
    auto it = col_index_.find(tag);
    if (it == col_index_.end()) throw UnknownTag("column " + tag);
    return it->second;
  }

  int value(const std::string& tag) const {
    auto it = val_index_.find(tag);
    if (it == val_index_.end()) throw UnknownTag("value " + tag);
    return it->second;
  }

  bool has_column(const std::string& tag) const { return col_index_.count(tag) > 0; }
  bool has_value(const std::string& tag) const { return val_index_.count(tag) > 0; }

  int num_columns() const { return static_cast<int>(col_tags_.size()); }
  int num_values() const { return static_cast<int>(val_tags_.size()); }

  const std::vector<std::string>& column_tags() const { return col_tags_; }
  const std::vector<std::string>& value_tags() const { return val_tags_; }

 private:
  std::vector<std::string> col_tags_, val_tags_;
  std::map<std::string, int> col_index_, val_index_;
};

using RegistryPtr = std::shared_ptr<const BasisRegistry>;

// Per-agent linear combination of registry columns. The same coefficient
// vector is instantiated at every agent unless bound_class restricts it to
// the agents of one equivalence class.
class VectorExpr {
 public:
  VectorExpr() = default;
  VectorExpr(RegistryPtr reg, Eigen::VectorXd coeffs)
      : reg_(std::move(reg)), coeffs_(std::move(coeffs)) {
    if (!reg_) throw EmptyBasis("vector expression without registry");
    if (coeffs_.size() != reg_->num_columns())
      throw ShapeError("coefficient length " + std::to_string(coeffs_.size()) +
                       " vs registry size " + std::to_string(reg_->num_columns()));
  }

  static VectorExpr unit(const RegistryPtr& reg, const std::string& tag) {
    Eigen::VectorXd c = Eigen::VectorXd::Zero(reg->num_columns());
    c[reg->column(tag)] = 1.0;
    return VectorExpr(reg, std::move(c));
  }

  static VectorExpr zero(const RegistryPtr& reg) {
    return VectorExpr(reg, Eigen::VectorXd::Zero(reg->num_columns()));
  }

  const RegistryPtr& registry() const { return reg_; }
  const Eigen::VectorXd& coeffs() const { return coeffs_; }

  std::optional<int> bound_class() const { return bound_class_; }
  VectorExpr bound_to(int cls) const {
    VectorExpr out = *this;
    out.bound_class_ = cls;
    return out;
  }

  VectorExpr& operator+=(const VectorExpr& o) {
    check_same(o);
    coeffs_ += o.coeffs_;
    return *this;
  }
  VectorExpr& operator-=(const VectorExpr& o) {
    check_same(o);
    coeffs_ -= o.coeffs_;
    return *this;
  }
  VectorExpr& operator*=(double s) {
    coeffs_ *= s;
    return *this;
  }

  friend VectorExpr operator+(VectorExpr a, const VectorExpr& b) { return a += b; }
  friend VectorExpr operator-(VectorExpr a, const VectorExpr& b) { return a -= b; }
  friend VectorExpr operator*(double s, VectorExpr a) { return a *= s; }
  friend VectorExpr operator*(VectorExpr a, double s) { return a *= s; }

  void check_same(const VectorExpr& o) const {
    if (reg_ != o.reg_) throw RegistryMismatch("vector expressions from different registries");
  }

 private:
  RegistryPtr reg_;
  Eigen::VectorXd coeffs_;
  std::optional<int> bound_class_;
};

inline VectorExpr linear_combination(const std::vector<std::pair<double, VectorExpr>>& terms) {
  if (terms.empty()) throw EmptyBasis("linear combination of nothing");
  VectorExpr acc = VectorExpr::zero(terms.front().second.registry());
  for (const auto& [c, v] : terms) acc += c * v;
  return acc;
}

}  // namespace pepnet

#endif
