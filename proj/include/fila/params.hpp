#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "fila/tensor.hpp"

namespace fila {

struct ParamEntry {
  std::string name;
  Tensor tensor;
  // Running statistics and other state live here too; they are not trainable.
  bool trainable = true;
};

// Named tensors in fixed insertion order. Order determines both the
// initialization sampling sequence and checkpoint layout.
class NetworkParams {
 public:
  void add(std::string name, Tensor tensor, bool trainable = true);
  bool has(const std::string& name) const { return index_.count(name) != 0; }
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
  bool trainable(const std::string& name) const;

  std::vector<ParamEntry>& items() { return items_; }
  const std::vector<ParamEntry>& items() const { return items_; }
  std::size_t size() const { return items_.size(); }

  std::size_t total_values() const;
  bool bitwise_equal(const NetworkParams& other) const;

 private:
  std::vector<ParamEntry> items_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace fila
