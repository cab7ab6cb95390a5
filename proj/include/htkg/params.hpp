#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "htkg/autodiff.hpp"
#include "htkg/rng.hpp"

namespace htkg {

// Named trainable leaves in insertion order. Iteration order is part of the
// determinism contract (optimizer state, gradient clipping, checkpoints).
class ParamStore {
 public:
  struct Entry {
    std::string name;
    ad::Tensor tensor;
    bool trainable = true;
  };

  ad::Tensor create(const std::string& name, ad::Shape shape, std::vector<double> values,
                    bool trainable = true);
  // Uniform init in [-bound, bound] from the given stream.
  ad::Tensor create_uniform(const std::string& name, ad::Shape shape, double bound, Rng& rng);
  ad::Tensor create_constant(const std::string& name, ad::Shape shape, double value);

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  ad::Tensor get(const std::string& name) const;
  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t total_elements() const;

  void zero_grads();

  // Versioned binary checkpoint: named flat arrays with shape headers,
  // little-endian doubles.
  void save(const std::string& path) const;
  // Loads values into existing parameters; shapes must match exactly.
  void load(const std::string& path);

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct GradCheckEntry {
  std::string name;
  double max_rel_err = 0.0;
  std::size_t coords_checked = 0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_err = 0.0;
  bool passed(double tol) const { return max_rel_err < tol; }
};

// Central-difference check of d(fn)/d(param) for every (or a sampled subset
// of) coordinate. fn must rebuild the computation from current leaf values on
// every call and be deterministic. max_coords_per_param == 0 checks all.
GradCheckReport check_gradients(const std::function<ad::Tensor()>& fn, ParamStore& params,
                                double h = 1e-6, std::size_t max_coords_per_param = 0,
                                std::uint64_t sample_seed = 0);

}  // namespace htkg
