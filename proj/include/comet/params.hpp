#pragma once

#include <deque>
#include <filesystem>
#include <map>
#include <string>
#include <unordered_map>

#include <json.hpp>

#include "comet/tensor.hpp"

namespace comet {

/// Named parameter tensors with gradients. Buffers (batch-norm running
/// statistics) are stored alongside but never receive gradients.
template <typename T>
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;
    bool trainable = true;
    bool buffer = false;
  };

  Tensor<T>& add(const std::string& name, Shape shape, bool trainable = true);
  Tensor<T>& add_buffer(const std::string& name, Shape shape, T fill);

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  Entry& entry(const std::string& name);
  const Entry& entry(const std::string& name) const;
  Tensor<T>& value(const std::string& name) { return entry(name).value; }
  const Tensor<T>& value(const std::string& name) const { return entry(name).value; }
  Tensor<T>& grad(const std::string& name) { return entry(name).grad; }

  std::deque<Entry>& entries() { return entries_; }
  const std::deque<Entry>& entries() const { return entries_; }

  void zero_grad();
  /// Sets the trainable flag on every non-buffer entry whose name starts with prefix.
  void set_trainable(const std::string& prefix, bool trainable);
  std::size_t parameter_count() const;

  template <typename U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& e : entries_) {
      auto& dst = e.buffer ? out.add_buffer(e.name, e.value.shape(), U{0})
                           : out.add(e.name, e.value.shape(), e.trainable);
      dst = e.value.template cast<U>();
    }
    return out;
  }

 private:
  std::deque<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct AdamConfig {
  double lr = 1e-4;
  double weight_decay = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with loss-coupled L2 weight decay. Frozen entries and buffers are skipped.
template <typename T>
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  void step(ParamStore<T>& params, double lr);
  void step(ParamStore<T>& params) { step(params, cfg_.lr); }
  int steps() const { return t_; }
  const AdamConfig& config() const { return cfg_; }

 private:
  struct Moments {
    Tensor<double> m;
    Tensor<double> v;
  };
  AdamConfig cfg_;
  int t_ = 0;
  std::map<std::string, Moments> state_;
};

/// Step schedule: lr0 * decay^(floor(epoch / every)).
double scheduled_lr(double lr0, int epoch, double decay = 0.2, int every = 15);

// Checkpoint layout: one line of UTF-8 JSON (schema_version, parameter
// manifest with shapes and byte offsets, caller metadata) terminated by '\n',
// followed by little-endian float32 data in manifest order.
inline constexpr int kCheckpointSchemaVersion = 1;

void save_checkpoint(const std::filesystem::path& path, const ParamStore<float>& params,
                     const nlohmann::json& metadata);

struct Checkpoint {
  ParamStore<float> params;
  nlohmann::json metadata;
};

Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace comet
