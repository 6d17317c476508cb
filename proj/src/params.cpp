#include "comet/params.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>

namespace comet {

template <typename T>
Tensor<T>& ParamStore<T>::add(const std::string& name, Shape shape, bool trainable) {
  if (contains(name)) throw std::invalid_argument("ParamStore: duplicate parameter " + name);
  index_.emplace(name, entries_.size());
  Tensor<T> grad(shape);
  entries_.push_back(Entry{name, Tensor<T>(std::move(shape)), std::move(grad), trainable, false});
  return entries_.back().value;
}

template <typename T>
Tensor<T>& ParamStore<T>::add_buffer(const std::string& name, Shape shape, T fill) {
  if (contains(name)) throw std::invalid_argument("ParamStore: duplicate parameter " + name);
  index_.emplace(name, entries_.size());
  entries_.push_back(Entry{name, Tensor<T>(std::move(shape), fill), Tensor<T>(), false, true});
  return entries_.back().value;
}

template <typename T>
typename ParamStore<T>::Entry& ParamStore<T>::entry(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("ParamStore: unknown parameter " + name);
  return entries_[it->second];
}

template <typename T>
const typename ParamStore<T>::Entry& ParamStore<T>::entry(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("ParamStore: unknown parameter " + name);
  return entries_[it->second];
}

template <typename T>
void ParamStore<T>::zero_grad() {
  for (auto& e : entries_) e.grad.fill(T{0});
}

template <typename T>
void ParamStore<T>::set_trainable(const std::string& prefix, bool trainable) {
  for (auto& e : entries_) {
    if (!e.buffer && e.name.rfind(prefix, 0) == 0) e.trainable = trainable;
  }
}

template <typename T>
std::size_t ParamStore<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) {
    if (!e.buffer) n += e.value.size();
  }
  return n;
}

template <typename T>
void Adam<T>::step(ParamStore<T>& params, double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
  const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
  for (auto& e : params.entries()) {
    if (e.buffer || !e.trainable) continue;
    if (e.grad.shape() != e.value.shape()) {
      throw ShapeError("adam: gradient shape " + shape_str(e.grad.shape()) + " != parameter " +
                       e.name + " " + shape_str(e.value.shape()));
    }
    auto [it, fresh] = state_.try_emplace(e.name);
    Moments& s = it->second;
    if (fresh) {
      s.m = Tensor<double>(e.value.shape());
      s.v = Tensor<double>(e.value.shape());
    }
    for (std::size_t i = 0; i < e.value.size(); ++i) {
      const double g = static_cast<double>(e.grad[i]) + cfg_.weight_decay * e.value[i];
      s.m[i] = cfg_.beta1 * s.m[i] + (1.0 - cfg_.beta1) * g;
      s.v[i] = cfg_.beta2 * s.v[i] + (1.0 - cfg_.beta2) * g * g;
      const double mhat = s.m[i] / bc1;
      const double vhat = s.v[i] / bc2;
      e.value[i] = static_cast<T>(e.value[i] - lr * mhat / (std::sqrt(vhat) + cfg_.eps));
    }
  }
}

double scheduled_lr(double lr0, int epoch, double decay, int every) {
  if (every <= 0) return lr0;
  return lr0 * std::pow(decay, epoch / every);
}

namespace {

void write_le_floats(std::ofstream& out, const Tensor<float>& t) {
  static_assert(sizeof(float) == 4);
  std::vector<char> buf(t.size() * 4);
  for (std::size_t i = 0; i < t.size(); ++i) {
    std::uint32_t bits = std::bit_cast<std::uint32_t>(t[i]);
    for (int b = 0; b < 4; ++b) buf[i * 4 + b] = static_cast<char>((bits >> (8 * b)) & 0xFFu);
  }
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ParamStore<float>& params,
                     const nlohmann::json& metadata) {
  nlohmann::json manifest = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& e : params.entries()) {
    manifest.push_back({{"name", e.name},
                        {"shape", e.value.shape()},
                        {"offset", offset},
                        {"trainable", e.trainable},
                        {"buffer", e.buffer}});
    offset += e.value.size() * 4;
  }
  nlohmann::json header = {{"schema_version", kCheckpointSchemaVersion},
                           {"parameters", manifest},
                           {"data_bytes", offset},
                           {"metadata", metadata}};
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  out << header.dump() << '\n';
  for (const auto& e : params.entries()) write_le_floats(out, e.value);
  if (!out) throw std::runtime_error("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("checkpoint: missing header");
  nlohmann::json header = nlohmann::json::parse(line);
  if (header.value("schema_version", -1) != kCheckpointSchemaVersion) {
    throw std::runtime_error("checkpoint: unsupported schema_version");
  }
  const auto data_bytes = header.at("data_bytes").get<std::uint64_t>();
  std::vector<char> data(data_bytes);
  in.read(data.data(), static_cast<std::streamsize>(data_bytes));
  if (static_cast<std::uint64_t>(in.gcount()) != data_bytes) {
    throw std::runtime_error("checkpoint: truncated data section");
  }
  Checkpoint ck;
  ck.metadata = header.value("metadata", nlohmann::json::object());
  for (const auto& p : header.at("parameters")) {
    const auto name = p.at("name").get<std::string>();
    const auto shape = p.at("shape").get<Shape>();
    const auto offset = p.at("offset").get<std::uint64_t>();
    Tensor<float>& t = p.value("buffer", false)
                           ? ck.params.add_buffer(name, shape, 0.0f)
                           : ck.params.add(name, shape, p.value("trainable", true));
    if (offset + t.size() * 4 > data_bytes) throw std::runtime_error("checkpoint: bad offset for " + name);
    for (std::size_t i = 0; i < t.size(); ++i) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b) {
        bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(data[offset + i * 4 + b])) << (8 * b);
      }
      t[i] = std::bit_cast<float>(bits);
    }
  }
  return ck;
}

template class ParamStore<float>;
template class ParamStore<double>;
template class Adam<float>;
template class Adam<double>;
template class ParamStore<long double>;

}  // namespace comet
