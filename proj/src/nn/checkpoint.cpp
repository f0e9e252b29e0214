#include "samediff/nn/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace samediff::nn {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes little-endian");

bool Checkpoint::operator==(const Checkpoint& o) const {
  if (metadata != o.metadata || tensors.size() != o.tensors.size()) return false;
  for (const auto& [name, t] : tensors) {
    auto it = o.tensors.find(name);
    if (it == o.tensors.end() || it->second.shape != t.shape) return false;
    if (std::memcmp(it->second.data.data(), t.data.data(), t.data.size() * sizeof(float)) != 0)
      return false;
  }
  return true;
}

namespace {

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

void put_string(std::string& out, const std::string& s) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out += s;
}

class Reader {
 public:
  explicit Reader(const std::string& s) : s_(s) {}
  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, s_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string get_string() {
    const auto n = get<std::uint32_t>();
    need(n);
    std::string v = s_.substr(pos_, n);
    pos_ += n;
    return v;
  }
  void read_floats(float* dst, std::size_t n) {
    need(n * sizeof(float));
    std::memcpy(dst, s_.data() + pos_, n * sizeof(float));
    pos_ += n * sizeof(float);
  }
  bool at_end() const { return pos_ == s_.size(); }
  void need(std::size_t n) const {
    if (s_.size() - pos_ < n) throw std::runtime_error("checkpoint: truncated file");
  }

 private:
  const std::string& s_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string serialize_checkpoint(const Checkpoint& ck) {
  std::string out(kCheckpointMagic, sizeof(kCheckpointMagic));
  put<std::uint32_t>(out, kCheckpointVersion);
  put_string(out, ck.metadata);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(ck.tensors.size()));
  for (const auto& [name, t] : ck.tensors) {
    put_string(out, name);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape.size()));
    for (int d : t.shape) put<std::int32_t>(out, d);
    out.append(reinterpret_cast<const char*>(t.data.data()), t.data.size() * sizeof(float));
  }
  return out;
}

Checkpoint deserialize_checkpoint(const std::string& bytes) {
  if (bytes.size() < sizeof(kCheckpointMagic) ||
      std::memcmp(bytes.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0)
    throw std::runtime_error("checkpoint: bad magic");
  Reader r(bytes);
  for (std::size_t i = 0; i < sizeof(kCheckpointMagic); ++i) r.get<char>();
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  Checkpoint ck;
  ck.metadata = r.get_string();
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.get_string();
    const auto rank = r.get<std::uint32_t>();
    if (rank > 8) throw std::runtime_error("checkpoint: implausible rank for " + name);
    std::vector<int> shape(rank);
    for (auto& d : shape) {
      d = r.get<std::int32_t>();
      if (d < 0) throw std::runtime_error("checkpoint: negative dim in " + name);
    }
    Tensor t(shape);
    r.read_floats(t.ptr(), t.size());
    ck.tensors.emplace(std::move(name), std::move(t));
  }
  if (!r.at_end()) throw std::runtime_error("checkpoint: trailing bytes");
  return ck;
}

void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write checkpoint " + path);
    const auto bytes = serialize_checkpoint(ck);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw std::runtime_error("write failed for checkpoint " + path);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw std::runtime_error("cannot move checkpoint into place at " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint not found: " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return deserialize_checkpoint(ss.str());
}

void store_parameters(Checkpoint& ck, const std::string& prefix, const NamedParams& params) {
  for (const auto& [name, p] : params) ck.tensors[prefix + name] = p.value();
}

void load_parameters(const Checkpoint& ck, const std::string& prefix, const NamedParams& params) {
  for (const auto& [name, p] : params) {
    auto it = ck.tensors.find(prefix + name);
    if (it == ck.tensors.end()) throw std::runtime_error("checkpoint lacks tensor " + prefix + name);
    if (it->second.shape != p.shape())
      throw std::runtime_error("checkpoint tensor " + prefix + name + " has shape " +
                               shape_string(it->second.shape) + ", expected " +
                               shape_string(p.shape()));
    Var v = p;
    v.mutable_value().data = it->second.data;
  }
}

void store_optimizer(Checkpoint& ck, const std::string& prefix, const Adam& adam) {
  const auto& params = adam.params();
  for (std::size_t i = 0; i < params.size(); ++i) {
    ck.tensors[prefix + "adam.m." + params[i].first] = adam.first_moments()[i];
    ck.tensors[prefix + "adam.v." + params[i].first] = adam.second_moments()[i];
  }
  auto meta = nlohmann::json::parse(ck.metadata);
  meta[prefix + "adam_t"] = adam.step_count();
  ck.metadata = meta.dump();
}

void load_optimizer(const Checkpoint& ck, const std::string& prefix, Adam& adam) {
  const auto& params = adam.params();
  std::vector<Tensor> m, v;
  for (const auto& [name, p] : params) {
    auto im = ck.tensors.find(prefix + "adam.m." + name);
    auto iv = ck.tensors.find(prefix + "adam.v." + name);
    if (im == ck.tensors.end() || iv == ck.tensors.end())
      throw std::runtime_error("checkpoint lacks optimizer state for " + name);
    m.push_back(im->second);
    v.push_back(iv->second);
  }
  const auto meta = nlohmann::json::parse(ck.metadata);
  adam.restore(meta.at(prefix + "adam_t").get<long long>(), std::move(m), std::move(v));
}

}  // namespace samediff::nn
