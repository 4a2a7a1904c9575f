// Copyright 2026 The latref Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.


#include "latref/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <unordered_map>

#include "json_io.hpp"

namespace latref {

namespace {

constexpr char kMagic[8] = {'L', 'A', 'T', 'R', 'E', 'F', 'C', 'K'};

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

class Writer {
 public:
  template <typename T>
  void put(T v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    out.insert(out.end(), p, p + sizeof(T));
  }
  void bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    out.insert(out.end(), p, p + n);
  }
  std::vector<std::uint8_t> out;
};

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& b) : b_(b) {}
  template <typename T>
  T get() {
    T v;
    take(&v, sizeof(T));
    return v;
  }
  void take(void* dst, std::size_t n) {
    if (n > b_.size() - at_) throw Error("checkpoint: truncated file");
    std::memcpy(dst, b_.data() + at_, n);
    at_ += n;
  }
  bool done() const { return at_ == b_.size(); }

 private:
  const std::vector<std::uint8_t>& b_;
  std::size_t at_ = 0;
};

std::vector<ParamPtr> all_params(const ModelParams& model, const GateParams* gate) {
  auto params = model.parameters();
  if (gate) {
    auto g = gate->parameters();
    params.insert(params.end(), g.begin(), g.end());
  }
  return params;
}

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const ModelParams& model, const GateParams* gate) {
  json_io::Json header;
  header["config"] = json_io::to_json(model.config);
  header["num_heads"] = model.heads.size();
  header["has_gate"] = gate != nullptr;
  header["gate_length"] = gate ? gate->latent_length() : 0;
  const std::string text = header.dump();

  Writer w;
  w.bytes(kMagic, sizeof(kMagic));
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put<std::uint64_t>(text.size());
  w.bytes(text.data(), text.size());
  const auto params = all_params(model, gate);
  w.put<std::uint64_t>(params.size());
  for (const auto& p : params) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(p->name.size()));
    w.bytes(p->name.data(), p->name.size());
    const Shape& s = p->value.shape();
    w.put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    for (auto d : s) w.put<std::uint64_t>(d);
    w.bytes(p->value.data().data(), p->value.size() * sizeof(double));
  }
  return std::move(w.out);
}

Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  char magic[8];
  r.take(magic, sizeof(magic));
  if (std::memcmp(magic, kMagic, sizeof(magic)) != 0) throw Error("checkpoint: bad magic");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw Error("checkpoint: unsupported version " + std::to_string(version));
  }
  std::string text(r.get<std::uint64_t>(), '\0');
  r.take(text.data(), text.size());
  json_io::Json header;
  try {
    header = json_io::Json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("checkpoint: corrupt header: ") + e.what());
  }
  Checkpoint ck;
  const SeparationConfig config = json_io::separation_from_json(header.at("config"), "config");
  ck.model = make_model(config, 0, header.at("num_heads").get<std::size_t>());
  if (header.at("has_gate").get<bool>()) {
    ck.gate = make_gate(config.latent_channels, header.at("gate_length").get<std::size_t>(), 0);
  }
  std::unordered_map<std::string, ParamPtr> by_name;
  for (const auto& p : all_params(ck.model, ck.gate ? &*ck.gate : nullptr)) by_name[p->name] = p;

  const auto count = r.get<std::uint64_t>();
  if (count != by_name.size()) {
    throw Error("checkpoint: holds " + std::to_string(count) + " tensors, model expects " +
                std::to_string(by_name.size()));
  }
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name(r.get<std::uint32_t>(), '\0');
    r.take(name.data(), name.size());
    Shape shape(r.get<std::uint32_t>());
    for (auto& d : shape) d = r.get<std::uint64_t>();
    auto it = by_name.find(name);
    if (it == by_name.end()) throw Error("checkpoint: unexpected tensor '" + name + "'");
    if (it->second->value.shape() != shape) {
      throw Error("checkpoint: tensor '" + name + "' has shape " + shape_to_string(shape) +
                  ", expected " + shape_to_string(it->second->value.shape()));
    }
    r.take(it->second->value.data().data(), shape_numel(shape) * sizeof(double));
  }
  if (!r.done()) throw Error("checkpoint: trailing bytes");
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const ModelParams& model,
                     const GateParams* gate) {
  const auto bytes = serialize_checkpoint(model, gate);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write checkpoint " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

}  // namespace latref
