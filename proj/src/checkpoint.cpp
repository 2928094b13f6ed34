#include "motok/checkpoint.hpp"

#include <fstream>
#include <stdexcept>

#include "motok/binio.hpp"

namespace motok {

namespace {

constexpr char kMagic[4] = {'M', 'T', 'O', 'K'};
constexpr uint16_t kVersion = 1;

void write_tensor(std::ostream& os, const std::string& name, const Tensor& t) {
  if (name.size() > 0xffff) throw std::invalid_argument("snapshot: tensor name too long");
  binio::put_u16(os, static_cast<uint16_t>(name.size()));
  binio::put_bytes(os, name.data(), name.size());
  binio::put_u8(os, static_cast<uint8_t>(t.rank()));
  for (int i = 0; i < t.rank(); ++i) binio::put_u32(os, static_cast<uint32_t>(t.dim(i)));
  for (int64_t i = 0; i < t.numel(); ++i) binio::put_f32(os, t.at(i));
}

}  // namespace

void save_snapshot(const std::string& path,
                   const std::vector<std::pair<std::string, Tensor>>& tensors,
                   const std::string& config_json) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("snapshot: cannot open '" + path + "' for writing");
  for (const auto& [name, t] : tensors) {
    if (name == kSnapshotConfigKey) {
      throw std::invalid_argument("snapshot: tensor name '" + name + "' is reserved");
    }
    (void)t;
  }
  uint32_t count = static_cast<uint32_t>(tensors.size()) + (config_json.empty() ? 0u : 1u);
  binio::put_bytes(os, kMagic, 4);
  binio::put_u16(os, kVersion);
  binio::put_u32(os, count);
  for (const auto& [name, t] : tensors) write_tensor(os, name, t);
  if (!config_json.empty()) {
    Tensor meta({static_cast<int>(config_json.size())}, 0.f);
    for (size_t i = 0; i < config_json.size(); ++i) {
      meta.at(static_cast<int64_t>(i)) =
          static_cast<float>(static_cast<unsigned char>(config_json[i]));
    }
    write_tensor(os, kSnapshotConfigKey, meta);
  }
  os.flush();
  if (!os) throw std::runtime_error("snapshot: write to '" + path + "' failed");
}

Snapshot load_snapshot(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("snapshot: cannot open '" + path + "'");
  char magic[4];
  binio::get_bytes(is, magic, 4, "snapshot magic");
  if (std::memcmp(magic, kMagic, 4) != 0) {
    throw std::runtime_error("snapshot: '" + path + "' is not an MTOK file");
  }
  uint16_t version = binio::get_u16(is, "snapshot version");
  if (version != kVersion) {
    throw std::runtime_error("snapshot: unsupported version " + std::to_string(version));
  }
  uint32_t count = binio::get_u32(is, "snapshot tensor count");
  Snapshot snap;
  for (uint32_t i = 0; i < count; ++i) {
    uint16_t name_len = binio::get_u16(is, "tensor name length");
    std::string name(name_len, '\0');
    if (name_len) binio::get_bytes(is, name.data(), name_len, "tensor name");
    uint8_t rank = binio::get_u8(is, "tensor rank");
    Shape shape(rank);
    int64_t numel = 1;
    for (uint8_t d = 0; d < rank; ++d) {
      uint32_t dim = binio::get_u32(is, "tensor dim");
      if (dim == 0 || dim > (1u << 30)) {
        throw std::runtime_error("snapshot: implausible dim " + std::to_string(dim) + " in '" +
                                 name + "'");
      }
      shape[d] = static_cast<int>(dim);
      numel *= dim;
    }
    if (numel > (int64_t{1} << 31)) {
      throw std::runtime_error("snapshot: tensor '" + name + "' too large");
    }
    Tensor t(shape, 0.f);
    for (int64_t j = 0; j < t.numel(); ++j) t.at(j) = binio::get_f32(is, "tensor data");
    if (name == kSnapshotConfigKey) {
      snap.config_json.resize(static_cast<size_t>(t.numel()));
      for (int64_t j = 0; j < t.numel(); ++j) {
        snap.config_json[static_cast<size_t>(j)] =
            static_cast<char>(static_cast<unsigned char>(t.at(j)));
      }
    } else {
      if (snap.tensors.count(name)) {
        throw std::runtime_error("snapshot: duplicate tensor '" + name + "'");
      }
      snap.tensors.emplace(name, std::move(t));
    }
  }
  return snap;
}

void save_parameters(const std::string& path, const std::vector<Parameter*>& params,
                     const std::string& config_json) {
  std::vector<std::pair<std::string, Tensor>> named;
  named.reserve(params.size());
  for (const Parameter* p : params) named.emplace_back(p->name, p->value);
  save_snapshot(path, named, config_json);
}

void load_parameters(const std::string& path, const std::vector<Parameter*>& params,
                     std::string* config_json) {
  Snapshot snap = load_snapshot(path);
  for (Parameter* p : params) {
    auto it = snap.tensors.find(p->name);
    if (it == snap.tensors.end()) {
      throw std::runtime_error("snapshot: '" + path + "' is missing parameter '" + p->name + "'");
    }
    if (it->second.shape != p->value.shape) {
      throw std::runtime_error("snapshot: parameter '" + p->name + "' has shape " +
                               shape_str(it->second.shape) + ", expected " +
                               shape_str(p->value.shape));
    }
    *p->value.data = *it->second.data;  // keep storage identity for optimizer state
  }
  if (config_json) *config_json = snap.config_json;
}

}  // namespace motok
