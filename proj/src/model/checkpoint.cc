#include "psyt/checkpoint.h"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace psyt {

namespace {

constexpr char kMagic[4] = {'P', 'S', 'Y', 'T'};

template <class U>
void put_le(std::ostream& out, U value) {
  unsigned char bytes[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) bytes[i] = static_cast<unsigned char>((value >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(bytes), sizeof(U));
}

template <class U>
U get_le(std::istream& in) {
  unsigned char bytes[sizeof(U)];
  if (!in.read(reinterpret_cast<char*>(bytes), sizeof(U))) throw CheckpointError("checkpoint truncated");
  U value = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) value |= static_cast<U>(bytes[i]) << (8 * i);
  return value;
}

void put_string(std::ostream& out, const std::string& s) {
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_string(std::istream& in) {
  const auto n = get_le<std::uint32_t>(in);
  std::string s(n, '\0');
  if (n && !in.read(s.data(), n)) throw CheckpointError("checkpoint truncated inside a string");
  return s;
}

void put_tensor(std::ostream& out, const std::string& name, const Tensor& t, bool wide) {
  put_string(out, name);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
  for (double v : t.data()) {
    if (wide) {
      put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
    } else {
      put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    }
  }
}

NamedTensor get_tensor(std::istream& in, bool wide) {
  NamedTensor nt;
  nt.name = get_string(in);
  const auto rank = get_le<std::uint32_t>(in);
  if (rank > 8) throw CheckpointError("tensor " + nt.name + " has implausible rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& d : shape) d = get_le<std::uint32_t>(in);
  std::vector<double> data(shape_size(shape));
  for (auto& v : data) {
    v = wide ? std::bit_cast<double>(get_le<std::uint64_t>(in))
             : static_cast<double>(std::bit_cast<float>(get_le<std::uint32_t>(in)));
  }
  nt.value = Tensor(std::move(shape), std::move(data));
  return nt;
}

}  // namespace

const CheckpointSection* Checkpoint::find_section(std::string_view tag) const {
  for (const auto& s : sections) {
    if (std::string_view(s.tag.data(), s.tag.size()) == tag) return &s;
  }
  return nullptr;
}

void write_checkpoint(std::ostream& out, const Checkpoint& ckpt) {
  out.write(kMagic, 4);
  put_le<std::uint16_t>(out, kCheckpointVersion);
  nlohmann::json header = ckpt.extra;
  header["model"] = ckpt.config;
  put_string(out, header.dump());

  std::vector<std::pair<std::string, const Tensor*>> tensors;
  visit_params(ckpt.params, [&](const std::string& name, const Tensor& t) { tensors.emplace_back(name, &t); });
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) put_tensor(out, name, *t, false);

  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.sections.size()));
  for (const auto& s : ckpt.sections) {
    out.write(s.tag.data(), 4);
    put_string(out, s.meta.dump());
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(s.tensors.size()));
    for (const auto& t : s.tensors) put_tensor(out, t.name, t.value, true);
  }
  if (!out) throw CheckpointError("checkpoint write failed");
}

Checkpoint read_checkpoint(std::istream& in) {
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) throw CheckpointError("not a PSYT checkpoint");
  const auto version = get_le<std::uint16_t>(in);
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ckpt;
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(get_string(in));
    ckpt.config = header.at("model").get<ModelConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("bad checkpoint header: ") + e.what());
  }
  header.erase("model");
  ckpt.extra = std::move(header);

  ckpt.params = init_params(ckpt.config, 0);
  auto slots = flatten(ckpt.params);
  const auto count = get_le<std::uint32_t>(in);
  if (count != slots.size()) {
    throw CheckpointError("checkpoint holds " + std::to_string(count) + " tensors, config expects " +
                          std::to_string(slots.size()));
  }
  for (auto& [name, slot] : slots) {
    NamedTensor nt = get_tensor(in, false);
    if (nt.name != name) throw CheckpointError("expected tensor " + name + ", found " + nt.name);
    if (!nt.value.same_shape(*slot)) {
      throw CheckpointError("tensor " + name + " has shape " + shape_string(nt.value.shape()) + ", expected " +
                            shape_string(slot->shape()));
    }
    *slot = std::move(nt.value);
  }

  const auto n_sections = get_le<std::uint32_t>(in);
  for (std::uint32_t i = 0; i < n_sections; ++i) {
    CheckpointSection s;
    if (!in.read(s.tag.data(), 4)) throw CheckpointError("checkpoint truncated in section tag");
    try {
      s.meta = nlohmann::json::parse(get_string(in));
    } catch (const nlohmann::json::exception& e) {
      throw CheckpointError(std::string("bad section header: ") + e.what());
    }
    const auto n = get_le<std::uint32_t>(in);
    for (std::uint32_t k = 0; k < n; ++k) s.tensors.push_back(get_tensor(in, true));
    ckpt.sections.push_back(std::move(s));
  }
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot open " + tmp.string() + " for writing");
    write_checkpoint(out, ckpt);
    out.flush();
    if (!out) throw CheckpointError("failed writing " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw CheckpointError("cannot move checkpoint into " + path.string() + ": " + ec.message());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  return read_checkpoint(in);
}

TransformerParams round_to_f32(const TransformerParams& params) {
  TransformerParams out = params;
  visit_params(out, [](const std::string&, Tensor& t) {
    for (auto& v : t.data()) v = static_cast<double>(static_cast<float>(v));
  });
  return out;
}

}  // namespace psyt
