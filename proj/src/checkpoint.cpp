#include "card/checkpoint.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <map>

#include "card/error.hpp"

namespace card {

namespace {

constexpr std::array<char, 8> kMagic{'C', 'A', 'R', 'D', 'C', 'K', 'P', 'T'};

template <class T>
void put_le(std::ostream& os, T v) {
  unsigned char buf[sizeof(T)];
  for (std::size_t i = 0; i < sizeof(T); ++i) buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
  os.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <class T>
T get_le(std::istream& is) {
  unsigned char buf[sizeof(T)];
  if (!is.read(reinterpret_cast<char*>(buf), sizeof(T))) throw ConfigError("checkpoint truncated");
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(buf[i]) << (8 * i);
  return v;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, Model& model) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ConfigError("cannot write checkpoint " + path.string());
  const ParamList params = model.parameters();
  os.write(kMagic.data(), kMagic.size());
  put_le<std::uint32_t>(os, kCheckpointVersion);
  put_le<std::uint64_t>(os, model.config().digest());
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    put_le<std::uint32_t>(os, static_cast<std::uint32_t>(p.name.size()));
    os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    const Shape& s = p.tensor->shape();
    put_le<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
    for (auto e : s) put_le<std::uint32_t>(os, static_cast<std::uint32_t>(e));
    for (double v : p.tensor->data()) put_le<std::uint32_t>(os, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }
  if (!os) throw ConfigError("failed writing checkpoint " + path.string());
}

void load_checkpoint(const std::filesystem::path& path, Model& model) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot open checkpoint " + path.string());
  std::array<char, 8> magic{};
  if (!is.read(magic.data(), magic.size()) || magic != kMagic) {
    throw ConfigError(path.string() + " is not a checkpoint (bad magic)");
  }
  const auto version = get_le<std::uint32_t>(is);
  if (version != kCheckpointVersion) {
    throw ConfigError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto digest = get_le<std::uint64_t>(is);
  if (digest != model.config().digest()) {
    throw ConfigError("checkpoint was written for a different model configuration");
  }
  const auto count = get_le<std::uint32_t>(is);
  std::map<std::string, std::pair<Shape, std::vector<double>>> entries;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = get_le<std::uint32_t>(is);
    if (len > 4096) throw ConfigError("checkpoint entry name too long");
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw ConfigError("checkpoint truncated");
    const auto rank = get_le<std::uint32_t>(is);
    if (rank > 8) throw ConfigError("checkpoint entry rank too large");
    Shape s(rank);
    for (auto& e : s) e = get_le<std::uint32_t>(is);
    std::vector<double> values(numel(s));
    for (auto& v : values) v = static_cast<double>(std::bit_cast<float>(get_le<std::uint32_t>(is)));
    entries.emplace(std::move(name), std::make_pair(std::move(s), std::move(values)));
  }
  const ParamList params = model.parameters();
  if (entries.size() != params.size()) throw ConfigError("checkpoint entry count does not match model");
  for (const auto& p : params) {
    auto it = entries.find(p.name);
    if (it == entries.end()) throw ConfigError("checkpoint missing entry " + p.name);
    if (it->second.first != p.tensor->shape()) {
      throw ConfigError("checkpoint entry " + p.name + " has shape " + shape_string(it->second.first) +
                        ", model expects " + shape_string(p.tensor->shape()));
    }
    auto dst = p.tensor->mutable_data();
    std::copy(it->second.second.begin(), it->second.second.end(), dst.begin());
  }
}

}  // namespace card
