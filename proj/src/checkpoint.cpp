#include "pfem/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace pfem::ad {

namespace {

constexpr char kMagic[8] = {'P', 'F', 'E', 'M', 'C', 'K', 'P', 'T'};

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

std::uint64_t to_le(std::uint64_t v) {
  if constexpr (std::endian::native == std::endian::little) return v;
  return __builtin_bswap64(v);
}

void write_u64(std::ostream& os, std::uint64_t v) {
  v = to_le(v);
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

std::uint64_t read_u64(std::istream& is) {
  std::uint64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!is) throw std::runtime_error("checkpoint: truncated file");
  return to_le(v);
}

void write_doubles(std::ostream& os, const std::vector<double>& values) {
  for (double d : values) write_u64(os, std::bit_cast<std::uint64_t>(d));
}

std::vector<double> read_doubles(std::istream& is, std::size_t n) {
  std::vector<double> out(n);
  for (auto& d : out) d = std::bit_cast<double>(read_u64(is));
  return out;
}

struct Raw {
  nlohmann::json header;
  std::ifstream stream;
};

Raw open_checkpoint(const std::filesystem::path& path) {
  Raw raw{{}, std::ifstream(path, std::ios::binary)};
  if (!raw.stream) throw std::runtime_error("checkpoint: cannot open " + path.string());
  char magic[8];
  raw.stream.read(magic, 8);
  if (!raw.stream || std::memcmp(magic, kMagic, 8) != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path.string());
  const std::uint64_t len = read_u64(raw.stream);
  std::string text(len, '\0');
  raw.stream.read(text.data(), static_cast<std::streamsize>(len));
  if (!raw.stream) throw std::runtime_error("checkpoint: truncated header in " + path.string());
  raw.header = nlohmann::json::parse(text);
  return raw;
}

}  // namespace

std::string config_hash(const nlohmann::json& config) {
  // FNV-1a over the canonical dump
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : config.dump()) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

void save_checkpoint(const std::filesystem::path& path, const ParamStore& params, const nlohmann::json& config,
                     const AdamState* optimizer) {
  nlohmann::json header;
  header["format"] = "pfem-checkpoint";
  header["version"] = 1;
  header["seed"] = params.seed();
  header["config"] = config;
  header["config_hash"] = config_hash(config);
  header["flat_size"] = params.flat_size();
  auto& list = header["params"] = nlohmann::json::array();
  for (const auto& p : params.infos()) list.push_back({{"name", p.name}, {"shape", p.shape}, {"offset", p.offset}});
  if (optimizer != nullptr) {
    header["optimizer"] = {{"kind", "adam"},  {"step", optimizer->step},   {"lr", optimizer->lr},
                           {"beta1", optimizer->beta1}, {"beta2", optimizer->beta2}, {"eps", optimizer->eps}};
  }
  const std::string text = header.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("checkpoint: cannot write " + tmp);
    os.write(kMagic, 8);
    write_u64(os, text.size());
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    write_doubles(os, params.flat());
    if (optimizer != nullptr) {
      write_doubles(os, optimizer->m);
      write_doubles(os, optimizer->v);
    }
    if (!os) throw std::runtime_error("checkpoint: write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

nlohmann::json read_checkpoint_header(const std::filesystem::path& path) { return open_checkpoint(path).header; }

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  Raw raw = open_checkpoint(path);
  const auto& h = raw.header;
  Checkpoint ck{ParamStore(h.at("seed").get<std::uint64_t>()), h.at("config"), std::nullopt};
  for (const auto& p : h.at("params")) ck.params.add(p.at("name"), p.at("shape").get<Shape>(), Init::Zeros);
  if (ck.params.flat_size() != h.at("flat_size").get<std::size_t>())
    throw std::runtime_error("checkpoint: parameter table inconsistent with flat size");
  ck.params.flat() = read_doubles(raw.stream, ck.params.flat_size());
  if (h.contains("optimizer")) {
    const auto& o = h["optimizer"];
    AdamState s;
    s.step = o.at("step");
    s.lr = o.at("lr");
    s.beta1 = o.at("beta1");
    s.beta2 = o.at("beta2");
    s.eps = o.at("eps");
    s.m = read_doubles(raw.stream, ck.params.flat_size());
    s.v = read_doubles(raw.stream, ck.params.flat_size());
    ck.optimizer = std::move(s);
  }
  if (config_hash(ck.config) != h.value("config_hash", std::string()))
    throw std::runtime_error("checkpoint: config hash mismatch in " + path.string());
  return ck;
}

}  // namespace pfem::ad
