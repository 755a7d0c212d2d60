#include "rml/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "rml/errors.hpp"

namespace rml {

namespace {

constexpr char kMagic[4] = {'R', 'M', 'L', 'C'};
constexpr uint32_t kVersion = 1;

void write_u32(std::ostream& os, uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

void write_u64(std::ostream& os, uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

uint32_t read_u32(std::istream& is) {
  uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  return v;
}

uint64_t read_u64(std::istream& is) {
  uint64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  return v;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  if (path.has_parent_path()) {
    std::filesystem::create_directories(path.parent_path());
  }
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) {
    throw DataError("cannot open " + path.string() + " for writing");
  }
  nlohmann::ordered_json header;
  header["kind"] = ck.kind;
  header["meta"] = ck.meta;
  auto tensors = nlohmann::ordered_json::array();
  for (const auto& [name, t] : ck.tensors) {
    tensors.push_back({{"name", name}, {"rows", t.rows()}, {"cols", t.cols()}});
  }
  header["tensors"] = tensors;
  const std::string hs = header.dump();

  os.write(kMagic, 4);
  write_u32(os, kVersion);
  write_u64(os, hs.size());
  os.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  for (const auto& [name, t] : ck.tensors) {
    os.write(reinterpret_cast<const char*>(t.data.data()),
             static_cast<std::streamsize>(t.numel() * sizeof(double)));
  }
  if (!os) {
    throw DataError("write failed for " + path.string());
  }
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) {
    throw DataError("cannot open checkpoint " + path.string());
  }
  char magic[4] = {};
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0) {
    throw DataError(path.string() + " is not a parameter checkpoint");
  }
  const uint32_t version = read_u32(is);
  if (version != kVersion) {
    throw DataError("checkpoint " + path.string() + " has version " +
                    std::to_string(version) + ", expected " +
                    std::to_string(kVersion));
  }
  const uint64_t hlen = read_u64(is);
  std::string hs(hlen, '\0');
  is.read(hs.data(), static_cast<std::streamsize>(hlen));
  if (!is) {
    throw DataError("truncated checkpoint header in " + path.string());
  }
  nlohmann::ordered_json header;
  try {
    header = nlohmann::ordered_json::parse(hs);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("bad checkpoint header in " + path.string() + ": " +
                    e.what());
  }

  Checkpoint ck;
  ck.kind = header.value("kind", std::string{});
  ck.meta = header.value("meta", nlohmann::ordered_json::object());
  for (const auto& td : header.at("tensors")) {
    const std::string name = td.at("name").get<std::string>();
    const int rows = td.at("rows").get<int>();
    const int cols = td.at("cols").get<int>();
    Tensor t(rows, cols);
    is.read(reinterpret_cast<char*>(t.data.data()),
            static_cast<std::streamsize>(t.numel() * sizeof(double)));
    if (!is) {
      throw DataError("truncated tensor " + name + " in " + path.string());
    }
    ck.tensors.emplace_back(name, std::move(t));
  }
  return ck;
}

}  // namespace rml
