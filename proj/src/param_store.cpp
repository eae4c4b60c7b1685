#include "tars/param_store.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace tars {

namespace {

constexpr char kMagic[8] = {'T', 'A', 'R', 'S', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kArchiveVersion = 1;

static_assert(std::endian::native == std::endian::little, "archive I/O assumes a little-endian host");

template <class T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw FormatError("checkpoint archive truncated");
  return v;
}

}  // namespace

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t seed) {
  std::uint64_t h = seed;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

ParamStore::Entry& ParamStore::add(const std::string& name, int rows, int cols) {
  if (auto it = index_.find(name); it != index_.end()) {
    Entry& e = entries_[it->second];
    if (e.value.rows != rows || e.value.cols != cols) {
      throw ShapeError("ParamStore: '" + name + "' re-registered with a different shape");
    }
    return e;
  }
  index_.emplace(name, entries_.size());
  entries_.push_back(Entry{name, ad::Tensor(rows, cols), ad::Tensor(rows, cols), false});
  return entries_.back();
}

ParamStore::Entry& ParamStore::add_uniform(const std::string& name, int rows, int cols, int fan_in,
                                           std::mt19937_64& rng) {
  const bool fresh = !contains(name);
  Entry& e = add(name, rows, cols);
  if (fresh) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(std::max(fan_in, 1)));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (double& v : e.value.data) v = dist(rng);
  }
  return e;
}

const ParamStore::Entry& ParamStore::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("ParamStore: unknown parameter '" + name + "'");
  return entries_[it->second];
}

ParamStore::Entry& ParamStore::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("ParamStore: unknown parameter '" + name + "'");
  return entries_[it->second];
}

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.value.size();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& e : entries_) {
    if (e.grad.size() != e.value.size()) e.grad = ad::Tensor(e.value.rows, e.value.cols);
    std::fill(e.grad.data.begin(), e.grad.data.end(), 0.0);
  }
}

void ParamStore::freeze_prefix(const std::string& prefix) {
  for (auto& e : entries_) {
    if (e.name.rfind(prefix, 0) == 0) e.frozen = true;
  }
}

void ParamStore::merge(const ParamStore& other) {
  for (const auto& e : other.entries_) {
    Entry& mine = add(e.name, e.value.rows, e.value.cols);
    mine.value = e.value;
    mine.frozen = e.frozen;
  }
}

double ParamStore::grad_norm() const {
  double s = 0.0;
  for (const auto& e : entries_) {
    if (e.frozen) continue;
    for (double g : e.grad.data) s += g * g;
  }
  return std::sqrt(s);
}

std::uint64_t ParamStore::hash(const std::string& prefix) const {
  std::uint64_t h = fnv1a("");
  for (const auto& e : entries_) {
    if (e.name.rfind(prefix, 0) != 0) continue;
    h = fnv1a(e.name, h);
    const int shape[2] = {e.value.rows, e.value.cols};
    h = fnv1a(std::string_view(reinterpret_cast<const char*>(shape), sizeof(shape)), h);
    h = fnv1a(std::string_view(reinterpret_cast<const char*>(e.value.data.data()),
                               e.value.data.size() * sizeof(double)),
              h);
  }
  return h;
}

void save_archive(const std::filesystem::path& path, const ParamStore& params,
                  std::uint64_t fingerprint, ArchiveDtype dtype) {
  std::ostringstream os;
  os.write(kMagic, sizeof(kMagic));
  put<std::uint32_t>(os, kArchiveVersion);
  put<std::uint64_t>(os, fingerprint);
  put<std::uint8_t>(os, static_cast<std::uint8_t>(dtype));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(params.size()));
  for (const auto& e : params.entries()) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(e.name.size()));
    os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    put<std::uint8_t>(os, e.frozen ? 1 : 0);
    put<std::uint32_t>(os, static_cast<std::uint32_t>(e.value.rows));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(e.value.cols));
    for (double v : e.value.data) {
      if (dtype == ArchiveDtype::kFloat32) {
        put<float>(os, static_cast<float>(v));
      } else {
        put<double>(os, v);
      }
    }
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open " + path.string() + " for writing");
  const std::string bytes = os.str();
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

Archive load_archive(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  char magic[8];
  f.read(magic, sizeof(magic));
  if (!f || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw FormatError("not a checkpoint archive: " + path.string());
  }
  const auto version = get<std::uint32_t>(f);
  if (version != kArchiveVersion) {
    throw FormatError("checkpoint version " + std::to_string(version) + " unsupported");
  }
  Archive ar;
  ar.fingerprint = get<std::uint64_t>(f);
  const auto dtype = static_cast<ArchiveDtype>(get<std::uint8_t>(f));
  if (dtype != ArchiveDtype::kFloat32 && dtype != ArchiveDtype::kFloat64) {
    throw FormatError("checkpoint dtype tag invalid");
  }
  const auto count = get<std::uint32_t>(f);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = get<std::uint32_t>(f);
    if (len > (1u << 16)) throw FormatError("checkpoint entry name too long");
    std::string name(len, '\0');
    f.read(name.data(), len);
    if (!f) throw FormatError("checkpoint archive truncated");
    const bool frozen = get<std::uint8_t>(f) != 0;
    const auto rows = get<std::uint32_t>(f);
    const auto cols = get<std::uint32_t>(f);
    auto& e = ar.params.add(name, static_cast<int>(rows), static_cast<int>(cols));
    e.frozen = frozen;
    for (double& v : e.value.data) {
      v = dtype == ArchiveDtype::kFloat32 ? static_cast<double>(get<float>(f)) : get<double>(f);
    }
  }
  return ar;
}

}  // namespace tars
