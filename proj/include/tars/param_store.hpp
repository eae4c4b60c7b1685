#ifndef TARS_PARAM_STORE_HPP
#define TARS_PARAM_STORE_HPP

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "tars/autodiff.hpp"

namespace tars {

/// Named, shape-checked learnable arrays with gradient slots.
/// Iteration follows insertion order.
class ParamStore {
 public:
  struct Entry {
    std::string name;
    ad::Tensor value;
    ad::Tensor grad;
    bool frozen = false;
  };

  /// Registers a zero-initialised entry. Re-registering a name with the same
  /// shape is a no-op; a different shape throws ShapeError.
  Entry& add(const std::string& name, int rows, int cols);
  /// Registers with uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) values.
  Entry& add_uniform(const std::string& name, int rows, int cols, int fan_in, std::mt19937_64& rng);

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  const Entry& at(const std::string& name) const;
  Entry& at(const std::string& name);
  const ad::Tensor& value(const std::string& name) const { return at(name).value; }
  ad::Tensor& value(const std::string& name) { return at(name).value; }

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  std::size_t scalar_count() const;

  void zero_grad();
  /// Freezes every entry whose name starts with `prefix`.
  void freeze_prefix(const std::string& prefix);
  /// Copies every entry of `other` (value and frozen flag), replacing duplicates.
  void merge(const ParamStore& other);
  /// Global L2 norm over trainable gradients.
  double grad_norm() const;
  /// FNV-1a over names, shapes and value bits of entries matching `prefix`.
  std::uint64_t hash(const std::string& prefix = "") const;

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Element width of an archive payload.
enum class ArchiveDtype : std::uint8_t { kFloat32 = 1, kFloat64 = 2 };

/// Named-array archive: magic "TARSCKPT", u32 version, u64 config fingerprint,
/// u8 dtype, u32 entry count, then per entry: u32 name length, name bytes,
/// u8 frozen, u32 rows, u32 cols, little-endian payload.
struct Archive {
  std::uint64_t fingerprint = 0;
  ParamStore params;
};

void save_archive(const std::filesystem::path& path, const ParamStore& params,
                  std::uint64_t fingerprint, ArchiveDtype dtype = ArchiveDtype::kFloat64);
Archive load_archive(const std::filesystem::path& path);

/// 64-bit FNV-1a of a byte string.
std::uint64_t fnv1a(std::string_view bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);

}  // namespace tars

#endif  // TARS_PARAM_STORE_HPP
