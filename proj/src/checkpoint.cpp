#include "paka/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <map>

#include "paka/error.hpp"

namespace paka {
namespace {

constexpr char kMagic[5] = {'P', 'A', 'K', 'A', '1'};

template <typename T>
void put_le(std::ostream& os, T value) {
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  os.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T get_le(std::istream& is, const std::filesystem::path& path) {
  unsigned char bytes[sizeof(T)];
  is.read(reinterpret_cast<char*>(bytes), sizeof(T));
  if (!is) fail(ErrorCode::kCorruptFile, "truncated checkpoint: " + path.string());
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  T value;
  std::memcpy(&value, bytes, sizeof(T));
  return value;
}

std::uint64_t element_count(const StoredTensor& t) {
  std::uint64_t n = 1;
  for (auto d : t.dims) n *= d;
  return n;
}

Eigen::MatrixXd to_matrix(const StoredTensor& t) {
  require(t.dims.size() == 2, ErrorCode::kCorruptFile, "tensor " + t.name + " is not rank 2");
  Eigen::MatrixXd m(static_cast<Eigen::Index>(t.dims[0]), static_cast<Eigen::Index>(t.dims[1]));
  size_t k = 0;
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = t.values[k++];
  return m;
}

void append_model(std::vector<StoredTensor>& out, const std::string& prefix, const Model& m) {
  for (const auto& [name, t] : m.tensors()) out.push_back(to_stored(prefix + name, *t));
}

Model rebuild_model(const std::map<std::string, const StoredTensor*>& by_name, const std::string& prefix,
                    int patch_size, int channels, int blocks, const std::filesystem::path& path) {
  Model m;
  m.encoder.patch_size = patch_size;
  m.encoder.channels = channels;
  m.encoder.blocks.resize(static_cast<size_t>(blocks));
  for (auto& [name, t] : m.tensors()) {
    auto it = by_name.find(prefix + name);
    if (it == by_name.end()) fail(ErrorCode::kCorruptFile, "missing tensor " + prefix + name + " in " + path.string());
    *t = to_matrix(*it->second);
  }
  require(m.encoder.embed_w.rows() == patch_size * patch_size * channels, ErrorCode::kCorruptFile,
          "embedding shape disagrees with patch metadata in " + path.string());
  return m;
}

}  // namespace

StoredTensor to_stored(const std::string& name, const Eigen::MatrixXd& m, int scalar_bits) {
  StoredTensor t;
  t.name = name;
  t.dims = {static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())};
  t.scalar_bits = scalar_bits;
  t.values.reserve(static_cast<size_t>(m.size()));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) t.values.push_back(m(i, j));
  return t;
}

void write_tensors(const std::filesystem::path& path, const std::vector<StoredTensor>& tensors) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) fail(ErrorCode::kIoError, "cannot open " + path.string() + " for writing");
  os.write(kMagic, sizeof(kMagic));
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(tensors.size()));
  for (const StoredTensor& t : tensors) {
    require(t.scalar_bits == 32 || t.scalar_bits == 64, ErrorCode::kInvalidArgument, "scalar width must be 32 or 64");
    require(element_count(t) == t.values.size(), ErrorCode::kShapeMismatch, "tensor " + t.name + " dims/value mismatch");
    put_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.name.size()));
    os.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    put_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.dims.size()));
    for (auto d : t.dims) put_le<std::uint64_t>(os, d);
    put_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.scalar_bits));
  }
  for (const StoredTensor& t : tensors) {
    for (double v : t.values) {
      if (t.scalar_bits == 64) put_le<double>(os, v);
      else put_le<float>(os, static_cast<float>(v));
    }
  }
  if (!os) fail(ErrorCode::kIoError, "write failed for " + path.string());
}

std::vector<StoredTensor> read_tensors(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorCode::kIoError, "cannot open " + path.string());
  char magic[sizeof(kMagic)];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) fail(ErrorCode::kCorruptFile, "bad magic in " + path.string());
  const auto count = get_le<std::uint32_t>(is, path);
  std::vector<StoredTensor> out(count);
  for (StoredTensor& t : out) {
    const auto name_len = get_le<std::uint32_t>(is, path);
    require(name_len < (1u << 16), ErrorCode::kCorruptFile, "implausible name length in " + path.string());
    t.name.resize(name_len);
    is.read(t.name.data(), name_len);
    const auto rank = get_le<std::uint32_t>(is, path);
    require(rank <= 8, ErrorCode::kCorruptFile, "implausible rank in " + path.string());
    t.dims.resize(rank);
    for (auto& d : t.dims) d = get_le<std::uint64_t>(is, path);
    t.scalar_bits = static_cast<int>(get_le<std::uint32_t>(is, path));
    require(t.scalar_bits == 32 || t.scalar_bits == 64, ErrorCode::kCorruptFile, "bad scalar width in " + path.string());
    require(element_count(t) < (1ull << 32), ErrorCode::kCorruptFile, "implausible tensor size in " + path.string());
  }
  for (StoredTensor& t : out) {
    const auto n = element_count(t);
    t.values.resize(n);
    for (auto& v : t.values) v = t.scalar_bits == 64 ? get_le<double>(is, path) : static_cast<double>(get_le<float>(is, path));
  }
  return out;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  require(ckpt.student.same_shape(ckpt.teacher), ErrorCode::kShapeMismatch, "student and teacher shapes differ");
  std::vector<StoredTensor> tensors;
  StoredTensor meta;
  meta.name = "meta";
  meta.dims = {4};
  meta.values = {static_cast<double>(ckpt.student.encoder.patch_size), static_cast<double>(ckpt.student.encoder.channels),
                 static_cast<double>(ckpt.student.encoder.blocks.size()), static_cast<double>(ckpt.step)};
  tensors.push_back(std::move(meta));
  append_model(tensors, "student.", ckpt.student);
  append_model(tensors, "teacher.", ckpt.teacher);
  write_tensors(path, tensors);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const std::vector<StoredTensor> tensors = read_tensors(path);
  std::map<std::string, const StoredTensor*> by_name;
  for (const auto& t : tensors) by_name[t.name] = &t;
  auto meta = by_name.find("meta");
  if (meta == by_name.end() || meta->second->values.size() != 4) fail(ErrorCode::kCorruptFile, "missing meta in " + path.string());
  const auto& mv = meta->second->values;
  const int patch = static_cast<int>(mv[0]);
  const int channels = static_cast<int>(mv[1]);
  const int blocks = static_cast<int>(mv[2]);
  require(patch >= 1 && channels >= 1 && blocks >= 0, ErrorCode::kCorruptFile, "bad meta in " + path.string());
  Checkpoint ckpt;
  ckpt.student = rebuild_model(by_name, "student.", patch, channels, blocks, path);
  ckpt.teacher = rebuild_model(by_name, "teacher.", patch, channels, blocks, path);
  ckpt.step = static_cast<std::int64_t>(mv[3]);
  return ckpt;
}

}  // namespace paka
