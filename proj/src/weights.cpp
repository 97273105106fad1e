// SPDX-License-Identifier: Apache-2.0

#include "cake/weights.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>

namespace cake {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'C', 'A', 'K', 'E'};
constexpr std::uint32_t kMaxRank = 8;

void put_u32(std::ofstream& out, std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); }

class Reader {
 public:
  explicit Reader(const std::filesystem::path& path) : path_(path.string()), in_(path, std::ios::binary) {
    if (!in_) throw IoError("cannot open " + path_);
    in_.seekg(0, std::ios::end);
    remaining_ = std::uint64_t(in_.tellg());
    in_.seekg(0);
  }
  void bytes(void* dst, std::uint64_t n, const std::string& what) {
    if (n > remaining_) throw WeightsError(path_ + ": truncated while reading " + what);
    in_.read(static_cast<char*>(dst), std::streamsize(n));
    if (!in_) throw WeightsError(path_ + ": read failed at " + what);
    remaining_ -= n;
  }
  std::uint32_t u32(const std::string& what) {
    std::uint32_t v;
    bytes(&v, 4, what);
    return v;
  }
  std::uint64_t remaining() const { return remaining_; }
  const std::string& path() const { return path_; }

 private:
  std::string path_;
  std::ifstream in_;
  std::uint64_t remaining_ = 0;
};

constexpr const char* kStageKey = "meta.stage";

}  // namespace

void save_weights(const std::filesystem::path& path, const NamedParams<float>& tensors) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(kMagic, 4);
  put_u32(out, kWeightsVersion);
  put_u32(out, std::uint32_t(tensors.size()));
  for (const auto& [name, t] : tensors) {
    put_u32(out, std::uint32_t(name.size()));
    out.write(name.data(), std::streamsize(name.size()));
    put_u32(out, std::uint32_t(t.rank()));
    for (auto d : t.shape()) put_u32(out, std::uint32_t(d));
    out.write(reinterpret_cast<const char*>(t.data().data()), std::streamsize(t.numel() * sizeof(float)));
  }
  if (!out) throw IoError("write failed: " + path.string());
}

NamedParams<float> read_weights(const std::filesystem::path& path) {
  Reader r(path);
  char magic[4];
  r.bytes(magic, 4, "magic");
  if (std::memcmp(magic, kMagic, 4) != 0) throw WeightsError(r.path() + ": bad magic, not a CAKE weights file");
  const auto version = r.u32("version");
  if (version != kWeightsVersion)
    throw WeightsError(r.path() + ": unsupported version " + std::to_string(version) + " (expected " +
                       std::to_string(kWeightsVersion) + ")");
  const auto count = r.u32("tensor count");
  NamedParams<float> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = r.u32("name length");
    if (len > r.remaining()) throw WeightsError(r.path() + ": name length exceeds file size");
    std::string name(len, '\0');
    r.bytes(name.data(), len, "name");
    const auto rank = r.u32(name + " rank");
    if (rank > kMaxRank) throw WeightsError(r.path() + ": tensor " + name + " has rank " + std::to_string(rank));
    Shape shape;
    std::uint64_t numel = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      shape.push_back(r.u32(name + " extents"));
      numel *= shape.back();
      if (numel * sizeof(float) > r.remaining())
        throw WeightsError(r.path() + ": payload of " + name + " exceeds file size");
    }
    std::vector<float> data(numel);
    r.bytes(data.data(), numel * sizeof(float), name + " payload");
    out.emplace_back(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  if (r.remaining() != 0) throw WeightsError(r.path() + ": trailing bytes after the last tensor");
  return out;
}

void assign_weights(const NamedParams<float>& targets, const NamedParams<float>& source) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& [n, t] : source) by_name[n] = &t;
  for (const auto& [name, target] : targets) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw WeightsError("checkpoint is missing tensor " + name);
    if (it->second->shape() != target.shape())
      throw WeightsError("tensor " + name + ": checkpoint shape " + shape_str(it->second->shape()) +
                         ", model expects " + shape_str(target.shape()));
  }
  for (const auto& [name, target] : targets) {
    auto dst = Tensor(target).mutable_data();
    auto src = by_name[name]->data();
    std::copy(src.begin(), src.end(), dst.begin());
  }
}

std::string stage_name(Stage s) {
  switch (s) {
    case Stage::teacher: return "teacher";
    case Stage::stage1: return "stage 1";
    case Stage::stage2: return "stage 2";
    case Stage::stage3: return "stage 3";
  }
  return "unknown";
}

bool Checkpoint::has_student() const {
  for (const auto& [n, t] : tensors)
    if (n.rfind("student.", 0) == 0) return true;
  return false;
}

namespace {

template <class M>
NamedParams<float> prefixed(const M& model, const std::string& prefix) {
  NamedParams<float> named, out;
  model.collect(named);
  for (auto& [n, t] : named) out.emplace_back(prefix + n, t);
  return out;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, Stage stage, const Teacher<float>& teacher,
                     const Student<float>* student) {
  NamedParams<float> all;
  all.emplace_back(kStageKey, Tensor({1}, {float(int(stage))}));
  for (auto& p : prefixed(teacher, "teacher.")) all.push_back(std::move(p));
  if (student)
    for (auto& p : prefixed(*student, "student.")) all.push_back(std::move(p));
  save_weights(path, all);
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  Checkpoint c;
  c.tensors = read_weights(path);
  bool found = false;
  for (const auto& [n, t] : c.tensors)
    if (n == kStageKey && t.numel() == 1) {
      const int s = int(t[0]);
      if (s < 0 || s > 3) throw WeightsError(path.string() + ": invalid stage marker");
      c.stage = Stage(s);
      found = true;
    }
  if (!found) throw WeightsError(path.string() + ": no stage marker; not a training checkpoint");
  return c;
}

void load_teacher(const Checkpoint& ckpt, Teacher<float>& teacher) {
  assign_weights(prefixed(teacher, "teacher."), ckpt.tensors);
}

void load_student(const Checkpoint& ckpt, Student<float>& student) {
  if (!ckpt.has_student()) throw WeightsError("checkpoint holds no student network");
  assign_weights(prefixed(student, "student."), ckpt.tensors);
}

}  // namespace cake
