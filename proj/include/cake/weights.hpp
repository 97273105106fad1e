// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint files.
//
//   "CAKE"  u32 version  u32 tensor count
//   per tensor: u32 name length, UTF-8 name, u32 rank, u32 extents[rank],
//               f32 payload
//
// All integers and floats little-endian.

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "cake/data.hpp"
#include "cake/models.hpp"
#include "cake/nn.hpp"

namespace cake {

inline constexpr std::uint32_t kWeightsVersion = 1;

/// Format, name or shape problems in a checkpoint.
class WeightsError : public IoError {
 public:
  using IoError::IoError;
};

void save_weights(const std::filesystem::path& path, const NamedParams<float>& tensors);

/// Reads every tensor. The header is validated before anything is allocated,
/// and each payload is checked against the remaining file size first.
NamedParams<float> read_weights(const std::filesystem::path& path);

/// Copies `source` into `targets` by name. Every target must be present with
/// the same shape; the error names the offending tensor. Extra source tensors
/// are ignored.
void assign_weights(const NamedParams<float>& targets, const NamedParams<float>& source);

/// Training stage a checkpoint was written after: teacher = 0, stages 1-3.
enum class Stage : int { teacher = 0, stage1 = 1, stage2 = 2, stage3 = 3 };

std::string stage_name(Stage s);

/// Teacher and student tensors (prefixed "teacher." and "student.") plus the
/// stage marker "meta.stage". The student is absent in teacher checkpoints.
struct Checkpoint {
  Stage stage = Stage::teacher;
  NamedParams<float> tensors;

  bool has_student() const;
};

void save_checkpoint(const std::filesystem::path& path, Stage stage, const Teacher<float>& teacher,
                     const Student<float>* student);
Checkpoint read_checkpoint(const std::filesystem::path& path);
void load_teacher(const Checkpoint& ckpt, Teacher<float>& teacher);
/// Throws WeightsError if the checkpoint has no student.
void load_student(const Checkpoint& ckpt, Student<float>& student);

}  // namespace cake
