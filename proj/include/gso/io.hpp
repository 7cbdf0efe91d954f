#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "gso/common.hpp"

namespace gso {

// A batch of inputs with optional integer labels.
struct SampleBatch {
  Matrix inputs;                            // n x d_in
  std::optional<std::vector<int>> labels;   // each in [0, C)

  Index size() const { return inputs.rows(); }
  Index dim() const { return inputs.cols(); }
  void validate(int num_classes = -1) const;
};

// In-memory serializer. All multi-byte values little-endian. finish() appends
// a CRC32 of everything written so far, then the buffer is flushed atomically
// (temp file + rename).
class BinaryWriter {
public:
  void magic(const char* bytes, std::size_t len);
  void u8(std::uint8_t v);
  void u16(std::uint16_t v);
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f32(float v);
  void f32_vector(const Vector& v);
  void f32_matrix_rowmajor(const Matrix& m);
  void f32_matrix_colmajor(const Matrix& m);
  void bytes(const void* data, std::size_t len);

  // Appends CRC32 and writes the buffer to path via temp-file rename.
  void finish_to_file(const std::string& path);

  const std::vector<std::uint8_t>& buffer() const { return buf_; }

private:
  std::vector<std::uint8_t> buf_;
};

// Bounds-checked reader over a fully loaded file. Throws FormatError on
// truncation, bad magic, or CRC mismatch.
class BinaryReader {
public:
  BinaryReader(std::vector<std::uint8_t> data, std::string origin);

  static BinaryReader from_file(const std::string& path);

  void expect_magic(const char* bytes, std::size_t len);
  std::uint8_t u8();
  std::uint16_t u16();
  std::uint32_t u32();
  std::uint64_t u64();
  float f32();
  Vector f32_vector(Index n);
  Matrix f32_matrix_rowmajor(Index rows, Index cols);
  Matrix f32_matrix_colmajor(Index rows, Index cols);
  std::vector<std::uint8_t> raw(std::size_t len);

  // Verifies the trailing CRC32 covers all preceding bytes and that the file
  // ends exactly there.
  void verify_crc_and_end();

  const std::string& origin() const { return origin_; }

private:
  void need(std::size_t len);

  std::vector<std::uint8_t> data_;
  std::size_t pos_ = 0;
  std::string origin_;
};

std::uint32_t crc32_of(const std::uint8_t* data, std::size_t len);

// Atomic text output (temp file + rename).
void write_text_file(const std::string& path, const std::string& content);
std::string read_text_file(const std::string& path);

// Dataset container: magic "GSO-DATA\0", version u16=1, u32 n, u32 dim,
// u8 has_labels, row-major f32 matrix, u32 labels if present, CRC32.
// Embeddings and score streams reuse this container (dim=K or dim=1).
void save_dataset(const SampleBatch& batch, const std::string& path);
SampleBatch load_dataset(const std::string& path);

// CSV interop: header "x0,x1,...,label?" then one row per sample.
void save_dataset_csv(const SampleBatch& batch, const std::string& path);
SampleBatch load_dataset_csv(const std::string& path);

}  // namespace gso
