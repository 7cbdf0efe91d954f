#include "gso/io.hpp"

#include <zlib.h>

#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

namespace gso {

void SampleBatch::validate(int num_classes) const {
  if (!inputs.allFinite()) {
    throw UsageError("sample batch contains non-finite inputs");
  }
  if (labels) {
    if (static_cast<Index>(labels->size()) != inputs.rows()) {
      throw UsageError("label count does not match sample count");
    }
    for (int y : *labels) {
      if (y < 0 || (num_classes >= 0 && y >= num_classes)) {
        throw UsageError("label " + std::to_string(y) + " out of range");
      }
    }
  }
}

std::uint32_t crc32_of(const std::uint8_t* data, std::size_t len) {
  return static_cast<std::uint32_t>(
      ::crc32(0L, reinterpret_cast<const Bytef*>(data), static_cast<uInt>(len)));
}

void BinaryWriter::magic(const char* bytes, std::size_t len) {
  this->bytes(bytes, len);
}

void BinaryWriter::u8(std::uint8_t v) { buf_.push_back(v); }

void BinaryWriter::u16(std::uint16_t v) {
  buf_.push_back(static_cast<std::uint8_t>(v & 0xff));
  buf_.push_back(static_cast<std::uint8_t>(v >> 8));
}

void BinaryWriter::u32(std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

void BinaryWriter::u64(std::uint64_t v) {
  for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

void BinaryWriter::f32(float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  u32(bits);
}

void BinaryWriter::f32_vector(const Vector& v) {
  for (Index i = 0; i < v.size(); ++i) f32(static_cast<float>(v[i]));
}

void BinaryWriter::f32_matrix_rowmajor(const Matrix& m) {
  for (Index r = 0; r < m.rows(); ++r)
    for (Index c = 0; c < m.cols(); ++c) f32(static_cast<float>(m(r, c)));
}

void BinaryWriter::f32_matrix_colmajor(const Matrix& m) {
  for (Index c = 0; c < m.cols(); ++c)
    for (Index r = 0; r < m.rows(); ++r) f32(static_cast<float>(m(r, c)));
}

void BinaryWriter::bytes(const void* data, std::size_t len) {
  const auto* p = static_cast<const std::uint8_t*>(data);
  buf_.insert(buf_.end(), p, p + len);
}

void BinaryWriter::finish_to_file(const std::string& path) {
  const std::uint32_t crc = crc32_of(buf_.data(), buf_.size());
  u32(crc);

  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot open " + tmp + " for writing");
    out.write(reinterpret_cast<const char*>(buf_.data()),
              static_cast<std::streamsize>(buf_.size()));
    if (!out) throw FormatError("write failed for " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    throw FormatError("rename failed for " + path);
  }
}

BinaryReader::BinaryReader(std::vector<std::uint8_t> data, std::string origin)
    : data_(std::move(data)), origin_(std::move(origin)) {}

BinaryReader BinaryReader::from_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path);
  std::vector<std::uint8_t> data((std::istreambuf_iterator<char>(in)),
                                 std::istreambuf_iterator<char>());
  return BinaryReader(std::move(data), path);
}

void BinaryReader::need(std::size_t len) {
  if (pos_ + len > data_.size()) {
    throw FormatError(origin_ + ": truncated (need " + std::to_string(len) +
                      " bytes at offset " + std::to_string(pos_) + ")");
  }
}

void BinaryReader::expect_magic(const char* bytes, std::size_t len) {
  need(len);
  if (std::memcmp(data_.data() + pos_, bytes, len) != 0) {
    throw FormatError(origin_ + ": bad magic bytes");
  }
  pos_ += len;
}

std::uint8_t BinaryReader::u8() {
  need(1);
  return data_[pos_++];
}

std::uint16_t BinaryReader::u16() {
  need(2);
  std::uint16_t v = static_cast<std::uint16_t>(data_[pos_] | (data_[pos_ + 1] << 8));
  pos_ += 2;
  return v;
}

std::uint32_t BinaryReader::u32() {
  need(4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(data_[pos_ + i]) << (8 * i);
  pos_ += 4;
  return v;
}

std::uint64_t BinaryReader::u64() {
  need(8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(data_[pos_ + i]) << (8 * i);
  pos_ += 8;
  return v;
}

float BinaryReader::f32() {
  std::uint32_t bits = u32();
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

Vector BinaryReader::f32_vector(Index n) {
  Vector v(n);
  for (Index i = 0; i < n; ++i) v[i] = f32();
  return v;
}

Matrix BinaryReader::f32_matrix_rowmajor(Index rows, Index cols) {
  Matrix m(rows, cols);
  for (Index r = 0; r < rows; ++r)
    for (Index c = 0; c < cols; ++c) m(r, c) = f32();
  return m;
}

Matrix BinaryReader::f32_matrix_colmajor(Index rows, Index cols) {
  Matrix m(rows, cols);
  for (Index c = 0; c < cols; ++c)
    for (Index r = 0; r < rows; ++r) m(r, c) = f32();
  return m;
}

std::vector<std::uint8_t> BinaryReader::raw(std::size_t len) {
  need(len);
  std::vector<std::uint8_t> out(data_.begin() + static_cast<long>(pos_),
                                data_.begin() + static_cast<long>(pos_ + len));
  pos_ += len;
  return out;
}

void BinaryReader::verify_crc_and_end() {
  const std::uint32_t stored = u32();
  if (pos_ != data_.size()) {
    throw FormatError(origin_ + ": trailing bytes after CRC");
  }
  const std::uint32_t actual = crc32_of(data_.data(), data_.size() - 4);
  if (stored != actual) {
    throw FormatError(origin_ + ": CRC mismatch");
  }
}

void write_text_file(const std::string& path, const std::string& content) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot open " + tmp + " for writing");
    out << content;
    if (!out) throw FormatError("write failed for " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    throw FormatError("rename failed for " + path);
  }
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

namespace {
constexpr char kDataMagic[] = "GSO-DATA\0";
constexpr std::size_t kDataMagicLen = 9;
constexpr std::uint16_t kDataVersion = 1;
}  // namespace

void save_dataset(const SampleBatch& batch, const std::string& path) {
  BinaryWriter w;
  w.magic(kDataMagic, kDataMagicLen);
  w.u16(kDataVersion);
  w.u32(static_cast<std::uint32_t>(batch.size()));
  w.u32(static_cast<std::uint32_t>(batch.dim()));
  w.u8(batch.labels ? 1 : 0);
  w.f32_matrix_rowmajor(batch.inputs);
  if (batch.labels) {
    for (int y : *batch.labels) w.u32(static_cast<std::uint32_t>(y));
  }
  w.finish_to_file(path);
}

SampleBatch load_dataset(const std::string& path) {
  BinaryReader r = BinaryReader::from_file(path);
  r.expect_magic(kDataMagic, kDataMagicLen);
  const std::uint16_t ver = r.u16();
  if (ver != kDataVersion) {
    throw FormatError(path + ": unsupported dataset version " + std::to_string(ver));
  }
  const auto n = static_cast<Index>(r.u32());
  const auto dim = static_cast<Index>(r.u32());
  const bool has_labels = r.u8() != 0;
  SampleBatch batch;
  batch.inputs = r.f32_matrix_rowmajor(n, dim);
  if (has_labels) {
    std::vector<int> labels(static_cast<std::size_t>(n));
    for (auto& y : labels) y = static_cast<int>(r.u32());
    batch.labels = std::move(labels);
  }
  r.verify_crc_and_end();
  return batch;
}

void save_dataset_csv(const SampleBatch& batch, const std::string& path) {
  std::ostringstream out;
  out.precision(17);
  for (Index c = 0; c < batch.dim(); ++c) {
    if (c) out << ',';
    out << 'x' << c;
  }
  if (batch.labels) out << ",label";
  out << '\n';
  for (Index r = 0; r < batch.size(); ++r) {
    for (Index c = 0; c < batch.dim(); ++c) {
      if (c) out << ',';
      out << batch.inputs(r, c);
    }
    if (batch.labels) out << ',' << (*batch.labels)[static_cast<std::size_t>(r)];
    out << '\n';
  }
  write_text_file(path, out.str());
}

SampleBatch load_dataset_csv(const std::string& path) {
  std::istringstream in(read_text_file(path));
  std::string header;
  if (!std::getline(in, header)) throw FormatError(path + ": empty CSV");
  std::vector<std::string> cols;
  {
    std::istringstream hs(header);
    std::string tok;
    while (std::getline(hs, tok, ',')) cols.push_back(tok);
  }
  const bool has_labels = !cols.empty() && cols.back() == "label";
  const Index dim = static_cast<Index>(cols.size()) - (has_labels ? 1 : 0);
  if (dim < 1) throw FormatError(path + ": CSV has no feature columns");

  std::vector<double> values;
  std::vector<int> labels;
  std::string line;
  Index n = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string tok;
    for (Index c = 0; c < dim; ++c) {
      if (!std::getline(ls, tok, ',')) throw FormatError(path + ": short CSV row");
      values.push_back(std::stod(tok));
    }
    if (has_labels) {
      if (!std::getline(ls, tok, ',')) throw FormatError(path + ": missing label");
      labels.push_back(std::stoi(tok));
    }
    ++n;
  }
  SampleBatch batch;
  batch.inputs.resize(n, dim);
  for (Index r = 0; r < n; ++r)
    for (Index c = 0; c < dim; ++c)
      batch.inputs(r, c) = values[static_cast<std::size_t>(r * dim + c)];
  if (has_labels) batch.labels = std::move(labels);
  return batch;
}

}  // namespace gso
