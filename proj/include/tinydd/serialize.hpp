#pragma once

// Little-endian binary container shared by dataset and checkpoint files.
// Numbers are written by value (u8/u32/u64/i64/f64), strings as u32 length
// plus bytes, f64 arrays as raw 8-byte words. Readers validate the magic and
// version up front and throw std::runtime_error on any structural problem, so
// a truncated or foreign file never half-loads.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace tinydd {

inline constexpr char kFileMagic[4] = {'T', 'D', 'D', 'F'};
inline constexpr std::uint32_t kFileVersion = 1;

enum class FileKind : std::uint8_t {
  labeled_dataset = 1,
  synthetic_dataset = 2,
  checkpoint = 3,
};

class BinWriter {
 public:
  explicit BinWriter(const std::string& path)
      : out_(path, std::ios::binary | std::ios::trunc) {
    if (!out_) throw std::runtime_error("cannot open " + path + " for writing");
    path_ = path;
  }

  void u8(std::uint8_t v) { raw(&v, 1); }
  void u32(std::uint32_t v) { raw(&v, sizeof v); }
  void u64(std::uint64_t v) { raw(&v, sizeof v); }
  void i64(std::int64_t v) { raw(&v, sizeof v); }
  void f64(double v) { raw(&v, sizeof v); }

  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s.data(), s.size());
  }

  void f64_array(const std::vector<double>& v) {
    u64(v.size());
    raw(v.data(), v.size() * sizeof(double));
  }

  void i64_array(const std::vector<std::int64_t>& v) {
    u64(v.size());
    raw(v.data(), v.size() * sizeof(std::int64_t));
  }

  void header(FileKind kind) {
    raw(kFileMagic, 4);
    u32(kFileVersion);
    u8(static_cast<std::uint8_t>(kind));
  }

  void finish() {
    out_.flush();
    if (!out_) throw std::runtime_error("write to " + path_ + " failed");
  }

 private:
  void raw(const void* p, std::size_t n) {
    out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
  }

  std::ofstream out_;
  std::string path_;
};

class BinReader {
 public:
  explicit BinReader(const std::string& path)
      : in_(path, std::ios::binary), path_(path) {
    if (!in_) throw std::runtime_error("cannot open " + path);
  }

  std::uint8_t u8() {
    std::uint8_t v;
    raw(&v, 1);
    return v;
  }
  std::uint32_t u32() {
    std::uint32_t v;
    raw(&v, sizeof v);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v;
    raw(&v, sizeof v);
    return v;
  }
  std::int64_t i64() {
    std::int64_t v;
    raw(&v, sizeof v);
    return v;
  }
  double f64() {
    double v;
    raw(&v, sizeof v);
    return v;
  }

  std::string str() {
    const std::uint32_t n = u32();
    std::string s(n, '\0');
    raw(s.data(), n);
    return s;
  }

  std::vector<double> f64_array() {
    const std::uint64_t n = u64();
    std::vector<double> v(n);
    raw(v.data(), n * sizeof(double));
    return v;
  }

  std::vector<std::int64_t> i64_array() {
    const std::uint64_t n = u64();
    std::vector<std::int64_t> v(n);
    raw(v.data(), n * sizeof(std::int64_t));
    return v;
  }

  FileKind header() {
    char magic[4];
    raw(magic, 4);
    if (std::memcmp(magic, kFileMagic, 4) != 0)
      throw std::runtime_error(path_ + " is not a recognized data file");
    const std::uint32_t version = u32();
    if (version != kFileVersion)
      throw std::runtime_error(path_ + " has unsupported version " +
                               std::to_string(version));
    return static_cast<FileKind>(u8());
  }

  FileKind header_expect(FileKind want, const char* what) {
    const FileKind got = header();
    if (got != want)
      throw std::runtime_error(path_ + " is not a " + what + " file");
    return got;
  }

 private:
  void raw(void* p, std::size_t n) {
    in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (!in_) throw std::runtime_error(path_ + " is truncated or unreadable");
  }

  std::ifstream in_;
  std::string path_;
};

}  // namespace tinydd
