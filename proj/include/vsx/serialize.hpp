#pragma once

// Little-endian binary file helpers shared by the checkpoint and volume
// formats. All writes go through a temp-file + rename so readers never see a
// half-written file.

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <functional>
#include <string>
#include <type_traits>
#include <vector>

#include "vsx/common.hpp"

namespace vsx {
namespace io {

inline void write_exact(std::ostream& os, const void* data, size_t bytes) {
  os.write(static_cast<const char*>(data), static_cast<std::streamsize>(bytes));
  if (!os) throw IoError("write failed");
}

inline void read_exact(std::istream& is, void* data, size_t bytes) {
  is.read(static_cast<char*>(data), static_cast<std::streamsize>(bytes));
  if (static_cast<size_t>(is.gcount()) != bytes) {
    throw DataError("unexpected end of file");
  }
}

// This codebase targets little-endian hosts; the on-disk format is defined
// as little-endian, so scalar I/O is a plain memory copy.
template <typename T>
void write_scalar(std::ostream& os, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  write_exact(os, &v, sizeof(T));
}

template <typename T>
T read_scalar(std::istream& is) {
  static_assert(std::is_trivially_copyable_v<T>);
  T v;
  read_exact(is, &v, sizeof(T));
  return v;
}

inline void write_string(std::ostream& os, const std::string& s) {
  write_scalar<uint32_t>(os, static_cast<uint32_t>(s.size()));
  write_exact(os, s.data(), s.size());
}

inline std::string read_string(std::istream& is, uint32_t max_len = (1u << 20)) {
  uint32_t len = read_scalar<uint32_t>(is);
  if (len > max_len) throw DataError("string length " + std::to_string(len) + " is implausible");
  std::string s(len, '\0');
  if (len > 0) read_exact(is, s.data(), len);
  return s;
}

inline void write_f32_array(std::ostream& os, const float* data, size_t count) {
  write_exact(os, data, count * sizeof(float));
}

inline void read_f32_array(std::istream& is, float* data, size_t count) {
  read_exact(is, data, count * sizeof(float));
}

/// Writes a file atomically: the writer fills a sibling temp file which is
/// renamed over the target only after a successful flush.
inline void atomic_write_file(const std::string& path,
                              const std::function<void(std::ostream&)>& writer) {
  std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open '" + tmp + "' for writing");
    try {
      writer(os);
    } catch (...) {
      os.close();
      std::remove(tmp.c_str());
      throw;
    }
    os.flush();
    if (!os) {
      std::remove(tmp.c_str());
      throw IoError("write to '" + tmp + "' failed");
    }
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    std::remove(tmp.c_str());
    throw IoError("cannot rename '" + tmp + "' to '" + path + "'");
  }
}

inline std::ifstream open_input(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open '" + path + "' for reading");
  return is;
}

}  // namespace io
}  // namespace vsx
