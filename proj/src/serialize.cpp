// Copyright (c) 2026, the rsd authors
// SPDX-License-Identifier: Apache-2.0

#include "rsd/serialize.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>

namespace rsd::io {

namespace {

void put_bytes(std::ostream& out, const void* p, size_t n) {
  out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
  if (!out) throw IoError("write failed");
}

void get_bytes(std::istream& in, void* p, size_t n, const char* what) {
  in.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (static_cast<size_t>(in.gcount()) != n)
    throw FormatError(std::string("unexpected end of file while reading ") +
                      what);
}

}  // namespace

void write_u32le(std::ostream& out, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v),
                        static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 24)};
  put_bytes(out, b, 4);
}

uint32_t read_u32le(std::istream& in, const char* what) {
  unsigned char b[4];
  get_bytes(in, b, 4, what);
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) |
         (static_cast<uint32_t>(b[3]) << 24);
}

void write_f64le(std::ostream& out, double v) {
  uint64_t u = std::bit_cast<uint64_t>(v);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(u >> (8 * i));
  put_bytes(out, b, 8);
}

double read_f64le(std::istream& in, const char* what) {
  unsigned char b[8];
  get_bytes(in, b, 8, what);
  uint64_t u = 0;
  for (int i = 0; i < 8; ++i) u |= static_cast<uint64_t>(b[i]) << (8 * i);
  return std::bit_cast<double>(u);
}

void write_string(std::ostream& out, const std::string& s) {
  write_u32le(out, static_cast<uint32_t>(s.size()));
  put_bytes(out, s.data(), s.size());
}

std::string read_string(std::istream& in, const char* what) {
  uint32_t n = read_u32le(in, what);
  std::string s(n, '\0');
  if (n) get_bytes(in, s.data(), n, what);
  return s;
}

void write_tensor_record(std::ostream& out, const std::string& name,
                         const Tensor& t) {
  write_string(out, name);
  write_u32le(out, static_cast<uint32_t>(t.rank()));
  for (int i = 0; i < t.rank(); ++i)
    write_u32le(out, static_cast<uint32_t>(t.dim(i)));
  for (double v : t.values()) write_f64le(out, v);
}

bool read_tensor_record(std::istream& in, std::string* name, Tensor* t) {
  // Peek one byte so a clean EOF at a record boundary is not an error.
  if (in.peek() == std::char_traits<char>::eof()) return false;
  *name = read_string(in, "tensor name");
  uint32_t rank = read_u32le(in, "tensor rank");
  Shape shape(rank);
  for (uint32_t i = 0; i < rank; ++i)
    shape[i] = static_cast<int>(read_u32le(in, "tensor dims"));
  int64_t n = shape_numel(shape);
  std::vector<double> values(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i)
    values[static_cast<size_t>(i)] = read_f64le(in, "tensor data");
  *t = Tensor::from_values(shape, std::move(values));
  return true;
}

void write_file_atomic(const std::string& path, const std::string& contents) {
  std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp + " for writing");
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw IoError("write failed for " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("rename " + tmp + " -> " + path + ": " + ec.message());
}

}  // namespace rsd::io
