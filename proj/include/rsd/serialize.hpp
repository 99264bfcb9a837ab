// Copyright (c) 2026, the rsd authors
// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint byte layout. A tensor record is:
//   name   u32 LE length + UTF-8 bytes
//   rank   u32 LE
//   dims   u32 LE each
//   data   f64 LE, row-major
// Checkpoint files start with one length-prefixed UTF-8 JSON header,
// followed by tensor records until EOF.
#pragma once

#include <iosfwd>
#include <string>
#include <utility>

#include "rsd/tensor.hpp"

namespace rsd::io {

void write_u32le(std::ostream& out, uint32_t v);
uint32_t read_u32le(std::istream& in, const char* what);
void write_f64le(std::ostream& out, double v);
double read_f64le(std::istream& in, const char* what);

void write_string(std::ostream& out, const std::string& s);
std::string read_string(std::istream& in, const char* what);

void write_tensor_record(std::ostream& out, const std::string& name,
                         const Tensor& t);
// Returns false on a clean EOF at a record boundary; throws FormatError on
// truncation mid-record.
bool read_tensor_record(std::istream& in, std::string* name, Tensor* t);

// Atomic file replacement: write to <path>.tmp then rename.
void write_file_atomic(const std::string& path, const std::string& contents);

}  // namespace rsd::io
