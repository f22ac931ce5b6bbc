// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace evo::io {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

/// Read a whole file; throws IoError if the path does not exist.
std::string read_file(const fs::path& path);

/// Read a file as lines (trailing newline optional, '\r' stripped).
std::vector<std::string> read_lines(const fs::path& path);

/// Parse a line-delimited JSON file. Parse failures name the 1-based line.
std::vector<ordered_json> read_jsonl(const fs::path& path);

/// Write a file atomically (temp file + rename) creating parent directories.
void write_file_atomic(const fs::path& path, std::string_view content);

/// Serialize records one per line and write atomically.
void write_jsonl_atomic(const fs::path& path, const std::vector<ordered_json>& records);

/// Append a single line, creating the file and parents if needed.
void append_line(const fs::path& path, std::string_view line);

void ensure_parent_dir(const fs::path& path);

/// FNV-1a 64-bit over raw bytes. Used for artifact digests in run manifests;
/// integrity checking only, not cryptographic.
std::uint64_t fnv1a64(std::string_view bytes);

/// Hex digest of a file's contents.
std::string file_digest(const fs::path& path);

} // namespace evo::io
