// SPDX-License-Identifier: Apache-2.0
#include "evo/io.hpp"

#include <fstream>
#include <sstream>

#include "evo/errors.hpp"

namespace evo::io {

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open file: " + path.string());
    }
    std::ostringstream out;
    out << in.rdbuf();
    return out.str();
}

std::vector<std::string> read_lines(const fs::path& path) {
    std::string content = read_file(path);
    std::vector<std::string> lines;
    std::size_t start = 0;
    while (start < content.size()) {
        std::size_t end = content.find('\n', start);
        if (end == std::string::npos) {
            end = content.size();
        }
        std::string line = content.substr(start, end - start);
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        lines.push_back(std::move(line));
        start = end + 1;
    }
    return lines;
}

std::vector<ordered_json> read_jsonl(const fs::path& path) {
    std::vector<ordered_json> records;
    std::size_t lineno = 0;
    for (const std::string& line : read_lines(path)) {
        ++lineno;
        if (line.empty()) {
            continue;
        }
        ordered_json j = ordered_json::parse(line, nullptr, false);
        if (j.is_discarded()) {
            throw ValidationError(path.string() + ":" + std::to_string(lineno) +
                                  ": malformed record");
        }
        records.push_back(std::move(j));
    }
    return records;
}

void ensure_parent_dir(const fs::path& path) {
    fs::path parent = path.parent_path();
    if (!parent.empty()) {
        fs::create_directories(parent);
    }
}

void write_file_atomic(const fs::path& path, std::string_view content) {
    ensure_parent_dir(path);
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw IoError("cannot write file: " + tmp.string());
        }
        out.write(content.data(), static_cast<std::streamsize>(content.size()));
        if (!out) {
            throw IoError("short write: " + tmp.string());
        }
    }
    fs::rename(tmp, path);
}

void write_jsonl_atomic(const fs::path& path, const std::vector<ordered_json>& records) {
    std::string buf;
    for (const auto& r : records) {
        buf += r.dump();
        buf += '\n';
    }
    write_file_atomic(path, buf);
}

void append_line(const fs::path& path, std::string_view line) {
    ensure_parent_dir(path);
    std::ofstream out(path, std::ios::binary | std::ios::app);
    if (!out) {
        throw IoError("cannot append to file: " + path.string());
    }
    out.write(line.data(), static_cast<std::streamsize>(line.size()));
    out.put('\n');
    if (!out) {
        throw IoError("short write: " + path.string());
    }
}

std::uint64_t fnv1a64(std::string_view bytes) {
    std::uint64_t hash = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        hash ^= c;
        hash *= 0x100000001b3ULL;
    }
    return hash;
}

std::string file_digest(const fs::path& path) {
    std::uint64_t h = fnv1a64(read_file(path));
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
}

} // namespace evo::io
