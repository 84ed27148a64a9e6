#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "xrs/mdp.hpp"

namespace xrs {

// Whitespace-separated token ids. Throws IngestionError naming `line_no`.
std::vector<TokenId> parse_token_ids(std::string_view text, std::size_t line_no);

// Whitespace-separated reals; NaN/inf are rejected.
std::vector<double> parse_reals(std::string_view text, std::size_t line_no);

std::vector<std::string_view> split(std::string_view text, char sep);
std::string_view trim(std::string_view text);

std::string read_file(const std::filesystem::path& path);

// Writes to a sibling temporary file, then renames over the target.
void write_file_atomic(const std::filesystem::path& path,
                       const std::string& content);

// Appends one JSON record followed by a newline.
void append_json_line(const std::filesystem::path& path,
                      const nlohmann::json& record);

std::vector<nlohmann::json> read_json_lines(const std::filesystem::path& path);

// Sequences file: one `prompt ids | completion ids` per line.
std::vector<TokenSequence> read_sequences(const std::filesystem::path& path,
                                          const MdpSpec& mdp);

nlohmann::json to_json(const TokenSequence& seq);
TokenSequence sequence_from_json(const nlohmann::json& j);

std::string sha256_hex(std::string_view bytes);

// FNV-1a over prompt, completion and the terminated flag. Stable across
// platforms, unlike std::hash.
std::uint64_t sequence_fingerprint(const TokenSequence& seq);

}  // namespace xrs
