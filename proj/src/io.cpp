#include "xrs/io.hpp"

#include <openssl/evp.h>

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "xrs/errors.hpp"

namespace xrs {

std::string_view trim(std::string_view text) {
  const auto first = text.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = text.find_last_not_of(" \t\r\n");
  return text.substr(first, last - first + 1);
}

std::vector<std::string_view> split(std::string_view text, char sep) {
  std::vector<std::string_view> parts;
  std::size_t start = 0;
  while (true) {
    const auto pos = text.find(sep, start);
    if (pos == std::string_view::npos) {
      parts.push_back(text.substr(start));
      return parts;
    }
    parts.push_back(text.substr(start, pos - start));
    start = pos + 1;
  }
}

namespace {

std::vector<std::string_view> words(std::string_view text) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i])))
      ++i;
    std::size_t j = i;
    while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j])))
      ++j;
    if (j > i) out.push_back(text.substr(i, j - i));
    i = j;
  }
  return out;
}

}  // namespace

std::vector<TokenId> parse_token_ids(std::string_view text,
                                     std::size_t line_no) {
  std::vector<TokenId> ids;
  for (auto w : words(text)) {
    TokenId value = 0;
    auto [ptr, ec] = std::from_chars(w.data(), w.data() + w.size(), value);
    if (ec != std::errc() || ptr != w.data() + w.size() || value < 0) {
      throw IngestionError("line " + std::to_string(line_no) +
                           ": invalid token id '" + std::string(w) + "'");
    }
    ids.push_back(value);
  }
  return ids;
}

std::vector<double> parse_reals(std::string_view text, std::size_t line_no) {
  std::vector<double> values;
  for (auto w : words(text)) {
    // strtod accepts "nan"/"inf", which are then rejected explicitly.
    std::string token(w);
    char* end = nullptr;
    const double v = std::strtod(token.c_str(), &end);
    if (end != token.c_str() + token.size()) {
      throw IngestionError("line " + std::to_string(line_no) +
                           ": invalid real '" + token + "'");
    }
    if (!std::isfinite(v)) {
      throw IngestionError("line " + std::to_string(line_no) +
                           ": non-finite value '" + token + "'");
    }
    values.push_back(v);
  }
  return values;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void write_file_atomic(const std::filesystem::path& path,
                       const std::string& content) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw PersistenceError("cannot write " + tmp.string());
    out << content;
    out.flush();
    if (!out) throw PersistenceError("write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    throw PersistenceError("rename to " + path.string() + " failed: " +
                           ec.message());
  }
}

void append_json_line(const std::filesystem::path& path,
                      const nlohmann::json& record) {
  std::ofstream out(path, std::ios::app);
  if (!out) throw PersistenceError("cannot append to " + path.string());
  out << record.dump() << '\n';
  if (!out) throw PersistenceError("append failed for " + path.string());
}

std::vector<nlohmann::json> read_json_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open " + path.string());
  std::vector<nlohmann::json> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    try {
      out.push_back(nlohmann::json::parse(line));
    } catch (const nlohmann::json::parse_error&) {
      // A torn final line from an interrupted append is tolerated.
      if (in.peek() == std::char_traits<char>::eof()) break;
      throw IngestionError(path.string() + " line " + std::to_string(line_no) +
                           ": malformed record");
    }
  }
  return out;
}

std::vector<TokenSequence> read_sequences(const std::filesystem::path& path,
                                          const MdpSpec& mdp) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open " + path.string());
  std::vector<TokenSequence> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    auto body = trim(line);
    if (body.empty() || body.front() == '#') continue;
    auto parts = split(body, '|');
    if (parts.size() != 2) {
      throw IngestionError("line " + std::to_string(line_no) +
                           ": expected 'prompt ids | completion ids'");
    }
    TokenSequence seq;
    seq.prompt = parse_token_ids(parts[0], line_no);
    seq.completion = parse_token_ids(parts[1], line_no);
    seq.terminated = is_terminal(mdp, seq);
    try {
      validate_sequence(mdp, seq);
    } catch (const UsageError& e) {
      throw IngestionError("line " + std::to_string(line_no) + ": " + e.what());
    }
    if (!seq.terminated) {
      throw IngestionError("line " + std::to_string(line_no) +
                           ": completion does not end in eos or reach horizon");
    }
    out.push_back(std::move(seq));
  }
  return out;
}

nlohmann::json to_json(const TokenSequence& seq) {
  return {{"prompt", seq.prompt},
          {"completion", seq.completion},
          {"terminated", seq.terminated}};
}

TokenSequence sequence_from_json(const nlohmann::json& j) {
  TokenSequence seq;
  seq.prompt = j.at("prompt").get<std::vector<TokenId>>();
  seq.completion = j.at("completion").get<std::vector<TokenId>>();
  seq.terminated = j.value("terminated", false);
  return seq;
}

std::string sha256_hex(std::string_view bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(),
                 nullptr) != 1) {
    throw Error("internal", "sha256 failed");
  }
  std::ostringstream out;
  for (unsigned int i = 0; i < len; ++i) {
    out << std::hex << std::setw(2) << std::setfill('0')
        << static_cast<int>(digest[i]);
  }
  return out.str();
}

std::uint64_t sequence_fingerprint(const TokenSequence& seq) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](std::uint64_t v) {
    for (int b = 0; b < 8; ++b) {
      h ^= (v >> (8 * b)) & 0xff;
      h *= 0x100000001b3ULL;
    }
  };
  for (TokenId t : seq.prompt) mix(static_cast<std::uint64_t>(t));
  mix(~0ULL);
  for (TokenId t : seq.completion) mix(static_cast<std::uint64_t>(t));
  mix(seq.terminated ? 1 : 0);
  return h;
}

}  // namespace xrs
