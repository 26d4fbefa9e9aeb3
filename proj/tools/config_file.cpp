#include "config_file.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "ddunet/errors.hpp"

namespace ddunet::cli {
namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

std::vector<std::pair<std::string, std::string>> parse_config_text(const std::string& text) {
  std::vector<std::pair<std::string, std::string>> entries;
  std::istringstream in(text);
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos || trim(line.substr(0, eq)).empty()) {
      throw ConfigError("config line " + std::to_string(n) + ": expected key=value, got '" + line + "'");
    }
    entries.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return entries;
}

std::vector<std::pair<std::string, std::string>> read_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config file '" + path.string() + "'");
  std::ostringstream text;
  text << in.rdbuf();
  return parse_config_text(text.str());
}

std::vector<std::string> expand_config(std::vector<std::string> args) {
  std::vector<std::string> files;
  std::vector<std::string> kept;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config") {
      if (i + 1 >= args.size()) throw ConfigError("--config needs a file argument");
      files.push_back(args[++i]);
    } else if (args[i].rfind("--config=", 0) == 0) {
      files.push_back(args[i].substr(9));
    } else {
      kept.push_back(args[i]);
    }
  }
  if (files.empty()) return kept;
  std::vector<std::string> injected;
  for (const auto& f : files) {
    for (const auto& [key, value] : read_config_file(f)) {
      const std::string flag = key.rfind("--", 0) == 0 ? key : "--" + key;
      injected.push_back(flag + "=" + value);
    }
  }
  const std::size_t at = std::min<std::size_t>(2, kept.size());
  kept.insert(kept.begin() + static_cast<long>(at), injected.begin(), injected.end());
  return kept;
}

}  // namespace ddunet::cli
