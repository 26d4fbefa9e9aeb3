#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace ddunet::cli {

/// `key=value` lines; blank lines and `#` comments are skipped, whitespace
/// around key and value is trimmed. A line without '=' is a ConfigError
/// naming the line number.
std::vector<std::pair<std::string, std::string>> parse_config_text(const std::string& text);
std::vector<std::pair<std::string, std::string>> read_config_file(const std::filesystem::path& path);

/// Removes `--config FILE` / `--config=FILE` from `args` (args[0] is the
/// program, args[1] the subcommand) and inserts the file's entries as
/// `--key=value` right after the subcommand, so flags given on the command
/// line come later and win.
std::vector<std::string> expand_config(std::vector<std::string> args);

}  // namespace ddunet::cli
