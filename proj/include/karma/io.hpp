#pragma once

#include <cstdint>
#include <initializer_list>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "karma/game.hpp"
#include "karma/sne.hpp"

namespace karma {

/// Contents of an sne.json file. `q` is empty when the file carries no
/// Q table (for example an averaged fictitious-play mean field).
struct SneFile {
  GameConfig game;
  SneResult result;
  bool has_q = false;
};

/// mu as mu[u][k], pi as pi[u][k][a] over all K + 1 bids, q as ragged
/// q[u][k] over feasible bids only. A missing or infinite action gap is null.
nlohmann::json sne_to_json(const GameConfig& g, const SneResult& r, bool include_q = true);
SneFile sne_from_json(const nlohmann::json& j);
void save_sne(const std::string& path, const GameConfig& g, const SneResult& r, bool include_q = true);
SneFile load_sne(const std::string& path);

/// A mean field (mu, pi) in sne.json layout; game fields are validated
/// against `g`.
nlohmann::json mean_field_to_json(const GameConfig& g, const MeanField& mf);
MeanField mean_field_from_json(const nlohmann::json& j, const GameConfig& g);

nlohmann::json read_json(const std::string& path);
void write_json(const std::string& path, const nlohmann::json& j);
void write_text(const std::string& path, std::string_view text);
std::string read_text(const std::string& path);

/// Shortest round-trip decimal form; locale independent.
std::string format_double(double v);

/// Comma separated, dot decimal, header row, '\n' line ends.
class CsvTable {
 public:
  explicit CsvTable(std::vector<std::string> header);

  CsvTable& row(std::initializer_list<std::string> cells);
  CsvTable& row(const std::vector<std::string>& cells);
  static std::string cell(double v) { return format_double(v); }
  static std::string cell(long long v) { return std::to_string(v); }
  static std::string cell(int v) { return std::to_string(v); }

  std::string str() const;
  void save(const std::string& path) const;
  std::size_t size() const { return rows_.size(); }

 private:
  std::vector<std::string> header_;
  std::vector<std::vector<std::string>> rows_;
};

}  // namespace karma
