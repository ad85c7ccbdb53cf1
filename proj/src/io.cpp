#include "karma/io.hpp"

#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace karma {

namespace {

nlohmann::json nested_mu(const GameConfig& g, std::span<const double> mu) {
  auto out = nlohmann::json::array();
  for (int u = 0; u < g.num_urgency(); ++u) {
    auto row = nlohmann::json::array();
    for (int k = 0; k < g.num_bids(); ++k) row.push_back(mu[g.state_index({u, k})]);
    out.push_back(row);
  }
  return out;
}

nlohmann::json nested_pi(const GameConfig& g, const Policy& pi) {
  auto out = nlohmann::json::array();
  for (int u = 0; u < g.num_urgency(); ++u) {
    auto rows = nlohmann::json::array();
    for (int k = 0; k < g.num_bids(); ++k) {
      auto r = pi.row(g.state_index({u, k}));
      rows.push_back(std::vector<double>(r.begin(), r.end()));
    }
    out.push_back(rows);
  }
  return out;
}

std::vector<double> flat_mu(const nlohmann::json& j, const GameConfig& g) {
  if (!j.is_array() || static_cast<int>(j.size()) != g.num_urgency()) throw ContractError("mu has the wrong shape");
  std::vector<double> mu(g.num_states());
  for (int u = 0; u < g.num_urgency(); ++u) {
    if (static_cast<int>(j[u].size()) != g.num_bids()) throw ContractError("mu row has the wrong length");
    for (int k = 0; k < g.num_bids(); ++k) mu[g.state_index({u, k})] = j[u][k].get<double>();
  }
  return mu;
}

Policy flat_pi(const nlohmann::json& j, const GameConfig& g) {
  if (!j.is_array() || static_cast<int>(j.size()) != g.num_urgency()) throw ContractError("pi has the wrong shape");
  Policy pi(g.num_states(), g.num_bids());
  for (int u = 0; u < g.num_urgency(); ++u) {
    if (static_cast<int>(j[u].size()) != g.num_bids()) throw ContractError("pi has the wrong number of karma rows");
    for (int k = 0; k < g.num_bids(); ++k) {
      const auto& r = j[u][k];
      if (static_cast<int>(r.size()) != g.num_bids()) throw ContractError("pi row has the wrong length");
      for (int a = 0; a < g.num_bids(); ++a) pi(g.state_index({u, k}), a) = r[a].get<double>();
    }
  }
  return pi;
}

nlohmann::json finite_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

}  // namespace

nlohmann::json mean_field_to_json(const GameConfig& g, const MeanField& mf) {
  return {{"game", game_to_json(g)}, {"mu", nested_mu(g, mf.mu)}, {"pi", nested_pi(g, mf.pi)}};
}

MeanField mean_field_from_json(const nlohmann::json& j, const GameConfig& g) {
  MeanField mf{flat_mu(j.at("mu"), g), flat_pi(j.at("pi"), g)};
  mf.validate(g, 1e-9);
  return mf;
}

nlohmann::json sne_to_json(const GameConfig& g, const SneResult& r, bool include_q) {
  auto j = mean_field_to_json(g, r.mean_field);
  if (include_q && !r.q.q.empty()) {
    auto q = nlohmann::json::array();
    for (int u = 0; u < g.num_urgency(); ++u) {
      auto rows = nlohmann::json::array();
      for (int k = 0; k < g.num_bids(); ++k) {
        const int x = g.state_index({u, k});
        std::vector<double> vals;
        for (int a = 0; a <= k; ++a) vals.push_back(r.q(x, a));
        rows.push_back(vals);
      }
      q.push_back(rows);
    }
    j["q"] = q;
  } else {
    j["q"] = nullptr;
  }
  j["residuals"] = {{"sne1_l1", r.residual_sne1}, {"exploitability", r.exploitability}};
  j["action_gap"] = finite_or_null(r.action_gap);
  j["iterations"] = r.iterations;
  j["converged"] = r.converged;
  return j;
}

SneFile sne_from_json(const nlohmann::json& j) {
  SneFile f;
  f.game = game_from_json(j.at("game"));
  const auto& g = f.game;
  f.result.mean_field = mean_field_from_json(j, g);
  if (j.contains("q") && !j["q"].is_null()) {
    const auto& q = j["q"];
    ValueTables t(g.num_states(), g.num_bids());
    if (static_cast<int>(q.size()) != g.num_urgency()) throw ContractError("q has the wrong shape");
    for (int u = 0; u < g.num_urgency(); ++u)
      for (int k = 0; k < g.num_bids(); ++k) {
        const auto& row = q[u].at(k);
        if (static_cast<int>(row.size()) != k + 1) throw ContractError("q row must list bids 0..k");
        const int x = g.state_index({u, k});
        double best = -std::numeric_limits<double>::infinity();
        for (int a = 0; a <= k; ++a) {
          t(x, a) = row[a].get<double>();
          best = std::max(best, t(x, a));
        }
        t.v[x] = best;
      }
    f.result.q = std::move(t);
    f.has_q = true;
  }
  if (j.contains("residuals")) {
    f.result.residual_sne1 = j["residuals"].value("sne1_l1", 0.0);
    f.result.exploitability = j["residuals"].value("exploitability", 0.0);
  }
  const auto gap = j.value("action_gap", nlohmann::json(nullptr));
  f.result.action_gap = gap.is_null() ? std::numeric_limits<double>::infinity() : gap.get<double>();
  f.result.iterations = j.value("iterations", 0);
  f.result.converged = j.value("converged", false);
  return f;
}

void save_sne(const std::string& path, const GameConfig& g, const SneResult& r, bool include_q) {
  write_json(path, sne_to_json(g, r, include_q));
}

SneFile load_sne(const std::string& path) { return sne_from_json(read_json(path)); }

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const std::string& path, std::string_view text) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw std::runtime_error("write failed: " + path);
}

nlohmann::json read_json(const std::string& path) {
  try {
    return nlohmann::json::parse(read_text(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw std::runtime_error(path + ": " + e.what());
  }
}

void write_json(const std::string& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

CsvTable::CsvTable(std::vector<std::string> header) : header_(std::move(header)) {}

CsvTable& CsvTable::row(std::initializer_list<std::string> cells) { return row(std::vector<std::string>(cells)); }

CsvTable& CsvTable::row(const std::vector<std::string>& cells) {
  if (cells.size() != header_.size()) throw ContractError("csv row width does not match the header");
  rows_.push_back(cells);
  return *this;
}

std::string CsvTable::str() const {
  std::string out;
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) out += ',';
      out += cells[i];
    }
    out += '\n';
  };
  line(header_);
  for (const auto& r : rows_) line(r);
  return out;
}

void CsvTable::save(const std::string& path) const { write_text(path, str()); }

}  // namespace karma
