#include <charconv>
#include <fstream>
#include <map>
#include <string_view>

#include <fmt/format.h>

#include "qfactor/cli.hpp"
#include "qfactor/common.hpp"

namespace qfactor::cli {

namespace {

std::vector<std::string_view> split(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(',', start);
    auto field = line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start);
    while (!field.empty() && (field.front() == ' ' || field.front() == '\t')) field.remove_prefix(1);
    while (!field.empty() && (field.back() == ' ' || field.back() == '\t')) field.remove_suffix(1);
    out.push_back(field);
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

double parse_number(std::string_view text, const std::string& where, std::string_view column) {
  if (!text.empty() && text.front() == '+') text.remove_prefix(1);
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || ptr != text.data() + text.size() || text.empty()) {
    throw Error(fmt::format("{}: cannot parse {} value '{}'", where, column, text));
  }
  return v;
}

}  // namespace

Panel parse_panel_csv(std::istream& in, const std::string& source) {
  std::string line;
  long line_no = 0;
  std::vector<std::string> header;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    for (auto f : split(line)) header.emplace_back(f);
    break;
  }
  if (header.size() < 4 || header[0] != "unit" || header[1] != "time" || header[2] != "y") {
    throw Error(fmt::format("{}:{}: header must be unit,time,y,x1,...,xJ", source, line_no));
  }
  const auto J = static_cast<int>(header.size()) - 3;

  struct UnitData {
    std::vector<double> x;
    long first_line = 0;
  };
  std::vector<std::string> units, periods;
  std::map<std::string, int, std::less<>> unit_index, period_index;
  std::vector<UnitData> unit_data;
  std::map<std::pair<int, int>, std::pair<double, long>> cells;

  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::string where = fmt::format("{}:{}", source, line_no);
    const auto fields = split(line);
    if (fields.size() != header.size()) {
      throw Error(fmt::format("{}: expected {} fields, found {}", where, header.size(), fields.size()));
    }
    if (fields[0].empty() || fields[1].empty()) throw Error(fmt::format("{}: empty unit or time", where));

    auto [uit, unew] = unit_index.try_emplace(std::string(fields[0]), static_cast<int>(units.size()));
    if (unew) {
      units.emplace_back(fields[0]);
      unit_data.push_back({{}, line_no});
    }
    auto [pit, pnew] = period_index.try_emplace(std::string(fields[1]), static_cast<int>(periods.size()));
    if (pnew) periods.emplace_back(fields[1]);

    const double y = parse_number(fields[2], where, "y");
    std::vector<double> x(static_cast<std::size_t>(J));
    for (int j = 0; j < J; ++j) x[static_cast<std::size_t>(j)] = parse_number(fields[3 + j], where, header[3 + j]);

    auto& ud = unit_data[static_cast<std::size_t>(uit->second)];
    if (unew) {
      ud.x = x;
    } else {
      for (int j = 0; j < J; ++j) {
        if (x[static_cast<std::size_t>(j)] != ud.x[static_cast<std::size_t>(j)]) {
          throw Error(fmt::format("{}: time-varying characteristic '{}' for unit '{}' (line {} has {})", where,
                                  header[3 + j], fields[0], ud.first_line, ud.x[static_cast<std::size_t>(j)]));
        }
      }
    }
    const auto key = std::make_pair(uit->second, pit->second);
    if (auto [it, fresh] = cells.try_emplace(key, y, line_no); !fresh) {
      throw Error(fmt::format("{}: duplicate observation for unit '{}' time '{}' (first on line {})", where,
                              fields[0], fields[1], it->second.second));
    }
  }
  if (units.empty()) throw Error(fmt::format("{}: no observations", source));

  const auto N = static_cast<int>(units.size()), T = static_cast<int>(periods.size());
  Panel panel;
  panel.y.resize(N, T);
  panel.x.resize(N, J);
  for (int i = 0; i < N; ++i) {
    for (int j = 0; j < J; ++j) panel.x(i, j) = unit_data[static_cast<std::size_t>(i)].x[static_cast<std::size_t>(j)];
    for (int t = 0; t < T; ++t) {
      const auto it = cells.find({i, t});
      if (it == cells.end()) {
        throw Error(fmt::format("{}: unbalanced panel: unit '{}' has no observation for time '{}'", source,
                                units[static_cast<std::size_t>(i)], periods[static_cast<std::size_t>(t)]));
      }
      panel.y(i, t) = it->second.first;
    }
  }
  panel.unit_ids = std::move(units);
  panel.period_ids = std::move(periods);
  panel.characteristic_names.assign(header.begin() + 3, header.end());
  return validate_panel(std::move(panel));
}

Panel ingest_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(fmt::format("cannot open '{}'", path));
  return parse_panel_csv(in, path);
}

std::string panel_to_csv(const Panel& panel) {
  std::string out = "unit,time,y";
  for (const auto& name : panel.characteristic_names) out += "," + name;
  out += "\n";
  for (int i = 0; i < panel.n_units(); ++i) {
    for (int t = 0; t < panel.n_periods(); ++t) {
      out += fmt::format("{},{},{}", panel.unit_ids[static_cast<std::size_t>(i)],
                         panel.period_ids[static_cast<std::size_t>(t)], panel.y(i, t));
      for (int j = 0; j < panel.n_characteristics(); ++j) out += fmt::format(",{}", panel.x(i, j));
      out += "\n";
    }
  }
  return out;
}

}  // namespace qfactor::cli
