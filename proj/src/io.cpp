#include "samsel/io.hpp"

#include "samsel/error.hpp"

#include "json.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <set>
#include <sstream>

namespace samsel {

using nlohmann::json;

namespace {

std::string where(const std::string& source, std::size_t row, const std::string& column) {
  return source + ": row " + std::to_string(row) + ", column '" + column + "'";
}

double parse_cell(const std::string& text, const std::string& source, std::size_t row, const std::string& column) {
  if (text.empty()) throw InputError(where(source, row, column) + ": missing value");
  const char* begin = text.c_str();
  char* end = nullptr;
  const double v = std::strtod(begin, &end);
  if (end == begin || *end != '\0') throw InputError(where(source, row, column) + ": '" + text + "' is not a number");
  if (!std::isfinite(v)) throw InputError(where(source, row, column) + ": value is not finite");
  return v;
}

std::vector<double> to_vector(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

Eigen::VectorXd from_json_vector(const json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

std::vector<std::string> type_names(const std::vector<EffectType>& types) {
  std::vector<std::string> out;
  for (auto t : types) out.emplace_back(to_string(t));
  return out;
}

std::string quote_csv(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

double quantile7(std::vector<double> v, double prob) {
  std::sort(v.begin(), v.end());
  const double h = (static_cast<double>(v.size()) - 1.0) * prob;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (h - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

// Finite doubles only; NaN and infinities become null.
json number(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

}  // namespace

std::string format_number(double v) {
  if (std::isnan(v)) return "NaN";
  if (std::isinf(v)) return v > 0 ? "Inf" : "-Inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// ---------------------------------------------------------------- CSV

std::size_t CsvTable::column(const std::string& name) const {
  auto it = std::find(header.begin(), header.end(), name);
  if (it == header.end()) throw InputError("missing column '" + name + "'");
  return static_cast<std::size_t>(it - header.begin());
}

bool CsvTable::has_column(const std::string& name) const {
  return std::find(header.begin(), header.end(), name) != header.end();
}

CsvTable read_csv(std::istream& in, const std::string& source) {
  CsvTable table;
  std::vector<std::string> record;
  std::string field;
  bool quoted = false;
  bool any = false;
  std::size_t line = 1;

  auto finish_record = [&]() {
    record.push_back(std::move(field));
    field.clear();
    if (table.header.empty()) {
      table.header = std::move(record);
    } else if (!(record.size() == 1 && record[0].empty())) {
      if (record.size() != table.header.size()) {
        throw InputError(source + ": row " + std::to_string(table.rows.size() + 1) + " has " +
                         std::to_string(record.size()) + " fields, expected " + std::to_string(table.header.size()));
      }
      table.rows.push_back(std::move(record));
    }
    record.clear();
    any = false;
  };

  char c;
  while (in.get(c)) {
    any = true;
    if (quoted) {
      if (c == '"') {
        if (in.peek() == '"') {
          in.get(c);
          field += '"';
        } else {
          quoted = false;
        }
      } else {
        if (c == '\n') ++line;
        field += c;
      }
      continue;
    }
    if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      record.push_back(std::move(field));
      field.clear();
    } else if (c == '\r') {
      if (in.peek() == '\n') in.get(c);
      finish_record();
      ++line;
    } else if (c == '\n') {
      finish_record();
      ++line;
    } else {
      field += c;
    }
  }
  if (quoted) throw InputError(source + ": unterminated quoted field near line " + std::to_string(line));
  if (any) finish_record();
  if (table.header.empty()) throw InputError(source + ": a header row is required");
  std::set<std::string> seen;
  for (const auto& h : table.header) {
    if (!seen.insert(h).second) throw InputError(source + ": duplicate column '" + h + "'");
  }
  return table;
}

CsvTable read_csv_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open '" + path + "'");
  return read_csv(in, path);
}

void write_csv(std::ostream& out, const CsvTable& table) {
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t j = 0; j < cells.size(); ++j) out << (j ? "," : "") << quote_csv(cells[j]);
    out << '\n';
  };
  line(table.header);
  for (const auto& r : table.rows) line(r);
}

CsvTable add_lag(const CsvTable& table, const std::string& column, const std::string& period,
                 const std::string& id_column) {
  const std::size_t c = table.column(column);
  const std::size_t pc = table.column(period);
  const std::size_t ic = table.column(id_column);
  const std::string lag_name = column + "_lag";
  if (table.has_column(lag_name)) throw InputError("column '" + lag_name + "' already exists");

  bool numeric = true;
  for (const auto& r : table.rows) {
    char* end = nullptr;
    std::strtod(r[pc].c_str(), &end);
    if (r[pc].empty() || *end != '\0') numeric = false;
  }
  auto less = [&](const std::string& a, const std::string& b) {
    return numeric ? std::strtod(a.c_str(), nullptr) < std::strtod(b.c_str(), nullptr) : a < b;
  };
  std::vector<std::string> periods;
  for (const auto& r : table.rows) periods.push_back(r[pc]);
  std::sort(periods.begin(), periods.end(), less);
  periods.erase(std::unique(periods.begin(), periods.end()), periods.end());
  std::map<std::string, std::size_t> rank;
  for (std::size_t i = 0; i < periods.size(); ++i) rank[periods[i]] = i;

  std::map<std::pair<std::string, std::size_t>, std::size_t> at;
  for (std::size_t i = 0; i < table.rows.size(); ++i) {
    const auto key = std::make_pair(table.rows[i][ic], rank.at(table.rows[i][pc]));
    if (!at.emplace(key, i).second) {
      throw InputError("row " + std::to_string(i + 1) + ": duplicate site id '" + key.first + "' in period '" +
                       table.rows[i][pc] + "'");
    }
  }

  CsvTable out;
  out.header = table.header;
  out.header.push_back(lag_name);
  for (std::size_t i = 0; i < table.rows.size(); ++i) {
    const std::size_t r = rank.at(table.rows[i][pc]);
    if (r == 0) continue;
    auto prev = at.find({table.rows[i][ic], r - 1});
    if (prev == at.end()) continue;
    auto row = table.rows[i];
    row.push_back(table.rows[prev->second][c]);
    out.rows.push_back(std::move(row));
  }
  return out;
}

// ---------------------------------------------------------------- dataset

Dataset ingest_table(const CsvTable& table, const DatasetSchema& schema, const std::string& source) {
  if (schema.covariates.empty()) throw InputError(source + ": at least one covariate column is required");
  const std::size_t id = table.column(schema.id);
  const std::size_t east = table.column(schema.east);
  const std::size_t north = table.column(schema.north);
  const std::size_t resp = table.column(schema.response);
  std::vector<std::size_t> cov, grp;
  for (const auto& c : schema.covariates) cov.push_back(table.column(c));
  for (const auto& g : schema.groups) grp.push_back(table.column(g));
  std::optional<std::size_t> per;
  if (!schema.period.empty()) per = table.column(schema.period);

  const auto n = static_cast<Eigen::Index>(table.rows.size());
  if (n == 0) throw InputError(source + ": no data rows");
  Dataset d;
  d.east.resize(n);
  d.north.resize(n);
  d.y.resize(n);
  d.covariate_names = schema.covariates;
  d.covariates.resize(n, static_cast<Eigen::Index>(cov.size()));
  d.group_names = schema.groups;
  d.groups.assign(grp.size(), {});
  std::set<std::pair<std::string, std::string>> seen;
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& r = table.rows[static_cast<std::size_t>(i)];
    const auto row = static_cast<std::size_t>(i + 1);
    if (r[id].empty()) throw InputError(where(source, row, schema.id) + ": missing site id");
    d.site_id.push_back(r[id]);
    d.east(i) = parse_cell(r[east], source, row, schema.east);
    d.north(i) = parse_cell(r[north], source, row, schema.north);
    d.y(i) = parse_cell(r[resp], source, row, schema.response);
    for (std::size_t j = 0; j < cov.size(); ++j) {
      d.covariates(i, static_cast<Eigen::Index>(j)) = parse_cell(r[cov[j]], source, row, schema.covariates[j]);
    }
    for (std::size_t j = 0; j < grp.size(); ++j) {
      if (r[grp[j]].empty()) throw InputError(where(source, row, schema.groups[j]) + ": missing group label");
      d.groups[j].push_back(r[grp[j]]);
    }
    std::string p = per ? r[*per] : std::string();
    if (per && p.empty()) throw InputError(where(source, row, schema.period) + ": missing period");
    if (!seen.emplace(p, r[id]).second) {
      throw InputError(where(source, row, schema.id) + ": duplicate site id '" + r[id] + "'" +
                       (per ? " in period '" + p + "'" : std::string()));
    }
    if (per) d.period.push_back(std::move(p));
  }
  return d;
}

Dataset ingest_csv(const std::string& path, const DatasetSchema& schema) {
  return ingest_table(read_csv_file(path), schema, path);
}

void export_csv(std::ostream& out, const Dataset& data) {
  CsvTable t;
  t.header = {"id", "east", "north", "y"};
  for (const auto& c : data.covariate_names) t.header.push_back(c);
  for (const auto& g : data.group_names) t.header.push_back(g);
  if (!data.period.empty()) t.header.push_back("period");
  for (Eigen::Index i = 0; i < data.size(); ++i) {
    std::vector<std::string> r{data.site_id[static_cast<std::size_t>(i)], format_number(data.east(i)),
                               format_number(data.north(i)), format_number(data.y(i))};
    for (Eigen::Index j = 0; j < data.covariates.cols(); ++j) r.push_back(format_number(data.covariates(i, j)));
    for (const auto& g : data.groups) r.push_back(g[static_cast<std::size_t>(i)]);
    if (!data.period.empty()) r.push_back(data.period[static_cast<std::size_t>(i)]);
    t.rows.push_back(std::move(r));
  }
  write_csv(out, t);
}

// ---------------------------------------------------------------- config

std::string_view to_string(SelectMode m) {
  switch (m) {
    case SelectMode::None:
      return "none";
    case SelectMode::Simple:
      return "simple";
    case SelectMode::MC:
      return "mc";
  }
  return "?";
}

SelectMode parse_select_mode(std::string_view text) {
  if (text == "none") return SelectMode::None;
  if (text == "simple") return SelectMode::Simple;
  if (text == "mc") return SelectMode::MC;
  throw ParameterError("unknown selection mode '" + std::string(text) + "' (none, simple, mc)");
}

void FitConfig::validate() const {
  if (covariates.empty()) throw ParameterError("config: at least one covariate is required");
  if (!(selection.tol_accept > 0.0) || !(selection.tol_outer > 0.0) || !(selection.optimizer.rel_tol > 0.0)) {
    throw ParameterError("config: tolerances must be positive");
  }
  if (selection.max_sweeps < 1) throw ParameterError("config: max_sweeps must be at least 1");
  if (mode == SelectMode::MC && mc.replicates < 1) throw ParameterError("config: mc mode needs replicates >= 1");
  if (basis.range && !(*basis.range > 0.0)) throw ParameterError("config: range must be positive");
  if (basis.l_max < 1) throw ParameterError("config: l_max must be at least 1");
  if (basis.nvc_size < 1) throw ParameterError("config: nvc_size must be at least 1");
  std::set<std::string> names;
  for (const auto& c : covariates) {
    if (!names.insert(c.name).second) throw ParameterError("config: covariate '" + c.name + "' listed twice");
    TermSpec t;
    t.name = c.name;
    t.candidate_types = c.types;
    t.validate();
  }
  TermSpec::intercept(intercept_types).validate();
}

namespace {

struct ConfigValue {
  std::string text;                // scalars
  std::vector<std::string> items;  // arrays
  bool is_array = false;
  bool is_string = false;
  std::size_t line = 0;
};

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

// Removes a trailing # comment outside of quotes.
std::string strip_comment(const std::string& s) {
  bool q = false;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] == '"') q = !q;
    if (s[i] == '#' && !q) return s.substr(0, i);
  }
  return s;
}

std::string unquote(const std::string& s, const std::string& source, std::size_t line) {
  if (s.size() >= 2 && s.front() == '"' && s.back() == '"') return s.substr(1, s.size() - 2);
  throw InputError(source + ":" + std::to_string(line) + ": expected a quoted string, got '" + s + "'");
}

}  // namespace

FitConfig parse_config(std::istream& in, const std::string& base_dir, const std::string& source) {
  std::vector<std::pair<std::string, std::map<std::string, ConfigValue>>> sections;
  sections.emplace_back("", std::map<std::string, ConfigValue>{});
  std::string raw;
  std::size_t line = 0;
  while (std::getline(in, raw)) {
    ++line;
    const std::string s = trim(strip_comment(raw));
    if (s.empty()) continue;
    if (s.front() == '[') {
      if (s.back() != ']') throw InputError(source + ":" + std::to_string(line) + ": malformed section header");
      sections.emplace_back(trim(s.substr(1, s.size() - 2)), std::map<std::string, ConfigValue>{});
      continue;
    }
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw InputError(source + ":" + std::to_string(line) + ": expected key = value");
    const std::string key = trim(s.substr(0, eq));
    const std::string val = trim(s.substr(eq + 1));
    ConfigValue v;
    v.line = line;
    if (!val.empty() && val.front() == '[') {
      if (val.back() != ']') throw InputError(source + ":" + std::to_string(line) + ": arrays must fit on one line");
      v.is_array = true;
      std::stringstream items(val.substr(1, val.size() - 2));
      std::string item;
      while (std::getline(items, item, ',')) {
        item = trim(item);
        if (item.empty()) continue;
        v.items.push_back(item.front() == '"' ? unquote(item, source, line) : item);
      }
    } else if (!val.empty() && val.front() == '"') {
      v.is_string = true;
      v.text = unquote(val, source, line);
    } else {
      v.text = val;
    }
    if (!sections.back().second.emplace(key, v).second) {
      throw InputError(source + ":" + std::to_string(line) + ": duplicate key '" + key + "'");
    }
  }

  FitConfig cfg;
  auto fail = [&](const ConfigValue& v, const std::string& msg) {
    return InputError(source + ":" + std::to_string(v.line) + ": " + msg);
  };
  auto num = [&](const ConfigValue& v) {
    char* end = nullptr;
    const double d = std::strtod(v.text.c_str(), &end);
    if (v.is_array || v.is_string || v.text.empty() || *end != '\0') throw fail(v, "expected a number");
    return d;
  };
  auto integer = [&](const ConfigValue& v) {
    const double d = num(v);
    if (d != std::floor(d) || d < 0) throw fail(v, "expected a non-negative integer");
    return static_cast<long long>(d);
  };
  auto boolean = [&](const ConfigValue& v) {
    if (v.text == "true") return true;
    if (v.text == "false") return false;
    throw fail(v, "expected true or false");
  };
  auto str = [&](const ConfigValue& v) {
    if (!v.is_string) throw fail(v, "expected a quoted string");
    return v.text;
  };
  auto types = [&](const ConfigValue& v) {
    if (!v.is_array) throw fail(v, "expected an array of types");
    std::vector<EffectType> t;
    for (const auto& i : v.items) t.push_back(parse_effect_type(i));
    return t;
  };

  for (const auto& [name, keys] : sections) {
    for (const auto& [key, v] : keys) {
      if (name == "data") {
        if (key == "path") {
          cfg.data_path = str(v);
        } else if (key == "id") {
          cfg.schema.id = str(v);
        } else if (key == "east") {
          cfg.schema.east = str(v);
        } else if (key == "north") {
          cfg.schema.north = str(v);
        } else if (key == "response") {
          cfg.schema.response = str(v);
        } else if (key == "period") {
          cfg.schema.period = str(v);
        } else if (key == "groups") {
          if (!v.is_array) throw fail(v, "expected an array of column names");
          cfg.schema.groups = v.items;
        } else {
          throw fail(v, "unknown key '" + key + "' in [data]");
        }
      } else if (name == "basis") {
        if (key == "range") {
          cfg.basis.range = num(v);
        } else if (key == "l_max") {
          cfg.basis.l_max = static_cast<std::size_t>(integer(v));
        } else if (key == "eps_eig") {
          cfg.basis.eps_eig = num(v);
        } else if (key == "nvc_kind") {
          const std::string k = str(v);
          if (k == "spline") {
            cfg.basis.nvc_kind = NvcKind::NaturalSpline;
          } else if (k == "polynomial") {
            cfg.basis.nvc_kind = NvcKind::Polynomial;
          } else {
            throw fail(v, "nvc_kind must be \"spline\" or \"polynomial\"");
          }
        } else if (key == "nvc_size") {
          cfg.basis.nvc_size = static_cast<int>(integer(v));
        } else {
          throw fail(v, "unknown key '" + key + "' in [basis]");
        }
      } else if (name == "model") {
        if (key == "mode") {
          cfg.mode = parse_select_mode(str(v));
        } else if (key == "cost") {
          cfg.selection.cost = parse_cost_kind(str(v));
        } else if (key == "replicates") {
          cfg.mc.replicates = static_cast<int>(integer(v));
        } else if (key == "workers") {
          cfg.mc.workers = static_cast<int>(std::max(1LL, integer(v)));
        } else if (key == "force_identity") {
          cfg.mc.force_identity = boolean(v);
        } else if (key == "seed") {
          cfg.seed = static_cast<std::uint64_t>(integer(v));
        } else if (key == "tol_accept") {
          cfg.selection.tol_accept = num(v);
        } else if (key == "tol_outer") {
          cfg.selection.tol_outer = num(v);
        } else if (key == "tol_optimizer") {
          cfg.selection.optimizer.rel_tol = num(v);
        } else if (key == "max_sweeps") {
          cfg.selection.max_sweeps = static_cast<int>(integer(v));
        } else if (key == "intercept") {
          cfg.intercept_types = types(v);
        } else if (key == "allow_nonconverged") {
          cfg.allow_nonconverged = boolean(v);
        } else {
          throw fail(v, "unknown key '" + key + "' in [model]");
        }
      } else if (name.rfind("covariate.", 0) == 0) {
        if (key != "types") throw fail(v, "unknown key '" + key + "' in [" + name + "]");
      } else if (name == "output") {
        if (key != "dir") throw fail(v, "unknown key '" + key + "' in [output]");
        cfg.out_dir = str(v);
      } else {
        throw fail(v, "key '" + key + "' outside a known section");
      }
    }
    if (name.rfind("covariate.", 0) == 0) {
      CovariateConfig c;
      c.name = name.substr(10);
      if (c.name.size() >= 2 && c.name.front() == '"' && c.name.back() == '"') c.name = c.name.substr(1, c.name.size() - 2);
      if (auto it = keys.find("types"); it != keys.end()) c.types = types(it->second);
      cfg.covariates.push_back(std::move(c));
    } else if (!name.empty() && name != "data" && name != "basis" && name != "model" && name != "output") {
      throw InputError(source + ": unknown section [" + name + "]");
    }
  }
  if (!cfg.data_path.empty() && !base_dir.empty() && std::filesystem::path(cfg.data_path).is_relative()) {
    cfg.data_path = (std::filesystem::path(base_dir) / cfg.data_path).string();
  }
  for (const auto& c : cfg.covariates) cfg.schema.covariates.push_back(c.name);
  return cfg;
}

FitConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open config '" + path + "'");
  return parse_config(in, std::filesystem::path(path).parent_path().string(), path);
}

// ---------------------------------------------------------------- fit

FitRun run_fit(const Dataset& data, const FitConfig& config, std::ostream* trace) {
  config.validate();
  const auto t0 = std::chrono::steady_clock::now();
  FitRun run;
  run.config = config;
  run.row_ids = data.site_id;

  ModelInput input;
  input.y = data.y;
  input.intercept_allowed = config.intercept_types;
  std::map<std::string, Eigen::Index> site_index;
  std::vector<Site> sites;
  for (Eigen::Index i = 0; i < data.size(); ++i) {
    const auto& id = data.site_id[static_cast<std::size_t>(i)];
    auto [it, inserted] = site_index.emplace(id, static_cast<Eigen::Index>(sites.size()));
    if (inserted) {
      sites.push_back({data.east(i), data.north(i)});
      run.site_ids.push_back(id);
    } else {
      const Site& s = sites[static_cast<std::size_t>(it->second)];
      if (s.east != data.east(i) || s.north != data.north(i)) {
        throw InputError("row " + std::to_string(i + 1) + ": site '" + id + "' has coordinates that differ from an earlier row");
      }
    }
    input.site_of_row.push_back(it->second);
  }
  input.sites = SiteCoords(std::move(sites));
  for (const auto& c : config.covariates) {
    auto it = std::find(data.covariate_names.begin(), data.covariate_names.end(), c.name);
    if (it == data.covariate_names.end()) throw InputError("covariate '" + c.name + "' is not in the dataset");
    input.covariates.push_back({c.name, data.covariates.col(it - data.covariate_names.begin()), c.types});
  }
  for (std::size_t g = 0; g < data.group_names.size(); ++g) {
    input.groups.push_back(GroupTermSpec::from_labels(data.group_names[g], data.groups[g]));
  }

  run.model = prepare(input, config.basis);
  const PreparedModel& m = run.model;
  SelectionOptions options = config.selection;
  options.trace = trace;
  switch (config.mode) {
    case SelectMode::None:
      run.result = fit_fixed(m, richest_types(m), std::vector<bool>(m.groups.size(), true), options);
      break;
    case SelectMode::Simple:
      run.result = simple_select(m.ip, m.candidates, options);
      break;
    case SelectMode::MC: {
      McConfig mc = config.mc;
      mc.seed = config.seed;
      run.result = mc_select(m.ip, m.candidates, options, mc);
      break;
    }
  }
  run.table = coefficient_table(run.result.state, m.ip, m.designs, true);

  SavedModel& s = run.saved;
  s.seed = config.seed;
  s.mode = config.mode;
  s.cost_kind = config.selection.cost;
  s.cost = run.result.cost;
  s.q = run.result.q;
  s.loglik = run.result.state.loglik_r;
  s.sigma2 = run.result.state.sigma2_hat;
  s.converged = run.result.converged;
  s.n = m.ip.n;
  s.range = m.range;
  s.eigenvalues = m.moran.eigenvalues;
  s.site_ids = run.site_ids;
  s.site_basis = m.moran.vectors;
  const RemlState& st = run.result.state;
  for (std::size_t p = 0; p < m.terms.size(); ++p) {
    SavedTerm t;
    t.name = m.terms[p].name;
    t.type = run.result.types[p];
    t.b = st.b_hat(m.ip.fixed_column[p]);
    const VarianceParams vp = st.theta.params(p, m.ip);
    t.tau_s = vp.tau_s;
    t.alpha = vp.alpha;
    t.tau_n = vp.tau_n;
    for (std::size_t b = 0; b < m.ip.layout[p].size(); ++b) {
      const BlockParams& bp = st.theta.blocks[p][b];
      if (!bp.active) continue;
      const DesignBlock& blk = m.ip.layout[p][b];
      const Eigen::VectorXd w = blk.v(bp.tau, bp.alpha).cwiseProduct(st.u_hat[p][b]);
      if (blk.kind == BlockKind::Spatial) t.spatial_weights = w;
      if (blk.kind == BlockKind::NonSpatial) t.nvc_weights = w;
    }
    if (m.nvc[p] && t.nvc_weights.size() > 0) {
      t.nvc = *m.nvc[p];
      t.nvc->vectors.resize(0, 0);
    }
    s.terms.push_back(std::move(t));
  }
  for (std::size_t g = 0; g < m.groups.size(); ++g) {
    const std::size_t term = m.terms.size() + g;
    SavedGroup sg;
    sg.name = m.groups[g].name;
    sg.levels = m.groups[g].levels;
    sg.included = st.theta.blocks[term][0].active;
    if (sg.included) {
      sg.tau = st.theta.blocks[term][0].tau;
      sg.effects = group_effects(st, term);
    }
    s.groups.push_back(std::move(sg));
  }
  run.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return run;
}

// ---------------------------------------------------------------- model file

void write_model_json(std::ostream& out, const SavedModel& m) {
  json j;
  j["format"] = "samsel-model";
  j["version"] = 1;
  j["seed"] = m.seed;
  j["mode"] = std::string(to_string(m.mode));
  j["cost_kind"] = std::string(to_string(m.cost_kind));
  j["cost"] = number(m.cost);
  j["q"] = m.q;
  j["loglik"] = number(m.loglik);
  j["sigma2"] = number(m.sigma2);
  j["converged"] = m.converged;
  j["n"] = m.n;
  j["range"] = m.range;
  j["eigenvalues"] = to_vector(m.eigenvalues);
  json sites = json::array();
  for (std::size_t i = 0; i < m.site_ids.size(); ++i) {
    json row = json::array();
    for (Eigen::Index k = 0; k < m.site_basis.cols(); ++k) row.push_back(m.site_basis(static_cast<Eigen::Index>(i), k));
    sites.push_back({{"id", m.site_ids[i]}, {"basis", row}});
  }
  j["sites"] = sites;
  json terms = json::array();
  for (const auto& t : m.terms) {
    json jt{{"name", t.name},   {"type", std::string(to_string(t.type))},
            {"b", t.b},         {"tau_s", t.tau_s},
            {"alpha", t.alpha}, {"tau_n", t.tau_n},
            {"spatial_weights", to_vector(t.spatial_weights)},
            {"nvc_weights", to_vector(t.nvc_weights)}};
    if (t.nvc) {
      jt["nvc"] = {{"kind", t.nvc->kind == NvcKind::NaturalSpline ? "spline" : "polynomial"},
                   {"knots", t.nvc->knots},
                   {"lower", t.nvc->lower},
                   {"upper", t.nvc->upper},
                   {"means", to_vector(t.nvc->means.transpose())},
                   {"scales", to_vector(t.nvc->scales.transpose())}};
    }
    terms.push_back(jt);
  }
  j["terms"] = terms;
  json groups = json::array();
  for (const auto& g : m.groups) {
    groups.push_back({{"name", g.name},
                      {"included", g.included},
                      {"tau", g.tau},
                      {"levels", g.levels},
                      {"effects", to_vector(g.effects)}});
  }
  j["groups"] = groups;
  out << j.dump(1) << '\n';
}

SavedModel read_model_json(std::istream& in) {
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw InputError(std::string("model file is not valid JSON: ") + e.what());
  }
  try {
    if (j.at("format") != "samsel-model") throw InputError("not a samsel model file");
    SavedModel m;
    m.seed = j.at("seed").get<std::uint64_t>();
    m.mode = parse_select_mode(j.at("mode").get<std::string>());
    m.cost_kind = parse_cost_kind(j.at("cost_kind").get<std::string>());
    m.cost = j.at("cost").is_null() ? NAN : j.at("cost").get<double>();
    m.q = j.at("q").get<int>();
    m.loglik = j.at("loglik").is_null() ? NAN : j.at("loglik").get<double>();
    m.sigma2 = j.at("sigma2").is_null() ? NAN : j.at("sigma2").get<double>();
    m.converged = j.at("converged").get<bool>();
    m.n = j.at("n").get<Eigen::Index>();
    m.range = j.at("range").get<double>();
    m.eigenvalues = from_json_vector(j.at("eigenvalues"));
    const auto& sites = j.at("sites");
    const auto l = m.eigenvalues.size();
    m.site_basis.resize(static_cast<Eigen::Index>(sites.size()), l);
    for (std::size_t i = 0; i < sites.size(); ++i) {
      m.site_ids.push_back(sites[i].at("id").get<std::string>());
      const Eigen::VectorXd row = from_json_vector(sites[i].at("basis"));
      if (row.size() != l) throw InputError("model file: basis row of site '" + m.site_ids.back() + "' has the wrong length");
      m.site_basis.row(static_cast<Eigen::Index>(i)) = row.transpose();
    }
    for (const auto& jt : j.at("terms")) {
      SavedTerm t;
      t.name = jt.at("name").get<std::string>();
      t.type = parse_effect_type(jt.at("type").get<std::string>());
      t.b = jt.at("b").get<double>();
      t.tau_s = jt.at("tau_s").get<double>();
      t.alpha = jt.at("alpha").get<double>();
      t.tau_n = jt.at("tau_n").get<double>();
      t.spatial_weights = from_json_vector(jt.at("spatial_weights"));
      t.nvc_weights = from_json_vector(jt.at("nvc_weights"));
      if (t.spatial_weights.size() != 0 && t.spatial_weights.size() != l) {
        throw InputError("model file: spatial weights of '" + t.name + "' do not match the basis");
      }
      if (jt.contains("nvc")) {
        const auto& jn = jt.at("nvc");
        NvcBasis b;
        b.kind = jn.at("kind") == "spline" ? NvcKind::NaturalSpline : NvcKind::Polynomial;
        b.knots = jn.at("knots").get<std::vector<double>>();
        b.lower = jn.at("lower").get<double>();
        b.upper = jn.at("upper").get<double>();
        b.means = from_json_vector(jn.at("means")).transpose();
        b.scales = from_json_vector(jn.at("scales")).transpose();
        if (b.means.size() != t.nvc_weights.size() || b.scales.size() != b.means.size()) {
          throw InputError("model file: NVC metadata of '" + t.name + "' is inconsistent");
        }
        t.nvc = std::move(b);
      } else if (t.nvc_weights.size() != 0) {
        throw InputError("model file: term '" + t.name + "' has NVC weights but no basis metadata");
      }
      m.terms.push_back(std::move(t));
    }
    for (const auto& jg : j.at("groups")) {
      SavedGroup g;
      g.name = jg.at("name").get<std::string>();
      g.included = jg.at("included").get<bool>();
      g.tau = jg.at("tau").get<double>();
      g.levels = jg.at("levels").get<std::vector<std::string>>();
      g.effects = from_json_vector(jg.at("effects"));
      if (g.included && g.effects.size() != static_cast<Eigen::Index>(g.levels.size())) {
        throw InputError("model file: group '" + g.name + "' has the wrong number of effects");
      }
      m.groups.push_back(std::move(g));
    }
    if (m.terms.empty()) throw InputError("model file has no terms");
    return m;
  } catch (const json::exception& e) {
    throw InputError(std::string("model file is malformed: ") + e.what());
  }
}

void write_coefficients_csv(std::ostream& out, const FitRun& run) {
  CsvTable t;
  t.header = {"row", "id"};
  for (const auto& tc : run.table.terms) {
    const std::string name = run.model.term_name(tc.term);
    for (const char* suffix : {"_est", "_se", "_t", "_p"}) t.header.push_back(name + suffix);
  }
  for (Eigen::Index i = 0; i < run.model.ip.n; ++i) {
    std::vector<std::string> r{std::to_string(i + 1), run.row_ids[static_cast<std::size_t>(i)]};
    for (const auto& tc : run.table.terms) {
      r.push_back(format_number(tc.estimate(i)));
      r.push_back(format_number(tc.se(i)));
      r.push_back(format_number(tc.t(i)));
      r.push_back(format_number(tc.p_value(i)));
    }
    t.rows.push_back(std::move(r));
  }
  write_csv(out, t);
}

void write_report_json(std::ostream& out, const FitRun& run, bool include_timing) {
  const SelectionResult& r = run.result;
  const PreparedModel& m = run.model;
  json j;
  j["mode"] = std::string(to_string(run.config.mode));
  j["cost_kind"] = std::string(to_string(run.config.selection.cost));
  j["seed"] = run.config.seed;
  j["n"] = m.ip.n;
  j["sites"] = run.site_ids.size();
  j["basis_size"] = m.moran.size();
  j["range"] = m.range;
  j["cost"] = number(r.cost);
  j["q"] = r.q;
  j["loglik"] = number(r.state.loglik_r);
  j["sigma2"] = number(r.state.sigma2_hat);
  j["converged"] = r.converged;
  j["sweeps"] = r.sweeps;
  j["trials"] = r.trials;
  j["accepted"] = r.accepted;
  j["warnings"] = r.state.warnings;
  json cost_trace = json::array();
  for (double c : r.cost_trace) cost_trace.push_back(number(c));
  j["cost_trace"] = cost_trace;
  json sweep_costs = json::array();
  for (double c : r.sweep_costs) sweep_costs.push_back(number(c));
  j["sweep_costs"] = sweep_costs;

  json terms = json::array();
  for (std::size_t p = 0; p < m.term_count(); ++p) {
    json jt;
    jt["name"] = m.term_name(p);
    jt["group"] = m.candidates[p].is_group;
    jt["allowed"] = type_names(m.candidates[p].allowed);
    jt["included"] = static_cast<bool>(r.included[p]);
    if (!m.candidates[p].is_group) {
      jt["type"] = std::string(to_string(r.types[p]));
      const VarianceParams vp = r.state.theta.params(p, m.ip);
      jt["tau_s"] = vp.tau_s;
      jt["alpha"] = vp.alpha;
      jt["tau_n"] = vp.tau_n;
    } else {
      jt["tau"] = r.state.theta.blocks[p][0].tau;
    }
    for (const auto& tc : run.table.terms) {
      if (tc.term != p) continue;
      std::vector<double> v(tc.estimate.data(), tc.estimate.data() + tc.estimate.size());
      jt["estimate_summary"] = {{"min", quantile7(v, 0.0)},    {"q1", quantile7(v, 0.25)},
                                {"median", quantile7(v, 0.5)}, {"q3", quantile7(v, 0.75)},
                                {"max", quantile7(v, 1.0)}};
    }
    terms.push_back(jt);
  }
  j["terms"] = terms;
  json groups = json::array();
  for (const auto& g : run.saved.groups) {
    json eff = json::object();
    for (std::size_t k = 0; k < g.levels.size() && static_cast<Eigen::Index>(k) < g.effects.size(); ++k) {
      eff[g.levels[k]] = g.effects(static_cast<Eigen::Index>(k));
    }
    groups.push_back({{"name", g.name}, {"included", g.included}, {"tau", g.tau}, {"effects", eff}});
  }
  j["groups"] = groups;
  if (run.config.mode == SelectMode::MC) {
    json runs = json::array();
    for (std::size_t g = 0; g < r.run_costs.size(); ++g) {
      runs.push_back({{"cost", number(r.run_costs[g])}, {"failed", static_cast<bool>(r.run_failed[g])},
                      {"order", r.sequences[g]}});
    }
    j["mc"] = {{"replicates", run.config.mc.replicates}, {"best_run", r.best_run}, {"runs", runs}};
  }
  if (include_timing) {
    j["timing"] = {{"basis_seconds", m.basis_seconds},
                   {"precompute_seconds", m.precompute_seconds},
                   {"total_seconds", run.seconds}};
  }
  out << j.dump(1) << '\n';
}

// ---------------------------------------------------------------- prediction

PredictionRequest read_request(const CsvTable& table, const SavedModel& model, const std::string& id_column) {
  PredictionRequest req;
  const std::size_t id = table.column(id_column);
  std::vector<std::size_t> cols;
  for (std::size_t p = 1; p < model.terms.size(); ++p) cols.push_back(table.column(model.terms[p].name));
  std::vector<std::optional<std::size_t>> gcols;
  for (const auto& g : model.groups) {
    if (table.has_column(g.name)) {
      gcols.emplace_back(table.column(g.name));
    } else if (g.included) {
      throw InputError("request is missing group column '" + g.name + "'");
    } else {
      gcols.emplace_back();
    }
  }
  const auto n = static_cast<Eigen::Index>(table.rows.size());
  req.x.resize(n, static_cast<Eigen::Index>(cols.size()));
  req.group_levels.assign(model.groups.size(), {});
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& r = table.rows[static_cast<std::size_t>(i)];
    const auto row = static_cast<std::size_t>(i + 1);
    req.site_id.push_back(r[id]);
    for (std::size_t j = 0; j < cols.size(); ++j) {
      req.x(i, static_cast<Eigen::Index>(j)) = parse_cell(r[cols[j]], "request", row, model.terms[j + 1].name);
    }
    for (std::size_t g = 0; g < gcols.size(); ++g) req.group_levels[g].push_back(gcols[g] ? r[*gcols[g]] : "");
  }
  return req;
}

Prediction predict(const SavedModel& model, const PredictionRequest& request) {
  std::map<std::string, Eigen::Index> site;
  for (std::size_t i = 0; i < model.site_ids.size(); ++i) site.emplace(model.site_ids[i], static_cast<Eigen::Index>(i));
  const auto n = static_cast<Eigen::Index>(request.site_id.size());
  if (request.x.cols() + 1 != static_cast<Eigen::Index>(model.terms.size())) {
    throw InputError("request covariates do not match the model terms");
  }
  Prediction out;
  out.y_hat = Eigen::VectorXd::Zero(n);
  out.unseen.assign(static_cast<std::size_t>(n), 0);
  std::vector<Eigen::Index> rows(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    auto it = site.find(request.site_id[static_cast<std::size_t>(i)]);
    if (it == site.end()) {
      throw InputError("request row " + std::to_string(i + 1) + ": unknown site id '" +
                       request.site_id[static_cast<std::size_t>(i)] + "'");
    }
    rows[static_cast<std::size_t>(i)] = it->second;
  }
  for (std::size_t p = 0; p < model.terms.size(); ++p) {
    const SavedTerm& t = model.terms[p];
    const Eigen::VectorXd x = p == 0 ? Eigen::VectorXd::Ones(n) : Eigen::VectorXd(request.x.col(static_cast<Eigen::Index>(p - 1)));
    Eigen::VectorXd beta = Eigen::VectorXd::Constant(n, t.b);
    if (t.spatial_weights.size() > 0) {
      const Eigen::VectorXd site_part = model.site_basis * t.spatial_weights;
      for (Eigen::Index i = 0; i < n; ++i) beta(i) += site_part(rows[static_cast<std::size_t>(i)]);
    }
    if (t.nvc_weights.size() > 0) beta += t.nvc->evaluate(x) * t.nvc_weights;
    out.y_hat += beta.cwiseProduct(x);
  }
  for (std::size_t g = 0; g < model.groups.size(); ++g) {
    const SavedGroup& sg = model.groups[g];
    if (!sg.included) continue;
    std::map<std::string, Eigen::Index> level;
    for (std::size_t k = 0; k < sg.levels.size(); ++k) level.emplace(sg.levels[k], static_cast<Eigen::Index>(k));
    for (Eigen::Index i = 0; i < n; ++i) {
      auto it = level.find(request.group_levels[g][static_cast<std::size_t>(i)]);
      if (it == level.end()) {
        ++out.unseen[static_cast<std::size_t>(i)];
      } else {
        out.y_hat(i) += sg.effects(it->second);
      }
    }
  }
  return out;
}

void write_predictions_csv(std::ostream& out, const PredictionRequest& request, const Prediction& prediction) {
  CsvTable t;
  t.header = {"row", "id", "prediction", "unseen_levels"};
  for (Eigen::Index i = 0; i < prediction.y_hat.size(); ++i) {
    t.rows.push_back({std::to_string(i + 1), request.site_id[static_cast<std::size_t>(i)],
                      format_number(prediction.y_hat(i)), std::to_string(prediction.unseen[static_cast<std::size_t>(i)])});
  }
  write_csv(out, t);
}

// ---------------------------------------------------------------- experiments

void write_experiment_csv(std::ostream& out, const ExperimentReport& report) {
  CsvTable t;
  t.header = {"model", "class", "metric", "value"};
  for (const auto& c : report.cells) {
    const std::string model(to_string(c.model));
    const std::string cls(to_string(c.cls));
    t.rows.push_back({model, cls, "rmse", format_number(c.rmse)});
    t.rows.push_back({model, cls, "bias", format_number(c.bias)});
    t.rows.push_back({model, cls, "se_rmse", format_number(c.se_rmse)});
    t.rows.push_back({model, cls, "se_bias", format_number(c.se_bias)});
    t.rows.push_back({model, cls, "fits", std::to_string(c.fits)});
    t.rows.push_back({model, cls, "failures", std::to_string(c.failures)});
  }
  for (const auto& f : report.frequencies) {
    t.rows.push_back({std::string(to_string(f.model)), std::string(to_string(f.cls)),
                      "chosen_" + std::string(to_string(f.type)), std::to_string(f.count)});
  }
  write_csv(out, t);
}

void write_experiment_json(std::ostream& out, const ExperimentReport& report, bool include_timing) {
  const ExperimentConfig& c = report.config;
  json j;
  std::vector<std::string> models;
  for (auto m : c.models) models.emplace_back(to_string(m));
  j["config"] = {{"n", c.dgp.n},       {"p", c.dgp.p},          {"tau0", c.dgp.tau0},
                 {"tau1", c.dgp.tau1}, {"tau2", c.dgp.tau2},    {"seed", c.dgp.seed},
                 {"iterations", c.iterations}, {"models", models}, {"replicates", c.replicates},
                 {"l_max", c.basis.l_max}, {"nvc_size", c.basis.nvc_size}};
  json cells = json::array();
  for (const auto& cell : report.cells) {
    cells.push_back({{"model", std::string(to_string(cell.model))},
                     {"class", std::string(to_string(cell.cls))},
                     {"rmse", number(cell.rmse)},
                     {"bias", number(cell.bias)},
                     {"se_rmse", number(cell.se_rmse)},
                     {"se_bias", number(cell.se_bias)},
                     {"fits", cell.fits},
                     {"failures", cell.failures}});
  }
  j["cells"] = cells;
  json freq = json::array();
  for (const auto& f : report.frequencies) {
    freq.push_back({{"model", std::string(to_string(f.model))},
                    {"class", std::string(to_string(f.cls))},
                    {"type", std::string(to_string(f.type))},
                    {"count", f.count}});
  }
  j["frequencies"] = freq;
  json records = json::array();
  for (const auto& r : report.records) {
    json jr{{"iteration", r.iteration}, {"seed", r.seed},       {"model", std::string(to_string(r.model))},
            {"ok", r.ok},               {"types", type_names(r.types)}, {"cost", number(r.cost)},
            {"converged", r.converged}};
    if (!r.error.empty()) jr["error"] = r.error;
    if (include_timing) jr["seconds"] = r.seconds;
    records.push_back(jr);
  }
  j["records"] = records;
  if (include_timing) {
    json secs = json::object();
    for (std::size_t k = 0; k < c.models.size(); ++k) secs[std::string(to_string(c.models[k]))] = report.model_seconds[k];
    j["model_seconds"] = secs;
  }
  out << j.dump(1) << '\n';
}

void write_timing_csv(std::ostream& out, const std::vector<TimingRow>& rows) {
  CsvTable t;
  t.header = {"n",          "repeats",           "basis_size",    "range",         "basis_seconds",
              "precompute_seconds", "selection_seconds", "sweep_seconds", "first_sweep_seconds", "total_seconds",
              "sweeps"};
  for (const auto& r : rows) {
    t.rows.push_back({std::to_string(r.n), std::to_string(r.repeats), std::to_string(r.basis_size),
                      format_number(r.range), format_number(r.basis_seconds), format_number(r.precompute_seconds),
                      format_number(r.selection_seconds), format_number(r.sweep_seconds),
                      format_number(r.first_sweep_seconds), format_number(r.total_seconds), std::to_string(r.sweeps)});
  }
  write_csv(out, t);
}

void write_synthetic_csv(std::ostream& out, const SyntheticData& data) {
  CsvTable t;
  t.header = {"id", "east", "north", "y"};
  const Eigen::Index p = data.x_const.cols();
  for (Eigen::Index j = 0; j < p; ++j) {
    const std::string k = std::to_string(j + 1);
    t.header.insert(t.header.end(), {"x" + k, "xs" + k, "xn" + k});
  }
  t.header.push_back("true_intercept");
  for (Eigen::Index j = 0; j < p; ++j) {
    const std::string k = std::to_string(j + 1);
    t.header.insert(t.header.end(), {"true_xs" + k, "true_xn" + k});
  }
  for (Eigen::Index i = 0; i < data.y.size(); ++i) {
    const Site& s = data.coords[static_cast<std::size_t>(i)];
    std::vector<std::string> r{"s" + std::to_string(i + 1), format_number(s.east), format_number(s.north),
                               format_number(data.y(i))};
    for (Eigen::Index j = 0; j < p; ++j) {
      r.push_back(format_number(data.x_const(i, j)));
      r.push_back(format_number(data.x_svc(i, j)));
      r.push_back(format_number(data.x_nvc(i, j)));
    }
    r.push_back(format_number(data.beta0(i)));
    for (Eigen::Index j = 0; j < p; ++j) {
      r.push_back(format_number(data.beta_svc(i, j)));
      r.push_back(format_number(data.beta_nvc(i, j)));
    }
    t.rows.push_back(std::move(r));
  }
  write_csv(out, t);
}

}  // namespace samsel
