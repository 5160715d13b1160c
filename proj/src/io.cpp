#include "arbor/io.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

#include "arbor/newick.hpp"

namespace arbor {

namespace {

std::string fmt17(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

double parse_number(const std::string& tok, const std::string& where) {
  if (tok == "inf") return std::numeric_limits<double>::infinity();
  char* end = nullptr;
  const double v = std::strtod(tok.c_str(), &end);
  if (tok.empty() || end != tok.c_str() + tok.size())
    throw DataError("invalid number '" + tok + "' in " + where);
  return v;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  out << content;
}

std::string file_digest(const std::string& path) {
  const std::string bytes = read_text_file(path);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[32];
  std::snprintf(buf, sizeof(buf), "fnv1a64:%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// ---------------------------------------------------------------------------
// CSV datasets
// ---------------------------------------------------------------------------

Dataset read_csv(const std::string& path, std::optional<int> states) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw DataError(path + ": missing header row");
  Dataset data;
  data.columns = split_csv_line(line);
  std::vector<std::vector<double>> rows;
  long lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const std::vector<std::string> toks = split_csv_line(line);
    if (toks.size() != data.columns.size())
      throw DataError(path + ":" + std::to_string(lineno) + ": wrong number of fields");
    std::vector<double> row;
    for (const std::string& t : toks)
      row.push_back(parse_number(t, path + ":" + std::to_string(lineno)));
    rows.push_back(std::move(row));
  }
  data.values.resize(static_cast<long>(rows.size()), static_cast<long>(data.columns.size()));
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t c = 0; c < rows[r].size(); ++c) data.values(r, c) = rows[r][c];
  if (states) {
    data.kind = Dataset::Kind::discrete;
    data.d = *states;
  } else {
    // Infer: integer-valued columns are treated as discrete states.
    bool integral = data.values.size() > 0;
    for (long r = 0; r < data.values.rows() && integral; ++r)
      for (long c = 0; c < data.values.cols() && integral; ++c)
        if (data.values(r, c) != std::floor(data.values(r, c))) integral = false;
    if (integral && data.values.size() > 0 && data.values.minCoeff() >= 0 &&
        data.values.maxCoeff() < 64) {
      data.kind = Dataset::Kind::discrete;
      data.d = static_cast<int>(data.values.maxCoeff()) + 1;
      if (data.d < 2) data.d = 2;
    } else {
      data.kind = Dataset::Kind::continuous;
    }
  }
  data.validate();
  return data;
}

void write_csv(const Dataset& data, const std::string& path) {
  std::ostringstream out;
  for (std::size_t c = 0; c < data.columns.size(); ++c) {
    if (c) out << ',';
    out << data.columns[c];
  }
  out << '\n';
  const bool discrete = data.kind == Dataset::Kind::discrete;
  for (long r = 0; r < data.n(); ++r) {
    for (long c = 0; c < data.values.cols(); ++c) {
      if (c) out << ',';
      if (discrete)
        out << static_cast<long long>(std::llround(data.values(r, c)));
      else
        out << fmt17(data.values(r, c));
    }
    out << '\n';
  }
  write_text_file(path, out.str());
}

// ---------------------------------------------------------------------------
// Distance CSV
// ---------------------------------------------------------------------------

DistanceMatrix read_distance_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw DataError(path + ": missing header row");
  const std::vector<std::string> header = split_csv_line(line);
  const int m = static_cast<int>(header.size()) - 1;
  if (m < 1) throw DataError(path + ": malformed distance header");
  DistanceMatrix D;
  D.d.resize(m, m);
  int r = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const std::vector<std::string> toks = split_csv_line(line);
    if (static_cast<int>(toks.size()) != m + 1 || r >= m)
      throw DataError(path + ": malformed distance row");
    for (int c = 0; c < m; ++c) D.d(r, c) = parse_number(toks[c + 1], path);
    ++r;
  }
  if (r != m) throw DataError(path + ": distance matrix must be square");
  D.validate();
  return D;
}

void write_distance_csv(const DistanceMatrix& D, const std::string& path) {
  std::ostringstream out;
  const int m = D.size();
  out << "id";
  for (int j = 1; j <= m; ++j) out << ',' << j;
  out << '\n';
  for (int i = 0; i < m; ++i) {
    out << (i + 1);
    for (int j = 0; j < m; ++j) out << ',' << fmt17(D.d(i, j));
    out << '\n';
  }
  write_text_file(path, out.str());
}

// ---------------------------------------------------------------------------
// Trees
// ---------------------------------------------------------------------------

Json tree_to_json(const LeafLabeledTree& t, const EdgeLengths& len) {
  const std::map<int, std::string> names = vertex_names(t);
  Json j;
  j["vertices"] = Json::array();
  for (int v : canonical_order(t)) j["vertices"].push_back(names.at(v));
  j["edges"] = Json::array();
  j["lengths"] = Json::object();
  for (const Edge& e : t.edges()) {
    j["edges"].push_back({names.at(e.u), names.at(e.v)});
    if (auto it = len.find(e); it != len.end())
      j["lengths"][names.at(e.u) + "-" + names.at(e.v)] = it->second;
  }
  j["labels"] = Json::object();
  for (int k = 1; k <= t.leaf_count(); ++k) j["labels"][std::to_string(k)] = names.at(k);
  return j;
}

namespace {

std::map<std::string, int> invert_names(const LeafLabeledTree& t) {
  std::map<std::string, int> ids;
  for (const auto& [v, name] : vertex_names(t)) ids[name] = v;
  return ids;
}

}  // namespace

std::pair<LeafLabeledTree, EdgeLengths> tree_from_json(const Json& j) {
  // Vertex names follow the same scheme as tree_to_json; rebuild ids.
  std::map<std::string, int> id;
  int m = 0;
  for (const auto& name : j.at("vertices")) {
    const std::string s = name.get<std::string>();
    if (s.empty()) throw DataError("empty vertex name");
    if (s[0] != 'h') ++m;
  }
  int next = m + 1;
  for (const auto& name : j.at("vertices")) {
    const std::string s = name.get<std::string>();
    if (s[0] == 'h')
      id[s] = next++;
    else
      id[s] = std::stoi(s);
  }
  std::vector<Edge> edges;
  for (const auto& e : j.at("edges"))
    edges.emplace_back(id.at(e.at(0).get<std::string>()), id.at(e.at(1).get<std::string>()));
  LeafLabeledTree t = LeafLabeledTree::make(m, std::move(edges));
  EdgeLengths len;
  if (j.contains("lengths"))
    for (const auto& [key, val] : j.at("lengths").items()) {
      const auto dash = key.find('-');
      if (dash == std::string::npos) throw DataError("bad length key " + key);
      len[Edge(id.at(key.substr(0, dash)), id.at(key.substr(dash + 1)))] = val.get<double>();
    }
  return {std::move(t), std::move(len)};
}

// ---------------------------------------------------------------------------
// Models
// ---------------------------------------------------------------------------

Json model_to_json(const AnyParams& p) {
  Json j;
  if (const auto* g = std::get_if<GaussianParams>(&p)) {
    const std::map<int, std::string> names = vertex_names(g->tree);
    j["type"] = "gaussian";
    j["newick"] = newick_write(g->tree);
    Json corr = Json::object();
    for (const auto& [e, rho] : g->edge_corr)
      corr[names.at(e.u) + "-" + names.at(e.v)] = rho;
    j["edge_corr"] = std::move(corr);
    Json var = Json::object();
    for (const auto& [leaf, v] : g->leaf_var) var[std::to_string(leaf)] = v;
    j["leaf_var"] = std::move(var);
    return j;
  }
  const MarkovParams& q = std::get<MarkovParams>(p);
  const std::map<int, std::string> names = vertex_names(q.tree);
  j["type"] = "markov";
  j["newick"] = newick_write(q.tree);
  j["states"] = q.d;
  j["root"] = names.at(q.root());
  j["root_dist"] = std::vector<double>(q.root_dist.data(), q.root_dist.data() + q.d);
  Json trans = Json::object();
  const std::map<int, int> parent = rooted_parents(q.tree, q.root());
  for (const auto& [e, M] : q.transitions) {
    const int pu = parent.at(e.u) == e.v ? e.v : e.u;  // endpoint nearer the root
    const int pv = pu == e.u ? e.v : e.u;
    Json rows = Json::array();
    for (int a = 0; a < q.d; ++a) {
      Json row = Json::array();
      for (int b = 0; b < q.d; ++b) row.push_back(M(a, b));
      rows.push_back(std::move(row));
    }
    trans[names.at(pu) + "-" + names.at(pv)] = std::move(rows);
  }
  j["transitions"] = std::move(trans);
  return j;
}

AnyParams model_from_json(const Json& j) {
  const std::string type = j.at("type").get<std::string>();
  const NewickTree nt = newick_parse(j.at("newick").get<std::string>());
  const std::map<std::string, int> id = invert_names(nt.tree);
  const auto id_of = [&](const std::string& name) {
    auto it = id.find(name);
    if (it == id.end())
      throw DataError("unknown vertex name '" + name +
                      "': internal vertices are named h1,h2,.. in preorder of the "
                      "parsed newick (a degree-two top vertex is removed)");
    return it->second;
  };
  const auto edge_of = [&](const std::string& key) {
    const auto dash = key.find('-');
    if (dash == std::string::npos) throw DataError("bad edge key " + key);
    return Edge(id_of(key.substr(0, dash)), id_of(key.substr(dash + 1)));
  };
  if (type == "gaussian") {
    GaussianParams g;
    g.tree = nt.tree;
    for (const auto& [key, val] : j.at("edge_corr").items())
      g.edge_corr[edge_of(key)] = val.get<double>();
    if (j.contains("leaf_var"))
      for (const auto& [key, val] : j.at("leaf_var").items())
        g.leaf_var[std::stoi(key)] = val.get<double>();
    for (int i = 1; i <= g.tree.leaf_count(); ++i)
      if (!g.leaf_var.count(i)) g.leaf_var[i] = 1.0;
    g.validate();
    return g;
  }
  if (type != "markov") throw DataError("unknown model type '" + type + "'");
  MarkovParams q;
  q.d = j.at("states").get<int>();
  q.tree = nt.tree.with_root(id_of(j.at("root").get<std::string>()));
  const auto& rd = j.at("root_dist");
  q.root_dist.resize(q.d);
  for (int s = 0; s < q.d; ++s) q.root_dist(s) = rd.at(s).get<double>();
  for (const auto& [key, val] : j.at("transitions").items()) {
    Eigen::MatrixXd M(q.d, q.d);
    for (int a = 0; a < q.d; ++a)
      for (int b = 0; b < q.d; ++b) M(a, b) = val.at(a).at(b).get<double>();
    // Keys are written parent-child; rows index the parent, which is the
    // endpoint nearer the root, matching the storage convention.
    q.transitions[edge_of(key)] = std::move(M);
  }
  q.validate();
  return q;
}

AnyParams read_model_json(const std::string& path) {
  return model_from_json(Json::parse(read_text_file(path)));
}

void write_model_json(const AnyParams& p, const std::string& path) {
  write_text_file(path, model_to_json(p).dump(2) + "\n");
}

Json scored_model_to_json(const ScoredModel& s) {
  Json j;
  std::visit([&](const auto& q) { j["newick"] = newick_write(q.tree); }, s.model);
  j["params"] = model_to_json(s.model);
  j["loglik"] = s.loglik;
  j["dim"] = s.dim;
  j["bic"] = s.bic;
  j["trace"] = s.trace;
  j["a1_warning"] = s.a1_warning;
  return j;
}

// ---------------------------------------------------------------------------
// Invariant reports
// ---------------------------------------------------------------------------

std::string invariant_report_jsonl(const InvariantReport& rep) {
  std::ostringstream out;
  for (const TetradRecord& t : rep.tetrads) {
    Json j;
    j["kind"] = "tetrad";
    j["quartet"] = t.quartet;
    j["pairing"] = t.pairing;
    j["residual"] = t.residual;
    j["scale"] = t.scale;
    if (t.has_band) {
      j["boot_lo"] = t.boot_lo;
      j["boot_hi"] = t.boot_hi;
    }
    out << j.dump() << '\n';
  }
  for (const SplitRecord& s : rep.splits) {
    Json j;
    j["kind"] = "edge_split";
    j["side_a"] = s.side_a;
    j["singular_values"] = s.singular_values;
    j["rank_distance"] = s.rank_distance;
    out << j.dump() << '\n';
  }
  return out.str();
}

std::string invariant_report_table(const InvariantReport& rep) {
  std::ostringstream out;
  if (!rep.tetrads.empty()) {
    out << "tetrad residuals (split ab|cd: v_ac v_bd - v_ad v_bc)\n";
    char buf[160];
    for (const TetradRecord& t : rep.tetrads) {
      std::snprintf(buf, sizeof(buf), "  %2d %2d | %2d %2d   residual % .6e   scale %.6e",
                    t.quartet[0], t.quartet[1], t.quartet[2], t.quartet[3], t.residual, t.scale);
      out << buf;
      if (t.has_band) {
        std::snprintf(buf, sizeof(buf), "   band [% .3e, % .3e]", t.boot_lo, t.boot_hi);
        out << buf;
      }
      out << '\n';
    }
  }
  if (!rep.splits.empty()) {
    out << "edge flattening rank distances\n";
    for (const SplitRecord& s : rep.splits) {
      out << "  {";
      for (std::size_t i = 0; i < s.side_a.size(); ++i)
        out << (i ? "," : "") << s.side_a[i];
      char buf[64];
      std::snprintf(buf, sizeof(buf), "}  distance %.6e\n", s.rank_distance);
      out << buf;
    }
  }
  return out.str();
}

}  // namespace arbor
