#include "arbor/newick.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <limits>
#include <optional>

namespace arbor {

namespace {

struct PNode {
  int leaf_label = 0;  // > 0 for leaves
  std::vector<std::size_t> kids;
  std::optional<double> length;  // length of the edge to the parent
  std::size_t pos = 0;
};

class Parser {
 public:
  explicit Parser(std::string_view s) : s_(s) {}

  std::size_t parse_top() {
    std::size_t root = parse_subtree();
    skip_ws();
    expect(';');
    skip_ws();
    if (pos_ != s_.size()) throw ParseError(pos_, "trailing characters after ';'");
    return root;
  }

  std::vector<PNode> nodes;

 private:
  void skip_ws() {
    while (pos_ < s_.size() && std::isspace(static_cast<unsigned char>(s_[pos_]))) ++pos_;
  }

  char peek() {
    if (pos_ >= s_.size()) throw ParseError(pos_, "unexpected end of input");
    return s_[pos_];
  }

  void expect(char c) {
    if (pos_ >= s_.size() || s_[pos_] != c)
      throw ParseError(pos_, std::string("expected '") + c + "'");
    ++pos_;
  }

  std::string read_label() {
    std::size_t start = pos_;
    while (pos_ < s_.size()) {
      char c = s_[pos_];
      if (c == '(' || c == ')' || c == ',' || c == ':' || c == ';' ||
          std::isspace(static_cast<unsigned char>(c)))
        break;
      ++pos_;
    }
    return std::string(s_.substr(start, pos_ - start));
  }

  double read_length() {
    std::size_t start = pos_;
    const std::string tok = read_label();
    char* end = nullptr;
    const double v = std::strtod(tok.c_str(), &end);
    if (tok.empty() || end != tok.c_str() + tok.size())
      throw ParseError(start, "invalid edge length '" + tok + "'");
    if (std::isnan(v) || v < 0.0) throw ParseError(start, "edge length must be nonnegative");
    return v;
  }

  std::size_t parse_subtree() {
    skip_ws();
    const std::size_t at = pos_;
    std::size_t id = nodes.size();
    nodes.emplace_back();
    nodes[id].pos = at;
    if (peek() == '(') {
      expect('(');
      // parse_subtree() may reallocate `nodes`; never hold a reference
      // across the recursive call.
      std::size_t kid = parse_subtree();
      nodes[id].kids.push_back(kid);
      skip_ws();
      while (peek() == ',') {
        expect(',');
        kid = parse_subtree();
        nodes[id].kids.push_back(kid);
        skip_ws();
      }
      expect(')');
      skip_ws();
      read_label();  // internal labels are ignored
      if (nodes[id].kids.size() < 2)
        throw ParseError(at, "internal node must have at least two children");
    } else {
      const std::size_t lpos = pos_;
      const std::string label = read_label();
      if (label.empty()) throw ParseError(lpos, "expected a leaf label");
      char* end = nullptr;
      const long v = std::strtol(label.c_str(), &end, 10);
      if (end != label.c_str() + label.size() || v < 1)
        throw ParseError(lpos, "leaf label '" + label + "' is not a positive integer");
      nodes[id].leaf_label = static_cast<int>(v);
    }
    skip_ws();
    if (pos_ < s_.size() && s_[pos_] == ':') {
      expect(':');
      skip_ws();
      nodes[id].length = read_length();
    }
    return id;
  }

  std::string_view s_;
  std::size_t pos_ = 0;
};

std::string format_length(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.12g", v);
  return buf;
}

}  // namespace

NewickTree newick_parse(std::string_view text) {
  Parser parser(text);
  const std::size_t top = parser.parse_top();
  const std::vector<PNode>& nodes = parser.nodes;

  std::set<int> labels;
  for (const PNode& n : nodes)
    if (n.leaf_label > 0 && !labels.insert(n.leaf_label).second)
      throw ParseError(n.pos, "duplicate leaf label " + std::to_string(n.leaf_label));
  const int m = static_cast<int>(labels.size());
  for (const PNode& n : nodes)
    if (n.leaf_label > m)
      throw ParseError(n.pos, "leaf labels must be exactly 1.." + std::to_string(m));

  // Vertex ids: leaves keep their label; internal nodes get m+1,.. in
  // parse (preorder) order.
  std::vector<int> id(nodes.size(), 0);
  int next = m + 1;
  for (std::size_t k = 0; k < nodes.size(); ++k)
    id[k] = nodes[k].leaf_label > 0 ? nodes[k].leaf_label : next++;

  std::vector<Edge> edges;
  EdgeLengths lengths;
  for (std::size_t k = 0; k < nodes.size(); ++k)
    for (std::size_t c : nodes[k].kids) {
      const Edge e(id[k], id[c]);
      edges.push_back(e);
      if (nodes[c].length) lengths[e] = *nodes[c].length;
    }

  if (m == 1 && !edges.empty()) throw ParseError(0, "a single-leaf tree cannot have edges");

  // Suppress unlabeled degree-two vertices (covers the rooted top node of a
  // binary Newick string), summing lengths where present.
  int root = id[top];
  bool root_alive = true;
  for (;;) {
    std::map<int, std::vector<int>> adj;
    for (const Edge& e : edges) {
      adj[e.u].push_back(e.v);
      adj[e.v].push_back(e.u);
    }
    int victim = 0;
    for (const auto& [v, nb] : adj)
      if (v > m && nb.size() == 2) {
        victim = v;
        break;
      }
    if (victim == 0) break;
    const int a = adj[victim][0];
    const int b = adj[victim][1];
    const Edge ea(victim, a), eb(victim, b);
    std::optional<double> merged;
    if (lengths.count(ea) || lengths.count(eb)) {
      merged = 0.0;
      if (auto it = lengths.find(ea); it != lengths.end()) *merged += it->second;
      if (auto it = lengths.find(eb); it != lengths.end()) *merged += it->second;
    }
    lengths.erase(ea);
    lengths.erase(eb);
    std::erase_if(edges, [&](const Edge& e) { return e.u == victim || e.v == victim; });
    const Edge merged_edge(a, b);
    edges.push_back(merged_edge);
    if (merged) lengths[merged_edge] = *merged;
    if (victim == root) root_alive = false;
  }

  NewickTree out;
  try {
    out.tree = LeafLabeledTree::make(
        m, std::move(edges), root_alive ? std::optional<int>(root) : std::nullopt);
  } catch (const DataError& e) {
    throw ParseError(0, e.what());
  }
  out.lengths = std::move(lengths);
  return out;
}

namespace {

void write_node(const LeafLabeledTree& t, const EdgeLengths& len, int v, int parent,
                const std::map<int, int>& minleaf, std::string& out) {
  if (t.is_leaf(v)) {
    out += std::to_string(v);
  } else {
    std::vector<int> kids;
    for (int w : t.neighbors(v))
      if (w != parent) kids.push_back(w);
    std::sort(kids.begin(), kids.end(),
              [&](int a, int b) { return minleaf.at(a) < minleaf.at(b); });
    out += '(';
    for (std::size_t k = 0; k < kids.size(); ++k) {
      if (k) out += ',';
      write_node(t, len, kids[k], v, minleaf, out);
    }
    out += ')';
  }
  if (parent != 0)
    if (auto it = len.find(Edge(v, parent)); it != len.end()) {
      out += ':';
      out += format_length(it->second);
    }
}

void collect_min_leaf(const LeafLabeledTree& t, int v, int parent, std::map<int, int>& out) {
  int best = t.is_leaf(v) ? v : std::numeric_limits<int>::max();
  for (int w : t.neighbors(v))
    if (w != parent) {
      collect_min_leaf(t, w, v, out);
      best = std::min(best, out[w]);
    }
  out[v] = best;
}

}  // namespace

std::string newick_write(const LeafLabeledTree& t, const EdgeLengths& len) {
  const int m = t.leaf_count();
  if (m == 1) return "1;";
  if (t.internal_vertices().empty()) {
    // Single edge 1-2: emit an anonymous degree-two root that parsing folds
    // back into one edge.
    std::string out = "(1";
    if (auto it = len.find(Edge(1, 2)); it != len.end())
      out += ":" + format_length(it->second) + ",2:0);";
    else
      out += ",2);";
    return out;
  }
  int root = canonical_root(t);
  if (t.root() && !t.is_leaf(*t.root())) root = *t.root();
  std::map<int, int> minleaf;
  collect_min_leaf(t, root, 0, minleaf);
  std::string out;
  write_node(t, len, root, 0, minleaf, out);
  out += ';';
  return out;
}

}  // namespace arbor
