#include "sysmoe/structure.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

namespace sysmoe::structure {

int KinematicTree::find(const std::string& name) const {
  for (const TreeNode& n : nodes) {
    if (n.name == name) return n.id;
  }
  return -1;
}

KinematicTree KinematicTree::from_edges(const std::vector<std::pair<std::string, std::string>>& edges,
                                        int object_id, std::string object_name) {
  KinematicTree tree;
  tree.object_id = object_id;
  tree.object_name = std::move(object_name);
  for (const auto& [name, parent] : edges) {
    if (tree.find(name) >= 0) throw StructureError("duplicate body node '" + name + "'");
    tree.nodes.push_back({static_cast<int>(tree.nodes.size()), name, kRootParent});
  }
  int roots = 0;
  for (std::size_t i = 0; i < edges.size(); ++i) {
    const std::string& parent = edges[i].second;
    if (parent == "ROOT") {
      tree.root = static_cast<int>(i);
      ++roots;
      continue;
    }
    const int pid = tree.find(parent);
    if (pid < 0) throw StructureError("node '" + edges[i].first + "' has unknown parent '" + parent + "'");
    tree.nodes[i].parent = pid;
  }
  if (roots != 1) throw StructureError("tree must have exactly one ROOT node, found " + std::to_string(roots));
  tree.validate();
  return tree;
}

void KinematicTree::validate() const {
  if (nodes.empty()) throw StructureError("empty kinematic tree");
  int roots = 0;
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    if (nodes[i].id != static_cast<int>(i)) throw StructureError("node ids must be dense 0..n-1");
    if (nodes[i].parent == kRootParent) {
      ++roots;
    } else if (nodes[i].parent < 0 || nodes[i].parent >= static_cast<int>(nodes.size())) {
      throw StructureError("node '" + nodes[i].name + "' has an out-of-range parent");
    }
  }
  if (roots != 1) throw StructureError("tree must have exactly one root, found " + std::to_string(roots));
  if (nodes[static_cast<std::size_t>(root)].parent != kRootParent) throw StructureError("declared root has a parent");
  for (const TreeNode& n : nodes) {
    int cur = n.id;
    for (std::size_t hops = 0; cur != kRootParent; ++hops) {
      if (hops > nodes.size()) throw StructureError("cycle through node '" + n.name + "'");
      cur = nodes[static_cast<std::size_t>(cur)].parent;
    }
  }
}

BinaryTree lcrs_convert(const KinematicTree& tree) {
  tree.validate();
  const std::size_t n = tree.size();
  BinaryTree bt;
  bt.left.assign(n, -1);
  bt.right.assign(n, -1);
  bt.root = tree.root;
  std::vector<int> last_child(n, -1);
  for (const TreeNode& node : tree.nodes) {
    if (node.parent == kRootParent) continue;
    const auto p = static_cast<std::size_t>(node.parent);
    if (last_child[p] < 0) {
      bt.left[p] = node.id;
    } else {
      bt.right[static_cast<std::size_t>(last_child[p])] = node.id;
    }
    last_child[p] = node.id;
  }
  return bt;
}

namespace {

enum class Step { node, left, right };

// Walks the binary tree with an explicit stack; `pattern` picks the visit order per node.
template <class Pattern>
std::vector<int> walk(const BinaryTree& bt, Pattern pattern) {
  std::vector<int> order;
  struct Frame {
    int node;
    std::vector<Step> steps;
    std::size_t next = 0;
  };
  std::vector<Frame> stack;
  if (bt.root >= 0) stack.push_back({bt.root, pattern(bt, bt.root)});
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next == f.steps.size()) {
      stack.pop_back();
      continue;
    }
    const Step s = f.steps[f.next++];
    const auto u = static_cast<std::size_t>(f.node);
    if (s == Step::node) {
      order.push_back(f.node);
    } else {
      const int child = s == Step::left ? bt.left[u] : bt.right[u];
      if (child >= 0) stack.push_back({child, pattern(bt, child)});
    }
  }
  return order;
}

}  // namespace

std::vector<TraversalRanks> traversal_indices(const BinaryTree& bt) {
  const auto pre = walk(bt, [](const BinaryTree&, int) {
    return std::vector<Step>{Step::node, Step::left, Step::right};
  });
  const auto in = walk(bt, [](const BinaryTree& t, int u) {
    if (t.right[static_cast<std::size_t>(u)] >= 0) return std::vector<Step>{Step::right, Step::node, Step::left};
    return std::vector<Step>{Step::left, Step::node};
  });
  const auto post = walk(bt, [](const BinaryTree&, int) {
    return std::vector<Step>{Step::right, Step::left, Step::node};
  });
  std::vector<TraversalRanks> ranks(bt.size());
  for (std::size_t r = 0; r < pre.size(); ++r) ranks[static_cast<std::size_t>(pre[r])].pre = static_cast<int>(r);
  for (std::size_t r = 0; r < in.size(); ++r) ranks[static_cast<std::size_t>(in[r])].in = static_cast<int>(r);
  for (std::size_t r = 0; r < post.size(); ++r) ranks[static_cast<std::size_t>(post[r])].post = static_cast<int>(r);
  return ranks;
}

std::vector<int> object_order(const std::array<double, 2>& robot_pos,
                              const std::vector<std::array<double, 2>>& object_positions) {
  std::vector<std::size_t> idx(object_positions.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::vector<double> dist(object_positions.size());
  for (std::size_t i = 0; i < object_positions.size(); ++i) {
    dist[i] = std::hypot(object_positions[i][0] - robot_pos[0], object_positions[i][1] - robot_pos[1]);
  }
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return dist[a] < dist[b]; });
  std::vector<int> rank(object_positions.size());
  for (std::size_t r = 0; r < idx.size(); ++r) rank[idx[r]] = static_cast<int>(r) + 1;
  return rank;
}

StructIndex struct_index(const KinematicTree& tree, int object_rank, int node) {
  const int n = static_cast<int>(tree.size());
  if (node == kGlobalNode) return {object_rank, n, n, n};
  if (node < 0 || node >= n) {
    throw StructureError("body node " + std::to_string(node) + " not in tree '" + tree.object_name + "'");
  }
  const auto ranks = traversal_indices(lcrs_convert(tree));
  const auto& r = ranks[static_cast<std::size_t>(node)];
  return {object_rank, r.pre, r.in, r.post};
}

std::vector<StructIndex> struct_indices(const KinematicTree& tree, int object_rank) {
  const auto ranks = traversal_indices(lcrs_convert(tree));
  std::vector<StructIndex> out;
  out.reserve(ranks.size());
  for (const auto& r : ranks) out.push_back({object_rank, r.pre, r.in, r.post});
  return out;
}

StructTables StructTables::create(std::size_t d, std::size_t obj_capacity, std::size_t node_capacity,
                                  std::mt19937_64& rng, double stddev) {
  if (d % 4 != 0) throw CapacityError("structural embedding width " + std::to_string(d) + " not divisible by 4");
  std::normal_distribution<double> normal(0.0, stddev);
  auto table = [&](std::size_t rows) {
    num::Array a({rows, d / 4});
    for (double& v : a.data()) v = normal(rng);
    return num::Var(std::move(a), true);
  };
  StructTables t;
  t.obj = table(obj_capacity);
  t.pre = table(node_capacity);
  t.in = table(node_capacity);
  t.post = table(node_capacity);
  return t;
}

num::Var structural_embedding(const std::vector<StructIndex>& indices, const StructTables& tables) {
  auto rows = [&](const num::Var& table, const char* name, auto field) {
    std::vector<std::size_t> r;
    r.reserve(indices.size());
    for (const StructIndex& idx : indices) {
      const int v = idx.*field;
      if (v < 0 || static_cast<std::size_t>(v) >= table.dim(0)) {
        throw CapacityError(std::string("index ") + std::to_string(v) + " exceeds capacity " +
                            std::to_string(table.dim(0)) + " of structural table e_" + name);
      }
      r.push_back(static_cast<std::size_t>(v));
    }
    return num::gather_rows(table, r);
  };
  // Named locals: g++ 11 leaks earlier initializer-list elements if a later one throws.
  num::Var obj = rows(tables.obj, "obj", &StructIndex::obj);
  num::Var pre = rows(tables.pre, "pre", &StructIndex::pre);
  num::Var in = rows(tables.in, "in", &StructIndex::in);
  num::Var post = rows(tables.post, "post", &StructIndex::post);
  return num::concat({obj, pre, in, post}, 1);
}

std::vector<KinematicTree> parse_tree_text(const std::string& text) {
  struct Pending {
    std::string name = "robot";
    std::optional<std::array<double, 2>> position;
    std::vector<std::pair<std::string, std::string>> edges;
  };
  std::vector<Pending> objects;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    std::vector<std::string> tok;
    for (std::string t; ls >> t;) tok.push_back(t);
    if (tok.empty()) continue;
    auto where = [&] { return "line " + std::to_string(line_no) + ": "; };
    if (tok[0] == "object") {
      if (tok.size() != 2) throw StructureError(where() + "expected `object <name>`");
      objects.push_back({tok[1], std::nullopt, {}});
      continue;
    }
    if (objects.empty()) objects.emplace_back();
    if (tok[0] == "position") {
      if (tok.size() != 3) throw StructureError(where() + "expected `position <x> <y>`");
      try {
        objects.back().position = std::array<double, 2>{std::stod(tok[1]), std::stod(tok[2])};
      } catch (const std::exception&) {
        throw StructureError(where() + "invalid position");
      }
      continue;
    }
    if (tok.size() != 2) throw StructureError(where() + "expected `<node> <parent>`");
    objects.back().edges.emplace_back(tok[0], tok[1]);
  }
  if (objects.empty()) throw StructureError("tree text declares no nodes");
  std::vector<KinematicTree> trees;
  for (std::size_t i = 0; i < objects.size(); ++i) {
    auto t = KinematicTree::from_edges(objects[i].edges, static_cast<int>(i), objects[i].name);
    t.position = objects[i].position;
    trees.push_back(std::move(t));
  }
  return trees;
}

std::vector<KinematicTree> load_tree_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw StructureError("cannot open tree file " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_tree_text(ss.str());
}

std::string format_tree_text(const KinematicTree& tree) {
  std::ostringstream os;
  os << "object " << tree.object_name << '\n';
  if (tree.position) os << "position " << (*tree.position)[0] << ' ' << (*tree.position)[1] << '\n';
  for (const TreeNode& n : tree.nodes) {
    os << n.name << ' ' << (n.parent == kRootParent ? std::string("ROOT") : tree.nodes[static_cast<std::size_t>(n.parent)].name)
       << '\n';
  }
  return os.str();
}

}  // namespace sysmoe::structure
