#pragma once

// Kinematic trees, their left-child right-sibling binary form, traversal
// ranks and the structural embedding built from them.

#include <array>
#include <cstddef>
#include <map>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "sysmoe/numerics.hpp"

namespace sysmoe::structure {

class StructureError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class CapacityError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

inline constexpr int kRootParent = -1;
// Body-node id used by channels that are not attached to a physical body.
inline constexpr int kGlobalNode = -1;

struct TreeNode {
  int id = 0;
  std::string name;
  int parent = kRootParent;
};

struct KinematicTree {
  int object_id = 0;
  std::string object_name;
  std::vector<TreeNode> nodes;  // ids dense 0..n-1, declaration order
  int root = 0;
  std::optional<std::array<double, 2>> position;

  std::size_t size() const noexcept { return nodes.size(); }
  int find(const std::string& name) const;  // -1 when absent

  // Builds from (name, parent name) pairs; parent "ROOT" marks the root.
  static KinematicTree from_edges(const std::vector<std::pair<std::string, std::string>>& edges,
                                  int object_id = 0, std::string object_name = "robot");
  // Throws StructureError unless there is exactly one root and parent links are acyclic.
  void validate() const;
};

struct BinaryTree {
  std::vector<int> left;   // first child, -1 if none
  std::vector<int> right;  // next sibling, -1 if none
  int root = -1;
  std::size_t size() const noexcept { return left.size(); }
};

struct TraversalRanks {
  int pre = 0;
  int in = 0;
  int post = 0;
  bool operator==(const TraversalRanks&) const = default;
};

struct StructIndex {
  int obj = 0;
  int pre = 0;
  int in = 0;
  int post = 0;
  bool operator==(const StructIndex&) const = default;
};

BinaryTree lcrs_convert(const KinematicTree& tree);

// Ranks per original node id:
//   pre  - node, left, right
//   in   - a node with a right (sibling) subtree emits that subtree, itself,
//          then its left (child) subtree; a node without one emits its child
//          subtree first, then itself
//   post - right, left, node
std::vector<TraversalRanks> traversal_indices(const BinaryTree& tree);

// Robot gets 0, other objects 1, 2, ... by increasing Euclidean distance;
// ties keep declaration order.
std::vector<int> object_order(const std::array<double, 2>& robot_pos,
                              const std::vector<std::array<double, 2>>& object_positions);

// Index tuple for a node of an object; kGlobalNode maps to (obj, n, n, n).
StructIndex struct_index(const KinematicTree& tree, int object_rank, int node);
std::vector<StructIndex> struct_indices(const KinematicTree& tree, int object_rank);

struct StructTables {
  num::Var obj, pre, in, post;  // each [capacity, d/4]

  static StructTables create(std::size_t d, std::size_t obj_capacity, std::size_t node_capacity,
                             std::mt19937_64& rng, double stddev = 0.02);
  std::size_t width() const { return obj.dim(1) * 4; }
};

// Concatenation (obj, pre, in, post) of the four lookups, one row per index: [n, d].
num::Var structural_embedding(const std::vector<StructIndex>& indices, const StructTables& tables);

// Parses the plain-text tree format: `name parent` per line with ROOT as the
// root's parent, optional `object <name>` and `position <x> <y>` lines to
// describe several objects, `#` comments.
std::vector<KinematicTree> parse_tree_text(const std::string& text);
std::vector<KinematicTree> load_tree_file(const std::string& path);
std::string format_tree_text(const KinematicTree& tree);

}  // namespace sysmoe::structure
