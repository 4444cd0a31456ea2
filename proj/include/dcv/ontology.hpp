#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace dcv {

struct TreeNode {
    std::string id;
    std::string label;
    bool operator==(const TreeNode&) const = default;
};

struct TreeEdge {
    std::string source;
    std::string target;
    std::string relation;
    bool operator==(const TreeEdge&) const = default;
};

/// Category ontology: root (the category) -> attributes -> sub-attributes.
struct RationaleTree {
    std::vector<TreeNode> nodes;
    std::vector<TreeEdge> edges;

    /// Label of the unique in-degree-0 node, or empty when there is none.
    std::string category() const;
    std::string root_id() const;
    /// BFS depth from the root for every reachable node id.
    std::map<std::string, std::size_t> depths() const;
    /// Labels at depth 1 and depth 2, in node order.
    std::vector<std::string> attributes() const;
    std::vector<std::string> subattributes() const;
    const TreeNode* find(std::string_view id) const;

    bool operator==(const RationaleTree&) const = default;
};

enum class ViolationCode {
    DUPLICATE_ID,
    DANGLING_EDGE,
    MISSING_ROOT,
    MULTIPLE_ROOTS,
    ORPHAN_NODE,
    UNREACHABLE_NODE,
    SAME_DEPTH_EDGE,
    BACKWARD_EDGE,
    CYCLE,
    DEPTH_EXCEEDED,
};

const char* code_name(ViolationCode code);

struct Violation {
    ViolationCode code;
    std::vector<std::string> ids;
    std::string message;
};

/// Accepts a bare JSON object, or the `Name = { ... }` form used by the
/// curation prompt's examples. Throws ParseError (with byte position) on bad
/// JSON and SchemaError naming the missing or mistyped key.
RationaleTree parse_tree(std::string_view json_text);
/// Canonical JSON: nodes as {id, label}, edges as {source, target, relation}.
std::string serialize_tree(const RationaleTree& tree);

std::vector<Violation> validate(const RationaleTree& tree);

enum class RationaleKind { attribute, subattribute };

struct Rationale {
    std::string text;                // "<source> <relation> <target>"
    RationaleKind kind;
    std::vector<std::string> path;   // root[, attribute], leaf labels
};

/// One rationale per edge: root edges first, then the rest, each in file
/// order. Throws ValidationError listing violations for an invalid tree.
std::vector<Rationale> enumerate_rationales(const RationaleTree& tree);

/// The curation prompt with both exemplar trees, `{category_name}` replaced.
std::string render_prompt(std::string_view category_name);

struct InvalidFile {
    std::string file;
    std::string reason;
};

struct CorpusStats {
    std::size_t categories = 0;
    /// Distinct normalized phrases across the whole corpus.
    std::size_t unique_rationales = 0;
    /// Sum over categories of distinct phrases within each category.
    std::size_t unique_within_categories = 0;
    double mean_rationales_per_category = 0.0;
    std::size_t invalid_count = 0;
    std::vector<InvalidFile> invalid;
};

/// Scans `*.json` files (skipping `*.spec.json`) in name order.
CorpusStats corpus_stats(const std::filesystem::path& directory);

/// Lowercased with whitespace runs collapsed to one space and trimmed.
std::string normalize_phrase(std::string_view text);

} // namespace dcv
