#include "dcv/ontology.hpp"

#include <algorithm>
#include <cctype>
#include <deque>
#include <functional>
#include <set>

#include "json.hpp"

#include "dcv/checkpoint.hpp"
#include "dcv/error.hpp"

namespace dcv {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr std::string_view kPromptTemplate =
#include "prompt_template.inc"
    ;

std::string join(const std::vector<std::string>& items, std::string_view sep) {
    std::string out;
    for (std::size_t i = 0; i < items.size(); ++i) {
        if (i) out += sep;
        out += items[i];
    }
    return out;
}

std::vector<std::string> root_candidates(const RationaleTree& t) {
    std::set<std::string> has_edge;
    std::map<std::string, std::size_t> in_degree;
    for (const auto& e : t.edges) {
        has_edge.insert(e.source);
        has_edge.insert(e.target);
        ++in_degree[e.target];
    }
    std::vector<std::string> roots;
    for (const auto& n : t.nodes) {
        if (has_edge.count(n.id) && in_degree[n.id] == 0 &&
            std::find(roots.begin(), roots.end(), n.id) == roots.end()) {
            roots.push_back(n.id);
        }
    }
    return roots;
}

std::string get_string(const json& obj, const char* key, const std::string& where) {
    if (!obj.is_object()) throw SchemaError(where + " is not an object");
    auto it = obj.find(key);
    if (it == obj.end()) throw SchemaError(where + " is missing key '" + key + "'");
    if (!it->is_string()) throw SchemaError(where + " key '" + key + "' is not a string");
    auto s = it->get<std::string>();
    if (s.empty()) throw SchemaError(where + " key '" + key + "' is empty");
    return s;
}

} // namespace

const char* code_name(ViolationCode code) {
    switch (code) {
    case ViolationCode::DUPLICATE_ID: return "DUPLICATE_ID";
    case ViolationCode::DANGLING_EDGE: return "DANGLING_EDGE";
    case ViolationCode::MISSING_ROOT: return "MISSING_ROOT";
    case ViolationCode::MULTIPLE_ROOTS: return "MULTIPLE_ROOTS";
    case ViolationCode::ORPHAN_NODE: return "ORPHAN_NODE";
    case ViolationCode::UNREACHABLE_NODE: return "UNREACHABLE_NODE";
    case ViolationCode::SAME_DEPTH_EDGE: return "SAME_DEPTH_EDGE";
    case ViolationCode::BACKWARD_EDGE: return "BACKWARD_EDGE";
    case ViolationCode::CYCLE: return "CYCLE";
    case ViolationCode::DEPTH_EXCEEDED: return "DEPTH_EXCEEDED";
    }
    return "UNKNOWN";
}

const TreeNode* RationaleTree::find(std::string_view id) const {
    for (const auto& n : nodes) {
        if (n.id == id) return &n;
    }
    return nullptr;
}

std::string RationaleTree::root_id() const {
    auto roots = root_candidates(*this);
    return roots.size() == 1 ? roots.front() : std::string();
}

std::string RationaleTree::category() const {
    const auto* n = find(root_id());
    return n ? n->label : std::string();
}

std::map<std::string, std::size_t> RationaleTree::depths() const {
    std::map<std::string, std::size_t> depth;
    const std::string root = root_id();
    if (root.empty()) return depth;
    std::map<std::string, std::vector<std::string>> children;
    for (const auto& e : edges) children[e.source].push_back(e.target);
    std::deque<std::string> queue{root};
    depth[root] = 0;
    while (!queue.empty()) {
        auto cur = queue.front();
        queue.pop_front();
        for (const auto& c : children[cur]) {
            if (!find(c) || depth.count(c)) continue;
            depth[c] = depth[cur] + 1;
            queue.push_back(c);
        }
    }
    return depth;
}

std::vector<std::string> RationaleTree::attributes() const {
    auto d = depths();
    std::vector<std::string> out;
    for (const auto& n : nodes) {
        auto it = d.find(n.id);
        if (it != d.end() && it->second == 1) out.push_back(n.label);
    }
    return out;
}

std::vector<std::string> RationaleTree::subattributes() const {
    auto d = depths();
    std::vector<std::string> out;
    for (const auto& n : nodes) {
        auto it = d.find(n.id);
        if (it != d.end() && it->second == 2) out.push_back(n.label);
    }
    return out;
}

RationaleTree parse_tree(std::string_view text) {
    // Allow `Name = { ... }` as printed in the curation prompt.
    std::size_t skip = 0;
    const auto brace = text.find('{');
    if (brace != std::string_view::npos) {
        const auto eq = text.substr(0, brace).find('=');
        if (eq != std::string_view::npos) skip = brace;
    }
    json j;
    try {
        j = json::parse(text.substr(skip));
    } catch (const json::parse_error& e) {
        throw ParseError("malformed JSON at byte " + std::to_string(e.byte + skip) + ": " + e.what());
    }
    if (!j.is_object()) throw SchemaError("tree must be a JSON object");
    for (const char* key : {"nodes", "edges"}) {
        if (!j.contains(key)) throw SchemaError(std::string("missing key '") + key + "'");
        if (!j[key].is_array()) throw SchemaError(std::string("key '") + key + "' is not an array");
    }
    RationaleTree t;
    for (std::size_t i = 0; i < j["nodes"].size(); ++i) {
        const auto where = "nodes[" + std::to_string(i) + "]";
        t.nodes.push_back({get_string(j["nodes"][i], "id", where), get_string(j["nodes"][i], "label", where)});
    }
    for (std::size_t i = 0; i < j["edges"].size(); ++i) {
        const auto where = "edges[" + std::to_string(i) + "]";
        const auto& e = j["edges"][i];
        t.edges.push_back({get_string(e, "source", where), get_string(e, "target", where),
                           get_string(e, "relation", where)});
    }
    return t;
}

std::string serialize_tree(const RationaleTree& tree) {
    nlohmann::ordered_json j;
    j["nodes"] = nlohmann::ordered_json::array();
    for (const auto& n : tree.nodes) j["nodes"].push_back({{"id", n.id}, {"label", n.label}});
    j["edges"] = nlohmann::ordered_json::array();
    for (const auto& e : tree.edges) {
        j["edges"].push_back({{"source", e.source}, {"target", e.target}, {"relation", e.relation}});
    }
    return j.dump(2) + "\n";
}

std::vector<Violation> validate(const RationaleTree& t) {
    std::vector<Violation> out;
    auto add = [&](ViolationCode c, std::vector<std::string> ids, std::string msg) {
        out.push_back({c, std::move(ids), std::move(msg)});
    };

    std::map<std::string, std::size_t> seen;
    for (const auto& n : t.nodes) {
        if (++seen[n.id] == 2) add(ViolationCode::DUPLICATE_ID, {n.id}, "node id '" + n.id + "' appears more than once");
    }
    std::set<std::string> touched;
    for (std::size_t i = 0; i < t.edges.size(); ++i) {
        const auto& e = t.edges[i];
        touched.insert(e.source);
        touched.insert(e.target);
        for (const auto* end : {&e.source, &e.target}) {
            if (!seen.count(*end)) {
                add(ViolationCode::DANGLING_EDGE, {e.source, e.target},
                    "edge " + std::to_string(i) + " refers to unknown node '" + *end + "'");
            }
        }
    }
    for (const auto& n : t.nodes) {
        if (!touched.count(n.id)) add(ViolationCode::ORPHAN_NODE, {n.id}, "node '" + n.id + "' has no edge");
    }

    const auto roots = root_candidates(t);
    if (roots.empty()) {
        add(ViolationCode::MISSING_ROOT, {}, "no node with in-degree 0");
    } else if (roots.size() > 1) {
        add(ViolationCode::MULTIPLE_ROOTS, roots, "several in-degree-0 nodes: " + join(roots, ", "));
    }

    // Cycles among known nodes.
    std::map<std::string, std::vector<std::string>> children;
    for (const auto& e : t.edges) {
        if (seen.count(e.source) && seen.count(e.target)) children[e.source].push_back(e.target);
    }
    std::map<std::string, int> state;  // 0 new, 1 on stack, 2 done
    std::set<std::string> in_cycle;
    std::vector<std::string> stack;
    std::function<void(const std::string&)> dfs = [&](const std::string& u) {
        state[u] = 1;
        stack.push_back(u);
        for (const auto& v : children[u]) {
            if (state[v] == 1) {
                auto it = std::find(stack.begin(), stack.end(), v);
                in_cycle.insert(it, stack.end());
            } else if (state[v] == 0) {
                dfs(v);
            }
        }
        stack.pop_back();
        state[u] = 2;
    };
    for (const auto& n : t.nodes) {
        if (state[n.id] == 0) dfs(n.id);
    }
    if (!in_cycle.empty()) {
        std::vector<std::string> ids(in_cycle.begin(), in_cycle.end());
        add(ViolationCode::CYCLE, ids, "cycle through " + join(ids, ", "));
    }

    if (roots.size() == 1) {
        const auto depth = t.depths();
        for (const auto& n : t.nodes) {
            if (!touched.count(n.id)) continue;
            auto it = depth.find(n.id);
            if (it == depth.end()) {
                add(ViolationCode::UNREACHABLE_NODE, {n.id}, "node '" + n.id + "' is not reachable from the root");
            } else if (it->second > 2) {
                add(ViolationCode::DEPTH_EXCEEDED, {n.id},
                    "node '" + n.id + "' sits at depth " + std::to_string(it->second) + "; at most 2 allowed");
            }
        }
        for (const auto& e : t.edges) {
            auto s = depth.find(e.source);
            auto d = depth.find(e.target);
            if (s == depth.end() || d == depth.end()) continue;
            if (s->second == d->second) {
                add(ViolationCode::SAME_DEPTH_EDGE, {e.source, e.target},
                    "edge '" + e.source + "' -> '" + e.target + "' joins two depth-" + std::to_string(s->second) +
                        " nodes");
            } else if (d->second < s->second) {
                add(ViolationCode::BACKWARD_EDGE, {e.source, e.target},
                    "edge '" + e.source + "' -> '" + e.target + "' points toward the root");
            }
        }
    }
    return out;
}

std::vector<Rationale> enumerate_rationales(const RationaleTree& tree) {
    const auto violations = validate(tree);
    if (!violations.empty()) {
        std::vector<std::string> parts;
        for (const auto& v : violations) parts.push_back(std::string(code_name(v.code)) + ": " + v.message);
        throw ValidationError("invalid rationale tree: " + join(parts, "; "));
    }
    const std::string root = tree.root_id();
    const std::string root_label = tree.find(root)->label;
    std::vector<Rationale> out;
    for (const auto& e : tree.edges) {
        if (e.source != root) continue;
        const auto& target = tree.find(e.target)->label;
        out.push_back({root_label + " " + e.relation + " " + target, RationaleKind::attribute, {root_label, target}});
    }
    for (const auto& e : tree.edges) {
        if (e.source == root) continue;
        const auto& source = tree.find(e.source)->label;
        const auto& target = tree.find(e.target)->label;
        out.push_back({source + " " + e.relation + " " + target, RationaleKind::subattribute,
                       {root_label, source, target}});
    }
    return out;
}

std::string render_prompt(std::string_view category_name) {
    if (category_name.empty()) throw ArgumentError("category name must be nonempty");
    static constexpr std::string_view kSlot = "{category_name}";
    std::string out(kPromptTemplate);
    const auto at = out.find(kSlot);
    out.replace(at, kSlot.size(), category_name);
    return out;
}

std::string normalize_phrase(std::string_view text) {
    std::string out;
    bool space = false;
    for (char ch : text) {
        const auto c = static_cast<unsigned char>(ch);
        if (std::isspace(c)) {
            space = !out.empty();
            continue;
        }
        if (space) out.push_back(' ');
        space = false;
        out.push_back(static_cast<char>(std::tolower(c)));
    }
    return out;
}

CorpusStats corpus_stats(const fs::path& directory) {
    CorpusStats stats;
    std::error_code ec;
    if (!fs::is_directory(directory, ec)) throw ArgumentError("not a directory: " + directory.string());
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(directory)) {
        const auto name = entry.path().filename().string();
        if (entry.path().extension() != ".json") continue;
        if (name.size() >= 10 && name.compare(name.size() - 10, 10, ".spec.json") == 0) continue;
        files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    std::set<std::string> global;
    std::size_t total = 0;
    for (const auto& f : files) {
        try {
            auto rationales = enumerate_rationales(parse_tree(read_text_file(f)));
            std::set<std::string> local;
            for (const auto& r : rationales) {
                local.insert(normalize_phrase(r.text));
                global.insert(normalize_phrase(r.text));
            }
            ++stats.categories;
            stats.unique_within_categories += local.size();
            total += rationales.size();
        } catch (const Error& e) {
            ++stats.invalid_count;
            stats.invalid.push_back({f.filename().string(), e.what()});
        }
    }
    stats.unique_rationales = global.size();
    if (stats.categories) {
        stats.mean_rationales_per_category = static_cast<double>(total) / static_cast<double>(stats.categories);
    }
    return stats;
}

} // namespace dcv
