#pragma once

#include <algorithm>
#include <cstddef>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "suplora/matrix.hpp"

namespace suplora {

enum class ConceptKind { erased, retained, supertype, general };

inline const char* to_string(ConceptKind k) {
    switch (k) {
        case ConceptKind::erased: return "erased";
        case ConceptKind::retained: return "retained";
        case ConceptKind::supertype: return "supertype";
        case ConceptKind::general: return "general";
    }
    return "?";
}

inline ConceptKind concept_kind_from_string(const std::string& s) {
    if (s == "erased") return ConceptKind::erased;
    if (s == "retained") return ConceptKind::retained;
    if (s == "supertype") return ConceptKind::supertype;
    if (s == "general") return ConceptKind::general;
    throw std::invalid_argument("unknown concept kind: " + s);
}

/// A named concept. `domain` is the generative parent label: for erased and
/// retained concepts it names the supertype whose base pattern they extend;
/// supertype concepts carry their own id; general concepts may leave it
/// empty.
struct Concept {
    std::string id;
    ConceptKind kind{ConceptKind::general};
    std::string domain;
};

struct ConceptGroup {
    std::size_t group_id{0};
    std::vector<std::string> members;  // erased concept ids, sorted
    std::string supertype;             // supertype concept id

    std::string smallest_member() const {
        return members.empty() ? std::string{} : members.front();
    }
};

struct ConceptRegistry {
    std::vector<Concept> concepts;
    std::vector<ConceptGroup> groups;

    const Concept* find(const std::string& id) const {
        for (const auto& c : concepts)
            if (c.id == id) return &c;
        return nullptr;
    }

    const Concept& at(const std::string& id) const {
        const Concept* c = find(id);
        if (!c) throw std::invalid_argument("unknown concept: " + id);
        return *c;
    }

    std::vector<Concept> of_kind(ConceptKind k) const {
        std::vector<Concept> out;
        for (const auto& c : concepts)
            if (c.kind == k) out.push_back(c);
        return out;
    }

    /// Unique ids; every group member exists, is erased, and belongs to
    /// exactly one group (partition of the erased set).
    void validate() const {
        for (std::size_t i = 0; i < concepts.size(); ++i)
            for (std::size_t j = i + 1; j < concepts.size(); ++j)
                if (concepts[i].id == concepts[j].id)
                    throw std::invalid_argument("duplicate concept id: " + concepts[i].id);
        std::map<std::string, std::size_t> seen;
        for (const auto& g : groups) {
            if (g.members.empty())
                throw std::invalid_argument("group " + std::to_string(g.group_id) +
                                            " has no members");
            for (const auto& m : g.members) {
                const Concept& c = at(m);
                if (c.kind != ConceptKind::erased)
                    throw std::invalid_argument("group member is not erased: " + m);
                if (++seen[m] > 1)
                    throw std::invalid_argument("concept in two groups: " + m);
            }
        }
        if (!groups.empty()) {
            for (const auto& c : concepts)
                if (c.kind == ConceptKind::erased && seen.find(c.id) == seen.end())
                    throw std::invalid_argument("erased concept in no group: " + c.id);
        }
    }
};

namespace detail {

inline double cosine(std::span<const double> a, std::span<const double> b) {
    const double na = norm2(a), nb = norm2(b);
    if (na == 0.0 || nb == 0.0)
        throw std::invalid_argument("cosine similarity of zero vector");
    return dot(a, b) / (na * nb);
}

}  // namespace detail

/// Average-link agglomerative clustering on cosine similarity. Merging stops
/// when the best inter-cluster average similarity drops below the threshold.
/// Deterministic: similarity ties pick the pair whose (smallest, then second)
/// member ids sort lexicographically first; output groups are ordered by
/// smallest member id.
inline std::vector<ConceptGroup> build_groups(
    const std::vector<Concept>& concepts,
    const std::map<std::string, std::vector<double>>& embeddings,
    double linkage_threshold) {
    if (!(linkage_threshold > 0.0 && linkage_threshold < 1.0))
        throw std::invalid_argument("build_groups: threshold must be in (0,1)");
    const std::size_t n = concepts.size();
    if (n == 0) return {};

    std::size_t dim = 0;
    std::vector<const std::vector<double>*> vecs(n);
    for (std::size_t i = 0; i < n; ++i) {
        auto it = embeddings.find(concepts[i].id);
        if (it == embeddings.end())
            throw std::invalid_argument("build_groups: missing embedding for concept '" +
                                        concepts[i].id + "'");
        if (i == 0) dim = it->second.size();
        if (it->second.size() != dim)
            throw std::invalid_argument("build_groups: embedding dimension mismatch for '" +
                                        concepts[i].id + "'");
        vecs[i] = &it->second;
    }

    Matrix sim(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            sim(i, j) = detail::cosine(*vecs[i], *vecs[j]);

    struct Cluster {
        std::vector<std::size_t> members;
        std::string min_id;
    };
    std::vector<Cluster> clusters;
    clusters.reserve(n);
    for (std::size_t i = 0; i < n; ++i) clusters.push_back({{i}, concepts[i].id});

    auto avg_link = [&](const Cluster& a, const Cluster& b) {
        double acc = 0.0;
        for (std::size_t i : a.members)
            for (std::size_t j : b.members) acc += sim(i, j);
        return acc / static_cast<double>(a.members.size() * b.members.size());
    };
    auto pair_key = [](const Cluster& a, const Cluster& b) {
        return a.min_id < b.min_id ? std::make_pair(a.min_id, b.min_id)
                                   : std::make_pair(b.min_id, a.min_id);
    };

    while (clusters.size() > 1) {
        std::size_t best_a = 0, best_b = 1;
        double best_sim = -2.0;
        std::pair<std::string, std::string> best_key;
        for (std::size_t a = 0; a < clusters.size(); ++a) {
            for (std::size_t b = a + 1; b < clusters.size(); ++b) {
                const double s = avg_link(clusters[a], clusters[b]);
                const auto key = pair_key(clusters[a], clusters[b]);
                if (s > best_sim || (s == best_sim && key < best_key)) {
                    best_sim = s;
                    best_key = key;
                    best_a = a;
                    best_b = b;
                }
            }
        }
        if (best_sim < linkage_threshold) break;
        Cluster merged;
        merged.members = clusters[best_a].members;
        merged.members.insert(merged.members.end(), clusters[best_b].members.begin(),
                              clusters[best_b].members.end());
        merged.min_id = std::min(clusters[best_a].min_id, clusters[best_b].min_id);
        clusters.erase(clusters.begin() + static_cast<std::ptrdiff_t>(best_b));
        clusters[best_a] = std::move(merged);
    }

    std::sort(clusters.begin(), clusters.end(),
              [](const Cluster& a, const Cluster& b) { return a.min_id < b.min_id; });
    std::vector<ConceptGroup> groups;
    groups.reserve(clusters.size());
    for (std::size_t g = 0; g < clusters.size(); ++g) {
        ConceptGroup cg;
        cg.group_id = g;
        for (std::size_t idx : clusters[g].members) cg.members.push_back(concepts[idx].id);
        std::sort(cg.members.begin(), cg.members.end());
        groups.push_back(std::move(cg));
    }
    return groups;
}

/// Attach config-supplied supertype names; creates the supertype concept in
/// the registry when absent. Duplicate names across groups are allowed.
inline std::vector<ConceptGroup> assign_supertypes(
    std::vector<ConceptGroup> groups, const std::map<std::size_t, std::string>& names,
    ConceptRegistry& registry) {
    for (auto& g : groups) {
        auto it = names.find(g.group_id);
        if (it == names.end())
            throw std::invalid_argument("assign_supertypes: missing name for group " +
                                        std::to_string(g.group_id));
        g.supertype = it->second;
        if (!registry.find(g.supertype))
            registry.concepts.push_back(
                {g.supertype, ConceptKind::supertype, g.supertype});
    }
    return groups;
}

}  // namespace suplora
