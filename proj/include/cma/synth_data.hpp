#pragma once

// Deterministic synthetic scene-captioning corpus. "Images" are sets of
// region feature vectors generated from latent object/attribute/position
// structure; each scene carries 5 templated paraphrase references. Stands in
// for a pretrained visual encoder at desk scale.

#include <array>
#include <cstdint>
#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cma/error.hpp"
#include "cma/tensor.hpp"
#include "cma/vocab.hpp"

namespace cma::synth {

inline constexpr std::size_t kFeatureDim = 32;
inline constexpr std::size_t kNumReferences = 5;
inline constexpr std::size_t kNumDistractors = 2;

inline const std::vector<std::string>& categories() {
    static const std::vector<std::string> v{"cat",   "dog",   "bird",  "fish", "car",  "truck",
                                            "tree",  "house", "chair", "table", "ball", "lamp"};
    return v;
}

inline const std::vector<std::string>& attributes() {
    static const std::vector<std::string> v{"red", "blue", "green", "small", "big", "old"};
    return v;
}

inline const std::vector<std::string>& relations() {
    static const std::vector<std::string> v{"above", "below", "beside", "near"};
    return v;
}

inline std::string inverse_relation(const std::string& rel) {
    if (rel == "above") return "below";
    if (rel == "below") return "above";
    return rel;  // beside / near are symmetric
}

struct SceneObject {
    int category = 0;
    int attribute = 0;
    int x = 0, y = 0;  // grid position 0..3
};

struct Scene {
    std::string id;
    std::vector<SceneObject> objects;  // 2..5 objects
};

struct CorpusItem {
    Scene scene;
    Tensor features;  // n x kFeatureDim, n = objects + distractors
    std::vector<std::string> refs;
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

// Per-item seeding: hash(seed, index) so any single index regenerates in
// isolation.
inline std::mt19937_64 item_rng(std::uint64_t seed, std::uint64_t index) {
    return std::mt19937_64(splitmix64(seed ^ splitmix64(index + 1)));
}

}  // namespace detail

// Fixed per-seed catalog embeddings. The first two categories share 80% of
// their base embedding so the corpus carries a deliberately confusable pair.
struct CatalogEmbeddings {
    std::vector<std::vector<double>> category;   // 16-dim each
    std::vector<std::vector<double>> attribute;  // 8-dim each

    static CatalogEmbeddings build(std::uint64_t seed) {
        std::mt19937_64 rng(detail::splitmix64(seed ^ 0xCA7A106ULL));
        std::normal_distribution<double> nd(0.0, 1.0);
        CatalogEmbeddings e;
        for (std::size_t c = 0; c < categories().size(); ++c) {
            std::vector<double> v(16);
            for (double& x : v) x = nd(rng);
            e.category.push_back(std::move(v));
        }
        // 80% overlap between categories 0 and 1 (cat/dog).
        for (std::size_t i = 0; i < 13; ++i) e.category[1][i] = e.category[0][i];
        for (std::size_t a = 0; a < attributes().size(); ++a) {
            std::vector<double> v(8);
            for (double& x : v) x = nd(rng);
            e.attribute.push_back(std::move(v));
        }
        return e;
    }
};

inline std::string relation_between(const SceneObject& a, const SceneObject& b) {
    if (a.y < b.y) return "above";
    if (a.y > b.y) return "below";
    if (std::abs(a.x - b.x) == 1) return "beside";
    return "near";
}

inline Scene generate_scene(std::uint64_t index, std::uint64_t seed) {
    auto rng = detail::item_rng(seed, index);
    Scene s;
    s.id = "scene-" + std::to_string(index);
    const std::size_t count = 2 + rng() % 4;  // 2..5
    for (std::size_t i = 0; i < count; ++i) {
        SceneObject o;
        o.category = static_cast<int>(rng() % categories().size());
        o.attribute = static_cast<int>(rng() % attributes().size());
        o.x = static_cast<int>(rng() % 4);
        o.y = static_cast<int>(rng() % 4);
        s.objects.push_back(o);
    }
    // The two described objects must not occupy the same cell (keeps the
    // relation word well defined).
    if (s.objects[0].x == s.objects[1].x && s.objects[0].y == s.objects[1].y)
        s.objects[1].x = (s.objects[1].x + 1) % 4;
    return s;
}

// Region features: [category(16); attribute(8); position(4); 0(4)] plus
// Gaussian noise at scale 0.05, then two pure-noise distractor regions.
inline Tensor scene_features(const Scene& s, const CatalogEmbeddings& emb, std::uint64_t index,
                             std::uint64_t seed) {
    auto rng = detail::item_rng(seed, detail::splitmix64(index ^ 0xFEA7ULL));
    std::normal_distribution<double> nd(0.0, 1.0);
    const std::size_t n = s.objects.size() + kNumDistractors;
    std::vector<double> values(n * kFeatureDim, 0.0);
    for (std::size_t i = 0; i < s.objects.size(); ++i) {
        const auto& o = s.objects[i];
        double* row = values.data() + i * kFeatureDim;
        for (std::size_t j = 0; j < 16; ++j) row[j] = emb.category[o.category][j];
        for (std::size_t j = 0; j < 8; ++j) row[16 + j] = emb.attribute[o.attribute][j];
        row[24] = o.x / 3.0;
        row[25] = o.y / 3.0;
        row[26] = (o.x + o.y) / 6.0;
        row[27] = 1.0;
        for (std::size_t j = 0; j < kFeatureDim; ++j) row[j] += 0.05 * nd(rng);
    }
    for (std::size_t i = s.objects.size(); i < n; ++i) {
        double* row = values.data() + i * kFeatureDim;
        for (std::size_t j = 0; j < kFeatureDim; ++j) row[j] = nd(rng);
    }
    return Tensor::from({n, kFeatureDim}, std::move(values));
}

// Five paraphrase templates over the first two objects of the scene.
inline std::vector<std::string> scene_references(const Scene& s) {
    const auto& o1 = s.objects[0];
    const auto& o2 = s.objects[1];
    const std::string c1 = categories()[o1.category], c2 = categories()[o2.category];
    const std::string a1 = attributes()[o1.attribute], a2 = attributes()[o2.attribute];
    const std::string rel = relation_between(o1, o2);
    const std::string inv = inverse_relation(rel);
    return {
        "a " + a1 + " " + c1 + " " + rel + " a " + a2 + " " + c2,
        "the " + c1 + " is " + a1 + " and the " + c2 + " is " + a2,
        "a " + a2 + " " + c2 + " " + inv + " a " + a1 + " " + c1,
        "there is a " + a1 + " " + c1 + " " + rel + " a " + a2 + " " + c2,
        "the photo shows a " + a1 + " " + c1 + " and a " + a2 + " " + c2,
    };
}

inline CorpusItem generate_item(std::uint64_t index, std::uint64_t seed,
                                const CatalogEmbeddings& emb) {
    CorpusItem item;
    item.scene = generate_scene(index, seed);
    item.features = scene_features(item.scene, emb, index, seed);
    item.refs = scene_references(item.scene);
    return item;
}

inline std::vector<CorpusItem> generate_corpus(std::size_t num_scenes, std::uint64_t seed) {
    if (num_scenes < 1) throw ContractError("generate_corpus: num_scenes must be >= 1");
    const auto emb = CatalogEmbeddings::build(seed);
    std::vector<CorpusItem> out;
    out.reserve(num_scenes);
    for (std::size_t i = 0; i < num_scenes; ++i) out.push_back(generate_item(i, seed, emb));
    return out;
}

// Words appearing strictly more than 5 times are kept; the rest map to UNK.
inline Vocabulary build_vocabulary(const std::vector<std::vector<std::string>>& reference_sets,
                                   std::size_t min_count = 5) {
    if (reference_sets.empty()) throw ContractError("build_vocabulary: empty corpus");
    std::vector<std::string> order;
    std::map<std::string, std::size_t> counts;
    for (const auto& refs : reference_sets)
        for (const auto& r : refs)
            for (const auto& w : tokenize(r)) {
                if (counts.find(w) == counts.end()) order.push_back(w);
                counts[w] += 1;
            }
    Vocabulary vocab;
    for (const auto& w : order)
        if (counts[w] > min_count) vocab.add_word(w);
    return vocab;
}

inline Caption encode_caption(const std::string& text, const Vocabulary& vocab,
                              CaptionRole role = CaptionRole::kReference) {
    std::vector<int> tokens;
    for (const auto& w : tokenize(text)) {
        if (tokens.size() == kMaxContentTokens) break;
        tokens.push_back(vocab.index_of(w));
    }
    return Caption::from_content(std::move(tokens), role, vocab.size());
}

// ---------------------------------------------------------------------------
// Corpus persistence: one JSON record per line
// {"id": ..., "features": [[..]*32]*n, "refs": [..]*5}

inline void save_corpus(const std::vector<CorpusItem>& corpus, std::ostream& os) {
    for (const auto& item : corpus) {
        nlohmann::json j;
        j["id"] = item.scene.id;
        auto feats = nlohmann::json::array();
        for (std::size_t i = 0; i < item.features.rows(); ++i) {
            auto row = nlohmann::json::array();
            for (std::size_t k = 0; k < kFeatureDim; ++k) row.push_back(item.features.at(i, k));
            feats.push_back(std::move(row));
        }
        j["features"] = std::move(feats);
        j["refs"] = item.refs;
        os << j.dump() << "\n";
    }
}

inline std::vector<CorpusItem> load_corpus(std::istream& is) {
    std::vector<CorpusItem> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw CorruptArtifactError("corpus line " + std::to_string(lineno) + ": " + e.what());
        }
        CorpusItem item;
        try {
            item.scene.id = j.at("id").get<std::string>();
            item.refs = j.at("refs").get<std::vector<std::string>>();
        } catch (const nlohmann::json::exception& e) {
            throw CorruptArtifactError("corpus line " + std::to_string(lineno) + ": " + e.what());
        }
        if (!j.contains("features"))
            throw CorruptArtifactError("corpus line " + std::to_string(lineno) +
                                       ": missing features");
        const auto& feats = j.at("features");
        if (feats.empty())
            throw CorruptArtifactError("corpus line " + std::to_string(lineno) + ": no regions");
        std::vector<double> values;
        for (const auto& row : feats) {
            if (row.size() != kFeatureDim)
                throw CorruptArtifactError("corpus line " + std::to_string(lineno) +
                                           ": region width " + std::to_string(row.size()) +
                                           " != " + std::to_string(kFeatureDim));
            for (const auto& v : row) {
                if (!v.is_number())
                    throw CorruptArtifactError("corpus line " + std::to_string(lineno) +
                                               ": non-numeric feature value");
                values.push_back(v.get<double>());
            }
        }
        item.features = Tensor::from({feats.size(), kFeatureDim}, std::move(values));
        if (item.refs.size() != kNumReferences)
            throw CorruptArtifactError("corpus line " + std::to_string(lineno) + ": expected " +
                                       std::to_string(kNumReferences) + " references, got " +
                                       std::to_string(item.refs.size()));
        out.push_back(std::move(item));
    }
    return out;
}

}  // namespace cma::synth
