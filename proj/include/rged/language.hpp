#pragma once

#include <filesystem>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "rged/errors.hpp"
#include "rged/image_io.hpp"
#include "rged/rng.hpp"
#include "rged/synth.hpp"

namespace rged {

inline constexpr int kPadId = 0;
inline constexpr int kStartId = 1;
inline constexpr int kEndId = 2;
inline constexpr std::size_t kMaxTokens = 24;
inline constexpr std::string_view kEmptyCaption = "an empty gray canvas";

class Vocabulary {
public:
    explicit Vocabulary(std::vector<std::string> words) : words_(std::move(words)) {
        if (words_.size() < 3 || words_[kPadId] != "<pad>" || words_[kStartId] != "<start>" || words_[kEndId] != "<end>") {
            throw DataError("vocabulary must begin with <pad>, <start>, <end>");
        }
        if (words_.size() > 259) throw DataError("vocabulary exceeds 256 words");
        for (std::size_t i = 0; i < words_.size(); ++i) {
            if (words_[i].empty() || words_[i].find_first_of(" \t\r\n") != std::string::npos) {
                throw DataError("vocabulary entry " + std::to_string(i) + " is not a single word");
            }
            if (!index_.emplace(words_[i], static_cast<int>(i)).second) throw DataError("duplicate vocabulary word '" + words_[i] + "'");
        }
    }

    /// Every word the caption templates and instruction grammar can emit.
    static const Vocabulary& standard() {
        static const Vocabulary v = [] {
            std::vector<std::string> w{"<pad>", "<start>", "<end>", "a", "an", "empty", "gray", "canvas", "and", "with", "the",
                                       "add", "remove", "change", "to", "give"};
            for (auto n : kSizeNames) w.emplace_back(n);
            for (auto n : kColorNames) w.emplace_back(n);
            for (auto n : kShapeNames) w.emplace_back(n);
            w.emplace_back("crown");
            w.emplace_back("collar");
            return Vocabulary(std::move(w));
        }();
        return v;
    }

    std::size_t size() const { return words_.size(); }

    int id(const std::string& word) const {
        const auto it = index_.find(word);
        if (it == index_.end()) throw VocabularyError("out-of-vocabulary word '" + word + "'");
        return it->second;
    }

    const std::string& word(int id) const {
        if (id < 0 || static_cast<std::size_t>(id) >= words_.size()) throw VocabularyError("token id " + std::to_string(id) + " out of range");
        return words_[static_cast<std::size_t>(id)];
    }

    const std::vector<std::string>& words() const { return words_; }

    void save(const std::filesystem::path& path) const {
        std::string out;
        for (const auto& w : words_) out += w + "\n";
        detail::write_file(path, out);
    }

    static Vocabulary load(const std::filesystem::path& path) {
        std::istringstream in(detail::read_file(path));
        std::vector<std::string> words;
        for (std::string line; std::getline(in, line);) words.push_back(line);
        return Vocabulary(std::move(words));
    }

private:
    std::vector<std::string> words_;
    std::unordered_map<std::string, int> index_;
};

inline std::vector<std::string> words_of(const std::string& text) {
    std::istringstream in(text);
    std::vector<std::string> out;
    for (std::string w; in >> w;) out.push_back(w);
    return out;
}

/// [START, words..., END]
inline std::vector<int> tokenize(const std::string& text, const Vocabulary& vocab = Vocabulary::standard()) {
    std::vector<int> ids{kStartId};
    for (const auto& w : words_of(text)) {
        const int id = vocab.id(w);
        if (id == kPadId || id == kStartId || id == kEndId) throw VocabularyError("sentinel '" + w + "' inside text");
        ids.push_back(id);
    }
    ids.push_back(kEndId);
    return ids;
}

inline std::string detokenize(const std::vector<int>& ids, const Vocabulary& vocab = Vocabulary::standard()) {
    std::string text;
    for (int id : ids) {
        const std::string& w = vocab.word(id);
        if (id == kPadId || id == kStartId || id == kEndId) continue;
        if (!text.empty()) text += ' ';
        text += w;
    }
    return text;
}

inline std::vector<int> pad_tokens(std::vector<int> ids, std::size_t length = kMaxTokens) {
    if (ids.size() > length) throw ContractError("token sequence of length " + std::to_string(ids.size()) + " exceeds " + std::to_string(length));
    ids.resize(length, kPadId);
    return ids;
}

/// True at PAD positions, the attention key mask convention of softmax_rows.
inline std::vector<bool> pad_mask(const std::vector<int>& ids) {
    std::vector<bool> m(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) m[i] = ids[i] == kPadId;
    return m;
}

struct Caption {
    std::string text;
    std::vector<int> ids;

    friend bool operator==(const Caption&, const Caption&) = default;
};

inline Caption make_caption(std::string text) {
    Caption c{std::move(text), {}};
    c.ids = tokenize(c.text);
    if (c.ids.size() > kMaxTokens) throw InfeasibleEditError("caption longer than 24 tokens: " + c.text);
    return c;
}

// ---------------------------------------------------------------------------
// Caption templates

struct NounPhrase {
    std::optional<SizeClass> size;
    Color color = Color::red;
    ShapeKind shape = ShapeKind::circle;
    Accessory accessory = Accessory::none;
};

inline std::string render_phrase(const NounPhrase& p) {
    std::string s = "a ";
    if (p.size) s += std::string(name(*p.size)) + " ";
    s += std::string(name(p.color)) + " " + name(p.shape);
    if (p.accessory != Accessory::none) s += std::string(" with a ") + name(p.accessory);
    return s;
}

inline std::string render_phrases(const std::vector<NounPhrase>& phrases) {
    if (phrases.empty()) return std::string(kEmptyCaption);
    std::string s;
    for (std::size_t i = 0; i < phrases.size(); ++i) {
        if (i) s += " and ";
        s += render_phrase(phrases[i]);
    }
    return s;
}

/// Inverse of render_phrases.
inline std::vector<NounPhrase> parse_phrases(const std::string& text) {
    const auto w = words_of(text);
    if (w == words_of(std::string(kEmptyCaption))) return {};
    std::vector<NounPhrase> out;
    std::size_t i = 0;
    auto fail = [&](const std::string& why) -> void { throw GrammarError("caption '" + text + "': " + why); };
    while (true) {
        if (i >= w.size() || w[i] != "a") fail("expected 'a' at word " + std::to_string(i));
        ++i;
        NounPhrase p;
        if (i < w.size()) {
            if (auto s = parse_enum<SizeClass>(w[i], kSizeNames)) {
                p.size = *s;
                ++i;
            }
        }
        const auto color = i < w.size() ? parse_enum<Color>(w[i], kColorNames) : std::nullopt;
        if (!color) fail("expected a color at word " + std::to_string(i));
        p.color = *color;
        ++i;
        const auto shape = i < w.size() ? parse_enum<ShapeKind>(w[i], kShapeNames) : std::nullopt;
        if (!shape) fail("expected a shape at word " + std::to_string(i));
        p.shape = *shape;
        ++i;
        if (i < w.size() && w[i] == "with") {
            if (i + 2 >= w.size() + 0 || w[i + 1] != "a") fail("expected 'with a <accessory>'");
            const auto acc = parse_enum<Accessory>(w[i + 2], kAccessoryNames);
            if (!acc || *acc == Accessory::none) fail("unknown accessory '" + w[i + 2] + "'");
            p.accessory = *acc;
            i += 3;
        }
        out.push_back(p);
        if (i == w.size()) break;
        if (w[i] != "and") fail("expected 'and' at word " + std::to_string(i));
        ++i;
    }
    return out;
}

/// Template caption listing objects in raster order.
inline Caption describe(const SceneGraph& scene) {
    std::vector<NounPhrase> phrases;
    for (const auto& o : scene.objects) phrases.push_back({o.size, o.color, o.shape, o.accessory});
    return make_caption(render_phrases(phrases));
}

// ---------------------------------------------------------------------------
// Instructions

struct Instruction {
    std::string text;
    SceneEdit edit;

    friend bool operator==(const Instruction&, const Instruction&) = default;
};

inline constexpr std::string_view kGrammarHelp =
    "expected one of: 'add a <size> <color> <shape> [with a <accessory>]', 'remove the <color> <shape>', "
    "'change the <color> <shape> to <color>', 'give the <color> <shape> a <accessory>'";

inline Instruction parse_instruction(const std::string& text) {
    const auto w = words_of(text);
    auto fail = [&]() -> void { throw GrammarError("cannot parse instruction '" + text + "'; " + std::string(kGrammarHelp)); };
    auto color_at = [&](std::size_t i) {
        auto c = i < w.size() ? parse_enum<Color>(w[i], kColorNames) : std::nullopt;
        if (!c) fail();
        return *c;
    };
    auto shape_at = [&](std::size_t i) {
        auto s = i < w.size() ? parse_enum<ShapeKind>(w[i], kShapeNames) : std::nullopt;
        if (!s) fail();
        return *s;
    };
    auto accessory_at = [&](std::size_t i) {
        auto a = i < w.size() ? parse_enum<Accessory>(w[i], kAccessoryNames) : std::nullopt;
        if (!a || *a == Accessory::none) fail();
        return *a;
    };
    if (w.size() < 3) fail();
    SceneEdit e;
    if (w[0] == "add") {
        if (w[1] != "a" || (w.size() != 5 && w.size() != 8)) fail();
        e.op = EditOp::add;
        const auto size = parse_enum<SizeClass>(w[2], kSizeNames);
        if (!size) fail();
        e.size = *size;
        e.color = color_at(3);
        e.shape = shape_at(4);
        if (w.size() == 8) {
            if (w[5] != "with" || w[6] != "a") fail();
            e.accessory = accessory_at(7);
        }
    } else if (w[0] == "remove") {
        if (w.size() != 4 || w[1] != "the") fail();
        e.op = EditOp::remove;
        e.color = color_at(2);
        e.shape = shape_at(3);
    } else if (w[0] == "change") {
        if (w.size() != 6 || w[1] != "the" || w[4] != "to") fail();
        e.op = EditOp::change;
        e.color = color_at(2);
        e.shape = shape_at(3);
        e.new_color = color_at(5);
    } else if (w[0] == "give") {
        if (w.size() != 6 || w[1] != "the" || w[4] != "a") fail();
        e.op = EditOp::give;
        e.color = color_at(2);
        e.shape = shape_at(3);
        e.accessory = accessory_at(5);
    } else {
        fail();
    }
    return Instruction{render_instruction(e), e};
}

inline Instruction make_instruction(const SceneEdit& e) { return Instruction{render_instruction(e), e}; }

/// Rewrites the caption under the instruction: one phrase appended, removed,
/// or given a new attribute. Targets resolve to the first matching phrase.
inline Caption apply_instruction(const Caption& source, const Instruction& ins) {
    auto phrases = parse_phrases(source.text);
    const SceneEdit& e = ins.edit;
    if (e.op == EditOp::add) {
        phrases.push_back({e.size, e.color, e.shape, e.accessory});
    } else {
        auto it = std::find_if(phrases.begin(), phrases.end(),
                               [&](const NounPhrase& p) { return p.color == e.color && p.shape == e.shape; });
        if (it == phrases.end()) {
            throw UnresolvedTargetError("no '" + std::string(name(e.color)) + " " + name(e.shape) + "' in caption '" + source.text + "'");
        }
        switch (e.op) {
        case EditOp::remove:
            phrases.erase(it);
            break;
        case EditOp::change:
            it->color = e.new_color;
            break;
        case EditOp::give:
            it->accessory = e.accessory;
            break;
        case EditOp::add:
            break;
        }
    }
    return make_caption(render_phrases(phrases));
}

/// Samples a feasible instruction whose edited caption also fits in 24
/// tokens. Adds are only proposed when the new object can go after every
/// existing one, which keeps the caption path and the scene path in step.
inline Instruction propose_instruction(const Caption& caption, const SceneGraph& scene, std::uint64_t seed) {
    std::vector<EditOp> ops;
    if (!append_cells(scene).empty()) ops.push_back(EditOp::add);
    if (!scene.objects.empty()) {
        ops.push_back(EditOp::remove);
        ops.push_back(EditOp::change);
        ops.push_back(EditOp::give);
    }
    if (ops.empty()) throw InfeasibleEditError("no grammar production is feasible for this scene");
    Rng rng(mix_seed(seed, hash_tag("propose")));
    for (int attempt = 0; attempt < 256; ++attempt) {
        const EditOp op = ops[static_cast<std::size_t>(rng.below(static_cast<int>(ops.size())))];
        const SceneEdit e = random_edit(scene, op, rng);
        const Instruction ins = make_instruction(e);
        try {
            apply_instruction(caption, ins);
        } catch (const InfeasibleEditError&) {
            continue;
        }
        return ins;
    }
    throw InfeasibleEditError("no proposed instruction keeps the edited caption within 24 tokens");
}

/// Oracle for an instruction proposed against the sample's own scene; adds
/// go to an append cell so the edited caption describes the edited scene.
inline OracleEdit make_oracle_edit(const ImageSample& sample, const Instruction& ins, std::uint64_t placement_seed) {
    if (ins.edit.op == EditOp::add && append_cells(sample.scene).empty()) {
        throw InfeasibleEditError("add: no free cell after the last object");
    }
    return make_oracle_edit(sample, ins.edit, placement_seed);
}

} // namespace rged
