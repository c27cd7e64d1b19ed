#include <gtest/gtest.h>

#include <filesystem>
#include <set>

#include "rged/language.hpp"

namespace {

using namespace rged;

SceneGraph one_object(ShapeKind shape, Color color, SizeClass size = SizeClass::medium) {
    SceneGraph g;
    g.objects.push_back({shape, color, size, 1, 1, Accessory::none});
    return g;
}

Instruction parse(const std::string& s) { return parse_instruction(s); }

TEST(Tokenize, EmptyTextIsSentinelsOnly) { EXPECT_EQ(tokenize(""), (std::vector<int>{kStartId, kEndId})); }

TEST(Tokenize, RoundTripOverEveryProduction) {
    for (const char* s : {"add a small red circle", "add a large cyan triangle with a crown", "remove the black square",
                          "change the green circle to orange", "give the blue triangle a collar"}) {
        const auto ids = tokenize(s);
        EXPECT_EQ(detokenize(ids), s);
        EXPECT_EQ(tokenize(detokenize(ids)), ids);
    }
}

TEST(Tokenize, OutOfVocabularyAndBadIds) {
    EXPECT_THROW(tokenize("a red dragon"), VocabularyError);
    EXPECT_THROW(tokenize("a <pad> circle"), VocabularyError);
    EXPECT_THROW(detokenize({kStartId, 999}), VocabularyError);
}

TEST(Tokenize, PaddingAndMask) {
    const auto ids = pad_tokens(tokenize("a red circle"));
    ASSERT_EQ(ids.size(), kMaxTokens);
    EXPECT_EQ(ids[5], kPadId);
    const auto m = pad_mask(ids);
    EXPECT_FALSE(m[4]);
    EXPECT_TRUE(m[5]);
    EXPECT_EQ(detokenize(ids), "a red circle");
    EXPECT_THROW(pad_tokens(std::vector<int>(25, 3)), ContractError);
}

TEST(Vocabulary, StandardIsSmallAndFileRoundTrips) {
    const auto& v = Vocabulary::standard();
    EXPECT_LE(v.size(), 256u);
    EXPECT_EQ(v.word(kPadId), "<pad>");
    const auto path = std::filesystem::temp_directory_path() / "rged_vocab_test.txt";
    v.save(path);
    const Vocabulary back = Vocabulary::load(path);
    EXPECT_EQ(back.words(), v.words());
    EXPECT_EQ(back.id("crown"), v.id("crown"));
    std::filesystem::remove(path);
}

TEST(Vocabulary, RejectsDuplicatesAndMissingSentinels) {
    EXPECT_THROW(Vocabulary({"<pad>", "<start>", "<end>", "a", "a"}), DataError);
    EXPECT_THROW(Vocabulary({"a", "<start>", "<end>"}), DataError);
}

TEST(Describe, Templates) {
    EXPECT_EQ(describe(SceneGraph{}).text, "an empty gray canvas");
    EXPECT_EQ(describe(one_object(ShapeKind::circle, Color::red)).text, "a medium red circle");
    SceneGraph g;
    g.objects.push_back({ShapeKind::square, Color::blue, SizeClass::large, 2, 0, Accessory::collar});
    g.objects.push_back({ShapeKind::circle, Color::red, SizeClass::small, 0, 3, Accessory::none});
    g.sort_raster();
    EXPECT_EQ(describe(g).text, "a small red circle and a large blue square with a collar");
    EXPECT_EQ(describe(g), describe(g));
}

TEST(Describe, CorpusCaptionsFitAndRoundTrip) {
    for (const auto& s : generate_corpus(2000, 12)) {
        const Caption c = describe(s.scene);
        EXPECT_LE(c.ids.size(), kMaxTokens);
        EXPECT_EQ(tokenize(detokenize(c.ids)), c.ids);
        EXPECT_EQ(render_phrases(parse_phrases(c.text)), c.text);
    }
}

TEST(Grammar, ParseRenderRoundTrip) {
    Rng rng(2);
    for (int i = 0; i < 500; ++i) {
        SceneEdit e;
        e.op = static_cast<EditOp>(rng.below(4));
        e.color = static_cast<Color>(rng.below(kColorCount));
        e.shape = static_cast<ShapeKind>(rng.below(kShapeCount));
        e.size = static_cast<SizeClass>(rng.below(kSizeCount));
        e.new_color = static_cast<Color>(rng.below(kColorCount));
        e.accessory = static_cast<Accessory>(e.op == EditOp::give ? 1 + rng.below(2) : rng.below(3));
        const Instruction ins = make_instruction(e);
        const Instruction back = parse(ins.text);
        EXPECT_EQ(back.edit, e) << ins.text;
        EXPECT_EQ(back.text, ins.text);
    }
}

TEST(Grammar, RejectsNonProductions) {
    for (const char* s : {"", "remove red circle", "add the small red circle", "change the red circle blue",
                          "give the red circle a none", "remove the red circle now", "add a red circle"}) {
        EXPECT_THROW(parse(s), GrammarError) << s;
    }
}

TEST(ApplyInstruction, Examples) {
    const Caption red = make_caption("a red circle");
    EXPECT_EQ(apply_instruction(red, parse("change the red circle to blue")).text, "a blue circle");
    EXPECT_EQ(apply_instruction(red, parse("remove the red circle")).text, "an empty gray canvas");
    EXPECT_EQ(apply_instruction(red, parse("add a small green square")).text, "a red circle and a small green square");
    EXPECT_EQ(apply_instruction(red, parse("give the red circle a crown")).text, "a red circle with a crown");
}

TEST(ApplyInstruction, MissingTargetIsUnresolved) {
    EXPECT_THROW(apply_instruction(make_caption("a red circle"), parse("remove the blue circle")), UnresolvedTargetError);
    EXPECT_THROW(apply_instruction(make_caption("an empty gray canvas"), parse("remove the blue circle")), UnresolvedTargetError);
}

TEST(Propose, SingleObjectRemove) {
    const SceneGraph g = one_object(ShapeKind::circle, Color::red);
    bool seen = false;
    for (std::uint64_t seed = 0; seed < 50 && !seen; ++seed) {
        const Instruction ins = propose_instruction(describe(g), g, seed);
        if (ins.edit.op == EditOp::remove) {
            EXPECT_EQ(ins.text, "remove the red circle");
            seen = true;
        }
    }
    EXPECT_TRUE(seen);
}

TEST(Propose, AllOpKindsOccurOnTwoObjectScene) {
    SceneGraph g;
    g.objects.push_back({ShapeKind::circle, Color::red, SizeClass::small, 0, 1, Accessory::none});
    g.objects.push_back({ShapeKind::triangle, Color::green, SizeClass::large, 2, 2, Accessory::crown});
    std::set<EditOp> ops;
    for (std::uint64_t seed = 0; seed < 1000; ++seed) {
        const Instruction ins = propose_instruction(describe(g), g, seed);
        EXPECT_EQ(parse(ins.text), ins);
        EXPECT_TRUE(edit_feasible(g, ins.edit));
        ops.insert(ins.edit.op);
    }
    EXPECT_EQ(ops.size(), 4u);
}

TEST(Propose, DeterministicInSeed) {
    const auto s = generate_corpus(1, 5)[0];
    EXPECT_EQ(propose_instruction(describe(s.scene), s.scene, 9), propose_instruction(describe(s.scene), s.scene, 9));
}

TEST(Propose, EmptySceneProposesAdd) {
    const SceneGraph g;
    EXPECT_EQ(propose_instruction(describe(g), g, 1).edit.op, EditOp::add);
}

// The text path (caption rewriting) and the scene path (edit then describe)
// must agree for every proposed instruction.
TEST(Commutativity, TextPathMatchesScenePath) {
    const auto corpus = generate_corpus(1500, 77);
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        const auto& s = corpus[i];
        const Caption to = describe(s.scene);
        const Instruction ins = propose_instruction(to, s.scene, i);
        const OracleEdit o = make_oracle_edit(s, ins, i * 31 + 1);
        EXPECT_EQ(o.instruction, ins.text);
        EXPECT_EQ(apply_instruction(to, ins), describe(o.edited_scene)) << ins.text;
    }
}

} // namespace
