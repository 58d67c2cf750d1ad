import itertools

import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import phrase_matches
from swimlab.numerics import SeededRng
from swimlab.prompt import (
    COLORS,
    INS_CLOSE,
    INS_OPEN,
    REGION,
    RESERVED,
    SHAPES,
    TEXTURES,
    SynonymTable,
    Vocabulary,
    default_vocabulary,
    mark_noun,
    nlref_lite,
    perturb_synonyms,
    replace_placeholder,
    tokenize_and_locate,
)

VOCAB = default_vocabulary()


def obj(shape, color, texture="plain"):
    return {"shape": shape, "color": color, "texture": texture}


# ---------------------------------------------------------------- vocabulary


def test_reserved_ids_are_stable():
    assert [VOCAB.id(t) for t in RESERVED] == [0, 1, 2, 3, 4]
    assert Vocabulary(["zebra"]).id("zebra") == 5


def test_vocabulary_json_round_trip():
    text = VOCAB.to_json()
    assert Vocabulary.from_json(text) == VOCAB
    assert list(__import__("json").loads(text).values()) == list(range(len(VOCAB)))


def test_vocabulary_is_bijective():
    ids = [VOCAB.id(VOCAB.token(i)) for i in range(len(VOCAB))]
    assert ids == list(range(len(VOCAB)))


# ---------------------------------------------------------------- nlref_lite


def test_red_circle_among_other_circles():
    target = obj("circle", "red")
    scene = [target, obj("circle", "blue"), obj("square", "red")]
    assert nlref_lite(target, scene) == ("the red circle", "circle")


def test_single_object_scene_uses_shape_only():
    target = obj("triangle", "green", "dotted")
    assert nlref_lite(target, [target]) == ("the triangle", "triangle")


def test_two_red_circles_need_texture():
    target = obj("circle", "red", "striped")
    scene = [target, obj("circle", "red", "plain"), obj("circle", "blue", "striped")]
    expr, noun = nlref_lite(target, scene)
    assert (expr, noun) == ("the striped red circle", "circle")
    # every strictly shorter phrase of the same form matches at least two objects
    words = expr.split()
    for drop in (1, 2):
        for keep in itertools.combinations(words[1:-1], 2 - drop):
            assert len(phrase_matches(["the", *keep, "circle"], scene)) >= 2


def test_ambiguous_referent():
    target = obj("circle", "red", "striped")
    with pytest.raises(ValueError, match="ambiguous referent"):
        nlref_lite(target, [target, dict(target)])


def test_requires_shape_and_color():
    with pytest.raises(ValueError):
        nlref_lite({"shape": "circle"})


attr = st.tuples(st.sampled_from(SHAPES), st.sampled_from(COLORS), st.sampled_from(TEXTURES))


@given(st.lists(attr, min_size=1, max_size=6), st.data())
def test_expression_is_unique_and_minimal(objs, data):
    scene = [obj(*a) for a in objs]
    i = data.draw(st.integers(0, len(scene) - 1))
    try:
        expr, noun = nlref_lite(scene[i], scene)
    except ValueError:
        assert objs.count(objs[i]) > 1
        return
    words = expr.split()
    assert noun == scene[i]["shape"] == words[-1]
    assert phrase_matches(words, scene) == [o for o in scene if o == scene[i]]
    for w in words[1:-1]:
        shorter = [x for x in words if x != w]
        assert len(phrase_matches(shorter, scene)) >= 2


# ---------------------------------------------------------------- replace / mark


def test_replace_in_middle():
    out, span = replace_placeholder(f"describe {REGION} in the scene", "the red circle")
    assert out == "describe the red circle in the scene"
    assert span == (1, 4)


def test_replace_needs_exactly_one_placeholder():
    with pytest.raises(ValueError):
        replace_placeholder("describe the scene", "the red circle")
    with pytest.raises(ValueError):
        replace_placeholder(f"{REGION} and {REGION}", "x")


def test_replace_at_start():
    out, span = replace_placeholder(f"{REGION} is what ?", "the square")
    assert out == "the square is what ?"
    assert span == (0, 2)


def test_mark_simple():
    out = mark_noun("describe the red circle in the scene", "circle")
    assert out == f"describe the red {INS_OPEN} circle {INS_CLOSE} in the scene"


def test_mark_only_inside_expression():
    replaced, span = replace_placeholder(f"circle {REGION}", "the red circle")
    assert mark_noun(replaced, "circle", within=span) == f"circle the red {INS_OPEN} circle {INS_CLOSE}"


def test_mark_missing_noun():
    with pytest.raises(ValueError):
        mark_noun("describe the red square", "circle")


# ---------------------------------------------------------------- tokenize


def test_tokenize_strips_markers():
    ids, span = tokenize_and_locate(f"the {INS_OPEN} circle {INS_CLOSE}", VOCAB)
    assert ids == [VOCAB.id("the"), VOCAB.id("circle")]
    assert span == (1, 1)


def test_tokenize_requires_tag():
    with pytest.raises(ValueError, match="no tagged noun"):
        tokenize_and_locate("the circle", VOCAB)


def test_tokenize_multi_word_span():
    vocab = Vocabulary(["a", "coffee", "cup", "here"])
    ids, span = tokenize_and_locate(f"a {INS_OPEN} coffee cup {INS_CLOSE} here", vocab)
    assert span == (1, 2)
    assert vocab.decode(ids[1:3]) == ["coffee", "cup"]


@pytest.mark.parametrize(
    "text",
    [f"{INS_OPEN} circle", f"circle {INS_CLOSE}", f"{INS_CLOSE} circle {INS_OPEN}", f"{INS_OPEN} {INS_OPEN} circle {INS_CLOSE}"],
)
def test_tokenize_unbalanced(text):
    with pytest.raises(ValueError):
        tokenize_and_locate(text, VOCAB)


def test_tokenize_out_of_vocabulary():
    with pytest.raises(ValueError, match="out-of-vocabulary"):
        tokenize_and_locate(f"the {INS_OPEN} hexagon {INS_CLOSE}", VOCAB)


@given(attr, st.sampled_from(["what texture is <region> ?", "<region> ?", "circle <region> circle"]))
def test_round_trip_span_decodes_to_noun(a, template):
    response = obj(*a)
    expr, noun = nlref_lite(response, [response])
    replaced, span = replace_placeholder(template, expr)
    refined = mark_noun(replaced, noun, within=span)
    assert REGION not in refined.split()
    ids, (s, e) = tokenize_and_locate(refined, VOCAB)
    assert VOCAB.decode(ids[s : e + 1]) == noun.split()


# ---------------------------------------------------------------- synonyms


def test_perturb_replaces_tagged_noun():
    table = SynonymTable({"circle": ("disk",)})
    out, changed = perturb_synonyms(f"{INS_OPEN} circle {INS_CLOSE}", table, SeededRng(0))
    assert (out, changed) == (f"{INS_OPEN} disk {INS_CLOSE}", True)


def test_perturb_without_synonyms_is_flagged_noop():
    text = f"the {INS_OPEN} circle {INS_CLOSE}"
    assert perturb_synonyms(text, SynonymTable({}), SeededRng(0)) == (text, False)


def test_perturb_deterministic():
    text = f"what texture is the {INS_OPEN} square {INS_CLOSE} ?"
    runs = {perturb_synonyms(text, SynonymTable(), SeededRng(5))[0] for _ in range(5)}
    assert len(runs) == 1


def test_synonym_maps_back_to_head():
    table = SynonymTable()
    assert "circle" in table.lookup("disk")
    assert "disk" not in table.lookup("disk")
    assert table.canonical("wedge") == "triangle"


@given(attr, st.integers(0, 2**32 - 1))
def test_perturb_touches_only_the_span(a, seed):
    response = obj(*a)
    scene = [response, obj(a[0], "red" if a[1] != "red" else "blue", a[2])]
    expr, noun = nlref_lite(response, scene)
    replaced, span = replace_placeholder("what texture is <region> ?", expr)
    refined = mark_noun(replaced, noun, within=span)
    out, changed = perturb_synonyms(refined, SynonymTable(), SeededRng(seed))
    assert changed
    before, after = refined.split(), out.split()
    lo, hi = before.index(INS_OPEN), before.index(INS_CLOSE)
    assert before[: lo + 1] == after[: lo + 1]
    assert before[hi:] == after[len(after) - (len(before) - hi) :]
    new = " ".join(after[lo + 1 : after.index(INS_CLOSE)])
    assert new in SynonymTable().lookup(noun)
    assert SynonymTable().canonical(new) == noun
