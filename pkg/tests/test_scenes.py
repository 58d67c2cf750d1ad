import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import phrase_matches
from swimlab.numerics import SeededRng
from swimlab.prompt import COLORS, INS_CLOSE, INS_OPEN, SHAPES, TEXTURES, SynonymTable, default_vocabulary
from swimlab.scenes import (
    FEATURE_DIM,
    InstanceMask,
    Scene,
    SceneObject,
    generate_dataset,
    generate_record,
    generate_scene,
    read_dataset,
    record_to_json,
    write_dataset,
)

VOCAB = default_vocabulary()


def test_scene_is_deterministic():
    a = generate_scene(SeededRng(0), (12, 12), (3, 3))
    b = generate_scene(SeededRng(0), (12, 12), (3, 3))
    assert a == b
    assert len(a.objects) == 3


def test_single_object_scene():
    scene = generate_scene(SeededRng(4), (12, 12), (1, 1))
    assert len(scene.objects) == 1


def test_crowded_grid_is_rejected():
    with pytest.raises(ValueError, match="scene too crowded"):
        generate_scene(SeededRng(0), (4, 4), (10, 10))


def test_tiny_grid_is_rejected():
    with pytest.raises(ValueError):
        generate_scene(SeededRng(0), (3, 8), (1, 1))


@settings(max_examples=60)
@given(st.integers(0, 2**32 - 1), st.integers(10, 14), st.integers(10, 14))
def test_scene_invariants(seed, h, w):
    scene = generate_scene(SeededRng(seed), (h, w), (1, 3))
    seen = set()
    for o in scene.objects:
        assert o.cells
        assert seen.isdisjoint(o.cells)
        seen.update(o.cells)
    keys = [(o.shape, o.color, o.texture) for o in scene.objects]
    assert any(keys.count(k) == 1 for k in keys)


@settings(max_examples=40)
@given(st.integers(0, 2**32 - 1))
def test_features_are_lossless(seed):
    scene = generate_scene(SeededRng(seed))
    feats = scene.features().reshape(scene.grid_h, scene.grid_w, FEATURE_DIM)
    nc, ns, nt = len(COLORS), len(SHAPES), len(TEXTURES)
    decoded = {}
    for r in range(scene.grid_h):
        for c in range(scene.grid_w):
            f = feats[r, c]
            if not f.any():
                continue
            key = (SHAPES[int(np.argmax(f[nc : nc + ns]))], COLORS[int(np.argmax(f[:nc]))], TEXTURES[int(np.argmax(f[nc + ns : nc + ns + nt]))])
            assert f[nc + ns + nt] == r / (scene.grid_h - 1)
            decoded.setdefault(key, set()).add((r, c))
    expected = {}
    for o in scene.objects:
        expected.setdefault((o.shape, o.color, o.texture), set()).update(o.cells)
    assert decoded == expected


def test_single_red_circle_record():
    obj = SceneObject("circle", "red", "striped", ((2, 2), (2, 3), (3, 2), (3, 3)))
    scene = Scene(12, 12, (obj,))
    rec = generate_record(SeededRng(0), scene, VOCAB, templates=("what texture is <region> ?",))
    # shape alone discriminates in a one-object scene
    assert rec.prompt_refined == f"what texture is the {INS_OPEN} circle {INS_CLOSE} ?"
    assert rec.answer == "striped"
    assert rec.mask.cells == obj.cells


def test_two_circles_differing_in_color():
    a = SceneObject("circle", "red", "plain", ((0, 0), (0, 1), (1, 0), (1, 1)))
    b = SceneObject("circle", "blue", "plain", ((5, 5), (5, 6), (6, 5), (6, 6)))
    rec = generate_record(SeededRng(1), Scene(12, 12, (a, b)), VOCAB, templates=("what texture is <region> ?",))
    words = rec.prompt_refined.split()
    assert any(c in words for c in ("red", "blue"))


def test_record_is_deterministic():
    scene = generate_scene(SeededRng(3))
    a = generate_record(SeededRng(9), scene, VOCAB)
    b = generate_record(SeededRng(9), scene, VOCAB)
    assert a == b


@settings(max_examples=40)
@given(st.integers(0, 2**32 - 1))
def test_record_invariants(seed):
    rec = generate_dataset(seed, 1, VOCAB)[0]
    target = [o for o in rec.scene.objects if set(o.cells) == set(rec.mask.cells)]
    assert len(target) == 1
    assert rec.answer == target[0].texture
    words = rec.prompt_refined.split()
    lo = max(i for i in range(words.index(INS_OPEN)) if words[i] == "the")
    expr = [w for w in words[lo : words.index(INS_CLOSE)] if w != INS_OPEN]
    attrs = [o.attrs() for o in rec.scene.objects]
    assert phrase_matches(expr, attrs) == [target[0].attrs()]
    ids = [w for w in words if w not in (INS_OPEN, INS_CLOSE)]
    s, e = rec.noun_span
    assert ids[s : e + 1] == [target[0].shape]


def test_dataset_prefix_property():
    small = generate_dataset(5, 10, VOCAB)
    big = generate_dataset(5, 30, VOCAB)
    assert big[:10] == small


def test_synonym_rate_swaps_nouns():
    recs = generate_dataset(0, 200, VOCAB, synonyms=SynonymTable(), synonym_rate=0.5)
    swapped = sum(r.prompt_refined.split()[r.prompt_refined.split().index(INS_OPEN) + 1] not in SHAPES for r in recs)
    assert 50 < swapped < 150


def test_mask_rle_round_trip():
    m = InstanceMask(4, 5, ((0, 3), (0, 4), (1, 0), (3, 4)))
    assert m.rle() == [[3, 3], [19, 1]]
    assert InstanceMask.from_rle(4, 5, m.rle()) == m


def test_empty_dataset_round_trip(tmp_path):
    path = tmp_path / "empty.jsonl"
    write_dataset([], path)
    assert path.read_bytes() == b""
    assert read_dataset(path) == []


def test_thousand_records_round_trip(tmp_path):
    recs = generate_dataset(0, 1000, VOCAB, synonyms=SynonymTable(), synonym_rate=0.3)
    path = tmp_path / "d.jsonl"
    write_dataset(recs, path)
    assert read_dataset(path) == recs
    first = path.read_bytes()
    write_dataset(read_dataset(path), path)
    assert path.read_bytes() == first


def test_jsonl_field_order():
    line = record_to_json(generate_dataset(0, 1, VOCAB)[0])
    keys = ["id", "grid", "objects", "prompt_raw", "prompt_refined", "noun_span", "answer", "mask_rle"]
    positions = [line.index(f'"{k}"') for k in keys]
    assert positions == sorted(positions)


def test_truncated_line_is_reported(tmp_path):
    path = tmp_path / "t.jsonl"
    write_dataset(generate_dataset(0, 3, VOCAB), path)
    text = path.read_text()
    path.write_text(text[: len(text) - 15])
    with pytest.raises(ValueError, match="line 3"):
        read_dataset(path)
