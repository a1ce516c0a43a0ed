import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from diffmix.errors import ManifestMissing, TileCorrupt
from diffmix.label_space import SemanticLabelMap
from diffmix.tiles import (DatasetWriter, Tile, image_to_unit, iter_tiles, read_manifest, unit_to_image,
                           write_dataset)

from conftest import VOCAB3, random_rect_map


def _tile(rng, tid, shape=(20, 24)):
    label = random_rect_map(rng, shape, n=5, vocab=VOCAB3)
    return Tile(tid, rng.integers(0, 256, (*shape, 3), dtype=np.uint8), label)


def test_round_trip_bit_exact(tmp_path, rng):
    tiles = [_tile(rng, f"t{i}") for i in range(3)]
    write_dataset(tmp_path, tiles, VOCAB3, note="x")
    got = list(iter_tiles(tmp_path))
    assert [t.tile_id for t in got] == ["t0", "t1", "t2"]
    for a, b in zip(tiles, got):
        np.testing.assert_array_equal(a.image, b.image)
        assert a.label == b.label
    m = read_manifest(tmp_path)
    assert m["note"] == "x" and m["tiles"][0] == {"id": "t0", "height": 20, "width": 24}


def test_large_instance_ids_survive(tmp_path):
    inst = np.array([[0, 65535], [40000, 0]])
    cls = (inst > 0).astype(int)
    write_dataset(tmp_path, [Tile("a", np.zeros((2, 2, 3), np.uint8), SemanticLabelMap(inst, cls, VOCAB3))], VOCAB3)
    [t] = iter_tiles(tmp_path)
    np.testing.assert_array_equal(t.label.instance_ids, inst)


def test_identical_content_identical_bytes(tmp_path, rng):
    tiles = [_tile(rng, "a")]
    write_dataset(tmp_path / "1", tiles, VOCAB3)
    write_dataset(tmp_path / "2", tiles, VOCAB3)
    for name in ("image.png", "instance.png", "class.png"):
        assert (tmp_path / "1/tiles/a" / name).read_bytes() == (tmp_path / "2/tiles/a" / name).read_bytes()


def test_writer_writes_manifest_on_close(tmp_path, rng):
    with DatasetWriter(tmp_path, VOCAB3, mode="m") as w:
        w.add(_tile(rng, "b"))
        w.add(_tile(rng, "a"))
    assert [e["id"] for e in read_manifest(tmp_path)["tiles"]] == ["a", "b"]


def test_missing_manifest(tmp_path):
    with pytest.raises(ManifestMissing):
        read_manifest(tmp_path)


def test_missing_png_is_corrupt(tmp_path, rng):
    write_dataset(tmp_path, [_tile(rng, "a")], VOCAB3)
    (tmp_path / "tiles/a/class.png").unlink()
    with pytest.raises(TileCorrupt) as e:
        list(iter_tiles(tmp_path))
    assert e.value.tile_id == "a"


def test_bad_image_rejected(tmp_path, rng):
    t = _tile(rng, "a")
    with pytest.raises(TileCorrupt):
        write_dataset(tmp_path, [Tile("a", t.image.astype(np.float32), t.label)], VOCAB3)


def test_manifest_is_json(tmp_path, rng):
    write_dataset(tmp_path, [_tile(rng, "a")], VOCAB3)
    assert json.loads((tmp_path / "manifest.json").read_text())["classes"]["names"][0] == "background"


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_unit_round_trip(seed):
    img = np.random.default_rng(seed).integers(0, 256, (5, 7, 3), dtype=np.uint8)
    u = image_to_unit(img)
    assert u.shape == (3, 5, 7) and u.min() >= -1 and u.max() <= 1
    np.testing.assert_array_equal(unit_to_image(u), img)


def test_unit_to_image_clamps():
    out = unit_to_image(np.full((3, 1, 1), 5.0))
    assert out.dtype == np.uint8 and out.max() == 255
