import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from floodbench.data import (FLOOD_CLASS_RATIOS, ScenePair, SplitSpec, SynthConfig, TileSet, class_ratios,
                             dataset_digest, generate_synthetic, iter_synthetic, load_scene_dir, sample_labeled,
                             split_scenes, tile_scene, tiles_per_axis, write_scene_dir)
from floodbench.errors import ConfigError, DataError


def blank_scene(h, w, scene_id="s", fill=0):
    return ScenePair(np.zeros((3, h, w), np.uint8), np.zeros((3, h, w), np.uint8),
                     np.full((h, w), fill, np.uint8), scene_id)


def id_scenes(n):
    return [blank_scene(16, 16, f"scene_{i:04d}") for i in range(n)]


# tiling

def test_tile_counts_for_full_scene():
    scene = blank_scene(1024, 1024)
    assert len(tile_scene(scene, 256, 128)) == 49
    assert len(tile_scene(scene, 256, 256)) == 16


def test_tile_count_formula():
    assert tiles_per_axis(1024, 256, 128) == 7
    assert tiles_per_axis(1024, 256, 256) == 4
    assert tiles_per_axis(700, 256, 128) == 4


def test_single_tile_scene_is_identity(rng):
    scene = ScenePair(rng.integers(0, 256, (3, 256, 256), dtype=np.uint8),
                      rng.integers(0, 256, (3, 256, 256), dtype=np.uint8),
                      rng.integers(0, 4, (256, 256), dtype=np.uint8), "one")
    for stride in (1, 128, 500):
        tiles = tile_scene(scene, 256, stride)
        assert len(tiles) == 1
        np.testing.assert_array_equal(tiles[0].pre, scene.pre)
        np.testing.assert_array_equal(tiles[0].label, scene.label)


def test_tile_larger_than_scene():
    with pytest.raises(DataError):
        tile_scene(blank_scene(128, 300), 256, 128)
    with pytest.raises(ConfigError):
        tile_scene(blank_scene(256, 256), 256, 0)


@given(st.integers(32, 90), st.integers(32, 90), st.sampled_from([16, 32]), st.integers(4, 40))
@settings(max_examples=25)
def test_tile_count_law(h, w, tile, stride):
    tiles = tile_scene(blank_scene(h, w), tile, stride)
    assert len(tiles) == tiles_per_axis(h, tile, stride) * tiles_per_axis(w, tile, stride)
    for t in tiles:
        r, c = t.origin
        assert r + tile <= h and c + tile <= w
        assert t.label.shape == (tile, tile)
        assert np.bincount(t.label.ravel(), minlength=4).sum() == tile * tile


# splits and labeled sampling

def test_split_sizes():
    assert [len(p) for p in split_scenes(id_scenes(10))] == [6, 2, 2]
    assert [len(p) for p in split_scenes(id_scenes(1064))] == [638, 213, 213]


def test_split_is_deterministic_and_disjoint():
    scenes = id_scenes(37)
    a = [[s.scene_id for s in part] for part in split_scenes(scenes, SplitSpec(seed=4))]
    b = [[s.scene_id for s in part] for part in split_scenes(list(reversed(scenes)), SplitSpec(seed=4))]
    assert a == b
    sets = [set(p) for p in a]
    assert not (sets[0] & sets[1]) and not (sets[0] & sets[2]) and not (sets[1] & sets[2])
    assert len(set().union(*sets)) == 37
    c = [[s.scene_id for s in part] for part in split_scenes(scenes, SplitSpec(seed=5))]
    assert c != a


def test_split_spec_validation():
    with pytest.raises(ConfigError):
        SplitSpec(ratios=(0.5, 0.5, 0.5))
    with pytest.raises(ConfigError):
        SplitSpec(label_ratio=0.0)
    with pytest.raises(DataError):
        split_scenes(id_scenes(3))


def test_sample_labeled_ratios():
    scenes = id_scenes(100)
    lab, unl = sample_labeled(scenes, 1.0)
    assert len(lab) == 100 and unl == []
    lab, unl = sample_labeled(scenes, 0.5, seed=3)
    assert len(lab) == 50 and len(unl) == 50
    lab, unl = sample_labeled(id_scenes(5), 0.05)
    assert len(lab) == 1
    with pytest.raises(ConfigError):
        sample_labeled(scenes, 1.5)


@given(st.integers(0, 10_000), st.sampled_from([0.05, 0.1, 0.2, 0.5]))
@settings(max_examples=20)
def test_labeled_pool_partitions_tiles(seed, ratio):
    scenes = [blank_scene(32, 32, f"s{i}") for i in range(12)]
    tiles = [t for s in scenes for t in tile_scene(s, 16, 8)]
    lab, unl = sample_labeled(tiles, ratio, seed)
    assert len(lab) + len(unl) == len(tiles)
    assert not ({t.scene_id for t in lab} & {t.scene_id for t in unl})


def test_tileset_stacking():
    scenes = [blank_scene(32, 32, f"s{i}", fill=i % 4) for i in range(3)]
    ts = TileSet.from_scenes(scenes, 16, 16)
    assert len(ts) == 12 and ts.pre.shape == (12, 3, 16, 16)
    sub = ts.subset([0, 5])
    assert sub.scene_ids == ["s0", "s1"]
    with pytest.raises(DataError):
        TileSet.from_tiles([])


# synthetic generator

def test_synthetic_determinism():
    cfg = SynthConfig(scenes=3, size=64)
    a, b = generate_synthetic(cfg, seed=2), generate_synthetic(cfg, seed=2)
    assert dataset_digest(a) == dataset_digest(b)
    assert dataset_digest(generate_synthetic(cfg, seed=3)) != dataset_digest(a)


def test_synthetic_change_contract():
    for s in generate_synthetic(SynthConfig(scenes=6, size=96), seed=1):
        damaged = s.label > 0
        changed = (s.pre != s.post).any(axis=0)
        assert changed[damaged].all()


def test_intact_buildings_unchanged():
    # no flood water means only damaged buildings may change
    scenes = generate_synthetic(SynthConfig(scenes=4, size=96, flood_fraction=0.0), seed=5)
    for s in scenes:
        intact = s.label == 0
        np.testing.assert_array_equal(s.pre[:, intact], s.post[:, intact])


def test_label_only_stream_matches_rendered():
    cfg = SynthConfig(scenes=3, size=64)
    full = generate_synthetic(cfg, seed=9)
    cheap = list(iter_synthetic(cfg, seed=9, render=False))
    for a, b in zip(full, cheap):
        np.testing.assert_array_equal(a.label, b.label)


def test_synthetic_ratio_audit():
    scenes = iter_synthetic(SynthConfig(scenes=200, size=256), seed=0, render=False)
    ratios = class_ratios(s.label for s in scenes)
    np.testing.assert_allclose(ratios, FLOOD_CLASS_RATIOS, atol=0.02)


def test_synth_config_validation():
    with pytest.raises(ConfigError):
        SynthConfig(class_ratios=(0.5, 0.5, 0.5, 0.5))
    with pytest.raises(ConfigError):
        SynthConfig(scenes=1, size=32, class_ratios=(0.999, 0.0005, 0.0003, 0.0002))
    with pytest.raises(ConfigError):
        SynthConfig(building_coverage=0.05, class_ratios=(0.7, 0.1, 0.1, 0.1))
    assert sum(SynthConfig(class_ratios=(0.917, 0.0428, 0.0368, 0.0033)).class_ratios) == pytest.approx(1.0)


# disk round trip

def test_round_trip(tmp_path):
    scenes = generate_synthetic(SynthConfig(scenes=3, size=64), seed=4)
    manifest = write_scene_dir(tmp_path, scenes)
    loaded = load_scene_dir(tmp_path)
    assert [s.scene_id for s in loaded] == [s.scene_id for s in scenes]
    for a, b in zip(scenes, loaded):
        np.testing.assert_array_equal(a.pre, b.pre)
        np.testing.assert_array_equal(a.post, b.post)
        np.testing.assert_array_equal(a.label, b.label)
    assert dataset_digest(loaded) == manifest["digest"]


def test_bad_label_names_scene(tmp_path):
    write_scene_dir(tmp_path, generate_synthetic(SynthConfig(scenes=2, size=64), seed=0))
    bad = sorted(p for p in tmp_path.iterdir() if p.is_dir())[1]
    label = np.asarray(Image.open(bad / "label.png")).copy()
    label[0, 0] = 4
    Image.fromarray(label, mode="L").save(bad / "label.png")
    with pytest.raises(DataError, match=bad.name):
        load_scene_dir(tmp_path)
    assert len(load_scene_dir(tmp_path, strict=False)) == 1


def test_missing_file_and_directory(tmp_path):
    (tmp_path / "broken").mkdir()
    (tmp_path / "broken" / "pre.png").write_bytes(b"")
    with pytest.raises(DataError, match="broken"):
        load_scene_dir(tmp_path)
    with pytest.raises(DataError):
        load_scene_dir(tmp_path / "nope")


def test_empty_directory_warns(tmp_path, caplog):
    with caplog.at_level(logging.WARNING):
        assert load_scene_dir(tmp_path) == []
    assert "no scenes" in caplog.text


def test_scene_shape_validation():
    with pytest.raises(DataError, match="bad"):
        ScenePair(np.zeros((3, 4, 4), np.uint8), np.zeros((3, 4, 5), np.uint8), np.zeros((4, 4), np.uint8), "bad")
