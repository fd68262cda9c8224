import numpy as np
import pytest
from PIL import Image

from drtanet.data import (
    PCD_PATCHES_PER_PAIR,
    DatasetSpec,
    ImagePair,
    Shape,
    fold_assignment,
    iter_pcd_patches,
    label_map,
    load_dataset,
    load_from_spec,
    load_mask,
    load_records,
    pair_paths,
    pcd_preprocess,
    pcd_split,
    synth_generate,
    synth_pair,
    vlcmucd_split,
    write_dataset,
)


def panorama(seed=0):
    gen = np.random.default_rng(seed)
    t0 = gen.integers(0, 256, size=(224, 1024, 3), dtype=np.uint8)
    t1 = gen.integers(0, 256, size=(224, 1024, 3), dtype=np.uint8)
    mask = (gen.random((224, 1024)) < 0.2).astype(np.uint8)
    return ImagePair(t0, t1, mask, name=f"p{seed}")


def test_pcd_pair_gives_sixty_patches():
    pair = panorama()
    patches = pcd_preprocess(pair)
    assert len(patches) == 60 == PCD_PATCHES_PER_PAIR
    assert all(p.size == (224, 224) for p in patches)
    # 15 windows, each followed by its 0/90/180/270 degree rotations
    np.testing.assert_array_equal(patches[4 * 3].t0, pair.t0[:, 168:392])
    np.testing.assert_array_equal(patches[4 * 3 + 1].mask, np.rot90(pair.mask[:, 168:392]))
    np.testing.assert_array_equal(patches[-4].t1, pair.t1[:, 784:1008])


def test_pcd_rejects_other_sizes():
    with pytest.raises(ValueError, match="224x1024"):
        pcd_preprocess(ImagePair(np.zeros((224, 1000, 3), np.uint8), np.zeros((224, 1000, 3), np.uint8)))


def test_four_quarter_turns_are_identity():
    pair = panorama(1).transformed(lambda a: a[:, :224])
    back = pair.rotated(1).rotated(1).rotated(1).rotated(1)
    for a, b in [(pair.t0, back.t0), (pair.t1, back.t1), (pair.mask, back.mask)]:
        np.testing.assert_array_equal(a, b)


def test_pcd_tree_counts(pcd_root):
    for subset in ("tsunami", "gsv"):
        assert sum(1 for _ in iter_pcd_patches(pcd_root, [subset])) == 6000
    assert sum(1 for _ in iter_pcd_patches(pcd_root)) == 12000


@pytest.mark.parametrize("fold", range(5))
def test_pcd_folds_partition_patches(fold):
    items = list(range(6000))
    train = pcd_split(items, "train", fold=fold)
    test = pcd_split(items, "test", fold=fold)
    assert len(train) == 4800 and len(test) == 1200
    assert sorted(train + test) == items


def test_fold_assignment_is_seeded():
    np.testing.assert_array_equal(fold_assignment(100, 5, 3), fold_assignment(100, 5, 3))
    assert not np.array_equal(fold_assignment(100, 5, 3), fold_assignment(100, 5, 4))
    assert np.bincount(fold_assignment(100, 5, 3)).tolist() == [20] * 5


def test_load_from_spec_pcd_split(tmp_path):
    root = tmp_path / "pcd"
    write_dataset([panorama(2), panorama(3)], root / "gsv")
    spec = DatasetSpec(source="pcd_gsv", split="test", root=str(root), resize_to=(64, 64))
    test = load_from_spec(spec)
    train = load_from_spec(DatasetSpec(source="pcd_gsv", split="train", root=str(root), resize_to=(64, 64)))
    assert len(test) == 24 and len(train) == 96
    assert test[0].size == (64, 64)
    assert not {p.name for p in test} & {p.name for p in train}


def test_vl_cmu_cd_split_counts(vl_cmu_cd_root):
    train, test = vlcmucd_split(vl_cmu_cd_root)
    assert (len(train), len(test)) == (933, 429)
    assert not {r.sequence for r in train} & {r.sequence for r in test}


def test_vl_cmu_cd_loading_rotates_training_pairs(vl_cmu_cd_root):
    train, test = vlcmucd_split(vl_cmu_cd_root)
    loaded = load_records(train[:2], resize_to=(32, 32), rotate=True)
    assert len(loaded) == 8 and loaded[0].size == (32, 32)
    assert len(load_records(test[:3], resize_to=(32, 32))) == 3


def test_vl_cmu_cd_split_file_in_root(vl_cmu_cd_root, tmp_path):
    import json
    import shutil

    for seq in ("000", "120"):
        shutil.copytree(vl_cmu_cd_root / seq, tmp_path / seq)
    (tmp_path / "split.json").write_text(json.dumps({"train": ["120"], "test": ["000"]}))
    train, test = vlcmucd_split(tmp_path)
    assert {r.sequence for r in train} == {"120"} and {r.sequence for r in test} == {"000"}


def test_vl_cmu_cd_missing_sequence(tmp_path):
    with pytest.raises(FileNotFoundError, match="missing VL-CMU-CD sequences"):
        vlcmucd_split(tmp_path)


@pytest.mark.parametrize("value, expected", [(255, 1), (200, 1), (128, 1), (127, 0), (20, 0), (0, 0)])
def test_mask_threshold(tmp_path, value, expected):
    path = tmp_path / "m.png"
    Image.fromarray(np.full((3, 3), value, dtype=np.uint8), mode="L").save(path)
    assert np.all(load_mask(path) == expected)


def test_rgb_mask_is_converted(tmp_path):
    path = tmp_path / "m.png"
    Image.fromarray(np.full((2, 2, 3), 250, dtype=np.uint8)).save(path)
    assert np.all(load_mask(path) == 1)


def test_sixteen_bit_mask_is_rejected(tmp_path):
    path = tmp_path / "m.png"
    Image.fromarray(np.full((2, 2), 1000, dtype=np.uint16)).save(path)
    with pytest.raises(ValueError, match="8-bit"):
        load_mask(path)


def test_corrupt_image_is_rejected(tmp_path):
    path = tmp_path / "bad.png"
    path.write_bytes(b"not a png")
    with pytest.raises(ValueError, match="cannot read"):
        load_mask(path)


def test_png_round_trip(tmp_path, small_pairs):
    write_dataset(small_pairs, tmp_path)
    back = load_dataset(tmp_path)
    assert [p.name for p in back] == [p.name for p in small_pairs]
    for a, b in zip(small_pairs, back):
        np.testing.assert_array_equal(a.t0, b.t0)
        np.testing.assert_array_equal(a.t1, b.t1)
        np.testing.assert_array_equal(a.mask, b.mask)


def test_missing_t1_is_reported(tmp_path, small_pairs):
    write_dataset(small_pairs[:2], tmp_path)
    (tmp_path / "t1" / f"{small_pairs[0].name}.png").unlink()
    with pytest.raises(FileNotFoundError, match="no t1 image"):
        pair_paths(tmp_path)


def test_pair_validation():
    img = np.zeros((4, 4, 3), np.uint8)
    with pytest.raises(ValueError, match="must be equal"):
        ImagePair(img, np.zeros((4, 5, 3), np.uint8))
    with pytest.raises(ValueError, match="0 or 1"):
        ImagePair(img, img, np.full((4, 4), 2, np.uint8))


def label_map_oracle(shapes, size):
    out = np.zeros((size, size), dtype=np.int64)
    for y in range(size):
        for x in range(size):
            for s in shapes:
                if s.kind == "rect":
                    inside = abs(y - s.cy) <= s.ry and abs(x - s.cx) <= s.rx
                else:
                    inside = ((y - s.cy) / s.ry) ** 2 + ((x - s.cx) / s.rx) ** 2 <= 1
                if inside:
                    out[y, x] = s.ident
    return out


def test_rasterizer_matches_pixel_loop(rng):
    for _ in range(10):
        shapes = [
            Shape(i + 1, str(rng.choice(["rect", "ellipse"])), *rng.uniform(0, 24, 2), *rng.uniform(0.5, 8, 2), (0, 0, 0), 0)
            for i in range(4)
        ]
        np.testing.assert_array_equal(label_map(shapes, 24), label_map_oracle(shapes, 24))


def test_synthetic_mask_marks_label_changes(small_pairs):
    for pair in small_pairs:
        before = label_map(pair.meta["shapes_t0"], 64)
        after = label_map(pair.meta["shapes_t1"], 64)
        np.testing.assert_array_equal(pair.mask, (before != after).astype(np.uint8))
        assert pair.mask.any()


def test_synthetic_pairs_are_deterministic():
    a = synth_pair(3, 17)
    b = synth_pair(3, 17)
    np.testing.assert_array_equal(a.t0, b.t0)
    np.testing.assert_array_equal(a.t1, b.t1)
    np.testing.assert_array_equal(a.mask, b.mask)
    c = synth_pair(3, 18)
    assert not np.array_equal(a.t0, c.t0)


def test_synthetic_indices_are_independent():
    run = synth_generate(0, 5, start=10)
    assert [p.name for p in run] == [f"{i:05d}" for i in range(10, 15)]
    np.testing.assert_array_equal(run[2].t1, synth_pair(0, 12).t1)


def test_synthetic_strips_are_elongated():
    pairs = synth_generate(1, 30, strip_fraction=1.0)
    changed = [s for p in pairs for s in p.meta["shapes_t1"] if s.is_strip]
    assert changed
    for s in changed:
        assert max(s.ry, s.rx) >= 6 * min(s.ry, s.rx)


def test_synthetic_size_check():
    with pytest.raises(ValueError, match="divisible by 32"):
        synth_pair(0, 0, size=50)


def test_spec_validation():
    with pytest.raises(ValueError, match="unknown dataset source"):
        DatasetSpec(source="kitti")
    with pytest.raises(ValueError, match="split"):
        DatasetSpec(split="val")


def test_synthetic_spec_uses_disjoint_indices():
    train = load_from_spec(DatasetSpec(n_pairs=2, resize_to=(64, 64)))
    test = load_from_spec(DatasetSpec(split="test", n_pairs=2, resize_to=(64, 64)))
    assert train[0].name == "00000" and test[0].name == "1000000"
