import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dagmil.bagio import (
    Bag,
    SynthConfig,
    decode_bag,
    encode_bag,
    gen_synthetic,
    lesion_clusters,
    load_dataset,
    read_bag,
    read_manifest,
    save_dataset,
    split_stratified,
    write_bag,
)
from dagmil.exceptions import ConfigError, FormatError, InputError


def random_bag(rng, n=16, d=8, label=1):
    return Bag(rng.standard_normal((n, d)), rng.uniform(0, 5000, size=(n, 2)), label, "b")


def test_round_trip_16x8(tmp_path):
    bag = random_bag(np.random.default_rng(0))
    path = tmp_path / "b.dagbag"
    write_bag(bag, path)
    back = read_bag(path)
    assert back == bag
    assert back.id == "b"
    assert np.array_equal(back.features, bag.features)
    assert np.array_equal(back.coords, bag.coords)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 12), st.integers(1, 6), st.integers(0, 2**32 - 1), st.data())
def test_round_trip_property(n, d, label, data):
    finite = st.floats(allow_nan=False, allow_infinity=False, width=32)
    feats = data.draw(arrays(np.float32, (n, d), elements=st.floats(width=32, allow_nan=True)))
    coords = data.draw(arrays(np.float32, (n, 2), elements=finite))
    bag = Bag(feats, coords, label)
    back = decode_bag(encode_bag(bag))
    # bitwise comparison so NaN payloads and signed zeros survive
    assert back == bag


def test_header_layout():
    bag = Bag(np.ones((3, 2)), np.zeros((3, 2)), 5)
    raw = encode_bag(bag)
    assert raw[:4] == b"DAGB"
    assert struct.unpack_from("<IIII", raw, 4) == (1, 3, 2, 5)
    assert len(raw) == 20 + 3 * 2 * 4 + 3 * 2 * 4


def test_bad_magic():
    raw = bytearray(encode_bag(Bag(np.ones((2, 2)), np.zeros((2, 2)), 0)))
    raw[:4] = b"XXXX"
    with pytest.raises(FormatError, match="magic") as info:
        decode_bag(bytes(raw))
    assert info.value.offset == 0


def test_version_mismatch():
    raw = bytearray(encode_bag(Bag(np.ones((2, 2)), np.zeros((2, 2)), 0)))
    raw[4:8] = struct.pack("<I", 2)
    with pytest.raises(FormatError, match="version"):
        decode_bag(bytes(raw))


def test_truncated_payload_names_rows():
    rng = np.random.default_rng(1)
    full = encode_bag(random_bag(rng, n=10, d=4))
    short = full[: len(full) - 4 * 4]
    with pytest.raises(FormatError, match="N=10.*9 rows") as info:
        decode_bag(short)
    assert info.value.offset == len(short)


@pytest.mark.parametrize("n,d", [(0, 3), (3, 0)])
def test_zero_sizes_rejected(n, d):
    raw = struct.pack("<4sIIII", b"DAGB", 1, n, d, 0)
    with pytest.raises(FormatError, match="zero"):
        decode_bag(raw)


def test_trailing_bytes_rejected():
    raw = encode_bag(Bag(np.ones((1, 1)), np.zeros((1, 2)), 0)) + b"\0"
    with pytest.raises(FormatError, match="trailing"):
        decode_bag(raw)


def test_bag_validation():
    with pytest.raises(InputError):
        Bag(np.ones((2, 3)), np.zeros((3, 2)), 0)
    with pytest.raises(InputError):
        Bag(np.ones((1, 3)), [[0.0, np.inf]], 0)
    with pytest.raises(InputError):
        Bag(np.ones((0, 3)), np.zeros((0, 2)), 0)


def test_manifest_round_trip(tmp_path):
    bags = gen_synthetic(n_bags=6, patches=16, dim=4, cluster_radius=150, seed=3)
    manifest = save_dataset(bags, tmp_path)
    records = read_manifest(manifest)
    assert [r["id"] for r in records] == [b.id for b in bags]
    assert set(json.loads(manifest.read_text())[0]) == {"id", "path", "label"}
    loaded = load_dataset(manifest)
    assert all(a == b and a.id == b.id for a, b in zip(loaded, bags))


def test_manifest_label_mismatch(tmp_path):
    bags = gen_synthetic(n_bags=3, patches=16, dim=4, cluster_radius=150, seed=3)
    manifest = save_dataset(bags, tmp_path)
    rows = json.loads(manifest.read_text())
    rows[1]["label"] = (rows[1]["label"] + 1) % 3
    manifest.write_text(json.dumps(rows))
    with pytest.raises(FormatError, match="disagrees"):
        load_dataset(manifest)


# --------------------------------------------------------------------------
# synthetic generator
# --------------------------------------------------------------------------


@pytest.fixture(scope="module")
def default_bags():
    return gen_synthetic(seed=7)


def test_generator_deterministic(default_bags):
    again = gen_synthetic(seed=7)
    assert all(a == b and a.id == b.id for a, b in zip(default_bags, again))
    other = gen_synthetic(seed=8)
    assert not all(a == b for a, b in zip(default_bags, other))


def test_default_dataset_shape(default_bags):
    assert len(default_bags) == 300
    assert {b.label for b in default_bags} == {0, 1, 2}
    assert np.bincount([b.label for b in default_bags]).tolist() == [100, 100, 100]
    assert all(b.features.shape == (64, 64) for b in default_bags)


def test_class_zero_has_no_lesions(default_bags):
    for bag in default_bags:
        if bag.label == 0:
            assert not bag.lesion_mask.any()
            # the norm of a 64-d standard normal is about sqrt(64) = 8
            norms = np.linalg.norm(bag.features, axis=1)
            assert abs(norms.mean() - 8.0) < 1.0


def test_label_counts_clusters(default_bags):
    cfg = SynthConfig()
    for bag in default_bags:
        groups = lesion_clusters(bag, radius=1.5 * cfg.grid_pitch)
        assert len(groups) == bag.label


def test_clusters_are_discs(default_bags):
    cfg = SynthConfig()
    for bag in default_bags:
        for group in lesion_clusters(bag, radius=1.5 * cfg.grid_pitch):
            pts = bag.coords[group].astype(np.float64)
            # some member is the centre, so every member is within radius of it
            spread = np.sqrt(((pts[:, None] - pts[None]) ** 2).sum(-1))
            assert spread.max(axis=1).min() <= cfg.cluster_radius + 1e-3


def test_class_two_clusters_disjoint(default_bags):
    cfg = SynthConfig()
    bag = next(b for b in default_bags if b.label == 2)
    a, b = lesion_clusters(bag, radius=1.5 * cfg.grid_pitch)
    assert not set(a) & set(b)
    gap = np.sqrt(((bag.coords[a][:, None].astype(float) - bag.coords[b][None]) ** 2).sum(-1))
    assert gap.min() > cfg.grid_pitch


def test_lesion_patches_shifted(default_bags):
    bag = next(b for b in default_bags if b.label == 2)
    lesion = bag.features[bag.lesion_mask].mean(axis=0)
    background = bag.features[~bag.lesion_mask].mean(axis=0)
    assert np.linalg.norm(lesion - background) > 2.0


def test_generator_config_errors():
    with pytest.raises(ConfigError):
        gen_synthetic(classes=1)
    with pytest.raises(ConfigError):
        gen_synthetic(noise_sigma=0)
    with pytest.raises(ConfigError, match="cluster_radius"):
        gen_synthetic(cluster_radius=5000)


# --------------------------------------------------------------------------
# splitting
# --------------------------------------------------------------------------


def test_split_single_class_sizes():
    split = split_stratified([(f"s{i}", 0) for i in range(10)], seed=0)
    assert (len(split.train), len(split.val), len(split.test)) == (7, 2, 1)


def test_split_balanced_two_classes():
    manifest = [(f"s{i}", i % 2) for i in range(20)]
    labels = dict(manifest)
    split = split_stratified(manifest, seed=1)
    for part, target in ((split.train, 7), (split.val, 2), (split.test, 1)):
        counts = np.bincount([labels[i] for i in part], minlength=2)
        assert np.all(np.abs(counts - target) <= 1)


def test_split_deterministic_and_seed_dependent():
    manifest = [(f"s{i}", i % 3) for i in range(60)]
    a = split_stratified(manifest, seed=4)
    b = split_stratified(manifest, seed=4)
    c = split_stratified(manifest, seed=5)
    assert a == b
    assert a != c


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 3), min_size=1, max_size=80), st.integers(0, 1000))
def test_split_partition_property(labels, seed):
    counts = np.bincount(labels)
    manifest = [(f"id{i}", y) for i, y in enumerate(labels)]
    if counts[counts > 0].min() < 3:
        with pytest.raises(InputError):
            split_stratified(manifest, seed=seed)
        return
    split = split_stratified(manifest, seed=seed)
    parts = [split.train, split.val, split.test]
    everything = [i for p in parts for i in p]
    assert sorted(everything) == sorted(i for i, _ in manifest)
    assert len(set(everything)) == len(everything)
    label_of = dict(manifest)
    for c in np.flatnonzero(counts):
        for part, ratio in zip(parts, (0.7, 0.2, 0.1)):
            got = sum(label_of[i] == c for i in part)
            assert abs(got - ratio * counts[c]) <= 1


def test_split_small_class_rejected():
    with pytest.raises(InputError, match="class 1"):
        split_stratified([("a", 0), ("b", 0), ("c", 0), ("d", 1), ("e", 1)])


def test_discs_not_clipped_by_border(default_bags):
    # unclipped discs make lesion-patch counts of the classes disjoint
    counts = {c: [int(b.lesion_mask.sum()) for b in default_bags if b.label == c] for c in (1, 2)}
    assert max(counts[1]) < min(counts[2])
    assert min(counts[1]) >= 5
