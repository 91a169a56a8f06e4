"""Phantom generator, intensity remap, PGM/checkpoint/manifest I/O tests.

The FNV-1a vectors are the published reference digests; the hash is also
cross-checked against an independent inline implementation. The edge-map
overlap oracle scans 100 generator seeds.
"""

import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pyradiff.data import (
    CHECKPOINT_MAGIC,
    ManifestEntry,
    PairedSample,
    derive_seed,
    fnv1a64,
    generate_dataset,
    generate_phantom,
    generate_phantom_pair,
    load_checkpoint,
    load_image_pgm,
    modality_map,
    read_dataset,
    save_checkpoint,
    save_image_pgm,
    write_dataset,
)
from pyradiff.errors import (
    CheckpointCorruptionError,
    CheckpointVersionError,
    ConfigurationError,
    ContractError,
    PgmParseError,
)
from pyradiff.tensor import Tensor


# ------------------------------------------------------------ seed derivation


def test_derive_seed_matches_inline_splitmix64_finalizer():
    mask = (1 << 64) - 1

    def reference(base, index):
        z = (base + (index + 1) * 0x9E3779B97F4A7C15) & mask
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & mask
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & mask
        return z ^ (z >> 31)

    for base in (0, 1, 12345, 2**32):
        for idx in (0, 1, 2, 1000):
            assert derive_seed(base, idx) == reference(base, idx)


def test_derive_seed_decorrelates_consecutive_indices():
    seeds = [derive_seed(0, i) for i in range(1000)]
    assert len(set(seeds)) == 1000
    assert all(0 <= s < 2**64 for s in seeds)


# ---------------------------------------------------------------- phantoms


def test_phantom_shape_range_and_determinism():
    a = generate_phantom(64, np.random.default_rng(3))
    b = generate_phantom(64, np.random.default_rng(3))
    assert a.shape == (64, 64)
    assert np.array_equal(a, b)
    assert a.min() >= -1.0 and a.max() <= 1.0


def test_phantom_has_background_and_structure():
    img = generate_phantom(64, np.random.default_rng(0))
    # corners are background
    corners = [img[0, 0], img[0, -1], img[-1, 0], img[-1, -1]]
    assert all(c < -0.9 for c in corners)
    # and there are real edges inside
    gy, gx = np.gradient(img)
    assert np.count_nonzero(np.hypot(gy, gx) > 0.1) > 50


def test_phantoms_vary_across_item_seeds():
    a = generate_phantom_pair(32, seed=0, index=0).source
    b = generate_phantom_pair(32, seed=0, index=1).source
    assert not np.array_equal(a, b)


# ------------------------------------------------------------- modality map


def test_modality_map_identity_at_zero_difficulty():
    v = np.linspace(-1, 1, 513)
    assert np.array_equal(modality_map(v, 0.0), v)


def test_modality_map_fixes_background_exactly():
    assert modality_map(np.array([-1.0]), 1.0)[0] == -1.0
    assert modality_map(np.array([-1.0]), 0.5)[0] == -1.0


@pytest.mark.parametrize("difficulty", [0.25, 0.5, 1.0])
def test_modality_map_is_strictly_monotone(difficulty):
    v = np.linspace(-1, 1, 4001)
    out = modality_map(v, difficulty)
    assert np.all(np.diff(out) > 0)
    assert out.min() >= -1.0 and out.max() <= 1.0


def test_modality_map_distorts_at_high_difficulty():
    v = np.linspace(-1, 1, 101)
    assert np.max(np.abs(modality_map(v, 1.0) - v)) > 0.1


def test_modality_map_validation():
    with pytest.raises(ConfigurationError):
        modality_map(np.zeros(3), -0.1)
    with pytest.raises(ConfigurationError):
        modality_map(np.zeros(3), 1.5)


def test_edge_maps_overlap_across_the_modality_gap():
    # gradient-magnitude edges (threshold 0.1) of source and target must
    # keep IoU > 0.8 at difficulty 0.5; scanned over 100 generator seeds
    def edges(im):
        gy, gx = np.gradient(im)
        return np.hypot(gy, gx) > 0.1

    worst = 1.0
    for seed in range(100):
        pair = generate_phantom_pair(64, seed, index=0, difficulty=0.5)
        a, b = edges(pair.source), edges(pair.target)
        worst = min(worst, (a & b).sum() / (a | b).sum())
    assert worst > 0.8


def test_paired_sample_rejects_shape_mismatch():
    with pytest.raises(ContractError):
        PairedSample(
            source=np.zeros((4, 4)), target=np.zeros((4, 5)),
            seed=0, index=0, split="train",
        )


def test_generate_dataset_counts_splits_and_determinism():
    train, test = generate_dataset(32, 3, 2, seed=9)
    train2, test2 = generate_dataset(32, 3, 2, seed=9)
    assert len(train) == 3 and len(test) == 2
    assert {s.split for s in train} == {"train"}
    assert {s.split for s in test} == {"test"}
    assert all(np.array_equal(a.source, b.source) for a, b in zip(train, train2))
    assert all(np.array_equal(a.target, b.target) for a, b in zip(test, test2))
    # item seeds continue across the split boundary without reuse
    seeds = [s.seed for s in train + test]
    assert len(set(seeds)) == 5


def test_generate_dataset_rejects_negative_counts():
    with pytest.raises(ConfigurationError):
        generate_dataset(32, -1, 2, seed=0)


def test_difficulty_zero_dataset_is_an_identity_task():
    train, _ = generate_dataset(32, 2, 0, seed=0, difficulty=0.0)
    for s in train:
        assert np.array_equal(s.source, s.target)


# ------------------------------------------------------------------ PGM I/O


def test_pgm_round_trip_within_quantization(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.uniform(-1, 1, (32, 48))
    path = tmp_path / "x.pgm"
    save_image_pgm(path, img)
    back = load_image_pgm(path)
    assert back.shape == (32, 48)
    assert np.max(np.abs(back - img)) <= 1.0 / 65535 + 1e-12


def test_pgm_extreme_levels_are_exact(tmp_path):
    img = np.array([[-1.0, 1.0], [1.0, -1.0]])
    path = tmp_path / "e.pgm"
    save_image_pgm(path, img)
    assert np.array_equal(load_image_pgm(path), img)


def test_pgm_writes_are_byte_identical(tmp_path):
    img = np.random.default_rng(1).uniform(-1, 1, (16, 16))
    save_image_pgm(tmp_path / "a.pgm", img)
    save_image_pgm(tmp_path / "b.pgm", img)
    assert (tmp_path / "a.pgm").read_bytes() == (tmp_path / "b.pgm").read_bytes()


def test_pgm_header_understands_comments(tmp_path):
    path = tmp_path / "c.pgm"
    payload = np.zeros(4, dtype=">u2").tobytes()
    path.write_bytes(b"P5\n# a comment\n2 2\n65535\n" + payload)
    assert load_image_pgm(path).shape == (2, 2)


def test_pgm_save_validation(tmp_path):
    with pytest.raises(ContractError):
        save_image_pgm(tmp_path / "x.pgm", np.full((4, 4), 1.5))
    with pytest.raises(ContractError):
        save_image_pgm(tmp_path / "x.pgm", np.zeros(16))


def test_pgm_parse_errors_carry_byte_offsets(tmp_path):
    path = tmp_path / "bad.pgm"

    path.write_bytes(b"P6 junk")
    with pytest.raises(PgmParseError, match="byte 0"):
        load_image_pgm(path)

    path.write_bytes(b"P5\n2 2\n255\n" + bytes(8))
    with pytest.raises(PgmParseError, match="maxval"):
        load_image_pgm(path)

    good = b"P5\n2 2\n65535\n" + np.zeros(4, dtype=">u2").tobytes()
    path.write_bytes(good[:-1])  # drop one payload byte
    with pytest.raises(PgmParseError, match="payload"):
        load_image_pgm(path)

    path.write_bytes(b"P5\nx 2\n65535\n")
    with pytest.raises(PgmParseError, match="integer"):
        load_image_pgm(path)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), h=st.integers(1, 8), w=st.integers(1, 8))
def test_pgm_round_trip_property(tmp_path_factory, seed, h, w):
    img = np.random.default_rng(seed).uniform(-1, 1, (h, w))
    path = tmp_path_factory.mktemp("pgm") / "p.pgm"
    save_image_pgm(path, img)
    assert np.max(np.abs(load_image_pgm(path) - img)) <= 1.0 / 65535 + 1e-12


# ------------------------------------------------------------------- fnv1a


def test_fnv1a64_reference_vectors():
    assert fnv1a64(b"") == 0xCBF29CE484222325
    assert fnv1a64(b"a") == 0xAF63DC4C8601EC8C
    assert fnv1a64(b"foobar") == 0x85944171F73967E8


def test_fnv1a64_matches_independent_implementation():
    def reference(data: bytes) -> int:
        h = 0xCBF29CE484222325
        for byte in data:
            h ^= byte
            h = (h * 0x100000001B3) % (1 << 64)
        return h

    rng = np.random.default_rng(0)
    for n in (1, 7, 64, 1000):
        blob = rng.integers(0, 256, n, dtype=np.uint8).tobytes()
        assert fnv1a64(blob) == reference(blob)


# --------------------------------------------------------------- checkpoints


def _params():
    rng = np.random.default_rng(4)
    return {
        "w1": Tensor(rng.standard_normal((3, 4))),
        "b1": Tensor(rng.standard_normal(4)),
    }


def test_checkpoint_round_trip(tmp_path):
    path = tmp_path / "ck.bin"
    params = _params()
    extras = {"adam.m": np.arange(5.0), "adam.v": np.ones((2, 2))}
    save_checkpoint(path, params, {"epoch": 3, "extra_arrays": extras})
    header, arrays, loaded_extras = load_checkpoint(path)
    assert header["epoch"] == 3
    assert set(arrays) == {"w1", "b1"}
    for name in arrays:
        assert np.array_equal(arrays[name], params[name].data)
    assert np.array_equal(loaded_extras["adam.m"], np.arange(5.0))
    assert np.array_equal(loaded_extras["adam.v"], np.ones((2, 2)))


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = tmp_path / "ck.bin"
    save_checkpoint(path, _params(), {})
    blob = bytearray(path.read_bytes())
    blob[:4] = b"XXXX"
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointCorruptionError, match="magic"):
        load_checkpoint(path)


def test_checkpoint_rejects_future_version(tmp_path):
    path = tmp_path / "ck.bin"
    save_checkpoint(path, _params(), {})
    blob = bytearray(path.read_bytes())
    blob[4:8] = (99).to_bytes(4, "little")
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointVersionError, match="version"):
        load_checkpoint(path)


def test_checkpoint_detects_payload_tampering(tmp_path):
    path = tmp_path / "ck.bin"
    save_checkpoint(path, _params(), {})
    blob = bytearray(path.read_bytes())
    blob[-1] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointCorruptionError, match="digest"):
        load_checkpoint(path)


def test_checkpoint_detects_truncation(tmp_path):
    path = tmp_path / "ck.bin"
    save_checkpoint(path, _params(), {})
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(CheckpointCorruptionError):
        load_checkpoint(path)


def test_checkpoint_magic_constant():
    assert CHECKPOINT_MAGIC == b"PHMD"


# ----------------------------------------------------------------- manifest


def test_dataset_write_read_round_trip(tmp_path):
    train, test = generate_dataset(16, 2, 1, seed=5)
    manifest = write_dataset(tmp_path, train, test, meta={"difficulty": 0.5})
    assert manifest == tmp_path / "manifest.jsonl"
    train2, test2, meta = read_dataset(tmp_path)
    assert meta == {"difficulty": 0.5}
    assert len(train2) == 2 and len(test2) == 1
    for a, b in zip(train + test, train2 + test2):
        assert a.index == b.index and a.split == b.split and a.seed == b.seed
        assert np.max(np.abs(a.source - b.source)) <= 1.0 / 65535 + 1e-12
        assert np.max(np.abs(a.target - b.target)) <= 1.0 / 65535 + 1e-12


def test_manifest_line_inventory(tmp_path):
    train, test = generate_dataset(16, 3, 2, seed=1)
    manifest = write_dataset(tmp_path, train, test, meta={"size": 16})
    lines = manifest.read_text().splitlines()
    assert len(lines) == 1 + 5  # one meta row plus one row per pair
    kinds = [json.loads(x)["kind"] for x in lines]
    assert kinds == ["meta"] + ["pair"] * 5
    # two PGM files referenced per pair, and they all exist
    pgms = sorted(p.name for p in tmp_path.glob("*.pgm"))
    assert len(pgms) == 10


def test_empty_dataset_round_trip(tmp_path):
    write_dataset(tmp_path, [], [], meta={"n": 0})
    train, test, meta = read_dataset(tmp_path)
    assert train == [] and test == [] and meta == {"n": 0}


def test_missing_manifest_raises(tmp_path):
    with pytest.raises(PgmParseError, match="manifest"):
        read_dataset(tmp_path)


def test_corrupt_manifest_line_names_the_line(tmp_path):
    write_dataset(tmp_path, *generate_dataset(16, 1, 0, seed=0))
    manifest = tmp_path / "manifest.jsonl"
    manifest.write_text(manifest.read_text() + "{not json\n")
    with pytest.raises(PgmParseError, match=":2:"):
        read_dataset(tmp_path)


def test_manifest_entry_defaults():
    e = ManifestEntry(index=0, split="train", seed=1, source_path="a", target_path="b")
    assert e.extra == {}
