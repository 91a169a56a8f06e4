"""Synthetic paired-modality phantom data, image and checkpoint I/O.

Phantoms are random soft-edged ellipse compositions in [-1, 1]. The
paired target modality is a smooth monotone per-pixel intensity remap of
the source, with a difficulty knob: at difficulty 0 the map is exactly
the identity, and it stays strictly monotone (hence invertible) for
difficulty up to 1, so structure is preserved while contrast shifts.

Images travel as 16-bit binary PGM. Checkpoints are a single binary
container: magic, version, JSON header, float64 payload, integrity
digest over the payload bytes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    CheckpointCorruptionError,
    CheckpointVersionError,
    ConfigurationError,
    ContractError,
    DataIOError,
    PgmParseError,
)

Array = np.ndarray

CHECKPOINT_MAGIC = b"PHMD"
CHECKPOINT_VERSION = 1

_SPLITMIX_GAMMA = 0x9E3779B97F4A7C15
_MASK64 = (1 << 64) - 1


def derive_seed(base_seed: int, index: int) -> int:
    """Deterministic per-item seed from a base seed and an index.

    splitmix64 finalizer: decorrelates consecutive indices so item i and
    i+1 do not produce overlapping generator streams.
    """
    z = (base_seed + (index + 1) * _SPLITMIX_GAMMA) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


# ---- phantom generation ----


def _soft_ellipse(
    yy: Array,
    xx: Array,
    cy: float,
    cx: float,
    ry: float,
    rx: float,
    angle: float,
    edge: float,
) -> Array:
    """Inside-ness in [0, 1] with a sigmoid edge roughly `edge` px wide."""
    ca, sa = math.cos(angle), math.sin(angle)
    u = (yy - cy) * ca + (xx - cx) * sa
    v = -(yy - cy) * sa + (xx - cx) * ca
    r = np.sqrt((u / ry) ** 2 + (v / rx) ** 2)
    # signed distance approximation in pixels, scaled by the mean radius
    dist = (1.0 - r) * 0.5 * (ry + rx)
    return 1.0 / (1.0 + np.exp(-dist / max(edge, 1e-6)))


def generate_phantom(size: int, rng: np.random.Generator) -> Array:
    """One source-modality phantom, float64 (size, size) in [-1, 1]."""
    if size < 16:
        raise ConfigurationError(f"phantom size must be >= 16, got {size}")
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = np.full((size, size), -1.0)

    body_ry = size * rng.uniform(0.30, 0.40)
    body_rx = size * rng.uniform(0.30, 0.40)
    body_cy = size / 2 + rng.uniform(-0.03, 0.03) * size
    body_cx = size / 2 + rng.uniform(-0.03, 0.03) * size
    body_angle = rng.uniform(0, math.pi)
    body = _soft_ellipse(yy, xx, body_cy, body_cx, body_ry, body_rx, body_angle, 0.8)
    img += 1.15 * body

    for _ in range(rng.integers(4, 8)):
        ry = size * rng.uniform(0.05, 0.16)
        rx = size * rng.uniform(0.05, 0.16)
        # keep structures inside the body so edges stay high-contrast
        rad = rng.uniform(0.0, 0.55)
        theta = rng.uniform(0, 2 * math.pi)
        cy = body_cy + rad * body_ry * math.sin(theta)
        cx = body_cx + rad * body_rx * math.cos(theta)
        # amplitudes keep blob edge gradients well above the 0.1 edge-map
        # threshold even after the modality map rescales contrast
        amp = rng.uniform(0.65, 0.9) * rng.choice([-1.0, 1.0])
        blob = _soft_ellipse(yy, xx, cy, cx, ry, rx, rng.uniform(0, math.pi), 0.6)
        img += amp * blob * body

    # faint smooth texture, confined to the body
    fy, fx = rng.uniform(1.0, 3.0, size=2)
    py, px = rng.uniform(0, 2 * math.pi, size=2)
    texture = 0.05 * np.cos(2 * math.pi * fy * yy / size + py) * np.cos(
        2 * math.pi * fx * xx / size + px
    )
    img += texture * body
    return np.clip(img, -1.0, 1.0)


def modality_map(values: Array, difficulty: float) -> Array:
    """Smooth strictly monotone intensity remap; identity at difficulty 0."""
    if not 0.0 <= difficulty <= 1.0:
        raise ConfigurationError(
            f"difficulty must be in [0, 1], got {difficulty}"
        )
    v = np.asarray(values, dtype=np.float64)
    d = difficulty
    # The linear coefficient and the shift cancel at v=-1 so the output
    # stays inside [-1, 1] without the clip engaging; the minimum slope is
    # 1 - 0.577*d > 0, so the map is strictly monotone (invertible) for
    # every legal difficulty.
    out = (1.0 - 0.2 * d) * v - 0.2 * d + d * (
        0.18 * np.sin(math.pi * v) + 0.03 * np.sin(2 * math.pi * v)
    )
    return np.clip(out, -1.0, 1.0)


@dataclass(frozen=True)
class PairedSample:
    source: Array
    target: Array
    seed: int
    index: int
    split: str

    def __post_init__(self):
        if self.source.shape != self.target.shape:
            raise ContractError(
                f"source {self.source.shape} and target {self.target.shape} "
                "shapes differ"
            )


def generate_phantom_pair(
    size: int, seed: int, index: int = 0, split: str = "train", difficulty: float = 0.5
) -> PairedSample:
    item_seed = derive_seed(seed, index)
    rng = np.random.default_rng(item_seed)
    source = generate_phantom(size, rng)
    return PairedSample(
        source=source,
        target=modality_map(source, difficulty),
        seed=item_seed,
        index=index,
        split=split,
    )


def generate_dataset(
    size: int,
    num_train: int,
    num_test: int,
    seed: int,
    difficulty: float = 0.5,
) -> tuple[list[PairedSample], list[PairedSample]]:
    if num_train < 0 or num_test < 0:
        raise ConfigurationError(
            f"sample counts must be >= 0, got {num_train}, {num_test}"
        )
    train = [
        generate_phantom_pair(size, seed, i, "train", difficulty) for i in range(num_train)
    ]
    test = [
        generate_phantom_pair(size, seed, num_train + i, "test", difficulty)
        for i in range(num_test)
    ]
    return train, test


# ---- PGM I/O ----


def save_image_pgm(path: str | Path, image: Array) -> None:
    """Binary 16-bit PGM; [-1, 1] maps linearly onto [0, 65535]."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ContractError(f"expected a 2-d image, got shape {image.shape}")
    if image.min() < -1.0 - 1e-9 or image.max() > 1.0 + 1e-9:
        raise ContractError(
            f"image range [{image.min():.4f}, {image.max():.4f}] "
            "outside [-1, 1]"
        )
    quantized = np.round((np.clip(image, -1, 1) + 1.0) * 0.5 * 65535.0)
    h, w = image.shape
    header = f"P5\n{w} {h}\n65535\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(quantized.astype(">u2").tobytes())


def load_image_pgm(path: str | Path) -> Array:
    """Inverse of save_image_pgm; raises PgmParseError with byte offsets."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataIOError(f"cannot read image {path}: {exc}") from None

    def fail(offset: int, why: str):
        raise PgmParseError(f"{path}: byte {offset}: {why}")

    if raw[:2] != b"P5":
        fail(0, f"expected magic b'P5', found {raw[:2]!r}")
    pos = 2
    fields: list[int] = []
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and raw[pos : pos + 1].isdigit():
            pos += 1
        if pos == start:
            fail(start, "expected an ASCII integer header field")
        fields.append(int(raw[start:pos]))
    if pos >= len(raw) or not raw[pos : pos + 1].isspace():
        fail(pos, "expected single whitespace after maxval")
    pos += 1
    w, h, maxval = fields
    if maxval != 65535:
        fail(pos, f"only maxval 65535 supported, got {maxval}")
    expected = w * h * 2
    if len(raw) - pos != expected:
        fail(pos, f"pixel payload is {len(raw) - pos} bytes, expected {expected}")
    pixels = np.frombuffer(raw, dtype=">u2", offset=pos).astype(np.float64)
    return ((pixels / 65535.0) * 2.0 - 1.0).reshape(h, w)


# ---- checkpoint container ----


def fnv1a64(data: bytes) -> int:
    """FNV-1a 64-bit digest, used for payload integrity."""
    h = 0xCBF29CE484222325
    for byte in data:
        h = ((h ^ byte) * 0x100000001B3) & _MASK64
    return h


def save_checkpoint(
    path: str | Path,
    params: dict,
    header_extra: dict,
) -> None:
    """Write params (and any extra float64 arrays listed in header_extra
    under 'extra_arrays') into the single-file container.

    Header is JSON; payload is the concatenation of every named array as
    little-endian float64 in header order.
    """
    names = list(params)
    arrays = [np.asarray(params[n].data, dtype="<f8") for n in names]
    extra = header_extra.pop("extra_arrays", {})
    extra_names = list(extra)
    arrays += [np.asarray(extra[n], dtype="<f8") for n in extra_names]
    payload = b"".join(a.tobytes() for a in arrays)

    header = {
        "param_names": names,
        "param_shapes": {n: list(params[n].data.shape) for n in names},
        "extra_names": extra_names,
        "extra_shapes": {n: list(np.asarray(extra[n]).shape) for n in extra_names},
        "payload_digest": f"{fnv1a64(payload):016x}",
        **header_extra,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(CHECKPOINT_VERSION.to_bytes(4, "little"))
        fh.write(len(blob).to_bytes(4, "little"))
        fh.write(blob)
        fh.write(payload)


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, Array], dict[str, Array]]:
    """Returns (header, params_arrays, extra_arrays)."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataIOError(f"cannot read checkpoint {path}: {exc}") from None
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointCorruptionError(
            f"{path}: bad magic {raw[:4]!r}, expected {CHECKPOINT_MAGIC!r}"
        )
    version = int.from_bytes(raw[4:8], "little")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: container version {version}, "
            f"this build reads version {CHECKPOINT_VERSION}"
        )
    header_len = int.from_bytes(raw[8:12], "little")
    if 12 + header_len > len(raw):
        raise CheckpointCorruptionError(
            f"{path}: header length {header_len} exceeds file size {len(raw)}"
        )
    try:
        header = json.loads(raw[12 : 12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointCorruptionError(f"{path}: unreadable header: {exc}") from exc

    payload = raw[12 + header_len :]
    digest = f"{fnv1a64(payload):016x}"
    if digest != header.get("payload_digest"):
        raise CheckpointCorruptionError(
            f"{path}: payload digest {digest} does not match header "
            f"{header.get('payload_digest')}"
        )

    def unpack(names: list[str], shapes: dict, offset: int) -> tuple[dict[str, Array], int]:
        out = {}
        for n in names:
            shape = tuple(shapes[n])
            count = int(np.prod(shape)) if shape else 1
            nbytes = count * 8
            if offset + nbytes > len(payload):
                raise CheckpointCorruptionError(
                    f"{path}: payload truncated while reading {n}"
                )
            out[n] = np.frombuffer(
                payload, dtype="<f8", count=count, offset=offset
            ).reshape(shape).copy()
            offset += nbytes
        return out, offset

    arrays, offset = unpack(header["param_names"], header["param_shapes"], 0)
    extras, offset = unpack(header.get("extra_names", []), header.get("extra_shapes", {}), offset)
    if offset != len(payload):
        raise CheckpointCorruptionError(
            f"{path}: {len(payload) - offset} trailing payload bytes"
        )
    return header, arrays, extras


# ---- dataset manifest ----


@dataclass(frozen=True)
class ManifestEntry:
    index: int
    split: str
    seed: int
    source_path: str
    target_path: str
    extra: dict = field(default_factory=dict)


def write_dataset(
    directory: str | Path,
    train: list[PairedSample],
    test: list[PairedSample],
    meta: dict | None = None,
) -> Path:
    """Write all images as PGM plus a JSON-lines manifest; returns its path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = directory / "manifest.jsonl"
    with open(manifest, "w", encoding="utf-8") as fh:
        if meta is not None:
            fh.write(json.dumps({"kind": "meta", **meta}, sort_keys=True) + "\n")
        for sample in [*train, *test]:
            stem = f"{sample.split}_{sample.index:05d}"
            source_path = directory / f"{stem}_source.pgm"
            target_path = directory / f"{stem}_target.pgm"
            save_image_pgm(source_path, sample.source)
            save_image_pgm(target_path, sample.target)
            row = {
                "kind": "pair",
                "index": sample.index,
                "split": sample.split,
                "seed": sample.seed,
                "source": source_path.name,
                "target": target_path.name,
            }
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    return manifest


def read_dataset(
    directory: str | Path,
) -> tuple[list[PairedSample], list[PairedSample], dict]:
    directory = Path(directory)
    manifest = directory / "manifest.jsonl"
    if not manifest.exists():
        raise PgmParseError(f"{manifest}: manifest not found")
    meta: dict = {}
    train: list[PairedSample] = []
    test: list[PairedSample] = []
    for lineno, line in enumerate(manifest.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            raise PgmParseError(f"{manifest}:{lineno}: bad JSON: {exc}") from exc
        if row.get("kind") == "meta":
            meta = {k: v for k, v in row.items() if k != "kind"}
            continue
        sample = PairedSample(
            source=load_image_pgm(directory / row["source"]),
            target=load_image_pgm(directory / row["target"]),
            seed=row["seed"],
            index=row["index"],
            split=row["split"],
        )
        (train if row["split"] == "train" else test).append(sample)
    return train, test, meta
