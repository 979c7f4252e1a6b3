"""Seeded synthetic datasets where text alone cannot solve the task.

* ``seg``: 32x32 RGB scenes with 2-4 non-overlapping coloured shapes; the
  description names exactly one of them and the mask covers it.
* ``cls``: scenes with 1-3 shapes and a claim "a {color} {shape}"; the label
  says whether the claimed pair is present (0), only partly matched by some
  object's colour or shape (1), or absent altogether (2).
* ``msa``: an utterance plus acoustic (L x 8) and facial (L x 6) sequences;
  the sentiment label mixes one scalar feature from each modality.

Every sample is a function of ``(task, seed, index)`` alone. Float features
are rounded to float32 at generation so the in-memory and on-disk datasets
agree bit for bit. See ``docs/DATA_FORMAT.md`` for the file layout.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import generator, mix

GENERATOR_VERSION = "mitune-synth/1"
FORMAT = "mitune-records/1"

COLORS = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "magenta": (1.0, 0.0, 1.0),
    "cyan": (0.0, 1.0, 1.0),
}
SHAPES = ("circle", "square", "triangle", "cross")
COLOR_NAMES = tuple(COLORS)

IMAGE_SIZE = 32
SHAPE_SIZES = (8, 13)  # bounding-box side, [lo, hi)
BACKGROUND_NOISE = 0.05

MSA_STEPS = 8
MSA_ADJECTIVES = {
    "wonderful": 1.0, "great": 0.75, "good": 0.5, "fine": 0.25,
    "okay": 0.0, "dull": -0.25, "bad": -0.5, "awful": -0.75, "terrible": -1.0,
}
MSA_NOUNS = ("movie", "film", "show")
MSA_WEIGHTS = {"text": 0.8, "acoustic": 1.2, "facial": 1.0}
MSA_NOISE = 0.05


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    task: str
    n: int
    seed: int
    samples: list[dict]
    stats: dict = field(default_factory=dict)

    def manifest(self, checksum: str) -> dict:
        return {"task": self.task, "n": self.n, "seed": self.seed,
                "generator_version": GENERATOR_VERSION, "checksum": checksum,
                "format": FORMAT, "stats": self.stats}

    def checksum(self) -> str:
        """SHA-256 of the serialized records (what the manifest stores)."""
        return hashlib.sha256(serialize(self)).hexdigest()

    def split(self, test_fraction: float = 0.1):
        """Deterministic 90/10 split (by default) keyed on the dataset seed."""
        perm = generator(self.seed, "split").permutation(self.n)
        n_test = max(1, int(round(self.n * test_fraction))) if self.n > 1 else 0
        test = sorted(perm[:n_test].tolist())
        train = sorted(perm[n_test:].tolist())
        return [self.samples[i] for i in train], [self.samples[i] for i in test]


# --------------------------------------------------------------------------
# shape rasterisation


def shape_mask(kind: str, size: int, top: int, left: int, hw: int = IMAGE_SIZE) -> np.ndarray:
    y, x = np.mgrid[0:size, 0:size] + 0.5
    c = size / 2
    if kind == "square":
        m = np.ones((size, size), bool)
    elif kind == "circle":
        m = (y - c) ** 2 + (x - c) ** 2 <= c * c
    elif kind == "triangle":
        m = np.abs(x - c) <= y / 2
    elif kind == "cross":
        t = size / 6
        m = (np.abs(x - c) <= t) | (np.abs(y - c) <= t)
    else:
        raise DataError(f"unknown shape {kind!r}")
    out = np.zeros((hw, hw), bool)
    out[top:top + size, left:left + size] = m
    return out


def _place(rng, n_shapes: int, hw: int = IMAGE_SIZE, max_restarts: int = 200, tries: int = 50):
    for _ in range(max_restarts):
        boxes: list[tuple[int, int, int]] = []
        for _ in range(n_shapes):
            s = int(rng.integers(*SHAPE_SIZES))
            for _ in range(tries):
                box = (int(rng.integers(0, hw - s + 1)), int(rng.integers(0, hw - s + 1)), s)
                if not any(_overlap(box, b) for b in boxes):
                    boxes.append(box)
                    break
            else:
                break
        if len(boxes) == n_shapes:
            return boxes
    raise DataError("could not place non-overlapping shapes")


def _overlap(a, b, margin: int = 1) -> bool:
    (ta, la, sa), (tb, lb, sb) = a, b
    return not (ta + sa + margin <= tb or tb + sb + margin <= ta or la + sa + margin <= lb or lb + sb + margin <= la)


def _render(rng, objects, hw: int = IMAGE_SIZE):
    """objects: rows of (color_id, shape_id, top, left, size). Returns float32 image."""
    img = rng.uniform(0.0, BACKGROUND_NOISE, size=(hw, hw, 3))
    for color_id, shape_id, top, left, size in objects:
        m = shape_mask(SHAPES[shape_id], size, top, left, hw)
        shade = rng.uniform(0.8, 1.0)
        img[m] = np.asarray(COLORS[COLOR_NAMES[color_id]]) * shade
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _distinct_pairs(rng, k: int):
    pairs = rng.choice(len(COLORS) * len(SHAPES), size=k, replace=False)
    return [(int(p) // len(SHAPES), int(p) % len(SHAPES)) for p in pairs]


# --------------------------------------------------------------------------
# per-task sample generators


def _seg_sample(seed: int, index: int) -> dict:
    rng = generator(mix(seed, index), "seg")
    k = int(rng.integers(2, 5))
    pairs = _distinct_pairs(rng, k)
    boxes = _place(rng, k)
    objects = np.array([[c, s, t, l, z] for (c, s), (t, l, z) in zip(pairs, boxes)], dtype=np.int32)
    target = 0
    img = _render(rng, objects)
    c, s, t, l, z = objects[target]
    mask = shape_mask(SHAPES[s], z, t, l).astype(np.float32)
    return {"image": img, "mask": mask, "description": f"{COLOR_NAMES[c]} {SHAPES[s]}",
            "objects": objects, "target": np.array([target], np.int32)}


def _cls_sample(seed: int, index: int) -> dict:
    rng = generator(mix(seed, index), "cls")
    label = int(rng.integers(0, 3))
    n_obj = int(rng.integers(1, 4))
    for _ in range(1000):
        pairs = _distinct_pairs(rng, n_obj)
        qc, qs = int(rng.integers(len(COLORS))), int(rng.integers(len(SHAPES)))
        if label == 0:
            qc, qs = pairs[0]
        if _cls_label(pairs, qc, qs) == label:
            break
    else:
        raise DataError("could not realise cls label")
    objects = np.array([[c, s, t, l, z] for (c, s), (t, l, z) in zip(pairs, _place(rng, n_obj))], np.int32)
    img = _render(rng, objects)
    return {"image": img, "text": f"a {COLOR_NAMES[qc]} {SHAPES[qs]}",
            "label": np.array([label], np.int32), "objects": objects}


def _cls_label(pairs, qc, qs) -> int:
    if (qc, qs) in pairs:
        return 0
    if any(c == qc or s == qs for c, s in pairs):
        return 1
    return 2


def msa_directions():
    """Fixed unit directions reading the acoustic / facial latent."""
    rng = generator(0, "msa-directions")
    u_a = rng.normal(size=8)
    u_f = rng.normal(size=6)
    return u_a / np.linalg.norm(u_a), u_f / np.linalg.norm(u_f)


def msa_internals(text_polarity: float, acoustic: np.ndarray, facial: np.ndarray):
    u_a, u_f = msa_directions()
    g = float(np.mean(acoustic.astype(np.float64) @ u_a) / 2.0)
    h = float(np.mean(facial.astype(np.float64) @ u_f) / 2.0)
    return text_polarity, g, h


def _msa_sample(seed: int, index: int) -> dict:
    rng = generator(mix(seed, index), "msa")
    u_a, u_f = msa_directions()
    adj = list(MSA_ADJECTIVES)[int(rng.integers(len(MSA_ADJECTIVES)))]
    noun = MSA_NOUNS[int(rng.integers(len(MSA_NOUNS)))]
    s_a, s_f = rng.uniform(-1, 1, size=2)
    acoustic = (2 * s_a * u_a + rng.normal(0, 0.5, (MSA_STEPS, 8))).astype(np.float32)
    facial = (2 * s_f * u_f + rng.normal(0, 0.5, (MSA_STEPS, 6))).astype(np.float32)
    f, g, h = msa_internals(MSA_ADJECTIVES[adj], acoustic, facial)
    w = MSA_WEIGHTS
    y = w["text"] * f + w["acoustic"] * g + w["facial"] * h + rng.normal(0, MSA_NOISE)
    y = float(np.clip(y, -3.0, 3.0))
    return {"text": f"the {noun} was {adj}", "acoustic": acoustic, "facial": facial,
            "label": np.array([y], np.float32),
            "internals": np.array([f, g, h], np.float32)}


GENERATORS = {"seg": _seg_sample, "cls": _cls_sample, "msa": _msa_sample}


def gen_dataset(task: str, n: int, seed: int, threads: int | None = None) -> Dataset:
    if task not in GENERATORS:
        raise DataError(f"unknown task {task!r}; expected one of {sorted(GENERATORS)}")
    if n < 1:
        raise DataError("n must be >= 1")
    make = GENERATORS[task]
    threads = threads or int(os.environ.get("MIT_THREADS", "1"))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            samples = list(pool.map(lambda i: make(seed, i), range(n)))
    else:
        samples = [make(seed, i) for i in range(n)]
    ds = Dataset(task, n, seed, samples)
    if task == "seg":
        ds.stats["text_only_dice"] = text_only_seg_oracle(samples)
    elif task == "msa":
        ds.stats.update(msa_lsq_oracle(samples))
    return ds


# --------------------------------------------------------------------------
# validators and oracles


def validate_seg(sample: dict) -> list[str]:
    errs = []
    objs = sample["objects"]
    if not 2 <= len(objs) <= 4:
        errs.append(f"{len(objs)} shapes")
    pairs = [(int(c), int(s)) for c, s, *_ in objs]
    if len(set(pairs)) != len(pairs):
        errs.append("duplicate (color, shape) pair")
    color, shape = sample["description"].split(" ")
    matches = [i for i, (c, s) in enumerate(pairs) if COLOR_NAMES[c] == color and SHAPES[s] == shape]
    if len(matches) != 1:
        errs.append(f"{len(matches)} shapes match description")
    masks = [shape_mask(SHAPES[s], z, t, l) for _, s, t, l, z in objs]
    if np.any(np.sum(masks, axis=0) > 1):
        errs.append("shapes overlap")
    if matches and not np.array_equal(sample["mask"].astype(bool), masks[matches[0]]):
        errs.append("mask does not cover exactly the described shape")
    img = sample["image"]
    if img.shape != (IMAGE_SIZE, IMAGE_SIZE, 3) or img.min() < 0 or img.max() > 1 or not np.isfinite(img).all():
        errs.append("image out of range")
    return errs


def validate_msa(sample: dict) -> list[str]:
    errs = []
    y = float(sample["label"][0])
    if not -3.0 <= y <= 3.0:
        errs.append("label outside [-3, 3]")
    for k in ("acoustic", "facial"):
        if not np.isfinite(sample[k]).all():
            errs.append(f"{k} not finite")
    f, g, h = (float(v) for v in sample["internals"])
    if abs(MSA_WEIGHTS["acoustic"] * g) == 0 or abs(MSA_WEIGHTS["facial"] * h) == 0:
        errs.append("zero modal contribution")
    return errs


def validate_cls(sample: dict) -> list[str]:
    pairs = [(int(c), int(s)) for c, s, *_ in sample["objects"]]
    _, color, shape = sample["text"].split(" ")
    expect = _cls_label(pairs, COLOR_NAMES.index(color), SHAPES.index(shape))
    return [] if expect == int(sample["label"][0]) else ["label inconsistent with scene"]


VALIDATORS = {"seg": validate_seg, "cls": validate_cls, "msa": validate_msa}


def text_only_seg_oracle(samples: list[dict]) -> float:
    """Best mean DICE achievable from the description alone.

    Per description, the Bayes pixel-probability map is the mean target mask
    over samples sharing it (fit in-sample, which only flatters the oracle);
    each map is thresholded at the level that maximises its mean DICE.
    """
    by_desc: dict[str, list[np.ndarray]] = {}
    for s in samples:
        by_desc.setdefault(s["description"], []).append(s["mask"].astype(bool))
    scores = []
    for masks in by_desc.values():
        stack = np.stack(masks)
        prob = stack.mean(axis=0)
        best = 0.0
        for thr in np.unique(prob):
            if thr <= 0:
                continue
            pred = prob >= thr
            inter = (stack & pred).sum(axis=(1, 2))
            dice = 2 * inter / (stack.sum(axis=(1, 2)) + pred.sum())
            best = max(best, float(dice.mean()))
        scores.extend([best] * len(masks))
    return float(np.mean(scores))


def msa_lsq_oracle(samples: list[dict]) -> dict:
    """Least-squares fits of the label on generator internals: text only vs all."""
    X = np.array([s["internals"] for s in samples], dtype=np.float64)
    y = np.array([s["label"][0] for s in samples], dtype=np.float64)
    ones = np.ones((len(y), 1))

    def mae(cols):
        A = np.hstack([ones, X[:, cols]])
        coef, *_ = np.linalg.lstsq(A, y, rcond=None)
        return float(np.mean(np.abs(A @ coef - y)))

    return {"lsq_mae_text": mae([0]), "lsq_mae_all": mae([0, 1, 2])}


# --------------------------------------------------------------------------
# serialisation: length-prefixed little-endian records

_KIND = {np.dtype(np.float32): 0, np.dtype(np.int32): 1}
_UTF8 = 2


def _encode_record(sample: dict) -> bytes:
    body = [struct.pack("<H", len(sample))]
    for name in sorted(sample):
        value = sample[name]
        key = name.encode("utf-8")
        body.append(struct.pack("<B", len(key)) + key)
        if isinstance(value, str):
            raw = value.encode("utf-8")
            body.append(struct.pack("<BBI", _UTF8, 1, len(raw)) + raw)
        else:
            arr = np.asarray(value)
            if arr.dtype not in _KIND:
                raise DataError(f"field {name}: unsupported dtype {arr.dtype}")
            body.append(struct.pack("<BB", _KIND[arr.dtype], arr.ndim))
            body.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            body.append(arr.astype(arr.dtype.newbyteorder("<")).tobytes())
    payload = b"".join(body)
    return struct.pack("<I", len(payload)) + payload


def _decode_record(buf: memoryview) -> dict:
    (n_fields,) = struct.unpack_from("<H", buf, 0)
    off = 2
    out = {}
    for _ in range(n_fields):
        (klen,) = struct.unpack_from("<B", buf, off)
        name = bytes(buf[off + 1:off + 1 + klen]).decode("utf-8")
        off += 1 + klen
        kind, ndim = struct.unpack_from("<BB", buf, off)
        off += 2
        dims = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        if kind == _UTF8:
            out[name] = bytes(buf[off:off + dims[0]]).decode("utf-8")
            off += dims[0]
            continue
        dtype = np.dtype("<f4") if kind == 0 else np.dtype("<i4")
        count = int(np.prod(dims))
        out[name] = np.frombuffer(buf, dtype=dtype, count=count, offset=off).reshape(dims).astype(dtype.newbyteorder("="))
        off += count * 4
    if off != len(buf):
        raise DataError("record has trailing bytes")
    return out


def serialize(ds: Dataset) -> bytes:
    return b"".join(_encode_record(s) for s in ds.samples)


def save_dataset(ds: Dataset, directory) -> dict:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    payload = serialize(ds)
    (d / "samples.bin").write_bytes(payload)
    manifest = ds.manifest(hashlib.sha256(payload).hexdigest())
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_dataset(directory) -> Dataset:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    payload = (d / "samples.bin").read_bytes()
    if hashlib.sha256(payload).hexdigest() != manifest["checksum"]:
        raise DataError(f"checksum mismatch for {d / 'samples.bin'}")
    view = memoryview(payload)
    samples, off = [], 0
    while off < len(payload):
        (size,) = struct.unpack_from("<I", view, off)
        samples.append(_decode_record(view[off + 4:off + 4 + size]))
        off += 4 + size
    if len(samples) != manifest["n"]:
        raise DataError(f"manifest says n={manifest['n']} but payload holds {len(samples)} records")
    return Dataset(manifest["task"], manifest["n"], manifest["seed"], samples, manifest.get("stats", {}))
