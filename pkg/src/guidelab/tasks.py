"""Task datasets, file formats, batching and metrics.

Token conventions
-----------------
copy-paste: PAD=0, content 1..10, SEP=11 (vocab 12). The input is
``s + [SEP] + [PAD]*k``; the target is ignored up to and including SEP and
equals ``s`` afterwards.
parity: bits 0/1, PAD=2 (vocab 3); label 1 iff the count of ones is even.
language modelling: raw bytes (vocab 256), fixed windows, no padding needed.

Targets use IGNORE=-1 at positions excluded from loss and accuracy.
"""
from __future__ import annotations

import hashlib
import json
import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .tensor.rng import RngState

PAD, SEP, IGNORE = 0, 11, -1
COPY_VOCAB = 12
PARITY_PAD, PARITY_VOCAB = 2, 3
LM_VOCAB = 256
TASKS = ("copy", "parity", "lm", "image")


class DataError(ValueError):
    pass


# ---------------------------------------------------------------- examples

@dataclass
class SequenceExample:
    input_tokens: list[int]
    target_tokens: list[int]
    pad_mask: list[bool]  # True where the position is excluded from the loss


@dataclass
class ParityExample:
    bits: list[int]
    label: int


@dataclass
class ImageExample:
    pixels: np.ndarray
    label: int


def copy_paste_example(content) -> SequenceExample:
    s = [int(t) for t in content]
    if not s or min(s) < 1 or max(s) > 10:
        raise DataError("copy-paste content must be non-empty tokens in 1..10")
    k = len(s)
    inp = s + [SEP] + [PAD] * k
    tgt = [IGNORE] * (k + 1) + s
    return SequenceExample(inp, tgt, [t == IGNORE for t in tgt])


def parity_label(bits) -> int:
    if isinstance(bits, str):
        bits = [int(c) for c in bits]
    return 1 - (int(np.sum(bits)) % 2)


# ---------------------------------------------------------------- datasets

@dataclass
class Dataset:
    """One split. ``x`` is (N, T) tokens or (N, C, H, W) images; ``y`` is labels
    (N,) or per-position targets (N, T); ``lengths`` is set for sequences."""
    task: str
    x: np.ndarray
    y: np.ndarray
    ids: np.ndarray
    lengths: np.ndarray | None = None

    def __len__(self):
        return len(self.ids)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.task, self.x[idx], self.y[idx], self.ids[idx],
                       None if self.lengths is None else self.lengths[idx])

    def digest(self, h) -> None:
        for a in (self.x, self.y, self.ids) + (() if self.lengths is None else (self.lengths,)):
            a = np.ascontiguousarray(a)
            h.update(str((a.dtype.str, a.shape)).encode())
            h.update(a.tobytes())


@dataclass
class DatasetSplit:
    train: Dataset
    val: Dataset
    test: Dataset
    seed: int
    meta: dict = field(default_factory=dict)

    @property
    def task(self):
        return self.train.task

    def manifest_hash(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps({"seed": self.seed, "meta": self.meta}, sort_keys=True).encode())
        for d in (self.train, self.val, self.test):
            d.digest(h)
        return h.hexdigest()

    def manifest(self) -> dict:
        return {"task": self.task, "seed": self.seed, "sizes": [len(self.train), len(self.val), len(self.test)],
                "meta": self.meta, "hash": self.manifest_hash()}


def split_sizes(n: int) -> tuple[int, int, int]:
    n_train, n_val = (8 * n) // 10, n // 10
    return n_train, n_val, n - n_train - n_val


def _split(task, x, y, lengths, rng: RngState, seed, meta) -> DatasetSplit:
    n = len(x)
    ids = np.arange(n, dtype=np.int64)
    perm = rng.gen.permutation(n)
    a, b, _ = split_sizes(n)
    parts = [np.sort(perm[:a]), np.sort(perm[a:a + b]), np.sort(perm[a + b:])]
    sets = [Dataset(task, x[p], y[p], ids[p], None if lengths is None else lengths[p]) for p in parts]
    return DatasetSplit(*sets, seed=seed, meta=meta)


def _pad_rows(rows, fill, dtype=np.int64):
    T = max(len(r) for r in rows)
    out = np.full((len(rows), T), fill, dtype=dtype)
    for i, r in enumerate(rows):
        out[i, :len(r)] = r
    return out


def gen_copy_paste(n: int, len_range=(20, 40), vocab_size: int = 10, seed: int = 0) -> DatasetSplit:
    """Copy-paste examples with content length k chosen so 2k + 2 lies in ``len_range``."""
    lo, hi = len_range
    if n < 1:
        raise DataError("n must be >= 1")
    if lo < 20 or hi > 40 or lo > hi:
        raise DataError(f"len_range {len_range} must lie within [20, 40]")
    k_lo, k_hi = math.ceil((lo - 2) / 2), (hi - 2) // 2
    if k_lo > k_hi or k_lo < 1:
        raise DataError(f"no content length k with 2k+2 in {len_range}")
    if vocab_size != 10:
        raise DataError("copy-paste content vocabulary is fixed at 1..10")
    rng = RngState(seed)
    ks = rng.gen.integers(k_lo, k_hi + 1, size=n)
    inputs, targets = [], []
    for k in ks:
        ex = copy_paste_example(rng.gen.integers(1, 11, size=int(k)))
        inputs.append(ex.input_tokens)
        targets.append(ex.target_tokens)
    lengths = np.array([len(r) for r in inputs], dtype=np.int64)
    return _split("copy", _pad_rows(inputs, PAD), _pad_rows(targets, IGNORE), lengths, rng, seed,
                  {"task": "copy", "n": n, "len_range": list(len_range)})


def gen_parity(n: int, len_range=(2, 50), seed: int = 0) -> DatasetSplit:
    lo, hi = len_range
    if lo < 1 or hi < lo:
        raise DataError(f"invalid parity length range {len_range}")
    rng = RngState(seed)
    lens = rng.gen.integers(lo, hi + 1, size=n)
    rows = [rng.gen.integers(0, 2, size=int(L)) for L in lens]
    labels = np.array([parity_label(r) for r in rows], dtype=np.int64)
    return _split("parity", _pad_rows(rows, PARITY_PAD), labels, lens.astype(np.int64), rng, seed,
                  {"task": "parity", "n": n, "len_range": list(len_range)})


def build_lm_dataset(corpus_path, context_len: int = 50, seed: int = 0) -> DatasetSplit:
    """Byte tokens cut into non-overlapping windows of ``context_len``; targets shifted by one."""
    try:
        with open(corpus_path, "rb") as fh:
            raw = fh.read()
    except OSError as e:
        raise DataError(f"cannot read corpus {corpus_path}: {e}") from e
    try:
        raw.decode("utf-8")
    except UnicodeDecodeError as e:
        raise DataError("corpus is not valid UTF-8") from e
    if len(raw) < 10 * context_len:
        raise DataError(f"corpus has {len(raw)} bytes; need at least {10 * context_len}")
    data = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
    nwin = (len(data) - 1) // context_len
    starts = np.arange(nwin) * context_len
    idx = starts[:, None] + np.arange(context_len)[None, :]
    x, y = data[idx], data[idx + 1]
    lengths = np.full(nwin, context_len, dtype=np.int64)
    meta = {"task": "lm", "context_len": context_len, "bytes": len(raw),
            "corpus_sha256": hashlib.sha256(raw).hexdigest()}
    return _split("lm", x, y, lengths, RngState(seed), seed, meta)


# ---------------------------------------------------------------- images

SHAPES = ("square", "circle", "triangle", "cross", "hbar", "vbar", "ring", "diamond")


def _render(kind, size, cy, cx, r):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    if kind == "square":
        return (np.abs(dy) <= r) & (np.abs(dx) <= r)
    if kind == "circle":
        return dy * dy + dx * dx <= r * r
    if kind == "triangle":
        return (dy <= r) & (dy >= -r) & (np.abs(dx) <= (dy + r) / 2)
    if kind == "cross":
        w = max(r / 3, 0.6)
        return ((np.abs(dy) <= w) & (np.abs(dx) <= r)) | ((np.abs(dx) <= w) & (np.abs(dy) <= r))
    if kind == "hbar":
        return (np.abs(dy) <= max(r / 3, 0.6)) & (np.abs(dx) <= r)
    if kind == "vbar":
        return (np.abs(dx) <= max(r / 3, 0.6)) & (np.abs(dy) <= r)
    if kind == "ring":
        d2 = dy * dy + dx * dx
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    if kind == "diamond":
        return np.abs(dy) + np.abs(dx) <= r
    raise DataError(f"unknown shape {kind}")


@dataclass
class SynthImageSpec:
    classes: int = 4
    size: int = 16
    n: int = 4000
    channels: int = 1
    noise: float = 0.1

    def validate(self):
        if not 2 <= self.classes <= len(SHAPES):
            raise DataError(f"classes must be in [2, {len(SHAPES)}]")
        if self.size < 8 or self.n < 10 or self.channels < 1:
            raise DataError("synthetic image spec too small")


def synth_images(spec: SynthImageSpec, seed: int):
    """Labelled shape images in [0, 1]; class = shape type."""
    spec.validate()
    rng = RngState(seed)
    s = spec.size
    x = np.empty((spec.n, spec.channels, s, s), dtype=np.float32)
    y = rng.gen.integers(0, spec.classes, size=spec.n).astype(np.int64)
    for i in range(spec.n):
        r = rng.gen.uniform(0.18 * s, 0.32 * s)
        cy, cx = rng.gen.uniform(r, s - 1 - r, size=2)
        mask = _render(SHAPES[y[i]], s, cy, cx, r).astype(np.float32)
        fg = rng.gen.uniform(0.6, 1.0, size=spec.channels).astype(np.float32)
        bg = rng.gen.uniform(0.0, 0.3, size=spec.channels).astype(np.float32)
        img = bg[:, None, None] + (fg - bg)[:, None, None] * mask[None]
        img += spec.noise * rng.gen.standard_normal(img.shape).astype(np.float32)
        x[i] = np.clip(img, 0.0, 1.0)
    return x, y


GIMG_MAGIC = b"GIMG"


def write_gimg(path, x: np.ndarray, y: np.ndarray) -> None:
    """Raw image container: magic, u32 version=1, u32 n, C, H, W, u8 pixels, u16 labels."""
    n, c, h, w = x.shape
    pix = np.clip(np.rint(np.asarray(x) * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(GIMG_MAGIC)
        fh.write(struct.pack("<5I", 1, n, c, h, w))
        fh.write(pix.tobytes())
        fh.write(np.asarray(y, dtype="<u2").tobytes())


def read_gimg(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != GIMG_MAGIC or len(raw) < 24:
        raise DataError(f"{path}: malformed GIMG header")
    version, n, c, h, w = struct.unpack("<5I", raw[4:24])
    if version != 1:
        raise DataError(f"{path}: unsupported GIMG version {version}")
    npx = n * c * h * w
    if len(raw) != 24 + npx + 2 * n:
        raise DataError(f"{path}: size does not match header")
    x = np.frombuffer(raw[24:24 + npx], dtype=np.uint8).reshape(n, c, h, w).astype(np.float32) / 255.0
    y = np.frombuffer(raw[24 + npx:], dtype="<u2").astype(np.int64)
    return x, y


def load_image_dataset(source, seed: int = 0, classes: int | None = None) -> DatasetSplit:
    """``source`` is a GIMG path or a :class:`SynthImageSpec` (or dict of its fields)."""
    if isinstance(source, dict):
        source = SynthImageSpec(**source)
    if isinstance(source, SynthImageSpec):
        x, y = synth_images(source, seed)
        meta = {"task": "image", "synth": source.__dict__.copy()}
        n_cls = source.classes
    else:
        x, y = read_gimg(source)
        n_cls = classes if classes is not None else int(y.max()) + 1
        if y.size and y.max() >= n_cls:
            raise DataError(f"label {int(y.max())} out of range for {n_cls} classes")
        h = hashlib.sha256()
        h.update(x.tobytes())
        h.update(y.tobytes())
        meta = {"task": "image", "file_sha256": h.hexdigest(), "classes": n_cls}
    if not np.isfinite(x).all() or x.min() < 0 or x.max() > 1:
        raise DataError("pixels must be finite and in [0, 1]")
    meta["classes"] = n_cls
    return _split("image", x, y, None, RngState(seed, 1), seed, meta)


# ---------------------------------------------------------------- text files

def write_sequence_file(path, ds: Dataset) -> None:
    """``tokens<TAB>targets`` lines (space-separated ints); parity uses ``bits<TAB>label``."""
    with open(path, "w", encoding="utf-8") as fh:
        for i in range(len(ds)):
            L = int(ds.lengths[i])
            toks = " ".join(str(int(t)) for t in ds.x[i, :L])
            if ds.task == "parity":
                fh.write("".join(str(int(t)) for t in ds.x[i, :L]) + f"\t{int(ds.y[i])}\n")
            else:
                fh.write(toks + "\t" + " ".join(str(int(t)) for t in ds.y[i, :L]) + "\n")


def read_sequence_file(path, task: str) -> Dataset:
    xs, ys = [], []
    with open(path, encoding="utf-8") as fh:
        for ln, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            try:
                a, b = line.split("\t")
                if task == "parity":
                    xs.append([int(c) for c in a])
                    ys.append(int(b))
                else:
                    xs.append([int(t) for t in a.split()])
                    ys.append([int(t) for t in b.split()])
            except ValueError as e:
                raise DataError(f"{path}:{ln}: malformed line") from e
    lengths = np.array([len(r) for r in xs], dtype=np.int64)
    pad = PARITY_PAD if task == "parity" else PAD
    y = np.array(ys, dtype=np.int64) if task == "parity" else _pad_rows(ys, IGNORE)
    return Dataset(task, _pad_rows(xs, pad), y, np.arange(len(xs), dtype=np.int64), lengths)


def save_split(split: DatasetSplit, out_dir) -> dict:
    os.makedirs(out_dir, exist_ok=True)
    for name in ("train", "val", "test"):
        ds = getattr(split, name)
        if ds.task == "image":
            write_gimg(os.path.join(out_dir, f"{name}.gimg"), ds.x, ds.y)
        else:
            write_sequence_file(os.path.join(out_dir, f"{name}.tsv"), ds)
    man = split.manifest()
    man["ids"] = {name: getattr(split, name).ids.tolist() for name in ("train", "val", "test")}
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(man, fh, indent=2, sort_keys=True)
    return man


def load_split(out_dir) -> DatasetSplit:
    """Inverse of :func:`save_split` (images come back quantised to 8 bits)."""
    try:
        with open(os.path.join(out_dir, "manifest.json"), encoding="utf-8") as fh:
            man = json.load(fh)
    except (OSError, ValueError) as e:
        raise DataError(f"{out_dir}: cannot read manifest: {e}") from e
    task = man["task"]
    sets = []
    for name in ("train", "val", "test"):
        if task == "image":
            x, y = read_gimg(os.path.join(out_dir, f"{name}.gimg"))
            ds = Dataset(task, x, y, np.arange(len(y), dtype=np.int64))
        else:
            ds = read_sequence_file(os.path.join(out_dir, f"{name}.tsv"), task)
        ids = man.get("ids", {}).get(name)
        if ids is not None:
            if len(ids) != len(ds):
                raise DataError(f"{out_dir}: {name} has {len(ds)} rows but {len(ids)} ids")
            ds.ids = np.asarray(ids, dtype=np.int64)
        sets.append(ds)
    return DatasetSplit(*sets, seed=man["seed"], meta=man.get("meta", {}))


# ---------------------------------------------------------------- batching

@dataclass
class Batch:
    x: np.ndarray
    y: np.ndarray
    mask: np.ndarray | None = None  # True at real (non batch-padding) positions
    ids: np.ndarray | None = None

    def __len__(self):
        return len(self.x)


def make_batch(ds: Dataset, idx) -> Batch:
    idx = np.asarray(idx)
    if ds.lengths is None:
        return Batch(ds.x[idx], ds.y[idx], None, ds.ids[idx])
    lens = ds.lengths[idx]
    T = int(lens.max())
    mask = np.arange(T)[None, :] < lens[:, None]
    y = ds.y[idx] if ds.y.ndim == 1 else ds.y[idx, :T]
    return Batch(ds.x[idx, :T], y, mask, ds.ids[idx])


def iterate_batches(ds: Dataset, batch_size: int, rng: RngState | None = None, drop_last: bool = False):
    n = len(ds)
    order = rng.gen.permutation(n) if rng is not None else np.arange(n)
    stop = n - n % batch_size if drop_last and n >= batch_size else n
    for s in range(0, stop, batch_size):
        yield make_batch(ds, order[s:s + batch_size])


# ---------------------------------------------------------------- metrics

def _log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def eval_metrics(predictions: np.ndarray, dataset, task: str) -> dict:
    """Task metrics from logits.

    parity/image: accuracy (and top5 for images); copy: token accuracy over
    unmasked positions plus exact-sequence accuracy; lm: perplexity.
    ``dataset`` may be a Dataset or an array of targets.
    """
    y = dataset.y if isinstance(dataset, Dataset) else np.asarray(dataset)
    p = np.asarray(predictions, dtype=np.float64)
    if len(p) != len(y):
        raise DataError(f"{len(p)} predictions for {len(y)} examples")
    if task in ("parity", "image"):
        out = {"accuracy": float((p.argmax(axis=1) == y).mean())}
        if task == "image":
            k = min(5, p.shape[1])
            top = np.argsort(-p, axis=1, kind="stable")[:, :k]
            out["top5"] = float((top == y[:, None]).any(axis=1).mean())
        return out
    T = min(p.shape[1], y.shape[1])
    p, y = p[:, :T], y[:, :T]
    valid = y != IGNORE
    if task == "copy":
        hit = (p.argmax(axis=-1) == y) & valid
        token = hit.sum() / max(valid.sum(), 1)
        exact = np.all(hit | ~valid, axis=1).mean()
        return {"token_accuracy": float(token), "sequence_accuracy": float(exact)}
    if task == "lm":
        lp = _log_softmax(p)
        yy = np.where(valid, y, 0)
        nll = -np.take_along_axis(lp, yy[..., None], axis=-1)[..., 0]
        return {"perplexity": float(np.exp(nll[valid].mean()))}
    raise DataError(f"unknown task {task!r}")


HEADLINE = {"parity": "accuracy", "image": "accuracy", "copy": "token_accuracy", "lm": "perplexity"}
