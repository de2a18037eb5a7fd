"""Procedural video-text pairs.

Each video shows a gray shape moving along one axis over a textured
background, drawn with a short motion-blur trail. The shape takes on its
color only inside a short event window, and that window is placed so it
never contains the frames a 2-frame uniform sampler would pick. Sparse
uniform sampling therefore sees the shape and motion axis but not the color.
"""

from __future__ import annotations

import json
import struct
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .records import FormatError, Reader
from .sampling import uniform_indices

DATA_MAGIC = b"MOFDATA1"
DATA_VERSION = 1

SHAPES = ("square", "circle", "triangle", "cross")
COLORS = ("red", "green", "blue", "yellow")
MOTIONS = ("horizontally", "vertically")

_RGB = {
    "red": (0.95, 0.1, 0.1),
    "green": (0.1, 0.9, 0.15),
    "blue": (0.15, 0.2, 0.95),
    "yellow": (0.95, 0.9, 0.1),
}
_GRAY = (0.6, 0.6, 0.6)

DETERMINERS = ("a", "the", "one")
VERBS = ("moves", "slides", "drifts", "travels")
ADVERBS = ("slowly", "quickly", "steadily", "smoothly")
# words never produced by the generator; they pad the table to a fixed size
RESERVED = (
    "<pad>", "<unk>", "purple", "orange", "white", "black", "star", "ring",
    "left", "right", "up", "down", "across", "small", "big", "shape",
    "object", "scene", "frame",
)
VOCAB: tuple[str, ...] = RESERVED[:2] + DETERMINERS + COLORS + SHAPES + VERBS + MOTIONS + ADVERBS + RESERVED[2:]

MAX_REPEATS = 8
SHAPE_SIZE = 5
BG_LOW, BG_HIGH = 0.15, 0.2
BG_TEXTURE = 0.02
FRAME_NOISE = 0.02


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class PairMeta:
    shape: int
    color: int
    motion: int
    t0: int
    t1: int  # inclusive

    @property
    def triple(self) -> tuple[int, int, int]:
        return (self.shape, self.color, self.motion)


@dataclass
class VideoTextPair:
    video_id: str
    video: Tensor  # [N, C, H, W], values in [0, 1]
    tokens: list[int]
    meta: PairMeta


@dataclass
class Dataset:
    pairs: list[VideoTextPair]
    splits: dict[str, list[str]]
    vocab: list[str]
    gen_seed: int
    frames: int
    channels: int
    height: int
    width: int
    _index: dict[str, VideoTextPair] = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self._index = {p.video_id: p for p in self.pairs}

    def get(self, video_id: str) -> VideoTextPair:
        return self._index[video_id]

    def split(self, name: str) -> list[VideoTextPair]:
        return [self._index[i] for i in self.splits[name]]

    @property
    def train(self) -> list[VideoTextPair]:
        return self.split("train")

    @property
    def test(self) -> list[VideoTextPair]:
        return self.split("test")


def _templates() -> dict[str, np.ndarray]:
    s = SHAPE_SIZE
    yy, xx = np.mgrid[0:s, 0:s]
    c = (s - 1) / 2
    square = np.ones((s, s))
    circle = ((yy - c) ** 2 + (xx - c) ** 2 <= (c + 0.3) ** 2).astype(float)
    triangle = (np.abs(xx - c) <= yy / 2 + 0.1).astype(float)
    cross = ((np.abs(xx - c) < 0.6) | (np.abs(yy - c) < 0.6)).astype(float)
    return {"square": square, "circle": circle, "triangle": triangle, "cross": cross}


_TEMPLATES = _templates()


def _video_rng(gen_seed: int, video_id: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([gen_seed, zlib.crc32(video_id.encode())]))


def _event_window(rng: np.random.Generator, n: int) -> tuple[int, int]:
    max_len = max(1, n // 4)
    length = int(rng.integers(min(2, max_len), max_len + 1)) if max_len > 1 else 1
    avoid = set(uniform_indices(n, 2)) if n >= 2 else set()
    starts = [s for s in range(n - length + 1) if not avoid & set(range(s, s + length))]
    if not starts:
        starts = list(range(n - length + 1))
    t0 = int(starts[int(rng.integers(len(starts)))])
    return t0, t0 + length - 1


def render_video(meta: PairMeta, rng: np.random.Generator, n: int, c: int, h: int, w: int) -> np.ndarray:
    """Render one clip as float32 [N, C, H, W] in [0, 1]."""
    if c != 3:
        raise DatasetError("renderer draws RGB frames; channels must be 3")
    base = rng.uniform(BG_LOW, BG_HIGH, size=(3, 1, 1))
    texture = base + BG_TEXTURE * rng.standard_normal((3, h, w))
    tmpl = _TEMPLATES[SHAPES[meta.shape]]
    s = tmpl.shape[0]
    reverse = bool(rng.integers(2))
    across = float(rng.uniform(1, max(1, (h if meta.motion == 0 else w) - s - 1)))
    span = (w if meta.motion == 0 else h) - s
    trail = (0.45, 0.2)
    video = np.empty((n, 3, h, w))
    for t in range(n):
        frame = texture + FRAME_NOISE * rng.standard_normal((3, h, w))
        lit = meta.t0 <= t <= meta.t1
        rgb = np.array(_RGB[COLORS[meta.color]] if lit else _GRAY).reshape(3, 1, 1)
        frac = t / max(1, n - 1)
        along = span * (1 - frac if reverse else frac)
        step = -1.0 if reverse else 1.0
        # trailing copies first so the leading shape is drawn on top
        for k, alpha in reversed(list(enumerate((1.0,) + trail))):
            pos = along - step * 1.5 * k
            pos = min(max(pos, 0.0), span)
            a = int(round(pos))
            b = int(round(across))
            y, x = (b, a) if meta.motion == 0 else (a, b)
            region = frame[:, y : y + s, x : x + s]
            m = tmpl[: region.shape[1], : region.shape[2]] * alpha
            region[...] = region * (1 - m) + rgb * m
        video[t] = frame
    return np.clip(video, 0.0, 1.0).astype(np.float32)


def make_caption(meta: PairMeta, rng: np.random.Generator) -> list[int]:
    words = []
    if rng.random() < 0.5:
        words.append(DETERMINERS[int(rng.integers(len(DETERMINERS)))])
    words += [COLORS[meta.color], SHAPES[meta.shape], VERBS[int(rng.integers(len(VERBS)))], MOTIONS[meta.motion]]
    if rng.random() < 0.5:
        words.append(ADVERBS[int(rng.integers(len(ADVERBS)))])
    return [VOCAB.index(wd) for wd in words]


def decode_caption(tokens: list[int], vocab=VOCAB) -> tuple[int, int, int]:
    words = [vocab[t] for t in tokens]
    shape = [SHAPES.index(wd) for wd in words if wd in SHAPES]
    color = [COLORS.index(wd) for wd in words if wd in COLORS]
    motion = [MOTIONS.index(wd) for wd in words if wd in MOTIONS]
    if len(shape) != 1 or len(color) != 1 or len(motion) != 1:
        raise DatasetError(f"caption {' '.join(words)!r} does not name exactly one shape, color and motion")
    return shape[0], color[0], motion[0]


def _all_triples() -> list[tuple[int, int, int]]:
    return [(s, c, m) for s in range(len(SHAPES)) for c in range(len(COLORS)) for m in range(len(MOTIONS))]


def _make_pair(seed: int, vid: str, triple: tuple[int, int, int], frames: int, channels: int,
               height: int, width: int) -> VideoTextPair:
    rng = _video_rng(seed, vid)
    t0, t1 = _event_window(rng, frames)
    s, c, m = triple
    meta = PairMeta(shape=s, color=c, motion=m, t0=t0, t1=t1)
    video = render_video(meta, rng, frames, channels, height, width)
    tokens = make_caption(meta, rng)
    return VideoTextPair(vid, ad.Tensor(video, "f32"), tokens, meta)


def generate_dataset(
    seed: int, n_train: int = 64, n_test: int = 32, frames: int = 16, channels: int = 3, height: int = 16,
    width: int = 16, workers: int = 1,
) -> Dataset:
    """Each video draws from its own seeded stream, so ``workers`` never changes the output."""
    if min(n_train, n_test, frames, channels) < 1:
        raise DatasetError("sizes must be at least 1")
    if height != width or height < 8:
        raise DatasetError(f"frames must be square and at least 8x8, got {height}x{width}")
    triples = _all_triples()
    cap = len(triples) * MAX_REPEATS
    for name, n in (("train", n_train), ("test", n_test)):
        if n > cap:
            raise DatasetError(f"{n} {name} pairs exceeds {len(triples)} distinct triples x {MAX_REPEATS} repeats")

    split_rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    jobs: list[tuple[str, tuple[int, int, int]]] = []
    splits: dict[str, list[str]] = {}
    for name, n in (("train", n_train), ("test", n_test)):
        order = [triples[i] for i in split_rng.permutation(len(triples))]
        ids = [f"{name}-{k:04d}" for k in range(n)]
        jobs += [(vid, order[k % len(order)]) for k, vid in enumerate(ids)]
        splits[name] = ids

    def make(job):
        return _make_pair(seed, job[0], job[1], frames, channels, height, width)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            pairs = list(pool.map(make, jobs))
    else:
        pairs = [make(j) for j in jobs]
    return Dataset(
        pairs=pairs, splits=splits, vocab=list(VOCAB), gen_seed=int(seed),
        frames=frames, channels=channels, height=height, width=width,
    )


def summarize(ds: Dataset) -> dict:
    lengths = [p.meta.t1 - p.meta.t0 + 1 for p in ds.pairs]
    sparse = set(uniform_indices(ds.frames, 2))
    missed = sum(1 for p in ds.pairs if not sparse & set(range(p.meta.t0, p.meta.t1 + 1)))
    return {
        "seed": ds.gen_seed,
        "train": len(ds.splits["train"]),
        "test": len(ds.splits["test"]),
        "frames": ds.frames,
        "channels": ds.channels,
        "height": ds.height,
        "width": ds.width,
        "vocab_size": len(ds.vocab),
        "event_window": {
            "min_len": min(lengths),
            "max_len": max(lengths),
            "mean_len": float(np.mean(lengths)),
            "mean_start": float(np.mean([p.meta.t0 for p in ds.pairs])),
            "missed_by_2_frame_uniform": missed / len(ds.pairs),
        },
    }


# ---------------------------------------------------------------------------
# binary format
#
# magic "MOFDATA1" | u16 version | u32 N C H W | u32 n_train n_test | u64 seed
# | u32 vocab_size, then per word: u16 len + utf-8
# | per pair: u16 id_len + id | u8 split | u8 shape color motion | u16 t0 t1
#   | u8 n_tokens + u16 tokens | f32 frames (N*C*H*W, little-endian)


def save_dataset(ds: Dataset, path: str | Path) -> None:
    n_train, n_test = len(ds.splits["train"]), len(ds.splits["test"])
    test_ids = set(ds.splits["test"])
    buf = bytearray(DATA_MAGIC)
    buf += struct.pack("<H", DATA_VERSION)
    buf += struct.pack("<4I", ds.frames, ds.channels, ds.height, ds.width)
    buf += struct.pack("<2I", n_train, n_test)
    buf += struct.pack("<Q", ds.gen_seed)
    buf += struct.pack("<I", len(ds.vocab))
    for word in ds.vocab:
        raw = word.encode("utf-8")
        buf += struct.pack("<H", len(raw)) + raw
    for vid in ds.splits["train"] + ds.splits["test"]:
        p = ds.get(vid)
        raw = vid.encode("utf-8")
        buf += struct.pack("<H", len(raw)) + raw
        buf += struct.pack("<B", 1 if vid in test_ids else 0)
        buf += struct.pack("<3B2H", p.meta.shape, p.meta.color, p.meta.motion, p.meta.t0, p.meta.t1)
        buf += struct.pack(f"<B{len(p.tokens)}H", len(p.tokens), *p.tokens)
        buf += np.ascontiguousarray(p.video.data, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(buf))


def load_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    r = Reader(path.read_bytes(), str(path))
    r.magic(DATA_MAGIC)
    version = r.unpack("H")
    if version != DATA_VERSION:
        r.fail(f"unsupported dataset version {version} (expected {DATA_VERSION})", r.pos - 2)
    n, c, h, w = r.unpack("4I")
    n_train, n_test = r.unpack("2I")
    seed = r.unpack("Q")
    vocab = [r.string("H") for _ in range(r.unpack("I"))]
    pairs, splits = [], {"train": [], "test": []}
    for _ in range(n_train + n_test):
        vid = r.string("H")
        split = r.unpack("B")
        if split > 1:
            r.fail(f"bad split tag {split}", r.pos - 1)
        shape, color, motion, t0, t1 = r.unpack("3B2H")
        n_tok = r.unpack("B")
        tokens = list(r.unpack(f"{n_tok}H")) if n_tok > 1 else [r.unpack("H")] if n_tok == 1 else []
        video = r.array((n, c, h, w), "<f4").astype(np.float32)
        pairs.append(VideoTextPair(vid, ad.Tensor(video, "f32"), tokens, PairMeta(shape, color, motion, t0, t1)))
        splits["test" if split else "train"].append(vid)
    if not r.at_end():
        r.fail("trailing bytes after last pair")
    if len(splits["train"]) != n_train or len(splits["test"]) != n_test:
        raise FormatError(f"{path}: split counts disagree with header")
    return Dataset(pairs=pairs, splits=splits, vocab=vocab, gen_seed=seed, frames=n, channels=c, height=h, width=w)


def write_summary(ds: Dataset, path: str | Path) -> None:
    Path(path).write_text(json.dumps(summarize(ds), indent=2) + "\n", encoding="utf-8")
