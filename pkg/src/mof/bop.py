"""Meta-optimized frames: alternating model-level and frame-level updates.

Each phase draws a minibatch, trains the retrieval model one AdamW step on
the batch's meta-optimized frames, then updates those frames by
differentiating a validation loss on regular frames through one (or a few)
unrolled SGD steps of a throwaway copy of the model.
"""

from __future__ import annotations

import json
import logging
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Dataset, VideoTextPair
from .encoders import EncoderDims, ModelParams, clone_params, encode_texts, encode_videos, init_params
from .evaluation import RetrievalReport, evaluate
from .loss import DEFAULT_SIGMA, contrastive_loss
from .optim import AdamState, AdamWState, adam_step, adamw_step, sgd_step_differentiable
from .records import MEMORY_MAGIC, FormatError, Reader, read_records, write_records
from .sampling import random_sample, uniform_sample

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class NumericalError(TrainingError):
    def __init__(self, message: str, phase: int | None = None):
        super().__init__(message if phase is None else f"phase {phase}: {message}")
        self.phase = phase


class FirstOrderWarning(UserWarning):
    pass


# ---------------------------------------------------------------------------
# frame memory


@dataclass
class MetaFrames:
    video_id: str
    frames: Tensor
    opt_state: AdamState
    init_indices: list[int]


def init_meta_frames(video_id: str, video, u: int, precision: str = "f32") -> MetaFrames:
    sampled, idx = uniform_sample(video, u)
    frames = ad.tensor(sampled.data, precision, requires_grad=True)
    return MetaFrames(video_id, frames, AdamState.for_params([frames]), idx)


class FrameMemory:
    """video_id -> MetaFrames. Lookups hand back the stored object unchanged."""

    def __init__(self) -> None:
        self._entries: dict[str, MetaFrames] = {}

    def __contains__(self, video_id: str) -> bool:
        return video_id in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self):
        return iter(sorted(self._entries))

    def get(self, video_id: str) -> MetaFrames:
        return self._entries[video_id]

    def put(self, mf: MetaFrames) -> None:
        self._entries[mf.video_id] = mf

    def get_or_init(self, pair: VideoTextPair, u: int, precision: str) -> MetaFrames:
        if pair.video_id not in self._entries:
            self._entries[pair.video_id] = init_meta_frames(pair.video_id, pair.video, u, precision)
        return self._entries[pair.video_id]

    def save(self, path: str | Path) -> None:
        with open(path, "wb") as fh:
            fh.write(MEMORY_MAGIC)
            ids = sorted(self._entries)
            fh.write(len(ids).to_bytes(4, "little"))
            for vid in ids:
                mf = self._entries[vid]
                raw = vid.encode("utf-8")
                fh.write(len(raw).to_bytes(4, "little"))
                fh.write(raw)
                st = mf.opt_state
                write_records(fh, {
                    "frames": mf.frames.data,
                    "adam.m": st.m[0],
                    "adam.v": st.v[0],
                    "adam.step_count": np.asarray(float(st.step_count)),
                    "adam.hyper": np.asarray([st.beta1, st.beta2, st.eps]),
                    "init_indices": np.asarray(mf.init_indices, dtype=np.float64),
                })

    @classmethod
    def load(cls, path: str | Path) -> "FrameMemory":
        path = Path(path)
        r = Reader(path.read_bytes(), str(path))
        r.magic(MEMORY_MAGIC)
        mem = cls()
        for _ in range(r.unpack("I")):
            vid = r.string()
            rec = read_records(r)
            try:
                b1, b2, eps = (float(x) for x in rec["adam.hyper"])
                st = AdamState(m=[rec["adam.m"]], v=[rec["adam.v"]], step_count=int(rec["adam.step_count"]),
                               beta1=b1, beta2=b2, eps=eps)
                frames = Tensor(rec["frames"], requires_grad=True)
                mem.put(MetaFrames(vid, frames, st, [int(i) for i in rec["init_indices"]]))
            except KeyError as exc:
                raise FormatError(f"{path}: section {vid!r} lacks record {exc.args[0]}") from None
        if not r.at_end():
            r.fail("trailing bytes after last section")
        return mem


# ---------------------------------------------------------------------------
# configuration


@dataclass
class PhaseConfig:
    U: int = 2
    R: int = 16
    t: int = 400
    alpha: float = 1e-3
    beta: float = 8e-4
    inner_steps: int = 1
    batch_size: int = 16
    eval_every: int | None = None  # None: once per epoch
    first_order: bool = False
    seed: int = 0
    sigma: float = DEFAULT_SIGMA
    weight_decay: float = 0.01
    k_test: int | None = None  # None: U
    precision: str = "f32"
    mof: bool = True

    def validate(self, n_frames: int | None = None) -> None:
        errs = []
        if self.U < 1 or self.R < self.U:
            errs.append(f"need 1 <= U <= R, got U={self.U} R={self.R}")
        if n_frames is not None and self.R > n_frames:
            errs.append(f"R={self.R} exceeds the {n_frames} frames per video")
        if self.t < 1:
            errs.append(f"t must be >= 1, got {self.t}")
        if self.alpha < 0 or self.beta < 0:
            errs.append("learning rates must be nonnegative")
        if self.inner_steps < 0:
            errs.append("inner_steps must be >= 0")
        if self.batch_size < 2:
            errs.append("batch_size must be >= 2 for a contrastive loss")
        if self.eval_every is not None and self.eval_every < 1:
            errs.append("eval_every must be >= 1")
        if self.sigma <= 0:
            errs.append("sigma must be positive")
        if self.precision not in ("f32", "f64"):
            errs.append(f"unknown precision {self.precision!r}")
        if errs:
            raise ValueError("; ".join(errs))


# ---------------------------------------------------------------------------
# model level


def _batch_loss(theta: ModelParams, frames: Sequence[Tensor], captions: Sequence[Sequence[int]], sigma: float) -> Tensor:
    ev = encode_videos(theta, ad.stack(frames))
    et = encode_texts(theta, captions)
    return contrastive_loss(ev, et, sigma).l_c


def model_level_step(
    theta: ModelParams,
    batch: Sequence[tuple[MetaFrames | Tensor, Sequence[int]]],
    opt: AdamWState,
    alpha: float,
    sigma: float = DEFAULT_SIGMA,
) -> float:
    """One AdamW step on the model; the input frames are held constant."""
    if len(batch) < 2:
        raise TrainingError("model-level step needs at least 2 pairs")
    frames = [(x.frames if isinstance(x, MetaFrames) else x).detach() for x, _ in batch]
    loss = _batch_loss(theta, frames, [tok for _, tok in batch], sigma)
    params = theta.tensors()
    grads = ad.grad(loss, params)
    adamw_step(params, grads, opt, alpha)
    return loss.item()


# ---------------------------------------------------------------------------
# frame level


def unrolled_model(theta_star: ModelParams, eps: Sequence[Tensor], captions, alpha: float,
                   inner_steps: int, first_order: bool, sigma: float) -> ModelParams:
    """Clone the model and take ``inner_steps`` SGD steps on the frames ``eps``.

    The returned parameters stay on the tape so they can be differentiated
    with respect to ``eps`` (unless ``first_order``).
    """
    names = [n for n, _ in theta_star.named_tensors()]
    params = clone_params(theta_star).tensors()
    for _ in range(inner_steps):
        model = ModelParams.from_tensors(theta_star.dims, dict(zip(names, params)))
        inner = _batch_loss(model, eps, captions, sigma)
        if first_order:
            grads = ad.grad(inner, params)
            params = [ad.sub(p, ad.scale(g, alpha)) for p, g in zip(params, grads)]
        else:
            params = sgd_step_differentiable(params, inner, alpha)
    return ModelParams.from_tensors(theta_star.dims, dict(zip(names, params)))


def meta_loss_and_grad(
    theta_star: ModelParams,
    eps: Sequence[Tensor],
    regular: Sequence[Tensor],
    captions: Sequence[Sequence[int]],
    alpha: float,
    inner_steps: int = 1,
    first_order: bool = False,
    sigma: float = DEFAULT_SIGMA,
    need_grad: bool = True,
) -> tuple[float, list[np.ndarray] | None]:
    """Validation loss of the unrolled model on regular frames, and its
    gradient with respect to each video's meta-frames."""
    theta2 = unrolled_model(theta_star, eps, captions, alpha, inner_steps, first_order, sigma)
    meta = _batch_loss(theta2, [r.detach() for r in regular], captions, sigma)
    if not need_grad:
        return meta.item(), None
    grads = ad.grad(meta, eps)
    return meta.item(), [g.data for g in grads]


def meta_loss_value(theta_star, eps_arrays, regular, captions, alpha, inner_steps=1, sigma=DEFAULT_SIGMA) -> float:
    """Meta loss for fixed frame values; the finite-difference side of grad checks."""
    eps = [Tensor(e, requires_grad=True) for e in eps_arrays]
    val, _ = meta_loss_and_grad(theta_star, eps, regular, captions, alpha, inner_steps, sigma=sigma, need_grad=False)
    return val


@dataclass
class FrameStepResult:
    meta_loss: float
    grads: list[np.ndarray]
    warnings: list[str] = field(default_factory=list)


def frame_level_step(
    theta_star: ModelParams,
    batch: Sequence[tuple[MetaFrames, Tensor, Sequence[int]]],
    alpha: float,
    beta: float,
    inner_steps: int = 1,
    first_order: bool = False,
    sigma: float = DEFAULT_SIGMA,
    phase: int | None = None,
) -> FrameStepResult:
    """Update each video's meta-frames with one Adam step on the meta-gradient.

    ``theta_star`` is only read.
    """
    notes = []
    if first_order:
        msg = "first_order=True: the validation loss reaches the frames only through the inner step, so the meta-gradient is exactly zero"
        warnings.warn(msg, FirstOrderWarning, stacklevel=2)
        notes.append(msg)
    eps = [mf.frames for mf, _, _ in batch]
    regular = [r for _, r, _ in batch]
    captions = [tok for _, _, tok in batch]
    meta, grads = meta_loss_and_grad(theta_star, eps, regular, captions, alpha, inner_steps, first_order, sigma)
    if not np.isfinite(meta):
        raise NumericalError(f"meta loss is {meta}", phase)
    for (mf, _, _), g in zip(batch, grads):
        if not np.isfinite(g).all():
            raise NumericalError(f"non-finite meta-gradient for {mf.video_id}", phase)
        adam_step([mf.frames], [g], mf.opt_state, beta)
    return FrameStepResult(meta, grads, notes)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class PhaseRecord:
    phase: int
    model_loss: float
    meta_loss: float | None
    wall_ms: float
    eval: RetrievalReport | None = None

    def to_json(self) -> dict:
        d = {"phase": self.phase, "model_loss": self.model_loss, "meta_loss": self.meta_loss, "wall_ms": self.wall_ms}
        if self.eval is not None:
            d["eval"] = self.eval.to_json()
        return d


@dataclass
class TrainingLog:
    records: list[PhaseRecord] = field(default_factory=list)
    # model-level AdamW state at the end of the run, saved with the checkpoint
    optimizer: AdamWState | None = None

    @property
    def evaluations(self) -> list[tuple[int, RetrievalReport]]:
        return [(r.phase, r.eval) for r in self.records if r.eval is not None]

    def best(self) -> tuple[int, RetrievalReport] | None:
        """Best evaluation over all phases: highest R@1, then lowest MedR, earliest phase."""
        evals = self.evaluations
        if not evals:
            return None
        return min(evals, key=lambda pe: (-pe[1].r_at[1], pe[1].med_r, pe[0]))

    def final(self) -> tuple[int, RetrievalReport] | None:
        evals = self.evaluations
        return evals[-1] if evals else None

    def write_jsonl(self, path: str | Path, timing: bool = True) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for r in self.records:
                d = r.to_json()
                if not timing:
                    d["wall_ms"] = 0.0
                    if "eval" in d:
                        d["eval"]["wall_ms"] = 0.0
                fh.write(json.dumps(d, sort_keys=True) + "\n")


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    """Endless stream of epoch-shuffled index batches; short tails under 2 are dropped."""
    while True:
        perm = rng.permutation(n)
        for start in range(0, n, batch_size):
            part = [int(i) for i in perm[start : start + batch_size]]
            if len(part) >= 2:
                yield part


def run_training(
    dataset: Dataset,
    config: PhaseConfig,
    dims: EncoderDims | None = None,
    on_phase: Callable[[PhaseRecord], None] | None = None,
    workers: int = 1,
) -> tuple[ModelParams, FrameMemory, TrainingLog]:
    """Algorithm loop. Training itself is single-threaded; ``workers`` only fans
    out the evaluation forward passes."""
    train = dataset.train
    if not train:
        raise TrainingError("dataset has no training pairs")
    config.validate(dataset.frames)
    if dims is None:
        dims = EncoderDims(height=dataset.height, width=dataset.width, channels=dataset.channels,
                           vocab=len(dataset.vocab))
    if max(config.R, config.U) > dims.max_frames:
        raise TrainingError(f"encoder holds at most {dims.max_frames} frames")
    k_test = config.k_test or config.U
    per_epoch = max(1, sum(1 for s in range(0, len(train), config.batch_size) if len(train[s:s + config.batch_size]) >= 2))
    eval_every = config.eval_every or per_epoch

    ss = np.random.SeedSequence(config.seed)
    init_seq, batch_seq, sample_seq = ss.spawn(3)
    theta = init_params(dims, int(init_seq.generate_state(1)[0]), config.precision)
    opt = AdamWState.for_params(theta.tensors(), weight_decay=config.weight_decay)
    memory = FrameMemory()
    batches = _batches(len(train), config.batch_size, np.random.default_rng(batch_seq))
    sample_rng = np.random.default_rng(sample_seq)
    dtype = theta.video.proj.dtype
    tlog = TrainingLog()

    for phase in range(config.t):
        t0 = time.perf_counter()
        pairs = [train[i] for i in next(batches)]
        tokens = [p.tokens for p in pairs]
        try:
            if config.mof:
                mfs = [memory.get_or_init(p, config.U, config.precision) for p in pairs]
                model_loss = model_level_step(theta, list(zip(mfs, tokens)), opt, config.alpha, config.sigma)
            else:
                frames = [Tensor(uniform_sample(p.video, config.U)[0].data.astype(dtype)) for p in pairs]
                model_loss = model_level_step(theta, list(zip(frames, tokens)), opt, config.alpha, config.sigma)
            if not np.isfinite(model_loss) or not all(t.is_finite() for t in theta.tensors()):
                raise NumericalError("non-finite model loss or parameters", phase)

            report = None
            if (phase + 1) % eval_every == 0:
                report = evaluate(theta, dataset.test, k_test, workers=workers)

            meta_loss = None
            if config.mof:
                regular = [Tensor(random_sample(p.video, config.R, sample_rng)[0].data.astype(dtype)) for p in pairs]
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", FirstOrderWarning)
                    res = frame_level_step(theta, list(zip(mfs, regular, tokens)), config.alpha, config.beta,
                                           config.inner_steps, config.first_order, config.sigma, phase)
                meta_loss = res.meta_loss
        except NumericalError:
            raise
        except (ValueError, FloatingPointError) as exc:
            raise TrainingError(f"phase {phase}: {exc}") from exc

        rec = PhaseRecord(phase, model_loss, meta_loss, (time.perf_counter() - t0) * 1000.0, report)
        tlog.records.append(rec)
        if on_phase is not None:
            on_phase(rec)
        if report is not None:
            log.info("phase %d loss %.4f R@1 %.3f MedR %.1f", phase, model_loss, report.r_at[1], report.med_r)
    tlog.optimizer = opt
    return theta, memory, tlog


def config_dict(config: PhaseConfig) -> dict:
    return asdict(config)
