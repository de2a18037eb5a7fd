"""Toy dual encoder: a patch-MLP video encoder with attention pooling over
frames, and a bag-of-tokens text encoder. Both map into the unit sphere."""

from __future__ import annotations

from dataclasses import astuple, dataclass, fields
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .optim import AdamState, AdamWState, state_from_records, state_to_records
from .records import CKPT_MAGIC, FormatError, load_container, save_container


class EncoderError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderDims:
    patch: int = 4
    height: int = 16
    width: int = 16
    channels: int = 3
    hidden: int = 32
    embed: int = 16
    max_frames: int = 32
    vocab: int = 40

    def __post_init__(self):
        if self.height % self.patch or self.width % self.patch:
            raise EncoderError(f"frame size {self.height}x{self.width} not divisible by patch {self.patch}")

    @property
    def n_patches(self) -> int:
        return (self.height // self.patch) * (self.width // self.patch)

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels


@dataclass
class VideoEncoderParams:
    patch_w1: Tensor
    patch_b1: Tensor
    patch_w2: Tensor
    patch_b2: Tensor
    pos_spatial: Tensor
    pos_temporal: Tensor
    attn_query: Tensor
    proj: Tensor


@dataclass
class TextEncoderParams:
    embed: Tensor
    proj_t: Tensor


@dataclass
class ModelParams:
    video: VideoEncoderParams
    text: TextEncoderParams
    dims: EncoderDims

    def named_tensors(self) -> Iterator[tuple[str, Tensor]]:
        """Stable, ordered enumeration used for optimizer state and checkpoints."""
        for prefix, group in (("video", self.video), ("text", self.text)):
            for f in fields(group):
                yield f"{prefix}.{f.name}", getattr(group, f.name)

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.named_tensors()]

    @property
    def precision(self) -> str:
        return self.video.proj.precision

    @classmethod
    def from_tensors(cls, dims: EncoderDims, named: dict[str, Tensor]) -> "ModelParams":
        video = VideoEncoderParams(**{f.name: named[f"video.{f.name}"] for f in fields(VideoEncoderParams)})
        text = TextEncoderParams(**{f.name: named[f"text.{f.name}"] for f in fields(TextEncoderParams)})
        return cls(video=video, text=text, dims=dims)


def init_params(dims: EncoderDims, seed: int, precision: str = "f32") -> ModelParams:
    rng = np.random.default_rng(seed)

    def uniform(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return ad.tensor(rng.uniform(-bound, bound, size=shape), precision, requires_grad=True)

    def zero(shape):
        return ad.tensor(np.zeros(shape), precision, requires_grad=True)

    d, h = dims.embed, dims.hidden
    video = VideoEncoderParams(
        patch_w1=uniform((dims.patch_dim, h), dims.patch_dim),
        patch_b1=zero((h,)),
        patch_w2=uniform((h, h), h),
        patch_b2=zero((h,)),
        pos_spatial=uniform((dims.n_patches, h), h),
        pos_temporal=uniform((dims.max_frames, h), h),
        attn_query=uniform((h,), h),
        proj=uniform((h, d), h),
    )
    text = TextEncoderParams(embed=uniform((dims.vocab, h), h), proj_t=uniform((h, d), h))
    return ModelParams(video=video, text=text, dims=dims)


def clone_params(params: ModelParams) -> ModelParams:
    named = {name: ad.Tensor(t.data.copy(), requires_grad=True) for name, t in params.named_tensors()}
    return ModelParams.from_tensors(params.dims, named)


def _patchify(frames: Tensor, dims: EncoderDims) -> Tensor:
    # [B, U, C, H, W] -> [B*U*patches, P*P*C]
    b, u, c, hgt, wid = frames.shape
    p = dims.patch
    x = ad.reshape(frames, (b, u, c, hgt // p, p, wid // p, p))
    x = ad.transpose(x, (0, 1, 3, 5, 2, 4, 6))
    return ad.reshape(x, (b * u * (hgt // p) * (wid // p), c * p * p))


def _add_bias(x: Tensor, bias: Tensor) -> Tensor:
    return ad.add(x, ad.expand(bias, 0, x.shape[0]))


def encode_videos(params: ModelParams, frames: Tensor, return_attention: bool = False):
    """Batched video encoder: frames [B, U, C, H, W] -> embeddings [B, D]."""
    dims = params.dims
    vp = params.video
    if frames.ndim != 5:
        raise EncoderError(f"expected [B, U, C, H, W] frames, got shape {frames.shape}")
    b, u, c, hgt, wid = frames.shape
    if (c, hgt, wid) != (dims.channels, dims.height, dims.width):
        raise EncoderError(f"frame shape {(c, hgt, wid)} does not match encoder {(dims.channels, dims.height, dims.width)}")
    if not 1 <= u <= dims.max_frames:
        raise EncoderError(f"{u} frames exceeds temporal capacity {dims.max_frames}")
    if frames.dtype != vp.proj.dtype:
        raise EncoderError(f"frames are {frames.precision}, params are {vp.proj.precision}")
    n_p, h = dims.n_patches, dims.hidden

    x = _patchify(frames, dims)
    x = ad.gelu(_add_bias(ad.matmul(x, vp.patch_w1), vp.patch_b1))
    x = _add_bias(ad.matmul(x, vp.patch_w2), vp.patch_b2)
    x = ad.reshape(x, (b * u, n_p, h))
    x = ad.add(x, ad.expand(vp.pos_spatial, 0, b * u))
    tokens = ad.reshape(ad.mean(x, 1), (b, u, h))
    pos_t = ad.row_gather(vp.pos_temporal, range(u))
    tokens = ad.add(tokens, ad.expand(pos_t, 0, b))

    flat = ad.reshape(tokens, (b * u, h))
    scores = ad.reshape(ad.matmul(flat, ad.reshape(vp.attn_query, (h, 1))), (b, u))
    weights = ad.softmax_rows(scores)
    pooled = ad.sum(ad.mul(tokens, ad.expand(weights, 2, h)), 1)
    out = ad.l2_normalize_rows(ad.matmul(pooled, vp.proj))
    if return_attention:
        return out, weights
    return out


def encode_video(params: ModelParams, frames: Tensor, return_attention: bool = False):
    """Single video [U, C, H, W] -> unit embedding [D]."""
    if frames.ndim != 4:
        raise EncoderError(f"expected [U, C, H, W] frames, got shape {frames.shape}")
    res = encode_videos(params, ad.reshape(frames, (1,) + frames.shape), return_attention)
    if return_attention:
        emb, w = res
        return ad.reshape(emb, (emb.shape[1],)), ad.reshape(w, (w.shape[1],))
    return ad.reshape(res, (res.shape[1],))


def _check_tokens(tokens: Sequence[int], vocab: int) -> list[int]:
    toks = [int(t) for t in tokens]
    if not toks:
        raise EncoderError("empty token list")
    bad = [t for t in toks if not 0 <= t < vocab]
    if bad:
        raise EncoderError(f"token id {bad[0]} out of range for vocabulary of {vocab}")
    # bag of tokens: canonical order makes the mean bitwise order-invariant
    return sorted(toks)


def encode_texts(params: ModelParams, captions: Sequence[Sequence[int]]) -> Tensor:
    """Batched text encoder: list of token lists -> embeddings [B, D]."""
    tp = params.text
    vocab = tp.embed.shape[0]
    rows: list[int] = []
    spans = []
    for caption in captions:
        toks = _check_tokens(caption, vocab)
        spans.append((len(rows), len(toks)))
        rows.extend(toks)
    avg = np.zeros((len(captions), len(rows)), dtype=tp.embed.dtype)
    for i, (start, n) in enumerate(spans):
        avg[i, start : start + n] = 1.0 / n
    pooled = ad.matmul(ad.Tensor(avg), ad.row_gather(tp.embed, rows))
    return ad.l2_normalize_rows(ad.matmul(pooled, tp.proj_t))


def encode_text(params: ModelParams, tokens: Sequence[int]) -> Tensor:
    out = encode_texts(params, [tokens])
    return ad.reshape(out, (out.shape[1],))


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str | Path, params: ModelParams, opt: AdamState | None = None) -> None:
    """Write parameters, encoder dims and (optionally) optimizer state as MOFCKPT1."""
    records = {"dims": np.asarray(astuple(params.dims), dtype=np.float64)}
    names = []
    for name, t in params.named_tensors():
        records[f"param.{name}"] = t.data
        names.append(name)
    if opt is not None:
        records["opt.kind"] = np.asarray(1.0 if isinstance(opt, AdamWState) else 0.0)
        records.update(state_to_records(opt, "opt", names))
    save_container(path, CKPT_MAGIC, records)


def load_checkpoint(path: str | Path) -> tuple[ModelParams, AdamState | None]:
    records = load_container(path, CKPT_MAGIC)
    if "dims" not in records:
        raise FormatError(f"{path}: checkpoint lacks the dims record")
    dims = EncoderDims(*(int(x) for x in records["dims"]))
    named = {}
    for f in fields(VideoEncoderParams):
        named[f"video.{f.name}"] = None
    for f in fields(TextEncoderParams):
        named[f"text.{f.name}"] = None
    for name in named:
        arr = records.get(f"param.{name}")
        if arr is None:
            raise FormatError(f"{path}: checkpoint lacks parameter {name}")
        precision = "f64" if arr.dtype == np.float64 else "f32"
        named[name] = ad.tensor(arr, precision, requires_grad=True)
    params = ModelParams.from_tensors(dims, named)
    opt = None
    if "opt.kind" in records:
        cls = AdamWState if float(records["opt.kind"]) == 1.0 else AdamState
        opt = state_from_records(records, "opt", list(named), cls)
    return params, opt
