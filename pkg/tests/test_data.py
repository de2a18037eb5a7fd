import numpy as np
import pytest

from mof.data import (
    COLORS, MOTIONS, SHAPES, VOCAB, DatasetError, decode_caption, generate_dataset, load_dataset,
    save_dataset, summarize,
)
from mof.records import FormatError
from mof.sampling import uniform_indices


def same(a, b):
    return (a.splits == b.splits and a.vocab == b.vocab and a.gen_seed == b.gen_seed
            and all(p.video_id == q.video_id and p.tokens == q.tokens and p.meta == q.meta
                    and p.video.data.dtype == q.video.data.dtype and np.array_equal(p.video.data, q.video.data)
                    for p, q in zip(a.pairs, b.pairs)))


def test_determinism(default_dataset):
    assert same(default_dataset, generate_dataset(0))
    assert not same(default_dataset, generate_dataset(1))


def test_workers_do_not_change_output(default_dataset):
    assert same(default_dataset, generate_dataset(0, workers=4))


def test_pixel_range(default_dataset):
    for p in default_dataset.pairs:
        assert p.video.data.min() >= 0.0 and p.video.data.max() <= 1.0
        assert p.video.shape == (16, 3, 16, 16)


def test_sparse_sampling_misses_event(default_dataset):
    n = default_dataset.frames
    sparse, full = set(uniform_indices(n, 2)), set(uniform_indices(n, n))
    pairs = default_dataset.pairs
    window = [set(range(p.meta.t0, p.meta.t1 + 1)) for p in pairs]
    miss = sum(1 for w in window if not w & sparse and w & full)
    assert miss >= 0.9 * len(pairs)
    assert all(len(w) <= n // 4 for w in window)


def test_color_visible_only_in_window(default_dataset):
    for p in default_dataset.pairs[:8]:
        sat = [np.ptp(frame, axis=0).max() for frame in p.video.data]
        inside = [sat[t] for t in range(p.meta.t0, p.meta.t1 + 1)]
        outside = [s for t, s in enumerate(sat) if not p.meta.t0 <= t <= p.meta.t1]
        assert min(inside) > max(outside)


def test_caption_consistency(default_dataset):
    for p in default_dataset.pairs:
        assert decode_caption(p.tokens) == (p.meta.shape, p.meta.color, p.meta.motion)
        assert 4 <= len(p.tokens) <= 6
    assert 35 <= len(VOCAB) <= 45 and len(set(VOCAB)) == len(VOCAB)


def test_distinct_triples_distinct_captions(default_dataset):
    by_triple = {}
    for p in default_dataset.pairs:
        content = tuple(sorted(t for t in p.tokens if VOCAB[t] in SHAPES + COLORS + MOTIONS))
        by_triple.setdefault(p.meta.triple, set()).add(content)
    contents = [next(iter(v)) for v in by_triple.values()]
    assert all(len(v) == 1 for v in by_triple.values()) and len(set(contents)) == len(contents)


def test_split_hygiene_and_coverage(default_dataset):
    train, test = set(default_dataset.splits["train"]), set(default_dataset.splits["test"])
    assert not train & test
    assert len(train) == 64 and len(test) == 32
    t_train = {default_dataset.get(v).meta.triple for v in train}
    t_test = {default_dataset.get(v).meta.triple for v in test}
    assert t_train == t_test and len(t_train) == len(SHAPES) * len(COLORS) * len(MOTIONS)


def test_marginals(default_dataset):
    n = len(default_dataset.pairs)
    for attr, k in (("shape", len(SHAPES)), ("color", len(COLORS)), ("motion", len(MOTIONS))):
        counts = np.bincount([getattr(p.meta, attr) for p in default_dataset.pairs], minlength=k)
        sd = np.sqrt(n * (1 / k) * (1 - 1 / k))
        assert np.all(np.abs(counts - n / k) <= 3 * sd)


def test_infeasible_sizes():
    with pytest.raises(DatasetError):
        generate_dataset(0, n_train=10_000)
    with pytest.raises(DatasetError):
        generate_dataset(0, n_train=0)
    with pytest.raises(DatasetError):
        generate_dataset(0, height=6, width=6)


def test_round_trip(tmp_path, small_dataset):
    path = tmp_path / "d.bin"
    save_dataset(small_dataset, path)
    assert same(small_dataset, load_dataset(path))
    save_dataset(small_dataset, tmp_path / "e.bin")
    assert path.read_bytes() == (tmp_path / "e.bin").read_bytes()


def test_load_errors(tmp_path, small_dataset):
    path = tmp_path / "d.bin"
    save_dataset(small_dataset, path)
    raw = path.read_bytes()

    (tmp_path / "empty").write_bytes(b"")
    with pytest.raises(FormatError, match="empty"):
        load_dataset(tmp_path / "empty")

    bad = bytearray(raw)
    bad[5] ^= 0x20
    (tmp_path / "magic").write_bytes(bytes(bad))
    with pytest.raises(FormatError, match="offset 5"):
        load_dataset(tmp_path / "magic")

    bad = bytearray(raw)
    bad[8] = 9
    (tmp_path / "ver").write_bytes(bytes(bad))
    with pytest.raises(FormatError, match="version 9"):
        load_dataset(tmp_path / "ver")

    (tmp_path / "trunc").write_bytes(raw[: len(raw) // 2])
    with pytest.raises(FormatError, match="truncated"):
        load_dataset(tmp_path / "trunc")


def test_summary(default_dataset):
    s = summarize(default_dataset)
    assert s["train"] == 64 and s["test"] == 32 and s["seed"] == 0
    assert s["event_window"]["missed_by_2_frame_uniform"] >= 0.9
    assert s["event_window"]["max_len"] <= 4
