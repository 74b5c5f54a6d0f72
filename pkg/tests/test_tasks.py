import itertools
import math

import numpy as np
import pytest

from guidelab.tasks import (COPY_VOCAB, IGNORE, PAD, SEP, DataError, SynthImageSpec, build_lm_dataset,
                            copy_paste_example, eval_metrics, gen_copy_paste, gen_parity, iterate_batches,
                            load_image_dataset, load_split, make_batch, parity_label, read_gimg,
                            read_sequence_file, save_split, split_sizes, write_gimg, write_sequence_file)
from guidelab.tensor import RngState


def test_copy_paste_worked_example():
    ex = copy_paste_example([3, 7, 1])
    assert list(ex.input_tokens) == [3, 7, 1, SEP, PAD, PAD, PAD]
    assert list(ex.target_tokens)[4:] == [3, 7, 1]
    assert all(t == IGNORE for t in list(ex.target_tokens)[:4])
    assert len(ex.pad_mask) == len(ex.input_tokens)


def test_copy_paste_generation():
    s = gen_copy_paste(500, (20, 40), seed=1)
    assert (len(s.train), len(s.val), len(s.test)) == (400, 50, 50)
    for ds in (s.train, s.val, s.test):
        for i in range(len(ds)):
            L = int(ds.lengths[i])
            x, y = ds.x[i, :L], ds.y[i, :L]
            k = (L - 1) // 2
            assert 20 <= 2 * k + 2 <= 40
            assert set(x[:k]) <= set(range(1, 11)) and x[k] == SEP and np.all(x[k + 1:] == PAD)
            assert np.array_equal(y[k + 1:], x[:k]) and np.all(y[:k + 1] == IGNORE)
            assert np.all(ds.x[i, L:] == PAD) and np.all(ds.y[i, L:] == IGNORE)
    assert s.train.x.max() < COPY_VOCAB


def test_copy_paste_errors():
    with pytest.raises(DataError):
        gen_copy_paste(10, (10, 40))
    with pytest.raises(DataError):
        gen_copy_paste(0)


def test_split_sizes_paper_scale():
    assert split_sizes(100000) == (80000, 10000, 10000)
    assert split_sizes(4000) == (3200, 400, 400)


def test_parity_labels():
    assert parity_label([0, 1, 1, 0]) == 1
    assert parity_label([1]) == 0
    assert parity_label([0, 0]) == 1
    for n in range(1, 9):
        for bits in itertools.product([0, 1], repeat=n):
            assert parity_label(bits) == 1 - sum(bits) % 2
    s = gen_parity(300, (2, 50), seed=3)
    for ds in (s.train, s.val, s.test):
        for i in range(len(ds)):
            L = int(ds.lengths[i])
            assert 2 <= L <= 50
            assert ds.y[i] == 1 - int(ds.x[i, :L].sum()) % 2


def test_splits_disjoint_and_reproducible():
    a, b = gen_parity(200, seed=5), gen_parity(200, seed=5)
    assert a.manifest_hash() == b.manifest_hash()
    assert gen_parity(200, seed=6).manifest_hash() != a.manifest_hash()
    ids = [set(d.ids.tolist()) for d in (a.train, a.val, a.test)]
    assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])
    assert len(set().union(*ids)) == 200


def test_lm_dataset(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("abc" * 400, encoding="utf-8")
    s = build_lm_dataset(p, context_len=50, seed=0)
    for ds in (s.train, s.val, s.test):
        assert ds.x.shape[1] == 50
        assert np.array_equal(ds.y[:, :-1], ds.x[:, 1:])
    assert s.manifest_hash() == build_lm_dataset(p, 50, 0).manifest_hash()
    small = tmp_path / "s.txt"
    small.write_text("abc", encoding="utf-8")
    with pytest.raises(DataError):
        build_lm_dataset(small)
    with pytest.raises(DataError):
        build_lm_dataset(tmp_path / "missing.txt")
    bad = tmp_path / "b.txt"
    bad.write_bytes(b"\xff\xfe" * 400)
    with pytest.raises(DataError):
        build_lm_dataset(bad)


def test_synthetic_images(tmp_path):
    s = load_image_dataset(SynthImageSpec(classes=4, size=16, n=4000), seed=0)
    assert (len(s.train), len(s.val), len(s.test)) == (3200, 400, 400)
    assert s.train.x.min() >= 0 and s.train.x.max() <= 1
    assert s.train.y.max() < 4
    f = tmp_path / "a.gimg"
    write_gimg(f, s.train.x[:50], s.train.y[:50])
    x, y = read_gimg(f)
    assert np.abs(x - s.train.x[:50]).max() <= 0.5 / 255 + 1e-7
    assert load_image_dataset(str(f), 0).manifest_hash() == load_image_dataset(str(f), 0).manifest_hash()


def test_gimg_errors(tmp_path):
    f = tmp_path / "bad.gimg"
    f.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(DataError):
        read_gimg(f)
    x = np.zeros((3, 1, 8, 8), np.float32)
    write_gimg(f, x, [0, 1, 5])
    with pytest.raises(DataError):
        load_image_dataset(str(f), 0, classes=3)


def test_sequence_file_roundtrip(tmp_path):
    for split in (gen_copy_paste(40, seed=2), gen_parity(40, (2, 10), seed=2)):
        ds = split.train
        f = tmp_path / f"{ds.task}.tsv"
        write_sequence_file(f, ds)
        back = read_sequence_file(f, ds.task)
        assert np.array_equal(back.lengths, ds.lengths)
        T = back.x.shape[1]
        assert np.array_equal(back.x, ds.x[:, :T]) and np.array_equal(back.y, ds.y if ds.y.ndim == 1 else ds.y[:, :T])
    line = (tmp_path / "parity.tsv").read_text().splitlines()[0]
    bits, label = line.split("\t")
    assert set(bits) <= {"0", "1"} and label in ("0", "1")


def test_save_and_load_split(tmp_path):
    s = gen_copy_paste(60, seed=4)
    save_split(s, tmp_path / "d")
    back = load_split(tmp_path / "d")
    assert np.array_equal(back.test.ids, s.test.ids)
    assert np.array_equal(back.train.lengths, s.train.lengths)


def test_batching():
    s = gen_copy_paste(100, seed=0)
    b = make_batch(s.train, [0, 1, 2])
    T = int(s.train.lengths[:3].max())
    assert b.x.shape == (3, T) and b.mask.shape == (3, T)
    assert np.array_equal(b.mask.sum(1), s.train.lengths[:3])
    batches = list(iterate_batches(s.train, 32, RngState(0), drop_last=True))
    assert len(batches) == 80 // 32 and all(len(x) == 32 for x in batches)
    assert len(list(iterate_batches(s.train, 32))) == 3


def test_eval_metrics():
    y = np.array([0, 2, 1])
    logits = np.eye(3)[y] * 5
    assert eval_metrics(logits, y, "parity")["accuracy"] == 1.0
    assert eval_metrics(logits, y, "image")["top5"] == 1.0
    V = 256
    tgt = np.random.default_rng(0).integers(0, V, (4, 6))
    assert eval_metrics(np.zeros((4, 6, V)), tgt, "lm")["perplexity"] == pytest.approx(V, abs=1e-6)
    tgt = np.array([[IGNORE, 1, 2, 3, 4]])
    pred = np.zeros((1, 5, 12))
    pred[0, [1, 2], [1, 2]] = 1
    pred[0, [3, 4], [0, 0]] = 1
    m = eval_metrics(pred, tgt, "copy")
    assert m["token_accuracy"] == 0.5 and m["sequence_accuracy"] == 0.0
    with pytest.raises(DataError):
        eval_metrics(logits[:2], y, "parity")
    assert math.isclose(eval_metrics(np.zeros((2, 3)), np.array([0, 1]), "image")["accuracy"], 0.5)
