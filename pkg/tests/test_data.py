import collections
import hashlib
import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from veloxnet import data as D
from veloxnet.errors import DataError
from veloxnet.models import Model, build_model_graph, build_veloxnet


def test_header_bytes_of_3x256x256():
    blob = D.tensor_to_bytes(np.zeros((3, 256, 256), np.float32))
    assert blob[:8] == bytes([0x56, 0x4C, 0x58, 0x54, 0x01, 0x00, 0x03, 0x00])
    assert blob[8:20] == bytes([3, 0, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0])
    assert len(blob) == 20 + 4 * 3 * 256 * 256


def test_payload_is_little_endian():
    blob = D.tensor_to_bytes(np.array([1.0], np.float64))
    assert blob[5] == 1 and blob[-8:] == struct.pack("<d", 1.0)
    big = np.array([1.5, -2.0], dtype=">f4")
    assert D.tensor_to_bytes(big)[-8:] == struct.pack("<2f", 1.5, -2.0)


@given(st.lists(st.integers(1, 5), min_size=1, max_size=4), st.sampled_from([np.float32, np.float64]),
       st.integers(0, 2**31))
def test_tensor_roundtrip_bit_exact(shape, dtype, seed):
    x = np.random.default_rng(seed).standard_normal(shape).astype(dtype)
    y, end = D.tensor_from_bytes(D.tensor_to_bytes(x))
    assert y.dtype == x.dtype and y.shape == x.shape and y.tobytes() == x.tobytes()


def test_file_roundtrip_large(tmp_path, rng):
    x = rng.standard_normal((3, 256, 256)).astype(np.float32)
    D.save_tensor(tmp_path / "a.vlxt", x)
    assert D.load_tensor(tmp_path / "a.vlxt").tobytes() == x.tobytes()


@pytest.mark.parametrize("mutate,offset", [
    (lambda b: b"XLXT" + b[4:], 0),
    (lambda b: b[:4] + b"\x02" + b[5:], 4),
    (lambda b: b[:5] + b"\x07" + b[6:], 5),
    (lambda b: b[:6] + b"\x00" + b[7:], 6),
    (lambda b: b[:7] + b"\x01" + b[8:], 7),
    (lambda b: b[:10], 8),
    (lambda b: b[:-1], 16),
])
def test_corrupt_files_report_offset(mutate, offset):
    blob = D.tensor_to_bytes(np.ones((2, 2), np.float32))
    with pytest.raises(DataError, match=f"byte {offset}"):
        D.tensor_from_bytes(mutate(blob))


def test_trailing_bytes_and_missing(tmp_path):
    p = tmp_path / "t.vlxt"
    p.write_bytes(D.tensor_to_bytes(np.ones(3, np.float32)) + b"\0")
    with pytest.raises(DataError, match="trailing"):
        D.load_tensor(p)
    with pytest.raises(DataError, match="missing"):
        D.load_tensor(tmp_path / "nope.vlxt")
    with pytest.raises(DataError):
        D.tensor_to_bytes(np.ones(3, np.int32))


def test_checkpoint_layout():
    blob = D.checkpoint_to_bytes("id", "table-i", {"w": np.ones(2, np.float32)})
    assert blob[:5] == b"VLXC\x01"
    assert blob[5:9] == b"\x02\x00id"
    assert blob[9:18] == b"\x07\x00table-i"
    assert blob[18:22] == b"\x01\x00\x00\x00"
    assert blob[22:25] == b"\x01\x00w" and blob[25:29] == b"VLXT"
    mid, preset, entries = D.checkpoint_from_bytes(blob)
    assert (mid, preset, list(entries)) == ("id", "table-i", ["w"])
    with pytest.raises(DataError):
        D.checkpoint_from_bytes(blob[:-2])
    with pytest.raises(DataError):
        D.checkpoint_from_bytes(b"VLXX" + blob[4:])


@pytest.mark.parametrize("graph", [build_model_graph("veloxnet", reduced=True),
                                   build_model_graph("squeezenet", reduced=True),
                                   build_veloxnet(3, "paper-eq", input_size=47, d_model=12)])
def test_checkpoint_reload_reproduces_logits(tmp_path, rng, graph):
    m = Model(graph, seed=5)
    x = rng.standard_normal((3,) + graph.input_shape).astype(np.float32)
    m.forward(x, "train")
    before = m.forward(x, "infer")
    D.save_checkpoint(tmp_path / "m.vlxc", m)
    m2 = D.load_checkpoint(tmp_path / "m.vlxc")
    assert m2.forward(x, "infer").tobytes() == before.tobytes()
    s1, s2 = m.state_dict(), m2.state_dict()
    assert all(s1[k].tobytes() == s2[k].tobytes() for k in s1)


def test_checkpoint_entry_mismatch(tmp_path):
    m = Model(build_model_graph("veloxnet", reduced=True))
    state = m.state_dict()
    state.pop("conv1.weight")
    with pytest.raises(DataError, match="conv1.weight"):
        m.load_state_dict(state)


def test_augment_eval_center_and_deterministic(rng):
    x = rng.standard_normal((3, 256, 256)).astype(np.float32)
    a = D.augment(x, "eval", None, [0, 0, 0], [1, 1, 1])
    np.testing.assert_array_equal(a, x[:, 16:240, 16:240])
    np.testing.assert_array_equal(a, D.augment(x, "eval", None, [0, 0, 0], [1, 1, 1]))


def test_augment_normalization_identity():
    x = np.full((3, 256, 256), 0.7, np.float32)
    out = D.augment(x, "train", np.random.default_rng(0), [0.7] * 3, [1, 1, 1])
    assert out.shape == (3, 224, 224) and not out.any()


def test_augment_train_offsets_and_flip():
    x = np.arange(256, dtype=np.float32)[None, None, :].repeat(256, 1).repeat(3, 0)
    r = np.random.default_rng(0)
    flips, offsets = 0, set()
    for _ in range(200):
        out = D.augment(x, "train", r, [0] * 3, [1] * 3)
        row = out[0, 0]
        flipped = row[0] > row[-1]
        flips += flipped
        offsets.add(int(row[-1] if flipped else row[0]))
        assert abs(row[1] - row[0]) == 1
    assert 60 < flips < 140
    assert min(offsets) >= 0 and max(offsets) <= 32 and len(offsets) > 15
    # flipping twice restores the crop
    crop = x[:, :224, :224]
    np.testing.assert_array_equal(crop[:, :, ::-1][:, :, ::-1], crop)


def test_augment_errors():
    with pytest.raises(DataError):
        D.augment(np.zeros((3, 200, 256), np.float32), "eval", None, [0] * 3, [1] * 3)
    with pytest.raises(ValueError):
        D.augment(np.zeros((3, 256, 256), np.float32), "test", None, [0] * 3, [1] * 3)


def test_synth_counts_and_split(synth_dir):
    man = D.load_manifest(synth_dir)
    assert len(man.entries) == 40 and man.classes == 5
    assert len(list((synth_dir / "samples").iterdir())) == 40
    per = collections.Counter((label, split) for _, label, split in man.entries)
    assert all(per[k, "train"] == 6 and per[k, "val"] == 1 and per[k, "test"] == 1 for k in range(5))
    assert (man.std > 0).all()


def test_synth_stats_from_train_split(synth_dir):
    man = D.load_manifest(synth_dir)
    xs = np.stack([D.load_sample(man, p) for p, _ in man.split("train")]).astype(np.float64)
    np.testing.assert_allclose(man.mean, xs.mean(axis=(0, 2, 3)), rtol=1e-9)
    np.testing.assert_allclose(man.std, xs.std(axis=(0, 2, 3)), rtol=1e-6)


def _digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_synth_deterministic(tmp_path):
    D.synth_dataset(tmp_path / "a", classes=3, per_class=2, seed=7)
    D.synth_dataset(tmp_path / "b", classes=3, per_class=2, seed=7)
    D.synth_dataset(tmp_path / "c", classes=3, per_class=2, seed=8)
    assert _digest(tmp_path / "a") == _digest(tmp_path / "b") != _digest(tmp_path / "c")


def test_synth_linearly_separable_on_channel_means(synth_dir):
    man = D.load_manifest(synth_dir)
    items = man.split("train")
    feats = np.array([np.r_[D.load_sample(man, p).mean(axis=(1, 2)), 1.0] for p, _ in items])
    labels = np.array([label for _, label in items])
    w, *_ = np.linalg.lstsq(feats, np.eye(man.classes)[labels], rcond=None)
    assert ((feats @ w).argmax(1) == labels).mean() > 0.8


def test_synth_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        D.synth_dataset(blocker / "sub", per_class=1)


def test_batches_cover_epoch(synth_dir):
    man = D.load_manifest(synth_dir)
    sizes, labels = [], []
    for x, y in D.batches(man, "train", 8, shuffle=True, rng=np.random.default_rng(0), augment_mode="train"):
        assert x.shape[1:] == (3, 224, 224) and x.dtype == np.float32
        sizes.append(len(y))
        labels.extend(y.tolist())
    assert sizes == [8, 8, 8, 6]
    assert collections.Counter(labels) == collections.Counter(lbl for _, lbl in man.split("train"))


def test_batches_same_seed_same_order(synth_dir):
    man = D.load_manifest(synth_dir)

    def order(seed):
        return [y.tolist() for _, y in D.batches(man, "train", 4, True, np.random.default_rng(seed))]

    assert order(3) == order(3)


def test_batch_arithmetic_70_by_32(tmp_path):
    entries = [(f"s{i}.vlxt", i % 2, "train") for i in range(70)]
    for p, _, _ in entries:
        D.save_tensor(tmp_path / p, np.zeros((3, 256, 256), np.float32))
    man = D.write_manifest(tmp_path, entries, [0, 0, 0], [1, 1, 1])
    assert [len(y) for _, y in D.batches(man, "train", 32)] == [32, 32, 6]


def test_manifest_errors(tmp_path, synth_dir):
    man = D.load_manifest(synth_dir)
    broken = D.DatasetManifest(synth_dir, [("samples/missing.vlxt", 0, "train")], man.mean, man.std)
    with pytest.raises(DataError, match="missing.vlxt"):
        list(D.batches(broken, "train"))
    with pytest.raises(DataError):
        list(D.batches(man, "nope"))
    with pytest.raises(DataError):
        D.load_manifest(tmp_path)
    (tmp_path / "manifest.csv").write_text("path,label,split\na,1,train\n")
    (tmp_path / "stats.csv").write_text("channel,mean,std\n0,0,1\n1,0,1\n2,0,1\n")
    with pytest.raises(DataError, match="dense"):
        D.load_manifest(tmp_path)
    (tmp_path / "manifest.csv").write_text("path,label,split\na,0,holdout\n")
    with pytest.raises(DataError, match="split"):
        D.load_manifest(tmp_path)
    (tmp_path / "manifest.csv").write_text("path,label\na,0\n")
    with pytest.raises(DataError, match="header"):
        D.load_manifest(tmp_path)
