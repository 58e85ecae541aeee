import hashlib
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mflow import dataset as D
from mflow import geometry as G
from mflow.errors import CorruptContainer, InvalidParams, InvalidSpec, IoFailure, TooFewSamples
from mflow.flowsolve import SolverConfig

# first pinned-toolchain run of generate(1, seed=7, mode="duct")
GOLDEN_MASK_SHA256 = "07c3836843d7043509e208e2fe53ec864679d5536df8af94cef7b342126248ab"
GOLDEN_CHANNEL_SHA256 = "95e40555e4c675d378bab74ffdca4534fe26af7446bc61e709ce31f17e2aa4a3"


def sha(a):
    return hashlib.sha256(np.ascontiguousarray(a).tobytes()).hexdigest()


@pytest.fixture(scope="module")
def duct_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("ds") / "duct.mflo"
    samples = D.generate(4, 11, "duct", out_path=path)
    return path, samples


@pytest.fixture(scope="module")
def channel_sample():
    return D.make_sample(0, 3, "channel", SolverConfig(mode="channel"))


def plain(n):
    mask = np.zeros((2, 2), dtype=np.uint8)
    return [D.FieldSample(i, None, mask, np.ones((1, 2, 2), np.float32), 0.0, i) for i in range(n)]


# ---------------------------------------------------------------- generate

def test_golden_seed7():
    s = D.generate(1, 7, "duct")[0]
    assert sha(s.mask) == GOLDEN_MASK_SHA256
    assert sha(s.channels.astype("<f4")) == GOLDEN_CHANNEL_SHA256


def test_header_and_length(duct_file):
    path, _ = duct_file
    hdr = D.read_header(path)
    assert hdr == {"count": 4, "h": 128, "w": 256, "channels": 1, "mode": "duct"}
    # the listed header fields occupy 4 + 4 + 4 + 2 + 2 + 1 + 1 = 18 bytes
    assert D.HEADER.size == 18
    assert path.stat().st_size == 18 + 4 * (8 + 128 * 256 + 1 * 128 * 256 * 4)
    assert path.stat().st_size == D.expected_size(4, 128, 256, 1)
    assert path.read_bytes()[:4] == b"MFLO"
    assert len(D.manifest_path(path).read_text().splitlines()) == 4


def test_generate_byte_identical(duct_file, tmp_path):
    path, _ = duct_file
    again = tmp_path / "again.mflo"
    D.generate(4, 11, "duct", out_path=again)
    assert again.read_bytes() == path.read_bytes()
    assert D.manifest_path(again).read_text() == D.manifest_path(path).read_text()


def test_parallel_generation_identical(duct_file, tmp_path, monkeypatch):
    path, _ = duct_file
    monkeypatch.setenv("MFLOW_THREADS", "2")
    par = tmp_path / "par.mflo"
    D.generate(4, 11, "duct", out_path=par)
    assert par.read_bytes() == path.read_bytes()


def test_stored_samples_are_valid(duct_file):
    for s in duct_file[1]:
        G.validate_mask(s.mask)
        assert np.all(s.channels[:, s.mask == 1] == 0)
        assert np.all(np.abs(s.channels) <= D.SANITY_BOUND)
        assert s.residual < SolverConfig().tolerance
        # fluid mean of the axial speed is the inlet velocity, i.e. 1 after scaling
        assert s.channels[0][s.mask == 0].mean() == pytest.approx(1.0, rel=1e-5)


def test_channel_sample_layout(channel_sample):
    s = channel_sample
    assert s.channels.shape == (3, 128, 256)
    assert np.allclose(s.channels[2], np.hypot(s.channels[0], s.channels[1]), atol=1e-6)
    assert np.all(s.channels[:, s.mask == 1] == 0)
    assert s.target("components").shape == (2, 128, 256)
    assert s.target("magnitude").shape == (1, 128, 256)


def test_duct_has_no_components(duct_file):
    with pytest.raises(InvalidSpec):
        duct_file[1][0].target("components")


def test_generate_bad_args(tmp_path):
    with pytest.raises(InvalidParams):
        D.generate(0, 1, "duct")
    with pytest.raises(InvalidParams):
        D.generate(1, 1, "pipe")
    with pytest.raises(IoFailure):
        D.generate(1, 1, "duct", out_path=tmp_path)  # a directory


# ---------------------------------------------------------------- load

def test_round_trip(duct_file):
    path, samples = duct_file
    assert D.load(path) == samples


def test_round_trip_channel(channel_sample, tmp_path):
    path = tmp_path / "c.mflo"
    D.save([channel_sample], path, "channel")
    (back,) = D.load(path)
    assert back == channel_sample
    assert back.channels.tobytes() == channel_sample.channels.tobytes()


def test_truncated(duct_file, tmp_path):
    path, _ = duct_file
    raw = path.read_bytes()
    for cut in (3, 16, len(raw) - 1):
        bad = tmp_path / "t.mflo"
        bad.write_bytes(raw[:cut])
        D.manifest_path(bad).write_text(D.manifest_path(path).read_text())
        with pytest.raises(CorruptContainer):
            D.load(bad)


@pytest.mark.parametrize("offset,value", [(0, b"MFLX"), (4, struct.pack("<I", 2)), (15, b"\x09"),
                                          (8, struct.pack("<I", 5))])
def test_bad_header(duct_file, tmp_path, offset, value):
    path, _ = duct_file
    raw = bytearray(path.read_bytes())
    raw[offset:offset + len(value)] = value
    bad = tmp_path / "h.mflo"
    bad.write_bytes(bytes(raw))
    D.manifest_path(bad).write_text(D.manifest_path(path).read_text())
    with pytest.raises(CorruptContainer):
        D.load(bad)


def test_manifest_count_mismatch(duct_file, tmp_path):
    path, _ = duct_file
    bad = tmp_path / "m.mflo"
    bad.write_bytes(path.read_bytes())
    lines = D.manifest_path(path).read_text().splitlines()
    D.manifest_path(bad).write_text("\n".join(lines[:-1]) + "\n")
    with pytest.raises(CorruptContainer):
        D.load(bad)


def test_manifest_missing_or_garbled(duct_file, tmp_path):
    path, _ = duct_file
    bad = tmp_path / "g.mflo"
    bad.write_bytes(path.read_bytes())
    with pytest.raises(CorruptContainer):
        D.load(bad)
    lines = D.manifest_path(path).read_text().splitlines()
    lines[1] = "1 2 three"
    D.manifest_path(bad).write_text("\n".join(lines) + "\n")
    with pytest.raises(CorruptContainer):
        D.load(bad)


# ---------------------------------------------------------------- split / batches

def test_split_80_20():
    tr, va = D.split(list(range(100)), 3)
    assert (len(tr), len(va)) == (80, 20)
    assert sorted(tr + va) == list(range(100))
    assert not set(tr) & set(va)
    assert D.split(list(range(100)), 3) == (tr, va)


@settings(max_examples=40, deadline=None)
@given(st.integers(5, 300), st.integers(0, 2 ** 32 - 1))
def test_split_disjoint_exhaustive(n, seed):
    tr, va = D.split(list(range(n)), seed)
    assert len(tr) == int(0.8 * n)
    assert sorted(tr + va) == list(range(n))


def test_split_too_few():
    with pytest.raises(TooFewSamples):
        D.split([1, 2, 3, 4], 0)


def test_batches_examples():
    bs = D.batches(plain(80), 16, 1)
    assert [len(b.ids) for b in bs] == [16] * 5
    bs = D.batches(plain(81), 16, 1)
    assert [len(b.ids) for b in bs][-1] == 1 and len(bs) == 6
    assert bs[0].x.shape == (16, 1, 2, 2) and bs[0].x.dtype == np.float32


def test_batches_epoch_shuffle():
    a = [i for b in D.batches(plain(40), 8, 1) for i in b.ids]
    b = [i for b in D.batches(plain(40), 8, 2) for i in b.ids]
    assert a != b and sorted(a) == sorted(b) == list(range(40))
    assert a == [i for b in D.batches(plain(40), 8, 1) for i in b.ids]


def test_batches_unshuffled_order():
    assert [i for b in D.batches(plain(10), 4) for i in b.ids] == list(range(10))


def test_batches_bad_size():
    with pytest.raises(InvalidParams):
        D.batches(plain(4), 0)


def test_derive_seed_stable():
    assert D.derive_seed(1, 2) == D.derive_seed(1, 2)
    assert D.derive_seed(1, 2) != D.derive_seed(2, 1)
    assert 0 <= D.derive_seed(123, 4) < 2 ** 63
