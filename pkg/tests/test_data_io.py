import numpy as np
import pytest

from cdmseg.data_io import (
    BadMagicError,
    FormatError,
    GaussianBlockSpec,
    ShapesSpec,
    TruncatedError,
    decode_cdt,
    encode_cdt,
    encode_pgm,
    gen_gaussian_blocks,
    gen_shapes,
    make_rng,
    read_cdt,
    read_checkpoint,
    read_manifest,
    read_pgm,
    write_cdt,
    write_checkpoint,
    write_dataset,
)


def test_cdt_header_bytes():
    buf = encode_cdt(np.zeros((2, 3)))
    assert buf[:14] == bytes.fromhex("43 44 54 31 01 02 02 00 00 00 03 00 00 00")
    assert len(buf) == 14 + 6 * 4


def test_cdt_round_trip(tmp_path):
    arr = make_rng(0).standard_normal((3, 4, 5)).astype(np.float32)
    write_cdt(tmp_path / "a.cdt", arr)
    back = read_cdt(tmp_path / "a.cdt")
    assert back.dtype == np.float32
    assert back.tobytes() == arr.tobytes() and back.shape == arr.shape


def test_cdt_errors(tmp_path):
    buf = encode_cdt(np.ones((4, 4)))
    with pytest.raises(TruncatedError):
        decode_cdt(buf[:-3])
    with pytest.raises(TruncatedError):
        decode_cdt(buf[:5])
    with pytest.raises(BadMagicError):
        decode_cdt(b"XXXX" + buf[4:])
    assert not issubclass(TruncatedError, BadMagicError)
    (tmp_path / "t.cdt").write_bytes(buf + b"\0")
    with pytest.raises(FormatError):
        read_cdt(tmp_path / "t.cdt")


def test_checkpoint_round_trip(tmp_path):
    tensors = {"a.weight": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.ones(4, np.float32)}
    write_checkpoint(tmp_path / "m.ckpt", tensors, {"kind": "x"})
    back, meta = read_checkpoint(tmp_path / "m.ckpt")
    assert meta == {"kind": "x"}
    for k in tensors:
        assert back[k].tobytes() == tensors[k].tobytes()


def test_pgm(tmp_path):
    img = np.array([[0.0, 0.5], [1.0, 0.25]])
    buf = encode_pgm(img, 0.0, 1.0)
    assert buf.startswith(b"P5\n2 2\n255\n")
    (tmp_path / "a.pgm").write_bytes(buf)
    assert read_pgm(tmp_path / "a.pgm").tolist() == [[0, 128], [255, 64]]


def test_rng_streams_are_reproducible_and_distinct():
    a = make_rng(7, 1).standard_normal(5)
    assert np.array_equal(a, make_rng(7, 1).standard_normal(5))
    assert not np.array_equal(a, make_rng(7, 2).standard_normal(5))


def test_gaussian_blocks_noise_free(block_spec):
    spec = GaussianBlockSpec(**{**vars(block_spec), "sigma1": 0.0})
    _, mu1 = spec.means()
    for s in gen_gaussian_blocks(spec, 20, 0, labels=[1] * 20):
        assert np.array_equal(s.image, mu1)
    m = spec.mask()
    expected = np.zeros((16, 16), bool)
    expected[6:10, 6:10] = True
    assert np.array_equal(m, expected)
    assert np.array_equal(np.nonzero((mu1 - spec.means()[0])[0])[0], np.nonzero(expected)[0])


def test_gaussian_blocks_sample_mean(block_spec):
    n = 10_000
    xs = np.stack([s.image for s in gen_gaussian_blocks(block_spec, n, 1, labels=[1] * n)]).astype(np.float64)
    _, mu1 = block_spec.means()
    assert np.all(np.abs(xs.mean(axis=0) - mu1) < 3 * 0.1 / np.sqrt(n) * 1.5)


def test_gaussian_blocks_differ_only_inside_mask(block_spec):
    n = 2000
    pos = np.stack([s.image for s in gen_gaussian_blocks(block_spec, n, 2, labels=[1] * n)]).mean(axis=0)[0]
    neg = np.stack([s.image for s in gen_gaussian_blocks(block_spec, n, 3, labels=[0] * n)]).mean(axis=0)[0]
    m = block_spec.mask()
    assert np.all(np.abs(pos - neg)[~m] < 4 * 0.1 * np.sqrt(2.0 / n))
    assert np.all(np.abs(pos - neg)[m] > 0.9)


@pytest.mark.parametrize("bad", [dict(block=(14, 14, 4, 4)), dict(delta=0.0), dict(sigma0=-1.0)])
def test_gaussian_block_spec_validation(block_spec, bad):
    spec = GaussianBlockSpec(**{**vars(block_spec), **bad})
    with pytest.raises(ValueError):
        gen_gaussian_blocks(spec, 1, 0)


def test_shapes_balance_and_masks():
    samples = gen_shapes(ShapesSpec(size=16, axis_range=(2.0, 4.0)), 1000, 0)
    n_pos = sum(s.label for s in samples)
    assert 450 <= n_pos <= 550
    for s in samples:
        assert s.mask.any() == (s.label == 1)
        assert s.image.shape == (1, 16, 16)


def test_shapes_reject_oversized_axes():
    with pytest.raises(ValueError):
        gen_shapes(ShapesSpec(size=16, axis_range=(3.0, 9.0)), 1, 0)


def test_dataset_files_are_deterministic(tmp_path):
    for d in ("a", "b"):
        write_dataset(gen_shapes(ShapesSpec(), 20, 4), tmp_path / d)
    files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    assert files_a == files_b
    for rel in files_a:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_manifest_contract(tmp_path):
    write_dataset(gen_shapes(ShapesSpec(), 30, 5), tmp_path, test_fraction=0.2)
    man = read_manifest(tmp_path)
    assert len(man.records) == 30
    assert len(man.select(split="test")) == 6
    for r in man.records:
        assert (tmp_path / r.image).exists()
        assert (r.mask is not None) == (r.label == 1)
        if r.mask:
            assert man.load_mask(r).any()
    lines = (tmp_path / "manifest.jsonl").read_text().splitlines()
    bad = lines[0].replace('"label": 0', '"label": 2').replace('"label": 1', '"label": 2')
    (tmp_path / "manifest.jsonl").write_text("\n".join([bad] + lines[1:]))
    with pytest.raises(FormatError):
        read_manifest(tmp_path)
