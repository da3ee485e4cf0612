import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from trigan.data import (DOMAIN_KINDS, BatchComposer, SyntheticDomainSpec, compose_batch, folder_checksum,
                         generate_synthetic, load_folder, read_image, specs_for, to_uint8, to_unit_range)
from trigan.streams import SeedStreams, derive_seed

KINDS = ["grayscale-on-white", "color-inverted", "textured-background"]


def gen(root, seed=0, n=10, n_test=5, size=16):
    return generate_synthetic(specs_for(KINDS, 5), n, seed, root, n_test_per_domain=n_test, image_size=size)


def test_streams_are_independent_and_stable():
    assert derive_seed(0, "a") == derive_seed(0, "a")
    assert derive_seed(0, "a") != derive_seed(0, "b") != derive_seed(1, "a")
    s = SeedStreams(3)
    a = s.numpy("x").random(4)
    s.numpy("y").random(100)  # consuming another stream does not shift "x"
    assert np.array_equal(a, SeedStreams(3).numpy("x").random(4))


def test_every_domain_kind_renders():
    rng = np.random.default_rng(0)
    for d, kind in enumerate(DOMAIN_KINDS):
        img = SyntheticDomainSpec(d, kind).render(0, 32, rng)
        assert img.shape == (32, 32, 3) and img.dtype == np.uint8 and img.std() > 0
    with pytest.raises(KeyError):
        SyntheticDomainSpec(0, "sepia")


def test_generation_is_byte_identical(tmp_path):
    a, b = gen(tmp_path / "a"), gen(tmp_path / "b")
    assert a.checksum == b.checksum
    rel = a.entries(KINDS[0], "train")[0][0]
    assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
    assert gen(tmp_path / "c", seed=1).checksum != a.checksum


def test_generation_layout_and_balance(tmp_path):
    m = gen(tmp_path)
    assert m.domains == KINDS and len(m.classes) == 5
    for d in KINDS:
        labels = [lab for _, lab in m.entries(d, "train")]
        assert np.bincount(labels).tolist() == [2] * 5
        assert len(m.entries(d, "test")) == 5
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["checksum"] == m.checksum
    with pytest.raises(ValueError):
        gen(tmp_path / "bad", n=12)


def test_checksum_changes_with_one_byte(tmp_path):
    m = gen(tmp_path)
    rels = [p for v in m.files.values() for p, _ in v]
    target = tmp_path / rels[3]
    data = bytearray(target.read_bytes())
    data[-1] ^= 1
    target.write_bytes(bytes(data))
    assert folder_checksum(tmp_path, rels) != m.checksum


def test_load_folder_round_trip(tmp_path):
    m = gen(tmp_path)
    again = load_folder(tmp_path, image_size=16)
    assert again.domains == m.domains and again.classes == m.classes
    assert again.checksum == m.checksum
    x, y = again.load(KINDS[1], "train")
    x0, y0 = m.load(KINDS[1], "train")
    order = np.argsort([p for p, _ in m.entries(KINDS[1], "train")])
    assert torch.equal(x, x0[order]) and torch.equal(y, y0[order])
    assert x.shape == (10, 3, 16, 16) and x.min() >= -1 and x.max() <= 1


def test_load_folder_rejects_empty_class(tmp_path):
    gen(tmp_path)
    (tmp_path / KINDS[0] / "train" / "9_extra").mkdir()
    with pytest.raises(FileNotFoundError, match="empty class"):
        load_folder(tmp_path)


def test_grayscale_png_is_replicated(tmp_path):
    arr = np.arange(64, dtype=np.uint8).reshape(8, 8)
    Image.fromarray(arr, "L").save(tmp_path / "g.png")
    img = read_image(tmp_path / "g.png", 8)
    assert img.shape == (8, 8, 3)
    assert all(np.array_equal(img[..., c], arr) for c in range(3))


def test_unit_range_round_trip():
    arr = np.random.default_rng(0).integers(0, 256, size=(2, 4, 4, 3), dtype=np.uint8)
    x = to_unit_range(arr)
    assert x.shape == (2, 3, 4, 4)
    assert np.array_equal(to_uint8(x), arr)


def pools(sizes=(40, 30, 20)):
    return [torch.full((n, 1, 1, 1), float(d)) + torch.arange(n).view(n, 1, 1, 1) * 1e-3
            for d, n in enumerate(sizes)]


def test_composer_audit_over_many_batches():
    p = pools()
    comp = BatchComposer(p, 16, np.random.default_rng(0), np.random.default_rng(1))
    pairs = set()
    first_all = None
    seen = [set() for _ in p]
    for b in range(1000):
        l, index, lo, sidx = comp.plan()
        assert (np.bincount(l, minlength=3) >= 2).all()
        assert (sidx < np.array([40, 30, 20])[lo]).all()
        pairs.update(zip(l.tolist(), lo.tolist()))
        if first_all is None and len(pairs) == 9:
            first_all = b
        for d, i in zip(l, index):
            seen[d].add(int(i))
    assert first_all is not None and first_all < 500
    assert all(len(s) == n for s, n in zip(seen, (40, 30, 20)))


def test_composer_draws_without_replacement_per_pass():
    comp = BatchComposer(pools((6, 6)), 4, np.random.default_rng(0), np.random.default_rng(1), min_per_domain=2)
    drawn = [[], []]
    for _ in range(3):
        l, index, _, _ = comp.plan()
        for d, i in zip(l, index):
            drawn[d].append(int(i))
    assert sorted(drawn[0]) == list(range(6)) and sorted(drawn[1]) == list(range(6))


def test_batch_routing_and_images_agree():
    p = pools()
    b = compose_batch(p, 12, SeedStreams(0))
    for i in range(12):
        assert torch.equal(b.x[i], p[b.l[i]][b.index[i]])
        assert torch.equal(b.xo[i], p[b.lo[i]][b.style_index[i]])
        # the style image's domain is the requested output domain
        assert int(b.xo[i].floor()) == int(b.lo[i])


def test_composer_deterministic():
    a = compose_batch(pools(), 12, SeedStreams(4))
    b = compose_batch(pools(), 12, SeedStreams(4))
    assert all(torch.equal(getattr(a, f), getattr(b, f)) for f in ("x", "l", "lo", "xo"))


def test_composer_rejects_small_batch():
    with pytest.raises(ValueError):
        BatchComposer(pools(), 5, np.random.default_rng(0), np.random.default_rng(1))


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(2, 30), min_size=2, max_size=4), st.integers(0, 20), st.integers(0, 2**31 - 1))
def test_composer_property(sizes, extra, seed):
    m = 2 * len(sizes) + extra
    comp = BatchComposer(pools(tuple(sizes)), m, np.random.default_rng(seed), np.random.default_rng(seed + 1))
    l, index, lo, sidx = comp.plan()
    assert len(l) == len(lo) == m
    assert (np.bincount(l, minlength=len(sizes)) >= 2).all()
    assert (index < np.array(sizes)[l]).all() and (sidx < np.array(sizes)[lo]).all()
