import json

import numpy as np
import pytest

from crcnn import data as D
from crcnn.geometry import BBox, tight_bbox


@pytest.fixture(scope="module")
def hosts():
    rng = np.random.default_rng(0)
    return [D.procedural_host(rng, 96) for _ in range(3)]


def test_splice_construction(hosts):
    cfg = D.ForgeConfig(size=96)
    region = np.zeros((12, 15), np.uint8)
    region[1:11, :] = 1
    s = D.synth_splice(hosts[0], hosts[1], 5, cfg, region=region)
    assert s.cls == D.SPLICING
    assert s.mask.sum() == region.sum()
    again = D.synth_splice(hosts[0], hosts[1], 5, cfg, region=region)
    assert s.image.tobytes() == again.image.tobytes() and s.mask.tobytes() == again.mask.tobytes()
    with pytest.raises(D.DataError):
        D.synth_splice(hosts[0], hosts[1], 5, cfg, region=np.ones((100, 10), np.uint8))


def test_copy_move_construction(hosts):
    for seed in range(20):
        s = D.synth_copy_move(hosts[2], seed, D.ForgeConfig(size=96))
        assert s.cls == D.COPY_MOVE
        b = s.bbox
        assert 0 <= b.x1 < b.x2 <= 96 and 0 <= b.y1 < b.y2 <= 96
        # locate the source: the unique other window with identical pixels over the blob
        y1, x1, y2, x2 = int(b.y1), int(b.x1), int(b.y2), int(b.x2)
        blob = s.mask[y1:y2, x1:x2].astype(bool)
        dst = s.image[y1:y2, x1:x2][blob]
        h, w = y2 - y1, x2 - x1
        found = False
        for sy in range(96 - h + 1):
            for sx in range(96 - w + 1):
                if (sy >= y2 or y1 >= sy + h or sx >= x2 or x1 >= sx + w) and \
                        np.array_equal(hosts[2][sy:sy + h, sx:sx + w][blob], dst):
                    found = True
                    break
            if found:
                break
        assert found


def test_removal_construction(hosts):
    lower = 0
    for seed in range(100):
        host = hosts[seed % 3]
        s = D.synth_removal(host, seed, D.ForgeConfig(size=96))
        sel = s.mask.astype(bool)
        assert s.cls == D.REMOVAL
        assert np.array_equal(s.image[~sel], host[~sel])
        lower += s.image[sel].astype(float).var(axis=0).mean() < host[sel].astype(float).var(axis=0).mean()
    assert lower >= 95


def test_flip_properties():
    s = D.synth_sample(3, D.SPLICING, D.ForgeConfig(size=96))
    f = D.augment_flip(s)
    assert f.bbox.x2 - f.bbox.x1 == s.bbox.x2 - s.bbox.x1
    assert f.bbox.y2 - f.bbox.y1 == s.bbox.y2 - s.bbox.y1
    assert f.mask.sum() == s.mask.sum()
    assert tuple(f.bbox) == tuple(tight_bbox(f.mask))
    ff = D.augment_flip(f)
    assert ff.image.tobytes() == s.image.tobytes() and ff.mask.tobytes() == s.mask.tobytes()
    assert ff.bbox == s.bbox
    assert D.augment_flip(s, apply=False) is s


def test_generated_samples_are_valid_and_deterministic():
    samples = D.generate(1000, seed=11, cfg=D.ForgeConfig(size=64))
    assert all(not D.validate(s) for s in samples)
    first = D.generate(30, seed=11, cfg=D.ForgeConfig(size=64))
    again = D.generate(30, seed=11, cfg=D.ForgeConfig(size=64))
    for a, b in zip(first, again):
        assert a.image.tobytes() == b.image.tobytes() and a.cls == b.cls


def test_class_balance():
    classes = [s.cls for s in D.generate(300, seed=7, cfg=D.ForgeConfig(size=48))]
    assert classes.count(0) == classes.count(1) == classes.count(2) == 100
    big = np.random.default_rng([5, 0xC1A55]).permutation(np.arange(3000) % 3)
    for c in range(3):
        assert abs((big == c).mean() - 1 / 3) <= 0.01


def test_dataset_roundtrip(tmp_path):
    samples = D.generate(6, seed=2, cfg=D.ForgeConfig(size=64))
    path = D.save_dataset(samples, tmp_path, "train")
    man = D.load_dataset(path)
    assert len(man) == 6 and man.split == "train"
    for a, b in zip(samples, man.samples()):
        assert a.image.tobytes() == b.image.tobytes()
        assert a.mask.tobytes() == b.mask.tobytes()
        assert a.cls == b.cls and tuple(a.bbox) == tuple(b.bbox)
        assert tuple(b.bbox) == tuple(tight_bbox(b.mask))
    test_path = D.save_dataset(D.generate(3, seed=3, cfg=D.ForgeConfig(size=64)), tmp_path, "test")
    assert not D.shared_images(man, D.load_dataset(test_path))


def test_manifest_errors(tmp_path):
    samples = D.generate(2, seed=4, cfg=D.ForgeConfig(size=64))
    path = D.save_dataset(samples, tmp_path, "train")
    (tmp_path / "train" / "00001_mask.pgm").unlink()
    with pytest.raises(D.DataError, match="missing file train/00001_mask.pgm"):
        D.load_dataset(path)
    path = D.save_dataset(samples, tmp_path, "bad")
    lines = path.read_text().splitlines()
    rec = json.loads(lines[0])
    rec["bbox"][0] += 1
    path.write_text(json.dumps(rec) + "\n")
    with pytest.raises(D.DataError, match="inconsistent"):
        D.load_dataset(path)
    (tmp_path / "junk.ppm").write_bytes(b"P5\n2 2\n255\n\x00\x00\x00\x00")
    with pytest.raises(D.DataError, match="P6"):
        D.read_ppm(tmp_path / "junk.ppm")
    (tmp_path / "short.ppm").write_bytes(b"P6\n4 4\n255\n\x00")
    with pytest.raises(D.DataError, match="truncated"):
        D.read_ppm(tmp_path / "short.ppm")


def test_ppm_comments_are_skipped(tmp_path):
    img = np.arange(12, dtype=np.uint8).reshape(2, 2, 3)
    (tmp_path / "c.ppm").write_bytes(b"P6\n# made by hand\n2 2\n255\n" + img.tobytes())
    np.testing.assert_array_equal(D.read_ppm(tmp_path / "c.ppm"), img)


def test_resize_bilinear_identity_and_constant():
    img = np.random.default_rng(0).integers(0, 255, (10, 12, 3))
    np.testing.assert_array_equal(D.resize_bilinear(img, (10, 12)), img)
    np.testing.assert_allclose(D.resize_bilinear(np.full((5, 7), 3.0), (11, 4)), 3.0)
