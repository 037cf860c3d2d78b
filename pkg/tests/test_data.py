import json
import logging

import numpy as np
import pytest

from rrlab.config import DataConfig
from rrlab.data import (
    Dataset,
    class_means,
    from_config,
    gen_blobs,
    gen_moons,
    gen_rings,
    load_csv,
    meta_path,
    save_csv,
    split,
)
from rrlab.errors import InvalidArgumentError, ParseError, SplitError

log = logging.getLogger(__name__)


def test_blobs_shape_and_balance():
    ds = gen_blobs(n_classes=4, dim=8, n_per_class=50, separation=4.0, noise_sd=1.0, seed=0)
    assert ds.X.shape == (200, 8)
    assert np.bincount(ds.y).tolist() == [50, 50, 50, 50]
    assert ds.name == "blobs"
    assert ds.params["separation"] == 4.0


def test_blobs_are_deterministic_per_seed():
    a = gen_blobs(3, 4, 20, 3.0, 0.5, seed=1)
    b = gen_blobs(3, 4, 20, 3.0, 0.5, seed=1)
    c = gen_blobs(3, 4, 20, 3.0, 0.5, seed=2)
    assert np.array_equal(a.X, b.X) and np.array_equal(a.y, b.y)
    assert not np.array_equal(a.X, c.X)


@pytest.mark.parametrize("n_classes, dim", [(4, 8), (6, 2)])
def test_class_means_are_separated(n_classes, dim):
    means = class_means(n_classes, dim, separation=3.0)
    dists = np.linalg.norm(means[:, None] - means[None], axis=-1)
    nearest = np.min(dists + np.eye(n_classes) * 1e9, axis=1)
    assert nearest == pytest.approx(np.full(n_classes, 3.0))


def test_zero_noise_blobs_sit_on_means():
    ds = gen_blobs(3, 4, 5, 2.0, 0.0, seed=0)
    means = class_means(3, 4, 2.0)
    assert np.allclose(ds.X, means[ds.y])


def test_moons_and_rings():
    moons = gen_moons(101, 0.1, seed=0)
    assert moons.X.shape == (101, 2)
    assert np.bincount(moons.y).tolist() == [51, 50]
    rings = gen_rings(90, 3, 0.0, seed=0)
    radii = np.linalg.norm(rings.X, axis=1)
    assert np.allclose(radii, rings.y + 1)
    assert np.bincount(rings.y).tolist() == [30, 30, 30]


@pytest.mark.parametrize("make", [
    lambda: gen_blobs(1, 4, 10, 1.0, 1.0, 0),
    lambda: gen_blobs(2, 4, 10, 0.0, 1.0, 0),
    lambda: gen_moons(1, 0.1, 0),
    lambda: gen_rings(10, 1, 0.1, 0),
])
def test_generator_validation(make):
    with pytest.raises(InvalidArgumentError):
        make()


def test_split_is_stratified_and_disjoint():
    ds = gen_blobs(4, 4, 40, 4.0, 1.0, seed=0)
    train, test = split(ds, 0.75, seed=3)
    assert len(train) + len(test) == len(ds)
    assert np.bincount(train.y).tolist() == [30, 30, 30, 30]
    assert np.bincount(test.y).tolist() == [10, 10, 10, 10]
    rows = {tuple(r) for r in train.X} | {tuple(r) for r in test.X}
    assert len(rows) == len(ds)
    again, _ = split(ds, 0.75, seed=3)
    assert np.array_equal(again.X, train.X)


def test_split_rejects_singleton_class():
    ds = Dataset(X=np.zeros((3, 2)), y=np.array([0, 0, 1]), n_classes=2)
    with pytest.raises(SplitError, match="class 1"):
        split(ds, 0.5, seed=0)


def test_csv_round_trip(tmp_path):
    ds = gen_blobs(3, 4, 10, 4.0, 1.0, seed=5)
    path = tmp_path / "blobs.csv"
    save_csv(ds, path)
    assert path.read_text().splitlines()[0] == "f0,f1,f2,f3,label"
    meta = json.loads(meta_path(path).read_text())
    assert meta["generator"] == "blobs"
    assert meta["seed"] == 5

    loaded = load_csv(path)
    assert np.array_equal(loaded.X, ds.X)
    assert np.array_equal(loaded.y, ds.y)
    assert loaded.n_classes == 3
    assert loaded.name == "blobs"


def test_csv_without_sidecar(tmp_path):
    path = tmp_path / "plain.csv"
    path.write_text("f0,f1,label\n0.5,1.5,0\n-1,2,2\n")
    ds = load_csv(path)
    assert ds.n_classes == 3
    assert ds.name == "plain"


@pytest.mark.parametrize("text, message, line", [
    ("", "empty file", 1),
    ("a,b,label\n1,2,0\n", "feature columns", 1),
    ("f0,f1\n1,2\n", "label column", 1),
    ("f0,f1,label\n1,2,0\n1,2\n", "expected 3 cells", 3),
    ("f0,f1,label\n1,x,0\n", "non-numeric", 2),
    ("f0,f1,label\n1,nan,0\n", "non-finite", 2),
    ("f0,f1,label\n1,2,-1\n", "label -1", 2),
    ("f0,f1,label\n", "no data rows", 1),
])
def test_csv_parse_errors(tmp_path, text, message, line):
    path = tmp_path / "bad.csv"
    path.write_text(text)
    with pytest.raises(ParseError, match=message) as exc:
        load_csv(path)
    assert exc.value.location == line


def test_csv_label_outside_declared_classes(tmp_path):
    path = tmp_path / "labels.csv"
    path.write_text("f0,label\n0.1,0\n0.2,4\n")
    with pytest.raises(ParseError, match="outside"):
        load_csv(path, n_classes=3)


def test_from_config():
    ds = from_config(DataConfig(kind="rings", n=40, n_classes=2, noise=0.1))
    assert ds.name == "rings"
    assert len(ds) == 40
    ds = from_config(DataConfig(kind="blobs", n_classes=3, dim=4, n_per_class=5))
    assert ds.X.shape == (15, 4)
    log.info("blobs bounds: %s", ds.bounds)


@pytest.mark.parametrize("sidecar", ["{not json", "[1, 2]"])
def test_csv_corrupt_sidecar(tmp_path, sidecar):
    path = tmp_path / "data.csv"
    path.write_text("f0,label\n0.1,0\n0.2,1\n")
    meta_path(path).write_text(sidecar)
    with pytest.raises(ParseError, match="metadata sidecar"):
        load_csv(path)
