import numpy as np
import pytest

import capslab


@pytest.fixture(scope="module")
def mnist():
    train = capslab.load_dataset(
        "data/mnist/train-images-idx3-ubyte.gz",
        "data/mnist/train-labels-idx1-ubyte.gz",
        "train",
    )
    test = capslab.load_dataset(
        "data/mnist/t10k-images-idx3-ubyte.gz",
        "data/mnist/t10k-labels-idx1-ubyte.gz",
        "test",
    )
    return train, test


@pytest.fixture(scope="module")
def trained(mnist):
    train, test = mnist
    cfg = capslab.Config.tiny()
    model, report = capslab.CapsNet.train(
        cfg, train.take(96), test.take(48), epochs=1, batch=16, seed=5
    )
    return model, report


def test_configs():
    tiny = capslab.Config.tiny()
    assert tiny.id() == "routing-on_recon-strong"
    tiny.routing_enabled = False
    tiny.recon = "none"
    assert tiny.id() == "routing-off_recon-none"
    tiny.validate()
    assert capslab.Config.micro().num_classes == 4
    with pytest.raises(ValueError):
        tiny.recon = "sideways"


def test_squash_length_law():
    v = capslab.squash(np.array([[3.0, 4.0]], dtype=np.float32))
    assert v.shape == (1, 2)
    assert abs(np.linalg.norm(v) - 25.0 / 26.0) < 1e-6
    assert np.all(capslab.squash(np.zeros((1, 4), dtype=np.float32)) == 0.0)


def test_route_couplings_normalize():
    rng = np.random.default_rng(0)
    u = rng.normal(size=(2, 5, 3, 4)).astype(np.float32)
    out = capslab.route(u, iterations=3)
    assert len(out["couplings"]) == 3
    for c in out["couplings"]:
        assert np.allclose(c.sum(axis=2), 1.0, atol=1e-6)
    assert np.linalg.norm(out["v"], axis=-1).max() < 1.0


def test_dataset_shapes(mnist):
    train, _ = mnist
    sub = train.take(10)
    assert len(sub) == 10
    assert sub.images.shape == (10, 1, 28, 28)
    assert sub.images.min() >= 0.0 and sub.images.max() <= 1.0
    assert all(0 <= y <= 9 for y in sub.labels)
    assert train.per_class(2).count == 20


def test_train_save_load_predict(trained, mnist, tmp_path):
    model, report = trained
    _, test = mnist
    assert report["config_id"] == "routing-on_recon-strong"
    assert len(report["epochs"]) == 1
    assert 0.0 <= report["final_test_error"] <= 1.0

    path = str(tmp_path / "m.ckpt")
    model.save(path, epochs=1, seed=5)
    back = capslab.CapsNet.load(path)
    imgs = test.take(8).images
    assert back.predict(imgs) == model.predict(imgs)
    assert np.array_equal(back.probs(imgs), model.probs(imgs))

    probs = model.probs(imgs)
    assert probs.shape == (8, model.config.num_classes)
    caps = model.capsules(imgs)
    assert caps.shape == (8, model.config.num_classes, model.config.class_dim)
    assert np.allclose(np.linalg.norm(caps, axis=-1), probs, atol=1e-5)


def test_evaluate_and_compaction(trained, mnist):
    model, _ = trained
    _, test = mnist
    ev = model.evaluate(test.take(64))
    assert 0.0 <= ev["error_rate"] <= 1.0
    assert len(ev["confusion"]) == model.config.num_classes ** 2

    curve = model.compaction(test.take(64))
    assert curve["scope"] == "all-classes"
    assert len(curve["variance"]) == model.config.class_dim
    assert curve["cumulative"][-1] == pytest.approx(1.0, abs=1e-6)
    assert sorted(curve["variance"], reverse=True) == curve["variance"]


def test_maximize_and_match(trained):
    model, _ = trained
    out = model.maximize(class_j=2, steps=15, trials=3, seed=1)
    assert len(out["images"]) == 3
    assert out["images"][0].shape == (1, 28, 28)
    assert out["activations"] == sorted(out["activations"], reverse=True)

    target = [0.1] * model.config.class_dim
    match = model.match(class_j=1, target=target, steps=20, seed=2)
    assert match["image"].shape == (1, 28, 28)
    assert 0.0 <= match["reduction_ratio"] <= 1.0
    assert match["final_loss"] <= match["initial_loss"]


def test_transforms_and_filter():
    rng = np.random.default_rng(3)
    img = rng.uniform(size=(9, 9)).astype(np.float32)
    same = capslab.apply_transform(img, "rotation", 0.0)
    assert np.array_equal(same[0], img)

    impulse = np.zeros((1, 9, 9), dtype=np.float32)
    impulse[0, 4, 4] = 1.0
    assert np.all(capslab.median_filter3x3(impulse) == 0.0)

    dilated = capslab.apply_transform(img, "morphology", 1.0)
    assert np.all(dilated[0] >= img - 1e-7)


def test_fit_pca():
    pts = [[0.0, 0.0], [1.0, 0.1], [2.0, -0.1], [3.0, 0.0]]
    pca = capslab.fit_pca(pts)
    assert pca["dim"] == 2
    assert pca["variances"][0] > pca["variances"][1] >= 0.0
    assert abs(abs(pca["components"][0]) - 1.0) < 0.05  # PC1 ~ x axis


def test_error_mapping(tmp_path):
    with pytest.raises(IOError):
        capslab.load_dataset("missing.idx", "missing.idx")
    with pytest.raises(ValueError):
        capslab.squash(np.zeros((0,), dtype=np.float32))
    with pytest.raises(IOError):
        capslab.CapsNet.load(str(tmp_path / "missing.ckpt"))
