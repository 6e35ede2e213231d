"""Descriptor matching, target construction, loss gradients, and training.

The matching softmax and the KL loss are checked against tiny hand-computed
cases; loss gradients are checked against central finite differences in
float64.
"""

import numpy as np
import pytest

from garmentlab.descriptor import (DescriptorConfig, DescriptorNet,
                                   best_match, contrastive_loss,
                                   distributional_loss, kl_divergence,
                                   load_packs, match_distribution,
                                   normalize_image, occlusion_augment,
                                   pca_visualize, target_distribution,
                                   train_descriptor)
from garmentlab.nn import numeric_gradient
from garmentlab.simgen import generate_dataset


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    generate_dataset(root, n_suspended=3, n_table=2, seed=17,
                     image_size=(48, 64), mesh_density=250)
    return root


def test_match_distribution_known_softmax():
    """Squared distances 0,1,2,3 must give the softmax (0.6439, 0.2369,
    0.0871, 0.0321)."""
    fa = np.zeros((1, 1, 1), dtype=np.float64)
    fb = np.array([0.0, 1.0, np.sqrt(2.0), np.sqrt(3.0)]).reshape(2, 2, 1)
    p = match_distribution(fa, (0, 0), fb)
    assert p.shape == (2, 2)
    assert np.allclose(p.ravel(), [0.6439, 0.2369, 0.0871, 0.0321], atol=5e-5)
    assert p.sum() == pytest.approx(1.0)


def test_best_match_returns_peak_and_confidence():
    fa = np.zeros((1, 1, 2))
    fb = np.ones((3, 4, 2))
    fb[1, 2, :] = 0.05
    (x, y), conf = best_match(fa, (0, 0), fb)
    assert (x, y) == (2, 1)
    p = match_distribution(fa, (0, 0), fb)
    assert conf == pytest.approx(p.max())


def test_kl_uniform_two_vs_four_is_ln2():
    q = np.array([0.5, 0.5, 0.0, 0.0])
    p = np.full(4, 0.25)
    assert kl_divergence(q, p) == pytest.approx(np.log(2.0), rel=1e-9)


def test_kl_zero_iff_equal():
    rng = np.random.default_rng(0)
    q = rng.random(20)
    q /= q.sum()
    assert kl_divergence(q, q.copy()) == pytest.approx(0.0, abs=1e-9)
    p = np.roll(q, 1)
    assert kl_divergence(q, p) > 0


def test_target_distribution_single_mode():
    q = target_distribution((31, 31), [(15.0, 15.0)], sigma=2.0)
    assert q.sum() == pytest.approx(1.0)
    assert np.unravel_index(np.argmax(q), q.shape) == (15, 15)
    # isotropic: same falloff along both axes
    assert q[15, 17] == pytest.approx(q[17, 15], rel=1e-9)
    # two pixels away at sigma=2 is exp(-0.5) of the peak
    assert q[15, 17] / q[15, 15] == pytest.approx(np.exp(-0.5), rel=1e-9)


def test_target_distribution_two_modes_split_mass():
    q = target_distribution((40, 60), [(12.0, 20.0), (47.0, 20.0)], sigma=2.0)
    assert q.sum() == pytest.approx(1.0)
    left = q[:, :30].sum()
    assert left == pytest.approx(0.5, abs=1e-6)
    assert np.argmax(q[20]) in (12, 47)


def test_target_distribution_clips_at_border():
    q = target_distribution((20, 20), [(0.0, 0.0)], sigma=3.0)
    assert q.sum() == pytest.approx(1.0)
    assert q[0, 0] == q.max()


def test_distributional_loss_matches_kl_definition():
    rng = np.random.default_rng(1)
    fa = rng.normal(size=(5, 6, 3))
    fb = rng.normal(size=(5, 6, 3))
    queries = np.array([[2, 3], [1, 1]])
    targets = np.stack([
        target_distribution((5, 6), [(4.0, 2.0)], 1.0).ravel(),
        target_distribution((5, 6), [(0.0, 4.0), (5.0, 4.0)], 1.0).ravel()])
    loss, _, _ = distributional_loss(fa, fb, queries, targets)
    manual = np.mean([
        kl_divergence(targets[i].reshape(5, 6),
                      match_distribution(fa, tuple(queries[i]), fb))
        for i in range(2)])
    assert loss == pytest.approx(manual, rel=1e-9)


def test_distributional_loss_gradients_finite_difference():
    rng = np.random.default_rng(2)
    fa = rng.normal(size=(4, 5, 2))
    fb = rng.normal(size=(4, 5, 2))
    queries = np.array([[1, 2], [3, 0]])
    targets = np.stack([
        target_distribution((4, 5), [(2.0, 1.0)], 1.2).ravel(),
        target_distribution((4, 5), [(0.0, 3.0)], 1.2).ravel()])

    def loss():
        return distributional_loss(fa, fb, queries, targets)[0]

    _, ga, gb = distributional_loss(fa, fb, queries, targets)
    na = numeric_gradient(loss, fa)
    nb = numeric_gradient(loss, fb)
    assert np.abs(ga - na).max() < 1e-6
    assert np.abs(gb - nb).max() < 1e-6
    # scene gradient lives only at the query pixels
    off = np.ones((4, 5), dtype=bool)
    off[2, 1] = off[0, 3] = False
    assert np.abs(ga[off]).max() == 0.0


def test_contrastive_loss_hand_case():
    fa = np.array([0.0]).reshape(1, 1, 1)
    fb = np.array([0.3, 0.1]).reshape(1, 2, 1)
    queries = np.array([[0, 0]])
    matches = np.array([[0, 0]])       # descriptor 0.3 -> D^2 = 0.09
    non = np.array([[[1, 0]]])         # descriptor 0.1 -> hinge (0.5-0.1)^2
    loss, _, _ = contrastive_loss(fa, fb, queries, matches, non, margin=0.5)
    assert loss == pytest.approx(0.09 + 0.16, rel=1e-9)


def test_contrastive_loss_gradients_finite_difference():
    rng = np.random.default_rng(3)
    fa = rng.normal(size=(4, 4, 3))
    fb = rng.normal(size=(4, 4, 3)) * 0.2   # keep some pairs inside margin
    queries = np.array([[0, 1], [2, 3]])
    matches = np.array([[1, 1], [3, 2]])
    non = np.array([[[0, 0], [2, 2]], [[1, 3], [0, 2]]])

    def loss():
        return contrastive_loss(fa, fb, queries, matches, non, 0.5)[0]

    _, ga, gb = contrastive_loss(fa, fb, queries, matches, non, 0.5)
    assert np.abs(ga - numeric_gradient(loss, fa)).max() < 1e-6
    assert np.abs(gb - numeric_gradient(loss, fb)).max() < 1e-6


def test_normalize_image_range():
    img = np.zeros((4, 6, 3), dtype=np.uint8)
    img[..., 0] = 255
    x = normalize_image(img)
    assert x.shape == (1, 4, 6, 3)
    assert x[0, ..., 0].max() == pytest.approx(2.0)
    assert x[0, ..., 1].min() == pytest.approx(-2.0)


def test_occlusion_augment_flags_changed_pixels():
    rng = np.random.default_rng(4)
    img = np.full((40, 50, 3), 120, dtype=np.uint8)
    out, occ = occlusion_augment(img, np.ones((40, 50), bool), rng)
    changed = (out != img).any(axis=2)
    assert changed.any()
    assert (~occ[changed]).sum() == 0      # every changed pixel is flagged
    assert img[0, 0, 0] == 120             # input untouched


def test_descriptor_net_shapes_and_checkpoint(tmp_path):
    cfg = DescriptorConfig(dim=5, image_size=(48, 64), iterations=1, seed=9)
    model = DescriptorNet(cfg)
    img = np.random.default_rng(0).integers(0, 255, (48, 64, 3), np.uint8)
    f = model.features(img)
    assert f.shape == (48, 64, 5) and f.dtype == np.float32
    model.save(tmp_path / "d.net", extra={"note": "test"})
    back = DescriptorNet.load(tmp_path / "d.net")
    assert back.cfg == cfg
    assert np.array_equal(back.features(img), f)


def test_training_reduces_loss_and_is_deterministic(tiny_dataset):
    cfg = DescriptorConfig(dim=4, sigma=2.0, loss="symmetric", iterations=50,
                           queries_per_step=32, image_size=(48, 64), seed=5,
                           channels=(8, 12, 12, 16, 16))
    m1 = train_descriptor(tiny_dataset, cfg)
    m2 = train_descriptor(tiny_dataset, cfg)
    from garmentlab.nn import flatten_params
    _, f1 = flatten_params(m1.net.params())
    _, f2 = flatten_params(m2.net.params())
    assert np.array_equal(f1, f2)
    early = np.mean(m1.history[:10])
    late = np.mean(m1.history[-10:])
    assert late < early


@pytest.mark.parametrize("loss", ["nonsymmetric", "contrastive"])
def test_training_runs_all_loss_kinds(tiny_dataset, loss):
    cfg = DescriptorConfig(dim=3, loss=loss, iterations=12,
                           queries_per_step=16, image_size=(48, 64), seed=2,
                           channels=(6, 8, 8, 12, 12))
    model = train_descriptor(tiny_dataset, cfg)
    assert len(model.history) == 12
    assert np.isfinite(model.history).all()


def test_pca_visualize_output(tiny_dataset):
    packs = load_packs(tiny_dataset)
    cfg = DescriptorConfig(dim=6, image_size=(48, 64),
                           channels=(6, 8, 8, 12, 12))
    model = DescriptorNet(cfg)
    f = model.features(packs[0].image)
    img = pca_visualize(f, packs[0].mask)
    assert img.shape == (48, 64, 3) and img.dtype == np.uint8
    assert (img[~packs[0].mask] == 0).all()
