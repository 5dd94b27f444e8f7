import itertools
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import ndimage

from fdresnet.analysis import (
    RetrievalIndex,
    average_precision,
    bilinear_resize,
    extract_features,
    gradcam,
    mean_average_precision,
    rank_gallery,
    write_pgm,
    write_ppm,
    write_retrieval_table,
)
from fdresnet.data import LabeledImageSet
from fdresnet.layers import Module
from fdresnet.models import build_model, preset
from fdresnet.tensor import Tensor, matmul, precision

from _reference import TwoLayer, brute_force_map, two_layer_cam


class SumChannel0(Module):
    """Logit 0 is the sum of input channel 0; logit 1 is a constant."""

    def forward(self, x, mode=None):
        n = int(np.prod(x.shape[1:]))
        m = np.zeros((n, 2))
        m[: n // x.shape[1], 0] = 1.0
        return matmul(x.reshape(x.shape[0], n), Tensor(m, dtype=x.dtype)) + Tensor([0.0, 3.0], dtype=x.dtype)


# -- GradCAM -----------------------------------------------------------------------

def test_input_tap_collapses_to_relu_of_channel0(rng):
    x = rng.normal(size=(2, 5, 6))
    with precision("float64"):
        sal = gradcam(SumChannel0(), x, 0, tap="input")
    expect = np.maximum(x[0], 0)
    np.testing.assert_allclose(sal.values, expect / expect.max(), atol=1e-12)
    assert sal.source_layer == "input" and sal.class_index == 0


def test_two_layer_stub_matches_hand_chain_rule(rng):
    with precision("float64"):
        model = TwoLayer(rng)
        x = rng.normal(size=(2, 4, 5))
        for c in (0, 1):
            sal = gradcam(model, x, c, tap="conv")
            assert np.max(np.abs(sal.values - two_layer_cam(model, x, c))) < 1e-6


def test_map_ignores_constants_on_other_logits(rng):
    with precision("float64"):
        model = TwoLayer(rng)
        x = rng.normal(size=(2, 4, 5))
        before = gradcam(model, x, 0, tap="conv").values
        model.fc.bias.data[1] += 17.0
        after = gradcam(model, x, 0, tap="conv").values
        model.fc.bias.data[0] -= 4.0
        shifted = gradcam(model, x, 0, tap="conv").values
    np.testing.assert_array_equal(before, after)
    np.testing.assert_array_equal(before, shifted)


def test_all_zero_map_is_flagged_not_raised():
    with precision("float64"):
        sal = gradcam(SumChannel0(), -np.ones((2, 3, 3)), 0, tap="input")
    assert sal.is_empty and np.all(sal.values == 0)


def test_gradcam_on_tiny_model_stem(rng):
    model = build_model(preset("fdresnet_tiny", num_classes=4), seed=0)
    for i in range(8):
        sal = gradcam(model, rng.normal(size=(3, 32, 32)).astype(np.float32), i % 4, tap="stem.conv")
        assert sal.values.shape == (32, 32)
        assert sal.values.min() >= 0
        assert sal.is_empty or sal.values.max() == 1.0
    assert all(p.grad is None for p in model.parameters())


def test_unknown_tap_rejected(rng):
    with pytest.raises(KeyError):
        gradcam(TwoLayer(rng), np.zeros((2, 3, 3)), 0, tap="nope")


def test_bilinear_resize_matches_scipy_zoom(rng):
    img = rng.random((8, 8))
    for out in (16, 32, 8):
        ref = ndimage.zoom(img, out / 8, order=1, mode="nearest", grid_mode=True)
        np.testing.assert_allclose(bilinear_resize(img, out, out), ref, atol=1e-12)


def test_pixmap_files(tmp_path):
    v = np.array([[0.0, 0.5], [1.0, 0.25]])
    write_pgm(tmp_path / "a.pgm", v)
    raw = (tmp_path / "a.pgm").read_bytes()
    assert raw == b"P5\n2 2\n255\n" + bytes([0, 128, 255, 64])
    write_ppm(tmp_path / "b.ppm", np.stack([v, v, v], axis=-1))
    raw = (tmp_path / "b.ppm").read_bytes()
    assert raw.startswith(b"P6\n2 2\n255\n") and len(raw) == 11 + 12


# -- retrieval ---------------------------------------------------------------------

@settings(max_examples=100)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(4, 50), classes=st.integers(1, 4),
       dim=st.integers(2, 8))
def test_map_equals_brute_force(seed, n, classes, dim):
    rng = np.random.default_rng(seed)
    labels = np.concatenate([np.repeat(np.arange(classes), 2),
                             rng.integers(0, classes, max(0, n - 2 * classes))])[:max(n, 2 * classes)]
    feats = rng.normal(size=(len(labels), dim))
    idx = RetrievalIndex.from_raw(feats, labels)
    assert abs(mean_average_precision(idx) - brute_force_map(feats, labels)) <= 1e-12


def test_ties_broken_by_id():
    feats = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 0.0]])
    idx = RetrievalIndex.from_raw(feats, [0, 0, 1, 0], ids=[10, 11, 12, 13])
    order, _ = rank_gallery(idx, 0)
    assert idx.ids[order].tolist() == [12, 13, 11]


def test_all_same_class_map_is_one(rng):
    idx = RetrievalIndex.from_raw(rng.normal(size=(30, 5)), np.zeros(30, int))
    assert mean_average_precision(idx) == 1.0


def test_random_features_two_classes_near_half():
    rng = np.random.default_rng(2024)
    feats = rng.normal(size=(200, 32))
    labels = np.repeat([0, 1], 100)
    assert abs(mean_average_precision(RetrievalIndex.from_raw(feats, labels)) - 0.5) <= 0.05


def test_map_invariant_to_positive_scaling(rng):
    feats = rng.normal(size=(40, 6))
    labels = rng.integers(0, 3, 40)
    labels[:6] = [0, 0, 1, 1, 2, 2]
    base = mean_average_precision(RetrievalIndex.from_raw(feats, labels))
    for s in (1e-3, 7.5, 1e4):
        assert mean_average_precision(RetrievalIndex.from_raw(s * feats, labels)) == pytest.approx(base, abs=1e-12)


def test_five_item_index_exhaustive():
    # query 0 ranks 1..4 in order of decreasing cosine; items 2 and 4 share its class
    angles = np.array([0.0, 0.1, 0.2, 0.3, 0.4])
    feats = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    idx = RetrievalIndex.from_raw(feats, [0, 1, 0, 1, 0])
    order, _ = rank_gallery(idx, 0)
    assert order.tolist() == [1, 2, 3, 4]
    # relevance [0,1,0,1]: hits at ranks 2 and 4 -> (1/2 + 2/4) / 2
    assert average_precision([0, 1, 0, 1]) == 0.5
    for perm in itertools.permutations([True, True, False, False]):
        ranks = [i + 1 for i, r in enumerate(perm) if r]
        expect = sum(Fraction(h + 1, r) for h, r in enumerate(ranks)) / len(ranks)
        assert average_precision(np.array(perm)) == pytest.approx(float(expect), abs=1e-15)


@given(n_rel=st.integers(1, 10), n_irr=st.integers(0, 10))
def test_relevant_first_ranking_has_ap_one(n_rel, n_irr):
    assert average_precision([True] * n_rel + [False] * n_irr) == 1.0


def test_query_without_same_class_rejected():
    idx = RetrievalIndex.from_raw(np.eye(3), [0, 1, 1])
    with pytest.raises(ValueError, match="no same-class"):
        mean_average_precision(idx)


def test_feature_extraction(rng, tmp_path):
    model = build_model(preset("fdresnet_tiny", num_classes=4), seed=0)
    imgs = rng.random((5, 3, 32, 32)).astype(np.float32)
    imgs[3] = imgs[1]
    data = LabeledImageSet(imgs, [0, 1, 2, 1, 0], list("abcd"))
    idx = extract_features(model, data)
    assert idx.features.shape == (5, 128)
    np.testing.assert_allclose(np.linalg.norm(idx.features, axis=1), 1.0, atol=1e-6)
    assert idx.features[1].tobytes() == idx.features[3].tobytes()
    write_retrieval_table(tmp_path / "r.csv", idx, top_k=2)
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "query_id,rank,gallery_id,similarity,relevant"
    assert len(lines) == 1 + 5 * 2
    assert lines[3].split(",")[2] == "3" and lines[3].split(",")[4] == "1"
