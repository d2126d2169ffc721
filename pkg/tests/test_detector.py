import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import log_softmax, softmax

from umt import detector as D
from umt.gradcheck import relative_errors
from umt.params import ArchConfig, ConfigError, DetectorParams


def test_zero_params_give_neutral_outputs(arch, scene):
    out = D.forward(DetectorParams.zeros(arch), scene.image)
    assert out.proposals and out.detections
    for _, obj in out.proposals:
        assert obj == 0.5
    k = arch.num_classes + 1
    for d in out.detections:
        np.testing.assert_allclose(d.class_probs, 1.0 / k, rtol=0, atol=1e-15)
        assert d.confidence == 0.5


def test_forward_is_deterministic(rand_params, scene):
    a = D.predict(rand_params, scene.image)
    b = D.predict(rand_params.copy(), scene.image.copy())
    for f in ("proposals", "objectness", "boxes", "class_probs", "confidence"):
        assert getattr(a, f).tobytes() == getattr(b, f).tobytes()


def test_detections_come_from_proposals(rand_params, scene):
    out = D.forward(rand_params, scene.image)
    assert len(out.detections) == len(out.proposals) <= rand_params.arch.num_proposals
    for d in out.detections:
        assert 0 <= d.confidence <= 1
        assert abs(d.class_probs.sum() - 1) < 1e-12
        assert d.score == pytest.approx(d.class_probs[1:].max())


def test_dimension_mismatch(rand_params):
    with pytest.raises(ConfigError):
        D.forward(rand_params, np.zeros((16, 16, 3)))


def test_background_image_has_no_confident_detection(trained, splits):
    img = np.full((32, 32, 3), 0.72) + np.random.default_rng(0).normal(0, 0.02, (32, 32, 3))
    p = D.predict(trained.teacher, np.clip(img, 0, 1))
    assert p.scores.max(initial=0) <= 0.8


class TestDetLoss:
    def test_single_positive_anchor_zero_params(self, arch):
        anchors = D.anchors_for(arch)
        gt = anchors[27:28].copy()
        labels, _ = D.label_anchors(arch, gt)
        assert (labels == 1).sum() == 1
        r = D.detection_loss(DetectorParams.zeros(arch), np.zeros((32, 32, 3)), gt, [1],
                             need_grad=False)
        # BCE at probability 0.5 for every labelled anchor
        assert r.parts["rpn_cls"] == pytest.approx(math.log(2), abs=1e-12)

    def test_perfect_fit_background_image(self, arch):
        p = DetectorParams.zeros(arch)
        t = p.tensors()
        t["rpn.b"][0] = -60.0
        t["cls.b"][0] = 60.0
        img = np.full((32, 32, 3), 0.5)
        v, g = D.value_and_grad("det", p, dict(image=img, boxes=np.zeros((0, 4)), classes=[]))
        assert 0 <= v < 1e-20
        assert np.linalg.norm(g) < 1e-3

    def test_nonnegative_and_finite(self, rand_params, splits):
        for sc in splits["source_train"][:10]:
            v = D.loss_det(rand_params, sc.image, sc.boxes, sc.classes)
            assert math.isfinite(v) and v >= 0

    def test_rejects_bad_class(self, rand_params, scene):
        with pytest.raises(ConfigError):
            D.loss_det(rand_params, scene.image, scene.boxes[:1], [9])


class TestConfidence:
    def test_examples(self):
        assert D.confidence_loss([1.0, 1.0]) == 0.0
        assert D.confidence_loss([0.5, 0.5]) == pytest.approx(2 * math.log(2), abs=1e-15)
        assert D.confidence_loss([math.exp(-1)]) == pytest.approx(1.0, abs=1e-15)

    @given(st.lists(st.floats(0.01, 1.0), min_size=1, max_size=5), st.integers(0, 4),
           st.floats(0.001, 0.5))
    def test_monotone(self, taus, j, bump):
        j %= len(taus)
        up = list(taus)
        up[j] = min(1.0, up[j] + bump)
        assert D.confidence_loss(up) <= D.confidence_loss(taus)

    def test_logit_gradient_hand_derived(self):
        # L(z) = -log(sigmoid(z)); dL/dz = sigmoid(z) - 1
        for z in (-3.0, -0.2, 0.0, 1.5, 6.0):
            f = lambda v: D.confidence_loss(D.sigmoid(np.array([v])))
            fd = (f(z + 1e-6) - f(z - 1e-6)) / 2e-6
            assert fd == pytest.approx(D.sigmoid(np.array([z]))[0] - 1, rel=1e-7)


class TestInterpolate:
    def test_examples(self):
        p, y = np.array([0.6, 0.4]), np.array([0.0, 1.0])
        np.testing.assert_array_equal(D.interpolate(p, y, 1.0), p)
        np.testing.assert_array_equal(D.interpolate(p, y, 0.0), y)
        np.testing.assert_allclose(D.interpolate(p, y, 0.3), [0.18, 0.82], atol=1e-15)

    def test_clips_tau(self):
        p, y = np.array([0.6, 0.4]), np.array([0.0, 1.0])
        np.testing.assert_array_equal(D.interpolate(p, y, 1.7), p)

    @given(st.lists(st.floats(0.0, 1.0), min_size=2, max_size=5), st.integers(0, 4),
           st.floats(0.0, 1.0))
    def test_on_simplex(self, raw, c, tau):
        p = np.array(raw) + 1e-3
        p /= p.sum()
        y = np.eye(len(p))[c % len(p)]
        q = D.interpolate(p, y, tau)
        assert (q >= 0).all()
        assert abs(q.sum() - 1) < 1e-12


class TestSoftLoss:
    def test_tau_zero_is_bitwise_hard_loss(self, rand_params, splits):
        for sc in splits["source_train"][:5]:
            rois = D.compute_rois(rand_params, sc.image)
            hard = D.loss_det(rand_params, sc.image, sc.boxes, sc.classes, rois=rois)
            soft = D.loss_det_soft(rand_params, sc.image, sc.boxes, sc.classes, rois=rois, taus=0.0)
            assert hard == soft

    def test_tau_one_gives_prediction_entropy(self, rand_params, scene):
        arch = rand_params.arch
        rois = D.compute_rois(rand_params, scene.image)
        r = D.detection_loss(rand_params, scene.image, scene.boxes, scene.classes, rois=rois,
                             soft=True, taus=1.0, need_grad=False)
        logits = _roi_logits(rand_params, scene, rois)
        p = softmax(logits, axis=1)
        entropy = -(p * np.log(p)).sum(axis=1).mean()
        assert r.parts["roi_cls"] == pytest.approx(entropy, abs=1e-9)

    def test_random_tau_matches_expanded_formula(self, rand_params, scene):
        rng = np.random.default_rng(0)
        rois = D.compute_rois(rand_params, scene.image)
        samples = np.concatenate([rois, scene.boxes])
        tau = rng.random(len(samples))
        r = D.detection_loss(rand_params, scene.image, scene.boxes, scene.classes, rois=rois,
                             soft=True, taus=tau, need_grad=False)
        logp = log_softmax(_roi_logits(rand_params, scene, rois), axis=1)
        cls, _ = D.label_rois(rand_params.arch, samples, scene.boxes, scene.classes)
        # tau * H(p) + (1 - tau) * (-log p_y), averaged over samples
        h = -(np.exp(logp) * logp).sum(axis=1)
        ce = -logp[np.arange(len(cls)), cls]
        expected = np.mean(tau * h + (1 - tau) * ce)
        assert math.isfinite(r.total) and r.total >= 0
        assert r.parts["roi_cls"] == pytest.approx(expected, rel=1e-12)


def _roi_logits(params, scene, rois):
    t = params.tensors()
    tr = D._backbone(t, params.arch, scene.image)
    samples = np.concatenate([rois, scene.boxes])
    return D._roi_head(t, params.arch, tr.feat, samples)["cls"]


@pytest.mark.parametrize("kind,extra", [
    ("det", {}),
    ("det_soft", {}),
    ("det_soft", {"taus": 0.4}),
    ("confidence", {}),
])
def test_gradients_match_finite_differences(kind, extra, rand_params, splits):
    rng = np.random.default_rng(7)
    sc = splits["source_train"][3]
    rois = D.compute_rois(rand_params, sc.image)
    batch = dict(image=sc.image, boxes=sc.boxes, classes=sc.classes, rois=rois, **extra)
    _, g = D.value_and_grad(kind, rand_params, batch)
    fn = lambda v: D.value_and_grad(kind, DetectorParams(rand_params.arch, v), batch)[0]
    coords = rng.choice(rand_params.vector.size, 50, replace=False)
    assert relative_errors(fn, rand_params.vector, g, coords).max() <= 1e-4


def test_grad_rejects_unknown_kind(rand_params, scene):
    with pytest.raises(ValueError):
        D.grad("nope", rand_params, {})


def test_params_blocks(arch):
    p = DetectorParams.zeros(arch)
    sl = p.block_slices()
    assert list(sl) == ["backbone", "rpn_head", "roi_head", "conf_head"]
    assert sl["conf_head"].stop == p.vector.size
    with pytest.raises(ConfigError):
        DetectorParams(ArchConfig(hidden=8), p.vector)
