import itertools
from pathlib import Path

import numpy as np
import pytest

from umt import synth
from umt.geometry import iou_matrix
from umt.params import ConfigError
from umt.synth import DomainShiftSpec, SceneSpec, apply_shift, invert_shift, render_scene

SPEC = SceneSpec()


def no_noise(shift: DomainShiftSpec) -> DomainShiftSpec:
    d = shift.to_dict()
    d.update(noise_amplitude=0.0, epsilon=0.0)
    return DomainShiftSpec(**d)


class TestRender:
    def test_deterministic(self):
        a, b = render_scene(SPEC, [4, 2]), render_scene(SPEC, [4, 2])
        assert a.image.tobytes() == b.image.tobytes()
        np.testing.assert_array_equal(a.boxes, b.boxes)
        np.testing.assert_array_equal(a.classes, b.classes)

    def test_background_only(self):
        sc = render_scene(SceneSpec(min_objects=0, max_objects=0), 1)
        assert sc.boxes.shape == (0, 4) and len(sc.classes) == 0

    def test_invariants(self):
        for seed in range(100):
            sc = render_scene(SPEC, seed)
            assert sc.image.shape == (32, 32, 3)
            assert 0 <= sc.image.min() and sc.image.max() <= 1
            assert 1 <= len(sc.classes) <= 3
            assert set(sc.classes.tolist()) <= {1, 2, 3}
            b = sc.boxes
            assert (b[:, :2] >= 0).all() and (b[:, 0] + b[:, 2] <= 32).all()
            assert (b[:, 1] + b[:, 3] <= 32).all()
            m = iou_matrix(b, b)
            np.fill_diagonal(m, 0)
            assert m.max(initial=0) <= 0.3

    def test_boxes_tight(self):
        # shapes are much darker than the background, so a threshold recovers the mask
        for seed in range(20):
            sc = render_scene(SPEC, seed)
            dark = sc.image.max(axis=2) < 0.55
            for x, y, w, h in sc.boxes.astype(int):
                inside = dark[y:y + h, x:x + w]
                assert inside[0].any() and inside[-1].any()
                assert inside[:, 0].any() and inside[:, -1].any()

    def test_class_frequencies(self):
        counts = np.zeros(4)
        for seed in range(1000):
            for c in render_scene(SPEC, [9, seed]).classes:
                counts[c] += 1
        freq = counts[1:] / counts.sum()
        assert np.all(np.abs(freq - 1 / 3) <= 0.1 / 3)

    def test_invalid_spec(self):
        with pytest.raises(ConfigError):
            SceneSpec(num_classes=0)
        with pytest.raises(ConfigError):
            SceneSpec(max_size=40)


class TestShift:
    def test_identity(self):
        img = render_scene(SPEC, 0).image
        ident = synth.shift_preset("identity")
        np.testing.assert_array_equal(apply_shift(img, ident, 0), img)
        np.testing.assert_array_equal(invert_shift(img, ident, 0), img)

    def test_channel_swap(self):
        img = render_scene(SPEC, 3).image
        swap = DomainShiftSpec(color_matrix=((0, 0, 1), (0, 1, 0), (1, 0, 0)))
        out = apply_shift(img, swap, 0)
        np.testing.assert_array_equal(out[:, :, 0], img[:, :, 2])
        np.testing.assert_array_equal(out[:, :, 2], img[:, :, 0])
        np.testing.assert_array_equal(out[:, :, 1], img[:, :, 1])

    def test_strong_changes_gray(self):
        gray = np.full((32, 32, 3), 0.5)
        out = apply_shift(gray, synth.shift_preset("strong"), 0)
        assert np.all(np.abs(out.mean(axis=(0, 1)) - 0.5) >= 0.05)

    @pytest.mark.parametrize("preset", ["mild", "strong"])
    def test_exact_round_trip(self, preset):
        shift = no_noise(synth.shift_preset(preset))
        for seed in range(10):
            img = render_scene(SPEC, seed).image
            fwd = apply_shift(img, shift, seed)
            unclipped = (img @ shift.matrix.T + shift.offset)
            ok = np.all((unclipped > 0.1) & (unclipped < 0.9), axis=2)  # well clear of clipping
            back = invert_shift(fwd, shift, seed)
            assert np.abs(back - img)[ok].max() <= 1e-6

    def test_epsilon_noise_level(self):
        # Monte-Carlo estimate of E|eps * noise| from the noise field alone
        eps, cell = 0.1, 8
        ref = np.mean([np.abs(synth.structured_noise((32, 32, 3), cell,
                                                     np.random.default_rng([77, k]))).mean()
                       for k in range(400)]) * eps
        shift = DomainShiftSpec(color_matrix=((0.9, 0.1, 0), (0, 0.9, 0.1), (0.1, 0, 0.9)),
                                epsilon=eps, noise_cell=cell)
        gray = np.full((32, 32, 3), 0.5)
        maes = [np.abs(invert_shift(apply_shift(gray, shift, k), shift, [k, 1]) - gray).mean()
                for k in range(400)]
        assert np.mean(maes) == pytest.approx(ref, rel=0.05)

    def test_range_and_shape(self):
        shift = synth.shift_preset("strong")
        rng = np.random.default_rng(0)
        img = rng.random((32, 32, 3))
        for out in (apply_shift(img, shift, 1), invert_shift(img, shift, 1)):
            assert out.shape == img.shape
            assert 0 <= out.min() and out.max() <= 1

    def test_ill_conditioned(self):
        bad = DomainShiftSpec(color_matrix=((1, 0, 0), (0, 1, 0), (0, 0, 1e-5)))
        with pytest.raises(ConfigError):
            invert_shift(np.zeros((4, 4, 3)), bad, 0)

    def test_negative_epsilon(self):
        with pytest.raises(ConfigError):
            DomainShiftSpec(epsilon=-0.1)

    def test_source_like_closer_to_source(self):
        shift = synth.shift_preset("strong").to_dict()
        shift["epsilon"] = 0.0
        sp = synth.build_splits(SPEC, DomainShiftSpec(**shift), 60, 60, 1, seed=2)

        def hist(scenes):
            px = np.concatenate([s.image.reshape(-1, 3) for s in scenes])
            return np.stack([np.histogram(px[:, k], bins=32, range=(0, 1))[0] / len(px)
                             for k in range(3)])

        h_src = hist(sp["source_train"])
        l1_slk = np.abs(hist(sp["source_like"]) - h_src).sum()
        l1_tgt = np.abs(hist(sp["target_train"]) - h_src).sum()
        assert l1_slk < l1_tgt


class TestDatasets:
    def test_splits_and_annotations(self, splits):
        assert [len(splits[s]) for s in synth.SPLITS] == [40, 40, 20, 40, 40]
        for parent, child in zip(splits["source_train"], splits["target_like"]):
            assert child.parent == parent.id and child.domain == "TargetLike"
            assert child.boxes.tobytes() == parent.boxes.tobytes()
            assert child.classes.tobytes() == parent.classes.tobytes()
        for parent, child in zip(splits["target_train"], splits["source_like"]):
            assert child.parent == parent.id and child.domain == "SourceLike"
            assert child.boxes.tobytes() == parent.boxes.tobytes()
        ids = {s: {sc.id for sc in splits[s]} for s in synth.SPLITS}
        assert not ids["target_train"] & ids["target_test"]
        for a, b in itertools.combinations(synth.SPLITS, 2):
            assert not ids[a] & ids[b]

    def test_disk_layout_and_round_trip(self, tmp_path):
        root = synth.generate_datasets(tmp_path / "d", SPEC, synth.shift_preset("strong"),
                                       6, 5, 4, seed=1)
        man = synth.read_manifest(root)
        assert man["counts"] == {"source_train": 6, "target_train": 5, "target_test": 4,
                                 "source_like": 5, "target_like": 6}
        assert man["format_version"] == synth.FORMAT_VERSION
        mem = synth.build_splits(SPEC, synth.shift_preset("strong"), 6, 5, 4, seed=1)
        disk = synth.load_datasets(root)
        for s in synth.SPLITS:
            assert len(list((root / s / "images").glob("*.png"))) == man["counts"][s]
            for a, b in zip(mem[s], disk[s]):
                assert a.image.tobytes() == b.image.tobytes()
                assert a.id == b.id and a.domain == b.domain
                np.testing.assert_array_equal(a.boxes, b.boxes)

    def test_byte_identical(self, tmp_path):
        def snapshot(root: Path):
            return {p.relative_to(root).as_posix(): p.read_bytes()
                    for p in sorted(root.rglob("*")) if p.is_file()}

        a = synth.generate_datasets(tmp_path / "a", SPEC, synth.shift_preset("mild"), 4, 4, 3, 7)
        b = synth.generate_datasets(tmp_path / "b", SPEC, synth.shift_preset("mild"), 4, 4, 3, 7)
        assert snapshot(a) == snapshot(b)

    def test_refuses_existing_without_force(self, tmp_path):
        root = tmp_path / "d"
        synth.generate_datasets(root, SPEC, synth.shift_preset("mild"), 2, 2, 2, 0)
        with pytest.raises(FileExistsError):
            synth.generate_datasets(root, SPEC, synth.shift_preset("mild"), 2, 2, 2, 0)
        synth.generate_datasets(root, SPEC, synth.shift_preset("mild"), 3, 2, 2, 0, force=True)
        assert synth.read_manifest(root)["counts"]["source_train"] == 3

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            synth.read_manifest(tmp_path)

    def test_bad_sizes(self):
        with pytest.raises(ConfigError):
            synth.build_splits(SPEC, synth.shift_preset("mild"), 0, 1, 1, 0)
