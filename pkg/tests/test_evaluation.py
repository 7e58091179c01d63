"""Inference and evaluation tests.

The multiscale count is checked compositionally against single-scale
predictions, the bilinear resizer against closed-form linear images, and
the metrics against hand-worked numbers.  Latency is timing noise and is
never asserted on beyond being positive.
"""

import numpy as np
import pytest

from crowdcount.data import DatasetManifest, save_annotations, synth_scene
from crowdcount.errors import ConfigurationError, InferenceError
from crowdcount.evaluation import (
    CROSS_CSV_HEADER,
    CrossDomainReport,
    EvalReport,
    EvalRow,
    SweepPoint,
    cross_evaluate,
    evaluate,
    mae,
    mse,
    multiscale_count,
    read_eval_csv,
    resize_bilinear,
    speed_accuracy_sweep,
    validate_scheme,
    write_cross_csv,
    write_eval_csv,
    write_sweep_csv,
)
from crowdcount.model import (
    ArchitectureSpec,
    ConvSpec,
    FcnModel,
    PoolSpec,
    predict_count,
)


def tiny_model(seed=0):
    spec = ArchitectureSpec(layers=(
        ConvSpec(5, 3, 8, relu=True),
        PoolSpec(),
        ConvSpec(3, 8, 8, relu=True),
        PoolSpec(),
        ConvSpec(1, 8, 1, relu=False),
    ))
    return FcnModel.initialize(spec, std=0.05, seed=seed)


def scenes(n=3, seed0=20):
    return [
        synth_scene(seed=seed0 + i, dims=(48, 48), count_range=(5, 12))
        for i in range(n)
    ]


class TestValidateScheme:
    def test_accepts_and_normalizes(self):
        assert validate_scheme([1, 0.8]) == (1.0, 0.8)

    def test_empty_rejected(self):
        with pytest.raises(ConfigurationError, match="non-empty"):
            validate_scheme([])

    @pytest.mark.parametrize("bad", [0.0, -0.5, 1.2])
    def test_out_of_range_rejected(self, bad):
        with pytest.raises(ConfigurationError, match="scale factors"):
            validate_scheme([1.0, bad])


class TestResizeBilinear:
    def test_scale_one_is_identity(self):
        image = np.random.default_rng(0).random((3, 20, 20)).astype(np.float32)
        assert resize_bilinear(image, 1.0) is image

    def test_output_dims_are_rounded(self):
        image = np.zeros((1, 37, 53), np.float32)
        out = resize_bilinear(image, 0.6)
        assert out.shape == (1, 22, 32)

    def test_constant_image_stays_constant(self):
        image = np.full((2, 40, 40), 0.37, np.float64)
        out = resize_bilinear(image, 0.7)
        np.testing.assert_allclose(out, 0.37, rtol=1e-12)

    def test_half_scale_averages_2x2_blocks(self):
        # checkerboard: every aligned 2x2 block averages to exactly 0.5
        image = np.indices((32, 32)).sum(axis=0) % 2
        image = image[None].astype(np.float64)
        out = resize_bilinear(image, 0.5)
        assert out.shape == (1, 16, 16)
        np.testing.assert_array_equal(out, np.full((1, 16, 16), 0.5))

    def test_linear_ramp_resampled_exactly(self):
        h, w = 30, 44
        ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
        image = (2.0 * xs + 3.0 * ys)[None]
        scale = 0.58
        out = resize_bilinear(image, scale)
        h2, w2 = out.shape[1:]
        src_y = np.clip((np.arange(h2) + 0.5) * (h / h2) - 0.5, 0.0, h - 1.0)
        src_x = np.clip((np.arange(w2) + 0.5) * (w / w2) - 0.5, 0.0, w - 1.0)
        expected = 2.0 * src_x[None, :] + 3.0 * src_y[:, None]
        np.testing.assert_allclose(out[0], expected, rtol=1e-12)

    def test_dtype_preserved(self):
        image = np.zeros((1, 32, 32), np.float32)
        assert resize_bilinear(image, 0.5).dtype == np.float32

    def test_too_small_result_rejected(self):
        with pytest.raises(InferenceError, match="16x16"):
            resize_bilinear(np.zeros((1, 20, 20), np.float32), 0.6)

    @pytest.mark.parametrize("bad", [0.0, 1.5, -1.0])
    def test_bad_scale_rejected(self, bad):
        with pytest.raises(ConfigurationError, match="scale"):
            resize_bilinear(np.zeros((1, 20, 20), np.float32), bad)

    def test_non_chw_rejected(self):
        with pytest.raises(ConfigurationError, match="C, H, W"):
            resize_bilinear(np.zeros((20, 20), np.float32), 0.5)


class TestMultiscaleCount:
    def test_composes_single_scale_predictions(self):
        model = tiny_model()
        image = scenes(1)[0].pixels
        count, per_scale = multiscale_count(model, image, (1.0, 0.8))
        expected = [
            predict_count(model, resize_bilinear(image, s)) for s in (1.0, 0.8)
        ]
        np.testing.assert_allclose(per_scale, expected, rtol=1e-12)
        assert count == pytest.approx(np.mean(expected), rel=1e-12)

    def test_duplicate_scale_equals_single(self):
        model = tiny_model()
        image = scenes(1)[0].pixels
        single, _ = multiscale_count(model, image, (0.8,))
        doubled, _ = multiscale_count(model, image, (0.8, 0.8))
        assert doubled == pytest.approx(single, abs=1e-6)

    def test_order_invariant(self):
        model = tiny_model()
        image = scenes(1)[0].pixels
        a, _ = multiscale_count(model, image, (1.0, 0.8))
        b, _ = multiscale_count(model, image, (0.8, 1.0))
        assert a == b

    def test_mean_clamped_at_zero(self):
        model = tiny_model()
        for p in model.params:
            p.weights[:] = 0.0
        model.params[-1].bias[:] = -1.0
        count, per_scale = multiscale_count(model, scenes(1)[0].pixels, (1.0,))
        assert per_scale[0] < 0.0
        assert count == 0.0

    def test_scale_named_in_error(self):
        model = tiny_model()
        image = np.zeros((3, 20, 20), np.float32)
        with pytest.raises(InferenceError, match="scale 0.2"):
            multiscale_count(model, image, (1.0, 0.2))


class TestMetrics:
    def test_single_pair(self):
        assert mae([(100.0, 110.0)]) == pytest.approx(10.0)
        assert mse([(100.0, 110.0)]) == pytest.approx(10.0)

    def test_two_pairs(self):
        pairs = [(100.0, 110.0), (50.0, 30.0)]
        assert mae(pairs) == pytest.approx(15.0)
        assert mse(pairs) == pytest.approx(np.sqrt(250.0))
        assert mse(pairs) == pytest.approx(15.811, abs=1e-3)

    def test_mae_never_exceeds_mse(self):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            pairs = list(zip(rng.uniform(0, 3000, 1000), rng.uniform(0, 3000, 1000)))
            assert mae(pairs) <= mse(pairs) + 1e-12

    def test_empty_rejected(self):
        with pytest.raises(ConfigurationError, match="empty"):
            mae([])
        with pytest.raises(ConfigurationError, match="empty"):
            mse([])


class TestEvalCsv:
    def _report(self):
        rows = [
            EvalRow("scene_a", 120.0, 111.2534, 12.345),
            EvalRow("scene_b", 48.0, 62.9876, 8.001),
        ]
        pairs = [(r.true_count, r.estimated) for r in rows]
        return EvalReport(
            rows=rows,
            mae=mae(pairs),
            mse=mse(pairs),
            scheme=(1.0, 0.8),
            dataset="synth-high",
            skipped=["scene_c"],
        )

    def test_round_trip(self, tmp_path):
        report = self._report()
        path = tmp_path / "eval.csv"
        write_eval_csv(report, path)
        loaded = read_eval_csv(path)
        assert [r.id for r in loaded.rows] == ["scene_a", "scene_b"]
        assert loaded.scheme == (1.0, 0.8)
        assert loaded.dataset == "synth-high"
        assert loaded.skipped == ["scene_c"]
        assert not loaded.complete
        for got, want in zip(loaded.rows, report.rows):
            assert got.true_count == want.true_count
            assert got.estimated == pytest.approx(want.estimated, abs=1e-4)
            assert got.latency_ms == pytest.approx(want.latency_ms, abs=1e-3)
        assert loaded.mae == pytest.approx(report.mae, abs=1e-3)
        assert loaded.mse == pytest.approx(report.mse, abs=1e-3)

    def test_missing_header_rejected(self, tmp_path):
        path = tmp_path / "eval.csv"
        path.write_text("# scheme: 1\n", encoding="utf-8")
        with pytest.raises(ConfigurationError, match="header"):
            read_eval_csv(path)

    def test_malformed_row_rejected(self, tmp_path):
        path = tmp_path / "eval.csv"
        path.write_text("id,true,estimated,latency_ms\na,1,2\n", encoding="utf-8")
        with pytest.raises(ConfigurationError, match="malformed"):
            read_eval_csv(path)

    def test_empty_report_rejected(self, tmp_path):
        path = tmp_path / "eval.csv"
        path.write_text("id,true,estimated,latency_ms\n", encoding="utf-8")
        with pytest.raises(ConfigurationError, match="no rows"):
            read_eval_csv(path)


class TestEvaluate:
    def test_counts_match_direct_inference(self):
        model = tiny_model()
        samples = scenes(3)
        report = evaluate(model, samples, (1.0, 0.8))
        assert [r.id for r in report.rows] == [s.id for s in samples]
        for row, sample in zip(report.rows, samples):
            assert row.true_count == len(sample.heads)
            direct, _ = multiscale_count(model, sample.pixels, (1.0, 0.8))
            assert row.estimated == pytest.approx(direct, rel=1e-12)
            assert row.latency_ms > 0.0
        pairs = report.pairs()
        assert report.mae == pytest.approx(mae(pairs))
        assert report.mse == pytest.approx(mse(pairs))
        assert report.complete

    def test_threads_match_serial(self):
        model = tiny_model()
        samples = scenes(4)
        serial = evaluate(model, samples, (1.0,))
        threaded = evaluate(model, samples, (1.0,), threads=3)
        assert [r.id for r in threaded.rows] == [r.id for r in serial.rows]
        for a, b in zip(serial.rows, threaded.rows):
            assert b.estimated == pytest.approx(a.estimated, rel=1e-12)

    def test_empty_source_rejected(self):
        with pytest.raises(ConfigurationError, match="empty"):
            evaluate(tiny_model(), [], (1.0,))

    def test_manifest_with_bad_entry_skips_and_notes(self, tmp_path):
        samples = scenes(2)
        paths = []
        for s in samples:
            p = tmp_path / f"{s.id}.txt"
            save_annotations(s, p)
            paths.append(str(p))
        paths.append(str(tmp_path / "missing.txt"))
        manifest = DatasetManifest("mini", paths)
        with pytest.warns(UserWarning, match="skipped"):
            report = evaluate(tiny_model(), manifest, (1.0,))
        assert [r.id for r in report.rows] == [s.id for s in samples]
        assert report.skipped == ["missing"]
        assert not report.complete
        assert any("incomplete" in note for note in report.notes)
        assert report.dataset == "mini"


class TestCrossEvaluate:
    def _cross(self, mae_v, baseline):
        return CrossDomainReport(
            source_domain="a",
            target_domain="b",
            mae=mae_v,
            mse=mae_v,
            baseline_mae=baseline,
            baseline_mse=baseline,
        )

    def test_pct_increase_zero(self):
        assert self._cross(50.0, 50.0).pct_increase_mae == pytest.approx(0.0)

    def test_pct_increase_double(self):
        assert self._cross(100.0, 50.0).pct_increase_mae == pytest.approx(100.0)

    def test_pct_rounding_one_decimal(self):
        cross = self._cross(191.0, 126.5)
        assert cross.pct_increase_mae == pytest.approx(50.988, abs=1e-3)
        assert "(+51.0%)" in cross.summary()

    def test_cross_against_in_domain_baseline(self):
        samples = scenes(3)
        foreign = tiny_model(seed=1)
        baseline = evaluate(tiny_model(seed=0), samples, (1.0,))
        cross, report = cross_evaluate(foreign, "synth-medium", samples, baseline, (1.0,))
        assert cross.source_domain == "synth-medium"
        assert cross.mae == pytest.approx(report.mae)
        assert cross.baseline_mae == pytest.approx(baseline.mae)

    def test_scheme_mismatch_rejected(self):
        samples = scenes(2)
        baseline = evaluate(tiny_model(), samples, (1.0,))
        with pytest.raises(ConfigurationError, match="scheme"):
            cross_evaluate(tiny_model(1), "src", samples, baseline, (1.0, 0.8))

    def test_sample_mismatch_rejected(self):
        baseline = evaluate(tiny_model(), scenes(2), (1.0,))
        with pytest.raises(ConfigurationError, match="different samples"):
            cross_evaluate(tiny_model(1), "src", scenes(3), baseline, (1.0,))

    def test_zero_baseline_rejected(self):
        samples = scenes(2)
        rows = [EvalRow(s.id, float(len(s.heads)), float(len(s.heads)), 1.0) for s in samples]
        perfect = EvalReport(rows=rows, mae=0.0, mse=0.0, scheme=(1.0,))
        with pytest.raises(ConfigurationError, match="positive"):
            cross_evaluate(tiny_model(1), "src", samples, perfect, (1.0,))

    def test_cross_csv_format(self, tmp_path):
        path = tmp_path / "cross.csv"
        write_cross_csv(self._cross(191.0, 126.5), path)
        lines = path.read_text(encoding="utf-8").splitlines()
        assert lines[0] == CROSS_CSV_HEADER
        assert lines[1] == "a,b,191.0000,191.0000,126.5000,126.5000,51.0,51.0"


class TestSpeedAccuracySweep:
    def test_points_match_single_scale_evaluate(self):
        model = tiny_model()
        samples = scenes(3)
        points = speed_accuracy_sweep(model, samples, (1.0, 0.75, 0.5))
        assert [p.scale for p in points] == [1.0, 0.75, 0.5]
        direct = evaluate(model, samples, (1.0,))
        assert points[0].mae == pytest.approx(direct.mae, rel=1e-12)
        assert points[0].mse == pytest.approx(direct.mse, rel=1e-12)
        for p in points:
            assert p.median_latency_ms > 0.0
            assert p.mean_latency_ms > 0.0
            assert p.flops > 0.0

    def test_flops_quarter_at_half_scale(self):
        model = tiny_model()
        samples = scenes(2)
        points = speed_accuracy_sweep(model, samples, (1.0, 0.5))
        ratio = points[0].flops / points[1].flops
        assert ratio == pytest.approx(4.0, rel=0.05)

    @pytest.mark.parametrize("scales", [(0.8, 1.0), (1.0, 1.0), (0.5, 0.8, 0.4)])
    def test_non_descending_rejected(self, scales):
        with pytest.raises(ConfigurationError, match="descending"):
            speed_accuracy_sweep(tiny_model(), scenes(1), scales)

    def test_empty_source_rejected(self):
        with pytest.raises(ConfigurationError, match="empty"):
            speed_accuracy_sweep(tiny_model(), [], (1.0,))

    def test_sweep_csv_carries_mean_latency(self, tmp_path):
        point = SweepPoint(
            scale=1.0, mae=1.5, mse=2.5,
            median_latency_ms=3.0, mean_latency_ms=4.0, flops=123456.7,
        )
        path = tmp_path / "sweep.csv"
        write_sweep_csv([point], path)
        lines = path.read_text(encoding="utf-8").splitlines()
        assert lines[0] == "scale,mae,mse,latency_ms,flops"
        assert lines[1] == "1,1.5000,2.5000,4.000,123457"
