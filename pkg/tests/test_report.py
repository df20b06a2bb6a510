import numpy as np
import pytest
from PIL import Image

from conftest import overfit_toy_a, small_model
from vlsm_ensemble.data import EmptySplitError
from vlsm_ensemble.report import (
    FN_COLOR,
    FP_COLOR,
    TP_COLOR,
    DuplicateModelError,
    IncompletePromptGrid,
    MetricsRecord,
    delta,
    evaluate,
    format_delta,
    load_fixture,
    overlay_counts,
    render_overlay,
    render_table,
)

PUBLISHED_DELTAS = {
    "BiomedCLIPSeg-A": [2.519, 4.668, 6.303, 2.36, -0.247],
    "CLIPSeg-B": [0.779, 1.623, 2.586, 1.258, 0.026],
    "Ensemble-C": [0.272, 2.2, -1.171, 2.479, -2.115],
}


class TestDelta:
    def test_published_examples(self):
        assert delta(0.83976, 0.81457).delta == pytest.approx(2.519, abs=5e-4)
        assert delta(0.81423, 0.75120).delta == pytest.approx(6.303, abs=5e-4)
        assert delta(0.83976, 0.81457).display == "2.519"

    def test_self_delta(self):
        assert delta(0.7, 0.7).delta == 0.0
        assert format_delta(delta(0.1, 0.1 + 1e-12).delta) == "0.000"

    @pytest.mark.parametrize("a,b", [(0.3, 0.9), (0.12345, 0.54321), (1.0, 0.0)])
    def test_antisymmetric(self, a, b):
        assert delta(a, b).delta == -delta(b, a).delta


class TestFixture:
    def test_layout(self):
        fx = load_fixture()
        assert fx["datasets"] == ["Kvasir", "ClinicDB", "BKAI", "BUSI", "CheXlocalize"]
        assert [m["name"] for m in fx["models"]] == [
            "CRIS", "BiomedCLIPSeg", "BiomedCLIPSeg-A", "CLIPSeg", "CLIPSeg-B", "Ensemble-C", "UNet-D"]

    def test_reported_rows_agree_with_published(self):
        fx = load_fixture()
        for d in fx["deltas"]:
            assert [d["reported"][k] for k in fx["datasets"]] == PUBLISHED_DELTAS[d["model"]]

    def test_fixture_table_deltas(self):
        fx = load_fixture()
        table = render_table([], fx)
        rows = table.delta_rows()
        assert len(rows) == 3
        got = {}
        labels = [r.label for r in table.rows]
        for r in rows:
            model = labels[labels.index(r.label) - 1]
            got[model] = [r.values[d] for d in table.datasets]
        assert set(got) == set(PUBLISHED_DELTAS)
        for model, expected in PUBLISHED_DELTAS.items():
            np.testing.assert_allclose(got[model], expected, atol=1e-3)

    def test_delta_rows_follow_their_model(self):
        labels = [r.label for r in render_table([], load_fixture()).rows]
        assert labels[labels.index("Delta BiomedCLIPSeg") - 1] == "BiomedCLIPSeg-A"
        assert labels[labels.index("Delta CLIPSeg") - 1] == "CLIPSeg-B"

    def test_text_and_csv_render(self):
        table = render_table([], load_fixture())
        assert "0.83976" in table.text and "6.303" in table.text
        lines = table.csv.splitlines()
        assert lines[0] == "model,Kvasir,ClinicDB,BKAI,BUSI,CheXlocalize"
        assert len(lines) == 1 + 7 + 3


def record(model="M", ds="d", grid=None, n_prompts=2):
    grid = grid or {("a", 0): 1.0, ("a", 1): 1.0, ("b", 0): 0.0, ("b", 1): 0.0}
    rec = MetricsRecord(ds, model, n_prompts=n_prompts)
    for (i, p), v in grid.items():
        rec.add(i, p, v)
    return rec


class TestRenderTable:
    def test_single_cell(self):
        table = render_table([record()])
        assert table.datasets == ["d"]
        assert [r.label for r in table.rows] == ["M"]
        assert table.rows[0].values == {"d": 0.5}

    def test_incomplete_grid(self):
        rec = record(grid={("a", 0): 1.0, ("a", 1): 1.0, ("b", 0): 0.0})
        with pytest.raises(IncompletePromptGrid, match="incomplete prompt grid"):
            render_table([rec])

    def test_duplicate_model(self):
        with pytest.raises(DuplicateModelError):
            render_table([record(), record()])

    def test_collision_with_baseline(self):
        with pytest.raises(DuplicateModelError):
            render_table([record(model="CRIS", ds="Kvasir")], load_fixture())

    def test_missing_dataset_column_dropped(self, caplog):
        table = render_table([record(model="mine", ds="Kvasir")], load_fixture())
        assert table.datasets == ["Kvasir"]
        assert "ClinicDB" in caplog.text

    def test_user_delta(self):
        table = render_table([record("X", grid={("a", 0): 0.9}, n_prompts=1),
                              record("Y", grid={("a", 0): 0.8}, n_prompts=1)], deltas=[("X", "Y")])
        assert [r.label for r in table.rows] == ["X", "Delta Y", "Y"]
        assert table.rows[1].values["d"] == pytest.approx(10.0)

    def test_multi_dataset_same_model(self):
        table = render_table([record(ds="d1"), record(ds="d2")])
        assert table.datasets == ["d1", "d2"] and len(table.rows) == 1


class TestOverlay:
    def test_identity_only_green(self, tmp_path):
        mask = np.zeros((8, 8), np.uint8)
        mask[2:5, 2:5] = 1
        img = np.full((8, 8, 3), 100, np.uint8)
        ov = render_overlay(img, mask, mask, tmp_path / "o.png")
        assert ov.counts == {"tn": 55, "tp": 9, "fp": 0, "fn": 0}
        assert np.array_equal(ov.rgb[~mask.astype(bool)], img[~mask.astype(bool)])
        assert np.array_equal(np.asarray(Image.open(tmp_path / "o.png")), ov.rgb)

    def test_negation_only_red_blue(self):
        mask = (np.random.default_rng(0).random((10, 10)) > 0.5).astype(np.uint8)
        c = overlay_counts(mask, 1 - mask)
        assert c["tp"] == c["tn"] == 0
        assert c["fp"] == int((mask == 0).sum()) and c["fn"] == int(mask.sum())

    def test_all_ones_red_count(self):
        mask = np.zeros((6, 6), np.uint8)
        mask[:, :3] = 1
        img = np.zeros((6, 6, 3), np.uint8)
        ov = render_overlay(img, mask, np.ones_like(mask), alpha=1.0)
        red = np.all(ov.rgb == FP_COLOR, axis=-1).sum()
        assert red == int((mask == 0).sum()) == 18
        assert np.all(ov.rgb == TP_COLOR, axis=-1).sum() == 18
        assert np.all(ov.rgb == FN_COLOR, axis=-1).sum() == 0

    def test_float_image_and_shape_check(self):
        with pytest.raises(ValueError):
            render_overlay(np.zeros((4, 4, 3)), np.zeros((4, 5)), np.zeros((4, 5)))


class TestEvaluate:
    def test_full_grid_and_determinism(self, discs):
        model = small_model("A")
        a = evaluate(model, discs, "test")
        b = evaluate(model, discs, "test")
        assert a == b
        assert len(a.scores) == len(discs.split("test")) * len(discs.prompts)
        a.check_complete()
        assert a.model_name == "BiomedCLIPSeg-A"

    def test_callback_sees_every_pair(self, discs):
        seen = []
        evaluate(small_model("B"), discs, "val", on_prediction=lambda i, p, pred: seen.append((i, p, pred.shape)))
        assert len(seen) == 2 * 3 and all(s[2] == (64, 64) for s in seen)

    def test_empty_split(self, discs):
        from dataclasses import replace

        m = replace(discs, splits={**discs.splits, "test": ()})
        with pytest.raises(EmptySplitError):
            evaluate(small_model("A"), m, "test")

    def test_restores_train_mode(self, discs):
        model = small_model("A").train()
        evaluate(model, discs, "val")
        assert model.training

    def test_overfit_model_scores_high_on_train(self, discs):
        model, _, _ = overfit_toy_a(discs)
        assert evaluate(model, discs, "train").aggregate >= 0.95
