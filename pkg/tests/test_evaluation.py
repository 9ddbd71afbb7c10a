import csv
import io
import json
import math

import numpy as np
import pytest

from vlmir.evaluation import (
    FAILED,
    MetricReport,
    MissingRestoredError,
    emit_table,
    evaluate_dataset,
    evaluate_pairs,
)
from vlmir.images import save_image
from vlmir.manifest import DatasetManifest
from vlmir.metrics import psnr


class ConstantPlugin:
    name = "lpips"
    higher_is_better = False

    def compute(self, restored, gt, ids):
        return {i: 0.1 * k for k, i in enumerate(ids)}


class BrokenPlugin:
    name = "fid"
    higher_is_better = False

    def compute(self, restored, gt, ids):
        raise RuntimeError("no pretrained weights")


@pytest.fixture
def five(tiny_corpus):
    return DatasetManifest(tiny_corpus.records[:5], "test", root=tiny_corpus.root)


def _write(m, out, pick):
    out.mkdir(exist_ok=True)
    for r in m.records:
        gt, lq = m.load_pair(r)
        save_image(pick(gt, lq), out / f"{r.id}.png")
    return out


def test_gt_as_restored(five, tmp_path):
    rep = evaluate_dataset(five, _write(five, tmp_path / "gt", lambda g, q: g))
    assert rep.aggregate["psnr"] == math.inf and rep.inf_counts["psnr"] == 5
    assert rep.aggregate["ssim"] == pytest.approx(1.0)
    assert set(rep.per_image) == {r.id for r in five.records}
    assert "inf" in emit_table([rep])


def test_lq_as_restored_equals_baseline(five, tmp_path):
    rep = evaluate_dataset(five, _write(five, tmp_path / "lq", lambda g, q: q))
    for r in five.records:
        gt, lq = five.load_pair(r)
        assert rep.per_image[r.id]["psnr"] == pytest.approx(psnr(lq, gt))
    mean = np.mean([rep.per_image[i]["ssim"] for i in rep.per_image])
    assert abs(rep.aggregate["ssim"] - mean) < 1e-9


def test_missing_files_listed(five, tmp_path):
    out = _write(five, tmp_path / "partial", lambda g, q: q)
    gone = [five.records[1].id, five.records[3].id]
    for i in gone:
        (out / f"{i}.png").unlink()
    with pytest.raises(MissingRestoredError) as err:
        evaluate_dataset(five, out)
    assert err.value.missing == gone
    assert all(i in str(err.value) for i in gone)


def test_shape_mismatch_names_image():
    with pytest.raises(ValueError, match="img7"):
        evaluate_pairs([np.zeros((16, 16, 3))], [np.zeros((16, 12, 3))], ["img7"])


def test_failing_plugin_is_isolated():
    rng = np.random.default_rng(0)
    gt = [rng.random((16, 16, 3)) for _ in range(3)]
    rest = [np.clip(g + 0.05, 0, 1) for g in gt]
    rep = evaluate_pairs(rest, gt, ["a", "b", "c"], plugins=[ConstantPlugin(), BrokenPlugin()])
    assert rep.aggregate["fid"] == FAILED
    assert rep.aggregate["lpips"] == pytest.approx(0.1)
    for col in ("psnr", "ssim", "y_psnr", "y_ssim"):
        assert math.isfinite(rep.aggregate[col])
    assert "failed" in emit_table([rep])


def _report(name, **agg):
    return MetricReport(name, {}, dict(agg))


def test_table_best_flags_follow_polarity():
    a = _report("a", psnr=20.0, ssim=0.8, lpips=0.3)
    b = _report("b", psnr=25.0, ssim=0.7, lpips=0.2)
    rows = list(csv.reader(io.StringIO(emit_table([a, b], "csv"))))
    assert rows[0] == ["variant", "psnr", "ssim", "lpips"]
    assert rows[1] == ["a", "20.0000", "0.8000*", "0.3000"]
    assert rows[2] == ["b", "25.0000*", "0.7000", "0.2000*"]


def test_single_report_table_has_one_row_and_no_flags():
    text = emit_table([_report("only", psnr=21.0)], "csv")
    assert text.strip().splitlines() == ["variant,psnr", "only,21.0000"]


def test_table_errors():
    with pytest.raises(ValueError):
        emit_table([])
    with pytest.raises(ValueError):
        emit_table([_report("a", psnr=1.0), _report("b", ssim=1.0)])
    with pytest.raises(ValueError):
        emit_table([_report("a", psnr=1.0)], "xml")


def test_report_json_round_trip(tmp_path):
    rep = MetricReport("r", {"x": {"psnr": math.inf}}, {"psnr": math.inf}, {"seed": 3}, {"psnr": 1})
    data = json.loads(rep.save(tmp_path / "r.json").read_text())
    assert data["aggregate"]["psnr"] == "inf" and data["metadata"]["seed"] == 3
