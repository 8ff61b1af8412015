import csv
import math

import numpy as np
import pytest

import eocount

TINY = """
bench.classes=2
bench.train=4
bench.val=2
bench.test=3
bench.image_size=32
train.epochs=1
train.batch_size=4
train.memory=4
arch.backbone=3,4,4,4
arch.trunk=4
arch.mask=3
arch.feedback=3
"""


def test_sample_density_integrates_to_count():
    s = eocount.generate_sample(2, seed=11)
    assert s["image"].shape == (1, 64, 64)
    assert round(s["density"].sum()) == s["count"] == len(s["dots"])
    down = eocount.downsample_density(s["density"], 4)
    assert down.shape == (1, 16, 16)
    assert abs(down.sum() - s["density"].sum()) < 1e-9


def test_generate_sample_rejects_unknown_class():
    with pytest.raises(ValueError):
        eocount.generate_sample(7, seed=1)


def test_model_forward_and_expand():
    m = eocount.Model.initial("desk", seed=3)
    assert m.stage == 1 and m.num_outputs == 2
    img = eocount.generate_sample(1, seed=5)["image"]
    out = m.forward(img)
    assert out["density"].shape == (2, 16, 16)
    assert (out["density"] >= 0).all()
    e = m.expand(seed=1)
    out2 = e.forward(img)
    assert e.num_outputs == 3
    np.testing.assert_array_equal(out2["density"][:2], out["density"])
    cls, count = e.predict_count(img[0])
    assert 0 <= cls < 3 and count >= 0


def test_bad_image_shape():
    m = eocount.Model.initial("desk")
    with pytest.raises(ValueError):
        m.forward(np.zeros((2, 32, 32)))
    with pytest.raises(ValueError):
        m.forward(np.zeros((30, 32)))


def test_metrics():
    assert eocount.mae([(10, 12), (20, 19)]) == 1.5
    assert math.isclose(eocount.mse([(10, 12), (20, 19)]), math.sqrt(2.5))


def test_config_text_and_errors():
    text = eocount.config_text(TINY, seed=9)
    assert "train.seed=9" in text and "bench.base_seed=9" in text
    with pytest.raises(ValueError):
        eocount.config_text("bench.classes=9")
    with pytest.raises(ValueError):
        eocount.config_text("no.such.key=1")


def test_train_eval_roundtrip(tmp_path):
    written = eocount.train(TINY, tmp_path / "run", seed=4)
    assert "stage_2/checkpoint.eocm1" in written and "pairs.csv" in written
    again = eocount.train(TINY, tmp_path / "again", seed=4)
    assert written == again
    ck = tmp_path / "run" / "stage_2" / "checkpoint.eocm1"
    assert ck.read_bytes() == (tmp_path / "again" / "stage_2" / "checkpoint.eocm1").read_bytes()

    m = eocount.Model.load(ck)
    assert m.stage == 2
    eocount.evaluate(TINY, ck, tmp_path / "eval", seed=4)
    with open(tmp_path / "eval" / "pairs.csv") as f:
        rows = list(csv.DictReader(f))
    pairs = [(float(r["Z"]), float(r["Z_hat"])) for r in rows if r["class_id"] != "0"]
    with open(tmp_path / "eval" / "report.csv") as f:
        report = list(csv.DictReader(f))
    assert len(rows) > 0 and len(report) == 3
    assert eocount.mse(pairs) >= eocount.mae(pairs)


def test_grad_check_rows():
    rows = eocount.grad_check(seeds=2)
    assert rows[-1]["op"] == "full_model"
    assert all(r["passed"] for r in rows)
