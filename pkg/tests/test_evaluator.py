import csv
import io
import json

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from disef.errors import InputError, ProtocolError
from disef.evaluator import (
    EvalReport,
    emit_report,
    evaluate_base_new,
    evaluate_default,
    harmonic_mean,
    load_report,
    predict,
    report_from_csv,
    report_to_csv,
    shots_series,
    top1,
)

NAMES = [f"k{i}" for i in range(10)]
TEMPLATE = "{}"


class OneHotModel:
    """Image i carries its class index in pixel (0, 0, 0); text features are one-hot per class."""

    def __init__(self, constant=False):
        self.constant = constant

    def encode_texts(self, prompts):
        return torch.eye(len(NAMES), dtype=torch.float64)[[NAMES.index(p) for p in prompts]]

    def encode_images(self, images):
        if self.constant:
            return torch.ones(len(images), len(NAMES), dtype=torch.float64)
        idx = images[:, 0, 0, 0].long()
        return torch.eye(len(NAMES), dtype=torch.float64)[idx]


def labelled_images(labels):
    imgs = np.zeros((len(labels), 1, 1, 1), np.float32)
    imgs[:, 0, 0, 0] = labels
    return imgs


class TestTop1:
    def test_examples(self):
        assert top1([0, 1, 2, 3], [0, 1, 2, 3]) == 1.0
        assert top1([0, 1, 2, 3], [0, 1, 0, 0]) == 0.5
        assert top1([1], [0]) == 0.0

    def test_empty_and_mismatch(self):
        with pytest.raises(InputError):
            top1([], [])
        with pytest.raises(InputError):
            top1([1, 2], [1])

    def test_random_guess_is_binomial(self):
        rng = np.random.default_rng(0)
        n, k = 5000, 10
        acc = top1(rng.integers(0, k, n), rng.integers(0, k, n))
        assert stats.binomtest(round(acc * n), n, 1 / k).pvalue > 0.001

    @given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 4)), min_size=1, max_size=50), st.randoms())
    def test_permutation_invariant(self, pairs, rnd):
        shuffled = list(pairs)
        rnd.shuffle(shuffled)
        p, y = zip(*pairs)
        ps, ys = zip(*shuffled)
        assert top1(p, y) == top1(ps, ys)


class TestHarmonic:
    def test_examples(self):
        assert harmonic_mean(80, 80) == 80
        assert harmonic_mean(100, 0) == 0
        assert harmonic_mean(60, 90) == pytest.approx(72.0)

    def test_negative(self):
        with pytest.raises(InputError):
            harmonic_mean(-1, 50)

    @given(st.floats(0, 100), st.floats(0, 100))
    def test_bounds(self, b, n):
        h = harmonic_mean(b, n)
        assert min(b, n) - 1e-9 <= h <= (b + n) / 2 + 1e-9


class TestProtocols:
    labels = np.repeat(np.arange(10), 6)

    def test_oracle_model_scores_100(self):
        rep = evaluate_base_new({0: OneHotModel()}, labelled_images(self.labels), self.labels, NAMES, NAMES[:5], NAMES[5:], TEMPLATE)
        assert rep.per_seed[0] == {"base": 100.0, "new": 100.0, "h": 100.0}

    def test_constant_model_chance(self):
        rep = evaluate_base_new({0: OneHotModel(constant=True)}, labelled_images(self.labels), self.labels, NAMES, NAMES[:5], NAMES[5:], TEMPLATE)
        assert rep.per_seed[0]["base"] == pytest.approx(20.0)
        assert rep.per_seed[0]["new"] == pytest.approx(20.0)

    def test_subset_only_logits(self):
        # a new-class image is never predicted as a base class
        preds = predict(OneHotModel(), labelled_images([7, 8]), NAMES[5:], TEMPLATE)
        assert list(preds) == [2, 3]

    def test_overlap(self):
        with pytest.raises(ProtocolError):
            evaluate_base_new({0: OneHotModel()}, labelled_images(self.labels), self.labels, NAMES, NAMES[:6], NAMES[5:], TEMPLATE)

    def test_default(self):
        rep = evaluate_default({0: OneHotModel(), 1: OneHotModel(constant=True)}, labelled_images(self.labels), self.labels, NAMES, TEMPLATE)
        assert rep.per_seed[0]["accuracy"] == 100.0
        assert rep.per_seed[1]["accuracy"] == pytest.approx(10.0)
        assert rep.mean["accuracy"] == pytest.approx(55.0)

    def test_h_is_mean_of_per_seed(self):
        rep = EvalReport("base_new", {0: {"base": 90.0, "new": 30.0, "h": 45.0}, 1: {"base": 30.0, "new": 90.0, "h": 45.0}})
        assert rep.mean["h"] == 45.0
        assert harmonic_mean(rep.mean["base"], rep.mean["new"]) == 60.0


class TestFormats:
    def report(self):
        return EvalReport("base_new", {s: {"base": 80.0 + s / 3, "new": 70.0 - s / 7, "h": harmonic_mean(80.0 + s / 3, 70.0 - s / 7)} for s in range(3)}, {"dataset": "toy"})

    def test_json_csv_json(self, tmp_path):
        rep = self.report()
        emit_report(rep, tmp_path / "r.json")
        back = load_report(tmp_path / "r.json")
        emit_report(back, tmp_path / "r.csv", "csv")
        again = load_report(tmp_path / "r.csv")
        assert again.per_seed == rep.per_seed
        assert again.mean == rep.mean

    def test_csv_recomputes_means(self):
        rep = self.report()
        rows = list(csv.DictReader(io.StringIO(report_to_csv(rep))))
        assert len(rows) == 3
        assert np.mean([float(r["h"]) for r in rows]) == pytest.approx(rep.mean["h"], abs=1e-12)

    def test_json_contents(self, tmp_path):
        emit_report(self.report(), tmp_path / "r.json")
        d = json.loads((tmp_path / "r.json").read_text())
        assert set(d["per_seed"]) == {"0", "1", "2"}
        assert d["protocol"] == "base_new"

    def test_series(self, tmp_path):
        rows = [(k, m, s, 50.0 + k) for k in (1, 2, 4, 8, 16) for m in ("ours", "baseline") for s in (0, 1, 2)]
        emit_report(rows, tmp_path / "s.csv", "series")
        parsed = list(csv.DictReader(io.StringIO((tmp_path / "s.csv").read_text())))
        assert len(parsed) == 30
        assert {int(r["k_shots"]) for r in parsed} == {1, 2, 4, 8, 16}
        assert list(parsed[0]) == ["k_shots", "method", "seed", "accuracy"]
        assert shots_series(rows) == shots_series(list(reversed(rows)))

    def test_unknown_format(self, tmp_path):
        with pytest.raises(InputError):
            emit_report(self.report(), tmp_path / "x", "xml")

    def test_bad_schema(self):
        with pytest.raises(InputError):
            EvalReport.from_dict({"schema_version": "v0", "protocol": "default", "per_seed": {}})

    def test_empty_csv(self):
        with pytest.raises(InputError):
            report_from_csv("protocol,seed,accuracy\n")
