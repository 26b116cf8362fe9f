import json
import math
from dataclasses import replace

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from disef.data import Batch, ShotSpec, make_loader, sample_k_shot
from disef.errors import ConfigError, InputError, TrainingDivergedError
from disef.lora import LoRAConfig, inject_adapters, trainable_parameters
from disef.toydata import make_toy_dataset
from disef.trainer import (
    LR_GRID,
    RunConfig,
    TrainState,
    batch_loss,
    combined_loss,
    cosine_lr,
    cross_entropy,
    expand_grid,
    grid_search,
    train,
)
from disef.vlm_core import DualEncoder

TOY = make_toy_dataset(None, 3, train_per_class=8, test_per_class=4)


def setup(dtype=torch.float64, r=2, dropout=0.0, seed=0):
    model = DualEncoder.toy(list(TOY.class_names) + [TOY.prompt_template], seed=seed, dtype=dtype)
    reg = inject_adapters(model, LoRAConfig(r=r, alpha=2 * r, dropout=dropout, seed=seed))
    return model, reg


def quick_cfg(**kw):
    base = dict(max_steps=6, batch_size=8, lr=2.0**-8, vision_r=2, vision_alpha=4, text_r=2, text_alpha=4, vision_dropout=0.0, text_dropout=0.0, prompt_template=TOY.prompt_template)
    base.update(kw)
    return RunConfig(**base)


def support():
    return sample_k_shot(TOY, ShotSpec(4, 0))


class Syn:
    def __init__(self, label, image):
        self.label, self.image = label, image


def synthetic_items(n_per_class=4, seed=0):
    rng = np.random.default_rng(seed)
    return [Syn(c, rng.standard_normal((3, 32, 32)).astype(np.float32)) for c in range(3) for _ in range(n_per_class)]


def oracle_ce(logits, target):
    m = max(logits)
    lse = m + math.log(math.fsum(math.exp(x - m) for x in logits))
    return -math.fsum(t * (x - lse) for t, x in zip(target, logits))


class TestCrossEntropy:
    def test_uniform_logits(self):
        for n in (2, 5, 37):
            loss = cross_entropy(torch.zeros(1, n, dtype=torch.float64), torch.eye(n, dtype=torch.float64)[:1])
            assert loss.item() == pytest.approx(math.log(n), abs=1e-12)

    def test_soft_targets_on_uniform_logits(self):
        t = torch.tensor([[0.91, 0.03, 0.03, 0.03]], dtype=torch.float64)
        assert cross_entropy(torch.zeros(1, 4, dtype=torch.float64), t).item() == pytest.approx(math.log(4), abs=1e-12)

    def test_matches_oracle(self, rng):
        logits = rng.standard_normal((20, 6)) * 30
        target = rng.dirichlet(np.ones(6), 20)
        got = cross_entropy(torch.from_numpy(logits), torch.from_numpy(target), reduction="none").numpy()
        expected = [oracle_ce(list(l), list(t)) for l, t in zip(logits, target)]
        np.testing.assert_allclose(got, expected, rtol=1e-10, atol=1e-10)

    def test_invalid_target(self):
        with pytest.raises(InputError):
            cross_entropy(torch.zeros(1, 3), torch.tensor([[0.5, 0.2, 0.2]]))
        with pytest.raises(InputError):
            cross_entropy(torch.zeros(1, 3), torch.tensor([[1.5, -0.5, 0.0]]))
        with pytest.raises(InputError):
            cross_entropy(torch.zeros(2, 3), torch.ones(2, 2) / 2)


class TestCombinedLoss:
    def test_examples(self):
        assert combined_loss(2.0, 4.0, 0.8) == pytest.approx(2.4)
        assert combined_loss(2.0, 4.0, 1.0) == 2.0
        assert combined_loss(2.0, 4.0, 0.5) == 3.0
        assert combined_loss(2.0, None, 0.7) == 2.0

    @pytest.mark.parametrize("lam", [0.49, 1.01, -1.0])
    def test_range(self, lam):
        with pytest.raises(ConfigError):
            combined_loss(1.0, 1.0, lam)

    @given(st.floats(0, 50), st.floats(0, 50), st.floats(0.5, 1.0), st.floats(0.5, 1.0))
    def test_monotone_and_bounded(self, lr, ls, a, b):
        la, lb = sorted((a, b))
        va, vb = combined_loss(lr, ls, la), combined_loss(lr, ls, lb)
        assert min(lr, ls) - 1e-9 <= va <= max(lr, ls) + 1e-9
        # moving weight toward the real term moves the value toward l_real
        assert abs(vb - lr) <= abs(va - lr) + 1e-9


class TestCosineLr:
    def test_values(self):
        assert cosine_lr(0, 100, 0.1) == 0.1
        assert cosine_lr(50, 100, 0.1) == pytest.approx(0.05)
        assert cosine_lr(100, 100, 0.1) == pytest.approx(0.0, abs=1e-15)

    def test_monotone(self):
        vals = [cosine_lr(s, 40, 1.0) for s in range(41)]
        assert all(a >= b for a, b in zip(vals, vals[1:]))

    def test_bad_args(self):
        with pytest.raises(ConfigError):
            cosine_lr(0, 0, 0.1)
        with pytest.raises(InputError):
            cosine_lr(5, 4, 0.1)


class TestRunConfig:
    @pytest.mark.parametrize(
        "kw,field",
        [
            ({"lam": 0.4}, "lam"),
            ({"batch_size": 0}, "batch_size"),
            ({"label_smoothing": 1.0}, "label_smoothing"),
            ({"noising_step": 25}, "noising_step"),
            ({"vision_r": 0}, "vision_lora"),
            ({"grid_lr": True, "lr": 0.003}, "lr"),
            ({"prompt_template": "no slot"}, "prompt_template"),
        ],
    )
    def test_invalid(self, kw, field):
        with pytest.raises(ConfigError, match=field):
            RunConfig(**kw)

    def test_grid_lr_accepts_powers(self):
        for lr in LR_GRID:
            RunConfig(lr=lr, grid_lr=True)

    def test_dict_round_trip(self):
        cfg = RunConfig(lam=0.7, mixup=0.1, lora_targets=("vision",))
        assert RunConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            RunConfig.from_dict({"learning_rate": 0.1})


def test_train_state_round_trip(tmp_path):
    s = TrainState(step=3, epoch=1, best_metric=0.5, best_step=2, optimizer={"a": 1}, history=[{"step": 0}])
    s.save(tmp_path / "s.pt")
    assert TrainState.load(tmp_path / "s.pt") == s


class TestTrain:
    def test_lr_zero_changes_nothing(self):
        model, reg = setup()
        before = {k: v.clone() for k, v in model.state_dict().items()}
        train(model, reg, make_loader(support(), [], 4), TOY.class_names, quick_cfg(lr=0.0, weight_decay=0.0))
        for k, v in model.state_dict().items():
            assert torch.equal(v, before[k]), k

    def test_base_weights_bit_identical(self):
        model, reg = setup()
        frozen = {n: p.clone() for n, p in model.named_parameters() if "lora_" not in n}
        result = train(model, reg, make_loader(support(), synthetic_items(), 6), TOY.class_names, quick_cfg())
        assert len(result.losses) == 6
        for n, p in model.named_parameters():
            if "lora_" not in n:
                assert torch.equal(p, frozen[n]), n
        assert any(torch.count_nonzero(a.lora_B) for _, a in reg)

    def test_deterministic(self):
        runs = []
        for _ in range(2):
            model, reg = setup(dropout=0.1)
            cfg = quick_cfg(vision_dropout=0.1, text_dropout=0.1, mixup=0.2, label_smoothing=0.1)
            res = train(model, reg, make_loader(support(), synthetic_items(), 6, seed=3), TOY.class_names, cfg)
            runs.append((res.losses, {k: v.clone() for k, v in reg.state_dict().items()}))
        assert runs[0][0] == runs[1][0]
        assert all(torch.equal(runs[0][1][k], runs[1][1][k]) for k in runs[0][1])

    def test_nan_raises_diverged(self, tmp_path):
        model, reg = setup()
        sup = support()
        sup.samples[0] = replace(sup.samples[0], image=np.full((3, 32, 32), np.nan, np.float32))
        with pytest.raises(TrainingDivergedError) as info:
            train(model, reg, make_loader(sup, [], 16), TOY.class_names, quick_cfg(), out_dir=tmp_path)
        assert info.value.snapshot_path.exists()

    def test_outputs_and_log(self, tmp_path):
        model, reg = setup()
        train(model, reg, make_loader(support(), synthetic_items(), 6), TOY.class_names, quick_cfg(max_steps=3), out_dir=tmp_path)
        rows = [json.loads(x) for x in (tmp_path / "train_log.jsonl").read_text().splitlines()]
        assert [r["step"] for r in rows] == [0, 1, 2]
        assert set(rows[0]) == {"step", "lr", "L_real", "L_syn", "L_total"}
        assert (tmp_path / "adapters.npz").exists() and (tmp_path / "train_state.pt").exists()

    def test_validation_keeps_best(self):
        model, reg = setup()
        scores = iter([0.2, 0.9, 0.1])
        snapshots = []

        def validate(m):
            snapshots.append({k: v.clone() for k, v in reg.state_dict().items()})
            return next(scores)

        res = train(model, reg, make_loader(support(), [], 6), TOY.class_names, quick_cfg(max_steps=None, epochs=3), validate=validate)
        assert res.state.best_metric == 0.9
        for k, v in reg.state_dict().items():
            assert torch.equal(v, snapshots[1][k])

    def test_lambda_one_ignores_synthetic(self):
        # With lam = 1 synthetic items are dropped before the loss, so the
        # trajectory depends on real batches only; compare against identical real batches.
        real = make_loader(support(), [], 4, seed=5)
        batches = list(real.epoch(0))

        def real_then_syn(epoch):
            rng = np.random.default_rng(epoch)
            for b in batches:
                n = 3
                syn_imgs = torch.from_numpy(rng.standard_normal((n, 3, 32, 32)).astype(np.float32))
                yield Batch(torch.cat([b.images, syn_imgs]), torch.cat([b.labels, torch.tensor([0, 1, 2])]), torch.cat([b.synthetic, torch.ones(n, dtype=torch.bool)]))

        out = []
        for source in (lambda e: iter(batches), real_then_syn):
            model, reg = setup()
            steps = []
            train(model, reg, source, TOY.class_names, quick_cfg(lam=1.0, max_steps=len(batches)), callback=lambda s, r: steps.append({k: v.clone() for k, v in r.state_dict().items()}))
            out.append(steps)
        assert len(out[0]) == len(out[1]) == len(batches)
        for a, b in zip(*out):
            assert all(torch.equal(a[k], b[k]) for k in a)


def finite_difference_check(n_entries=20, seed=0):
    """Relative error of analytic vs central-difference gradients on adapter entries."""
    model, reg = setup(dtype=torch.float64)
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for _, a in reg:
            a.lora_B.copy_(torch.randn(a.lora_B.shape, generator=g, dtype=torch.float64) * 0.1)
    model.train()
    cfg = quick_cfg(logit_scale=10.0)
    loader = make_loader(support(), synthetic_items(1), 12, seed=seed)
    batch = next(iter(loader.epoch(0)))
    rng = np.random.default_rng(0)

    def loss_value():
        return batch_loss(model, batch, TOY.class_names, cfg, rng)[0]

    loss = loss_value()
    params = trainable_parameters(reg)
    for p in params:
        p.grad = None
    loss.backward()
    frozen_ok = all(p.grad is None or not p.grad.any() for n, p in model.named_parameters() if "lora_" not in n)
    picker = np.random.default_rng(seed)
    errors = []
    h = 1e-6
    for _ in range(n_entries):
        p = params[int(picker.integers(len(params)))]
        idx = tuple(int(picker.integers(s)) for s in p.shape)
        with torch.no_grad():
            orig = p[idx].item()
            p[idx] = orig + h
            up = loss_value().item()
            p[idx] = orig - h
            down = loss_value().item()
            p[idx] = orig
        fd = (up - down) / (2 * h)
        an = p.grad[idx].item()
        errors.append(abs(fd - an) / max(abs(fd), abs(an), 1e-8))
    return errors, frozen_ok


def test_finite_difference_gradients():
    errors, frozen_ok = finite_difference_check(20)
    assert frozen_ok
    assert max(errors) <= 1e-3


class TestGridSearch:
    def test_single_point(self):
        calls = []
        out = grid_search(RunConfig(), {"lr": [2.0**-10]}, lambda c: calls.append(c) or 1.0)
        assert len(calls) == 1 and out[0][0].lr == 2.0**-10

    def test_dedup(self):
        calls = []
        grid_search(RunConfig(), {"lr": [2.0**-10, 2.0**-10], "batch_size": [16]}, lambda c: calls.append(c) or 0.0)
        assert len(calls) == 1

    def test_rerun_oracle(self):
        def score(c):
            return -abs(math.log2(c.lr) + 11) - abs(c.batch_size - 32) / 100

        space = {"lr": list(LR_GRID[:5]), "batch_size": [16, 32, 64]}
        ranked = grid_search(RunConfig(), space, score)
        assert len(ranked) == 15
        best, best_score = ranked[0]
        assert (best.lr, best.batch_size) == (2.0**-11, 32)
        assert best_score == score(best)

    def test_tie_break(self):
        ranked = grid_search(RunConfig(), {"lr": [2.0**-9, 2.0**-12], "batch_size": [64, 16]}, lambda c: 1.0)
        assert (ranked[0][0].lr, ranked[0][0].batch_size) == (2.0**-12, 16)

    def test_empty(self):
        with pytest.raises(ConfigError):
            grid_search(RunConfig(), {}, lambda c: 0.0)
        with pytest.raises(ConfigError):
            grid_search(RunConfig(), {"lr": []}, lambda c: 0.0)
        with pytest.raises(ConfigError):
            expand_grid(RunConfig(), {"nope": [1]})

    def test_sequential(self):
        calls = []

        def score(c):
            calls.append((c.lr, c.batch_size))
            return -abs(c.batch_size - 64) - abs(math.log2(c.lr) + 9)

        ranked = grid_search(RunConfig(), {"batch_size": [16, 64], "lr": [2.0**-9, 2.0**-12]}, score, mode="sequential")
        assert ranked[0][0].batch_size == 64 and ranked[0][0].lr == 2.0**-9
        # second axis starts from the best batch size found on the first
        assert all(bs == 64 for lr, bs in calls[2:])
        assert len(calls) == len(set(calls))
