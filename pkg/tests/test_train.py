import contextlib
import math
import warnings

import numpy as np
import pytest


@contextlib.contextmanager
def _nowarn():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        yield

from compandq.nn import Param, build_cnn4
from compandq.quantizer import ContractViolation
from compandq.train import (
    SGDNesterov,
    TrainConfig,
    evaluate,
    load_dataset,
    lr_schedule,
    parse_config_file,
    read_metrics,
    sgd_nesterov_step,
    train_loop,
)


class TestSchedule:
    def test_warmup_floor_at_step_zero(self):
        assert lr_schedule(0, 100, 10, 0.4, warmup_floor=1e-4) == 1e-4

    def test_no_warmup_starts_at_base(self):
        assert lr_schedule(0, 100, 0, 0.4) == pytest.approx(0.4)

    def test_cosine_tail_reaches_zero(self):
        lr = lr_schedule(99, 100, 0, 0.4)
        assert lr == pytest.approx(0.5 * 0.4 * (1 + math.cos(math.pi * 0.99)))
        assert lr < 0.001

    def test_midpoint_is_half(self):
        assert lr_schedule(50, 100, 0, 0.4) == pytest.approx(0.2)

    def test_linear_ramp(self):
        lo, hi = 1e-4, 0.4
        assert lr_schedule(5, 100, 10, hi, lo) == pytest.approx(lo + (hi - lo) / 2)

    def test_domain(self):
        with pytest.raises(ContractViolation):
            lr_schedule(100, 100, 0, 0.4)
        with pytest.raises(ContractViolation):
            lr_schedule(-1, 100, 0, 0.4)


class TestNesterov:
    def test_zero_grad_zero_velocity_unchanged(self):
        p, v = sgd_nesterov_step(1.5, 0.0, 0.0, lr=0.1)
        assert (p, v) == (1.5, 0.0)

    def test_one_step_from_rest(self):
        lr, mu, g = 0.1, 0.9, 2.0
        p, v = sgd_nesterov_step(0.0, g, 0.0, lr=lr, momentum=mu)
        assert p == pytest.approx(-lr * (1 + mu) * g)
        assert v == pytest.approx(g)

    def test_two_step_recursion(self):
        lr, mu, g = 0.1, 0.9, 1.0
        p, v = sgd_nesterov_step(0.0, g, 0.0, lr=lr, momentum=mu)
        p, v = sgd_nesterov_step(p, g, v, lr=lr, momentum=mu)
        # v2 = mu*g + g; p2 = p1 - lr*(g + mu*v2)
        assert v == pytest.approx(mu * g + g)
        assert p == pytest.approx(-lr * (1 + mu) * g - lr * (g + mu * (mu + 1) * g))

    def test_weight_decay_only_on_decay_params(self):
        w = Param("w", np.ones(3), group="w", decay=True)
        a = Param("a", np.ones(3), group="q", decay=False)
        for p in (w, a):
            p.grad = np.zeros(3, dtype=np.float32)
        opt = SGDNesterov([w, a], momentum=0.0, weight_decay=0.5)
        opt.step([w, a], {"w": 1.0, "q": 1.0})
        np.testing.assert_allclose(w.val, 0.5)  # decayed
        np.testing.assert_allclose(a.val, 1.0)  # untouched

    def test_group_learning_rates(self):
        w = Param("w", np.zeros(2), group="w", decay=False)
        q = Param("q", np.zeros(2), group="q", decay=False)
        w.grad = np.ones(2, dtype=np.float32)
        q.grad = np.ones(2, dtype=np.float32)
        opt = SGDNesterov([w, q], momentum=0.0, weight_decay=0.0)
        opt.step([w, q], {"w": 1.0, "q": 0.1})
        np.testing.assert_allclose(w.val, -1.0)
        np.testing.assert_allclose(q.val, -0.1, rtol=1e-6)


class TestConfig:
    def test_file_parsing(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text(
            "# a comment\nepochs = 5\nlr_weights = 0.2  # inline\n"
            "method = uniform\nlwn = false\nchannels = 4/8/12\n"
        )
        cfg = TrainConfig.from_sources(parse_config_file(path))
        assert cfg.epochs == 5
        assert cfg.lr_weights == 0.2
        assert cfg.method == "uniform"
        assert cfg.lwn is False
        assert cfg.channels == (4, 8, 12)

    def test_unknown_key_rejected(self):
        with pytest.raises(ContractViolation):
            TrainConfig.from_sources({"not_a_key": 1})

    def test_malformed_line(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("epochs 5\n")
        with pytest.raises(ContractViolation):
            parse_config_file(path)

    def test_overrides_beat_file(self):
        cfg = TrainConfig.from_sources({"epochs": "3"}, {"epochs": 7})
        assert cfg.epochs == 7

    def test_defaults_follow_recipe(self):
        cfg = TrainConfig()
        assert cfg.momentum == 0.9
        assert cfg.alpha_w == 3.0
        assert cfg.alpha_a == 8.0
        assert cfg.intervals == 16
        assert cfg.outer_bits == 8


def synth_cfg(tmp_path, **kw):
    base = dict(dataset="synth", epochs=1, batch_size=64, lr_weights=0.05,
                lr_quant=0.01, channels=(4, 6, 8), classes=5, seed=0,
                w_bits=2, a_bits=2, out_dir=str(tmp_path / "run"))
    base.update(kw)
    cfg = TrainConfig(**base)
    return cfg


class TestTrainLoop:
    def test_smoke_loss_decreases(self, tmp_path):
        cfg = synth_cfg(tmp_path, epochs=2)
        model, metrics = train_loop(cfg)
        train_rows = [m for m in metrics if m["split"] == "train"]
        assert train_rows[-1]["loss"] < train_rows[0]["loss"]
        assert (tmp_path / "run" / "metrics.csv").exists()
        assert (tmp_path / "run" / "best.npz").exists()
        back = read_metrics(tmp_path / "run" / "metrics.csv")
        assert back[0].keys() == {"epoch", "split", "loss", "top1", "lr_w",
                                  "lr_q", "alphas"}

    def test_seed_reproducibility_bitwise(self, tmp_path):
        runs = []
        for i in range(2):
            cfg = synth_cfg(tmp_path, out_dir=str(tmp_path / f"r{i}"))
            _, metrics = train_loop(cfg)
            runs.append([(m["loss"], m["top1"]) for m in metrics])
        assert runs[0] == runs[1]

    def test_quant_params_receive_quant_lr_only(self, tmp_path):
        cfg = synth_cfg(tmp_path, lr_quant=0.0, epochs=1, method="lcq",
                        w_bits=3, a_bits=3)
        model, _ = train_loop(cfg)
        for p in model.params():
            if p.group == "q":
                if p.name.endswith(".alpha"):
                    assert float(p.val) in (3.0, 8.0)
                else:
                    assert not p.val.any()

    def test_theta_zero_init_matches_uniform_at_step0(self, tmp_path):
        losses = {}
        for method in ("lcq", "uniform"):
            cfg = synth_cfg(tmp_path, method=method, w_bits=3, a_bits=3,
                            lr_weights=0.0, lr_quant=0.0, warmup_epochs=0,
                            out_dir=str(tmp_path / method))
            _, metrics = train_loop(cfg)
            losses[method] = [m["loss"] for m in metrics
                              if m["split"] == "train"]
        assert losses["lcq"] == losses["uniform"]

    def test_init_from_checkpoint(self, tmp_path):
        cfg = synth_cfg(tmp_path, method="fp", out_dir=str(tmp_path / "fp"))
        train_loop(cfg)
        cfg2 = synth_cfg(tmp_path, method="lcq",
                         out_dir=str(tmp_path / "q"))
        model, metrics = train_loop(cfg2,
                                    init_from=str(tmp_path / "fp" / "best.npz"))
        assert metrics[-1]["top1"] > 50  # pretrained start learns fast

    def test_resume_restores_epoch(self, tmp_path):
        cfg = synth_cfg(tmp_path, epochs=2)
        train_loop(cfg)
        cfg3 = synth_cfg(tmp_path, epochs=3, out_dir=cfg.out_dir)
        _, metrics = train_loop(cfg3, resume=str(tmp_path / "run" / "last.npz"))
        assert [m["epoch"] for m in metrics if m["split"] == "train"] == [2]

    def test_nan_abort_dumps_quantizers(self, tmp_path):
        cfg = synth_cfg(tmp_path, lr_weights=1e9, warmup_epochs=0, epochs=1,
                        method="lcq", w_bits=3, a_bits=3)
        with pytest.raises(RuntimeError, match="non-finite"), \
                np.errstate(over="ignore", invalid="ignore"), _nowarn():
            train_loop(cfg)
        assert (tmp_path / "run" / "diagnostic.txt").exists()
        text = (tmp_path / "run" / "diagnostic.txt").read_text()
        assert "activation" in text

    def test_calibration_flag_moves_alpha(self, tmp_path):
        cfg = synth_cfg(tmp_path, method="lcq", w_bits=3, a_bits=3,
                        calibrate_alpha=True, lr_weights=0.0, lr_quant=0.0,
                        epochs=1)
        model, _ = train_loop(cfg)
        alphas = [float(p.val) for p in model.params()
                  if p.name.endswith(".alpha")]
        assert all(a not in (3.0, 8.0) for a in alphas)

    def test_evaluate_matches_metrics(self, tmp_path):
        cfg = synth_cfg(tmp_path)
        model, metrics = train_loop(cfg)
        test_ds = load_dataset(cfg, "test")
        loss, top1 = evaluate(model, test_ds)
        row = [m for m in metrics if m["split"] == "test"][-1]
        assert loss == pytest.approx(row["loss"], abs=1e-9)
        assert top1 == pytest.approx(row["top1"], abs=1e-12)
