"""Training loop: SGD with Nesterov momentum, cosine decay with linear
warm-up, and separate learning-rate groups for weights and quantizer
parameters (the latter without weight decay).

Initialization policy: clip thresholds start at 3.0 for weights and 8.0 for
activations, companding parameters at zero, which makes the first forward
pass identical to the uniform-quantization configuration.  Quantizer
gradients are accumulated by plain summation over each tensor, so the
quantizer learning rate is interpreted against unnormalized sums.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass

import numpy as np

from .data import (Dataset, augment, batches, load_cifar10, load_mnist,
                   synth_classification)
from .nn import ActQuant, Model, build_cnn4, load_checkpoint, save_checkpoint
from .quantizer import ContractViolation
from .weightnorm import standardize, weight_stats

__all__ = [
    "TrainConfig",
    "parse_config_file",
    "lr_schedule",
    "SGDNesterov",
    "sgd_nesterov_step",
    "evaluate",
    "train_loop",
    "load_dataset",
    "write_metrics",
    "read_metrics",
    "METRICS_FIELDS",
]

METRICS_FIELDS = ["epoch", "split", "loss", "top1", "lr_w", "lr_q", "alphas"]

# clip thresholds must stay strictly positive whatever the update did
ALPHA_FLOOR = 1e-3


@dataclass
class TrainConfig:
    epochs: int = 3
    batch_size: int = 100
    lr_weights: float = 0.04
    lr_quant: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 1e-4
    warmup_epochs: float = 0.0
    warmup_floor: float = 1e-4
    seed: int = 0
    # model
    w_bits: int = 2
    a_bits: int = 2
    edge_bits: int = 8
    intervals: int = 16
    outer_bits: int = 8
    method: str = "lcq"  # lcq | uniform | lcq-no-lwn | fp
    lwn: bool = True
    alpha_w: float = 3.0
    alpha_a: float = 8.0
    channels: tuple = (8, 16, 32)
    classes: int = 10
    in_channels: int = 1
    image_hw: int = 0  # 0 = inferred from the dataset
    # data
    dataset: str = "mnist"  # mnist | synth
    data_root: str = ""
    train_limit: int = 0  # 0 = full training split
    mnist_mean: float = 0.1307
    mnist_std: float = 0.3081
    augment: bool = False
    augment_flip: bool = True
    # extras
    calibrate_alpha: bool = False  # percentile init; not part of the recipe
    out_dir: str = "runs/default"

    def resolved_image_hw(self) -> int:
        if self.image_hw:
            return self.image_hw
        return {"mnist": 28, "synth": 8, "cifar10": 32}.get(self.dataset, 28)

    def model_config(self) -> dict:
        return {
            "arch": "cnn4",
            "image_hw": self.resolved_image_hw(),
            "in_channels": self.in_channels,
            "channels": list(self.channels),
            "classes": self.classes,
            "w_bits": self.w_bits,
            "a_bits": self.a_bits,
            "edge_bits": self.edge_bits,
            "method": self.method,
            "lwn": self.lwn,
            "intervals": self.intervals,
            "outer_bits": self.outer_bits,
            "alpha_w": self.alpha_w,
            "alpha_a": self.alpha_a,
        }

    @classmethod
    def from_sources(cls, file_values=None, overrides=None) -> "TrainConfig":
        cfg = cls()
        for src in (file_values or {}), (overrides or {}):
            for key, val in src.items():
                if val is None:
                    continue
                if not hasattr(cfg, key):
                    raise ContractViolation(f"unknown config key {key!r}")
                cur = getattr(cfg, key)
                if isinstance(cur, bool):
                    val = _parse_bool(val)
                elif isinstance(cur, int):
                    val = int(val)
                elif isinstance(cur, float):
                    val = float(val)
                elif isinstance(cur, tuple):
                    if isinstance(val, str):
                        val = tuple(int(v) for v in val.split("/"))
                    else:
                        val = tuple(val)
                setattr(cfg, key, val)
        return cfg


def _parse_bool(val):
    if isinstance(val, bool):
        return val
    if str(val).lower() in ("1", "true", "yes", "on"):
        return True
    if str(val).lower() in ("0", "false", "no", "off"):
        return False
    raise ContractViolation(f"cannot parse boolean from {val!r}")


def parse_config_file(path) -> dict:
    """``key = value`` per line; blank lines and #-comments ignored."""
    values = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ContractViolation(f"{path}:{lineno}: expected key = value")
            key, val = (part.strip() for part in line.split("=", 1))
            values[key] = val
    return values


def lr_schedule(step, total_steps, warmup_steps, base_lr, warmup_floor=1e-4):
    """Linear ramp from the warmup floor, then cosine decay to zero without
    restarts."""
    if total_steps <= 0:
        raise ContractViolation("total_steps must be positive")
    if step < 0 or step >= total_steps:
        raise ContractViolation(f"step {step} outside [0, {total_steps})")
    if warmup_steps > 0 and step < warmup_steps:
        frac = step / warmup_steps
        return warmup_floor + (base_lr - warmup_floor) * frac
    denom = max(total_steps - warmup_steps, 1)
    progress = (step - warmup_steps) / denom
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * progress))


class SGDNesterov:
    """Velocity form with lookahead gradient:

        v <- momentum * v + g
        p <- p - lr * (g + momentum * v)

    where g includes weight decay for parameters that opted in.  One step
    from rest moves by -lr * (1 + momentum) * g.
    """

    def __init__(self, params, momentum=0.9, weight_decay=0.0):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {p.name: np.zeros_like(p.val) for p in params}

    def step(self, params, lr_by_group):
        mu = self.momentum
        for p in params:
            g = p.grad
            if self.weight_decay and p.decay:
                g = g + p.val.dtype.type(self.weight_decay) * p.val
            v = self.velocity[p.name]
            v *= p.val.dtype.type(mu)
            v += g
            lr = p.val.dtype.type(lr_by_group[p.group])
            p.val -= lr * (g + p.val.dtype.type(mu) * v)

    def state_arrays(self) -> dict:
        return {f"vel/{name}": v for name, v in self.velocity.items()}

    def load_state_arrays(self, arrays):
        for key, v in arrays.items():
            if key.startswith("vel/"):
                name = key[len("vel/"):]
                if name in self.velocity:
                    self.velocity[name] = v.copy()


def sgd_nesterov_step(param_value, grad, velocity, lr, momentum=0.9,
                      weight_decay=0.0):
    """Single-tensor form of the update; returns (new_value, new_velocity)."""
    g = grad + weight_decay * param_value
    v = momentum * velocity + g
    return param_value - lr * (g + momentum * v), v


def load_dataset(cfg: TrainConfig, split="train") -> Dataset:
    if cfg.dataset == "mnist":
        ds = load_mnist(cfg.data_root or None, split, cfg.mnist_mean,
                        cfg.mnist_std)
    elif cfg.dataset == "cifar10":
        ds = load_cifar10(cfg.data_root or None, split)
    elif cfg.dataset == "synth":
        full = synth_classification(5120, 64, cfg.classes, seed=99)
        if split == "train":
            ds = Dataset(full.images[:4096], full.labels[:4096], "train",
                         full.classes)
        else:
            ds = Dataset(full.images[4096:], full.labels[4096:], "test",
                         full.classes)
    else:
        raise ContractViolation(f"unknown dataset {cfg.dataset!r}")
    if split == "train" and cfg.train_limit and cfg.train_limit < len(ds):
        # deterministic stratified subset
        rng = np.random.default_rng(12345)
        order = rng.permutation(len(ds))
        keep = []
        per_class = cfg.train_limit // ds.classes
        counts = {c: 0 for c in range(ds.classes)}
        for i in order:
            c = int(ds.labels[i])
            if counts[c] < per_class:
                counts[c] += 1
                keep.append(i)
            if len(keep) >= per_class * ds.classes:
                break
        keep = np.sort(np.array(keep))
        ds = Dataset(ds.images[keep], ds.labels[keep], ds.split, ds.classes)
    return ds


def evaluate(model: Model, ds: Dataset, batch_size=500) -> tuple[float, float]:
    """(mean loss, top-1 accuracy in percent) over a dataset."""
    losses = []
    correct = 0
    for xb, yb in batches(ds, batch_size, shuffle=False):
        logits = model.forward(xb, train=False)
        losses.append(model.loss_fn.forward(logits, yb) * len(yb))
        correct += int((logits.argmax(axis=1) == yb).sum())
    return sum(losses) / len(ds), 100.0 * correct / len(ds)


def _calibrate_alpha(model: Model, x):
    """Percentile-based clip initialization (optional; not part of the
    standard recipe, which keeps the fixed 3.0/8.0 values)."""
    for layer in model._walk():
        if getattr(layer, "wq", None) is not None:
            wn = standardize(layer.w.val, weight_stats(layer.w.val))
            layer.wq.alpha.val[...] = np.percentile(np.abs(wn), 99.9)
    h = x
    for layer in model.layers:
        if isinstance(layer, ActQuant) and layer.quant is not None:
            layer.quant.alpha.val[...] = max(
                float(np.percentile(h[h > 0], 99.9)) if np.any(h > 0) else 1.0,
                1e-3,
            )
        h = layer.forward(h, train=True)


def _clamp_alphas(model: Model):
    for p in model.params():
        if p.group == "q" and p.name.endswith(".alpha"):
            np.maximum(p.val, p.dtype.type(ALPHA_FLOOR), out=p.val)


def _dump_diagnostics(model: Model, out_dir, step, loss):
    path = os.path.join(out_dir, "diagnostic.txt")
    with open(path, "w") as fh:
        fh.write(f"aborted at step {step}: loss={loss}\n")
        fh.write(f"alphas: {model.alpha_summary()}\n")
        for rec in model.quantizer_records():
            fh.write(rec + "\n")
    return path


def train_loop(cfg: TrainConfig, model: Model | None = None, init_from=None,
               resume=None, metrics_path=None, quiet=True):
    """Run the optimization loop; returns (model, metrics rows).

    Writes ``metrics.csv``, ``last.npz`` and ``best.npz`` under
    ``cfg.out_dir``.  ``init_from`` loads weights from a checkpoint (e.g. a
    full-precision pretrain); ``resume`` restores optimizer state and epoch.

    Raises RuntimeError (after dumping quantizer state) if the loss goes
    non-finite.
    """
    os.makedirs(cfg.out_dir, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    if model is None:
        model = build_cnn4(cfg.model_config(), seed=cfg.seed)
    start_epoch = 0
    if init_from:
        load_checkpoint(init_from, model)
    train_ds = load_dataset(cfg, "train")
    test_ds = load_dataset(cfg, "test")
    steps_per_epoch = math.ceil(len(train_ds) / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    warmup_steps = int(cfg.warmup_epochs * steps_per_epoch)
    opt = SGDNesterov(model.params(), cfg.momentum, cfg.weight_decay)
    if resume:
        model, opt_state, start_epoch = load_checkpoint(resume, model)
        opt.load_state_arrays(opt_state)
    if cfg.calibrate_alpha and cfg.method != "fp":
        xb0 = train_ds.images[: min(cfg.batch_size, len(train_ds))]
        _calibrate_alpha(model, xb0)

    metrics = []
    best_top1 = -1.0
    step = 0
    for epoch in range(start_epoch, cfg.epochs):
        epoch_loss = 0.0
        correct = 0
        for xb, yb in batches(train_ds, cfg.batch_size, rng, shuffle=True):
            if cfg.augment:
                xb = augment(xb, rng, pad=4, flip=cfg.augment_flip)
            lr_w = lr_schedule(step, total_steps, warmup_steps, cfg.lr_weights,
                               cfg.warmup_floor)
            q_floor = (cfg.warmup_floor * cfg.lr_quant / cfg.lr_weights
                       if cfg.lr_weights > 0 else 0.0)
            lr_q = lr_schedule(step, total_steps, warmup_steps, cfg.lr_quant,
                               q_floor)
            loss = model.loss_and_grads(xb, yb)
            if not math.isfinite(loss):
                path = _dump_diagnostics(model, cfg.out_dir, step, loss)
                raise RuntimeError(
                    f"non-finite loss at step {step}; quantizer state dumped "
                    f"to {path}"
                )
            opt.step(model.params(), {"w": lr_w, "q": lr_q})
            _clamp_alphas(model)
            epoch_loss += loss * len(yb)
            p = model.loss_fn._cache[0]
            correct += int((p.argmax(axis=1) == yb).sum())
            step += 1
        train_loss = epoch_loss / len(train_ds)
        train_top1 = 100.0 * correct / len(train_ds)
        test_loss, test_top1 = evaluate(model, test_ds)
        alphas = model.alpha_summary()
        metrics.append(
            dict(epoch=epoch, split="train", loss=train_loss, top1=train_top1,
                 lr_w=lr_w, lr_q=lr_q, alphas=alphas)
        )
        metrics.append(
            dict(epoch=epoch, split="test", loss=test_loss, top1=test_top1,
                 lr_w=lr_w, lr_q=lr_q, alphas=alphas)
        )
        if not quiet:
            print(f"epoch {epoch}: train {train_loss:.4f}/{train_top1:.2f}% "
                  f"test {test_loss:.4f}/{test_top1:.2f}%")
        save_checkpoint(os.path.join(cfg.out_dir, "last.npz"), model,
                        opt.state_arrays(), epoch + 1)
        if test_top1 > best_top1:
            best_top1 = test_top1
            save_checkpoint(os.path.join(cfg.out_dir, "best.npz"), model,
                            opt.state_arrays(), epoch + 1)

    path = metrics_path or os.path.join(cfg.out_dir, "metrics.csv")
    write_metrics(path, metrics)
    return model, metrics


def write_metrics(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRICS_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def read_metrics(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
