"""Training loop, optimizers, checkpointing and 1-bit model export.

Every step runs: forward with shifts recomputed from their latent
parameters, backward through the straight-through estimators, then a
plain first-order update with one shared learning-rate schedule for all
parameter classes (network weights, shift factors, shift-head weights).
Weight decay applies to convolution/linear weights and shift-head weights
only; decaying the raw shift factors would pull the shifts toward
sigmoid(0) = 0.5 rather than toward "no shift", so they are excluded.

All randomness is derived from (seed, epoch), so resuming from a
checkpoint at epoch k reproduces an uninterrupted run bit for bit
(single-threaded execution assumed).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from math import cos, pi
from pathlib import Path

import numpy as np

from . import autograd as ag
from . import bitkernel as BK
from . import data as D
from . import models as M
from . import packfile as PF
from .autograd import Parameter, SteKind, Tape
from .tensor import softmax_cross_entropy as _sce_ref

DECAYED_KINDS = {"weight", "psi_w"}


class TrainAbort(RuntimeError):
    """Loss became non-finite; carries a sign-distribution dump."""

    def __init__(self, message: str, stats_lines: list[str]):
        super().__init__(message)
        self.stats_lines = stats_lines


@dataclass
class OptimConfig:
    algorithm: str = "adam"          # adam | sgd_momentum
    lr: float = 1e-3
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    schedule: str = "cosine"         # cosine | step
    milestones: tuple[int, ...] = ()
    step_gamma: float = 0.1
    epochs: int = 10
    batch_size: int = 64
    ste: SteKind = SteKind.ClipSte
    seed: int = 0
    latent_clip: bool = True         # clip binary-layer latents to [-1, 1] after updates
    eval_every: int = 1

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be >= 0")


def lr_at(cfg: OptimConfig, epoch: int) -> float:
    if cfg.schedule == "cosine":
        return cfg.lr * 0.5 * (1.0 + cos(pi * epoch / max(1, cfg.epochs)))
    if cfg.schedule == "step":
        drops = sum(1 for m in cfg.milestones if epoch >= m)
        return cfg.lr * (cfg.step_gamma ** drops)
    raise ValueError(f"unknown schedule {cfg.schedule!r}")


class Sgd:
    name = "sgd_momentum"

    def __init__(self, params: list[Parameter], momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {p.name: np.zeros_like(p.data) for p in params}
        self.t = 0

    def step(self, lr: float):
        self.t += 1
        for p in self.params:
            if not p.learnable or p.grad is None:
                continue
            g = p.grad
            if self.weight_decay and p.kind in DECAYED_KINDS:
                g = g + self.weight_decay * p.data
            if self.momentum:
                v = self.velocity[p.name]
                v *= self.momentum
                v += g
                g = v
            p.data -= lr * g

    def state_arrays(self):
        return [(name, "sgd_v", v) for name, v in self.velocity.items()]

    def load_state_arrays(self, items):
        for name, _, arr in items:
            self.velocity[name] = arr.astype(self.velocity[name].dtype)


class Adam:
    name = "adam"

    def __init__(self, params: list[Parameter], beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.m = {p.name: np.zeros_like(p.data) for p in params}
        self.v = {p.name: np.zeros_like(p.data) for p in params}
        self.t = 0

    def step(self, lr: float):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for p in self.params:
            if not p.learnable or p.grad is None:
                continue
            g = p.grad
            if self.weight_decay and p.kind in DECAYED_KINDS:
                g = g + self.weight_decay * p.data
            m = self.m[p.name]
            v = self.v[p.name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)

    def state_arrays(self):
        out = []
        for name in self.m:
            out.append((name, "adam_m", self.m[name]))
            out.append((name, "adam_v", self.v[name]))
        return out

    def load_state_arrays(self, items):
        for name, kind, arr in items:
            slot = self.m if kind == "adam_m" else self.v
            slot[name] = arr.astype(slot[name].dtype)


def make_optimizer(cfg: OptimConfig, model: M.Model):
    params = list(model.params.values())
    if cfg.algorithm == "adam":
        return Adam(params, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)
    if cfg.algorithm == "sgd_momentum":
        return Sgd(params, cfg.momentum, cfg.weight_decay)
    raise ValueError(f"unknown optimizer {cfg.algorithm!r}")


# ---------------------------------------------------------------------------
# evaluation


def evaluate(model: M.Model, dataset: D.Dataset, normalizer: D.Normalizer,
             path: str = "surrogate", batch_size: int = 256) -> tuple[float, float]:
    """Top-1 accuracy and mean loss over the full split; deterministic."""
    if len(dataset) == 0:
        raise ValueError("evaluate on an empty split")
    correct = 0
    loss_sum = 0.0
    for batch in D.batches(dataset, batch_size, shuffle_seed=None, normalizer=normalizer):
        out = M.forward(model, batch.images, mode="eval", path=path)
        logits = out.data if isinstance(out, ag.Var) else out
        loss, _ = _sce_ref(logits.astype(np.float64), batch.labels)
        loss_sum += loss * len(batch.labels)
        correct += int((logits.argmax(axis=1) == batch.labels).sum())
    n = len(dataset)
    return correct / n, loss_sum / n


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: M.Model
    metric_lines: list[str] = field(default_factory=list)
    final_train_acc: float = 0.0
    final_test_acc: float = 0.0


def _signstats_lines(model: M.Model, images: np.ndarray, epoch: int) -> list[str]:
    _, stats = M.forward(model, images, mode="eval", path="surrogate", collect_stats=True)
    return [f"epoch={epoch} layer={name} {st.as_kv()}" for name, st in stats.items()]


def train(model: M.Model, train_ds: D.Dataset, test_ds: D.Dataset | None,
          cfg: OptimConfig, normalizer: D.Normalizer | None = None,
          augment_config: D.AugmentConfig | None = None,
          out_dir: Path | None = None, start_epoch: int = 0,
          optimizer=None, metric_lines: list[str] | None = None,
          log_fn=None, stop_epoch: int | None = None) -> TrainResult:
    """Run the optimization loop; returns the model plus the metric log.

    Resume by passing start_epoch/optimizer/metric_lines from a loaded
    checkpoint; with the same seeds the result is bit-identical to an
    uninterrupted run. stop_epoch halts early without shortening the
    learning-rate schedule (interruption, not a shorter run).
    """
    normalizer = normalizer or D.Normalizer.fit(train_ds)
    if augment_config is None:
        augment_config = D.AugmentConfig.for_dataset(train_ds.kind)
    optimizer = optimizer or make_optimizer(cfg, model)
    lines = metric_lines if metric_lines is not None else []
    result = TrainResult(model=model, metric_lines=lines)

    last_epoch = cfg.epochs if stop_epoch is None else min(stop_epoch, cfg.epochs)
    for epoch in range(start_epoch, last_epoch):
        lr = lr_at(cfg, epoch)
        run_loss, run_correct, run_count = 0.0, 0, 0
        for batch in D.batches(train_ds, cfg.batch_size, shuffle_seed=cfg.seed,
                               normalizer=normalizer, augment_config=augment_config,
                               epoch=epoch):
            for p in model.params.values():
                p.zero_grad()
            with Tape() as tape:
                logits = M.forward(model, batch.images, mode="train", path="surrogate")
                loss = ag.softmax_cross_entropy(logits, batch.labels)
                loss_val = float(loss.data)
                if not np.isfinite(loss_val):
                    stats = _signstats_lines(model, batch.images, epoch)
                    raise TrainAbort(
                        f"non-finite loss at epoch {epoch} step {batch.step}", stats)
                tape.backward(loss)
            optimizer.step(lr)
            if cfg.latent_clip:
                for p in model.params.values():
                    if p.binary_latent:
                        np.clip(p.data, -1.0, 1.0, out=p.data)
            run_loss += loss_val * len(batch.labels)
            run_correct += int((logits.data.argmax(axis=1) == batch.labels).sum())
            run_count += len(batch.labels)

        train_acc = run_correct / run_count
        lines.append(
            f"epoch={epoch} split=train loss={run_loss / run_count:.6f} "
            f"acc={train_acc:.4f} lr={lr:.6g}")
        result.final_train_acc = train_acc

        if test_ds is not None and (epoch + 1) % cfg.eval_every == 0:
            acc, tloss = evaluate(model, test_ds, normalizer)
            lines.append(f"epoch={epoch} split=test loss={tloss:.6f} acc={acc:.4f}")
            result.final_test_acc = acc
        probe = next(iter(D.batches(train_ds, min(64, cfg.batch_size), shuffle_seed=None,
                                    normalizer=normalizer)))
        lines.extend(_signstats_lines(model, probe.images, epoch))
        if log_fn is not None:
            log_fn(lines)
        if out_dir is not None:
            save_checkpoint(Path(out_dir) / "last.ckpt", model, optimizer, cfg,
                            epoch + 1, lines)
    return result


# ---------------------------------------------------------------------------
# checkpointing


def save_checkpoint(path: Path, model: M.Model, optimizer, cfg: OptimConfig,
                    next_epoch: int, metric_lines: list[str]):
    params = [(p.name, p.kind, p.data) for p in model.params.values()]
    bn_items = []
    for name, st in model.bn_states.items():
        bn_items.append((f"{name}.running_mean", "bn_rm", st.running_mean))
        bn_items.append((f"{name}.running_var", "bn_rv", st.running_var))
    opt_items = optimizer.state_arrays()
    prog = json.dumps({
        "next_epoch": next_epoch,
        "opt_t": optimizer.t,
        "optimizer": optimizer.name,
        "seed": cfg.seed,
        "ste": cfg.ste.value,
        "rng_scheme": "counter-based: all randomness derived from (seed, epoch)",
    }).encode()
    cfg_blob = json.dumps(_cfg_to_dict(cfg)).encode()
    sections = [
        (b"MSPC", model.spec.to_text().encode()),
        (b"MCFG", cfg_blob),
        (b"PRMS", PF.pack_named_arrays(params)),
        (b"BNST", PF.pack_named_arrays(bn_items)),
        (b"OPTS", PF.pack_named_arrays(opt_items)),
        (b"PROG", prog),
        (b"METR", "\n".join(metric_lines).encode()),
    ]
    PF.write_sections(Path(path), PF.CHECKPOINT_MAGIC, sections)


def _cfg_to_dict(cfg: OptimConfig) -> dict:
    d = dict(cfg.__dict__)
    d["ste"] = cfg.ste.value
    d["milestones"] = list(cfg.milestones)
    return d


def _cfg_from_dict(d: dict) -> OptimConfig:
    d = dict(d)
    d["ste"] = SteKind(d["ste"])
    d["milestones"] = tuple(d["milestones"])
    return OptimConfig(**d)


def load_checkpoint(path: Path):
    """Returns (model, optimizer, cfg, next_epoch, metric_lines)."""
    _, sections = PF.read_sections(Path(path), PF.CHECKPOINT_MAGIC)
    spec = M.ModelSpec.from_text(sections[b"MSPC"].decode())
    cfg = _cfg_from_dict(json.loads(sections[b"MCFG"].decode()))
    prog = json.loads(sections[b"PROG"].decode())
    model = M.build(spec, seed=prog["seed"], ste=cfg.ste)
    stored = PF.unpack_named_arrays(sections[b"PRMS"])
    if [n for n, _, _ in stored] != list(model.params):
        raise PF.FileFormatError("checkpoint parameters do not match the model spec")
    for name, kind, arr in stored:
        p = model.params[name]
        if arr.shape != p.data.shape:
            raise PF.FileFormatError(f"checkpoint param {name} has shape {arr.shape}, "
                                     f"model expects {p.data.shape}")
        p.data = arr.astype(p.data.dtype)
    for name, _, arr in PF.unpack_named_arrays(sections[b"BNST"]):
        layer, slot = name.rsplit(".", 1)
        st = model.bn_states[layer]
        setattr(st, slot, arr.astype(st.running_mean.dtype))
    optimizer = make_optimizer(cfg, model)
    optimizer.load_state_arrays(PF.unpack_named_arrays(sections[b"OPTS"]))
    optimizer.t = prog["opt_t"]
    metric_lines = sections[b"METR"].decode().splitlines() if sections[b"METR"] else []
    return model, optimizer, cfg, prog["next_epoch"], metric_lines


# ---------------------------------------------------------------------------
# packed export


def export_packed(path: Path, model: M.Model):
    """Write the inference-only 1-bit model.

    Binary layers are stored as packed sign words with the weight shift
    folded in; their latent real weights and shift factors are dropped.
    """
    if model.inference_only:
        raise ValueError("model is already a packed runtime")
    binary_layers = [l for l in model.spec.layers if l.kind == "binconv"]
    skip = set()
    bit_items = []
    alpha_items = []
    for layer in binary_layers:
        name = layer.name
        skip.add(f"{name}.w")
        skip.add(f"{name}.wsd.raw")
        w_b = M.binary_weight_signs(model, name)
        bits = BK.pack(w_b)
        bit_items.append((name, bits.logical_shape, bits.valid_bits, bits.words))
        if layer.gets("scale", "off") == "analytic":
            w = model.params[f"{name}.w"].data
            alpha = np.abs(w.reshape(w.shape[0], -1)).mean(axis=1).astype(np.float32)
            alpha_items.append((name, "alpha_s", alpha))
    fp_params = [(p.name, p.kind, p.data.astype(np.float32, copy=False))
                 for p in model.params.values() if p.name not in skip]
    bn_items = []
    for name, st in model.bn_states.items():
        bn_items.append((f"{name}.running_mean", "bn_rm", st.running_mean.astype(np.float32)))
        bn_items.append((f"{name}.running_var", "bn_rv", st.running_var.astype(np.float32)))
    sections = [
        (b"MSPC", model.spec.to_text().encode()),
        (b"FPPR", PF.pack_named_arrays(fp_params)),
        (b"BITS", PF.pack_bit_payloads(bit_items)),
        (b"BNST", PF.pack_named_arrays(bn_items)),
        (b"ALPH", PF.pack_named_arrays(alpha_items)),
    ]
    PF.write_sections(Path(path), PF.PACKED_MAGIC, sections)


def load_packed(path: Path) -> M.Model:
    """Load the 1-bit model for packed-path inference only."""
    _, sections = PF.read_sections(Path(path), PF.PACKED_MAGIC)
    spec = M.ModelSpec.from_text(sections[b"MSPC"].decode())
    model = M.build(spec, seed=0)
    binary_names = {l.name for l in spec.layers if l.kind == "binconv"}
    stored = {name: arr for name, _, arr in PF.unpack_named_arrays(sections[b"FPPR"])}
    for pname, p in model.params.items():
        layer = pname.split(".", 1)[0]
        if pname in stored:
            if stored[pname].shape != p.data.shape:
                raise PF.FileFormatError(f"packed param {pname} shape mismatch")
            p.data = stored[pname].astype(np.float32)
        elif layer in binary_names:
            p.data = np.zeros_like(p.data)  # latent dropped at export
        else:
            raise PF.FileFormatError(f"packed file is missing parameter {pname}")
    for name, _, arr in PF.unpack_named_arrays(sections[b"BNST"]):
        layer, slot = name.rsplit(".", 1)
        setattr(model.bn_states[layer], slot, arr.astype(np.float32))
    for name, shape, valid_bits, words in PF.unpack_bit_payloads(sections[b"BITS"]):
        model._packed_bits[name] = BK.BitTensor(logical_shape=shape, words=words,
                                                valid_bits=valid_bits)
    for name, _, alpha in PF.unpack_named_arrays(sections.get(b"ALPH", PF.pack_named_arrays([]))):
        model.export_alphas[name] = alpha
    missing = binary_names - set(model._packed_bits)
    if missing:
        raise PF.FileFormatError(f"packed file lacks bit payloads for layers {sorted(missing)}")
    model.inference_only = True
    return model
