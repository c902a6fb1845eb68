"""Training loop: combined loss, SGD with momentum, warm-up + cosine schedule."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import config as cfgmod
from .checkpoint import load_arrays, load_module_arrays, module_arrays, save_arrays
from .core import derive_seed, set_deterministic
from .data.augment import augment, resize
from .detect import loss_det
from .afford import loss_aff
from .metrics import EvalReport, evaluate
from .model import AffordanceModel, Batch

log = logging.getLogger(__name__)

LOSS_ORDER = ("det_iou", "det_bce", "det_dfl", "aff", "cls_priors", "box_offsets", "aff_gates")


class NumericError(RuntimeError):
    """A loss component became NaN or infinite."""

    def __init__(self, component: str, value: float, epoch: int, step: int):
        super().__init__(f"non-finite loss component {component!r} = {value} at epoch {epoch}, step {step}")
        self.component = component


def lr_at(step: int, total_steps: int, warmup_steps: int, cfg) -> float:
    """Linear ramp lr_min -> lr_max over warm-up, then cosine back to lr_min."""
    lo, hi = cfg.lr_min, cfg.lr_max
    if step < warmup_steps:
        return lo + (hi - lo) * step / warmup_steps
    span = total_steps - warmup_steps - 1
    if span <= 0:
        return hi
    t = step - warmup_steps
    return lo + 0.5 * (hi - lo) * (1 + math.cos(math.pi * t / span))


def decays(name: str, param: torch.Tensor) -> bool:
    """Weight decay applies to conv/linear weights, never to biases or norm affine terms."""
    return param.ndim > 1 and not name.endswith("bias")


@torch.no_grad()
def sgd_step(params, grads, buffers, lr: float, momentum: float, weight_decay: float, decay_flags=None) -> None:
    """In place: v <- m*v + g + wd*w (wd only where flagged); w <- w - lr*v."""
    if decay_flags is None:
        decay_flags = [True] * len(params)
    for p, g, v, d in zip(params, grads, buffers, decay_flags):
        if g is None:
            g = torch.zeros_like(p)
        v.mul_(momentum).add_(g)
        if d and weight_decay:
            v.add_(p, alpha=weight_decay)
        p.sub_(lr * v)


class SGD:
    """Momentum SGD over named parameters with per-parameter decay flags."""

    def __init__(self, named_params, momentum: float, weight_decay: float):
        self.names = [n for n, _ in named_params]
        self.params = [p for _, p in named_params]
        self.flags = [decays(n, p) for n, p in named_params]
        self.buffers = [torch.zeros_like(p) for p in self.params]
        self.momentum = momentum
        self.weight_decay = weight_decay

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float) -> None:
        sgd_step(self.params, [p.grad for p in self.params], self.buffers, lr, self.momentum, self.weight_decay, self.flags)


def trainable_named_parameters(model: AffordanceModel) -> list[tuple[str, torch.nn.Parameter]]:
    out = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    assert not any(n.startswith("adapter.lm.") and "lora_" not in n for n, _ in out), "frozen LM weights leaked into the optimizer"
    return out


def total_loss(det_parts: dict, l_aff, adapter_parts, train_cfg, det_gains=(1.0, 1.0, 1.0)):
    """L_det + L_aff + (l1*L_cls + l2*L_box + l3*L_gate); returns (scalar, components)."""
    g_iou, g_bce, g_dfl = det_gains
    l_det = g_iou * det_parts["iou"] + g_bce * det_parts["bce"] + g_dfl * det_parts["dfl"]
    comps = {"det_iou": det_parts["iou"], "det_bce": det_parts["bce"], "det_dfl": det_parts["dfl"], "det": l_det, "aff": l_aff}
    total = l_det + l_aff
    if adapter_parts is not None:
        l_cls, l_box, l_gate = adapter_parts
        l_adapter = train_cfg.lambda1 * l_cls + train_cfg.lambda2 * l_box + train_cfg.lambda3 * l_gate
        comps.update(cls_priors=l_cls, box_offsets=l_box, aff_gates=l_gate, adapter=l_adapter)
        total = total + l_adapter
    comps["total"] = total
    return total, comps


@torch.no_grad()
def evaluate_model(model: AffordanceModel, samples, mode: str = "light", batch_size: int = 16, per_image: list | None = None) -> EvalReport:
    was_training = model.training
    model.eval()
    size = model.input_size
    samples = [resize(s, size) for s in samples]
    dets, maps = [], []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i : i + batch_size]
        d, m = model.predict(Batch.from_samples(chunk).images, mode=mode)
        dets.extend(d)
        maps.extend(m)
    model.train(was_training)
    return evaluate(dets, maps, samples, len(model.class_names), per_image)


@dataclass
class TrainResult:
    model: AffordanceModel
    history: list[dict] = field(default_factory=list)
    epoch: int = 0


class Trainer:
    def __init__(self, cfg: cfgmod.RunConfig, class_names, affordance_names):
        cfg.validate()
        self.cfg = cfg
        self.deterministic = set_deterministic()
        torch.manual_seed(cfg.train.seed)
        self.model = AffordanceModel(cfg.model, cfg.adapter, class_names, affordance_names)
        self.opt = SGD(trainable_named_parameters(self.model), cfg.train.momentum, cfg.train.weight_decay)
        self.epoch = 0
        self.history: list[dict] = []

    # state ---------------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = module_arrays(self.model, "state/")
        for n, b in zip(self.opt.names, self.opt.buffers):
            arrays["momentum/" + n] = b.numpy()
        return arrays

    def save(self, path) -> Path:
        meta = {
            "epoch": self.epoch,
            "config": cfgmod.dumps(self.cfg),
            "config_hash": self.cfg.hash(),
            "class_names": self.model.class_names,
            "affordance_names": self.model.affordance_names,
        }
        return save_arrays(path, self.state_arrays(), meta)

    @classmethod
    def from_checkpoint(cls, path, cfg: cfgmod.RunConfig | None = None) -> "Trainer":
        arrays, meta = load_arrays(path)
        if cfg is None:
            cfg = cfgmod.loads(meta["config"])
        elif cfg.hash() != meta.get("config_hash"):
            log.warning("config hash differs from checkpoint (%s vs %s)", cfg.hash(), meta.get("config_hash"))
        trainer = cls(cfg, meta["class_names"], meta["affordance_names"])
        load_module_arrays(trainer.model, arrays, "state/")
        for n, b in zip(trainer.opt.names, trainer.opt.buffers):
            key = "momentum/" + n
            if key in arrays:
                b.copy_(torch.from_numpy(arrays[key]))
        trainer.epoch = int(meta["epoch"])
        return trainer

    # loop ----------------------------------------------------------------

    def batch_losses(self, batch: Batch, epoch: int):
        model = self.model
        model.train()
        preds, aff = model(batch.images)
        assignments = model.assign(batch)
        _, det_parts = loss_det(preds, assignments, model.centers, model.strides, (1.0, 1.0, 1.0), self.cfg.model.cls_norm)
        l_aff = loss_aff(aff.logits, batch.aff_target, self.cfg.model.aff_pos_weight)
        adapter_parts = None
        if model.adapter is not None:
            warm = epoch < self.cfg.warmup_gt_epochs()
            out = model.run_adapter(batch.images, preds, aff, gt=(batch, assignments) if warm else None)
            adapter_parts = model.adapter_loss_terms(out, batch)
        return total_loss(det_parts, l_aff, adapter_parts, self.cfg.train, self.cfg.model.det_gains)

    def steps_per_epoch(self, n: int) -> int:
        return math.ceil(n / self.cfg.train.batch_size)

    def run_epoch(self, samples, epoch: int) -> dict:
        tc = self.cfg.train
        n = len(samples)
        spe = self.steps_per_epoch(n)
        total_steps = tc.epochs * spe
        warmup_steps = tc.warmup_epochs * spe
        order = np.random.default_rng(derive_seed("order", tc.seed, epoch)).permutation(n)
        sums: dict[str, float] = {}
        lr = 0.0
        for b in range(spe):
            step = epoch * spe + b
            idx = order[b * tc.batch_size : (b + 1) * tc.batch_size]
            chunk = [augment(samples[i], tc.seed, epoch, self.cfg.model.input_size, flip=tc.augment) for i in idx]
            batch = Batch.from_samples(chunk)
            total, comps = self.batch_losses(batch, epoch)
            for name in LOSS_ORDER:
                if name in comps and not torch.isfinite(comps[name]):
                    raise NumericError(name, float(comps[name]), epoch, step)
            self.opt.zero_grad()
            total.backward()
            lr = lr_at(step, total_steps, warmup_steps, tc)
            self.opt.step(lr)
            for k, v in comps.items():
                sums[k] = sums.get(k, 0.0) + float(v.detach()) * len(idx)
        record = {"epoch": epoch, "lr": lr}
        record.update({k: v / n for k, v in sums.items()})
        return record

    def fit(self, samples, val_samples=None, out_dir=None, progress=None, until: int | None = None) -> TrainResult:
        """Train from the current epoch up to ``until`` (default: the configured epoch count)."""
        if not samples:
            raise ValueError("training set is empty")
        tc = self.cfg.train
        out = Path(out_dir) if out_dir is not None else None
        log_path = None
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            log_path = out / "metrics.jsonl"
            kept = []
            if self.epoch and log_path.exists():
                kept = [ln for ln in log_path.read_text().splitlines() if ln and json.loads(ln)["epoch"] < self.epoch]
            log_path.write_text("".join(ln + "\n" for ln in kept))
        stop = tc.epochs if until is None else min(until, tc.epochs)
        while self.epoch < stop:
            t0 = time.perf_counter()
            record = self.run_epoch(samples, self.epoch)
            last = self.epoch == tc.epochs - 1
            if val_samples and (last or (tc.eval_every > 0 and (self.epoch + 1) % tc.eval_every == 0)):
                mode = "full" if self.model.adapter is not None else "light"
                record.update(evaluate_model(self.model, val_samples, mode, tc.batch_size).to_dict())
                if self.model.adapter is not None:
                    light = evaluate_model(self.model, val_samples, "light", tc.batch_size)
                    record.update({"light_" + k: v for k, v in light.to_dict().items()})
            self.epoch += 1
            self.history.append(record)
            if log_path is not None:
                with open(log_path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(record, sort_keys=True) + "\n")
                self.save(out / "checkpoint")
            if progress is not None:
                progress(record, time.perf_counter() - t0)
        return TrainResult(self.model, self.history, self.epoch)


def train(samples, cfg: cfgmod.RunConfig, class_names, affordance_names, val_samples=None, out_dir=None, progress=None) -> TrainResult:
    return Trainer(cfg, class_names, affordance_names).fit(samples, val_samples, out_dir, progress)
