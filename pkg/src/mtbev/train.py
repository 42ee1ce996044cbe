"""Training and evaluation loops, checkpoints and the metrics log."""

from __future__ import annotations

import logging
import math
import random
from pathlib import Path

import numpy as np
import torch

from .config import ConfigError, RunConfig, SceneSpec
from .metrics import IoUAccumulator, MetricsRecord, detection_map
from .model import MultiTaskNet, collate
from .scene_synth import build_dataset

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "mtbev-checkpoint"
CHECKPOINT_VERSION = 1


class NonFiniteLossError(FloatingPointError):
    pass


def set_determinism(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)


def save_checkpoint(path: str | Path, model: MultiTaskNet, step: int) -> None:
    """Single ``torch.save`` file: format tag, version, config snapshot, step, weights."""
    state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    payload = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
               "config": model.cfg.to_dict(), "step": int(step), "state_dict": state}
    tmp = Path(str(path) + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> tuple[MultiTaskNet, int]:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path} is not a model checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {payload.get('version')}")
    model = MultiTaskNet(RunConfig.from_dict(payload["config"]))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, int(payload["step"])


def batch_order(n: int, batch_size: int, steps: int, seed: int) -> list[list[int]]:
    """Fixed data order: a fresh permutation per epoch, consumed in batches."""
    rng = np.random.default_rng(seed)
    order: list[int] = []
    while len(order) < steps * batch_size:
        order.extend(rng.permutation(n).tolist())
    return [order[i * batch_size:(i + 1) * batch_size] for i in range(steps)]


def check_compatible(model_spec: SceneSpec, data_spec: SceneSpec) -> None:
    keys = ("grid_h", "grid_w", "grid_z", "out_h", "out_w", "out_z", "n_det_classes",
            "n_seg_classes", "n_occ_classes", "channels", "extent_m")
    bad = [k for k in keys if getattr(model_spec, k) != getattr(data_spec, k)]
    if bad:
        raise ConfigError(f"checkpoint and dataset disagree on {bad}")


@torch.no_grad()
def predict(model: MultiTaskNet, items, batch_size: int = 4) -> list[dict]:
    """Per-sample numpy predictions for every enabled task."""
    model.eval()
    out = []
    for i in range(0, len(items), batch_size):
        batch = collate(items[i:i + batch_size])
        res = model(batch)
        n = len(items[i:i + batch_size])
        if "det" in res:
            boxes, scores, labels = res["det"].decode()
        for b in range(n):
            p = {}
            if "det" in res:
                p["det"] = {"xy": boxes[b, :, :2].numpy(), "boxes": boxes[b].numpy(),
                            "scores": scores[b].numpy(), "labels": labels[b].numpy()}
            if "seg_logits" in res:
                p["seg"] = (res["seg_logits"][b] > 0).numpy()
            if "occ_logits" in res:
                p["occ"] = res["occ_logits"][b].argmax(-1).numpy()
            out.append(p)
    return out


def score_predictions(preds: list[dict], items, spec: SceneSpec) -> dict[str, float]:
    metrics: dict[str, float] = {}
    if preds and "det" in preds[0]:
        gts = [t.boxes for _, _, t in items]
        res = detection_map([p["det"] for p in preds], gts, spec.n_det_classes)
        metrics.update({f"det/{k}": v for k, v in res.items()})
    if preds and "seg" in preds[0]:
        acc = IoUAccumulator(spec.n_seg_classes)
        for p, (_, _, t) in zip(preds, items):
            acc.add_binary(p["seg"], t.seg_grid)
        for k, v in enumerate(acc.per_class()):
            if np.isfinite(v):
                metrics[f"seg/IoU/{k}"] = float(v)
        metrics["seg/mIoU"] = acc.mean()
    if preds and "occ" in preds[0]:
        acc = IoUAccumulator(spec.n_occ_classes)
        for p, (_, _, t) in zip(preds, items):
            acc.add_labels(p["occ"], t.occ_labels)
        metrics["occ/mIoU"] = acc.mean()
    return metrics


def evaluate(checkpoint, dataset, spec: SceneSpec | None = None, step: int | None = None) -> MetricsRecord:
    """Score a checkpoint path (or an in-memory model) on (sample, features, targets) items."""
    if isinstance(checkpoint, (str, Path)):
        model, ck_step = load_checkpoint(checkpoint)
    else:
        model, ck_step = checkpoint, 0
    if spec is not None:
        check_compatible(model.cfg.scene, spec)
    was_training = model.training
    metrics = score_predictions(predict(model, dataset), dataset, model.cfg.scene)
    model.train(was_training)
    return MetricsRecord(ck_step if step is None else step, {}, metrics)


def _loss_scalars(parts: dict) -> dict[str, float]:
    return {k: float(v.detach()) for k, v in parts.items()}


def train(cfg: RunConfig, dataset=None, out_dir: str | Path | None = None) -> dict:
    """Train from scratch; returns paths, final metrics and the per-step total loss.

    Checkpoints go to ``ckpt_<step>.pt`` plus ``last.pt``; the metrics log is
    ``metrics.jsonl``. A non-finite loss stops training and leaves the last
    good checkpoint untouched.
    """
    # near convergence many activations and grads go subnormal; on CPU that costs ~1.6x per
    # step. The flag is process-global, so it is switched back off on the way out.
    torch.set_flush_denormal(True)
    try:
        return _train(cfg, dataset, out_dir)
    finally:
        torch.set_flush_denormal(False)


def _train(cfg: RunConfig, dataset, out_dir) -> dict:
    t = cfg.train
    out = Path(out_dir or t.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    set_determinism(t.seed)
    if dataset is None:
        dataset = build_dataset(cfg.scene, t.n_scenes, seed=t.seed)
    model = MultiTaskNet(cfg)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.optim.lr, weight_decay=cfg.optim.weight_decay)
    sched = None
    if t.steps > 0:
        sched = torch.optim.lr_scheduler.OneCycleLR(
            opt, max_lr=cfg.optim.lr, total_steps=t.steps, pct_start=cfg.optim.pct_start,
            div_factor=cfg.optim.div_factor)
    log_path = out / "metrics.jsonl"
    log_path.write_text("")
    last = out / "last.pt"
    save_checkpoint(out / "ckpt_000000.pt", model, 0)
    save_checkpoint(last, model, 0)
    batches = batch_order(len(dataset), min(t.batch_size, len(dataset)), t.steps, t.seed)
    staged_until = int(round(t.staged_fraction * t.steps))
    history: list[float] = []
    record = None

    def emit(rec: MetricsRecord) -> None:
        with open(log_path, "a") as fh:
            fh.write(rec.to_json() + "\n")

    model.train()
    for step in range(1, t.steps + 1):
        batch = collate([dataset[i] for i in batches[step - 1]])
        tasks = tuple(x for x in model.tasks if x != "occ") if step <= staged_until else None
        if tasks == ():
            tasks = None
        parts = model.compute_losses(model(batch, tasks), batch)
        loss = parts["total"]
        if not torch.isfinite(loss):
            log.error("non-finite loss at step %d; keeping %s", step, last)
            raise NonFiniteLossError(f"loss became {float(loss.detach())} at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if cfg.optim.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.optim.grad_clip)
        opt.step()
        sched.step()
        history.append(float(loss.detach()))
        evaluate_now = step % t.eval_every == 0 or step == t.steps
        if step % t.log_every == 0 or evaluate_now:
            metrics = evaluate(model, dataset, step=step).metrics if evaluate_now else {}
            scalars = _loss_scalars(parts)
            scalars["lr"] = float(sched.get_last_lr()[0])
            record = MetricsRecord(step, scalars, metrics)
            emit(record)
        if step % t.ckpt_every == 0 or step == t.steps:
            save_checkpoint(out / f"ckpt_{step:06d}.pt", model, step)
            save_checkpoint(last, model, step)
    if t.steps == 0:
        record = evaluate(model, dataset, step=0)
        emit(record)
    return {"model": model, "out_dir": out, "checkpoint": last, "log": log_path,
            "metrics": record.metrics if record else {}, "loss_history": history,
            "final_loss": history[-1] if history else math.nan}


def read_log(path: str | Path) -> list[MetricsRecord]:
    with open(path) as fh:
        return [MetricsRecord.from_json(line) for line in fh if line.strip()]
