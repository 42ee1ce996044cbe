"""Ablation suites: multi-task vs single-task, MAFI/TCS, segmentation layout, parameter counts.

Ablations train many small models, so they run on a reduced scene (16x16
grid) and report metrics on held-out scenes rather than the training set.
By default every training sample is a fresh scene (n_train = steps x batch);
with a small reused training set the held-out numbers mostly rank how much
each configuration memorizes. Metrics are reported in points (x100).
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, SceneSpec, TASKS
from .decoder import Decoder, count_parameters
from .scene_synth import build_dataset
from .train import evaluate, train

log = logging.getLogger(__name__)

SUITES = ("mtl_vs_single", "mafi", "tcs", "seg_layout", "variant_params")
METRIC_KEYS = {"det": "det/mAP", "seg": "seg/mIoU", "occ": "occ/mIoU"}


@dataclass
class AblationSettings:
    seeds: tuple[int, ...] = (0, 1, 2)
    steps: int = 300
    n_train: int = 600
    n_eval: int = 16
    batch_size: int = 2
    scene: SceneSpec = field(default_factory=lambda: SceneSpec(
        extent_m=4.0, grid_h=16, grid_w=16, grid_z=4, out_h=32, out_w=32, out_z=16, channels=32))
    seg_layouts: tuple[int, ...] = (1, 4, 8)
    out_dir: str = "runs/ablation"


@dataclass
class AblationTable:
    suite: str
    rows: list[dict]
    summary: dict

    def to_markdown(self) -> str:
        if not self.rows:
            return f"## {self.suite}\n(no rows)\n"
        cols = list(self.rows[0])
        lines = [f"## {self.suite}", "| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
        for r in self.rows:
            lines.append("| " + " | ".join(_fmt(r[c]) for c in cols) + " |")
        lines.append("")
        lines.extend(f"- {k}: {_fmt(v)}" for k, v in self.summary.items())
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps({"suite": self.suite, "rows": self.rows, "summary": self.summary}, indent=2,
                          default=_jsonable)


def _jsonable(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, np.bool_):
        return bool(x)
    raise TypeError(type(x))


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.2f}"
    return str(v)


def _run_config(base: RunConfig, st: AblationSettings, seed: int, tasks, use_mafi: bool, use_tcs: bool,
                seg_blocks: int) -> RunConfig:
    tr = dataclasses.replace(base.train, steps=st.steps, batch_size=st.batch_size, n_scenes=st.n_train,
                             seed=seed, eval_every=max(st.steps, 1), ckpt_every=max(st.steps, 1),
                             log_every=max(st.steps // 10, 1))
    return RunConfig(scene=st.scene,
                     model=dataclasses.replace(base.model, tasks=tuple(tasks), use_mafi=use_mafi,
                                               seg_blocks=seg_blocks),
                     decoder=dataclasses.replace(base.decoder, use_tcs=use_tcs),
                     optim=base.optim, loss=base.loss, train=tr)


class _Runner:
    """Trains each distinct configuration once per seed and caches held-out metrics."""

    def __init__(self, base: RunConfig, st: AblationSettings, cache: dict | None = None):
        self.base, self.st = base, st
        self.cache: dict[tuple, dict] = {} if cache is None else cache
        self.data: dict[int, tuple] = {}

    def datasets(self, seed: int):
        if seed not in self.data:
            self.data[seed] = (build_dataset(self.st.scene, self.st.n_train, seed=10_000 + seed),
                               build_dataset(self.st.scene, self.st.n_eval, seed=20_000 + seed))
        return self.data[seed]

    def metrics(self, seed: int, tasks, use_mafi=True, use_tcs=True, seg_blocks=None) -> dict:
        seg_blocks = self.base.model.seg_blocks if seg_blocks is None else seg_blocks
        key = (seed, tuple(tasks), use_mafi, use_tcs, seg_blocks)
        if key not in self.cache:
            cfg = _run_config(self.base, self.st, seed, tasks, use_mafi, use_tcs, seg_blocks)
            train_set, eval_set = self.datasets(seed)
            name = "-".join(tasks) + f"_mafi{int(use_mafi)}_tcs{int(use_tcs)}_S{seg_blocks}_seed{seed}"
            log.info("ablation run %s", name)
            res = train(cfg, dataset=train_set, out_dir=Path(self.st.out_dir) / name)
            m = evaluate(res["model"], eval_set).metrics
            self.cache[key] = {t: 100.0 * m[METRIC_KEYS[t]] for t in tasks}
        return self.cache[key]


def delta_mtl(joint: dict, single: dict) -> float:
    """Sum over tasks of (multi-task metric - single-task metric), in points."""
    return float(sum(joint[t] - single[t] for t in joint))


def _singles(r: _Runner, seed: int) -> dict:
    return {t: r.metrics(seed, (t,))[t] for t in TASKS}


def _mtl_suite(r: _Runner, settings: list[tuple[str, bool, bool]], suite: str) -> AblationTable:
    rows = []
    per_setting: dict[str, list[float]] = {name: [] for name, _, _ in settings}
    occ_gap = []
    for seed in r.st.seeds:
        single = _singles(r, seed)
        rows.append({"seed": seed, "setting": "single-task", **single, "dMTL": 0.0})
        for name, mafi, tcs in settings:
            joint = r.metrics(seed, TASKS, use_mafi=mafi, use_tcs=tcs)
            d = delta_mtl(joint, single)
            per_setting[name].append(d)
            rows.append({"seed": seed, "setting": name, **joint, "dMTL": d})
            if mafi and tcs:
                occ_gap.append(joint["occ"] - single["occ"])
    summary = {f"mean dMTL [{k}]": float(np.mean(v)) for k, v in per_setting.items()}
    names = [n for n, _, _ in settings]
    summary[f"trend dMTL({names[-1]}) > dMTL({names[0]})"] = bool(
        np.mean(per_setting[names[-1]]) > np.mean(per_setting[names[0]]))
    if occ_gap:
        summary["mean occ(joint) - occ(single)"] = float(np.mean(occ_gap))
        summary["trend occ joint >= occ single"] = bool(np.mean(occ_gap) >= 0.0)
    return AblationTable(suite, rows, summary)


def _seg_layout(r: _Runner) -> AblationTable:
    rows, by_s = [], {s: [] for s in r.st.seg_layouts}
    for seed in r.st.seeds:
        for s in r.st.seg_layouts:
            iou = r.metrics(seed, ("seg",), seg_blocks=s)["seg"]
            by_s[s].append(iou)
            rows.append({"seed": seed, "S": s, "n_s": s * r.st.scene.n_seg_classes, "seg": iou})
    mean = {s: float(np.mean(v)) for s, v in by_s.items()}
    summary = {f"mean seg IoU S={s}": v for s, v in mean.items()}
    if {1, 4, 8} <= set(mean):
        summary["trend S=4 > S=1"] = mean[4] > mean[1]
        summary["trend |S=8 - S=4| <= 1 point"] = abs(mean[8] - mean[4]) <= 1.0
    return AblationTable("seg_layout", rows, summary)


def variant_param_counts(base: RunConfig) -> dict[str, int]:
    d = base.decoder
    counts = {}
    for variant in ("transformer", "mamba"):
        dec = Decoder(base.scene.channels, d.layers, variant, base.model.tasks, d.heads, d.points,
                      d.state_dim, d.ffn_ratio, d.use_tcs)
        counts[variant] = count_parameters(dec)
    return counts


def run_ablation(suite: str, base: RunConfig | None = None, settings: AblationSettings | None = None,
                 cache: dict | None = None) -> AblationTable:
    """Run one ablation suite and return its comparison table.

    Passing the same ``cache`` dict to several calls with equal ``base`` and
    ``settings`` reuses runs the suites have in common (e.g. single-task runs).
    """
    if suite not in SUITES:
        raise ConfigError(f"unknown ablation suite {suite!r}; choose from {SUITES}")
    base = base or RunConfig()
    st = settings or AblationSettings()
    if suite == "variant_params":
        counts = variant_param_counts(base)
        rows = [{"variant": k, "decoder_params": v, "C": base.scene.channels, "L": base.decoder.layers}
                for k, v in counts.items()]
        ok = counts["mamba"] < counts["transformer"]
        if not ok:
            raise AssertionError(f"mamba decoder is not smaller: {counts}")
        return AblationTable(suite, rows, {"mamba < transformer": ok,
                                           "ratio": counts["mamba"] / counts["transformer"]})
    runner = _Runner(base, st, cache)
    if suite == "mtl_vs_single":
        return _mtl_suite(runner, [("multi-query", False, False), ("multi-query+MAFI+TCS", True, True)], suite)
    if suite == "mafi":
        return _mtl_suite(runner, [("no MAFI", False, True), ("MAFI", True, True)], suite)
    if suite == "tcs":
        return _mtl_suite(runner, [("no TCS", True, False), ("TCS", True, True)], suite)
    return _seg_layout(runner)
