"""The three-arm temporal probe and its suitability verdict."""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .engine import ALGORITHMS
from .train import TrainConfig, TrainingDivergence, train_run

SUITABLE = "Suitable"
CREDIT_UNNEEDED = "UnsuitableTemporalCreditUnneeded"
FRAME_SUFFICIENT = "UnsuitableFrameLevelSufficient"
VERDICTS = (SUITABLE, CREDIT_UNNEEDED, FRAME_SUFFICIENT)

DEFAULT_THETA_CREDIT = 2.0
DEFAULT_THETA_TEMPORAL = 2.0


def classify_verdict(acc_stbp: float, acc_sdbp: float, acc_notd: float,
                     theta_credit: float = DEFAULT_THETA_CREDIT,
                     theta_temporal: float = DEFAULT_THETA_TEMPORAL) -> str:
    """Judge a benchmark from its accuracy triple (percent).

    Checked in order: SDBP within ``theta_credit`` of STBP means temporal
    credit assignment is not needed; NoTD within ``theta_temporal`` of SDBP
    means single frames suffice; otherwise the benchmark is suitable.
    """
    for acc in (acc_stbp, acc_sdbp, acc_notd):
        if not 0.0 <= acc <= 100.0:
            raise ValueError(f"accuracy {acc} outside [0, 100]")
    if acc_stbp - acc_sdbp <= theta_credit:
        return CREDIT_UNNEEDED
    if acc_sdbp - acc_notd <= theta_temporal:
        return FRAME_SUFFICIENT
    return SUITABLE


CONFIDENCE_AGGREGATIONS = ("max_logit", "max_prob", "target_logit")


def confident_frame(per_step_logits, aggregation: str = "max_logit", target: int | None = None) -> int:
    """Step at which the readout responds most strongly; earliest step on ties."""
    z = np.asarray(per_step_logits, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < 1:
        raise ValueError("expected (T, classes) logits with T >= 1")
    if aggregation == "max_logit":
        score = z.max(axis=1)
    elif aggregation == "max_prob":
        e = np.exp(z - z.max(axis=1, keepdims=True))
        score = (e / e.sum(axis=1, keepdims=True)).max(axis=1)
    elif aggregation == "target_logit":
        if target is None:
            raise ValueError("target_logit needs the target class")
        score = z[:, target]
    else:
        raise ValueError(f"unknown aggregation {aggregation!r}")
    return int(np.argmax(score))


def confident_frames(trace, aggregation: str = "max_logit", targets=None) -> np.ndarray:
    """Confident frame per sample of a forward trace."""
    o = trace.o
    out = np.empty(o.shape[1], np.int64)
    for b in range(o.shape[1]):
        out[b] = confident_frame(o[:, b], aggregation, None if targets is None else int(targets[b]))
    return out


@dataclass
class ArmResult:
    algorithm: str
    accuracy: float | None      # percent; None if the arm failed
    delta: float | None
    history: list = field(default_factory=list)
    error: str | None = None
    checkpoint: bytes | None = None     # best STPB checkpoint of the arm


@dataclass
class StpReport:
    task: str
    seed: int
    theta_credit: float
    theta_temporal: float
    arms: list
    verdict: str | None
    meta: dict = field(default_factory=dict)

    def accuracy(self, algorithm: str) -> float | None:
        for arm in self.arms:
            if arm.algorithm == algorithm:
                return arm.accuracy
        raise KeyError(algorithm)

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "seed": self.seed,
            "thresholds": {"credit": self.theta_credit, "temporal": self.theta_temporal},
            "arms": [{"algorithm": a.algorithm, "accuracy": a.accuracy, "delta": a.delta,
                      **({"error": a.error} if a.error else {})} for a in self.arms],
            "verdict": self.verdict,
            **({"meta": self.meta} if self.meta else {}),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "StpReport":
        arms = [ArmResult(a["algorithm"], a["accuracy"], a["delta"], error=a.get("error"))
                for a in d["arms"]]
        th = d["thresholds"]
        return cls(d["task"], d["seed"], th["credit"], th["temporal"], arms, d["verdict"],
                   d.get("meta", {}))


def assemble_report(task: str, seed: int, accuracies: dict, theta_credit=DEFAULT_THETA_CREDIT,
                    theta_temporal=DEFAULT_THETA_TEMPORAL, histories=None, errors=None,
                    meta=None) -> StpReport:
    """Build a report from percent accuracies; a ``None`` accuracy marks a failed arm."""
    histories = histories or {}
    errors = errors or {}
    base = accuracies.get("stbp")
    arms = []
    for alg in ALGORITHMS:
        acc = accuracies.get(alg)
        delta = None if acc is None or base is None else round(acc - base, 10)
        arms.append(ArmResult(alg, acc, delta, histories.get(alg, []), errors.get(alg)))
    verdict = None
    if all(accuracies.get(a) is not None for a in ALGORITHMS):
        verdict = classify_verdict(accuracies["stbp"], accuracies["sdbp"], accuracies["notd"],
                                   theta_credit, theta_temporal)
    return StpReport(task, seed, theta_credit, theta_temporal, arms, verdict, meta or {})


def _run_arm(args):
    config, train, test = args
    try:
        result = train_run(config, train, test)
    except (TrainingDivergence, FloatingPointError) as exc:
        return config.algorithm, None, [], str(exc), None
    acc = 100.0 * result.history[-1]["test_accuracy"]
    return config.algorithm, acc, result.history, None, result.best.to_bytes()


def run_stp(task: str, base_config: TrainConfig, train, test, *,
            theta_credit=DEFAULT_THETA_CREDIT, theta_temporal=DEFAULT_THETA_TEMPORAL,
            workers: int = 1) -> StpReport:
    """Train one model per algorithm and judge the benchmark.

    The arms share the seed (hence initial weights), the dataset arrays and
    every hyperparameter; only ``algorithm`` differs. Accuracy is the test
    accuracy after the final epoch.
    """
    configs = [replace(base_config, algorithm=alg) for alg in ALGORITHMS]
    jobs = [(c, train, test) for c in configs]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            results = list(pool.map(_run_arm, jobs))
    else:
        results = [_run_arm(j) for j in jobs]
    acc = {alg: a for alg, a, _, _, _ in results}
    hist = {alg: h for alg, _, h, _, _ in results}
    err = {alg: e for alg, _, _, e, _ in results if e}
    meta = {"config": base_config.to_dict()}
    meta["config"].pop("algorithm")
    report = assemble_report(task, base_config.seed, acc, theta_credit, theta_temporal,
                             hist, err, meta)
    for arm, (_, _, _, _, ckpt) in zip(report.arms, results):
        arm.checkpoint = ckpt
    return report


def mean_accuracies(reports) -> dict:
    """Per-algorithm mean accuracy over several reports (e.g. seeds)."""
    out = {}
    for alg in ALGORITHMS:
        vals = [r.accuracy(alg) for r in reports]
        out[alg] = None if any(v is None for v in vals) else float(np.mean(vals))
    return out
