"""Structural-health pipeline: spectral features, detection, localization, severity.

Feature tensors are laid out ``features x locations x events``. After a CP
fit, rows of ``C`` describe events (detection and severity through a one-class
SVM) and rows of ``B`` describe sensor locations (localization through k-NN
distances).
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist

from .ocsvm import OcsvmModel, ocsvm_train
from .solvers import RIDGE, SolverConfig, run_solver
from .tensor import DenseTensor3

__all__ = [
    "EventMatrix",
    "extract_features",
    "localization_scores",
    "f_score",
    "project_event",
    "PipelineConfig",
    "PipelineReport",
    "evaluate_pipeline",
    "load_events",
    "save_events",
    "HEALTHY",
]

log = logging.getLogger(__name__)

HEALTHY = "healthy"


@dataclass
class EventMatrix:
    """Raw signals, shape ``(sensors, events, samples)``."""

    signals: np.ndarray
    sample_rate: float
    event_ids: list[str] | None = None
    labels: list[str] | None = None
    damaged_sensor: list[int | None] | None = None

    def __post_init__(self):
        self.signals = np.asarray(self.signals, dtype=np.float64)
        if self.signals.ndim != 3:
            raise ValueError("signals must have shape (sensors, events, samples)")
        if not self.sample_rate > 0:
            raise ValueError("sample_rate must be positive")
        T = self.signals.shape[1]
        if self.event_ids is None:
            self.event_ids = [f"e{t:04d}" for t in range(T)]
        for name in ("event_ids", "labels", "damaged_sensor"):
            v = getattr(self, name)
            if v is not None and len(v) != T:
                raise ValueError(f"{name} has {len(v)} entries for {T} events")

    @property
    def sensors(self) -> int:
        return self.signals.shape[0]

    @property
    def events(self) -> int:
        return self.signals.shape[1]

    @property
    def samples(self) -> int:
        return self.signals.shape[2]


@dataclass
class FeatureResult:
    tensor: DenseTensor3
    degenerate: np.ndarray  # (sensors, events) bool: constant input signal


def extract_features(ev: EventMatrix, keep_bins: int | None = None) -> FeatureResult:
    """Z-score each signal, FFT it, keep magnitudes of positive-frequency bins ``1..keep_bins``.

    Magnitudes are scaled by ``2 / L`` so a unit-amplitude sinusoid on an exact
    bin gives a peak of height 1 before normalization. Constant signals yield
    all-zero features and are marked in ``degenerate``.
    """
    L = ev.samples
    if keep_bins is None:
        keep_bins = L // 2
    if not 1 <= keep_bins <= L // 2:
        raise ValueError(f"keep_bins must lie in [1, {L // 2}], got {keep_bins}")
    x = ev.signals
    mean = x.mean(axis=2, keepdims=True)
    std = x.std(axis=2, keepdims=True)
    degenerate = (std[..., 0] <= 1e-12 * np.maximum(1.0, np.abs(mean[..., 0])))
    safe = np.where(degenerate[..., None], 1.0, std)
    z = np.where(degenerate[..., None], 0.0, (x - mean) / safe)
    spec = np.abs(np.fft.rfft(z, axis=2))[..., 1:keep_bins + 1] * (2.0 / L)
    # (sensors, events, bins) -> (bins, sensors, events)
    return FeatureResult(DenseTensor3(np.transpose(spec, (2, 0, 1))), degenerate)


def localization_scores(B, k: int = 2) -> np.ndarray:
    """Mean Euclidean distance from each row of ``B`` to its ``k`` nearest other rows."""
    B = np.asarray(B, dtype=np.float64)
    n = B.shape[0]
    if not 1 <= k < n:
        raise ValueError(f"k must satisfy 1 <= k < rows ({n}), got {k}")
    D = cdist(B, B)
    np.fill_diagonal(D, np.inf)
    nearest = np.partition(D, k - 1, axis=1)[:, :k]
    return nearest.mean(axis=1)


def f_score(tp: int, fp: int, fn: int) -> float:
    """Harmonic mean of precision and recall; 0 when either is undefined or zero.

    Evaluated as ``2 tp / (2 tp + fp + fn)``, which equals the harmonic mean
    and involves a single rounding for integer counts.
    """
    if tp <= 0 or tp + fp == 0 or tp + fn == 0:
        return 0.0
    return 2.0 * tp / (2.0 * tp + fp + fn)


def _ridge(G, rhs):
    R = G.shape[0]
    tr = float(np.trace(G))
    lam = RIDGE * tr / R if tr > 0 else 1.0
    return np.linalg.solve(G + lam * np.eye(R), rhs)


def project_event(slab: np.ndarray, A: np.ndarray, B: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Fit one event's ``features x locations`` slab against fixed bases.

    Returns the event's temporal row ``c`` (least squares with ``A, B`` fixed)
    and its refitted location matrix (least squares per sensor with ``A`` and
    ``c`` fixed).
    """
    G = (A.T @ A) * (B.T @ B)
    c = _ridge(G, np.einsum("fs,fr,sr->r", slab, A, B))
    M = A * c
    B_event = _ridge(M.T @ M, M.T @ slab).T
    return c, B_event


@dataclass
class PipelineConfig:
    solver: str = "fpcpd"
    solver_cfg: SolverConfig = field(default_factory=SolverConfig)
    nu: float = 0.05
    sigma: float | None = None
    k: int = 2
    trials: int = 10
    train_fraction: float = 0.8
    seed: int = 0


@dataclass
class PipelineReport:
    f_scores: list[float]
    counts: list[dict]
    events: list[dict]           # one record per (trial, test event)
    localization: list[dict]     # one record per (trial, test event)
    sensors: int
    config: dict

    @property
    def f_mean(self) -> float:
        return float(np.mean(self.f_scores))

    @property
    def f_std(self) -> float:
        return float(np.std(self.f_scores))

    def mean_decision(self) -> dict[str, float]:
        out = {}
        for lab in sorted({e["label"] for e in self.events}):
            out[lab] = float(np.mean([e["decision"] for e in self.events if e["label"] == lab]))
        return out

    def localization_accuracy(self) -> float | None:
        """Fraction of damage events whose top-scoring sensor is the damaged one."""
        hits = [r["argmax"] == r["damaged_sensor"] for r in self.localization
                if r["label"] != HEALTHY and r["damaged_sensor"] is not None]
        return float(np.mean(hits)) if hits else None

    def metrics(self) -> dict:
        return {
            "f_score_mean": self.f_mean,
            "f_score_std": self.f_std,
            "f_scores": self.f_scores,
            "counts": self.counts,
            "mean_decision": self.mean_decision(),
            "localization_accuracy": self.localization_accuracy(),
            "n_test_events": [c["n_test"] for c in self.counts],
            "config": self.config,
        }

    def write(self, outdir) -> dict[str, Path]:
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        paths = {
            "metrics": outdir / "metrics.json",
            "decisions": outdir / "decisions.csv",
            "localization": outdir / "localization.csv",
        }
        paths["metrics"].write_text(json.dumps(self.metrics(), indent=2))
        with open(paths["decisions"], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["trial", "event_id", "label", "decision", "anomalous"])
            for e in self.events:
                w.writerow([e["trial"], e["event_id"], e["label"], repr(e["decision"]), int(e["anomalous"])])
        with open(paths["localization"], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["trial", "event_id", "label"] + [f"s{s}" for s in range(self.sensors)])
            for r in self.localization:
                w.writerow([r["trial"], r["event_id"], r["label"]] + [repr(v) for v in r["scores"]])
        return paths


def evaluate_pipeline(t, labels, cfg: PipelineConfig | None = None, event_ids=None,
                      damaged_sensor=None) -> PipelineReport:
    """Bootstrap evaluation of detection, severity and localization.

    Each trial draws 80% of healthy events for training, fits the CP solver on
    that sub-tensor and projects every event onto the fitted ``A, B`` (see
    :func:`project_event`). The one-class SVM is trained on the projected rows
    of the training events and scores the held-out healthy events plus every
    damage event. Damage is the positive class for the F-score. Localization
    scores each sensor by the k-NN distance between rows of
    ``B_event - B_base``, where ``B_base`` is the mean refitted location matrix
    of the training events.
    """
    cfg = cfg or PipelineConfig()
    X = np.asarray(t)
    labels = [str(v) for v in labels]
    T = X.shape[2]
    if len(labels) != T:
        raise ValueError(f"{len(labels)} labels for {T} events")
    if event_ids is None:
        event_ids = [f"e{e:04d}" for e in range(T)]
    if damaged_sensor is None:
        damaged_sensor = [None] * T
    healthy = np.flatnonzero([lab == HEALTHY for lab in labels])
    damage = np.flatnonzero([lab != HEALTHY for lab in labels])
    if healthy.size == 0 or damage.size == 0:
        raise ValueError("need at least one healthy and one damage event")
    n_train = int(round(cfg.train_fraction * healthy.size))
    if n_train < 2 or n_train >= healthy.size:
        raise ValueError(f"cannot split {healthy.size} healthy events {cfg.train_fraction:.0%}/rest")

    f_scores, counts, events, loc = [], [], [], []
    for trial in range(cfg.trials):
        rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(trial,)))
        perm = rng.permutation(healthy)
        train, held = np.sort(perm[:n_train]), np.sort(perm[n_train:])
        scfg = cfg.solver_cfg.replace(seed=cfg.solver_cfg.seed + trial)
        fit = run_solver(cfg.solver, DenseTensor3(X[:, :, train]), scfg)
        A, B = fit.model.A, fit.model.B
        # Training rows go through the same projection as test events so both
        # sides of the detector see identically computed features.
        proj = [project_event(X[:, :, e], A, B) for e in train]
        C_train = np.stack([c for c, _ in proj])
        B_base = np.mean([Be for _, Be in proj], axis=0)
        model: OcsvmModel = ocsvm_train(C_train, nu=cfg.nu, sigma=cfg.sigma)
        test = np.concatenate([held, damage])
        tp = fp = fn = 0
        for e in test:
            c_row, B_event = project_event(X[:, :, e], A, B)
            d = float(model.decision(c_row[None, :])[0])
            anomalous = d < 0
            is_damage = labels[e] != HEALTHY
            tp += anomalous and is_damage
            fp += anomalous and not is_damage
            fn += (not anomalous) and is_damage
            events.append({"trial": trial, "event_id": event_ids[e], "label": labels[e],
                           "decision": d, "anomalous": bool(anomalous)})
            scores = localization_scores(B_event - B_base, cfg.k)
            loc.append({"trial": trial, "event_id": event_ids[e], "label": labels[e],
                        "scores": scores.tolist(), "argmax": int(np.argmax(scores)),
                        "damaged_sensor": damaged_sensor[e]})
        f_scores.append(f_score(tp, fp, fn))
        counts.append({"trial": trial, "tp": int(tp), "fp": int(fp), "fn": int(fn),
                       "tn": int(test.size - tp - fp - fn), "n_test": int(test.size),
                       "final_rmse": fit.trace[-1].rmse, "epochs": len(fit.trace)})
        log.info("trial %d: F=%.3f (tp=%d fp=%d fn=%d)", trial, f_scores[-1], tp, fp, fn)

    snapshot = {
        "solver": cfg.solver, "nu": cfg.nu, "sigma": cfg.sigma, "k": cfg.k, "trials": cfg.trials,
        "train_fraction": cfg.train_fraction, "seed": cfg.seed, "solver_cfg": asdict(cfg.solver_cfg),
    }
    return PipelineReport(f_scores, counts, events, loc, X.shape[1], snapshot)


# --------------------------------------------------------------------------- event I/O


def save_events(outdir, ev: EventMatrix) -> Path:
    """Write one CSV per event (rows = samples, columns = sensors) plus ``manifest.csv``."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    labels = ev.labels or [HEALTHY] * ev.events
    dmg = ev.damaged_sensor or [None] * ev.events
    for t, eid in enumerate(ev.event_ids):
        np.savetxt(outdir / f"{eid}.csv", ev.signals[:, t, :].T, delimiter=",",
                   header=",".join(f"s{s}" for s in range(ev.sensors)), comments="", fmt="%.17g")
    manifest = outdir / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["event_id", "label", "sample_rate", "damaged_sensor"])
        for eid, lab, s in zip(ev.event_ids, labels, dmg):
            w.writerow([eid, lab, repr(float(ev.sample_rate)), "" if s is None else s])
    return manifest


def load_events(event_dir, manifest=None) -> EventMatrix:
    """Read events listed in a manifest (``event_id,label,sample_rate[,damaged_sensor]``)."""
    event_dir = Path(event_dir)
    manifest = Path(manifest) if manifest else event_dir / "manifest.csv"
    with open(manifest, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{manifest}: empty manifest")
    header = [h.strip() for h in rows[0]]
    if header[:3] != ["event_id", "label", "sample_rate"]:
        raise ValueError(f"{manifest}:1: header must start with event_id,label,sample_rate, got {header}")
    ids, labels, rates, dmg, signals = [], [], [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) < 3:
            raise ValueError(f"{manifest}:{lineno}: expected at least 3 fields, got {len(row)}")
        eid, lab = row[0].strip(), row[1].strip()
        if not eid or not lab:
            raise ValueError(f"{manifest}:{lineno}: empty event_id or label")
        try:
            rate = float(row[2])
        except ValueError:
            raise ValueError(f"{manifest}:{lineno}: bad sample_rate {row[2]!r}") from None
        if not rate > 0:
            raise ValueError(f"{manifest}:{lineno}: sample_rate must be positive")
        s = row[3].strip() if len(row) > 3 else ""
        try:
            dmg.append(int(s) if s else None)
        except ValueError:
            raise ValueError(f"{manifest}:{lineno}: bad damaged_sensor {s!r}") from None
        path = event_dir / f"{eid}.csv"
        if not path.exists():
            raise ValueError(f"{manifest}:{lineno}: missing event file {path.name}")
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        ids.append(eid)
        labels.append(lab)
        rates.append(rate)
        signals.append(data.T)
    if not ids:
        raise ValueError(f"{manifest}: no events listed")
    if len(set(rates)) != 1:
        raise ValueError(f"{manifest}: events have differing sample rates {sorted(set(rates))}")
    shapes = {s.shape for s in signals}
    if len(shapes) != 1:
        raise ValueError(f"{manifest}: events differ in shape {sorted(shapes)}")
    return EventMatrix(np.stack(signals, axis=1), rates[0], ids, labels, dmg)
