"""Surrogate pretraining and label-free process-network training.

Phase one fits the flow and void surrogates to oracle labels. Phase two
trains the process network by pushing the frozen quality model's predicted
objective towards its optimum of zero; no path labels are involved.
"""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensorops as T
from .config import Config
from .datagen import Dataset
from .errors import DatasetEmpty, DegenerateLabels, FrozenViolation, NotPretrained, ZeroLengthPath
from .flow_oracle import FlowParams
from .geometry import TargetArea, decode_path, feedrate_for
from .models import (
    FlowSurrogateNet,
    ProcessNet,
    QualityNet,
    VoidSurrogateNet,
    infer_raw,
    soft_rasterize,
)
from .quality import QualityReport, evaluate, penalty_report, simulate_and_score
from .tensorops import Tensor

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "split", "loss", "oracle_J", "coverage_mean", "void_rate", "ms_per_item")


@dataclass
class TrainLog:
    """Rows of the training CSV. Wall-clock columns stay blank unless ``timing`` is set."""

    timing: bool = False
    rows: list[dict] = field(default_factory=list)
    timings: list[tuple[int, str, float]] = field(default_factory=list)

    def add(self, epoch, split, loss, oracle_j=None, coverage=None, void_rate=None, ms=None):
        def fmt(v):
            return "" if v is None else repr(float(v))

        self.rows.append(
            {
                "epoch": str(epoch),
                "split": split,
                "loss": fmt(loss),
                "oracle_J": fmt(oracle_j),
                "coverage_mean": fmt(coverage),
                "void_rate": fmt(void_rate),
                "ms_per_item": fmt(ms) if self.timing else "",
            }
        )
        if ms is not None:
            self.timings.append((epoch, split, float(ms)))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=LOG_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(self.rows)
        return buf.getvalue()

    def timing_csv(self) -> str:
        return "epoch,split,ms_per_item\n" + "".join(f"{e},{s},{ms:.3f}\n" for e, s, ms in self.timings)


def sigma_at(epoch: int, cfg: Config) -> float:
    """Rasterizer width for a (0-based) epoch of process training."""
    return max(cfg.sigma_min, cfg.sigma * cfg.sigma_decay ** (epoch // cfg.sigma_decay_every))


def _snapshot(model) -> dict[str, np.ndarray]:
    return {n: p.data.copy() for n, p in model.named_parameters()}


def _restore(model, snap):
    for n, p in model.named_parameters():
        p.data = snap[n].copy()


def _augment(arrays: list[np.ndarray], rng, cfg: Config) -> list[np.ndarray]:
    """Apply one random dihedral transform to every (B, H, W) array, per sample."""
    if not (cfg.mirror_augment or cfg.rotate_augment):
        return arrays
    out = [a.copy() for a in arrays]
    for i in range(out[0].shape[0]):
        flip = cfg.mirror_augment and rng.random() < 0.5
        turns = int(rng.integers(4)) if cfg.rotate_augment and out[0].shape[1] == out[0].shape[2] else 0
        for a in out:
            img = a[i]
            if flip:
                img = img[:, ::-1]
            a[i] = np.rot90(img, turns)
    return out


def _batches(indices, batch_size, rng):
    order = np.array(indices)[rng.permutation(len(indices))]
    for s in range(0, len(order), batch_size):
        yield order[s : s + batch_size]


# -- flow surrogate ------------------------------------------------------------------


def flow_inputs(net: FlowSurrogateNet, ds: Dataset, idx, sigmas) -> Tensor:
    coords = np.stack([ds.samples[i].coords for i in idx]).astype(np.float32)
    feed = np.array([ds.samples[i].feedrate for i in idx], np.float32)
    with T.no_grad():
        images = [
            soft_rasterize(Tensor(coords[k : k + 1]), feed[k], ds.grid, float(sigmas[k])).data
            for k in range(len(idx))
        ]
        dep = Tensor(np.concatenate(images))
        return net.inputs(dep, Tensor(feed), ds.grid)


def _flow_loss_and_iou(net, ds, idx, sigma):
    with T.no_grad():
        x = flow_inputs(net, ds, idx, np.full(len(idx), sigma))
        logits = net.logits(x)
        target = np.stack([ds.samples[i].footprint for i in idx]).astype(np.float32)[:, None]
        loss = T.binary_cross_entropy_with_logits(logits, Tensor(target)).item()
        pred = logits.data > 0
        inter = np.logical_and(pred, target > 0.5).sum(axis=(1, 2, 3))
        union = np.logical_or(pred, target > 0.5).sum(axis=(1, 2, 3))
        return loss, inter / np.maximum(union, 1)


def pretrain_flow(ds: Dataset, epochs: int, seed: int, cfg: Config = Config(), train_idx=None, val_idx=None):
    """Fit the flow surrogate to oracle footprints; returns (net, log, summary).

    Training inputs are rasterized with a width drawn per sample from the
    process-training annealing range so the frozen surrogate stays valid as
    the rasterizer sharpens.
    """
    if len(ds) == 0:
        raise DatasetEmpty("pretraining dataset is empty")
    train_idx = ds.split("train") if train_idx is None else list(train_idx)
    val_idx = ds.split("val") if val_idx is None else list(val_idx)
    if not train_idx:
        train_idx = list(range(len(ds)))
    if not val_idx:
        val_idx = train_idx
    net = FlowSurrogateNet(ds.grid, seed)
    opt = T.Adam(net.parameters(), learning_rate=cfg.surrogate_learning_rate)
    tlog = TrainLog(cfg.timing_in_logs)
    best = (np.inf, _snapshot(net), 0)
    for epoch in range(1, epochs + 1):
        rng = np.random.default_rng([seed, epoch, 11])
        start, losses = time.perf_counter(), []
        for idx in _batches(train_idx, cfg.surrogate_batch_size, rng):
            sig = rng.uniform(cfg.sigma_min, cfg.sigma, size=len(idx))
            x = flow_inputs(net, ds, idx, sig)
            target = np.stack([ds.samples[i].footprint for i in idx]).astype(np.float32)
            dep, target = _augment([x.data[:, 0], target], rng, cfg)
            x = Tensor(np.stack([dep, x.data[:, 1]], axis=1))
            opt.zero_grad()
            loss = T.binary_cross_entropy_with_logits(net.logits(x), Tensor(target[:, None]))
            loss.backward()
            opt.step()
            losses.append(loss.item())
        ms = (time.perf_counter() - start) * 1000.0 / len(train_idx)
        tlog.add(epoch, "train", np.mean(losses), ms=ms)
        val_loss, iou = _flow_loss_and_iou(net, ds, val_idx, cfg.sigma)
        tlog.add(epoch, "val", val_loss, coverage=float(np.mean(iou)))
        log.info("flow epoch %d train %.4f val %.4f iou %.3f", epoch, np.mean(losses), val_loss, np.mean(iou))
        if val_loss < best[0]:
            best = (val_loss, _snapshot(net), epoch)
    _restore(net, best[1])
    _, iou = _flow_loss_and_iou(net, ds, val_idx, cfg.sigma)
    summary = {"best_epoch": best[2], "val_loss": float(best[0]), "val_iou": float(np.mean(iou))}
    return net, tlog, summary


# -- void surrogate ------------------------------------------------------------------


def _void_targets(ds: Dataset, idx):
    vf = np.array([ds.samples[i].quality.void_fraction for i in idx], np.float32)
    return vf, (vf > 0).astype(np.float32)


def void_loss(net: VoidSurrogateNet, fp: Tensor, vf: np.ndarray, labels: np.ndarray) -> Tensor:
    """BCE on void presence plus squared error of the predicted fraction (in units of ``void_scale``)."""
    logits = net(fp).reshape(-1)
    prob = T.sigmoid(logits)
    bce = T.binary_cross_entropy_with_logits(logits, Tensor(labels))
    se = T.squared_error(prob, Tensor(vf / net.void_scale))
    return bce + se


def _void_eval(net, ds, idx):
    vf, labels = _void_targets(ds, idx)
    fp = np.stack([ds.samples[i].footprint for i in idx]).astype(np.float32)[:, None]
    with T.no_grad():
        loss = void_loss(net, Tensor(fp), vf, labels).item()
        prob = net.probability(Tensor(fp)).data
    acc = float(np.mean((prob > 0.5) == (labels > 0.5)))
    return loss, acc


def pretrain_void(ds: Dataset, epochs: int, seed: int, cfg: Config = Config(), train_idx=None, val_idx=None):
    """Fit the void surrogate on oracle footprints; returns (net, log, summary)."""
    if len(ds) == 0:
        raise DatasetEmpty("pretraining dataset is empty")
    train_idx = ds.split("train") if train_idx is None else list(train_idx)
    val_idx = ds.split("val") if val_idx is None else list(val_idx)
    if not train_idx:
        train_idx = list(range(len(ds)))
    if not val_idx:
        val_idx = train_idx
    vf, labels = _void_targets(ds, train_idx)
    if labels.min() == labels.max():
        raise DegenerateLabels("all void labels identical; the sampling config produces no contrast")
    scale = float(vf[vf > 0].mean())
    net = VoidSurrogateNet(ds.grid, seed, void_scale=scale)
    opt = T.Adam(net.parameters(), learning_rate=cfg.surrogate_learning_rate)
    tlog = TrainLog(cfg.timing_in_logs)
    best = (np.inf, _snapshot(net), 0)
    for epoch in range(1, epochs + 1):
        rng = np.random.default_rng([seed, epoch, 13])
        start, losses = time.perf_counter(), []
        for idx in _batches(train_idx, cfg.surrogate_batch_size, rng):
            fp = np.stack([ds.samples[i].footprint for i in idx]).astype(np.float32)
            (fp,) = _augment([fp], rng, cfg)
            bvf, blab = _void_targets(ds, idx)
            opt.zero_grad()
            loss = void_loss(net, Tensor(fp[:, None]), bvf, blab)
            loss.backward()
            opt.step()
            losses.append(loss.item())
        ms = (time.perf_counter() - start) * 1000.0 / len(train_idx)
        tlog.add(epoch, "train", np.mean(losses), ms=ms)
        val_loss, acc = _void_eval(net, ds, val_idx)
        tlog.add(epoch, "val", val_loss, void_rate=1.0 - acc)
        log.info("void epoch %d train %.4f val %.4f acc %.3f", epoch, np.mean(losses), val_loss, acc)
        if val_loss < best[0]:
            best = (val_loss, _snapshot(net), epoch)
    _restore(net, best[1])
    _, acc = _void_eval(net, ds, val_idx)
    summary = {"best_epoch": best[2], "val_loss": float(best[0]), "val_accuracy": acc, "void_scale": scale}
    return net, tlog, summary


# -- process network ------------------------------------------------------------------


@dataclass
class OracleScore:
    reports: list[QualityReport]
    predicted: np.ndarray  # surrogate objective per area

    @property
    def objective(self) -> float:
        return float(np.mean([r.objective for r in self.reports]))

    @property
    def coverage(self) -> float:
        return float(np.mean([r.coverage for r in self.reports]))

    @property
    def overflow(self) -> float:
        return float(np.mean([r.overflow for r in self.reports]))

    @property
    def void_rate(self) -> float:
        return float(np.mean([r.void_count > 0 for r in self.reports]))

    @property
    def gap(self) -> float:
        return float(np.mean(np.abs(self.predicted - np.array([r.objective for r in self.reports]))))


def oracle_score(net: ProcessNet, areas: list[TargetArea], quality: QualityNet, cfg: Config) -> OracleScore:
    """Exact objective of the network's paths, alongside the surrogate's prediction."""
    params = FlowParams.from_config(cfg)
    masks = np.stack([a.mask for a in areas]).astype(np.float32)
    raw = infer_raw(net, masks[:, None])
    with T.no_grad():
        predicted = quality.predict(masks, T.sigmoid(Tensor(raw))).data.astype(np.float64)
    reports = []
    for area, r in zip(areas, raw):
        path = decode_path(r)
        try:
            path = path.with_feedrate(feedrate_for(path, area, cfg.min_path_length))
        except ZeroLengthPath:
            reports.append(penalty_report(cfg.penalty_max))
            continue
        reports.append(evaluate(path, area, cfg.weights, params, cfg.penalty_max))
    return OracleScore(reports, predicted)


def train_process(
    ds: Dataset,
    quality: QualityNet,
    epochs: int,
    seed: int,
    cfg: Config = Config(),
    train_idx=None,
    val_idx=None,
    progress=None,
):
    """Label-free training of the process network; returns (net, log, summary).

    The loss is the mean predicted objective of a batch. The quality model is
    frozen: its parameter hash is checked after every epoch.
    """
    if not quality.pretrained:
        raise NotPretrained("quality model has no pretrained surrogate weights")
    if len(ds) == 0:
        raise DatasetEmpty("area dataset is empty")
    train_idx = ds.split("train") if train_idx is None else list(train_idx)
    val_idx = ds.split("val") if val_idx is None else list(val_idx)
    if not train_idx:
        train_idx = list(range(len(ds)))
    if not val_idx:
        val_idx = train_idx
    val_idx = val_idx[: cfg.oracle_val_areas]
    val_areas = ds.areas(val_idx)
    val_masks = np.stack([a.mask for a in val_areas]).astype(np.float32)

    quality.freeze()
    frozen_hash = quality.parameter_hash()
    net = ProcessNet(ds.grid, seed)
    opt = T.Adam(net.parameters(), learning_rate=cfg.learning_rate)
    tlog = TrainLog(cfg.timing_in_logs)
    best = (np.inf, _snapshot(net), 0)
    history = []
    last_improvement = 0
    for epoch in range(1, epochs + 1):
        quality.sigma = sigma_at(epoch - 1, cfg)
        rng = np.random.default_rng([seed, epoch, 17])
        start, losses = time.perf_counter(), []
        for idx in _batches(train_idx, cfg.batch_size, rng):
            masks = np.stack([ds.samples[i].mask for i in idx]).astype(np.float32)
            (masks,) = _augment([masks], rng, cfg)
            opt.zero_grad()
            raw = net(Tensor(masks[:, None]))
            loss = quality.predict(masks, T.sigmoid(raw)).mean()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        ms = (time.perf_counter() - start) * 1000.0 / len(train_idx)
        tlog.add(epoch, "train", np.mean(losses), ms=ms)
        if quality.parameter_hash() != frozen_hash:
            raise FrozenViolation(f"quality model parameters changed during epoch {epoch}")

        if epoch % cfg.oracle_every == 0 or epoch == epochs:
            t0 = time.perf_counter()
            with T.no_grad():
                infer_raw(net, val_masks[:, None])
            infer_ms = (time.perf_counter() - t0) * 1000.0 / len(val_areas)
            score = oracle_score(net, val_areas, quality, cfg)
            tlog.add(epoch, "val", float(np.mean(score.predicted)), score.objective, score.coverage, score.void_rate, infer_ms)
            entry = {
                "epoch": epoch,
                "sigma": quality.sigma,
                "train_loss": float(np.mean(losses)),
                "oracle_J": score.objective,
                "coverage": score.coverage,
                "overflow": score.overflow,
                "void_rate": score.void_rate,
                "gap": score.gap,
            }
            if score.objective < best[0]:
                best = (score.objective, _snapshot(net), epoch)
                last_improvement = epoch
            entry["best_oracle_J"] = best[0]
            history.append(entry)
            log.info(
                "process epoch %d sigma %.3f loss %.4f oracle J %.4f C %.3f overflow %.3f voids %.3f gap %.3f",
                epoch, quality.sigma, entry["train_loss"], score.objective, score.coverage,
                score.overflow, score.void_rate, score.gap,
            )  # fmt: skip
            if progress:
                progress(entry)
            if epoch - last_improvement >= cfg.patience:
                log.info("early stop at epoch %d (best %d)", epoch, best[2])
                break
    _restore(net, best[1])
    summary = {"best_epoch": best[2], "best_oracle_J": float(best[0]), "history": history, "quality_hash": frozen_hash}
    return net, tlog, summary


# -- evaluation ----------------------------------------------------------------------

REPORT_COLUMNS = ("area_id", "coverage", "overflow", "void_count", "objective", "inference_ms")


@dataclass
class SuiteRow:
    area_id: str
    report: QualityReport
    inference_ms: float
    path: object = None
    footprint: np.ndarray | None = None


def evaluate_suite(net: ProcessNet, areas, cfg: Config = Config(), ids=None) -> list[SuiteRow]:
    """Infer, simulate and score every area (no files written; see ``write_suite``)."""
    from .models import timed_infer

    params = FlowParams.from_config(cfg)
    ids = [str(i) for i in range(len(areas))] if ids is None else [str(i) for i in ids]
    rows = []
    for area_id, area in zip(ids, areas):
        try:
            path, ms = timed_infer(area, net)
        except ZeroLengthPath:
            rows.append(SuiteRow(area_id, penalty_report(cfg.penalty_max), float("nan")))
            continue
        report, sim = simulate_and_score(path, area, cfg.weights, params, cfg.penalty_max)
        rows.append(SuiteRow(area_id, report, ms, path, None if sim is None else sim.footprint))
    return rows


def suite_csv(rows: list[SuiteRow], timing: bool = False) -> str:
    """Per-area rows plus a final ``mean`` row; the mean row is the exact average of the others."""
    buf = io.StringIO()
    buf.write(",".join(REPORT_COLUMNS) + "\n")
    for r in rows:
        q = r.report
        ms = repr(r.inference_ms) if timing else ""
        buf.write(f"{r.area_id},{q.coverage!r},{q.overflow!r},{q.void_count},{q.objective!r},{ms}\n")
    if rows:
        mean = lambda xs: float(np.mean(xs))  # noqa: E731
        agg = [
            mean([r.report.coverage for r in rows]),
            mean([r.report.overflow for r in rows]),
            mean([r.report.void_count for r in rows]),
            mean([r.report.objective for r in rows]),
        ]
        timed = [r.inference_ms for r in rows if np.isfinite(r.inference_ms)]
        ms = repr(mean(timed)) if timing and timed else ""
        buf.write("mean," + ",".join(repr(v) for v in agg) + f",{ms}\n")
    return buf.getvalue()
