"""Training loop: dual-stream SGD under the combined supervised + pair
objective, with polynomial learning-rate decay, momentum and weight decay,
per-epoch validation, binary checkpoints that support bit-identical resume,
and a finite-difference gradient checker for the full composite objective.

Every iteration draws one batch from the labeled stream and one from the
pair stream (the pair stream cycles with reshuffling when exhausted).
Iterations per epoch come from the labeled train split size. All shuffling
uses dedicated rng streams, so disabling the pair stream leaves the labeled
stream's draws untouched.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .corpus import Corpus
from .errors import TrainingError, ValidationError
from .losses import (TrainClock, lambda_weight, pair_loss_grads,
                     supervised_loss_grads, total_loss)
from .metrics import ConfusionMatrix, accumulate, metrics
from .model import PARAM_NAMES, ToyNet
from .pairing import PairSet
from .util import atomic_write_bytes, atomic_write_text, resize_image, resize_mask

CHECKPOINT_MAGIC = b"SLRC1\n"

METRIC_COLUMNS = ("iter", "epoch", "lr", "lambda", "mean_eta",
                  "loss_sup", "loss_pair", "loss_total")
EPOCH_COLUMNS = ("epoch", "val_miou", "val_pixacc")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    batch_size: int = 8
    base_lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 1e-4
    poly_power: float = 0.9
    resolution: int = 64
    f1: int = 8
    f2: int = 8
    seed: int = 0
    dtype: str = "float64"
    use_pairs: bool = True
    use_eta: bool = True
    use_lambda: bool = True
    eta_include_background: bool = True

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.resolution < 3:
            raise ValidationError("bad training config: epochs >= 0, batch >= 1, resolution >= 3")
        if self.dtype not in ("float64", "float32"):
            raise ValidationError(f"dtype must be float64 or float32, got {self.dtype}")

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32


@dataclass
class OptimizerState:
    velocity: dict[str, np.ndarray]
    base_lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 1e-4
    poly_power: float = 0.9

    @classmethod
    def for_net(cls, net: ToyNet, base_lr: float = 0.02, momentum: float = 0.9,
                weight_decay: float = 1e-4, poly_power: float = 0.9) -> "OptimizerState":
        return cls(velocity={k: np.zeros_like(v) for k, v in net.params.items()},
                   base_lr=base_lr, momentum=momentum,
                   weight_decay=weight_decay, poly_power=poly_power)


def poly_lr(base_lr: float, clock: TrainClock, power: float = 0.9) -> float:
    """base_lr * (1 - t / max_iters) ** power; strictly decreasing in t."""
    return base_lr * (1.0 - clock.global_step / clock.max_iters) ** power


def sgd_step(net: ToyNet, grads: dict[str, np.ndarray], opt: OptimizerState,
             lr: float) -> None:
    """Momentum SGD with weight decay folded into the gradient:
    v <- momentum * v + grad + weight_decay * param; param <- param - lr * v."""
    for name in PARAM_NAMES:
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in {name!r}; aborting step")
        v = opt.velocity[name]
        v *= opt.momentum
        v += g + opt.weight_decay * net.params[name]
        net.params[name] -= lr * v
        if not np.all(np.isfinite(net.params[name])):
            raise TrainingError(f"non-finite parameter {name!r} after update")


class _PairCycler:
    """Endless batches over the pair list, reshuffling at each pass."""

    def __init__(self, n_pairs: int, rng: np.random.Generator,
                 order: list[int] | None = None, pos: int = 0):
        self.n = n_pairs
        self.rng = rng
        self.order = list(order) if order is not None else []
        self.pos = pos

    def draw(self, count: int) -> list[int]:
        out = []
        for _ in range(count):
            if self.pos >= len(self.order):
                self.order = [int(i) for i in self.rng.permutation(self.n)]
                self.pos = 0
            out.append(self.order[self.pos])
            self.pos += 1
        return out


@dataclass
class TrainResult:
    rows: list[dict]
    epoch_rows: list[dict]
    best_epoch: int | None
    best_val_miou: float | None
    net: ToyNet
    best_net: ToyNet
    out_dir: Path | None = None


def _load_training_arrays(corpus: Corpus, needed: set[str], resolution: int,
                          dtype) -> dict[str, tuple[np.ndarray, np.ndarray | None]]:
    cache: dict[str, tuple[np.ndarray, np.ndarray | None]] = {}
    for rid in sorted(needed):
        rec = corpus.record(rid)
        img = corpus.load_image(rec).astype(np.float64) / 255.0
        img = resize_image(img, resolution, resolution).astype(dtype)
        mask = None
        if rec.mask_path is not None:
            mask = resize_mask(corpus.load_mask(rec).data, resolution, resolution)
            mask = mask.astype(np.int64)
        cache[rid] = (img, mask)
    return cache


def evaluate_model(net: ToyNet, items: list[tuple[np.ndarray, np.ndarray]],
                   num_classes: int) -> tuple[float, float]:
    """Mean IoU and pixel accuracy of argmax predictions over (image, mask)."""
    cm = ConfusionMatrix(num_classes)
    for img, mask in items:
        probs, _ = net.forward(img)
        accumulate(cm, probs.argmax(axis=-1), mask)
    scores = metrics(cm)
    return scores.mean_iou, scores.pixel_acc


def train(corpus: Corpus, pairs: PairSet | None, config: TrainConfig,
          out_dir: Path | str | None = None, config_hash: str = "",
          resume_from: Path | str | None = None) -> TrainResult:
    """Run (or resume) a training run; deterministic given the seed.

    Writes metrics.csv, epochs.csv, checkpoint_last.slrc and
    checkpoint_best.slrc under out_dir when given.
    """
    labeled = sorted((r for r in corpus.records if r.split == "train"),
                     key=lambda r: r.sort_key())
    if not labeled:
        raise ValidationError("empty labeled train split")
    val_records = sorted((r for r in corpus.records if r.split == "val"),
                         key=lambda r: r.sort_key())
    pair_list = list(pairs) if (pairs is not None and config.use_pairs) else []
    if pair_list:
        PairSet(pair_list).validate_against(corpus)

    dtype = config.np_dtype
    needed = {r.id for r in labeled} | {r.id for r in val_records}
    for p in pair_list:
        needed.add(p.labeled_id)
        needed.add(p.pseudo_id)
    cache = _load_training_arrays(corpus, needed, config.resolution, dtype)

    ipe = math.ceil(len(labeled) / config.batch_size)
    max_iters = max(config.epochs * ipe, 1)

    seeds = np.random.SeedSequence(config.seed).spawn(3)
    rng_init = np.random.default_rng(seeds[0])
    rng_lab = np.random.default_rng(seeds[1])
    rng_pair = np.random.default_rng(seeds[2])

    net = ToyNet.init(corpus.num_classes, f1=config.f1, f2=config.f2,
                      rng=rng_init, dtype=dtype)
    opt = OptimizerState.for_net(net, base_lr=config.base_lr, momentum=config.momentum,
                                 weight_decay=config.weight_decay,
                                 poly_power=config.poly_power)
    cycler = _PairCycler(len(pair_list), rng_pair)
    rows: list[dict] = []
    epoch_rows: list[dict] = []
    best_epoch: int | None = None
    best_val_miou: float | None = None
    best_net = net.copy()
    start_epoch = 0

    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        if ckpt["config"] != asdict(config):
            raise ValidationError("checkpoint config does not match the requested config")
        for name in PARAM_NAMES:
            net.params[name] = ckpt["params"][name].astype(dtype)
            opt.velocity[name] = ckpt["velocity"][name].astype(dtype)
        rng_lab.bit_generator.state = ckpt["rng"]["labeled"]
        rng_pair.bit_generator.state = ckpt["rng"]["pairs"]
        cycler = _PairCycler(len(pair_list), rng_pair,
                             order=ckpt["pair_cycler"]["order"],
                             pos=ckpt["pair_cycler"]["pos"])
        rows = list(ckpt["rows"])
        epoch_rows = list(ckpt["epoch_rows"])
        best_epoch = ckpt["best_epoch"]
        best_val_miou = ckpt["best_val_miou"]
        if ckpt["best_params"] is not None:
            best_net = ToyNet({k: v.astype(dtype) for k, v in ckpt["best_params"].items()})
        start_epoch = ckpt["epochs_completed"]

    val_items = [(cache[r.id][0], cache[r.id][1]) for r in val_records]

    for epoch in range(start_epoch, config.epochs):
        perm = rng_lab.permutation(len(labeled))
        for it in range(ipe):
            clock = TrainClock(epoch=epoch, ipe=ipe, iteration=it, max_iters=max_iters)
            lr = poly_lr(opt.base_lr, clock, opt.poly_power)
            grads = net.zero_grads()

            batch_ids = [labeled[i].id for i in perm[it * config.batch_size:
                                                     (it + 1) * config.batch_size]]
            sup_batch = []
            sup_caches = []
            for rid in batch_ids:
                img, mask = cache[rid]
                probs, fcache = net.forward(img)
                sup_batch.append((probs, mask))
                sup_caches.append(fcache)
            loss_sup, sup_grads = supervised_loss_grads(sup_batch)
            for fcache, dlog in zip(sup_caches, sup_grads):
                for name, g in net.backward(fcache, dlog).items():
                    grads[name] += g

            loss_pair = 0.0
            loss_pair_lab = 0.0
            loss_pair_pl = 0.0
            mean_eta = float("nan")
            lam = lambda_weight(clock) if config.use_lambda else 1.0
            if pair_list:
                picks = cycler.draw(config.batch_size)
                pair_batch = []
                caches_l = []
                caches_pl = []
                for idx in picks:
                    p = pair_list[idx]
                    img_l, mask = cache[p.labeled_id]
                    img_pl, _ = cache[p.pseudo_id]
                    probs_l, c_l = net.forward(img_l)
                    probs_pl, c_pl = net.forward(img_pl)
                    pair_batch.append((probs_l, probs_pl, mask))
                    caches_l.append(c_l)
                    caches_pl.append(c_pl)
                res = pair_loss_grads(
                    pair_batch, clock, use_eta=config.use_eta,
                    use_lambda=config.use_lambda,
                    eta_include_background=config.eta_include_background,
                )
                loss_pair = res.loss
                loss_pair_lab = res.labeled_half
                loss_pair_pl = res.pseudo_half
                lam = res.lambda_value
                mean_eta = float(np.mean(res.eta_values))
                for c_l, g_l in zip(caches_l, res.grads_labeled):
                    for name, g in net.backward(c_l, g_l).items():
                        grads[name] += g
                for c_pl, g_pl in zip(caches_pl, res.grads_pseudo):
                    for name, g in net.backward(c_pl, g_pl).items():
                        grads[name] += g

            loss = total_loss(loss_sup, loss_pair)
            sgd_step(net, grads, opt, lr)
            rows.append({
                "iter": clock.global_step, "epoch": epoch, "lr": lr, "lambda": lam,
                "mean_eta": mean_eta, "loss_sup": loss_sup, "loss_pair": loss_pair,
                "loss_total": loss,
                "loss_pair_lab": loss_pair_lab, "loss_pair_pl": loss_pair_pl,
            })

        if val_items:
            val_miou, val_pixacc = evaluate_model(net, val_items, corpus.num_classes)
            epoch_rows.append({"epoch": epoch, "val_miou": val_miou,
                               "val_pixacc": val_pixacc})
            if best_val_miou is None or val_miou > best_val_miou:
                best_val_miou = val_miou
                best_epoch = epoch
                best_net = net.copy()
        else:
            best_net = net.copy()

    result = TrainResult(rows=rows, epoch_rows=epoch_rows, best_epoch=best_epoch,
                         best_val_miou=best_val_miou, net=net, best_net=best_net,
                         out_dir=Path(out_dir) if out_dir else None)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_metrics_csv(out_dir / "metrics.csv", rows, config_hash)
        write_epochs_csv(out_dir / "epochs.csv", epoch_rows, config_hash)
        save_checkpoint(
            out_dir / "checkpoint_last.slrc", net, opt, config, config_hash,
            epochs_completed=config.epochs, rng_labeled=rng_lab, rng_pairs=rng_pair,
            cycler=cycler, rows=rows, epoch_rows=epoch_rows,
            best_epoch=best_epoch, best_val_miou=best_val_miou,
            best_params=best_net.params,
        )
        save_checkpoint(
            out_dir / "checkpoint_best.slrc", best_net, opt, config, config_hash,
            epochs_completed=config.epochs, rng_labeled=rng_lab, rng_pairs=rng_pair,
            cycler=cycler, rows=[], epoch_rows=epoch_rows,
            best_epoch=best_epoch, best_val_miou=best_val_miou,
            best_params=None,
        )
    return result


def _fmt_float(v: float) -> str:
    return repr(float(v))


def write_metrics_csv(path: Path, rows: list[dict], config_hash: str = "") -> None:
    lines = []
    if config_hash:
        lines.append(f"# config={config_hash}")
    lines.append(",".join(METRIC_COLUMNS))
    for row in rows:
        lines.append(",".join(
            str(row[c]) if c in ("iter", "epoch") else _fmt_float(row[c])
            for c in METRIC_COLUMNS
        ))
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_epochs_csv(path: Path, rows: list[dict], config_hash: str = "") -> None:
    lines = []
    if config_hash:
        lines.append(f"# config={config_hash}")
    lines.append(",".join(EPOCH_COLUMNS))
    for row in rows:
        lines.append(",".join(
            str(row["epoch"]) if c == "epoch" else _fmt_float(row[c])
            for c in EPOCH_COLUMNS
        ))
    atomic_write_text(path, "\n".join(lines) + "\n")


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def save_checkpoint(path: Path | str, net: ToyNet, opt: OptimizerState,
                    config: TrainConfig, config_hash: str, *,
                    epochs_completed: int,
                    rng_labeled: np.random.Generator,
                    rng_pairs: np.random.Generator,
                    cycler: "_PairCycler",
                    rows: list[dict], epoch_rows: list[dict],
                    best_epoch: int | None, best_val_miou: float | None,
                    best_params: dict[str, np.ndarray] | None) -> None:
    """Binary checkpoint: magic, JSON metadata block, then little-endian
    float64 tensor data (params, velocities, optional best params).
    Written atomically (temp file + rename)."""
    tensors = [{"name": n, "shape": list(net.params[n].shape)} for n in PARAM_NAMES]
    meta = {
        "version": 1,
        "config": asdict(config),
        "config_hash": config_hash,
        "epochs_completed": epochs_completed,
        "tensors": tensors,
        "has_best_params": best_params is not None,
        "rng": {"labeled": _rng_state(rng_labeled), "pairs": _rng_state(rng_pairs)},
        "pair_cycler": {"order": cycler.order, "pos": cycler.pos},
        "rows": rows,
        "epoch_rows": epoch_rows,
        "best_epoch": best_epoch,
        "best_val_miou": best_val_miou,
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    blobs = [net.params[n].astype("<f8").tobytes() for n in PARAM_NAMES]
    blobs += [opt.velocity[n].astype("<f8").tobytes() for n in PARAM_NAMES]
    if best_params is not None:
        blobs += [best_params[n].astype("<f8").tobytes() for n in PARAM_NAMES]
    payload = CHECKPOINT_MAGIC + struct.pack("<Q", len(meta_bytes)) + meta_bytes + b"".join(blobs)
    atomic_write_bytes(path, payload)


def load_checkpoint(path: Path | str) -> dict:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise ValidationError(f"{path}: bad checkpoint magic")
    off = len(CHECKPOINT_MAGIC)
    (meta_len,) = struct.unpack_from("<Q", raw, off)
    off += 8
    meta = json.loads(raw[off:off + meta_len].decode("utf-8"))
    off += meta_len

    def read_block() -> dict[str, np.ndarray]:
        nonlocal off
        out = {}
        for spec in meta["tensors"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(shape)
            out[spec["name"]] = arr.copy()
            off += count * 8
        return out

    params = read_block()
    velocity = read_block()
    best_params = read_block() if meta["has_best_params"] else None
    return {
        "config": meta["config"],
        "config_hash": meta["config_hash"],
        "epochs_completed": meta["epochs_completed"],
        "params": params,
        "velocity": velocity,
        "best_params": best_params,
        "rng": meta["rng"],
        "pair_cycler": meta["pair_cycler"],
        "rows": meta["rows"],
        "epoch_rows": meta["epoch_rows"],
        "best_epoch": meta["best_epoch"],
        "best_val_miou": meta["best_val_miou"],
    }


def net_from_checkpoint(ckpt: dict, prefer_best: bool = True) -> ToyNet:
    params = ckpt["best_params"] if (prefer_best and ckpt["best_params"]) else ckpt["params"]
    return ToyNet({k: v.copy() for k, v in params.items()})


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_error: float
    mean_rel_error: float
    n_checked: int
    worst_param: str


def grad_check(net: ToyNet, image: np.ndarray, mask: np.ndarray,
               eps: float = 1e-5, max_params: int = 250,
               seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients of the full composite objective (supervised
    term plus pair term at lambda=0.5) against central finite differences on
    a random subsample of parameters. Requires float64 parameters."""
    if net.dtype != np.float64:
        raise ValidationError("gradient checking requires float64 parameters")
    image = np.asarray(image, dtype=np.float64)
    mask = np.asarray(getattr(mask, "data", mask))
    pseudo = np.roll(image, (1, 1), axis=(0, 1))
    clock = TrainClock(epoch=1, ipe=2, iteration=0, max_iters=4)

    def composite_loss() -> float:
        probs, _ = net.forward(image)
        sup, _ = supervised_loss_grads([(probs, mask)])
        probs_pl, _ = net.forward(pseudo)
        res = pair_loss_grads([(probs, probs_pl, mask)], clock)
        return total_loss(sup, res.loss)

    probs, cache_l = net.forward(image)
    sup, sup_grads = supervised_loss_grads([(probs, mask)])
    probs_pl, cache_pl = net.forward(pseudo)
    res = pair_loss_grads([(probs, probs_pl, mask)], clock)
    analytic = net.zero_grads()
    for name, g in net.backward(cache_l, sup_grads[0] + res.grads_labeled[0]).items():
        analytic[name] += g
    for name, g in net.backward(cache_pl, res.grads_pseudo[0]).items():
        analytic[name] += g

    positions = [(name, idx) for name in PARAM_NAMES
                 for idx in range(net.params[name].size)]
    rng = np.random.default_rng(seed)
    if len(positions) > max_params:
        chosen = rng.choice(len(positions), size=max_params, replace=False)
        positions = [positions[int(i)] for i in sorted(chosen)]

    max_err = 0.0
    errs = []
    worst = ""
    for name, idx in positions:
        flat = net.params[name].reshape(-1)
        orig = flat[idx]
        flat[idx] = orig + eps
        loss_plus = composite_loss()
        flat[idx] = orig - eps
        loss_minus = composite_loss()
        flat[idx] = orig
        numeric = (loss_plus - loss_minus) / (2 * eps)
        a = float(analytic[name].reshape(-1)[idx])
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        errs.append(err)
        if err > max_err:
            max_err = err
            worst = f"{name}[{idx}]"
    return GradCheckReport(max_rel_error=float(max_err),
                           mean_rel_error=float(np.mean(errs)),
                           n_checked=len(positions), worst_param=worst)
