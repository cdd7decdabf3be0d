"""Geographic cross-validation, augmentation sweeps, and repeated training runs.

Seed derivation: every random choice draws from
``numpy.random.default_rng([base_seed, crc32(purpose), crc32(key)...])`` with
purposes ``split``, ``init``, ``batch``, ``augment-train``, ``augment-val``.
Keys are ``(holdout, repeat)``, so all n values of one repeat share the split
and the initial weights; only the augmentation differs between them. The
augmented subset is re-drawn for every repeat.
"""
import json
import logging
import math
import os
import time
import zlib
from concurrent.futures import as_completed
from dataclasses import asdict, dataclass, field
from typing import Dict, List, NamedTuple, Optional

import numpy as np

from . import evaluate
from .nn import ModelConfig, ModelParams, NonFiniteError, OptimState, adam_step, forward, init_params
from .nn.checkpoint import save_checkpoint
from .nn.model import loss_and_grads
from .profile import IDENTITY, REFLECTED, ProfileConfig, stack_channels
from .transforms import UNIFORM, AugmentationPlan, augment_dataset, reflect

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


def derive_seed(base, purpose, *keys):
    """A 63-bit integer seed for ``purpose`` under ``keys``."""
    words = [int(base), zlib.crc32(purpose.encode())] + [zlib.crc32(str(k).encode()) for k in keys]
    return int(np.random.SeedSequence(words).generate_state(2, dtype=np.uint32).view(np.uint64)[0] >> 1)


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 40
    batch_size: int = 32
    learning_rate: float = 1e-3
    patience: int = 10

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.patience < 1 or not self.learning_rate > 0:
            raise ConfigError("epochs, batch_size, patience must be >= 1 and learning_rate > 0")


@dataclass(frozen=True)
class ExperimentConfig:
    regions: tuple = ("A", "B", "C", "D", "E", "F")
    holdouts: tuple = ()  # empty: every region in turn
    val_fraction: float = 0.2
    n_values: tuple = (0, 80, 500)
    repeats: int = 3
    seed: int = 0
    selection_scope: str = UNIFORM
    training: TrainingConfig = TrainingConfig()
    profile: ProfileConfig = ProfileConfig()
    model: ModelConfig = ModelConfig()

    def __post_init__(self):
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1")
        if any(n < 0 for n in self.n_values):
            raise ConfigError("n values must be >= 0")
        if not 0 < self.val_fraction < 1:
            raise ConfigError("val_fraction must be in (0, 1)")
        unknown = [h for h in self.holdouts if h not in self.regions]
        if unknown:
            raise ConfigError(f"holdout(s) {unknown} not among regions {list(self.regions)}")
        if len(self.regions) < 2:
            raise ConfigError("need at least two regions")

    @property
    def holdout_list(self):
        return tuple(self.holdouts) or tuple(self.regions)

    def to_dict(self):
        return {"regions": list(self.regions), "holdouts": list(self.holdouts),
                "val_fraction": self.val_fraction, "n_values": list(self.n_values),
                "repeats": self.repeats, "seed": self.seed, "selection_scope": self.selection_scope,
                "training": asdict(self.training), "profile": self.profile.to_dict(),
                "model": self.model.to_dict()}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        kw = {}
        for k in ("regions", "holdouts", "n_values"):
            if k in d:
                kw[k] = tuple(d.pop(k))
        if "training" in d:
            kw["training"] = TrainingConfig(**d.pop("training"))
        if "profile" in d:
            kw["profile"] = ProfileConfig.from_dict(d.pop("profile"))
        if "model" in d:
            kw["model"] = ModelConfig.from_dict(d.pop("model"))
        return cls(**kw, **d)


# --------------------------------------------------------------------------
# folds


class Fold(NamedTuple):
    train: Dict[str, list]
    val: Dict[str, list]
    test: list
    holdout: str


def make_folds(samples_by_region, holdout, val_fraction=0.2, seed=0) -> Fold:
    """Isolate ``holdout`` as the test set and split every other region by a seeded shuffle."""
    if holdout not in samples_by_region:
        raise KeyError(f"unknown region {holdout!r}")
    rest = [r for r in samples_by_region if r != holdout]
    if not rest:
        raise ConfigError("need at least one region besides the holdout")
    train, val = {}, {}
    for region in rest:
        items = list(samples_by_region[region])
        order = np.random.default_rng([int(seed), zlib.crc32(region.encode())]).permutation(len(items))
        n_val = int(round(val_fraction * len(items)))
        val[region] = [items[k] for k in order[:n_val]]
        train[region] = [items[k] for k in order[n_val:]]
    return Fold(train, val, list(samples_by_region[holdout]), holdout)


# --------------------------------------------------------------------------
# training


class Dataset(NamedTuple):
    x: np.ndarray  # (N, 4, L, W) float32
    y: np.ndarray  # (N,) float64 dB
    regions: tuple
    tags: tuple

    @classmethod
    def from_profiles(cls, profiles):
        profiles = list(profiles)
        return cls(stack_channels(profiles),
                   np.array([p.link.path_loss for p in profiles], dtype=np.float64),
                   tuple(p.link.region_id for p in profiles),
                   tuple(p.orientation_tag for p in profiles))

    def __len__(self):
        return len(self.y)


def _as_dataset(s):
    return s if isinstance(s, Dataset) else Dataset.from_profiles(s)


def predict(params, x, batch_size=256):
    return forward(params, x, batch_size=batch_size).astype(np.float64)


def train_model(train_set, val_set, config: ExperimentConfig, seed=0, batch_seed=None):
    """Adam on MSE with early stopping on validation RMSE.

    Returns ``(best_params, history)``; ``history[0]`` is the untrained model
    (epoch 0) and each entry holds ``epoch``, ``train_loss`` and ``val_rmse``.
    """
    train_set, val_set = _as_dataset(train_set), _as_dataset(val_set)
    if len(train_set) == 0:
        raise ConfigError("empty training set")
    if len(val_set) == 0:
        raise ConfigError("empty validation set")
    tc = config.training
    params = init_params(config.model, seed)
    state = OptimState.for_params(params.tensors, lr=tc.learning_rate)
    rng = np.random.default_rng(seed if batch_seed is None else batch_seed)
    val_rmse = evaluate.rmse(predict(params, val_set.x), val_set.y)
    history = [{"epoch": 0, "train_loss": None, "val_rmse": val_rmse}]
    best, best_rmse, since = params.copy(), val_rmse, 0
    tensors = params.tensors
    for epoch in range(1, tc.epochs + 1):
        order = rng.permutation(len(train_set))
        total, count = 0.0, 0
        for s in range(0, len(order), tc.batch_size):
            idx = np.sort(order[s:s + tc.batch_size])
            cur = ModelParams(config.model, tensors, params.init)
            try:
                loss, grads, _ = loss_and_grads(cur, train_set.x[idx], train_set.y[idx])
            except NonFiniteError as exc:
                raise NonFiniteError(f"epoch {epoch}, batch at {s}: {exc}") from None
            if not math.isfinite(loss):
                raise NonFiniteError(f"epoch {epoch}, batch at {s}: loss {loss}")
            tensors, state = adam_step(tensors, grads, state)
            total += loss * len(idx)
            count += len(idx)
        cur = ModelParams(config.model, tensors, params.init)
        val_rmse = evaluate.rmse(predict(cur, val_set.x), val_set.y)
        history.append({"epoch": epoch, "train_loss": total / count, "val_rmse": val_rmse})
        log.info("epoch %d train_rmse %.3f val_rmse %.3f", epoch, math.sqrt(total / count), val_rmse)
        if val_rmse < best_rmse:
            best, best_rmse, since = cur.copy(), val_rmse, 0
        else:
            since += 1
            if since >= tc.patience:
                break
    return best, history


# --------------------------------------------------------------------------
# sweep


@dataclass
class SweepData:
    regions: Dict[str, list]  # region -> identity PathProfileTensors
    backhaul: list = field(default_factory=list)


@dataclass
class RunResult:
    holdout: str
    n: int
    repeat: int
    status: str = "ok"
    rmse: dict = field(default_factory=dict)
    bias: dict = field(default_factory=dict)
    gap_mean: Optional[float] = None
    gap_sd: Optional[float] = None
    history: list = field(default_factory=list)
    seeds: dict = field(default_factory=dict)
    sizes: dict = field(default_factory=dict)
    wall_time: float = 0.0
    error: Optional[str] = None
    augmentation_redrawn_per_repeat: bool = True

    @property
    def key(self):
        return (self.holdout, int(self.n), int(self.repeat))

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def cell_dir(run_dir, holdout, n, repeat):
    return os.path.join(run_dir, "runs", str(holdout), str(n), str(repeat))


def read_manifest(path):
    if not os.path.exists(path):
        return []
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                try:
                    out.append(RunResult.from_dict(json.loads(line)))
                except (json.JSONDecodeError, TypeError):
                    log.warning("skipping unreadable manifest line")
    return out


def _append_manifest(path, result):
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(result.to_dict(), sort_keys=True) + "\n")
        fh.flush()
        os.fsync(fh.fileno())


def _split_n(n, val_fraction):
    n_val = int(round(n * val_fraction))
    return n - n_val, n_val


class CellInputs(NamedTuple):
    fold: Fold
    train: list
    val: list
    seeds: dict


def cell_seeds(config: ExperimentConfig, holdout, repeat):
    return {p: derive_seed(config.seed, p, holdout, repeat)
            for p in ("split", "init", "batch", "augment-train", "augment-val")}


def prepare_cell(regions, config: ExperimentConfig, holdout, n, repeat) -> CellInputs:
    """Fold, augmented train/val lists and seeds for one cell.

    ``n`` reflected samples per region are split between train and
    validation partitions in proportion to ``val_fraction``.
    """
    seeds = cell_seeds(config, holdout, repeat)
    fold = make_folds(regions, holdout, config.val_fraction, seeds["split"])
    n_tr, n_va = _split_n(n, config.val_fraction)
    train = augment_dataset(fold.train, AugmentationPlan(n_tr, seeds["augment-train"], config.selection_scope))
    val = augment_dataset(fold.val, AugmentationPlan(n_va, seeds["augment-val"], config.selection_scope))
    return CellInputs(fold, train, val, seeds)


def run_cell(data: SweepData, config: ExperimentConfig, holdout, n, repeat, out_dir=None) -> RunResult:
    """Train and evaluate one (holdout, n, repeat) cell."""
    t0 = time.perf_counter()
    fold, train, val, seeds = prepare_cell(data.regions, config, holdout, n, repeat)

    test_regions = {p.link.region_id for p in fold.test}
    seen = {p.link.region_id for p in train} | {p.link.region_id for p in val}
    if test_regions & seen:
        raise AssertionError(f"data leakage: test regions {test_regions & seen} in train/val")
    if any(p.orientation_tag != IDENTITY for p in fold.test):
        raise AssertionError("test set must hold identity profiles only")

    params, history = train_model(train, val, config, seeds["init"], seeds["batch"])

    test = Dataset.from_profiles(fold.test)
    reflected_profiles = [reflect(p) for p in fold.test]
    test_ref = Dataset.from_profiles(reflected_profiles)
    pred_id = predict(params, test.x)
    pred_ref = predict(params, test_ref.x)
    sets = {"identity": (pred_id, test.y), "reflected": (pred_ref, test_ref.y)}
    if data.backhaul:
        bh = Dataset.from_profiles(data.backhaul)
        sets["backhaul"] = (predict(params, bh.x), bh.y)
    gaps = pred_id - pred_ref

    result = RunResult(holdout, int(n), int(repeat), history=history, seeds=seeds,
                       sizes={"train": len(train), "val": len(val), "test": len(fold.test),
                              "train_reflected": sum(p.orientation_tag == REFLECTED for p in train),
                              "val_reflected": sum(p.orientation_tag == REFLECTED for p in val)})
    for name, (p, m) in sets.items():
        err = p - m
        result.rmse[name] = float(np.sqrt(np.mean(err ** 2)))
        result.bias[name] = float(np.mean(err))
    result.gap_mean, result.gap_sd = float(np.mean(gaps)), float(np.std(gaps))
    result.wall_time = time.perf_counter() - t0

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        save_checkpoint(params, os.path.join(out_dir, "model.rpnn"))
        cell = {name: {"predictions": p.tolist(), "measurements": m.tolist()} for name, (p, m) in sets.items()}
        cell["reciprocity_gaps"] = gaps.tolist()
        cell["history"] = history
        with open(os.path.join(out_dir, "cell.json"), "w", encoding="utf-8") as fh:
            json.dump(cell, fh, sort_keys=True)
    return result


def _cell_worker(args):
    data, config, holdout, n, repeat, out_dir = args
    try:
        return run_cell(data, config, holdout, n, repeat, out_dir)
    except Exception as exc:  # recorded in the manifest, never swallowed silently
        log.exception("cell %s/%s/%s failed", holdout, n, repeat)
        return RunResult(holdout, int(n), int(repeat), status="failed", error=f"{type(exc).__name__}: {exc}")


def sweep_cells(config: ExperimentConfig):
    return [(h, int(n), r) for h in config.holdout_list for n in config.n_values for r in range(config.repeats)]


def run_sweep(data: SweepData, config: ExperimentConfig, run_dir, resume=True, executor=None) -> List[RunResult]:
    """Run every (holdout, n, repeat) cell, appending results to ``manifest.jsonl``.

    With ``resume`` set, cells already recorded as ``ok`` are skipped; failed
    cells are retried. ``executor`` is an optional ``concurrent.futures``
    executor owned by the caller; cells run serially without one. Returns
    results for all cells in sweep order.
    """
    missing = [r for r in config.regions if r not in data.regions]
    if missing:
        raise ConfigError(f"no data for regions {missing}")
    os.makedirs(run_dir, exist_ok=True)
    manifest = os.path.join(run_dir, "manifest.jsonl")
    with open(os.path.join(run_dir, "experiment_config.json"), "w", encoding="utf-8") as fh:
        json.dump(config.to_dict(), fh, sort_keys=True, indent=1)
    done = {}
    if resume:
        for r in read_manifest(manifest):
            if r.status == "ok":
                done[r.key] = r
    elif os.path.exists(manifest):
        os.remove(manifest)
    sub = SweepData({r: data.regions[r] for r in config.regions}, data.backhaul)
    todo = [c for c in sweep_cells(config) if c not in done]
    args = [(sub, config, h, n, r, cell_dir(run_dir, h, n, r)) for h, n, r in todo]
    results = dict(done)
    if executor is not None and len(args) > 1:
        futures = [executor.submit(_cell_worker, a) for a in args]
        for fut in as_completed(futures):
            res = fut.result()
            _append_manifest(manifest, res)
            results[res.key] = res
    else:
        for a in args:
            res = _cell_worker(a)
            log.info("cell %s n=%s repeat=%s: %s %s", res.holdout, res.n, res.repeat, res.status, res.rmse)
            _append_manifest(manifest, res)
            results[res.key] = res
    return [results[c] for c in sweep_cells(config)]


def aggregate(results):
    """``{(testset, holdout, n): (mean, sd)}`` of RMSE across repeats (sample SD)."""
    cells = {}
    for r in results:
        if r.status != "ok":
            continue
        for ts, v in r.rmse.items():
            cells.setdefault((ts, r.holdout, r.n), []).append(v)
    return {k: (float(np.mean(v)), float(np.std(v, ddof=1)) if len(v) > 1 else 0.0)
            for k, v in cells.items()}


def gap_stats(results):
    """``{n: (mean of per-run gap means, mean of per-run gap SDs)}``."""
    by_n = {}
    for r in results:
        if r.status == "ok":
            by_n.setdefault(r.n, []).append((r.gap_mean, r.gap_sd))
    return {n: (float(np.mean([g[0] for g in v])), float(np.mean([g[1] for g in v])))
            for n, v in sorted(by_n.items())}
