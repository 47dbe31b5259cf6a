"""Proxy -> target experiment pipeline.

``run_search`` trains a supernet on the proxy split with alternating weight and
bitwidth-logit updates and extracts a policy; ``run_finetune`` trains a
fixed-policy network on the target data; ``run_transfer`` does both for ASGA
and the SAM / SGD baselines under identical seeds and summarizes.

Every output file is a pure function of (config, seed): no timestamps, floats
written with ``repr``.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import optim
from .autodiff import ParamSet
from .config import ExperimentConfig
from .data import Dataset, canonical_order, load_dataset, split, validate_labels
from .errors import ContractError, FormatError, NumericError
from .optim import METHODS, OptimizerState, StepReport, rho_rule, write_step_csv
from .sharpness import SharpnessReport, sharpness_report
from .supernet import MpqPolicy, SearchState, Supernet, alternate_update

log = logging.getLogger(__name__)

# RNG stream ids mixed with the run seed
_INIT, _SPLIT, _SHUFFLE, _PROBE, _OPT = range(5)


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), stream])


# metrics -------------------------------------------------------------------

@dataclass
class MetricsRow:
    phase: str          # search | finetune | eval
    epoch: int
    dataset: str        # proxy | target
    accuracy: float
    loss: float
    perturbed_loss: float
    gap: float
    sigma_gap: float
    rho: float
    total_bops: float

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ContractError(f"accuracy must lie in [0, 1], got {self.accuracy}")


METRIC_COLUMNS = [f.name for f in dataclasses.fields(MetricsRow)]


def write_metrics_csv(rows: Sequence[MetricsRow], path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        for r in rows:
            out = []
            for c in METRIC_COLUMNS:
                v = getattr(r, c)
                out.append(repr(float(v)) if isinstance(v, float) else v)
            w.writerow(out)
    return path


def read_metrics_csv(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def _row(phase: str, epoch: int, dataset: str, acc: float, rep: SharpnessReport,
         bops: float) -> MetricsRow:
    return MetricsRow(phase, epoch, dataset, acc, rep.loss, rep.perturbed_loss, rep.gap,
                      rep.sigma_gap, rep.rho, bops)


# checkpoints ---------------------------------------------------------------

CKPT_MAGIC = b"ASGACKPT"


def save_checkpoint(params: ParamSet, path, meta: dict | None = None) -> Path:
    """Magic, u64 LE header length, JSON header, then float64 LE values."""
    header = {"params": [{"name": n, "shape": list(t.shape)} for n, t in params.items()],
              "meta": meta or {}}
    hb = json.dumps(header, sort_keys=True).encode()
    body = params.vector().astype("<f8").tobytes()
    path = Path(path)
    path.write_bytes(CKPT_MAGIC + struct.pack("<Q", len(hb)) + hb + body)
    return path


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic at offset 0)")
    if len(raw) < 16:
        raise FormatError(f"{path}: truncated at offset {len(raw)}")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    try:
        header = json.loads(raw[16:16 + hlen])
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: bad header at offset 16: {exc}") from exc
    body = np.frombuffer(raw, dtype="<f8", offset=16 + hlen)
    arrays, offset = {}, 0
    for p in header["params"]:
        shape = tuple(p["shape"])
        n = int(np.prod(shape))
        if offset + n > body.size:
            raise FormatError(f"{path}: truncated at offset {16 + hlen + 8 * body.size}")
        arrays[p["name"]] = body[offset:offset + n].reshape(shape).astype(np.float64)
        offset += n
    if offset != body.size:
        raise FormatError(f"{path}: {body.size - offset} trailing values")
    return arrays, header.get("meta", {})


def restore_checkpoint(params: ParamSet, arrays: dict[str, np.ndarray]) -> None:
    if list(arrays) != list(params):
        raise ContractError(f"checkpoint parameters {list(arrays)} do not match model {list(params)}")
    for name, t in params.items():
        if arrays[name].shape != t.shape:
            raise ContractError(f"{name}: checkpoint shape {arrays[name].shape} vs model {t.shape}")
        t.values[...] = arrays[name]


def model_from_checkpoint(config: ExperimentConfig, path, seed: int | None = None):
    """Rebuild the supernet or fixed-policy network saved at ``path``."""
    arrays, meta = load_checkpoint(path)
    seed = config.seed if seed is None else seed
    if meta.get("kind") == "finetune":
        model = Supernet.from_policy(config.model, MpqPolicy.from_dict(meta["policy"]))
        restore_checkpoint(model.params, arrays)
    else:
        model = build_supernet(config, seed)
        restore_checkpoint(model.all_params, arrays)
    return model, meta


# data plumbing ---------------------------------------------------------------

def prepare(ds: Dataset, n_classes: int) -> Dataset:
    validate_labels(ds, n_classes)
    return canonical_order(ds)


def minibatches(ds: Dataset, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(len(ds))
    for start in range(0, len(ds), batch_size):
        idx = perm[start:start + batch_size]
        yield ds.X[idx], ds.y[idx]


def build_supernet(config: ExperimentConfig, seed: int) -> Supernet:
    return Supernet(config.model, config.candidates, rng=_rng(seed, _INIT),
                    fix_first_last=config.fix_first_last, fixed_bits=config.fixed_bits)


def resolve_budget(config: ExperimentConfig, model: Supernet) -> float:
    if config.budget is not None:
        return float(config.budget)
    return config.budget_fraction * model.max_bops()


def _out(out_dir, config: ExperimentConfig) -> Path:
    p = Path(out_dir if out_dir is not None else config.output_dir)
    p.mkdir(parents=True, exist_ok=True)
    return p


# search --------------------------------------------------------------------

@dataclass
class SearchResult:
    policy: MpqPolicy
    rows: list[MetricsRow]
    steps: list[StepReport]
    model: Supernet
    out_dir: Path
    checkpoints: list[Path] = field(default_factory=list)

    @property
    def final(self) -> MetricsRow:
        return self.rows[-1]


def run_search(config: ExperimentConfig, method: str = "asga", seed: int | None = None,
               out_dir=None, proxy: Dataset | None = None,
               update_arch: bool = True) -> SearchResult:
    if method not in METHODS:
        raise ContractError(f"unknown method {method!r}; expected one of {METHODS}")
    seed = config.seed if seed is None else seed
    out = _out(out_dir, config)
    n_classes = config.model[-1]
    ds = prepare(proxy if proxy is not None else load_dataset(config.proxy), n_classes)
    train, val = split(ds, config.val_fraction, int(_rng(seed, _SPLIT).integers(2**31)))

    model = build_supernet(config, seed)
    budget = resolve_budget(config, model)
    state = SearchState(model, method, config.asga, config.arch_lr, update_arch,
                        OptimizerState(seed=int(_rng(seed, _OPT).integers(2**31))))
    shuffle = _rng(seed, _SHUFFLE)
    rows, steps, ckpts = [], [], []
    rho_probe = config.asga.rho0

    for epoch in range(1, config.epochs_search + 1):
        val_batches = list(minibatches(val, config.batch_size, shuffle))
        try:
            for i, wb in enumerate(minibatches(train, config.batch_size, shuffle)):
                alternate_update(state, wb, val_batches[i % len(val_batches)])
                steps.append(state.last_report)
                if state.last_report.loss > 1e6:
                    raise NumericError(f"search diverged: loss {state.last_report.loss} "
                                       f"at step {state.theta_steps}")
            rep = sharpness_report(model, train.batch, rho_probe, seed=seed)
        except NumericError as exc:
            write_metrics_csv(rows, out / "metrics_search.csv")
            last = ckpts[-1] if ckpts else None
            raise NumericError(f"{exc}; last good checkpoint: {last}") from exc
        bops = model.policy(budget).total_bops
        rows.append(_row("search", epoch, "proxy", model.accuracy(val.batch), rep, bops))
        ckpts.append(save_checkpoint(model.all_params, out / f"search_epoch{epoch:03d}.ckpt",
                                     {"kind": "search", "epoch": epoch, "seed": seed,
                                      "method": method}))
        log.info("search %s seed=%d epoch %d acc=%.4f gap=%.3g bops=%g", method, seed, epoch,
                 rows[-1].accuracy, rep.gap, bops)

    policy = model.policy(budget)
    policy.save(out / "policy.json")
    write_metrics_csv(rows, out / "metrics_search.csv")
    write_step_csv(steps, out / "steps_search.csv")
    return SearchResult(policy, rows, steps, model, out, ckpts)


# finetune ------------------------------------------------------------------

@dataclass
class FinetuneResult:
    rows: list[MetricsRow]
    model: object
    out_dir: Path | None

    @property
    def accuracy(self) -> float:
        return self.rows[-1].accuracy


def train_classifier(model, train: Dataset, test: Dataset, epochs: int, lr: float,
                     batch_size: int, seed: int, rho_probe: float, bops: float,
                     dataset: str = "target") -> list[MetricsRow]:
    """Plain minibatch SGD on weights; one metrics row per epoch plus a final eval row."""
    shuffle = _rng(seed, _SHUFFLE)
    state = OptimizerState(seed=seed)
    rows = []
    rep = None
    for epoch in range(1, epochs + 1):
        for batch in minibatches(train, batch_size, shuffle):
            r = optim.sgd_step(model, batch, lr, state)
            if r.loss > 1e6:
                raise NumericError(f"finetune diverged: loss {r.loss} at step {r.step}")
        rep = sharpness_report(model, train.batch, rho_probe, seed=seed)
        rows.append(_row("finetune", epoch, dataset, model.accuracy(test.batch), rep, bops))
    rows.append(_row("eval", epochs, dataset, model.accuracy(test.batch), rep, bops))
    return rows


def target_splits(config: ExperimentConfig, seed: int, target: Dataset | None = None):
    ds = prepare(target if target is not None else load_dataset(config.target), config.model[-1])
    return split(ds, config.test_fraction, int(_rng(seed, _SPLIT).integers(2**31)))


def run_finetune(policy: MpqPolicy, config: ExperimentConfig, seed: int | None = None,
                 out_dir=None, target: Dataset | None = None) -> FinetuneResult:
    seed = config.seed if seed is None else seed
    model = Supernet.from_policy(config.model, policy, rng=_rng(seed, _INIT))
    train, test = target_splits(config, seed, target)
    rows = train_classifier(model, train, test, config.epochs_finetune, config.finetune_lr,
                            config.batch_size, seed, config.asga.rho0, policy.total_bops)
    out = None
    if out_dir is not None or config.output_dir:
        out = _out(out_dir, config)
        write_metrics_csv(rows, out / "metrics_finetune.csv")
        save_checkpoint(model.params, out / "finetune_final.ckpt",
                        {"kind": "finetune", "seed": seed, "policy": policy.to_dict()})
    return FinetuneResult(rows, model, out)


# transfer ------------------------------------------------------------------

def _median(xs) -> float:
    return float(np.median(np.asarray(xs, dtype=float)))


def _transfer_run(config: ExperimentConfig, method: str, seed: int, out: Path,
                  proxy: Dataset, target: Dataset) -> dict:
    run_dir = out / method / f"seed{seed}"
    s = run_search(config, method, seed, run_dir, proxy=proxy)
    f = run_finetune(s.policy, config, seed, run_dir, target=target)
    return {"seed": seed, "target_accuracy": f.accuracy, "search_gap": s.final.gap,
            "search_sigma_gap": s.final.sigma_gap, "search_accuracy": s.final.accuracy,
            "total_bops": s.policy.total_bops, "feasible": s.policy.feasible,
            "policy": [[c.w_bits, c.a_bits] for c in s.policy.layers]}


def run_transfer(config: ExperimentConfig, seeds: Sequence[int] | None = None, out_dir=None,
                 methods: Sequence[str] = METHODS, target: Dataset | None = None,
                 jobs: int = 1) -> dict:
    """Search on proxy, finetune on target, for every method and seed."""
    seeds = list(seeds) if seeds is not None else config.run_seeds
    out = _out(out_dir, config)
    proxy = load_dataset(config.proxy)
    target = target if target is not None else load_dataset(config.target)
    tasks = [(m, s) for m in methods for s in seeds]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            futs = [ex.submit(_transfer_run, config, m, s, out, proxy, target) for m, s in tasks]
            results = [f.result() for f in futs]
    else:
        results = [_transfer_run(config, m, s, out, proxy, target) for m, s in tasks]

    summary = {"seeds": seeds, "rho_probe": config.asga.rho0, "methods": {}}
    for m in methods:
        runs = [r for (mm, _), r in zip(tasks, results) if mm == m]
        summary["methods"][m] = {
            "target_accuracy": _median([r["target_accuracy"] for r in runs]),
            "search_gap": _median([r["search_gap"] for r in runs]),
            "search_sigma_gap": _median([r["search_sigma_gap"] for r in runs]),
            "total_bops": _median([r["total_bops"] for r in runs]),
            "runs": runs,
        }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


# rho curves ------------------------------------------------------------------

RHO_CURVE_COLUMNS = ["phi", "rho_max", "h", "rho"]


def emit_rho_curve(phi_list: Sequence[float], rho_max_list: Sequence[float],
                   h_grid: Sequence[float], path=None) -> list[dict]:
    if not len(phi_list) or not len(rho_max_list) or not len(h_grid):
        raise ContractError("phi, rho_max and h grids must be nonempty")
    if any(h <= 0 for h in h_grid):
        raise ContractError("h grid values must be positive")
    if any(p <= 0 for p in phi_list) or any(r <= 0 for r in rho_max_list):
        raise ContractError("phi and rho_max values must be positive")
    rows = [{"phi": float(phi), "rho_max": float(rm), "h": float(h),
             "rho": rho_rule(h, phi, rm)}
            for phi in phi_list for rm in rho_max_list for h in sorted(h_grid)]
    if path is not None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(RHO_CURVE_COLUMNS)
            for r in rows:
                w.writerow([repr(r[c]) for c in RHO_CURVE_COLUMNS])
    return rows


# checkpoint sharpness --------------------------------------------------------

def checkpoint_sharpness(config: ExperimentConfig, checkpoint, seed: int | None = None,
                         power_iters: int | None = None) -> SharpnessReport:
    """Sharpness of a saved model on the data it was trained on."""
    seed = config.seed if seed is None else seed
    model, meta = model_from_checkpoint(config, checkpoint, seed)
    if meta.get("kind") == "finetune":
        train, _ = target_splits(config, int(meta.get("seed", seed)))
    else:
        ds = prepare(load_dataset(config.proxy), config.model[-1])
        train, _ = split(ds, config.val_fraction,
                         int(_rng(int(meta.get("seed", seed)), _SPLIT).integers(2**31)))
    iters = config.power_iters if power_iters is None else power_iters
    return sharpness_report(model, train.batch, config.asga.rho0, power_iters=iters, seed=seed)
