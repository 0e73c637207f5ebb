"""Run orchestration: wiring streams, models and optimizers together.

One `run_training` call is fully determined by its config (all three seeds
are explicit after resolution), writes a per-step metrics CSV, a manifest,
an optimizer checkpoint and optional figures into the run directory, and
reruns byte-identically. Sweeps and comparisons are built out of probe runs
of the same function on a bounded worker pool.
"""

from __future__ import annotations

import itertools
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np

from . import baselines, config as cfgmod, dense_ekf, engine, kalman, metrics
from .config import ConfigError, ExperimentConfig
from .datastream import Dataset, load_mnist_idx, stream, subset, synthetic_logistic

CSV_NAME = "metrics.csv"
MANIFEST_NAME = "manifest.ini"
CHECKPOINT_NAME = "checkpoint.bin"
WEIGHTS_NAME = "weights.bin"
OFFDIAG_NAME = "offdiag.csv"

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_DIVERGED = 2


@dataclass
class RunResult:
    config: ExperimentConfig
    summary: metrics.RunSummary
    out_dir: str
    test_accuracy: float | None = None
    wall_time: float = 0.0

    @property
    def exit_code(self) -> int:
        return EXIT_DIVERGED if self.summary.diverged_nonfinite else EXIT_OK


@lru_cache(maxsize=4)
def _load_idx_cached(images: str, labels: str) -> Dataset:
    return load_mnist_idx(images, labels)


def build_model_from_config(cfg: ExperimentConfig) -> engine.ModelGraph:
    model_spec = cfg.model
    layers = engine.parse_layers(model_spec.layer_text())
    input_shape = model_spec.input_shape
    if model_spec.arch in cfgmod.PRESETS and not model_spec.layers:
        input_shape = cfgmod.PRESETS[model_spec.arch][0]
    base = engine.load_weights(model_spec.init_weights) if model_spec.init_weights else None
    return engine.build_model(
        layers, input_shape,
        weight_init=model_spec.weight_init,
        seed=np.random.default_rng(cfg.run.model_seed),
        parameterization=model_spec.parameterization,
        lora_targets=model_spec.lora_targets,
        lora_rank=model_spec.lora_rank,
        lora_sigma=model_spec.lora_sigma,
        full_targets=model_spec.full_targets,
        base_weights=base,
    )


def _train_dataset(cfg: ExperimentConfig) -> Dataset:
    spec = cfg.stream
    data = _load_idx_cached(spec.images, spec.labels)
    return subset(data,
                  class_filter=spec.class_filter or None,
                  max_samples=spec.max_samples or None)


def _planned_steps(cfg: ExperimentConfig, dataset: Dataset | None) -> int:
    spec = cfg.stream
    total = spec.epochs * len(dataset) if dataset is not None else spec.count
    if cfg.run.max_steps:
        total = min(total, cfg.run.max_steps)
    return total


def _sample_iter(cfg: ExperimentConfig, dataset: Dataset | None):
    spec = cfg.stream
    if spec.source == "mnist_idx":
        return stream(dataset, seed=cfg.run.shuffle_seed, epochs=spec.epochs)
    if spec.source == "synthetic_logistic":
        return synthetic_logistic(spec.n_features, spec.n_outputs, spec.noise_std,
                                  seed=cfg.run.shuffle_seed, count=spec.count)
    raise ConfigError(f"stream source {spec.source!r} is not trainable "
                      "(synthetic_linear is a test fixture)")


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max())
    return e / e.sum()


def evaluate_accuracy(model: engine.ModelGraph, theta: np.ndarray,
                      dataset: Dataset, limit: int = 0) -> float:
    """Top-1 accuracy of the frozen predictor over a held-out dataset."""
    n = len(dataset) if not limit else min(limit, len(dataset))
    correct = 0
    for i in range(n):
        pred = engine.forward(model, dataset.x[i], theta)
        if int(np.argmax(pred)) == int(dataset.labels[i]):
            correct += 1
    return correct / n


def run_training(cfg: ExperimentConfig, write_outputs: bool = True) -> RunResult:
    """Stream the configured samples through the configured optimizer.

    Divergence (non-finite state) stops the run and is recorded in the
    summary rather than raised; every other error propagates.
    """
    cfg = cfgmod.resolve_seeds(cfg)
    start = time.monotonic()
    model = build_model_from_config(cfg)
    theta = model.initial_theta()
    m = model.output_dim
    if not model.classification:
        raise ConfigError("training runs need a classification head")

    dataset = _train_dataset(cfg) if cfg.stream.source == "mnist_idx" else None
    planned = _planned_steps(cfg, dataset)
    samples = itertools.islice(_sample_iter(cfg, dataset), planned)

    kind = cfg.optimizer.kind
    opt = cfg.optimizer
    kstate = dstate = adamw = adagrad = None
    if kind == "kalman":
        fc = kalman.FilterConfig(beta=opt.beta, r_method=opt.r_method,
                                 p0_method=opt.p0_method, p0_value=opt.p0_value)
        kstate = kalman.init_state(theta, m, fc, np.random.default_rng(cfg.run.p0_seed))
    elif kind == "dense_ekf":
        rng = np.random.default_rng(cfg.run.p0_seed)
        n = theta.shape[0]
        if opt.p0_method == "constant":
            p0 = np.full(n, opt.p0_value)
        elif opt.p0_method == "uniform":
            p0 = rng.uniform(0.0, opt.p0_value, size=n)
        elif opt.p0_method == "random_spd":
            p0 = dense_ekf.random_spd(n, n * opt.p0_value, rng)
        else:
            raise ConfigError(f"unknown p0_method {opt.p0_method!r}")
        dstate = dense_ekf.init_dense_state(theta, m, p0)
    elif kind == "adamw":
        adamw = baselines.AdamWState(n=theta.shape[0], lr0=opt.lr,
                                     weight_decay=opt.weight_decay, beta1=opt.beta1,
                                     beta2=opt.beta2, eps=opt.eps, total_steps=planned)
    elif kind == "adagrad":
        adagrad = baselines.AdaGradState(n=theta.shape[0], lr=opt.lr, eps=opt.eps)
    else:
        raise ConfigError(f"unknown optimizer kind {kind!r}")

    online = metrics.OnlineMetrics(n_classes=m)
    nonfinite_step = None
    out_dir = cfg.run.out_dir
    csv_fh = offdiag_fh = None
    if write_outputs:
        os.makedirs(out_dir, exist_ok=True)
        csv_fh = open(os.path.join(out_dir, CSV_NAME), "w")
        csv_fh.write(",".join(metrics.CSV_COLUMNS) + "\n")
        if kind == "dense_ekf" and cfg.run.snapshot_every:
            offdiag_fh = open(os.path.join(out_dir, OFFDIAG_NAME), "w")
            offdiag_fh.write("step,off_diagonal_mass\n")
            offdiag_fh.write(f"0,{dense_ekf.off_diagonal_mass(dstate.p)!r}\n")

    try:
        for sample in samples:
            try:
                if kind == "kalman":
                    kstate, y_hat, diag = kalman.step(kstate, model, sample.x, sample.y)
                    theta = kstate.theta
                elif kind == "dense_ekf":
                    dstate, y_hat, _ = dense_ekf.dense_step(dstate, model, sample.x,
                                                            sample.y, opt.r_method, opt.beta)
                    theta = dstate.theta
                    pdiag = np.diag(dstate.p)
                    diag = {"trace_r": float(np.trace(dstate.r)),
                            "min_p": float(pdiag.min()), "max_p": float(pdiag.max())}
                else:
                    z = engine.forward(model, sample.x, theta, logits=True)
                    y_hat = _softmax(z)
                    h = engine.jacobian(model, sample.x, theta, logits=True)
                    grad = baselines.grad_from_jacobian(h, sample.y, y_hat)
                    if kind == "adamw":
                        theta = baselines.adamw_step(adamw, theta, grad)
                    else:
                        theta = baselines.adagrad_step(adagrad, theta, grad)
                    if not np.isfinite(theta).all():
                        raise kalman.DivergenceError(sample.k, "theta")
                    diag = {"trace_r": float("nan"), "min_p": float("nan"),
                            "max_p": float("nan")}
            except (kalman.DivergenceError, FloatingPointError) as exc:
                nonfinite_step = getattr(exc, "step_index", sample.k)
                break

            row = online.record(y_hat, sample.y,
                                loss_l1=metrics.l1_loss(y_hat, sample.y),
                                loss_ce=metrics.cross_entropy(y_hat, sample.y))
            if csv_fh is not None:
                merged = {**diag, **row}
                csv_fh.write(",".join(
                    str(merged[c]) if c == "step" else repr(float(merged[c]))
                    for c in metrics.CSV_COLUMNS) + "\n")
            if offdiag_fh is not None and (sample.k + 1) % cfg.run.snapshot_every == 0:
                offdiag_fh.write(f"{sample.k + 1},{dense_ekf.off_diagonal_mass(dstate.p)!r}\n")
    finally:
        if csv_fh is not None:
            csv_fh.close()
        if offdiag_fh is not None:
            offdiag_fh.close()

    summary = metrics.RunSummary(
        steps=online.k,
        acc_top1=online.acc_top1,
        acc_top5=online.acc_top5,
        final_moving_loss=online.moving_loss() if online.k else float("nan"),
        nonfinite_step=nonfinite_step,
    )

    test_acc = None
    if cfg.stream.test_images and cfg.stream.test_labels and nonfinite_step is None:
        test_data = _load_idx_cached(cfg.stream.test_images, cfg.stream.test_labels)
        test_acc = evaluate_accuracy(model, theta, test_data)

    wall = time.monotonic() - start
    if write_outputs:
        if kind == "kalman":
            kalman.save_checkpoint(kstate, os.path.join(out_dir, CHECKPOINT_NAME))
        if cfg.model.save_weights:
            engine.save_weights(os.path.join(out_dir, WEIGHTS_NAME),
                                engine.model_weights(model, theta))
        extra = {
            "wall_time_s": f"{wall:.3f}",
            "steps": summary.steps,
            "acc_top1": repr(summary.acc_top1),
            "acc_top5": repr(summary.acc_top5),
            "diverged": str(summary.diverged_nonfinite).lower(),
            "n_trainable": model.n_trainable,
        }
        if test_acc is not None:
            extra["test_accuracy"] = repr(test_acc)
        cfgmod.write_manifest(cfg, os.path.join(out_dir, MANIFEST_NAME), extra)
        if cfg.run.figures:
            from . import plots
            plots.training_curves(os.path.join(out_dir, CSV_NAME),
                                  os.path.join(out_dir, "training.png"))
            if offdiag_fh is not None:
                plots.offdiag_curve(os.path.join(out_dir, OFFDIAG_NAME),
                                    os.path.join(out_dir, "offdiag.png"))
    return RunResult(config=cfg, summary=summary, out_dir=out_dir,
                     test_accuracy=test_acc, wall_time=wall)


def _probe(cfg: ExperimentConfig) -> metrics.RunSummary:
    return run_training(cfg, write_outputs=False).summary


def _map_runs(fn, cfgs, workers: int):
    if workers <= 1:
        return [fn(c) for c in cfgs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, cfgs))


def run_compare(cfgs: list[ExperimentConfig], labels: list[str], out_dir: str,
                repeats: int = 3, workers: int = 1) -> list[dict]:
    """Run each config `repeats` times with seeds s, s+1, ... and tabulate
    the mean and standard deviation of the final average online accuracy."""
    if len(cfgs) < 2:
        raise ConfigError("compare needs at least two configs")
    streams = {(c.stream.images, c.stream.labels, c.stream.source) for c in cfgs}
    if len(streams) != 1:
        raise ConfigError("compare configs must share one stream spec")
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for label, cfg in zip(labels, cfgs):
        run_cfgs = []
        for i in range(repeats):
            run = replace(cfg.run, seed=cfg.run.seed + i, model_seed=-1, p0_seed=-1,
                          shuffle_seed=-1, out_dir=os.path.join(out_dir, f"{label}-s{i}"),
                          figures=False)
            run_cfgs.append(cfgmod.resolve_seeds(replace(cfg, run=run)))
        results = _map_runs(run_training, run_cfgs, workers)
        accs = [r.summary.acc_top1 for r in results]
        rows.append({"label": label, "mean_acc": float(np.mean(accs)),
                     "std_acc": float(np.std(accs)), "accs": accs,
                     "diverged": any(r.summary.diverged_nonfinite for r in results)})
    with open(os.path.join(out_dir, "compare.csv"), "w") as fh:
        fh.write("label,mean_acc,std_acc,diverged\n")
        for row in rows:
            fh.write(f"{row['label']},{row['mean_acc']!r},{row['std_acc']!r},"
                     f"{str(row['diverged']).lower()}\n")
    from . import plots
    plots.compare_curves([os.path.join(out_dir, f"{r['label']}-s0", CSV_NAME) for r in rows],
                         [r["label"] for r in rows],
                         os.path.join(out_dir, "compare.png"))
    return rows


def p0_grid(grid_min: float, grid_max: float, points_per_decade: int) -> list[float]:
    """Logarithmic grid, points_per_decade per decade, inclusive of both ends."""
    lo, hi = np.log10(grid_min), np.log10(grid_max)
    count = int(round((hi - lo) * points_per_decade)) + 1
    return [float(10.0 ** (lo + i / points_per_decade)) for i in range(count)]


def _stable_interval(values: list[float], diverged: list[bool]):
    """Largest contiguous non-diverged stretch of the grid, as (lo, hi)."""
    best, best_len, start = (None, None), 0, None
    for i, bad in enumerate(diverged):
        if bad:
            start = None
            continue
        if start is None:
            start = i
        if i - start + 1 > best_len:
            best_len = i - start + 1
            best = (values[start], values[i])
    return best


def run_sweep_p0(cfg: ExperimentConfig, out_dir: str, workers: int = 1) -> dict:
    """Probe the variance-init grid per init scheme and p0 method.

    Every probe trains from scratch for sweep.probe_steps steps; a probe is
    flagged diverged on non-finite state or chance-level online accuracy.
    Reports the largest contiguous stable interval per (scheme, method).
    """
    sweep = cfg.sweep
    values = p0_grid(sweep.grid_min, sweep.grid_max, sweep.points_per_decade)
    if not values:
        raise ConfigError("empty p0 grid")
    os.makedirs(out_dir, exist_ok=True)
    m = build_model_from_config(cfgmod.resolve_seeds(cfg)).output_dim
    probes, keys = [], []
    for scheme in sweep.init_schemes:
        for method in sweep.p0_methods:
            for value in values:
                pc = replace(cfg,
                             model=replace(cfg.model, weight_init=scheme,
                                           parameterization="full", init_weights=""),
                             optimizer=replace(cfg.optimizer, kind="kalman",
                                               p0_method=method, p0_value=value),
                             run=replace(cfg.run, max_steps=sweep.probe_steps,
                                         figures=False))
                probes.append(cfgmod.resolve_seeds(pc))
                keys.append((scheme, method, value))
    summaries = _map_runs(_probe, probes, workers)
    rows = []
    for (scheme, method, value), summary in zip(keys, summaries):
        diverged = metrics.detect_divergence(summary, m) if summary.steps >= 100 \
            else True
        rows.append({"scheme": scheme, "method": method, "p0_value": value,
                     "steps": summary.steps, "acc_top1": summary.acc_top1,
                     "diverged": diverged})
    bounds = {}
    for scheme in sweep.init_schemes:
        for method in sweep.p0_methods:
            sel = [r for r in rows if r["scheme"] == scheme and r["method"] == method]
            bounds[(scheme, method)] = _stable_interval(
                [r["p0_value"] for r in sel], [r["diverged"] for r in sel])
    with open(os.path.join(out_dir, "sweep_p0.csv"), "w") as fh:
        fh.write("scheme,method,p0_value,steps,acc_top1,diverged\n")
        for r in rows:
            fh.write(f"{r['scheme']},{r['method']},{r['p0_value']!r},{r['steps']},"
                     f"{r['acc_top1']!r},{str(r['diverged']).lower()}\n")
    with open(os.path.join(out_dir, "bounds.csv"), "w") as fh:
        fh.write("scheme,method,stable_min,stable_max\n")
        for (scheme, method), (lo, hi) in bounds.items():
            fh.write(f"{scheme},{method},{'' if lo is None else repr(lo)},"
                     f"{'' if hi is None else repr(hi)}\n")
    from . import plots
    plots.p0_sweep_figure(rows, os.path.join(out_dir, "sweep_p0.png"))
    return {"rows": rows, "bounds": bounds}


def run_sweep_beta(cfg: ExperimentConfig, out_dir: str, workers: int = 1) -> list[dict]:
    """Train once per forgetting-factor value with identical seeds and report
    the final average online accuracy for each; no ranking is asserted here."""
    values = cfg.sweep.beta_values
    for b in values:
        if not 0.0 < b < 1.0:
            raise ConfigError(f"beta {b} outside (0,1)")
    os.makedirs(out_dir, exist_ok=True)
    cfgs = []
    for b in values:
        bc = replace(cfg, optimizer=replace(cfg.optimizer, kind="kalman", beta=b),
                     run=replace(cfg.run, figures=False))
        cfgs.append(cfgmod.resolve_seeds(bc))
    summaries = _map_runs(_probe, cfgs, workers)
    rows = [{"beta": b, "acc_top1": s.acc_top1, "steps": s.steps,
             "diverged": s.diverged_nonfinite} for b, s in zip(values, summaries)]
    with open(os.path.join(out_dir, "sweep_beta.csv"), "w") as fh:
        fh.write("beta,acc_top1,steps,diverged\n")
        for r in rows:
            fh.write(f"{r['beta']!r},{r['acc_top1']!r},{r['steps']},"
                     f"{str(r['diverged']).lower()}\n")
    from . import plots
    plots.beta_sweep_figure(rows, os.path.join(out_dir, "sweep_beta.png"))
    return rows
