"""Command-line surface binding generation, pretraining, training,
evaluation, saliency export and benchmarking into reproducible runs.

Every command reads explicit files and flags (no environment variables),
writes its fully-resolved configuration next to its outputs, and exits
nonzero with a one-line diagnostic on any validation or input error.
Rerunning a command with identical inputs and seeds reproduces its
primary outputs byte for byte (timing reports excepted).
"""
from __future__ import annotations

import dataclasses
import json
import time
import tracemalloc
from pathlib import Path

import click
import numpy as np

from .data import DataFormatError, ImageStore, center_crop, load_impressions, labels_of
from .metrics import EvalReport, evaluate
from .model import DeepCtrNet, NetConfig, build_networks
from .nn import LayerParams, DimensionError
from .saliency import compute_saliency, export_heatmap
from .sampling import SamplerConfig
from .sparse import csr_from_rows, sparse_fc_backward, sparse_fc_forward
from .synth import SynthSpec, load_images_meta, synth_generate
from . import training
from .training import (
    CheckpointError,
    OptimConfig,
    TrainData,
    TrainingDiverged,
    checkpoint_load,
    checkpoint_save,
    model_from_state,
    predict_any,
    snapshot_model,
)


_DATASET_KEYS = {"train", "eval", "images", "dim", "crop", "augment", "images_meta"}
_RUN_KEYS = {"dataset", "net", "sampler", "optim", "model", "grad_mode", "seed", "batch_size", "prefetch"}


class ConfigError(ValueError):
    pass


def _check_keys(section: dict, allowed, where: str):
    unknown = set(section) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


def load_run_config(path, seed_override=None) -> dict:
    """Parse and validate a run configuration, filling in all defaults.

    Returns the fully-resolved configuration as a plain dict.
    """
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    _check_keys(raw, _RUN_KEYS, "run config")
    dataset = raw.get("dataset", {})
    _check_keys(dataset, _DATASET_KEYS, "dataset section")
    seed = int(seed_override if seed_override is not None else raw.get("seed", 0))

    dim = int(dataset.get("dim", 0))
    crop = int(dataset.get("crop", 28))
    net_section = dict(raw.get("net", {}))
    net_section.setdefault("basic_dim", dim if dim else NetConfig().basic_dim)
    net_section.setdefault("image_shape", (3, crop, crop))
    net_cfg = NetConfig.from_dict(net_section)

    sampler_section = dict(raw.get("sampler", {}))
    _check_keys(sampler_section, {"n", "k", "seed"}, "sampler section")
    sampler_section.setdefault("seed", seed)
    sampler = SamplerConfig(**sampler_section)
    sampler.validate()

    optim_section = dict(raw.get("optim", {}))
    _check_keys(optim_section, {f.name for f in dataclasses.fields(OptimConfig)}, "optim section")
    optim = OptimConfig(**optim_section)
    optim.validate()

    model = raw.get("model", "deepctr")
    if model not in ("deepctr", "lr", "dnn_basic"):
        raise ConfigError(f"unknown model kind {model!r}")
    grad_mode = raw.get("grad_mode", "paper")
    if grad_mode not in ("paper", "exact"):
        raise ConfigError(f"unknown grad_mode {grad_mode!r}")

    return {
        "dataset": {
            "train": dataset.get("train"),
            "eval": dataset.get("eval"),
            "images": dataset.get("images"),
            "dim": dim,
            "crop": crop,
            "augment": bool(dataset.get("augment", False)),
            "images_meta": dataset.get("images_meta"),
        },
        "net": net_cfg.to_dict(),
        "sampler": dataclasses.asdict(sampler),
        "optim": dataclasses.asdict(optim),
        "model": model,
        "grad_mode": grad_mode,
        "seed": seed,
        "batch_size": int(raw.get("batch_size", 256)),
        "prefetch": bool(raw.get("prefetch", False)),
    }


def write_resolved(out_dir: Path, resolved: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "resolved_config.json").write_text(
        json.dumps(resolved, sort_keys=True, indent=2) + "\n"
    )


def _load_train_data(resolved) -> TrainData:
    d = resolved["dataset"]
    for key in ("train", "eval", "images"):
        if not d.get(key):
            raise ConfigError(f"dataset.{key} is required")
        if key != "images" and not Path(d[key]).exists():
            raise ConfigError(f"dataset.{key} not found: {d[key]}")
    if not Path(d["images"]).is_dir():
        raise ConfigError(f"dataset.images is not a directory: {d['images']}")
    if d["dim"] < 1:
        raise ConfigError("dataset.dim must be positive")
    return TrainData(
        train=load_impressions(d["train"], d["dim"]),
        eval=load_impressions(d["eval"], d["dim"]),
        store=ImageStore(d["images"]),
        dim=d["dim"],
        crop=d["crop"],
        augment=d["augment"],
    )


_ERRORS = (ConfigError, DataFormatError, CheckpointError, DimensionError, ValueError, OSError)


def _run_guarded(fn):
    try:
        fn()
    except TrainingDiverged as exc:
        raise click.ClickException(f"training diverged: {exc}") from exc
    except _ERRORS as exc:
        raise click.ClickException(str(exc)) from exc


@click.group()
def main():
    """Image-plus-sparse-feature CTR training and evaluation engine."""


@main.command()
@click.option("--spec", "spec_path", type=click.Path(exists=True), help="Synthetic dataset spec JSON; defaults apply if omitted.")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--seed", default=0, type=int)
def generate(spec_path, out_dir, seed):
    """Generate a synthetic dataset (impressions, images, ground truth)."""

    def run():
        spec = SynthSpec.from_json(spec_path) if spec_path else SynthSpec()
        spec.validate()
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = synth_generate(spec, seed, out)
        write_resolved(out, {"command": "generate", "seed": seed, "spec": dataclasses.asdict(spec)})
        n_lines = sum(1 for _ in open(paths["impressions"], "rb"))
        click.echo(f"wrote {n_lines} impressions to {out}")

    _run_guarded(run)


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--seed", default=None, type=int, help="Overrides the config seed.")
def pretrain(config_path, out_dir, seed):
    """Pretrain the convolution stack on category labels."""

    def run():
        resolved = load_run_config(config_path, seed)
        meta_path = resolved["dataset"].get("images_meta")
        if not meta_path:
            raise ConfigError("pretraining requires dataset.images_meta")
        meta = load_images_meta(meta_path)
        image_ids = sorted(meta)
        categories = [meta[u][0] for u in image_ids]
        store = ImageStore(resolved["dataset"]["images"])
        net_cfg = NetConfig.from_dict(resolved["net"])
        rng = np.random.default_rng(resolved["seed"])
        _, pnet = build_networks(net_cfg, rng)
        opt = OptimConfig(**resolved["optim"])
        log = training.pretrain_convnet(
            pnet, image_ids, categories, store, opt,
            batch_size=resolved["batch_size"], seed=resolved["seed"],
            crop=resolved["dataset"]["crop"], augment=True,
        )
        out = Path(out_dir)
        write_resolved(out, {"command": "pretrain", **resolved})
        state = snapshot_model(pnet, "pretrain", {"net": net_cfg.to_dict()}, opt.max_iters, {})
        checkpoint_save(out / "checkpoint_pretrain.dctr", state)
        (out / "pretrain_log.tsv").write_text("\n".join(log) + ("\n" if log else ""))
        click.echo(f"pretrained conv stack -> {out / 'checkpoint_pretrain.dctr'}")

    _run_guarded(run)


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--seed", default=None, type=int, help="Overrides the config seed.")
@click.option("--resume", "resume_path", type=click.Path(exists=True), help="Continue from a checkpoint.")
@click.option("--init-conv", "init_conv_path", type=click.Path(exists=True), help="Load pretrained conv stack.")
def train(config_path, out_dir, seed, resume_path, init_conv_path):
    """Train a model (deepctr, lr or dnn_basic per the config)."""

    def run():
        resolved = load_run_config(config_path, seed)
        out = Path(out_dir)
        write_resolved(out, {"command": "train", **resolved})
        opt = OptimConfig(**resolved["optim"])
        kind = resolved["model"]

        if kind == "lr":
            data = _load_train_data(resolved)
            model, log = training.train_lr_baseline(
                data.train, data.dim, opt, batch_size=resolved["batch_size"], seed=resolved["seed"]
            )
            state = snapshot_model(model, "lr", {"dim": data.dim}, opt.max_iters, {})
            checkpoint_save(out / "checkpoint_final.dctr", state)
            (out / "train_log.tsv").write_text("\n".join(log) + ("\n" if log else ""))
            click.echo(f"trained lr baseline -> {out / 'checkpoint_final.dctr'}")
            return
        if kind == "dnn_basic":
            data = _load_train_data(resolved)
            model, log = training.train_dnn_baseline(
                data.train, data.dim, opt, batch_size=resolved["batch_size"], seed=resolved["seed"]
            )
            state = snapshot_model(
                model, "dnn_basic", {"dim": data.dim, "hidden": list(model.hidden)}, opt.max_iters, {}
            )
            checkpoint_save(out / "checkpoint_final.dctr", state)
            (out / "train_log.tsv").write_text("\n".join(log) + ("\n" if log else ""))
            click.echo(f"trained dnn_basic baseline -> {out / 'checkpoint_final.dctr'}")
            return

        data = _load_train_data(resolved)
        sampler_cfg = SamplerConfig(**resolved["sampler"])
        if resume_path:
            state = checkpoint_load(resume_path)
            if state.kind != "deepctr":
                raise ConfigError(f"--resume expects a deepctr checkpoint, got {state.kind!r}")
            result = training.resume_deepctr(
                data, sampler_cfg, opt, state,
                grad_mode=resolved["grad_mode"], prefetch=resolved["prefetch"],
            )
        else:
            net_cfg = NetConfig.from_dict(resolved["net"])
            net, _ = build_networks(net_cfg, np.random.default_rng(resolved["seed"]))
            if init_conv_path:
                pre = checkpoint_load(init_conv_path)
                if pre.kind != "pretrain":
                    raise ConfigError(f"--init-conv expects a pretrain checkpoint, got {pre.kind!r}")
                training.restore_conv_stack(net, pre)
            try:
                result = training.train_deepctr(
                    net, data, sampler_cfg, opt,
                    grad_mode=resolved["grad_mode"], prefetch=resolved["prefetch"],
                )
            except TrainingDiverged as exc:
                checkpoint_save(out / "checkpoint_last_good.dctr", exc.result.best)
                raise
        checkpoint_save(out / "checkpoint_best.dctr", result.best)
        checkpoint_save(out / "checkpoint_final.dctr", result.final)
        (out / "train_log.tsv").write_text("\n".join(result.log) + ("\n" if result.log else ""))
        click.echo(f"trained deepctr ({opt.max_iters} iters) -> {out}")

    _run_guarded(run)


@main.command("eval")
@click.option("--checkpoint", "checkpoints", multiple=True, required=True, type=click.Path(exists=True),
              help="Repeat to average an ensemble's predictions.")
@click.option("--data", "data_path", required=True, type=click.Path(exists=True))
@click.option("--images", "images_dir", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--baseline", "baseline_path", type=click.Path(exists=True),
              help="EvalReport JSON of the reference model for relative metrics.")
def eval_cmd(checkpoints, data_path, images_dir, out_path, baseline_path):
    """Evaluate one checkpoint or an ensemble on an impression log."""

    def run():
        models = [model_from_state(checkpoint_load(p)) for p in checkpoints]
        dims = {m.cfg.basic_dim if isinstance(m, DeepCtrNet) else m.dim for m in models}
        if len(dims) != 1:
            raise ConfigError(f"checkpoints disagree on feature dim: {sorted(dims)}")
        impressions = load_impressions(data_path, dims.pop())
        store = ImageStore(images_dir)
        probs = np.mean([predict_any(m, impressions, store) for m in models], axis=0)
        baseline = EvalReport.from_json(Path(baseline_path).read_text()) if baseline_path else None
        report = evaluate(probs, labels_of(impressions), baseline)
        out = Path(out_path)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(report.to_json() + "\n")
        write_resolved(out.parent, {
            "command": "eval", "checkpoints": list(checkpoints), "data": data_path,
            "images": images_dir, "baseline": baseline_path, "out": str(out),
        })
        click.echo(report.to_json())

    _run_guarded(run)


@main.command("saliency")
@click.option("--checkpoint", "checkpoint_path", required=True, type=click.Path(exists=True))
@click.option("--data", "data_path", required=True, type=click.Path(exists=True))
@click.option("--images", "images_dir", required=True, type=click.Path(exists=True))
@click.option("--image-id", "image_ids", multiple=True, required=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
def saliency_cmd(checkpoint_path, data_path, images_dir, image_ids, out_dir):
    """Export P5 heatmaps for the listed image ids; each image's first
    impression in the data file supplies the basic-feature context."""

    def run():
        state = checkpoint_load(checkpoint_path)
        if state.kind != "deepctr":
            raise ConfigError(f"saliency needs a deepctr checkpoint, got {state.kind!r}")
        net = model_from_state(state)
        impressions = load_impressions(data_path, net.cfg.basic_dim)
        store = ImageStore(images_dir)
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        size = net.cfg.image_shape[1]
        for image_id in image_ids:
            row = next((r for r, imp in enumerate(impressions) if imp.image_id == image_id), None)
            if row is None:
                raise ConfigError(f"no impression for image id {image_id!r} in {data_path}")
            image = center_crop(store.load(image_id), size)
            heat = compute_saliency(net, image, impressions[row], image_id=image_id, row=row)
            export_heatmap(heat, out / f"{image_id}_saliency.pgm")
        write_resolved(out, {
            "command": "saliency", "checkpoint": checkpoint_path, "data": data_path,
            "images": images_dir, "image_ids": list(image_ids),
        })
        click.echo(f"wrote {len(image_ids)} heatmaps to {out}")

    _run_guarded(run)


def bench_sparse_vs_dense(dim: int, nnz: int, batch: int, width: int, trials: int, rng) -> dict:
    """Forward+backward wall time of the sparse layer against the dense
    path on the densified batch; also the sparse path's peak transient
    allocation (which must stay far below a batch x dim buffer)."""
    rows = []
    for _ in range(batch):
        idx = np.sort(rng.choice(dim, size=nnz, replace=False))
        rows.append([(int(i), 1.0) for i in idx])
    v = csr_from_rows(rows, dim)
    params = LayerParams(weights=rng.normal(0, 0.01, (dim, width)), bias=np.zeros(width))
    grad_out = np.ones((batch, width))

    tracemalloc.start()
    tracemalloc.reset_peak()
    out = sparse_fc_forward(v, params)
    sparse_fc_backward(v, params, grad_out)
    _, sparse_peak_bytes = tracemalloc.get_traced_memory()
    tracemalloc.stop()

    sparse_times = []
    for _ in range(trials):
        t0 = time.perf_counter()
        sparse_fc_forward(v, params)
        sparse_fc_backward(v, params, grad_out)
        sparse_times.append(time.perf_counter() - t0)

    dense_x = v.to_dense()
    from .nn import dense_fc_backward, dense_fc_forward

    dense_times = []
    for _ in range(trials):
        t0 = time.perf_counter()
        dense_fc_forward(dense_x, params)
        dense_fc_backward(dense_x, params, grad_out)
        dense_times.append(time.perf_counter() - t0)

    sparse_ms = min(sparse_times) * 1e3
    dense_ms = min(dense_times) * 1e3
    return {
        "dim": dim, "nnz_per_row": nnz, "batch": batch, "width": width,
        "sparse_ms": sparse_ms, "dense_ms": dense_ms,
        "speedup": dense_ms / sparse_ms,
        "sparse_peak_bytes": int(sparse_peak_bytes),
        "dense_batch_buffer_bytes": int(batch) * int(dim) * 8,
    }


def bench_grouped_vs_flat(n: int, k: int, trials: int, rng) -> dict:
    """Per-impression forward+backward time of a grouped batch (one conv
    pass per unique image) against a flat batch with one conv pass per
    impression."""
    from .model import forward_backward as fb
    from .sampling import GroupedBatch

    cfg = NetConfig(image_shape=(3, 28, 28), basic_dim=200, n_categories=2)
    net, _ = build_networks(cfg, rng)
    images = rng.random((n, 3, 28, 28))
    rows = [[(int(i), 1.0) for i in sorted(rng.choice(200, size=5, replace=False))] for _ in range(n * k)]
    feats = csr_from_rows(rows, 200)
    labels = rng.integers(0, 2, n * k).astype(np.float64)
    net_rng = np.random.default_rng(0)

    grouped = GroupedBatch(images=images, image_ids=[str(i) for i in range(n)],
                           features=feats, labels=labels, k=k)
    flat = GroupedBatch(images=np.repeat(images, k, axis=0),
                        image_ids=[str(i) for i in range(n) for _ in range(k)],
                        features=feats, labels=labels, k=1)
    grouped_times, flat_times = [], []
    for _ in range(trials):
        t0 = time.perf_counter()
        fb(net, grouped, lam=0.0, grad_mode="paper", rng=net_rng)
        grouped_times.append(time.perf_counter() - t0)
        net.zero_grads()
        t0 = time.perf_counter()
        fb(net, flat, lam=0.0, grad_mode="paper", rng=net_rng)
        flat_times.append(time.perf_counter() - t0)
        net.zero_grads()
    per_imp = 1e3 / (n * k)
    return {
        "n": n, "k": k,
        "grouped_ms_per_impression": min(grouped_times) * per_imp,
        "flat_ms_per_impression": min(flat_times) * per_imp,
        "speedup": min(flat_times) / min(grouped_times),
    }


@main.command()
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--dim", default=100_000, type=int)
@click.option("--nnz", default=20, type=int)
@click.option("--batch", default=1000, type=int)
@click.option("--width", default=128, type=int)
@click.option("--trials", default=3, type=int)
@click.option("--seed", default=0, type=int)
@click.option("--grouped/--no-grouped", default=True, help="Also time grouped vs flat batches.")
def bench(out_path, dim, nnz, batch, width, trials, seed, grouped):
    """Timing report: sparse vs dense first layer, grouped vs flat batches."""

    def run():
        rng = np.random.default_rng(seed)
        report = {"sparse_vs_dense": bench_sparse_vs_dense(dim, nnz, batch, width, trials, rng)}
        if grouped:
            report["grouped_vs_flat"] = bench_grouped_vs_flat(8, 16, max(1, trials), rng)
        out = Path(out_path)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
        sd = report["sparse_vs_dense"]
        click.echo(
            f"sparse {sd['sparse_ms']:.2f} ms vs dense {sd['dense_ms']:.2f} ms "
            f"({sd['speedup']:.1f}x) at dim={dim}, batch={batch}"
        )

    _run_guarded(run)


if __name__ == "__main__":
    main()
