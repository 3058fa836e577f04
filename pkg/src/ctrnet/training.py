"""Optimization loops, SGD with momentum and weight decay, the step
schedule, checkpointing, and the baseline trainers used as references for
the relative metrics.

The weight-decay convention is the standard SGD one: ``decay * param`` is
added to the gradient, which is the analytic gradient of a
``(decay / 2) * ||W||^2`` penalty.  The reported training loss therefore
carries the penalty with coefficient ``weight_decay / 2``.

Determinism: every run is a pure function of (dataset, configs, seeds).
A checkpoint stores parameters, momentum buffers, batch-norm running
statistics, the iteration counter and both RNG streams, so interrupting
and resuming reproduces the uninterrupted run bit for bit.
"""
from __future__ import annotations

import dataclasses
import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .data import ImageStore, impressions_to_csr, labels_of, prepare_images
from .metrics import eval_auc, eval_logloss
from .model import (
    DeepCtrNet,
    DivergenceError,
    NetConfig,
    PretrainNet,
    build_networks,
    forward_backward,
    predict_scores,
    pretrain_forward_backward,
)
from .nn import LayerParams, sigmoid, sigmoid_logloss
from .sampling import BatchPrefetcher, BatchSampler, SamplerConfig
from .sparse import SparseBatch, csr_from_arrays, sparse_fc_backward, sparse_fc_forward
from .data import build_group_index


@dataclass
class OptimConfig:
    base_lr: float = 0.1
    conv_lr_scale: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-5
    lr_drop_iters: tuple = (3000, 5000, 7000)
    lr_drop_factor: float = 10.0
    max_iters: int = 8000
    eval_every: int = 200

    def __post_init__(self):
        self.lr_drop_iters = tuple(self.lr_drop_iters)

    def validate(self) -> None:
        if min(self.base_lr, self.conv_lr_scale, self.lr_drop_factor) <= 0:
            raise ValueError("learning-rate parameters must be positive")
        if self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("momentum and weight_decay must be non-negative")
        if self.max_iters < 0 or self.eval_every < 1:
            raise ValueError("max_iters must be >= 0 and eval_every >= 1")
        if any(b <= a for a, b in zip(self.lr_drop_iters, self.lr_drop_iters[1:])):
            raise ValueError("lr_drop_iters must be strictly increasing")


def lr_at(opt: OptimConfig, iteration: int) -> float:
    """base_lr divided by drop_factor once per passed drop point."""
    drops = sum(1 for d in opt.lr_drop_iters if d <= iteration)
    return opt.base_lr / opt.lr_drop_factor**drops


def sgd_step(entries, opt: OptimConfig, lr_now: float) -> None:
    """buf = momentum*buf + grad + decay*param; param -= lr*buf.

    Convolution-stack parameters use ``lr_now * conv_lr_scale``; biases and
    batch-norm shifts are exempt from decay.  Gradients are zeroed after
    the step.
    """
    for e in entries:
        decay = opt.weight_decay if e.decay else 0.0
        e.vel[...] = opt.momentum * e.vel + e.grad + decay * e.value
        scale = opt.conv_lr_scale if e.is_conv else 1.0
        e.value -= (lr_now * scale) * e.vel
        e.grad[...] = 0.0
        if not np.all(np.isfinite(e.value)):
            raise DivergenceError(f"non-finite parameter {e.name} after update")


# ---------------------------------------------------------------------------
# Checkpoints


CHECKPOINT_MAGIC = b"DCTR"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Unreadable or incompatible checkpoint file."""


@dataclass
class CheckpointState:
    kind: str  # "deepctr" | "pretrain" | "lr" | "dnn_basic"
    cfg: dict
    iteration: int
    rng_states: dict  # stream name -> jsonable PCG64 state
    tensors: OrderedDict  # name -> float64 array


def pcg_state_to_jsonable(st: dict) -> dict:
    return {
        "bit_generator": st["bit_generator"],
        "state": str(st["state"]["state"]),
        "inc": str(st["state"]["inc"]),
        "has_uint32": int(st["has_uint32"]),
        "uinteger": int(st["uinteger"]),
    }


def rng_state_to_jsonable(rng: np.random.Generator) -> dict:
    return pcg_state_to_jsonable(rng.bit_generator.state)


def rng_from_jsonable(d: dict) -> np.random.Generator:
    rng = np.random.default_rng()
    if d["bit_generator"] != rng.bit_generator.state["bit_generator"]:
        raise CheckpointError(f"unsupported bit generator {d['bit_generator']!r}")
    rng.bit_generator.state = {
        "bit_generator": d["bit_generator"],
        "state": {"state": int(d["state"]), "inc": int(d["inc"])},
        "has_uint32": int(d["has_uint32"]),
        "uinteger": int(d["uinteger"]),
    }
    return rng


def checkpoint_save(path, state: CheckpointState) -> None:
    """Write magic, version, a canonical JSON header, then the raw
    little-endian float64 tensor blocks in header order."""
    header = {
        "kind": state.kind,
        "cfg": state.cfg,
        "iteration": state.iteration,
        "rng": state.rng_states,
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in state.tensors.items()],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for v in state.tensors.values():
            f.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def checkpoint_load(path) -> CheckpointState:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r}")
    (version,) = struct.unpack("<I", data[4:8])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    (hlen,) = struct.unpack("<Q", data[8:16])
    try:
        header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    tensors = OrderedDict()
    offset = 16 + hlen
    for spec in header["tensors"]:
        shape = tuple(spec["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * 8
        chunk = data[offset : offset + nbytes]
        if len(chunk) != nbytes:
            raise CheckpointError(f"{path}: truncated tensor {spec['name']!r}")
        tensors[spec["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(shape).copy()
        offset += nbytes
    if offset != len(data):
        raise CheckpointError(f"{path}: {len(data) - offset} trailing bytes")
    return CheckpointState(
        kind=header["kind"],
        cfg=header["cfg"],
        iteration=header["iteration"],
        rng_states=header["rng"],
        tensors=tensors,
    )


def _model_tensor_items(model):
    """Live (name, array) pairs: parameters, momentum buffers, BN stats."""
    for e in model.entries():
        yield e.name, e.value
        yield e.name + "#vel", e.vel
    if hasattr(model, "bn_states"):
        for name, s in model.bn_states():
            yield name + "#rmean", s.running_mean
            yield name + "#rvar", s.running_var


def snapshot_model(model, kind: str, cfg: dict, iteration: int, rng_states: dict) -> CheckpointState:
    tensors = OrderedDict((k, v.copy()) for k, v in _model_tensor_items(model))
    return CheckpointState(kind=kind, cfg=cfg, iteration=iteration, rng_states=rng_states, tensors=tensors)


def restore_model(model, state: CheckpointState) -> None:
    """Copy checkpoint tensors into the live model, in place so parameter
    aliasing (shared conv stack) survives."""
    live = OrderedDict(_model_tensor_items(model))
    if list(live) != list(state.tensors):
        raise CheckpointError("checkpoint tensor names do not match the model")
    for k, v in state.tensors.items():
        if live[k].shape != v.shape:
            raise CheckpointError(f"tensor {k!r} shape {v.shape} != model {live[k].shape}")
        live[k][...] = v


def restore_conv_stack(net: DeepCtrNet, state: CheckpointState) -> None:
    """Load only the convolution-stack tensors (weights and BN statistics)
    from a pretraining checkpoint; momentum buffers start fresh."""
    live = {k: v for k, v in _model_tensor_items(net) if k.startswith("conv")}
    for k, v in state.tensors.items():
        if k.startswith("conv") and not k.endswith("#vel"):
            if k not in live:
                raise CheckpointError(f"pretrained tensor {k!r} has no home in this net")
            live[k][...] = v


# ---------------------------------------------------------------------------
# Baseline models


class LrModel:
    """Logistic regression over the sparse features, via the same sparse
    fully-connected machinery with a single output."""

    def __init__(self, dim: int):
        self.dim = dim
        self.fc = LayerParams(weights=np.zeros((dim, 1)), bias=np.zeros(1))

    @property
    def weights(self):
        return self.fc.weights[:, 0]

    @property
    def bias(self) -> float:
        return float(self.fc.bias[0])

    def scores(self, v: SparseBatch):
        return sparse_fc_forward(v, self.fc)[:, 0]

    def predict(self, v: SparseBatch):
        return sigmoid(self.scores(v))

    def entries(self):
        from .model import _fc_entries

        yield from _fc_entries("lr", self.fc, is_conv=False)


class DnnBasicModel:
    """Two-hidden-layer DNN over the sparse features only (no image tower)."""

    def __init__(self, dim: int, hidden=(128, 256), rng: Optional[np.random.Generator] = None):
        from .model import he_fc

        rng = rng if rng is not None else np.random.default_rng(0)
        self.dim = dim
        self.hidden = tuple(hidden)
        self.fc0 = he_fc(rng, dim, hidden[0])
        self.fc1 = he_fc(rng, hidden[0], hidden[1])
        self.fc2 = he_fc(rng, hidden[1], 1)

    def forward(self, v: SparseBatch):
        from . import nn

        a0 = sparse_fc_forward(v, self.fc0)
        r0 = nn.relu(a0)
        a1 = nn.dense_fc_forward(r0, self.fc1)
        r1 = nn.relu(a1)
        z = nn.dense_fc_forward(r1, self.fc2)[:, 0]
        return z, {"v": v, "a0": a0, "r0": r0, "a1": a1, "r1": r1}

    def backward(self, cache, grad_z):
        from . import nn

        g = nn.dense_fc_backward(cache["r1"], self.fc2, grad_z[:, None])
        g = nn.relu_backward(cache["a1"], g)
        g = nn.dense_fc_backward(cache["r0"], self.fc1, g)
        g = nn.relu_backward(cache["a0"], g)
        sparse_fc_backward(cache["v"], self.fc0, g)

    def predict(self, v: SparseBatch):
        z, _ = self.forward(v)
        return sigmoid(z)

    def weight_sq_norm(self) -> float:
        return float(sum((e.value**2).sum() for e in self.entries() if e.decay))

    def entries(self):
        from .model import _fc_entries

        yield from _fc_entries("dnn.fc0", self.fc0, is_conv=False)
        yield from _fc_entries("dnn.fc1", self.fc1, is_conv=False)
        yield from _fc_entries("dnn.fc2", self.fc2, is_conv=False)


def model_from_state(state: CheckpointState):
    """Rebuild a model of the checkpoint's kind and load its tensors."""
    if state.kind == "deepctr":
        net, _ = build_networks(NetConfig.from_dict(state.cfg["net"]), np.random.default_rng(0))
        restore_model(net, state)
        return net
    if state.kind == "pretrain":
        _, pnet = build_networks(NetConfig.from_dict(state.cfg["net"]), np.random.default_rng(0))
        restore_model(pnet, state)
        return pnet
    if state.kind == "lr":
        model = LrModel(int(state.cfg["dim"]))
        restore_model(model, state)
        return model
    if state.kind == "dnn_basic":
        model = DnnBasicModel(int(state.cfg["dim"]), tuple(state.cfg["hidden"]))
        restore_model(model, state)
        return model
    raise CheckpointError(f"unknown checkpoint kind {state.kind!r}")


def predict_any(model, impressions, store: Optional[ImageStore]):
    """Eval-mode probabilities from any trained model kind."""
    if isinstance(model, DeepCtrNet):
        return predict_scores(model, impressions, store)
    if isinstance(model, (LrModel, DnnBasicModel)):
        return model.predict(impressions_to_csr(impressions, model.dim))
    raise TypeError(f"cannot predict with {type(model).__name__}")


# ---------------------------------------------------------------------------
# Training loops


@dataclass
class TrainData:
    """Training and held-out impressions plus the image store they reference."""

    train: list
    eval: list
    store: ImageStore
    dim: int
    crop: int
    augment: bool = False


@dataclass
class TrainResult:
    log: list
    best: CheckpointState
    final: CheckpointState
    best_eval_logloss: float
    diverged: bool = False


class TrainingDiverged(RuntimeError):
    """Raised when training hits a non-finite loss or parameter; carries the
    last good checkpoint."""

    def __init__(self, message: str, result: TrainResult):
        super().__init__(message)
        self.result = result


def _format_log_line(iteration, lr, train_loss, eval_ll, eval_auc_) -> str:
    return f"{iteration}\t{lr:.8g}\t{train_loss:.8f}\t{eval_ll:.8f}\t{eval_auc_:.8f}"


def evaluate_deepctr(net: DeepCtrNet, impressions, store: ImageStore):
    probs = predict_scores(net, impressions, store)
    y = labels_of(impressions)
    return eval_logloss(probs, y), eval_auc(probs, y)


def train_deepctr(
    net: DeepCtrNet,
    data: TrainData,
    sampler_cfg: SamplerConfig,
    opt: OptimConfig,
    grad_mode: str = "paper",
    net_seed: Optional[int] = None,
    prefetch: bool = False,
) -> TrainResult:
    """Grouped-batch training loop: sample, forward/backward, SGD step,
    periodic held-out evaluation, best-checkpoint selection by eval
    Logloss."""
    sampler_cfg.validate()
    group = build_group_index(data.train)
    sampler = BatchSampler(group, data.store, data.train, sampler_cfg, data.dim)
    net_rng = np.random.default_rng(net_seed if net_seed is not None else sampler_cfg.seed + 1)
    return _train_deepctr_loop(net, data, sampler, net_rng, opt, grad_mode, 0, prefetch)


def resume_deepctr(
    data: TrainData,
    sampler_cfg: SamplerConfig,
    opt: OptimConfig,
    state: CheckpointState,
    grad_mode: str = "paper",
    prefetch: bool = False,
) -> TrainResult:
    """Rebuild the net from a checkpoint and continue training to max_iters;
    bit-identical to the uninterrupted run."""
    net, _ = build_networks(NetConfig.from_dict(state.cfg["net"]), np.random.default_rng(0))
    restore_model(net, state)
    sampler_cfg.validate()
    group = build_group_index(data.train)
    sampler = BatchSampler(group, data.store, data.train, sampler_cfg, data.dim)
    sampler.rng = rng_from_jsonable(state.rng_states["sampler"])
    net_rng = rng_from_jsonable(state.rng_states["net"])
    return _train_deepctr_loop(net, data, sampler, net_rng, opt, grad_mode, state.iteration, prefetch)


def _train_deepctr_loop(net, data, sampler, net_rng, opt, grad_mode, start_iter, prefetch) -> TrainResult:
    opt.validate()
    cfg_dict = {"net": net.cfg.to_dict()}
    entries = list(net.entries())
    # State to restore when resuming after the last consumed batch.  With
    # prefetching the sampler's live RNG runs ahead, so it travels with
    # each batch instead of being read off the sampler.
    consumed_state = rng_state_to_jsonable(sampler.rng)

    def snap(iteration):
        return snapshot_model(
            net, "deepctr", cfg_dict, iteration,
            {"sampler": consumed_state, "net": rng_state_to_jsonable(net_rng)},
        )

    log = []
    best = snap(start_iter)
    best_ll = float("inf")
    fetcher = BatchPrefetcher(sampler) if prefetch else None
    try:
        for it in range(start_iter, opt.max_iters):
            lr = lr_at(opt, it)
            if fetcher is not None:
                batch, raw_state = fetcher.next_batch()
                consumed_state = pcg_state_to_jsonable(raw_state)
            else:
                batch = sampler.next_batch()
                consumed_state = rng_state_to_jsonable(sampler.rng)
            images = prepare_images(batch.images, data.crop, data.augment, net_rng)
            try:
                loss = forward_backward(
                    net, batch, lam=opt.weight_decay / 2.0, grad_mode=grad_mode,
                    rng=net_rng, images=images,
                )
                sgd_step(entries, opt, lr)
            except DivergenceError as exc:
                raise TrainingDiverged(
                    f"iteration {it + 1}: {exc}",
                    TrainResult(log, best, best, best_ll, diverged=True),
                ) from exc
            if (it + 1) % opt.eval_every == 0 or it + 1 == opt.max_iters:
                ll, auc = evaluate_deepctr(net, data.eval, data.store)
                log.append(_format_log_line(it + 1, lr, loss, ll, auc))
                if ll < best_ll:
                    best_ll = ll
                    best = snap(it + 1)
    finally:
        if fetcher is not None:
            fetcher.close()
    final = snap(opt.max_iters) if opt.max_iters > start_iter else best
    return TrainResult(log=log, best=best, final=final, best_eval_logloss=best_ll)


def pretrain_convnet(
    pnet: PretrainNet,
    image_ids,
    categories,
    store: ImageStore,
    opt: OptimConfig,
    batch_size: int = 128,
    seed: int = 0,
    crop: int = 28,
    augment: bool = True,
):
    """Category-classification training of the shared convolution stack,
    with random-crop and horizontal-mirror augmentation.  Returns the log;
    the conv parameters are updated in place (they are shared)."""
    opt.validate()
    if len(set(int(c) for c in categories)) < 2:
        raise ValueError("pretraining needs at least 2 categories")
    rng = np.random.default_rng(seed)
    labels_all = np.asarray(categories, dtype=np.int64)
    entries = list(pnet.entries())
    log = []
    for it in range(opt.max_iters):
        lr = lr_at(opt, it)
        picks = rng.integers(0, len(image_ids), size=batch_size)
        raw = np.stack([store.load(image_ids[i]) for i in picks])
        images = prepare_images(raw, crop, augment, rng)
        labels = labels_all[picks]
        loss, logits = pretrain_forward_backward(pnet, images, labels)
        sgd_step(entries, opt, lr)
        if (it + 1) % opt.eval_every == 0 or it + 1 == opt.max_iters:
            acc = float((logits.argmax(axis=1) == labels).mean())
            log.append(f"{it + 1}\t{lr:.8g}\t{loss:.8f}\t{acc:.8f}")
    return log


def _sparse_minibatch(impressions, rows, dim):
    idx = [impressions[r].idx for r in rows]
    val = [impressions[r].val for r in rows]
    y = np.array([impressions[r].label for r in rows], dtype=np.float64)
    return csr_from_arrays(idx, val, dim), y


def train_lr_baseline(impressions, dim: int, opt: OptimConfig, batch_size: int = 256, seed: int = 0):
    """Logistic regression on the sparse features; the reference model for
    the relative metrics.  Returns (model, log)."""
    opt.validate()
    model = LrModel(dim)
    entries = list(model.entries())
    rng = np.random.default_rng(seed)
    n = len(impressions)
    log = []
    for it in range(opt.max_iters):
        rows = rng.integers(0, n, size=batch_size)
        v, y = _sparse_minibatch(impressions, rows, dim)
        z = model.scores(v)
        wsq = float((model.fc.weights**2).sum())
        loss, grad_z = sigmoid_logloss(z, y, wsq, opt.weight_decay / 2.0)
        if not np.isfinite(loss):
            raise DivergenceError(f"lr baseline diverged at iteration {it + 1}")
        sparse_fc_backward(v, model.fc, grad_z[:, None])
        sgd_step(entries, opt, lr_at(opt, it))
        if (it + 1) % opt.eval_every == 0 or it + 1 == opt.max_iters:
            log.append(f"{it + 1}\t{lr_at(opt, it):.8g}\t{loss:.8f}")
    return model, log


def train_dnn_baseline(
    impressions,
    dim: int,
    opt: OptimConfig,
    hidden=(128, 256),
    batch_size: int = 256,
    seed: int = 0,
):
    """Basic-features-only DNN baseline.  Returns (model, log)."""
    opt.validate()
    model = DnnBasicModel(dim, hidden, rng=np.random.default_rng(seed))
    entries = list(model.entries())
    rng = np.random.default_rng(seed + 1)
    n = len(impressions)
    log = []
    for it in range(opt.max_iters):
        rows = rng.integers(0, n, size=batch_size)
        v, y = _sparse_minibatch(impressions, rows, dim)
        z, cache = model.forward(v)
        loss, grad_z = sigmoid_logloss(z, y, model.weight_sq_norm(), opt.weight_decay / 2.0)
        if not np.isfinite(loss):
            raise DivergenceError(f"dnn baseline diverged at iteration {it + 1}")
        model.backward(cache, grad_z)
        sgd_step(entries, opt, lr_at(opt, it))
        if (it + 1) % opt.eval_every == 0 or it + 1 == opt.max_iters:
            log.append(f"{it + 1}\t{lr_at(opt, it):.8g}\t{loss:.8f}")
    return model, log
