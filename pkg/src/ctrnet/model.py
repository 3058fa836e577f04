"""The DeepCTR network: image tower (Convnet), sparse-feature tower
(Basicnet) and fusion head (Combnet), plus the category-classification
head used for pretraining the image tower.

A grouped batch runs the convolution stack once per unique image; the
resulting image feature rows are replicated k times, concatenated with
the Basicnet outputs and pushed through the Combnet to a scalar score per
impression.  On the way back the per-copy gradients are folded into one
gradient per image before entering the convolution stack.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import nn
from .data import center_crop
from .nn import Array, BnState, LayerParams
from .sampling import GroupedBatch, reduce_copy_gradients, replicate_image_features
from .sparse import SparseBatch, sparse_fc_backward, sparse_fc_forward


class DivergenceError(RuntimeError):
    """Loss or a parameter became non-finite."""


@dataclass
class NetConfig:
    """Architecture of the DeepCTR model and its pretraining head.

    The convolution stack is one ``first_kernel`` layer followed by
    ``len(group_channels)`` groups of ``layers_per_group`` 3x3 layers;
    a group whose stride-2 flag is set halves the resolution on its first
    layer.  Every convolution is followed by batch norm and ReLU.  The
    final map is globally average-pooled and projected to ``embed_dim``.
    """

    image_shape: tuple = (3, 28, 28)
    first_kernel: int = 5
    first_channels: int = 16
    group_channels: tuple = (16, 32)
    layers_per_group: int = 2
    group_stride2: tuple = (False, True)
    embed_dim: int = 128
    basic_dim: int = 1000
    basic_hidden: int = 128
    comb_hidden: tuple = (256, 128)
    dropout_rate: float = 0.5
    use_bn_comb: bool = True
    n_categories: int = 4
    pretrain_hidden: tuple = (1024, 1024)

    def __post_init__(self):
        self.image_shape = tuple(self.image_shape)
        self.group_channels = tuple(self.group_channels)
        self.group_stride2 = tuple(self.group_stride2)
        self.comb_hidden = tuple(self.comb_hidden)
        self.pretrain_hidden = tuple(self.pretrain_hidden)

    def validate(self) -> None:
        c, h, w = self.image_shape
        if min(c, h, w) < 1:
            raise ValueError(f"bad image shape {self.image_shape}")
        if len(self.group_channels) != len(self.group_stride2):
            raise ValueError("group_channels and group_stride2 lengths differ")
        if min(
            (self.first_channels, self.embed_dim, self.basic_dim, self.basic_hidden,
             self.n_categories, self.layers_per_group, *self.group_channels,
             *self.comb_hidden, *self.pretrain_hidden),
            default=0,
        ) < 1:
            raise ValueError("channel counts and layer widths must be positive")
        if len(self.comb_hidden) != 2:
            raise ValueError("comb_hidden must name exactly two hidden widths")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        halvings = sum(self.group_stride2)
        if min(h, w) >> halvings < 1:
            raise ValueError("too many stride-2 groups for the image size")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown net config keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg


@dataclass
class ParamEntry:
    """One optimizable tensor with its gradient/momentum buffers and its
    learning-rate/decay group."""

    name: str
    value: Array
    grad: Array
    vel: Array
    is_conv: bool
    decay: bool


def _fc_entries(name: str, p: LayerParams, is_conv: bool):
    yield ParamEntry(f"{name}.w", p.weights, p.grad_weights, p.vel_weights, is_conv, True)
    yield ParamEntry(f"{name}.b", p.bias, p.grad_bias, p.vel_bias, is_conv, False)


def _bn_entries(name: str, s: BnState, is_conv: bool):
    yield ParamEntry(f"{name}.gamma", s.gamma, s.grad_gamma, s.vel_gamma, is_conv, True)
    yield ParamEntry(f"{name}.beta", s.beta, s.grad_beta, s.vel_beta, is_conv, False)


@dataclass
class ConvLayer:
    params: LayerParams  # (cout, cin, kh, kw)
    bn: BnState
    stride: int
    pad: int


class Convnet:
    """Convolution stack -> global average pooling -> embedding projection."""

    def __init__(self, layers, embed: LayerParams, image_shape):
        self.layers = layers
        self.embed = embed
        self.image_shape = tuple(image_shape)

    def stack_forward(self, x: Array, mode: str):
        if x.shape[1:] != self.image_shape:
            raise nn.DimensionError(
                f"images {x.shape[1:]} do not match configured {self.image_shape}"
            )
        cache = []
        h = x
        for layer in self.layers:
            conv_in = h
            pre_bn = nn.conv2d_forward(conv_in, layer.params, layer.stride, layer.pad)
            pre_relu = nn.batchnorm_forward(pre_bn, layer.bn, mode)
            h = nn.relu(pre_relu)
            cache.append((conv_in, pre_bn, pre_relu))
        return h, cache

    def stack_backward(self, cache, grad_maps: Array) -> Array:
        g = grad_maps
        for layer, (conv_in, pre_bn, pre_relu) in zip(reversed(self.layers), reversed(cache)):
            g = nn.relu_backward(pre_relu, g)
            g = nn.batchnorm_backward(pre_bn, layer.bn, g)
            g = nn.conv2d_backward(conv_in, layer.params, g, layer.stride, layer.pad)
        return g

    def forward(self, x: Array, mode: str):
        maps, stack_cache = self.stack_forward(x, mode)
        pooled = maps.mean(axis=(2, 3))
        out = nn.dense_fc_forward(pooled, self.embed)
        return out, {"stack": stack_cache, "maps_shape": maps.shape, "pooled": pooled}

    def backward(self, cache, grad_out: Array) -> Array:
        grad_pooled = nn.dense_fc_backward(cache["pooled"], self.embed, grad_out)
        n, c, h, w = cache["maps_shape"]
        grad_maps = np.broadcast_to(grad_pooled[:, :, None, None] / (h * w), (n, c, h, w))
        return self.stack_backward(cache["stack"], grad_maps)

    def entries(self):
        for i, layer in enumerate(self.layers):
            yield from _fc_entries(f"conv{i}", layer.params, is_conv=True)
            yield from _bn_entries(f"conv{i}.bn", layer.bn, is_conv=True)
        yield from _fc_entries("embed", self.embed, is_conv=False)

    def bn_states(self):
        for i, layer in enumerate(self.layers):
            yield f"conv{i}.bn", layer.bn


class Basicnet:
    """Single sparse fully-connected layer plus ReLU."""

    def __init__(self, fc: LayerParams):
        self.fc = fc

    def forward(self, v: SparseBatch):
        pre = sparse_fc_forward(v, self.fc)
        return nn.relu(pre), {"v": v, "pre": pre}

    def backward(self, cache, grad_out: Array) -> None:
        g = nn.relu_backward(cache["pre"], grad_out)
        sparse_fc_backward(cache["v"], self.fc, g)

    def entries(self):
        yield from _fc_entries("basic", self.fc, is_conv=False)


class Combnet:
    """concat -> optional BN -> FC+ReLU+dropout twice -> FC to a scalar."""

    def __init__(self, bn, fc1: LayerParams, fc2: LayerParams, fc_out: LayerParams, dropout_rate: float):
        self.bn = bn
        self.fc1 = fc1
        self.fc2 = fc2
        self.fc_out = fc_out
        self.dropout_rate = dropout_rate

    def forward(self, x: Array, mode: str, rng):
        if mode == "train" and self.dropout_rate > 0.0 and rng is None:
            raise ValueError("training with dropout requires an RNG")
        cache = {"x": x}
        h = nn.batchnorm_forward(x, self.bn, mode) if self.bn is not None else x
        cache["h"] = h
        a1 = nn.dense_fc_forward(h, self.fc1)
        r1 = nn.relu(a1)
        d1, m1 = nn.dropout_forward(r1, self.dropout_rate, rng, mode)
        a2 = nn.dense_fc_forward(d1, self.fc2)
        r2 = nn.relu(a2)
        d2, m2 = nn.dropout_forward(r2, self.dropout_rate, rng, mode)
        z = nn.dense_fc_forward(d2, self.fc_out)[:, 0]
        cache.update(a1=a1, m1=m1, d1=d1, a2=a2, m2=m2, d2=d2)
        return z, cache

    def backward(self, cache, grad_z: Array) -> Array:
        g = nn.dense_fc_backward(cache["d2"], self.fc_out, grad_z[:, None])
        g = nn.dropout_backward(cache["m2"], g)
        g = nn.relu_backward(cache["a2"], g)
        g = nn.dense_fc_backward(cache["d1"], self.fc2, g)
        g = nn.dropout_backward(cache["m1"], g)
        g = nn.relu_backward(cache["a1"], g)
        g = nn.dense_fc_backward(cache["h"], self.fc1, g)
        if self.bn is not None:
            g = nn.batchnorm_backward(cache["x"], self.bn, g)
        return g

    def entries(self):
        if self.bn is not None:
            yield from _bn_entries("comb.bn", self.bn, is_conv=False)
        yield from _fc_entries("comb.fc1", self.fc1, is_conv=False)
        yield from _fc_entries("comb.fc2", self.fc2, is_conv=False)
        yield from _fc_entries("comb.out", self.fc_out, is_conv=False)

    def bn_states(self):
        if self.bn is not None:
            yield "comb.bn", self.bn


class DeepCtrNet:
    """Full CTR model over (images, sparse features) grouped batches."""

    def __init__(self, cfg: NetConfig, convnet: Convnet, basicnet: Basicnet, combnet: Combnet):
        self.cfg = cfg
        self.convnet = convnet
        self.basicnet = basicnet
        self.combnet = combnet

    def forward(self, images: Array, feats: SparseBatch, k: int, mode: str, rng=None):
        conv_out, conv_cache = self.convnet.forward(images, mode)
        copies = replicate_image_features(conv_out, k)
        if feats.num_rows != copies.shape[0]:
            raise nn.DimensionError(
                f"{feats.num_rows} feature rows for {copies.shape[0]} image copies"
            )
        basic_out, basic_cache = self.basicnet.forward(feats)
        x = np.concatenate([copies, basic_out], axis=1)
        z, comb_cache = self.combnet.forward(x, mode, rng)
        cache = {"conv": conv_cache, "basic": basic_cache, "comb": comb_cache, "k": k}
        return z, nn.sigmoid(z), cache

    def backward(self, cache, grad_z: Array, grad_mode: str = "paper") -> Array:
        grad_x = self.combnet.backward(cache["comb"], grad_z)
        e = self.cfg.embed_dim
        self.basicnet.backward(cache["basic"], grad_x[:, e:])
        grad_conv = reduce_copy_gradients(grad_x[:, :e], cache["k"], grad_mode)
        return self.convnet.backward(cache["conv"], grad_conv)

    def entries(self):
        yield from self.convnet.entries()
        yield from self.basicnet.entries()
        yield from self.combnet.entries()

    def bn_states(self):
        yield from self.convnet.bn_states()
        yield from self.combnet.bn_states()

    def weight_sq_norm(self) -> float:
        """Sum of squares of the decay-regularized parameters."""
        return float(sum((e.value ** 2).sum() for e in self.entries() if e.decay))

    def num_params(self) -> int:
        return int(sum(e.value.size for e in self.entries()))

    def zero_grads(self) -> None:
        for e in self.entries():
            e.grad[...] = 0.0


class PretrainNet:
    """Category classifier over the shared convolution stack."""

    def __init__(self, convnet: Convnet, fc_a: LayerParams, fc_b: LayerParams, fc_out: LayerParams):
        self.convnet = convnet
        self.fc_a = fc_a
        self.fc_b = fc_b
        self.fc_out = fc_out

    def forward(self, images: Array, mode: str):
        maps, stack_cache = self.convnet.stack_forward(images, mode)
        pooled = maps.mean(axis=(2, 3))
        a1 = nn.dense_fc_forward(pooled, self.fc_a)
        r1 = nn.relu(a1)
        a2 = nn.dense_fc_forward(r1, self.fc_b)
        r2 = nn.relu(a2)
        logits = nn.dense_fc_forward(r2, self.fc_out)
        cache = {
            "stack": stack_cache, "maps_shape": maps.shape, "pooled": pooled,
            "a1": a1, "r1": r1, "a2": a2, "r2": r2,
        }
        return logits, cache

    def backward(self, cache, grad_logits: Array) -> None:
        g = nn.dense_fc_backward(cache["r2"], self.fc_out, grad_logits)
        g = nn.relu_backward(cache["a2"], g)
        g = nn.dense_fc_backward(cache["r1"], self.fc_b, g)
        g = nn.relu_backward(cache["a1"], g)
        grad_pooled = nn.dense_fc_backward(cache["pooled"], self.fc_a, g)
        n, c, h, w = cache["maps_shape"]
        grad_maps = np.broadcast_to(grad_pooled[:, :, None, None] / (h * w), (n, c, h, w))
        self.convnet.stack_backward(cache["stack"], grad_maps)

    def entries(self):
        yield from self.convnet.entries()
        yield from _fc_entries("pre.fc_a", self.fc_a, is_conv=False)
        yield from _fc_entries("pre.fc_b", self.fc_b, is_conv=False)
        yield from _fc_entries("pre.fc_out", self.fc_out, is_conv=False)

    def bn_states(self):
        yield from self.convnet.bn_states()


def he_fc(rng, fan_in: int, fan_out: int) -> LayerParams:
    std = np.sqrt(2.0 / fan_in)
    return LayerParams(weights=rng.normal(0.0, std, (fan_in, fan_out)), bias=np.zeros(fan_out))


def he_conv(rng, cout: int, cin: int, k: int) -> LayerParams:
    std = np.sqrt(2.0 / (cin * k * k))
    return LayerParams(weights=rng.normal(0.0, std, (cout, cin, k, k)), bias=np.zeros(cout))


def build_networks(cfg: NetConfig, rng: np.random.Generator):
    """Fresh (DeepCtrNet, PretrainNet) pair sharing one convolution stack.

    Fan-in-scaled Gaussian init for weights, zero biases, BN gamma 1 and
    beta 0.  The pretraining head aliases the conv parameters, so a
    pretraining step is visible to the CTR model and vice versa.
    """
    cfg.validate()
    layers = []
    cin = cfg.image_shape[0]
    layers.append(
        ConvLayer(
            params=he_conv(rng, cfg.first_channels, cin, cfg.first_kernel),
            bn=BnState.create(cfg.first_channels),
            stride=1,
            pad=cfg.first_kernel // 2,
        )
    )
    prev = cfg.first_channels
    for ch, stride2 in zip(cfg.group_channels, cfg.group_stride2):
        for layer_i in range(cfg.layers_per_group):
            stride = 2 if (layer_i == 0 and stride2) else 1
            layers.append(
                ConvLayer(params=he_conv(rng, ch, prev, 3), bn=BnState.create(ch), stride=stride, pad=1)
            )
            prev = ch

    convnet = Convnet(layers, embed=he_fc(rng, prev, cfg.embed_dim), image_shape=cfg.image_shape)
    basicnet = Basicnet(he_fc(rng, cfg.basic_dim, cfg.basic_hidden))
    comb_in = cfg.embed_dim + cfg.basic_hidden
    combnet = Combnet(
        bn=BnState.create(comb_in) if cfg.use_bn_comb else None,
        fc1=he_fc(rng, comb_in, cfg.comb_hidden[0]),
        fc2=he_fc(rng, cfg.comb_hidden[0], cfg.comb_hidden[1]),
        fc_out=he_fc(rng, cfg.comb_hidden[1], 1),
        dropout_rate=cfg.dropout_rate,
    )
    net = DeepCtrNet(cfg, convnet, basicnet, combnet)

    pnet = PretrainNet(
        convnet,
        fc_a=he_fc(rng, prev, cfg.pretrain_hidden[0]),
        fc_b=he_fc(rng, cfg.pretrain_hidden[0], cfg.pretrain_hidden[1]),
        fc_out=he_fc(rng, cfg.pretrain_hidden[1], cfg.n_categories),
    )
    return net, pnet


def crop_batch_images(images: Array, size: int) -> Array:
    if images.shape[2] == size and images.shape[3] == size:
        return images
    return np.stack([center_crop(images[i], size) for i in range(images.shape[0])])


def deepctr_forward(net: DeepCtrNet, batch: GroupedBatch, mode: str, rng=None):
    """Scores and probabilities for a grouped batch; images larger than the
    network input are center-cropped."""
    images = crop_batch_images(batch.images, net.cfg.image_shape[1])
    z, yhat, _ = net.forward(images, batch.features, batch.k, mode, rng)
    return z, yhat


def forward_backward(
    net: DeepCtrNet,
    batch: GroupedBatch,
    lam: float,
    grad_mode: str = "paper",
    rng=None,
    images: Array = None,
) -> float:
    """One grouped training pass; parameter gradients are accumulated on
    the network's buffers.

    Returns the batch loss including the ``lam * ||W||^2`` penalty.  The
    penalty's gradient is not applied here; the optimizer's weight-decay
    term carries it.
    """
    if images is None:
        images = crop_batch_images(batch.images, net.cfg.image_shape[1])
    z, _, cache = net.forward(images, batch.features, batch.k, "train", rng)
    loss, grad_z = nn.sigmoid_logloss(z, batch.labels, net.weight_sq_norm(), lam)
    if not np.isfinite(loss):
        raise DivergenceError(f"non-finite training loss {loss!r}")
    net.backward(cache, grad_z, grad_mode)
    return loss


def pretrain_forward_backward(pnet: PretrainNet, images: Array, labels: Array):
    """One classification pass over a batch of images; returns (loss, logits)
    with gradients accumulated into the shared conv parameters."""
    logits, cache = pnet.forward(images, "train")
    loss, grad_logits = nn.softmax_cross_entropy(logits, labels)
    if not np.isfinite(loss):
        raise DivergenceError(f"non-finite pretraining loss {loss!r}")
    pnet.backward(cache, grad_logits)
    return loss, logits


def predict_scores(net: DeepCtrNet, impressions, store, image_chunk: int = 64, row_chunk: int = 16384) -> Array:
    """Eval-mode click probabilities for a list of impressions.

    The convolution stack runs once per unique image; rows then gather
    their image's embedding.  Running statistics make the result
    independent of the chunking.
    """
    from .data import build_group_index, impressions_to_csr  # local to avoid cycle

    g = build_group_index(impressions)
    size = net.cfg.image_shape[1]
    embeds = np.empty((g.num_images, net.cfg.embed_dim))
    for lo in range(0, g.num_images, image_chunk):
        ids = g.image_ids[lo : lo + image_chunk]
        imgs = np.stack([center_crop(store.load(u), size) for u in ids])
        embeds[lo : lo + len(ids)], _ = net.convnet.forward(imgs, "eval")

    pos = np.empty(len(impressions), dtype=np.int64)
    for gi, rows in enumerate(g.rows_by_image):
        pos[rows] = gi

    feats = impressions_to_csr(impressions, net.cfg.basic_dim)
    out = np.empty(len(impressions))
    for lo in range(0, len(impressions), row_chunk):
        hi = min(lo + row_chunk, len(impressions))
        basic_out, _ = net.basicnet.forward(feats.row_slice(lo, hi))
        x = np.concatenate([embeds[pos[lo:hi]], basic_out], axis=1)
        z, _ = net.combnet.forward(x, "eval", None)
        out[lo:hi] = nn.sigmoid(z)
    return out
