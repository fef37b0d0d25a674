"""The mixer network: embeddings, low-rank mixing blocks, gated branch
fusion, convolutional sequence downscaling, and the scoring head.

Layer structure, repeated S times on a user-history tensor of shape
(B, L, D): two residual MLP blocks run in parallel on the same input, one
mixing along the sequence axis (operating on the transposed (B, D, L)
view) and one along the channel axis; a per-position sigmoid gate blends
them; a strided convolution then shortens the sequence before the next
layer. The pre-shortening output of every layer is kept, giving a stack
of progressively coarser sequence maps that the head pools, projects,
and dots against the item embedding table.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError, DimensionError
from .tensor import Tensor

ACTIVATION_KINDS = ("gelu", "swish")


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    ``D`` must be divisible by ``F``; each feature field embeds to width
    ``d = D // F`` and the per-behavior vector is the concatenation over
    fields. ``D_prime``/``L_prime`` are the latent widths of the channel
    and sequence mixers when ``low_rank`` is set; with ``low_rank`` off
    both mixers use their full axis width. Field 0 is the item field.
    """

    L: int = 50
    F: int = 2
    D: int = 64
    D_prime: int = 16
    L_prime: int = 12
    S: int = 3
    K: int = 3
    stride: int = 2
    padding: int = 1
    activation: str = "gelu"
    low_rank: bool = True
    cross_behavior_on: bool = True
    cross_feature_on: bool = True
    fusion_on: bool = True
    pyramid_on: bool = True
    field_names: tuple[str, ...] = ()
    vocab_sizes: tuple[int, ...] = ()
    eps: float = 1e-5

    @property
    def d(self) -> int:
        return self.D // self.F

    def scale_lengths(self) -> list[int]:
        """Sequence length seen by each of the S layers."""
        if not self.pyramid_on:
            return [self.L] * self.S
        lengths = [self.L]
        for _ in range(self.S - 1):
            lengths.append((lengths[-1] + 2 * self.padding - self.K) // self.stride + 1)
        return lengths

    def behavior_latent(self, layer: int) -> int:
        return self.L_prime if self.low_rank else self.scale_lengths()[layer]

    def feature_latent(self) -> int:
        return self.D_prime if self.low_rank else self.D

    def validate(self) -> None:
        def require(cond: bool, msg: str) -> None:
            if not cond:
                raise ConfigError(msg)

        require(self.L >= 2, f"L must be >= 2, got {self.L}")
        require(self.F >= 1, f"F must be >= 1, got {self.F}")
        require(self.D >= 2, f"D must be >= 2, got {self.D}")
        require(self.D % self.F == 0, f"D={self.D} is not divisible by F={self.F}")
        require(self.S >= 1, f"S must be >= 1, got {self.S}")
        require(self.K >= 1 and self.K % 2 == 1, f"K must be odd and positive, got {self.K}")
        require(self.stride >= 1, f"stride must be >= 1, got {self.stride}")
        require(self.padding >= 0, f"padding must be >= 0, got {self.padding}")
        require(
            self.activation in ACTIVATION_KINDS,
            f"activation must be one of {ACTIVATION_KINDS}, got {self.activation!r}",
        )
        require(self.D_prime >= 1, f"D_prime must be >= 1, got {self.D_prime}")
        require(self.L_prime >= 1, f"L_prime must be >= 1, got {self.L_prime}")
        if self.low_rank:
            require(self.D_prime < self.D, f"low rank requires D_prime < D, got D_prime={self.D_prime}, D={self.D}")
            require(self.L_prime < self.L, f"low rank requires L_prime < L, got L_prime={self.L_prime}, L={self.L}")
        if self.field_names or self.vocab_sizes:
            require(
                len(self.field_names) == self.F,
                f"field_names has {len(self.field_names)} entries but F={self.F}",
            )
            require(
                len(self.vocab_sizes) == self.F,
                f"vocab_sizes has {len(self.vocab_sizes)} entries but F={self.F}",
            )
            require(
                all(v >= 3 for v in self.vocab_sizes),
                f"every field vocab needs >= 3 rows (padding, unknown, one value), got {self.vocab_sizes}",
            )
            require(
                len(set(self.field_names)) == len(self.field_names),
                f"field_names contains duplicates: {self.field_names}",
            )
        lengths = self.scale_lengths()
        if self.pyramid_on:
            for s, length in enumerate(lengths):
                require(
                    length >= self.K,
                    f"layer {s + 1} sequence length {length} is below kernel size {self.K}; "
                    f"reduce S or K, or increase L",
                )
            for s in range(self.S - 1):
                require(
                    lengths[s + 1] < lengths[s],
                    f"scaled lengths must strictly decrease, got {lengths} "
                    f"(stride {self.stride}, padding {self.padding}, K {self.K})",
                )
        require(
            lengths[-1] >= 2,
            f"last scale length {lengths[-1]} is too short to normalize over; reduce S",
        )
        if self.low_rank and self.cross_behavior_on:
            require(
                self.L_prime < lengths[-1],
                f"L_prime={self.L_prime} must be below the shortest scale length {lengths[-1]}",
            )


@dataclass
class MixerBlock:
    """One residual mixing block tied to a single axis.

    ``axis`` is 'behavior' (mixes sequence positions, width = that
    layer's length) or 'feature' (mixes channels, width = D). ``w1`` maps
    the axis width to the latent width, ``w2`` maps back.
    """

    axis: str
    gamma: Tensor
    beta: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    activation: str = "gelu"
    eps: float = 1e-5

    def tensors(self) -> dict[str, Tensor]:
        return {"gamma": self.gamma, "beta": self.beta, "w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


@dataclass
class PyramidOutput:
    """Per-layer fused sequence maps, finest first, lengths decreasing."""

    scales: list[Tensor]

    def lengths(self) -> list[int]:
        return [s.shape[-2] for s in self.scales]


def mixer_block_forward(x: Tensor, block: MixerBlock) -> Tensor:
    """Residual MLP along the last axis: x + act(LN(x) @ w1 + b1) @ w2 + b2.

    ``x`` is (..., A) where A is the block's axis width. Callers feeding a
    behavior-axis block pass the transposed (..., D, L) view.
    """
    width = x.shape[-1]
    if width != block.w1.shape[0]:
        raise DimensionError(
            f"{block.axis} block expects axis width {block.w1.shape[0]}, got input shape {x.shape}"
        )
    normed = T.layer_norm(x, block.gamma, block.beta, eps=block.eps)
    hidden = T.activation(T.add(T.matmul(normed, block.w1), block.b1), block.activation)
    return T.add(x, T.add(T.matmul(hidden, block.w2), block.b2))


def adaptive_fusion(x: Tensor, y_behavior: Tensor, y_feature: Tensor, gate_w: Tensor, gate_b: Tensor) -> Tensor:
    """Blend the two branch outputs with a per-position scalar gate.

    alpha = sigmoid(x @ gate_w + gate_b) has one value per sequence
    position, computed from the layer input; the result is the pointwise
    convex combination alpha * y_behavior + (1 - alpha) * y_feature.
    """
    if y_behavior.shape != y_feature.shape or x.shape != y_behavior.shape:
        raise DimensionError(
            f"fusion inputs must share one shape, got {x.shape}, {y_behavior.shape}, {y_feature.shape}"
        )
    alpha = T.sigmoid(T.add(T.matmul(x, gate_w), gate_b))
    one = T.tensor(np.ones((), dtype=x.dtype))
    return T.add(T.mul(alpha, y_behavior), T.mul(T.sub(one, alpha), y_feature))


def period_scale(z: Tensor, conv_w: Tensor, stride: int, padding: int) -> Tensor:
    """Shorten the sequence axis with a strided cross-channel convolution."""
    return T.conv1d(z, conv_w, stride=stride, padding=padding)


def embed_sequence(fields: np.ndarray, params: dict[str, Tensor], config: ModelConfig) -> Tensor:
    """Look up and concatenate per-field embeddings.

    ``fields`` is an integer (B, L, F) array; the result is (B, L, D)
    with each position's vector laid out field 0 first.
    """
    fields = np.asarray(fields)
    if fields.ndim != 3 or fields.shape[2] != config.F:
        raise DimensionError(f"fields must be (B, L, {config.F}), got {fields.shape}")
    parts = []
    for f, name in enumerate(config.field_names):
        idx = fields[:, :, f]
        limit = config.vocab_sizes[f]
        if idx.size and (idx.min() < 0 or idx.max() >= limit):
            bad = np.argwhere((idx < 0) | (idx >= limit))[0]
            raise DataError(
                f"field {name!r} index {int(idx[tuple(bad)])} out of range [0, {limit}) "
                f"at batch row {int(bad[0])}, position {int(bad[1])}"
            )
        parts.append(T.embedding(params[f"emb.{name}"], idx))
    return parts[0] if len(parts) == 1 else T.concat(parts, axis=2)


def pyramid_forward(x: Tensor, config: ModelConfig, params: dict[str, Tensor]) -> PyramidOutput:
    """Run the S mixer layers, collecting each fused map before it is
    shortened for the next layer."""
    scales: list[Tensor] = []
    h = x
    for s in range(config.S):
        y_behavior = None
        y_feature = None
        if config.cross_behavior_on:
            view = T.transpose(h, (0, 2, 1))
            mixed = mixer_block_forward(view, _behavior_block(params, config, s))
            y_behavior = T.transpose(mixed, (0, 2, 1))
        if config.cross_feature_on:
            y_feature = mixer_block_forward(h, _feature_block(params, config, s))
        if y_behavior is not None and y_feature is not None:
            if config.fusion_on:
                z = adaptive_fusion(h, y_behavior, y_feature, params[f"layer{s}.gate.w"], params[f"layer{s}.gate.b"])
            else:
                half = T.tensor(np.asarray(0.5, dtype=x.dtype))
                z = T.add(T.mul(half, y_behavior), T.mul(half, y_feature))
        elif y_behavior is not None:
            z = y_behavior
        elif y_feature is not None:
            z = y_feature
        else:
            z = h
        scales.append(z)
        if s < config.S - 1:
            h = period_scale(z, params[f"layer{s}.conv.w"], config.stride, config.padding) if config.pyramid_on else z
    return PyramidOutput(scales)


def downscale_mask(mask: np.ndarray, k: int, stride: int, padding: int) -> np.ndarray:
    """Shorten a (B, L) validity mask with the convolution's geometry: an
    output position is real when any input position under its window is."""
    mask = np.asarray(mask, dtype=bool)
    padded = np.pad(mask, ((0, 0), (padding, padding)))
    out_len = (mask.shape[1] + 2 * padding - k) // stride + 1
    out = np.zeros((mask.shape[0], out_len), dtype=bool)
    for o in range(out_len):
        out[:, o] = padded[:, o * stride : o * stride + k].any(axis=1)
    return out


def scale_masks(mask: np.ndarray, config: ModelConfig) -> list[np.ndarray]:
    """Validity masks matching each pyramid scale's length."""
    masks = [np.asarray(mask, dtype=bool)]
    for _ in range(config.S - 1):
        masks.append(downscale_mask(masks[-1], config.K, config.stride, config.padding) if config.pyramid_on else masks[-1])
    return masks


def score_items(pyr: PyramidOutput, masks: list[np.ndarray], params: dict[str, Tensor], config: ModelConfig) -> Tensor:
    """Pool every scale, project, and score the full item vocabulary.

    Each scale is masked mean-pooled over its real positions, the pooled
    vectors are concatenated and linearly projected to the item embedding
    width, and scores are dot products against every item table row. A
    fully padded row pools to zeros and is scored from the projection of
    zeros.
    """
    pooled = []
    for z, m in zip(pyr.scales, masks):
        if z.shape[:2] != m.shape:
            raise DimensionError(f"scale shape {z.shape} does not match mask shape {m.shape}")
        weights = m.astype(z.dtype)
        counts = np.maximum(weights.sum(axis=1, keepdims=True), 1.0)
        weights = weights / counts
        pooled.append(T.sum_(T.mul(z, T.tensor(weights[:, :, None])), axis=1))
    joined = pooled[0] if len(pooled) == 1 else T.concat(pooled, axis=1)
    user_vec = T.add(T.matmul(joined, params["head.w"]), params["head.b"])
    item_table = params[f"emb.{config.field_names[0]}"]
    return T.matmul(user_vec, T.transpose(item_table, (1, 0)))


def _behavior_block(params: dict[str, Tensor], config: ModelConfig, s: int) -> MixerBlock:
    p = {k.rsplit(".", 1)[1]: v for k, v in params.items() if k.startswith(f"layer{s}.behav.")}
    return MixerBlock(axis="behavior", activation=config.activation, eps=config.eps, **p)


def _feature_block(params: dict[str, Tensor], config: ModelConfig, s: int) -> MixerBlock:
    p = {k.rsplit(".", 1)[1]: v for k, v in params.items() if k.startswith(f"layer{s}.feat.")}
    return MixerBlock(axis="feature", activation=config.activation, eps=config.eps, **p)


def build_params(config: ModelConfig, rng: np.random.Generator, dtype=np.float32, init_scale: float = 0.02) -> dict[str, Tensor]:
    """Allocate and initialize every trainable tensor, in a stable order."""
    params: dict[str, Tensor] = {}

    def weight(name: str, shape: tuple[int, ...]) -> None:
        params[name] = T.Tensor(rng.normal(0.0, init_scale, size=shape).astype(dtype), requires_grad=True)

    def zeros(name: str, shape: tuple[int, ...]) -> None:
        params[name] = T.Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

    def ones(name: str, shape: tuple[int, ...]) -> None:
        params[name] = T.Tensor(np.ones(shape, dtype=dtype), requires_grad=True)

    for name, vocab in zip(config.field_names, config.vocab_sizes):
        weight(f"emb.{name}", (vocab, config.d))
    lengths = config.scale_lengths()
    for s in range(config.S):
        if config.cross_behavior_on:
            width, latent = lengths[s], config.behavior_latent(s)
            ones(f"layer{s}.behav.gamma", (width,))
            zeros(f"layer{s}.behav.beta", (width,))
            weight(f"layer{s}.behav.w1", (width, latent))
            zeros(f"layer{s}.behav.b1", (latent,))
            weight(f"layer{s}.behav.w2", (latent, width))
            zeros(f"layer{s}.behav.b2", (width,))
        if config.cross_feature_on:
            width, latent = config.D, config.feature_latent()
            ones(f"layer{s}.feat.gamma", (width,))
            zeros(f"layer{s}.feat.beta", (width,))
            weight(f"layer{s}.feat.w1", (width, latent))
            zeros(f"layer{s}.feat.b1", (latent,))
            weight(f"layer{s}.feat.w2", (latent, width))
            zeros(f"layer{s}.feat.b2", (width,))
        if config.cross_behavior_on and config.cross_feature_on and config.fusion_on:
            weight(f"layer{s}.gate.w", (config.D, 1))
            zeros(f"layer{s}.gate.b", (1,))
        if config.pyramid_on and s < config.S - 1:
            weight(f"layer{s}.conv.w", (config.K, config.D, config.D))
    weight("head.w", (config.S * config.D, config.d))
    zeros("head.b", (config.d,))
    return params


class PyramidMixerNet:
    """The assembled network: config, named parameters, and the forward pass."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32, params: dict[str, Tensor] | None = None):
        config.validate()
        if not config.field_names:
            raise ConfigError("model needs field_names and vocab_sizes before construction")
        self.config = config
        self.dtype = dtype
        self.params = params if params is not None else build_params(config, np.random.default_rng(seed), dtype)

    def forward(self, fields: np.ndarray, mask: np.ndarray) -> Tensor:
        """Score every item for each row: fields (B, L, F), mask (B, L)."""
        x = embed_sequence(fields, self.params, self.config)
        pyr = pyramid_forward(x, self.config, self.params)
        return score_items(pyr, scale_masks(mask, self.config), self.params, self.config)

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def astype(self, dtype) -> "PyramidMixerNet":
        """A copy of the network with parameters cast to ``dtype``."""
        cast = {
            name: T.Tensor(p.data.astype(dtype), requires_grad=p.requires_grad)
            for name, p in self.params.items()
        }
        return PyramidMixerNet(replace(self.config), dtype=dtype, params=cast)
