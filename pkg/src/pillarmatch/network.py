"""Learnable pipeline from pillars to matching descriptors.

Pillar stacks and key-point coordinates pass through a shared linear pillar
encoder and a shared positional MLP, are summed into graph node states, then
refined by alternating self/cross multi-head attention layers with residual
connections, and finally projected into matching descriptors. All weights are
shared between the two clouds within a layer.
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Tensor
from .cloud import Pillar
from .container import read_container, write_container
from .errors import ConfigError, ShapeError

POINT_FEATURE_DIM = 11  # coords(3) + intensity(1) + offset-to-centroid(3) + norm(1) + offset-to-keypoint(3)


@dataclass(frozen=True)
class HyperParams:
    """Architecture and matching configuration.

    ``positional_hidden`` are the positional-MLP hidden widths; the toggles at
    the bottom select between the documented behavioral variants and are
    recorded in every checkpoint manifest.
    """

    src_keypoints: int = 100
    tgt_keypoints: int = 100
    pillar_points: int = 100
    pillar_radius: float = 0.5
    feature_depth: int = 32
    attention_heads: int = 8
    attention_layers: int = 6
    sinkhorn_iterations: int = 100
    positional_hidden: tuple[int, ...] = (32, 64, 128, 256)
    attention_scale: str = "full"        # "full": 1/sqrt(feature_depth); "per-head"
    post_attention_mlp: bool = False     # optional extra MLP after each attention block
    sinkhorn_mode: str = "alternating"   # or "simultaneous"
    sinkhorn_marginals: str = "uniform"  # or "dustbin-weighted"
    match_threshold: float = 0.2
    dustbin_init: float = 1.0

    def __post_init__(self):
        if self.feature_depth % self.attention_heads != 0:
            raise ConfigError("feature_depth must be divisible by attention_heads")
        if self.attention_scale not in ("full", "per-head"):
            raise ConfigError(f"unknown attention_scale {self.attention_scale!r}")
        if self.sinkhorn_mode not in ("alternating", "simultaneous"):
            raise ConfigError(f"unknown sinkhorn_mode {self.sinkhorn_mode!r}")
        if self.sinkhorn_marginals not in ("uniform", "dustbin-weighted"):
            raise ConfigError(f"unknown sinkhorn_marginals {self.sinkhorn_marginals!r}")
        object.__setattr__(self, "positional_hidden", tuple(self.positional_hidden))

    @property
    def stack_depth(self) -> int:
        return self.pillar_points * POINT_FEATURE_DIM

    @property
    def head_depth(self) -> int:
        return self.feature_depth // self.attention_heads

    def to_manifest(self) -> dict:
        out = asdict(self)
        out["positional_hidden"] = list(self.positional_hidden)
        return out

    @classmethod
    def from_manifest(cls, manifest: dict) -> "HyperParams":
        fields = dict(manifest)
        fields["positional_hidden"] = tuple(fields.get("positional_hidden", ()))
        return cls(**fields)


# Xavier gains: residual attention outputs and the score-producing projection
# start small so node states stay near their layer-0 scale and raw descriptor
# dot products begin in a range Sinkhorn and the dustbin scalar can work with.
ATTENTION_OUTPUT_GAIN = 0.25
PROJECT_GAIN = 0.25


def _xavier(rng: np.random.Generator, fan_out: int, fan_in: int, dtype, gain: float = 1.0) -> Tensor:
    bound = gain * np.sqrt(6.0 / (fan_in + fan_out))
    w = rng.uniform(-bound, bound, size=(fan_out, fan_in)).astype(dtype)
    return Tensor(w, requires_grad=True)


@dataclass
class AttentionLayerParams:
    output_weight: Tensor                 # (depth, depth), applied to concatenated heads
    query_weights: list[Tensor]           # per head, (head_depth, depth)
    key_weights: list[Tensor]
    value_weights: list[Tensor]
    mlp_weights: list[Tensor] = field(default_factory=list)  # optional post-attention MLP


@dataclass
class ModelParameters:
    """All learnable weights plus batch-norm running state."""

    hyper: HyperParams
    pillar_weight: Tensor                 # (depth, stack_depth)
    pillar_norm: BatchNormState
    positional_weights: list[Tensor]      # hidden layers then output
    positional_norms: list[BatchNormState]
    layers: list[AttentionLayerParams]
    project_weight: Tensor                # (depth, depth)
    dustbin_score: Tensor                 # scalar

    @classmethod
    def initialize(cls, hyper: HyperParams, seed: int = 0, dtype=np.float32) -> "ModelParameters":
        rng = np.random.default_rng(seed)
        depth = hyper.feature_depth
        pillar_weight = _xavier(rng, depth, hyper.stack_depth, dtype)
        pillar_norm = BatchNormState.create(depth, dtype=dtype)

        positional_weights, positional_norms = [], []
        fan_in = 3
        for width in hyper.positional_hidden:
            positional_weights.append(_xavier(rng, width, fan_in, dtype))
            positional_norms.append(BatchNormState.create(width, dtype=dtype))
            fan_in = width
        positional_weights.append(_xavier(rng, depth, fan_in, dtype))

        layers = []
        for _ in range(hyper.attention_layers):
            layer = AttentionLayerParams(
                output_weight=_xavier(rng, depth, depth, dtype, gain=ATTENTION_OUTPUT_GAIN),
                query_weights=[
                    _xavier(rng, hyper.head_depth, depth, dtype)
                    for _ in range(hyper.attention_heads)
                ],
                key_weights=[
                    _xavier(rng, hyper.head_depth, depth, dtype)
                    for _ in range(hyper.attention_heads)
                ],
                value_weights=[
                    _xavier(rng, hyper.head_depth, depth, dtype)
                    for _ in range(hyper.attention_heads)
                ],
            )
            if hyper.post_attention_mlp:
                layer.mlp_weights = [
                    _xavier(rng, depth * 2, depth, dtype),
                    _xavier(rng, depth, depth * 2, dtype),
                ]
            layers.append(layer)

        project_weight = _xavier(rng, depth, depth, dtype, gain=PROJECT_GAIN)
        dustbin_score = Tensor(
            np.array(hyper.dustbin_init, dtype=dtype), requires_grad=True
        )
        return cls(
            hyper=hyper,
            pillar_weight=pillar_weight,
            pillar_norm=pillar_norm,
            positional_weights=positional_weights,
            positional_norms=positional_norms,
            layers=layers,
            project_weight=project_weight,
            dustbin_score=dustbin_score,
        )

    def named_parameters(self) -> dict[str, Tensor]:
        """Learnable tensors in a stable order, keyed by descriptive names."""
        out = {"pillar.weight": self.pillar_weight}
        out["pillar.norm.gamma"] = self.pillar_norm.gamma
        out["pillar.norm.beta"] = self.pillar_norm.beta
        for i, w in enumerate(self.positional_weights):
            out[f"positional.{i}.weight"] = w
        for i, norm in enumerate(self.positional_norms):
            out[f"positional.{i}.norm.gamma"] = norm.gamma
            out[f"positional.{i}.norm.beta"] = norm.beta
        for li, layer in enumerate(self.layers):
            out[f"attention.{li}.output"] = layer.output_weight
            for h in range(len(layer.query_weights)):
                out[f"attention.{li}.head{h}.query"] = layer.query_weights[h]
                out[f"attention.{li}.head{h}.key"] = layer.key_weights[h]
                out[f"attention.{li}.head{h}.value"] = layer.value_weights[h]
            for wi, w in enumerate(layer.mlp_weights):
                out[f"attention.{li}.mlp.{wi}"] = w
        out["project.weight"] = self.project_weight
        out["dustbin.score"] = self.dustbin_score
        return out

    def running_stats(self) -> dict[str, np.ndarray]:
        out = {
            "pillar.norm.running_mean": self.pillar_norm.running_mean,
            "pillar.norm.running_var": self.pillar_norm.running_var,
        }
        for i, norm in enumerate(self.positional_norms):
            out[f"positional.{i}.norm.running_mean"] = norm.running_mean
            out[f"positional.{i}.norm.running_var"] = norm.running_var
        return out

    def zero_grad(self) -> None:
        for t in self.named_parameters().values():
            t.zero_grad()


# ---------------------------------------------------------------------------
# forward pieces
# ---------------------------------------------------------------------------

def build_feature_stack(pillar: Pillar) -> np.ndarray:
    """Flattened (capacity * 11,) feature stack for one pillar.

    Each real member contributes [x, y, z, intensity, offset to pillar
    centroid, point norm, offset to key-point]; pad rows stay all zero.
    """
    z = pillar.capacity
    stack = np.zeros((z, POINT_FEATURE_DIM))
    real = pillar.real_count
    if real:
        pts = pillar.members[:real, :3]
        stack[:real, 0:3] = pts
        stack[:real, 3] = pillar.members[:real, 3]
        stack[:real, 4:7] = pts - pillar.centroid
        stack[:real, 7] = np.linalg.norm(pts, axis=1)
        stack[:real, 8:11] = pts - pillar.keypoint.position
    return stack.reshape(-1)


def feature_stacks(pillars) -> np.ndarray:
    return np.stack([build_feature_stack(p) for p in pillars])


def encode_pillars(stacks: Tensor, params: ModelParameters, train: bool) -> Tensor:
    """Shared linear projection + batchnorm + ReLU over (pillars, stack_depth)."""
    if stacks.shape[-1] != params.hyper.stack_depth:
        raise ShapeError(
            f"stack depth {stacks.shape[-1]} != expected {params.hyper.stack_depth}"
        )
    return ad.batchnorm_relu(ad.linear(stacks, params.pillar_weight), params.pillar_norm, train)


def encode_positions(coords: Tensor, params: ModelParameters, train: bool) -> Tensor:
    """Shared MLP over raw (pillars, 3) key-point coordinates."""
    x = coords
    for w, norm in zip(params.positional_weights[:-1], params.positional_norms):
        x = ad.batchnorm_relu(ad.linear(x, w), norm, train)
    return ad.linear(x, params.positional_weights[-1])


def init_nodes(descriptors: Tensor, positions: Tensor) -> Tensor:
    if descriptors.shape != positions.shape:
        raise ShapeError(
            f"descriptor shape {descriptors.shape} != positional shape {positions.shape}"
        )
    return descriptors + positions


def attention(q: Tensor, k: Tensor, v: Tensor, depth: int | None = None) -> Tensor:
    """softmax(q k^T / sqrt(depth)) v, softmax over the key axis.

    ``depth`` defaults to the query feature depth; multi-head callers pass the
    full node depth so the scale stays 1/sqrt(feature_depth) inside heads.
    """
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ShapeError("attention expects 2-D q, k, v")
    if q.shape[1] != k.shape[1] or k.shape[0] != v.shape[0]:
        raise ShapeError(
            f"attention shapes incompatible: q{q.shape} k{k.shape} v{v.shape}"
        )
    if depth is None:
        depth = q.shape[1]
    scores = (q @ k.T) * (1.0 / np.sqrt(float(depth)))
    return scores.softmax(axis=1) @ v


def multi_head_attention(
    layer: AttentionLayerParams, queries: Tensor, sources: Tensor, hyper: HyperParams
) -> Tensor:
    scale_depth = hyper.feature_depth if hyper.attention_scale == "full" else hyper.head_depth
    heads = []
    for wq, wk, wv in zip(layer.query_weights, layer.key_weights, layer.value_weights):
        heads.append(
            attention(
                ad.linear(queries, wq),
                ad.linear(sources, wk),
                ad.linear(sources, wv),
                depth=scale_depth,
            )
        )
    merged = ad.concat(heads, axis=1)
    if merged.shape[1] != hyper.feature_depth:
        raise ShapeError("concatenated heads do not reassemble the feature depth")
    out = ad.linear(merged, layer.output_weight)
    if layer.mlp_weights:
        hidden = ad.linear(out, layer.mlp_weights[0]).relu()
        out = ad.linear(hidden, layer.mlp_weights[1])
    return out


def gnn_layer(
    nodes_a: Tensor,
    nodes_b: Tensor,
    layer: AttentionLayerParams,
    layer_index: int,
    hyper: HyperParams,
) -> tuple[Tensor, Tensor]:
    """One residual attention update for both graphs.

    Even layers attend within each graph (self edges); odd layers attend to
    the other graph (cross edges). Both updates read the pre-update states.
    """
    if layer_index % 2 == 0:
        src_a, src_b = nodes_a, nodes_b
    else:
        src_a, src_b = nodes_b, nodes_a
    delta_a = multi_head_attention(layer, nodes_a, src_a, hyper)
    delta_b = multi_head_attention(layer, nodes_b, src_b, hyper)
    return nodes_a + delta_a, nodes_b + delta_b


def final_projection(nodes: Tensor, params: ModelParameters) -> Tensor:
    return ad.linear(nodes, params.project_weight)


def forward_descriptors(
    params: ModelParameters,
    stacks_src: np.ndarray,
    stacks_tgt: np.ndarray,
    coords_src: np.ndarray,
    coords_tgt: np.ndarray,
    train: bool = False,
) -> tuple[Tensor, Tensor]:
    """Full descriptor pipeline for one pair.

    Pillar and positional encodings run jointly over both clouds so batch-norm
    statistics pool across every pillar in the forward pass.
    """
    hyper = params.hyper
    dtype = params.pillar_weight.dtype
    n = len(stacks_src)
    stacks = ad.as_tensor(np.concatenate([stacks_src, stacks_tgt]), dtype=dtype)
    coords = ad.as_tensor(np.concatenate([coords_src, coords_tgt]), dtype=dtype)
    encoded = encode_pillars(stacks, params, train)
    positional = encode_positions(coords, params, train)
    nodes = init_nodes(encoded, positional)
    nodes_src = nodes.narrow(0, 0, n)
    nodes_tgt = nodes.narrow(0, n, len(stacks_tgt))
    for index, layer in enumerate(params.layers):
        nodes_src, nodes_tgt = gnn_layer(nodes_src, nodes_tgt, layer, index, hyper)
    return final_projection(nodes_src, params), final_projection(nodes_tgt, params)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, params: ModelParameters, extra_meta: dict | None = None,
                    extra_arrays: dict | None = None) -> None:
    """Write parameters, running stats and the hyperparameter manifest."""
    meta = {"hyper": params.hyper.to_manifest()}
    if extra_meta:
        meta.update(extra_meta)
    arrays = {f"param.{k}": v.data for k, v in params.named_parameters().items()}
    arrays.update({f"stat.{k}": v for k, v in params.running_stats().items()})
    if extra_arrays:
        arrays.update({f"extra.{k}": v for k, v in extra_arrays.items()})
    write_container(path, "checkpoint", meta, arrays)


def load_checkpoint(path, dtype=np.float32):
    """Return ``(params, meta, extra_arrays)`` for a checkpoint file."""
    meta, arrays = read_container(path, expect_kind="checkpoint")
    hyper = HyperParams.from_manifest(meta["hyper"])
    params = ModelParameters.initialize(hyper, seed=0, dtype=dtype)
    named = params.named_parameters()
    for name, tensor in named.items():
        key = f"param.{name}"
        if key not in arrays:
            raise ConfigError(f"checkpoint missing parameter {name!r}")
        value = arrays[key].astype(dtype)
        if value.shape != tensor.data.shape:
            raise ConfigError(
                f"checkpoint parameter {name!r} has shape {value.shape}, "
                f"expected {tensor.data.shape}"
            )
        tensor.data = value
    stats = params.running_stats()
    for name in stats:
        key = f"stat.{name}"
        if key in arrays:
            stats[name][...] = arrays[key].astype(stats[name].dtype)
    extras = {
        name[len("extra.") :]: arr
        for name, arr in arrays.items()
        if name.startswith("extra.")
    }
    return params, meta, extras
