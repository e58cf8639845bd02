"""Tree-structured graph-convolution autoencoder for fixed-size point clouds.

The encoder alternates down-branching (a shared per-node affine map followed
by max-pooling over each contiguous block of C sibling rows) with graph
convolution, shrinking N points down to a single embedding node of width psi.
The decoder mirrors it: up-branching expands each node, concatenated with the
features of all its tree ancestors, into d children, and graph convolution
refines them until an (N,3) cloud comes out. The final decoder layer is
linear so coordinates can be negative.

Graph convolution at every node i computes

    h'_i = LeakyReLU( loop(h_i) + sum_d U_d @ anc_d(i) + b )

where loop is a two-layer affine bottleneck of configurable width and one U
matrix is shared per ancestor depth. Ancestor features are kept row-aligned
with the current layer: the decoder repeats coarse rows down to its children,
the encoder pools them with the same block max as the nodes, so the
within-block permutation invariance of pooling survives the whole stack.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from math import prod, sqrt

import numpy as np

from .errors import ConfigError, ContractError, FormatError, ShapeError
from .rng import substream
from .tensor import Tape, Tensor

CHECKPOINT_MAGIC = b"TGED"
CHECKPOINT_VERSION = 1


def _interior_widths(stages: int, base: int = 64, cap: int = 256) -> list[int]:
    return [min(base << i, cap) for i in range(stages - 1)]


def default_encoder_widths(stages: int, embedding_dim: int) -> tuple[int, ...]:
    return (3, *_interior_widths(stages), embedding_dim)


def default_decoder_widths(stages: int, embedding_dim: int) -> tuple[int, ...]:
    return (embedding_dim, *reversed(_interior_widths(stages)), 3)


@dataclass(frozen=True)
class ModelConfig:
    """Architecture description.

    Degrees are branching factors: encoder listed leaf-to-root (node count is
    divided), decoder root-to-leaf (node count is multiplied); both products
    must equal the cloud size. Widths carry one entry per stage boundary, so
    len(widths) == len(degrees) + 1, running 3 -> psi for the encoder and
    psi -> 3 for the decoder. `loop_support` is the hidden width of the
    graph-convolution self term.
    """

    encoder_degrees: tuple[int, ...]
    decoder_degrees: tuple[int, ...]
    embedding_dim: int
    encoder_widths: tuple[int, ...] = ()
    decoder_widths: tuple[int, ...] = ()
    activation_slope: float = 0.2
    loop_support: int = 10

    def __post_init__(self):
        object.__setattr__(self, "encoder_degrees", tuple(int(d) for d in self.encoder_degrees))
        object.__setattr__(self, "decoder_degrees", tuple(int(d) for d in self.decoder_degrees))
        if not self.encoder_widths:
            object.__setattr__(self, "encoder_widths",
                               default_encoder_widths(len(self.encoder_degrees),
                                                      self.embedding_dim))
        if not self.decoder_widths:
            object.__setattr__(self, "decoder_widths",
                               default_decoder_widths(len(self.decoder_degrees),
                                                      self.embedding_dim))
        object.__setattr__(self, "encoder_widths", tuple(int(w) for w in self.encoder_widths))
        object.__setattr__(self, "decoder_widths", tuple(int(w) for w in self.decoder_widths))

        if min(self.encoder_degrees, default=0) < 1 or min(self.decoder_degrees, default=0) < 1:
            raise ConfigError("every branching degree must be >= 1")
        if prod(self.encoder_degrees) != prod(self.decoder_degrees):
            raise ConfigError(
                f"degree products differ: encoder {prod(self.encoder_degrees)} "
                f"vs decoder {prod(self.decoder_degrees)}")
        if len(self.encoder_widths) != len(self.encoder_degrees) + 1:
            raise ConfigError("encoder needs len(degrees)+1 widths")
        if len(self.decoder_widths) != len(self.decoder_degrees) + 1:
            raise ConfigError("decoder needs len(degrees)+1 widths")
        if self.encoder_widths[0] != 3 or self.decoder_widths[-1] != 3:
            raise ConfigError("cloud-side feature width must be 3")
        if (self.encoder_widths[-1] != self.embedding_dim
                or self.decoder_widths[0] != self.embedding_dim):
            raise ConfigError("embedding-side feature width must equal embedding_dim")
        if self.embedding_dim < 1:
            raise ConfigError("embedding_dim must be >= 1")
        if not 0.0 < self.activation_slope < 1.0:
            raise ConfigError("activation_slope must be in (0,1)")
        if self.loop_support < 1:
            raise ConfigError("loop_support must be >= 1")

    @property
    def point_count(self) -> int:
        return prod(self.encoder_degrees)

    def to_dict(self) -> dict:
        return {
            "encoder_degrees": list(self.encoder_degrees),
            "decoder_degrees": list(self.decoder_degrees),
            "embedding_dim": self.embedding_dim,
            "encoder_widths": list(self.encoder_widths),
            "decoder_widths": list(self.decoder_widths),
            "activation_slope": self.activation_slope,
            "loop_support": self.loop_support,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)


def default_model_config(embedding_dim: int = 256) -> ModelConfig:
    """The stock 2048-point schedule: encoder (64,2,2,2,2,2), decoder mirrored."""
    return ModelConfig(encoder_degrees=(64, 2, 2, 2, 2, 2),
                       decoder_degrees=(1, 2, 2, 2, 2, 2, 64),
                       embedding_dim=embedding_dim)


@dataclass
class LayerState:
    """Nodes of one tree layer plus their per-node ancestor features.

    `ancestors[d]` is row-aligned with `nodes`: row i holds the depth-d
    ancestor feature of node i. Sibling groups are contiguous row blocks.
    """

    nodes: Tensor
    ancestors: list[Tensor] = field(default_factory=list)


# ------------------------------------------------------------------- layers


def down_branch(tape: Tape, state: LayerState, degree: int, weight: Tensor,
                bias: Tensor) -> LayerState:
    """Shared affine map per node, then max over each block of `degree` siblings.

    Ancestor features are pooled with the same block max so they stay aligned,
    and the freshly pooled feature joins the ancestor list.
    """
    mapped = tape.add_bias(tape.matmul(state.nodes, weight), bias)
    pooled = tape.group_max(mapped, degree)
    ancestors = [tape.group_max(a, degree) for a in state.ancestors]
    ancestors.append(pooled)
    return LayerState(pooled, ancestors)


def up_branch(tape: Tape, state: LayerState, degree: int, weight: Tensor,
              bias: Tensor) -> LayerState:
    """Expand each node (concatenated with its ancestors) into `degree` children.

    The affine output of width degree*F' is reshaped to degree rows of F';
    children inherit the parent's ancestor list plus the parent feature.
    """
    if state.ancestors:
        stacked = tape.concat_cols([state.nodes, *state.ancestors])
    else:
        stacked = state.nodes
    expanded = tape.add_bias(tape.matmul(stacked, weight), bias)
    n = state.nodes.data.shape[0]
    child_width = expanded.data.shape[1] // degree
    children = tape.reshape(expanded, (n * degree, child_width))
    ancestors = [tape.repeat_rows(a, degree) for a in state.ancestors]
    ancestors.append(tape.repeat_rows(state.nodes, degree))
    return LayerState(children, ancestors)


def graph_conv(tape: Tape, state: LayerState, loop1: Tensor, loop2: Tensor,
               ancestor_weights: list[Tensor], bias: Tensor, slope: float,
               activate: bool = True) -> LayerState:
    """Self term through a two-layer affine bottleneck plus per-depth ancestor
    terms and a bias, then leaky ReLU (skipped on the final decoder layer)."""
    if len(ancestor_weights) != len(state.ancestors):
        raise ShapeError(f"graph_conv: {len(ancestor_weights)} ancestor weights "
                         f"for {len(state.ancestors)} ancestor depths")
    pre = tape.matmul(tape.matmul(state.nodes, loop1), loop2)
    for ancestor, weight in zip(state.ancestors, ancestor_weights):
        pre = tape.add(pre, tape.matmul(ancestor, weight))
    pre = tape.add_bias(pre, bias)
    nodes = tape.leaky_relu(pre, slope) if activate else pre
    return LayerState(nodes, state.ancestors)


# --------------------------------------------------------------- parameters


def parameter_schema(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Names and shapes of every parameter, in deterministic build order."""
    schema: list[tuple[str, tuple[int, ...]]] = []
    k = config.loop_support
    e = config.encoder_widths
    for i in range(len(config.encoder_degrees)):
        fin, fout = e[i], e[i + 1]
        schema.append((f"enc{i}.down.w", (fin, fout)))
        schema.append((f"enc{i}.down.b", (fout,)))
        schema.append((f"enc{i}.conv.loop1", (fout, k)))
        schema.append((f"enc{i}.conv.loop2", (k, fout)))
        for d in range(i + 1):
            schema.append((f"enc{i}.conv.anc{d}", (e[d + 1], fout)))
        schema.append((f"enc{i}.conv.b", (fout,)))
    g = config.decoder_widths
    for j, degree in enumerate(config.decoder_degrees):
        gin, gout = g[j], g[j + 1]
        schema.append((f"dec{j}.up.w", (gin + sum(g[:j]), degree * gout)))
        schema.append((f"dec{j}.up.b", (degree * gout,)))
        schema.append((f"dec{j}.conv.loop1", (gout, k)))
        schema.append((f"dec{j}.conv.loop2", (k, gout)))
        for d in range(j + 1):
            schema.append((f"dec{j}.conv.anc{d}", (g[d], gout)))
        schema.append((f"dec{j}.conv.b", (gout,)))
    return schema


def init_parameters(config: ModelConfig, seed: int) -> dict[str, Tensor]:
    """Uniform(-s, s) with s = sqrt(6 / (fan_in + fan_out)); biases zero."""
    rng = substream(seed, "init")
    params: dict[str, Tensor] = {}
    for name, shape in parameter_schema(config):
        if len(shape) == 1:
            params[name] = Tensor(np.zeros(shape), requires_grad=True)
        else:
            bound = sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)
    return params


# ----------------------------------------------------------------- forwards


def encode_tensor(tape: Tape, params: dict[str, Tensor], config: ModelConfig,
                  points: Tensor) -> Tensor:
    """Run the encoder on an (N,3) tensor; returns the (1,psi) embedding node."""
    expected = (config.point_count, 3)
    if points.data.shape != expected:
        raise ShapeError(f"encoder expects shape {expected}, got {points.data.shape}")
    state = LayerState(points)
    for i, degree in enumerate(config.encoder_degrees):
        state = down_branch(tape, state, degree, params[f"enc{i}.down.w"],
                            params[f"enc{i}.down.b"])
        state = graph_conv(
            tape, state, params[f"enc{i}.conv.loop1"], params[f"enc{i}.conv.loop2"],
            [params[f"enc{i}.conv.anc{d}"] for d in range(len(state.ancestors))],
            params[f"enc{i}.conv.b"], config.activation_slope)
    return state.nodes


def decode_tensor(tape: Tape, params: dict[str, Tensor], config: ModelConfig,
                  embedding: Tensor) -> Tensor:
    """Run the decoder on a (1,psi) tensor; returns the (N,3) cloud tensor."""
    expected = (1, config.embedding_dim)
    if embedding.data.shape != expected:
        raise ShapeError(f"decoder expects shape {expected}, got {embedding.data.shape}")
    state = LayerState(embedding)
    last = len(config.decoder_degrees) - 1
    for j, degree in enumerate(config.decoder_degrees):
        state = up_branch(tape, state, degree, params[f"dec{j}.up.w"], params[f"dec{j}.up.b"])
        state = graph_conv(
            tape, state, params[f"dec{j}.conv.loop1"], params[f"dec{j}.conv.loop2"],
            [params[f"dec{j}.conv.anc{d}"] for d in range(len(state.ancestors))],
            params[f"dec{j}.conv.b"], config.activation_slope, activate=j < last)
    return state.nodes


class TreeAutoencoder:
    """Parameter container with numpy-facing encode/decode conveniences.

    Forward and backward passes over one tape are single-threaded; the
    parameter dict is replaced wholesale by the optimizer, never mutated, so
    snapshots can be shared freely.
    """

    def __init__(self, config: ModelConfig, seed: int = 0,
                 parameters: dict[str, Tensor] | None = None):
        self.config = config
        if parameters is None:
            parameters = init_parameters(config, seed)
        self._validate(parameters)
        self.parameters = parameters

    def _validate(self, parameters: dict[str, Tensor]) -> None:
        schema = parameter_schema(self.config)
        expected = {name: shape for name, shape in schema}
        if set(parameters) != set(expected):
            missing = sorted(set(expected) - set(parameters))
            extra = sorted(set(parameters) - set(expected))
            raise ContractError(f"parameter set mismatch: missing {missing}, extra {extra}")
        for name, shape in expected.items():
            if parameters[name].data.shape != shape:
                raise ShapeError(f"parameter {name}: expected shape {shape}, "
                                 f"got {parameters[name].data.shape}")

    def set_parameters(self, parameters: dict[str, Tensor]) -> None:
        self._validate(parameters)
        self.parameters = parameters

    def encode(self, points) -> np.ndarray:
        """Cloud (N,3) -> embedding vector (psi,)."""
        z = encode_tensor(Tape(), self.parameters, self.config,
                          Tensor(np.asarray(points, dtype=np.float64)))
        return z.data.reshape(self.config.embedding_dim).copy()

    def decode(self, embedding) -> np.ndarray:
        """Embedding vector (psi,) -> cloud (N,3)."""
        vec = np.asarray(embedding, dtype=np.float64)
        if vec.shape != (self.config.embedding_dim,):
            raise ShapeError(f"embedding must have shape ({self.config.embedding_dim},), "
                             f"got {vec.shape}")
        out = decode_tensor(Tape(), self.parameters, self.config,
                            Tensor(vec.reshape(1, -1)))
        return out.data.copy()

    def reconstruct(self, points) -> np.ndarray:
        return self.decode(self.encode(points))

    def snapshot(self) -> dict[str, np.ndarray]:
        """Parameter arrays by name; safe to keep, the buffers are frozen."""
        return {name: t.data for name, t in self.parameters.items()}

    def checkpoint(self, optimizer_state=None) -> "Checkpoint":
        return Checkpoint(config=self.config, parameters=self.snapshot(),
                          optimizer_state=optimizer_state)

    @classmethod
    def from_checkpoint(cls, ckpt: "Checkpoint") -> "TreeAutoencoder":
        params = {name: Tensor(arr, requires_grad=True)
                  for name, arr in ckpt.parameters.items()}
        return cls(ckpt.config, parameters=params)


# --------------------------------------------------------------- checkpoint


@dataclass
class Checkpoint:
    """Config + named parameters + optional optimizer moments and step."""

    config: ModelConfig
    parameters: dict[str, np.ndarray]
    optimizer_state: "object | None" = None  # trainer.OptimizerState
    format_version: int = CHECKPOINT_VERSION


def _check_schema(config: ModelConfig, parameters: dict[str, np.ndarray], origin: str) -> None:
    expected = dict(parameter_schema(config))
    if set(parameters) != set(expected):
        raise FormatError(f"{origin}: parameter names do not match the config schema")
    for name, shape in expected.items():
        if tuple(parameters[name].shape) != shape:
            raise FormatError(f"{origin}: parameter {name} has shape "
                              f"{tuple(parameters[name].shape)}, schema says {shape}")


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Canonical binary serialization; identical checkpoints give identical bytes.

    Layout: magic "TGED", u32 LE version, u32 LE header length, JSON header
    (config plus name/shape/offset manifests), then all float64 LE payloads.
    """
    _check_schema(ckpt.config, ckpt.parameters, "save_checkpoint")
    chunks: list[np.ndarray] = []
    offset = 0

    def register(arr: np.ndarray) -> tuple[list[int], int]:
        nonlocal offset
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        chunks.append(arr)
        start = offset
        offset += arr.size
        return list(arr.shape), start

    manifest = []
    for name in sorted(ckpt.parameters):
        shape, start = register(ckpt.parameters[name])
        manifest.append([name, shape, start])

    optimizer = None
    if ckpt.optimizer_state is not None:
        state = ckpt.optimizer_state
        moments = []
        for kind, table in (("m", state.m), ("v", state.v)):
            for name in sorted(table):
                shape, start = register(table[name])
                moments.append([f"{kind}:{name}", shape, start])
        optimizer = {"step": int(state.step), "moments": moments}

    header = {"config": ckpt.config.to_dict(), "parameters": manifest, "optimizer": optimizer}
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as handle:
        handle.write(CHECKPOINT_MAGIC)
        handle.write(struct.pack("<I", ckpt.format_version))
        handle.write(struct.pack("<I", len(header_bytes)))
        handle.write(header_bytes)
        for chunk in chunks:
            handle.write(chunk.astype("<f8").tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as handle:
        blob = handle.read()
    if len(blob) < 12 or blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", blob[4:8])
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}, "
                          f"expected {CHECKPOINT_VERSION}")
    (header_len,) = struct.unpack("<I", blob[8:12])
    if len(blob) < 12 + header_len:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(blob[12:12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: malformed header") from exc

    payload = np.frombuffer(blob[12 + header_len:], dtype="<f8")

    def extract(shape, start) -> np.ndarray:
        size = prod(shape) if shape else 1
        if start < 0 or start + size > payload.size:
            raise FormatError(f"{path}: truncated payload")
        return payload[start:start + size].reshape(shape).astype(np.float64)

    try:
        config = ModelConfig.from_dict(header["config"])
        parameters = {name: extract(shape, start)
                      for name, shape, start in header["parameters"]}
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"{path}: malformed header: {exc}") from exc

    _check_schema(config, parameters, str(path))

    optimizer_state = None
    if header.get("optimizer") is not None:
        from .trainer import OptimizerState  # late import, trainer depends on model

        m: dict[str, np.ndarray] = {}
        v: dict[str, np.ndarray] = {}
        for tag, shape, start in header["optimizer"]["moments"]:
            kind, _, name = tag.partition(":")
            {"m": m, "v": v}[kind][name] = extract(shape, start)
        optimizer_state = OptimizerState(m=m, v=v, step=int(header["optimizer"]["step"]))

    return Checkpoint(config=config, parameters=parameters,
                      optimizer_state=optimizer_state, format_version=version)
