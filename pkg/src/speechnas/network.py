"""D-TDNN blocks, the weight-sharing supernet and standalone candidates.

The supernet stores every weight at the largest shape any architecture in
its space can need.  A concrete architecture reads leading slices of those
arrays, so a candidate's parameters are exactly the slices it reads.  The
same forward code runs both the supernet and an instantiated candidate: for
the candidate the slices simply cover the whole array.

Block layout (normalise -> nonlinearity -> transform throughout)::

    x ─ BN ─ ReLU ─ bottleneck ─ BN ─ ReLU ─┬─ TDNN_1 (dil 1) ─┐
                                             ├─ TDNN_2 (dil 3) ─┼─ sum ─ stats ─ f ─ f'_i ─ softmax over i
                                             └─ TDNN_3 (dil 5) ─┘
    out = [x, sum_i u_i * TDNN_i]

Two width conventions are supported.  With ``growth=None`` the choice ``c``
is the number of channels a block appends and the bottleneck is
``bottleneck_mult * c`` wide.  With a fixed ``growth`` every block appends
``growth`` channels and ``c`` is the bottleneck width; that layout can also
carry transition layers that halve the channel count.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import tensorcore as tc
from .archspace import ArchCode, SearchSpace, check, parse, serialize

DILATIONS = (1, 3, 5)
STATS_EPS = 1e-8


@dataclass(frozen=True)
class NetConfig:
    input_dim: int = 30
    stem_channels: int = 128
    stem_kernel: int = 5
    kernel_size: int = 3
    embedding_dim: int = 128
    num_speakers: int = 2
    bottleneck_mult: float = 2.0
    growth: Optional[int] = None
    transitions: Tuple[int, ...] = ()
    compression: float = 0.5
    head_moments: int = 2  # 2 = mean and std, 4 = up to kurtosis

    def __post_init__(self):
        object.__setattr__(self, "transitions", tuple(int(t) for t in self.transitions))
        if self.transitions and self.growth is None:
            raise ValueError("transition layers need a fixed growth rate")
        if self.kernel_size % 2 == 0 or self.stem_kernel % 2 == 0:
            raise ValueError("kernel sizes must be odd")
        if self.num_speakers < 2:
            raise ValueError("num_speakers must be >= 2")
        if self.head_moments not in (2, 4):
            raise ValueError("head_moments must be 2 or 4")


# Channel layout for full-scale parameter budgets: c is the
# bottleneck width, growth 64, channel-halving transitions after layers 6 and 18.
FULL_SCALE_NET = NetConfig(input_dim=30, stem_channels=128, embedding_dim=128, growth=64, transitions=(6, 18))


@dataclass(frozen=True)
class LayerDims:
    din: int
    bottleneck: int
    growth: int
    branches: int
    sdim: int
    transition_out: Optional[int] = None  # channels after the transit layer that follows, if any


def layer_dims(slots, config: NetConfig) -> List[LayerDims]:
    """Per-layer widths for a list of ``(b, c, d)`` slots."""
    dims = []
    din = config.stem_channels
    for l, (b, c, d) in enumerate(slots):
        if config.growth is None:
            g, bw = c, int(round(config.bottleneck_mult * c))
        else:
            g, bw = config.growth, c
        dout = din + g
        t_out = int(dout * config.compression) if (l + 1) in config.transitions else None
        dims.append(LayerDims(din, bw, g, b, d, t_out))
        din = dout if t_out is None else t_out
    return dims


def output_channels(slots, config: NetConfig) -> int:
    last = layer_dims(slots, config)[-1]
    return last.transition_out if last.transition_out is not None else last.din + last.growth


# ---------------------------------------------------------------- functional ops


def stats_pool(h: tc.Tensor, eps: float = STATS_EPS, moments: int = 4) -> tc.Tensor:
    """Mean, std, skewness and kurtosis over frames: ``(..., T, C) -> (..., 4C)``.

    ``moments=2`` stops after the standard deviation.
    """
    if h.shape[-2] < 2:
        raise ValueError(f"statistics pooling needs at least 2 frames, got {h.shape[-2]}")
    mu = tc.mean(h, axis=-2, keepdims=True)
    xc = h - mu
    var = tc.mean(xc * xc, axis=-2, keepdims=True)
    sigma = tc.sqrt(tc.clamp_min(var, eps * eps))
    if moments == 2:
        pooled = tc.concat([mu, sigma], axis=-1)
        return tc.reshape(pooled, pooled.shape[:-2] + (pooled.shape[-1],))
    zn = xc / sigma
    z2 = zn * zn
    skew = tc.mean(z2 * zn, axis=-2, keepdims=True)
    kurt = tc.mean(z2 * z2, axis=-2, keepdims=True)
    pooled = tc.concat([mu, sigma, skew, kurt], axis=-1)
    return tc.reshape(pooled, pooled.shape[:-2] + (pooled.shape[-1],))


def stats_pool_array(h: np.ndarray, eps: float = STATS_EPS) -> np.ndarray:
    g = tc.Graph(h.dtype if h.dtype in (np.float32, np.float64) else np.float64)
    return stats_pool(g.const(h), eps).data


class _Params:
    """Fetches named arrays into a graph, reading leading slices."""

    def __init__(self, graph: tc.Graph, params: Dict[str, np.ndarray], bn_momentum: float = tc.BN_MOMENTUM):
        self.graph = graph
        self.params = params
        self.bn_momentum = bn_momentum

    def __call__(self, name: str, *sizes: int) -> tc.Tensor:
        arr = self.params[name]
        index = tuple(slice(0, n) for n in sizes)
        if all(n == s for n, s in zip(sizes, arr.shape)) and len(sizes) == arr.ndim:
            index = None
        return self.graph.param(name, arr, index)


def _bn(P: _Params, buffers, prefix: str, x: tc.Tensor, n: int, mode: str) -> tc.Tensor:
    return tc.batch_norm(x, P(f"{prefix}.gamma", n), P(f"{prefix}.beta", n),
                         buffers[f"{prefix}.mean"][:n], buffers[f"{prefix}.var"][:n], mode, P.bn_momentum)


def dtdnn_block(P: _Params, buffers, l: int, h: tc.Tensor, dims: LayerDims, config: NetConfig,
                mode: str, trace: Optional[dict] = None) -> tc.Tensor:
    """One densely connected multi-branch block; returns ``[h, selected]``."""
    if h.shape[-1] != dims.din:
        raise ValueError(f"block {l}: input has {h.shape[-1]} channels, expected {dims.din}")
    pre = f"b{l}"
    if f"{pre}.branch{dims.branches - 1}.w" not in P.params:
        raise ValueError(f"block {l}: {dims.branches} branches requested but fewer are allocated")
    K = config.kernel_size
    g, bw, d = dims.growth, dims.bottleneck, dims.sdim
    x = tc.relu(_bn(P, buffers, f"{pre}.bn_in", h, dims.din, mode))
    x = tc.affine(x, P(f"{pre}.bottleneck.W", dims.din, bw))
    x = tc.relu(_bn(P, buffers, f"{pre}.bn_mid", x, bw, mode))
    branches = [tc.conv1d(x, P(f"{pre}.branch{i}.w", K, bw, g), None, DILATIONS[i]) for i in range(dims.branches)]
    summed = branches[0]
    for br in branches[1:]:
        summed = summed + br
    pooled = stats_pool(summed)
    Wsel = tc.reshape(P(f"{pre}.select.W", 4, g, d), (4 * g, d))
    z = tc.relu(tc.affine(pooled, Wsel, P(f"{pre}.select.b", d)))
    gate_logits = [tc.affine(z, P(f"{pre}.gate{i}.W", d, g), P(f"{pre}.gate{i}.b", g))
                   for i in range(dims.branches)]
    u = tc.softmax(tc.stack(gate_logits, axis=-2), axis=-2)  # (B, b, g)
    mixed = None
    for i, br in enumerate(branches):
        ui = tc.reshape(u[..., i, :], u.shape[:-2] + (1, g))
        term = ui * br
        mixed = term if mixed is None else mixed + term
    if trace is not None:
        trace[l] = {"u": u.data, "branches": [b.data for b in branches]}
    return tc.concat([h, mixed], axis=-1)


def _transition(P: _Params, buffers, l: int, h: tc.Tensor, dims: LayerDims, mode: str) -> tc.Tensor:
    n = h.shape[-1]
    x = tc.relu(_bn(P, buffers, f"t{l}.bn", h, n, mode))
    return tc.affine(x, P(f"t{l}.W", n, dims.transition_out))


def build(params: Dict[str, np.ndarray], buffers: Dict[str, np.ndarray], config: NetConfig, slots,
          graph: tc.Graph, x, mode: str = "train", trace: Optional[dict] = None,
          bn_momentum: float = tc.BN_MOMENTUM):
    """Record a forward pass for ``slots`` on ``graph``; returns ``(embedding, logits)`` tensors."""
    P = _Params(graph, params, bn_momentum)
    x = x if isinstance(x, tc.Tensor) else graph.const(x)
    if x.ndim == 2:
        x = tc.reshape(x, (1,) + x.shape)
    if x.shape[-1] != config.input_dim:
        raise ValueError(f"input has {x.shape[-1]} features, expected {config.input_dim}")
    if x.shape[-2] < 2:
        raise ValueError("at least 2 frames are required")
    g0 = config.stem_channels
    h = tc.conv1d(x, P("stem.w", config.stem_kernel, config.input_dim, g0))
    h = tc.relu(_bn(P, buffers, "stem.bn", h, g0, mode))
    for l, dims in enumerate(layer_dims(slots, config)):
        h = dtdnn_block(P, buffers, l, h, dims, config, mode, trace)
        if dims.transition_out is not None:
            h = _transition(P, buffers, l, h, dims, mode)
    D = h.shape[-1]
    h = _bn(P, buffers, "head.bn", h, D, mode)
    M = config.head_moments
    pooled = stats_pool(h, moments=M)
    Wemb = tc.reshape(P("head.emb.W", M, D, config.embedding_dim), (M * D, config.embedding_dim))
    emb = tc.affine(pooled, Wemb, P("head.emb.b", config.embedding_dim))
    logits = tc.affine(emb, P("cls.W", config.embedding_dim, config.num_speakers),
                       P("cls.b", config.num_speakers))
    return emb, logits


# ---------------------------------------------------------------- parameter allocation


def _shapes(slots_max, config: NetConfig, max_branches: int) -> Tuple[Dict[str, tuple], Dict[str, int]]:
    """Trainable parameter shapes and BN buffer sizes for widths ``slots_max``."""
    K, F, g0, E = config.kernel_size, config.input_dim, config.stem_channels, config.embedding_dim
    shapes: Dict[str, tuple] = {"stem.w": (config.stem_kernel, F, g0), "stem.bn.gamma": (g0,), "stem.bn.beta": (g0,)}
    bn: Dict[str, int] = {"stem.bn": g0}
    dims_all = layer_dims(slots_max, config)
    for l, dims in enumerate(dims_all):
        pre = f"b{l}"
        g, bw, d = dims.growth, dims.bottleneck, dims.sdim
        shapes[f"{pre}.bn_in.gamma"] = shapes[f"{pre}.bn_in.beta"] = (dims.din,)
        bn[f"{pre}.bn_in"] = dims.din
        shapes[f"{pre}.bottleneck.W"] = (dims.din, bw)
        shapes[f"{pre}.bn_mid.gamma"] = shapes[f"{pre}.bn_mid.beta"] = (bw,)
        bn[f"{pre}.bn_mid"] = bw
        nb = max_branches if max_branches else dims.branches
        for i in range(nb):
            shapes[f"{pre}.branch{i}.w"] = (K, bw, g)
        shapes[f"{pre}.select.W"] = (4, g, d)
        shapes[f"{pre}.select.b"] = (d,)
        for i in range(nb):
            shapes[f"{pre}.gate{i}.W"] = (d, g)
            shapes[f"{pre}.gate{i}.b"] = (g,)
        if dims.transition_out is not None:
            n = dims.din + g
            shapes[f"t{l}.bn.gamma"] = shapes[f"t{l}.bn.beta"] = (n,)
            bn[f"t{l}.bn"] = n
            shapes[f"t{l}.W"] = (n, dims.transition_out)
    D = output_channels(slots_max, config)
    shapes["head.bn.gamma"] = shapes["head.bn.beta"] = (D,)
    bn["head.bn"] = D
    shapes["head.emb.W"] = (config.head_moments, D, E)
    shapes["head.emb.b"] = (E,)
    shapes["cls.W"] = (E, config.num_speakers)
    shapes["cls.b"] = (config.num_speakers,)
    return shapes, bn


def _init_params(shapes: Dict[str, tuple], rng: np.random.Generator) -> Dict[str, np.ndarray]:
    params = {}
    for name, shape in shapes.items():
        if name.endswith(".gamma"):
            arr = np.ones(shape)
        elif name.endswith(".beta") or name.endswith(".b"):
            arr = np.zeros(shape)
        elif name.endswith(".w"):  # conv (K, Cin, Cout)
            arr = rng.normal(0.0, np.sqrt(2.0 / (shape[0] * shape[1])), shape)
        elif name.endswith("select.W") or name == "head.emb.W":  # (moments, C, out)
            arr = rng.normal(0.0, np.sqrt(1.0 / (shape[0] * shape[1])), shape)
        elif ".gate" in name:
            arr = rng.normal(0.0, 0.1 / np.sqrt(shape[0]), shape)
        else:
            arr = rng.normal(0.0, np.sqrt(2.0 / shape[0]), shape)
        params[name] = arr.astype(np.float32)
    return params


def _init_buffers(bn: Dict[str, int]) -> Dict[str, np.ndarray]:
    buffers = {}
    for prefix, n in bn.items():
        buffers[f"{prefix}.mean"] = np.zeros(n, dtype=np.float32)
        buffers[f"{prefix}.var"] = np.ones(n, dtype=np.float32)
    return buffers


def count_params(arch: ArchCode, config: NetConfig, include_classifier: bool = False) -> int:
    """Trainable scalars of the candidate for ``arch``.

    Counts convolution, affine and BN scale/shift parameters; BN running
    statistics are buffers and are not counted.  The speaker classifier is
    excluded unless ``include_classifier``.
    """
    shapes, _ = _shapes(arch.slots, config, max_branches=0)
    return int(sum(np.prod(s) for name, s in shapes.items()
                   if include_classifier or not name.startswith("cls.")))


# ---------------------------------------------------------------- networks


class _Net:
    params: Dict[str, np.ndarray]
    buffers: Dict[str, np.ndarray]
    config: NetConfig

    def _slots(self, arch: Optional[ArchCode]):
        raise NotImplementedError

    def build(self, graph: tc.Graph, x, arch: Optional[ArchCode] = None, mode: str = "train",
              buffers: Optional[Dict[str, np.ndarray]] = None, trace: Optional[dict] = None,
              bn_momentum: float = tc.BN_MOMENTUM):
        return build(self.params, self.buffers if buffers is None else buffers, self.config,
                     self._slots(arch), graph, x, mode, trace, bn_momentum)

    def num_params(self, include_classifier: bool = False) -> int:
        return int(sum(v.size for k, v in self.params.items() if include_classifier or not k.startswith("cls.")))

    def snapshot(self) -> Dict[str, np.ndarray]:
        """Immutable copy of parameters and buffers (for handing to workers)."""
        out = {}
        for k, v in {**self.params, **{f"buffer:{k}": v for k, v in self.buffers.items()}}.items():
            c = v.copy()
            c.setflags(write=False)
            out[k] = c
        return out


class Supernet(_Net):
    """Max-shaped shared weights for every architecture of ``space``."""

    def __init__(self, space: SearchSpace, config: NetConfig, seed: int = 0, *, _empty: bool = False):
        self.space = space
        self.config = config
        b_max, _, _ = space.max_slot
        slots_max = [space.max_slot] * space.num_layers
        shapes, bn = _shapes(slots_max, config, max_branches=b_max)
        self.params = {} if _empty else _init_params(shapes, np.random.default_rng(seed))
        self.buffers = {} if _empty else _init_buffers(bn)

    def _slots(self, arch):
        if arch is None:
            raise ValueError("a supernet forward needs an architecture")
        check(arch, self.space)
        return arch.slots

    def instantiate(self, arch: ArchCode) -> "CandidateNet":
        """Copy the leading slices ``arch`` reads into a standalone network."""
        check(arch, self.space)
        shapes, bn = _shapes(arch.slots, self.config, max_branches=0)
        params = {name: self.params[name][tuple(slice(0, n) for n in shape)].copy()
                  for name, shape in shapes.items()}
        buffers = {}
        for prefix, n in bn.items():
            for stat in ("mean", "var"):
                buffers[f"{prefix}.{stat}"] = self.buffers[f"{prefix}.{stat}"][:n].copy()
        return CandidateNet(arch, self.config, params, buffers)


class CandidateNet(_Net):
    """A single architecture with exactly-sized weights."""

    def __init__(self, arch: ArchCode, config: NetConfig, params=None, buffers=None, seed: int = 0):
        self.arch = arch
        self.config = config
        if params is None:
            shapes, bn = _shapes(arch.slots, config, max_branches=0)
            params = _init_params(shapes, np.random.default_rng(seed))
            buffers = _init_buffers(bn)
        self.params = params
        self.buffers = buffers

    def _slots(self, arch):
        if arch is not None and arch != self.arch:
            raise ValueError("a candidate network only runs its own architecture")
        return self.arch.slots


def forward(net: _Net, arch: Optional[ArchCode], batch: np.ndarray, mode: str = "eval",
            buffers: Optional[Dict[str, np.ndarray]] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Numpy-in, numpy-out forward pass; returns ``(embeddings, logits)``."""
    graph = tc.Graph(net.params["stem.w"].dtype)
    emb, logits = net.build(graph, batch, arch, mode, buffers)
    return emb.data, logits.data


def instantiate(net: Supernet, arch: ArchCode) -> CandidateNet:
    return net.instantiate(arch)


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"SNCK"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, net: _Net, extra: Optional[dict] = None) -> None:
    """Write ``SNCK`` | u32 version | u32 manifest length | JSON manifest | float32 LE data."""
    tensors = [(k, v) for k, v in net.params.items()] + [(f"buffer:{k}", v) for k, v in net.buffers.items()]
    manifest = {
        "kind": "supernet" if isinstance(net, Supernet) else "candidate",
        "config": asdict(net.config),
        "tensors": [[name, list(arr.shape)] for name, arr in tensors],
        "extra": extra or {},
    }
    if isinstance(net, Supernet):
        s = net.space
        manifest["space"] = {"num_layers": s.num_layers, "branch_options": list(s.branch_options),
                             "cdim_options": list(s.cdim_options), "sdim_options": list(s.sdim_options),
                             "name": s.name}
    else:
        manifest["arch"] = serialize(net.arch)
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(blob)))
        fh.write(blob)
        for _, arr in tensors:
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(net, extra)``."""
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r} at offset 0")
    if len(raw) < 12:
        raise CheckpointError(f"{path}: truncated header")
    version, mlen = struct.unpack("<II", raw[4:12])
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    manifest = json.loads(raw[12:12 + mlen].decode("utf-8"))
    cfg = manifest["config"]
    cfg["transitions"] = tuple(cfg["transitions"])
    config = NetConfig(**cfg)
    offset = 12 + mlen
    arrays = {}
    for name, shape in manifest["tensors"]:
        n = int(np.prod(shape))
        end = offset + 4 * n
        if end > len(raw):
            raise CheckpointError(f"{path}: truncated while reading {name} at offset {offset}")
        arrays[name] = np.frombuffer(raw[offset:end], dtype="<f4").reshape(shape).astype(np.float32)
        offset = end
    params = {k: v for k, v in arrays.items() if not k.startswith("buffer:")}
    buffers = {k[len("buffer:"):]: v for k, v in arrays.items() if k.startswith("buffer:")}
    if manifest["kind"] == "supernet":
        sp = manifest["space"]
        space = SearchSpace(sp["num_layers"], tuple(sp["branch_options"]), tuple(sp["cdim_options"]),
                            tuple(sp["sdim_options"]), name=sp["name"])
        net = Supernet(space, config, _empty=True)
        net.params, net.buffers = params, buffers
    else:
        net = CandidateNet(parse(manifest["arch"]), config, params, buffers)
    return net, manifest.get("extra", {})
