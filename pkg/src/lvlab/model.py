"""Unified predator-prey network: embedding, shared adaptive layers, two outputs.

The same topology serves the temporal problem (input ``t``) and the
spatiotemporal one (input ``(x, y, t)``); only the embedding matrix's column
count changes.  Checkpoints are plain numpy values; training wraps them in
tape variables via :func:`to_tape`.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Jet2, StructuralError


class ConfigError(ValueError):
    """Invalid configuration value, raised before any compute."""


class CheckpointError(ValueError):
    """Checkpoint file could not be parsed."""


@dataclass(frozen=True)
class ActivationParams:
    """Coefficients of ``a_tanh*tanh(b_scale*x) + c_sin*sin(d_freq*x) + e_lin*x``.

    The defaults reduce the activation to plain ``tanh``.
    """

    a_tanh: float = 1.0
    b_scale: float = 1.0
    c_sin: float = 0.0
    d_freq: float = 1.0
    e_lin: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.a_tanh, self.b_scale, self.c_sin, self.d_freq, self.e_lin])

    @classmethod
    def from_array(cls, arr) -> "ActivationParams":
        return cls(*(float(x) for x in arr))


@dataclass(frozen=True)
class NetworkSpec:
    """Layer layout.

    ``input_lo``/``input_hi`` give a fixed affine rescaling of each input
    coordinate to ``[-1, 1]`` applied before the embedding; ``None`` leaves
    inputs untouched.
    """

    input_dim: int = 1
    embed_dim: int = 128
    hidden_layers: tuple = (64, 64, 64)
    output_dim: int = 2
    seed: int = 0
    input_lo: tuple | None = None
    input_hi: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "hidden_layers", tuple(int(h) for h in self.hidden_layers))
        for name in ("input_lo", "input_hi"):
            val = getattr(self, name)
            if val is not None:
                object.__setattr__(self, name, tuple(float(x) for x in val))

    def validate(self):
        if self.input_dim not in (1, 3):
            raise ConfigError(f"input_dim must be 1 or 3, got {self.input_dim}")
        if self.output_dim != 2:
            raise ConfigError("output_dim is always 2 (prey, predator)")
        if self.embed_dim <= 0 or not self.hidden_layers or min(self.hidden_layers) <= 0:
            raise ConfigError("layer widths must be positive and at least one hidden layer given")
        if (self.input_lo is None) != (self.input_hi is None):
            raise ConfigError("input_lo and input_hi must be given together")
        if self.input_lo is not None:
            if len(self.input_lo) != self.input_dim or len(self.input_hi) != self.input_dim:
                raise ConfigError("input bounds must match input_dim")
            if any(h <= l for l, h in zip(self.input_lo, self.input_hi)):
                raise ConfigError("input_hi must exceed input_lo")

    def input_scaling(self):
        """Return ``(shift, scale)`` so that the network sees ``(x - shift) * scale``."""
        if self.input_lo is None:
            return np.zeros(self.input_dim), np.ones(self.input_dim)
        lo, hi = np.array(self.input_lo), np.array(self.input_hi)
        return (lo + hi) / 2.0, 2.0 / (hi - lo)


@dataclass
class Layer:
    w: np.ndarray
    b: np.ndarray
    act: ActivationParams | None = None


@dataclass
class NetworkCheckpoint:
    spec: NetworkSpec
    layers: list  # [embed, hidden..., out]
    meta: dict = field(default_factory=dict)

    @property
    def embed(self) -> Layer:
        return self.layers[0]

    @property
    def hidden(self) -> list:
        return self.layers[1:-1]

    @property
    def out(self) -> Layer:
        return self.layers[-1]

    def params(self) -> dict:
        """Flat ``{name: array}`` view of every trainable value (copies)."""
        flat = {}
        for name, layer in zip(_layer_names(len(self.hidden)), self.layers):
            flat[f"{name}.w"] = layer.w.copy()
            flat[f"{name}.b"] = layer.b.copy()
            if layer.act is not None:
                flat[f"{name}.act"] = layer.act.as_array()
        return flat

    def with_params(self, flat: dict, meta: dict | None = None) -> "NetworkCheckpoint":
        layers = []
        for name, layer in zip(_layer_names(len(self.hidden)), self.layers):
            act = None
            if layer.act is not None:
                act = ActivationParams.from_array(flat[f"{name}.act"])
            layers.append(Layer(np.array(flat[f"{name}.w"]), np.array(flat[f"{name}.b"]), act))
        return NetworkCheckpoint(self.spec, layers, dict(self.meta if meta is None else meta))

    def __eq__(self, other):
        if not isinstance(other, NetworkCheckpoint):
            return NotImplemented
        if self.spec != other.spec or self.meta != other.meta:
            return False
        if len(self.layers) != len(other.layers):
            return False
        return all(
            np.array_equal(a.w, b.w) and np.array_equal(a.b, b.b) and a.act == b.act
            for a, b in zip(self.layers, other.layers)
        )


def _layer_names(n_hidden: int) -> list:
    return ["embed"] + [f"hidden.{i}" for i in range(n_hidden)] + ["out"]


def init(spec: NetworkSpec) -> NetworkCheckpoint:
    """Glorot-uniform weights, zero biases, tanh-equivalent activations.

    Deterministic for a fixed ``spec.seed``.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    widths = [spec.input_dim, spec.embed_dim, *spec.hidden_layers, spec.output_dim]
    layers = []
    n_layers = len(widths) - 1
    for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(fan_out, fan_in))
        act = ActivationParams() if 0 < i < n_layers - 1 else None
        layers.append(Layer(w, np.zeros(fan_out), act))
    return NetworkCheckpoint(spec, layers, {})


def adaptive_activation(x, p: ActivationParams):
    """``a tanh(b x) + c sin(d x) + e x``; works on floats, arrays, jets and tape vars."""
    return (
        p.a_tanh * ad.tanh(p.b_scale * x)
        + p.c_sin * ad.sin(p.d_freq * x)
        + p.e_lin * x
    )


def predict(ckpt: NetworkCheckpoint, X) -> np.ndarray:
    """Plain numpy forward pass for a batch ``X`` of shape ``(N, input_dim)``.

    The embedding is folded into the first shared layer, which is the same
    affine map computed in one matrix product.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[1] != ckpt.spec.input_dim:
        raise StructuralError(f"expected {ckpt.spec.input_dim} input columns, got {X.shape[1]}")
    shift, scale = ckpt.spec.input_scaling()
    first = ckpt.hidden[0]
    w = first.w @ ckpt.embed.w
    b = first.w @ ckpt.embed.b + first.b
    h = ((X - shift) * scale) @ w.T + b
    for i, layer in enumerate(ckpt.hidden):
        if i > 0:
            h = h @ layer.w.T + layer.b
        a, bs, c, d, e = layer.act.as_array()
        h = a * np.tanh(bs * h) + c * np.sin(d * h) + e * h
    return h @ ckpt.out.w.T + ckpt.out.b


def forward(ckpt: NetworkCheckpoint, point) -> tuple[float, float]:
    """Network output ``(u_hat, v_hat)`` at a single point, layer by layer."""
    x = np.asarray(point, dtype=np.float64).reshape(-1)
    if x.size != ckpt.spec.input_dim:
        raise StructuralError(f"point has {x.size} coordinates, network expects {ckpt.spec.input_dim}")
    shift, scale = ckpt.spec.input_scaling()
    h = ckpt.embed.w @ ((x - shift) * scale) + ckpt.embed.b
    for layer in ckpt.hidden:
        h = adaptive_activation(layer.w @ h + layer.b, layer.act)
    y = ckpt.out.w @ h + ckpt.out.b
    return float(y[0]), float(y[1])


def network_jet(ckpt: NetworkCheckpoint, inputs) -> tuple[Jet2, Jet2]:
    """Evaluate the network on a list of scalar :class:`Jet2` inputs.

    Independent of the packed kernels; used for derivative cross-checks and
    for :func:`autodiff.fd_check` on a trained network.
    """
    if len(inputs) != ckpt.spec.input_dim:
        raise StructuralError("input length does not match the network")
    shift, scale = ckpt.spec.input_scaling()
    xs = [(Jet2.lift(j) - shift[i]) * scale[i] for i, j in enumerate(inputs)]
    val = np.array([x.value for x in xs], dtype=float)
    d1 = np.array([x.d1 for x in xs], dtype=float)
    d2 = np.array([x.d2 for x in xs], dtype=float)
    h = Jet2(ckpt.embed.w @ val + ckpt.embed.b, ckpt.embed.w @ d1, ckpt.embed.w @ d2)
    for layer in ckpt.hidden:
        z = Jet2(layer.w @ h.value + layer.b, layer.w @ h.d1, layer.w @ h.d2)
        h = adaptive_activation(z, layer.act)
    W, b = ckpt.out.w, ckpt.out.b
    y0, y1, y2 = W @ h.value + b, W @ h.d1, W @ h.d2
    return Jet2(y0[0], y1[0], y2[0]), Jet2(y0[1], y1[1], y2[1])


# ----------------------------------------------------------------- tape forward


def to_tape(tape: ad.Tape, flat: dict) -> dict:
    """Register every parameter array as a named leaf on ``tape``."""
    return {name: tape.param(value, name) for name, value in flat.items()}


def packed_forward(spec: NetworkSpec, params: dict, X, dirs, fused: bool = True):
    """Packed-jet forward pass.

    Returns an array (or tape var when ``params`` holds vars) of shape
    ``(1 + 2m, N, 2)``: values, first derivatives along each input axis in
    ``dirs`` and second derivatives along the same axes.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[1] != spec.input_dim:
        raise StructuralError(f"expected {spec.input_dim} input columns, got {X.shape[1]}")
    m = len(dirs)
    shift, scale = spec.input_scaling()
    Z = np.zeros((1 + 2 * m, X.shape[0], spec.input_dim))
    Z[0] = (X - shift) * scale
    for j, axis in enumerate(dirs):
        Z[1 + j, :, axis] = scale[axis]
    act = ad.adaptive_act_jet_fused if fused else ad.adaptive_act_jet
    n_hidden = len(spec.hidden_layers)
    ew, eb = params["embed.w"], params["embed.b"]
    w0, b0 = params["hidden.0.w"], params["hidden.0.b"]
    h = ad.affine_jet(Z, w0 @ ew, w0 @ eb + b0)
    h = act(h, params["hidden.0.act"], m)
    for i in range(1, n_hidden):
        h = ad.affine_jet(h, params[f"hidden.{i}.w"], params[f"hidden.{i}.b"])
        h = act(h, params[f"hidden.{i}.act"], m)
    return ad.affine_jet(h, params["out.w"], params["out.b"])


class NetworkField:
    """Adapter giving losses a uniform ``model(X, dirs) -> packed`` interface."""

    def __init__(self, spec: NetworkSpec, params: dict, fused: bool = True):
        self.spec = spec
        self.params = params
        self.fused = fused

    def __call__(self, X, dirs=()):
        return packed_forward(self.spec, self.params, X, dirs, fused=self.fused)


# ------------------------------------------------------------------ checkpoint IO


def _fmt(x) -> str:
    if isinstance(x, bool) or x is None:
        return json.dumps(x)
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        if not np.isfinite(x):
            raise ValueError("checkpoint values must be finite")
        return format(float(x), ".17g")
    if isinstance(x, str):
        return json.dumps(x)
    if isinstance(x, np.ndarray):
        return _fmt(x.tolist())
    if isinstance(x, (list, tuple)):
        return "[" + ",".join(_fmt(v) for v in x) + "]"
    if isinstance(x, dict):
        return "{" + ",".join(f"{json.dumps(str(k))}:{_fmt(v)}" for k, v in x.items()) + "}"
    raise TypeError(f"cannot serialise {type(x).__name__}")


def dumps(ckpt: NetworkCheckpoint) -> str:
    spec = asdict(ckpt.spec)
    spec["hidden_layers"] = list(spec["hidden_layers"])
    layers = []
    for layer in ckpt.layers:
        entry = {"w": layer.w, "b": layer.b}
        if layer.act is not None:
            p = layer.act
            entry["act"] = {"a": p.a_tanh, "b": p.b_scale, "c": p.c_sin, "d": p.d_freq, "e": p.e_lin}
        layers.append(entry)
    return _fmt({"spec": spec, "layers": layers, "meta": ckpt.meta}) + "\n"


def loads(text: str) -> NetworkCheckpoint:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[: exc.pos].encode("utf-8"))
        raise CheckpointError(f"checkpoint parse error at byte {offset}: {exc.msg}") from exc
    try:
        s = raw["spec"]
        spec = NetworkSpec(
            input_dim=int(s["input_dim"]),
            embed_dim=int(s["embed_dim"]),
            hidden_layers=tuple(s["hidden_layers"]),
            output_dim=int(s["output_dim"]),
            seed=int(s["seed"]),
            input_lo=s.get("input_lo"),
            input_hi=s.get("input_hi"),
        )
        layers = []
        for entry in raw["layers"]:
            act = None
            if "act" in entry:
                a = entry["act"]
                act = ActivationParams(a["a"], a["b"], a["c"], a["d"], a["e"])
            w = np.array(entry["w"], dtype=np.float64).reshape(len(entry["w"]), -1)
            layers.append(Layer(w, np.array(entry["b"], dtype=np.float64), act))
        ckpt = NetworkCheckpoint(spec, layers, raw.get("meta", {}))
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"checkpoint structure invalid: {exc}") from exc
    _check_shapes(ckpt)
    return ckpt


def _check_shapes(ckpt: NetworkCheckpoint):
    spec = ckpt.spec
    widths = [spec.input_dim, spec.embed_dim, *spec.hidden_layers, spec.output_dim]
    if len(ckpt.layers) != len(widths) - 1:
        raise CheckpointError("layer count does not match spec")
    for layer, fan_in, fan_out in zip(ckpt.layers, widths[:-1], widths[1:]):
        if layer.w.shape != (fan_out, fan_in) or layer.b.shape != (fan_out,):
            raise CheckpointError(f"layer shape {layer.w.shape} does not match spec ({fan_out}, {fan_in})")


def save(ckpt: NetworkCheckpoint, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps(ckpt))


def load(path) -> NetworkCheckpoint:
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read())


def checkpoint_roundtrip(ckpt: NetworkCheckpoint) -> NetworkCheckpoint:
    return loads(dumps(ckpt))
