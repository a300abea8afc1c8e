"""Feed-forward network with per-sample conditional-normalization layers.

The parameter vector decomposes into shared weights (every ``W``/``b``,
updated by the outer training loop) and per-sample affine parameters
``(gamma, beta)`` that scale and shift each hidden unit's activation. With
``gamma = 1`` and ``beta = 0`` the affine layers are the identity, so a
CN-equipped network reproduces the plain MLP exactly; that identity state is
also the starting point of every per-query adaptation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractViolation

ACTIVATIONS = ("softplus", "tanh")

# Models up to this many parameters are checkpointed as plain JSON; larger
# ones get a JSON header plus a raw little-endian float64 payload.
_JSON_CHECKPOINT_MAX_PARAMS = 2048


@dataclass
class ModelConfig:
    """Architecture description.

    widths lists every layer size input..output (so ``len(widths) - 2``
    hidden layers). ``cn_mask`` selects which hidden layers carry the
    per-sample affine transform (default: all of them). ``residual`` adds
    the input to the output, which makes the network predict state deltas.
    """

    widths: list[int]
    activation: str = "softplus"
    softplus_alpha: float = 1.0
    residual: bool = False
    cn_mask: list[bool] | None = None

    def __post_init__(self):
        if len(self.widths) < 3:
            raise ContractViolation("ModelConfig: need at least one hidden layer")
        if any(w < 1 for w in self.widths):
            raise ContractViolation("ModelConfig: widths must be positive")
        if self.activation not in ACTIVATIONS:
            raise ContractViolation(f"ModelConfig: unknown activation '{self.activation}'")
        if self.residual and self.widths[0] != self.widths[-1]:
            raise ContractViolation("ModelConfig: residual output requires matching in/out widths")
        if self.cn_mask is None:
            self.cn_mask = [True] * self.n_hidden
        if len(self.cn_mask) != self.n_hidden:
            raise ContractViolation("ModelConfig: cn_mask must have one entry per hidden layer")

    @property
    def n_hidden(self) -> int:
        return len(self.widths) - 2

    @property
    def hidden_widths(self) -> list[int]:
        return self.widths[1:-1]

    @property
    def cn_dim(self) -> int:
        """Total width of the per-sample affine vector (sum of masked layers)."""
        return sum(w for w, m in zip(self.hidden_widths, self.cn_mask) if m)

    def cn_offsets(self) -> list[tuple[int, int] | None]:
        """Column range of each hidden layer inside the packed CN vector."""
        spans: list[tuple[int, int] | None] = []
        off = 0
        for w, m in zip(self.hidden_widths, self.cn_mask):
            if m:
                spans.append((off, off + w))
                off += w
            else:
                spans.append(None)
        return spans

    def param_count(self) -> int:
        return sum(
            self.widths[l] * self.widths[l - 1] + self.widths[l]
            for l in range(1, len(self.widths))
        )

    def to_dict(self) -> dict:
        return {
            "widths": list(self.widths),
            "activation": self.activation,
            "softplus_alpha": self.softplus_alpha,
            "residual": self.residual,
            "cn_mask": list(self.cn_mask),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            widths=list(d["widths"]),
            activation=d["activation"],
            softplus_alpha=d.get("softplus_alpha", 1.0),
            residual=d.get("residual", False),
            cn_mask=list(d["cn_mask"]) if d.get("cn_mask") is not None else None,
        )


class MlpParams:
    """Shared weights: per layer a (m_l, m_{l-1}) matrix and an (m_l,) bias.

    Held as autodiff leaves so outer-loop gradients can be taken directly.
    """

    def __init__(self, weights: list[Tensor], biases: list[Tensor]):
        self.weights = weights
        self.biases = biases

    @property
    def tensors(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def copy(self) -> "MlpParams":
        return MlpParams(
            [Tensor(w.data.copy(), requires_grad=True) for w in self.weights],
            [Tensor(b.data.copy(), requires_grad=True) for b in self.biases],
        )

    def check_shapes(self, config: ModelConfig) -> None:
        if len(self.weights) != len(config.widths) - 1:
            raise ContractViolation("MlpParams: layer count does not match config")
        for l, (w, b) in enumerate(zip(self.weights, self.biases), start=1):
            expect = (config.widths[l], config.widths[l - 1])
            if w.shape != expect or b.shape != (config.widths[l],):
                raise ContractViolation(
                    f"MlpParams: layer {l} has shapes {w.shape}/{b.shape}, expected {expect}"
                )


@dataclass
class CnParams:
    """Per-sample affine parameters, one row per batch element.

    gamma/beta have shape (rows, config.cn_dim). The identity state is all
    ones / all zeros.
    """

    gamma: Tensor
    beta: Tensor

    @property
    def rows(self) -> int:
        return self.gamma.shape[0]

    def detach(self, requires_grad: bool = True) -> "CnParams":
        return CnParams(self.gamma.detach(requires_grad), self.beta.detach(requires_grad))


def init_params(config: ModelConfig, seed: int) -> MlpParams:
    """Zero-mean Gaussian weights scaled by 1/sqrt(fan-in); zero biases."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for l in range(1, len(config.widths)):
        fan_in = config.widths[l - 1]
        w = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(config.widths[l], fan_in))
        weights.append(Tensor(w, requires_grad=True))
        biases.append(Tensor(np.zeros(config.widths[l]), requires_grad=True))
    return MlpParams(weights, biases)


def identity_cn(batch: int, config: ModelConfig, requires_grad: bool = True) -> CnParams:
    """Identity affine state: gamma all ones, beta all zeros."""
    if batch < 1:
        raise ContractViolation("identity_cn: batch must be >= 1")
    d = config.cn_dim
    return CnParams(
        Tensor(np.ones((batch, d)), requires_grad=requires_grad),
        Tensor(np.zeros((batch, d)), requires_grad=requires_grad),
    )


def _activate(config: ModelConfig, pre: Tensor) -> Tensor:
    if config.activation == "softplus":
        return ad.softplus(pre, config.softplus_alpha)
    return ad.tanh(pre)


def forward_cn(
    config: ModelConfig,
    params: MlpParams,
    cn: CnParams,
    x: Tensor,
    return_hidden: bool = False,
):
    """Forward pass with per-row conditional normalization.

    Row i of the output is the network applied to row i of ``x`` under row i
    of (gamma, beta). Differentiable w.r.t. weights, CN parameters and the
    input. With ``return_hidden`` the post-CN activations of every hidden
    layer are returned alongside the output (the last entry is the
    penultimate feature vector).
    """
    if x.data.ndim != 2 or x.shape[1] != config.widths[0]:
        raise ContractViolation(f"forward_cn: input shape {x.shape} does not match config")
    if cn.gamma.shape != (x.shape[0], config.cn_dim) or cn.beta.shape != cn.gamma.shape:
        raise ContractViolation(
            f"forward_cn: CN shape {cn.gamma.shape} does not match batch "
            f"{x.shape[0]} x {config.cn_dim}"
        )
    batch = x.shape[0]
    spans = config.cn_offsets()
    h = x
    hidden: list[Tensor] = []
    for l in range(config.n_hidden):
        pre = ad.add(
            ad.matmul(h, ad.transpose(params.weights[l])),
            ad.broadcast_row(params.biases[l], batch),
        )
        z = _activate(config, pre)
        if spans[l] is not None:
            start, stop = spans[l]
            g = ad.slice_cols(cn.gamma, start, stop)
            b = ad.slice_cols(cn.beta, start, stop)
            h = ad.add(ad.mul(g, z), b)
        else:
            h = z
        hidden.append(h)
    out = ad.add(
        ad.matmul(h, ad.transpose(params.weights[-1])),
        ad.broadcast_row(params.biases[-1], batch),
    )
    if config.residual:
        out = ad.add(out, x)
    if return_hidden:
        return out, hidden
    return out


def forward_plain(config: ModelConfig, params: MlpParams, x: Tensor) -> Tensor:
    """CN-free forward (identity affine layers)."""
    return forward_cn(config, params, identity_cn(x.shape[0], config, requires_grad=False), x)


# -- checkpoint I/O -----------------------------------------------------------

_MAGIC = b"MTCKPT1\n"


def save_checkpoint(path: str | Path, config: ModelConfig, params: MlpParams) -> None:
    """Write a self-describing checkpoint.

    Small models are stored as plain JSON; larger ones as a JSON header line
    followed by a raw little-endian float64 payload. Layer order is explicit
    in the header, and a load/forward round-trip reproduces outputs bitwise.
    """
    params.check_shapes(config)
    path = Path(path)
    entries = []
    for l, (w, b) in enumerate(zip(params.weights, params.biases), start=1):
        entries.append((f"W{l}", w.data))
        entries.append((f"b{l}", b.data))

    if config.param_count() <= _JSON_CHECKPOINT_MAX_PARAMS:
        doc = {
            "format": "json",
            "config": config.to_dict(),
            "layers": [{"name": n, "shape": list(a.shape), "data": a.ravel().tolist()} for n, a in entries],
        }
        path.write_text(json.dumps(doc))
        return

    header = {
        "format": "binary",
        "config": config.to_dict(),
        "dtype": "<f8",
        "layers": [],
    }
    offset = 0
    for name, arr in entries:
        header["layers"].append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
    blob = b"".join(np.ascontiguousarray(arr, dtype="<f8").tobytes() for _, arr in entries)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(json.dumps(header).encode("utf-8"))
        fh.write(b"\n")
        fh.write(blob)


def load_checkpoint(path: str | Path) -> tuple[ModelConfig, MlpParams]:
    path = Path(path)
    raw = path.read_bytes()
    if raw.startswith(_MAGIC):
        rest = raw[len(_MAGIC) :]
        nl = rest.index(b"\n")
        header = json.loads(rest[:nl].decode("utf-8"))
        payload = np.frombuffer(rest[nl + 1 :], dtype="<f8")
        config = ModelConfig.from_dict(header["config"])
        arrays = {}
        for entry in header["layers"]:
            size = int(np.prod(entry["shape"]))
            block = payload[entry["offset"] : entry["offset"] + size]
            arrays[entry["name"]] = np.asarray(block, dtype=np.float64).reshape(entry["shape"])
    else:
        doc = json.loads(raw.decode("utf-8"))
        if doc.get("format") != "json":
            raise ContractViolation(f"unrecognized checkpoint format in {path}")
        config = ModelConfig.from_dict(doc["config"])
        arrays = {
            e["name"]: np.asarray(e["data"], dtype=np.float64).reshape(e["shape"])
            for e in doc["layers"]
        }
    weights, biases = [], []
    for l in range(1, len(config.widths)):
        weights.append(Tensor(arrays[f"W{l}"], requires_grad=True))
        biases.append(Tensor(arrays[f"b{l}"], requires_grad=True))
    params = MlpParams(weights, biases)
    params.check_shapes(config)
    return config, params
