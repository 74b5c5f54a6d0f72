"""Network zoo with ordered activation taps.

A network is a :class:`NetworkSpec` (plain data, serialisable) plus a
:class:`NetworkState` holding its parameters, normalisation buffers and the
ordered list of tap names. ``forward_with_taps`` returns the output together
with one activation per tap, in forward execution order.

Tap placement: the output of every weighted layer after its normalisation
(block output before the nonlinearity), transformer layer norms, and the head.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .tensor import Tensor, no_grad
from .tensor import ops as F
from .tensor.rng import RngState

FAMILIES = ("fcn", "plain_cnn", "res_cnn", "rnn_stack", "transformer_encoder",
            "transformer_decoder", "patch_vit")
SEQUENCE_FAMILIES = ("rnn_stack", "transformer_encoder", "transformer_decoder")
CNN_FAMILIES = ("plain_cnn", "res_cnn")
ATTENTION_FAMILIES = ("transformer_encoder", "transformer_decoder", "patch_vit")


class SpecError(ValueError):
    pass


TAP_MODES = ("all", "sublayers", "blocks")


@dataclass
class NetworkSpec:
    family: str
    depth: int
    width: int
    classes: int
    heads: int = 1
    residual: bool | None = None
    activation: str = "relu"
    vocab: int = 0
    context_len: int = 0
    patch_size: int = 0
    input_dim: int = 0
    in_channels: int = 0
    image_size: int = 0
    norm: bool = True
    readout: str = "sequence"
    ffn_mult: int = 4
    taps: str = "all"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        f = self.family
        if f not in FAMILIES:
            raise SpecError(f"unknown family {f!r}")
        if self.width < 1 or self.depth < 1 or self.classes < 1:
            raise SpecError("width, depth and classes must be >= 1")
        if self.activation not in ("relu", "tanh"):
            raise SpecError(f"activation must be relu or tanh, got {self.activation!r}")
        if self.taps not in TAP_MODES:
            raise SpecError(f"taps must be one of {TAP_MODES}")
        if f in CNN_FAMILIES:
            want = f == "res_cnn"
            if self.residual is None:
                self.residual = want
            elif self.residual != want:
                raise SpecError(f"{f} requires residual={want}")
        elif self.residual is not None:
            raise SpecError("residual is only meaningful for cnn families")
        if f in ATTENTION_FAMILIES and (self.heads < 1 or self.width % self.heads):
            raise SpecError(f"heads={self.heads} must divide width={self.width}")
        if f in SEQUENCE_FAMILIES:
            if self.context_len < 2:
                raise SpecError("sequence families need context_len >= 2")
            if self.vocab < 1:
                raise SpecError("sequence families need vocab >= 1")
            if self.readout not in ("sequence", "last", "mean"):
                raise SpecError(f"unknown readout {self.readout!r}")
        if f == "fcn" and self.input_dim < 1:
            raise SpecError("fcn needs input_dim")
        if f in CNN_FAMILIES + ("patch_vit",) and (self.in_channels < 1 or self.image_size < 1):
            raise SpecError(f"{f} needs in_channels and image_size")
        if f == "patch_vit" and (self.patch_size < 1 or self.image_size % self.patch_size):
            raise SpecError("patch_size must divide image_size")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise SpecError(f"unknown network spec keys: {sorted(extra)}")
        return cls(**d)


@dataclass
class ActivationRecord:
    names: list[str]
    values: list[Tensor]
    mask: np.ndarray | None = None
    batch_id: int = 0

    def __len__(self):
        return len(self.names)

    def __iter__(self):
        return iter(zip(self.names, self.values))


@dataclass
class NetworkState:
    spec: NetworkSpec
    params: dict[str, Tensor]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    tap_list: list[str] = field(default_factory=list)
    mode: str = "train"

    def parameters(self):
        return list(self.params.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {k: p.data for k, p in self.params.items()}
        out.update(self.buffers)
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            if k not in arrays or arrays[k].shape != p.data.shape:
                raise SpecError(f"checkpoint is missing or mis-shapes parameter {k!r}")
            p.data = arrays[k].astype(p.data.dtype).copy()
        for k, b in self.buffers.items():
            if k not in arrays:
                raise SpecError(f"checkpoint is missing buffer {k!r}")
            self.buffers[k] = arrays[k].astype(b.dtype).copy()

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.state_arrays().items()}


# ---------------------------------------------------------------- parameters

class _Init:
    def __init__(self, rng: RngState, dtype):
        self.rng, self.dtype = rng, dtype
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def linear(self, name, fan_out, fan_in, bias=True):
        b = np.sqrt(1.0 / fan_in)
        self.params[f"{name}.weight"] = self.rng.gen.uniform(-b, b, (fan_out, fan_in)).astype(self.dtype)
        if bias:
            self.params[f"{name}.bias"] = np.zeros(fan_out, self.dtype)

    def conv(self, name, out_c, in_c, k):
        fan_in = in_c * k * k
        b = np.sqrt(1.0 / fan_in)
        self.params[f"{name}.weight"] = self.rng.gen.uniform(-b, b, (out_c, in_c, k, k)).astype(self.dtype)
        self.params[f"{name}.bias"] = np.zeros(out_c, self.dtype)

    def table(self, name, n, d):
        # one-hot input: fan_in is 1
        self.params[name] = self.rng.gen.uniform(-1.0, 1.0, (n, d)).astype(self.dtype)

    def norm(self, name, d, running=False):
        self.params[f"{name}.weight"] = np.ones(d, self.dtype)
        self.params[f"{name}.bias"] = np.zeros(d, self.dtype)
        if running:
            self.buffers[f"{name}.running_mean"] = np.zeros(d, self.dtype)
            self.buffers[f"{name}.running_var"] = np.ones(d, self.dtype)


def _transformer_params(ini: _Init, spec: NetworkSpec, prefix=""):
    d = spec.width
    for i in range(spec.depth):
        p = f"{prefix}layers.{i}"
        for nm in ("q", "k", "v", "o"):
            ini.linear(f"{p}.attn.{nm}", d, d)
        ini.norm(f"{p}.ln1", d)
        ini.linear(f"{p}.ffn.fc1", spec.ffn_mult * d, d)
        ini.linear(f"{p}.ffn.fc2", d, spec.ffn_mult * d)
        ini.norm(f"{p}.ln2", d)


def init_params(spec: NetworkSpec, rng: RngState, dtype=np.float32):
    """Fan-in uniform weights (bound sqrt(1/fan_in)), zero biases, unit norm scales."""
    ini = _Init(rng, dtype)
    f, w = spec.family, spec.width
    if f == "fcn":
        fan = spec.input_dim
        for i in range(spec.depth):
            ini.linear(f"blocks.{i}.linear", w, fan)
            if spec.norm:
                ini.norm(f"blocks.{i}.bn", w, running=True)
            fan = w
        ini.linear("head", spec.classes, fan)
    elif f in CNN_FAMILIES:
        ini.conv("stem.conv", w, spec.in_channels, 3)
        ini.norm("stem.bn", w, running=True)
        for i in range(spec.depth):
            ini.conv(f"blocks.{i}.conv", w, w, 3)
            ini.norm(f"blocks.{i}.bn", w, running=True)
        ini.linear("head", spec.classes, w)
    elif f == "rnn_stack":
        ini.table("embed.weight", spec.vocab, w)
        for i in range(spec.depth):
            ini.linear(f"rnn.{i}.ih", w, w)
            ini.linear(f"rnn.{i}.hh", w, w)
        ini.linear("head", spec.classes, w)
    elif f in ("transformer_encoder", "transformer_decoder"):
        ini.table("embed.weight", spec.vocab, w)
        ini.table("pos.weight", spec.context_len, w)
        _transformer_params(ini, spec)
        ini.linear("head", spec.classes, w)
    elif f == "patch_vit":
        n_patch = (spec.image_size // spec.patch_size) ** 2
        ini.linear("patch", w, spec.in_channels * spec.patch_size ** 2)
        ini.table("pos.weight", n_patch, w)
        _transformer_params(ini, spec)
        ini.linear("head", spec.classes, w)
    return ini.params, ini.buffers


# transformer taps per layer: "attnN"/"ffnN" are the sublayer outputs before the
# residual add, "attnN.ln"/"ffnN.ln" the layer norms that follow them
_TRANSFORMER_TAPS = {
    "all": ["attn{}", "attn{}.ln", "ffn{}", "ffn{}.ln"],
    "sublayers": ["attn{}", "ffn{}"],
    "blocks": ["ffn{}.ln"],
}


def tap_names(spec: NetworkSpec) -> list[str]:
    f = spec.family
    if f == "fcn":
        return [f"block{i}" for i in range(spec.depth)] + ["head"]
    if f in CNN_FAMILIES:
        return ["stem"] + [f"block{i}" for i in range(spec.depth)] + ["head"]
    if f == "rnn_stack":
        return ["embed"] + [f"rnn{i}" for i in range(spec.depth)] + ["head"]
    per = _TRANSFORMER_TAPS[spec.taps]
    return ["embed"] + [t.format(i) for i in range(spec.depth) for t in per] + ["head"]


def build_network(spec: NetworkSpec, rng: RngState, dtype=np.float32) -> NetworkState:
    spec.validate()
    params, buffers = init_params(spec, rng, dtype)
    return NetworkState(spec=spec,
                        params={k: Tensor(v, requires_grad=True, name=k) for k, v in params.items()},
                        buffers=buffers, tap_list=tap_names(spec))


def count_params(net) -> int:
    params = net.params if isinstance(net, NetworkState) else net
    return int(sum(int(np.prod(p.shape)) for p in params.values()))


# ---------------------------------------------------------------- forward

def _act(spec, x):
    return F.relu(x) if spec.activation == "relu" else F.tanh(x)


def _lin(P, name, x):
    return F.linear(x, P[f"{name}.weight"], P.get(f"{name}.bias"))


def _bn_mode(mode):
    return {"train": "train", "eval": "eval", "frozen": "batch"}[mode]


def _bn(net, name, x):
    P, B = net.params, net.buffers
    return F.batch_norm(x, P[f"{name}.weight"], P[f"{name}.bias"], B.get(f"{name}.running_mean"),
                        B.get(f"{name}.running_var"), mode=_bn_mode(net.mode))


def _attention(P, p, x, spec, mask_add):
    B, T, D = x.shape
    h = spec.heads
    dh = D // h

    def split(t):
        return F.transpose(F.reshape(t, (B, T, h, dh)), (0, 2, 1, 3))
    q, k, v = (split(_lin(P, f"{p}.attn.{nm}", x)) for nm in "qkv")
    scores = F.scale(F.matmul(q, F.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    if mask_add is not None:
        scores = scores + mask_add
    att = F.softmax(scores, axis=-1)
    out = F.reshape(F.transpose(F.matmul(att, v), (0, 2, 1, 3)), (B, T, D))
    return _lin(P, f"{p}.attn.o", out)


def _transformer_blocks(net, x, mask_add, taps):
    P, spec = net.params, net.spec
    keep = set(_TRANSFORMER_TAPS[spec.taps])
    for i in range(spec.depth):
        p = f"layers.{i}"
        a = _attention(P, p, x, spec, mask_add)
        x = F.layer_norm(x + a, P[f"{p}.ln1.weight"], P[f"{p}.ln1.bias"])
        f = _lin(P, f"{p}.ffn.fc2", _act(spec, _lin(P, f"{p}.ffn.fc1", x)))
        x2 = F.layer_norm(x + f, P[f"{p}.ln2.weight"], P[f"{p}.ln2.bias"])
        for name, t in (("attn{}", a), ("attn{}.ln", x), ("ffn{}", f), ("ffn{}.ln", x2)):
            if name in keep:
                taps.append((name.format(i), t))
        x = x2
    return x


def _readout(spec, h, mask):
    if spec.readout == "sequence":
        return h
    B, T = h.shape[0], h.shape[1]
    if mask is None:
        mask = np.ones((B, T), dtype=bool)
    if spec.readout == "last":
        last = mask.sum(axis=1).astype(np.int64) - 1
        return F.getitem(h, (np.arange(B), last))
    w = (mask / mask.sum(axis=1, keepdims=True)).astype(h.dtype)[:, :, None]
    return F.sum(h * w, axis=1)


def forward_with_taps(net: NetworkState, x, mask=None):
    """Run ``net`` on ``x``. Returns (output Tensor, ActivationRecord).

    Images are (B, C, H, W) floats (fcn flattens them); sequences are (B, T)
    integer token ids with an optional boolean validity ``mask``.
    """
    spec, P = net.spec, net.params
    f = spec.family
    taps: list[tuple[str, Tensor]] = []
    if f == "fcn":
        xd = np.asarray(x.data if isinstance(x, Tensor) else x)
        h = Tensor(xd.reshape(xd.shape[0], -1).astype(_dtype(net), copy=False))
        if h.shape[1] != spec.input_dim:
            raise SpecError(f"fcn expects {spec.input_dim} input features, got {h.shape[1]}")
        for i in range(spec.depth):
            z = _lin(P, f"blocks.{i}.linear", h)
            if spec.norm:
                z = _bn(net, f"blocks.{i}.bn", z)
            taps.append((f"block{i}", z))
            h = _act(spec, z)
        out = _lin(P, "head", h)
    elif f in CNN_FAMILIES:
        h = _image_input(net, x)
        z = _bn(net, "stem.bn", F.conv2d(h, P["stem.conv.weight"], P["stem.conv.bias"], padding=1))
        taps.append(("stem", z))
        h = _act(spec, z)
        pool_every = max(1, spec.depth // 3)
        for i in range(spec.depth):
            z = _bn(net, f"blocks.{i}.bn", F.conv2d(h, P[f"blocks.{i}.conv.weight"],
                                                    P[f"blocks.{i}.conv.bias"], padding=1))
            if spec.residual:
                z = z + h
            taps.append((f"block{i}", z))
            h = _act(spec, z)
            if (i + 1) % pool_every == 0 and i < spec.depth - 1 and h.shape[2] >= 8:
                h = F.avg_pool2d(h, 2)
        out = _lin(P, "head", F.mean(h, axis=(2, 3)))
    elif f == "patch_vit":
        xd = np.asarray(x.data if isinstance(x, Tensor) else x).astype(_dtype(net), copy=False)
        B, C, H, W = xd.shape
        if C != spec.in_channels or H != spec.image_size or W != spec.image_size:
            raise SpecError(f"patch_vit expects ({spec.in_channels},{spec.image_size},{spec.image_size}) images")
        p = spec.patch_size
        patches = xd.reshape(B, C, H // p, p, W // p, p).transpose(0, 2, 4, 1, 3, 5).reshape(B, -1, C * p * p)
        h = _lin(P, "patch", Tensor(np.ascontiguousarray(patches))) + P["pos.weight"]
        taps.append(("embed", h))
        h = _transformer_blocks(net, h, None, taps)
        out = _lin(P, "head", F.mean(h, axis=1))
    else:
        tokens = np.asarray(x, dtype=np.int64)
        if tokens.ndim != 2:
            raise SpecError(f"sequence input must be (B, T) token ids, got shape {tokens.shape}")
        B, T = tokens.shape
        if T > spec.context_len:
            raise SpecError(f"sequence length {T} exceeds context_len {spec.context_len}")
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            if mask.shape != tokens.shape:
                raise SpecError(f"mask shape {mask.shape} != token shape {tokens.shape}")
        h = F.embedding(P["embed.weight"], tokens)
        if f == "rnn_stack":
            taps.append(("embed", h))
            for i in range(spec.depth):
                pre = _lin(P, f"rnn.{i}.ih", h) + P[f"rnn.{i}.hh.bias"]
                h = F.elman_scan(pre, P[f"rnn.{i}.hh.weight"])
                taps.append((f"rnn{i}", h))
        else:
            h = h + F.getitem(P["pos.weight"], slice(0, T))
            taps.append(("embed", h))
            h = _transformer_blocks(net, h, _attention_mask(f, mask, B, T, h.dtype), taps)
        out = _lin(P, "head", _readout(spec, h, mask))
    taps.append(("head", out))
    names = [n for n, _ in taps]
    if names != net.tap_list:
        raise AssertionError(f"tap order {names} != declared {net.tap_list}")
    return out, ActivationRecord(names, [t for _, t in taps], mask=mask)


def forward(net: NetworkState, x, mask=None) -> Tensor:
    return forward_with_taps(net, x, mask)[0]


def _dtype(net):
    return next(iter(net.params.values())).dtype


def _image_input(net, x):
    xd = np.asarray(x.data if isinstance(x, Tensor) else x).astype(_dtype(net), copy=False)
    s = net.spec
    if xd.ndim != 4 or xd.shape[1] != s.in_channels:
        raise SpecError(f"{s.family} expects (B, {s.in_channels}, H, W) images, got {xd.shape}")
    return Tensor(xd)


_NEG = -1e9


def _attention_mask(family, mask, B, T, dtype):
    add = np.zeros((B, 1, T, T), dtype=dtype)
    if family == "transformer_decoder":
        add += np.triu(np.full((T, T), _NEG, dtype=dtype), k=1)
    elif mask is not None:
        add += np.where(mask, 0, _NEG).astype(dtype)[:, None, None, :]
    return add


def predict(net: NetworkState, x, mask=None) -> np.ndarray:
    with no_grad():
        return forward(net, x, mask).data
