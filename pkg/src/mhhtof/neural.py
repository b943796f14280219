"""Minimal dense/recurrent neural kernel with exact analytic gradients.

Everything is plain numpy float64. Parameters live in flat name->array dicts;
forward passes record caches that the matching backward passes consume, so
gradient correctness can be checked against finite differences to machine
precision. The actor/critic trunk is Linear -> ResBlock x2 -> Linear+ReLU ->
recurrent cell -> Linear head.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import CorruptCheckpoint, InvalidInput, ShapeError

CKPT_SCHEMA = "mhhtof-ckpt/1"
CKPT_MAGIC = b"MHHTOF-CKPT\n"
CELL_KINDS = ("lstm", "gru", "rnn", "none")


@dataclass(frozen=True)
class ResBlockParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    W_s: np.ndarray | None = None


@dataclass(frozen=True)
class RecurrentCellParams:
    kind: str
    W_x: np.ndarray
    W_h: np.ndarray
    b: np.ndarray

    @property
    def hidden(self) -> int:
        return self.W_h.shape[1]


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int = 15
    trunk_width: int = 32
    pre_recurrent: int = 100
    hidden: int = 8
    out_dim: int = 7
    cell: str = "lstm"

    def __post_init__(self):
        if self.cell not in CELL_KINDS:
            raise InvalidInput(f"unknown cell kind {self.cell!r}")
        for name in ("input_dim", "trunk_width", "pre_recurrent", "hidden",
                     "out_dim"):
            if getattr(self, name) <= 0:
                raise InvalidInput(f"{name} must be positive")

    def to_dict(self) -> dict:
        return {"input_dim": self.input_dim, "trunk_width": self.trunk_width,
                "pre_recurrent": self.pre_recurrent, "hidden": self.hidden,
                "out_dim": self.out_dim, "cell": self.cell}


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# ---------------------------------------------------------------------------
# layer primitives


def resblock_forward(x: np.ndarray, p: ResBlockParams) -> np.ndarray:
    return _resblock_forward(x, p)[0]


def _resblock_forward(x, p: ResBlockParams):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != p.W1.shape[1]:
        raise ShapeError(f"input dim {x.shape[-1]} != W1 cols {p.W1.shape[1]}")
    if (p.W_s is None) != (p.W1.shape[1] == p.W2.shape[0]):
        raise ShapeError("shortcut projection presence inconsistent with dims")
    z = x @ p.W1.T + p.b1
    r = np.maximum(z, 0.0)
    f = r @ p.W2.T + p.b2
    s = x if p.W_s is None else x @ p.W_s.T
    return f + s, (x, z, r)


def _resblock_backward(dy, p: ResBlockParams, cache):
    x, z, r = cache
    dW2 = dy.T @ r if dy.ndim == 2 else np.outer(dy, r)
    db2 = dy.sum(axis=0) if dy.ndim == 2 else dy
    dr = dy @ p.W2
    dz = dr * (z > 0)
    dW1 = dz.T @ x if dz.ndim == 2 else np.outer(dz, x)
    db1 = dz.sum(axis=0) if dz.ndim == 2 else dz
    dx = dz @ p.W1 + (dy if p.W_s is None else dy @ p.W_s)
    grads = {"W1": dW1, "b1": db1, "W2": dW2, "b2": db2}
    if p.W_s is not None:
        grads["W_s"] = dy.T @ x if dy.ndim == 2 else np.outer(dy, x)
    return dx, grads


def recurrent_step(x, h, c, p: RecurrentCellParams):
    (h2, c2), _ = _cell_forward(x, h, c, p)
    return h2, c2


def _cell_forward(x, h, c, p: RecurrentCellParams):
    x = np.asarray(x, dtype=float)
    h = np.asarray(h, dtype=float)
    H = p.hidden
    if x.shape[-1] != p.W_x.shape[1] or h.shape[-1] != H:
        raise ShapeError("cell input/hidden dims inconsistent with parameters")
    if p.kind == "lstm":
        gates = x @ p.W_x.T + h @ p.W_h.T + p.b
        i = _sigmoid(gates[..., 0:H])
        f = _sigmoid(gates[..., H:2 * H])
        g = np.tanh(gates[..., 2 * H:3 * H])
        o = _sigmoid(gates[..., 3 * H:4 * H])
        c2 = f * c + i * g
        tc = np.tanh(c2)
        h2 = o * tc
        return (h2, c2), (x, h, c, i, f, g, o, c2, tc)
    if p.kind == "gru":
        zr = x @ p.W_x[: 2 * H].T + h @ p.W_h[: 2 * H].T + p.b[: 2 * H]
        z = _sigmoid(zr[..., 0:H])
        r = _sigmoid(zr[..., H:2 * H])
        n_pre = x @ p.W_x[2 * H:].T + (r * h) @ p.W_h[2 * H:].T + p.b[2 * H:]
        n = np.tanh(n_pre)
        h2 = (1.0 - z) * n + z * h
        return (h2, c), (x, h, z, r, n)
    if p.kind == "rnn":
        pre = x @ p.W_x.T + h @ p.W_h.T + p.b
        h2 = np.tanh(pre)
        return (h2, c), (x, h, h2)
    # "none": feedforward bottleneck, no state
    pre = x @ p.W_x.T + p.b
    h2 = np.tanh(pre)
    return (h2, c), (x, h, h2)


def _cell_backward(dh2, dc2, p: RecurrentCellParams, cache):
    H = p.hidden
    if p.kind == "lstm":
        x, h, c, i, f, g, o, c2, tc = cache
        do = dh2 * tc
        dc_total = dc2 + dh2 * o * (1.0 - tc**2)
        di = dc_total * g
        df = dc_total * c
        dg = dc_total * i
        dc_prev = dc_total * f
        dgates = np.concatenate([
            di * i * (1.0 - i), df * f * (1.0 - f),
            dg * (1.0 - g**2), do * o * (1.0 - o)], axis=-1)
        dW_x = np.outer(dgates, x)
        dW_h = np.outer(dgates, h)
        dh_prev = dgates @ p.W_h
        dx = dgates @ p.W_x
        return dx, dh_prev, dc_prev, {"W_x": dW_x, "W_h": dW_h, "b": dgates}
    if p.kind == "gru":
        x, h, z, r, n = cache
        dz = dh2 * (h - n)
        dn = dh2 * (1.0 - z)
        dn_pre = dn * (1.0 - n**2)
        drh = dn_pre @ p.W_h[2 * H:]
        dr = drh * h
        dz_pre = dz * z * (1.0 - z)
        dr_pre = dr * r * (1.0 - r)
        dzr = np.concatenate([dz_pre, dr_pre], axis=-1)
        dW_x = np.vstack([np.outer(dzr, x), np.outer(dn_pre, x)])
        dW_h = np.vstack([np.outer(dzr, h), np.outer(dn_pre, r * h)])
        db = np.concatenate([dzr, dn_pre])
        dh_prev = (dh2 * z + dzr @ p.W_h[: 2 * H] + drh * r)
        dx = dzr @ p.W_x[: 2 * H] + dn_pre @ p.W_x[2 * H:]
        return dx, dh_prev, dc2, {"W_x": dW_x, "W_h": dW_h, "b": db}
    if p.kind == "rnn":
        x, h, h2 = cache
        dpre = dh2 * (1.0 - h2**2)
        return (dpre @ p.W_x, dpre @ p.W_h, dc2,
                {"W_x": np.outer(dpre, x), "W_h": np.outer(dpre, h),
                 "b": dpre})
    x, h, h2 = cache
    dpre = dh2 * (1.0 - h2**2)
    return (dpre @ p.W_x, np.zeros_like(h), dc2,
            {"W_x": np.outer(dpre, x), "W_h": np.zeros_like(p.W_h), "b": dpre})


# ---------------------------------------------------------------------------
# the actor/critic assembly


def _gate_rows(kind: str) -> int:
    return {"lstm": 4, "gru": 3, "rnn": 1, "none": 1}[kind]


class SequenceNet:
    """Trunk + recurrent cell + linear head over observation sequences.

    Parameter names: in.W/in.b, res1.*, res2.*, pre.W/pre.b, cell.W_x/W_h/b,
    head.W/head.b, plus log_std for policy heads.
    """

    def __init__(self, spec: NetworkSpec, with_log_std: bool = False):
        self.spec = spec
        self.with_log_std = with_log_std

    def param_shapes(self) -> dict:
        s = self.spec
        rows = _gate_rows(s.cell) * s.hidden
        shapes = {
            "in.W": (s.trunk_width, s.input_dim),
            "in.b": (s.trunk_width,),
            "res1.W1": (s.trunk_width, s.trunk_width),
            "res1.b1": (s.trunk_width,),
            "res1.W2": (s.trunk_width, s.trunk_width),
            "res1.b2": (s.trunk_width,),
            "res2.W1": (s.trunk_width, s.trunk_width),
            "res2.b1": (s.trunk_width,),
            "res2.W2": (s.trunk_width, s.trunk_width),
            "res2.b2": (s.trunk_width,),
            "pre.W": (s.pre_recurrent, s.trunk_width),
            "pre.b": (s.pre_recurrent,),
            "cell.W_x": (rows, s.pre_recurrent),
            "cell.W_h": (rows, s.hidden),
            "cell.b": (rows,),
            "head.W": (s.out_dim, s.hidden),
            "head.b": (s.out_dim,),
        }
        if self.with_log_std:
            shapes["log_std"] = (s.out_dim,)
        return shapes

    def init_params(self, seed: int) -> dict:
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in self.param_shapes().items():
            if name == "log_std":
                params[name] = np.full(shape, -0.5)
            elif name.endswith(".b") or name.endswith(("b1", "b2")):
                params[name] = np.zeros(shape)
            else:
                fan_in = shape[1] if len(shape) == 2 else shape[0]
                bound = 1.0 / np.sqrt(fan_in)
                params[name] = rng.uniform(-bound, bound, shape)
        if self.spec.cell == "lstm":
            H = self.spec.hidden
            params["cell.b"][H:2 * H] = 1.0  # forget-gate bias
        return params

    def zero_carry(self) -> tuple:
        H = self.spec.hidden
        return np.zeros(H), np.zeros(H)

    def _res(self, params, tag) -> ResBlockParams:
        return ResBlockParams(params[f"{tag}.W1"], params[f"{tag}.b1"],
                              params[f"{tag}.W2"], params[f"{tag}.b2"])

    def _cell(self, params) -> RecurrentCellParams:
        return RecurrentCellParams(self.spec.cell, params["cell.W_x"],
                                   params["cell.W_h"], params["cell.b"])

    def forward(self, params: dict, obs_seq: np.ndarray, carry=None):
        """Returns (outputs (T, out_dim), carry', cache)."""
        obs_seq = np.atleast_2d(np.asarray(obs_seq, dtype=float))
        if obs_seq.shape[1] != self.spec.input_dim:
            raise ShapeError(f"observation dim {obs_seq.shape[1]} != "
                             f"{self.spec.input_dim}")
        h, c = carry if carry is not None else self.zero_carry()
        res1 = self._res(params, "res1")
        res2 = self._res(params, "res2")
        cell = self._cell(params)
        outs = np.empty((len(obs_seq), self.spec.out_dim))
        steps = []
        for t, x in enumerate(obs_seq):
            t1 = params["in.W"] @ x + params["in.b"]
            r1, cache1 = _resblock_forward(t1, res1)
            r2, cache2 = _resblock_forward(r1, res2)
            pre_z = params["pre.W"] @ r2 + params["pre.b"]
            t2 = np.maximum(pre_z, 0.0)
            (h, c), cell_cache = _cell_forward(t2, h, c, cell)
            outs[t] = params["head.W"] @ h + params["head.b"]
            steps.append((x, cache1, cache2, r2, pre_z, cell_cache, h.copy()))
        return outs, (h, c), steps

    def backward(self, params: dict, cache, d_outs: np.ndarray) -> dict:
        """Exact BPTT gradients for d(loss)/d(outputs); returns name->grad."""
        d_outs = np.atleast_2d(np.asarray(d_outs, dtype=float))
        if len(d_outs) != len(cache):
            raise ShapeError("gradient sequence length mismatch")
        grads = {name: np.zeros(shape)
                 for name, shape in self.param_shapes().items()}
        res1 = self._res(params, "res1")
        res2 = self._res(params, "res2")
        cell = self._cell(params)
        dh = np.zeros(self.spec.hidden)
        dc = np.zeros(self.spec.hidden)
        for t in range(len(cache) - 1, -1, -1):
            x, cache1, cache2, r2, pre_z, cell_cache, h_t = cache[t]
            dy = d_outs[t]
            grads["head.W"] += np.outer(dy, h_t)
            grads["head.b"] += dy
            dh = dh + dy @ params["head.W"]
            dt2, dh, dc, cg = _cell_backward(dh, dc, cell, cell_cache)
            for k, v in cg.items():
                grads[f"cell.{k}"] += v
            dpre = dt2 * (pre_z > 0)
            grads["pre.W"] += np.outer(dpre, r2)
            grads["pre.b"] += dpre
            dr2 = dpre @ params["pre.W"]
            dr1, g2 = _resblock_backward(dr2, res2, cache2)
            for k, v in g2.items():
                grads[f"res2.{k}"] += v
            dt1, g1 = _resblock_backward(dr1, res1, cache1)
            for k, v in g1.items():
                grads[f"res1.{k}"] += v
            grads["in.W"] += np.outer(dt1, x)
            grads["in.b"] += dt1
        return grads


# ---------------------------------------------------------------------------
# functional facade


def init_params(spec: NetworkSpec, seed: int, with_log_std: bool = False) -> dict:
    return SequenceNet(spec, with_log_std).init_params(seed)


def policy_forward(obs_seq, params: dict, spec: NetworkSpec, carry=None):
    """(action means (T, out), log_std (out,), carry')."""
    net = SequenceNet(spec, with_log_std=True)
    outs, carry2, _ = net.forward(params, obs_seq, carry)
    return outs, params["log_std"].copy(), carry2


def value_forward(obs_seq, params: dict, spec: NetworkSpec, carry=None):
    """(values (T,), carry')."""
    net = SequenceNet(spec)
    outs, carry2, _ = net.forward(params, obs_seq, carry)
    return outs[:, 0], carry2


# ---------------------------------------------------------------------------
# checkpoint serialization


def save_params(path, spec: NetworkSpec, params: dict, extra: dict | None = None):
    """Write the JSON manifest + little-endian float64 blob container."""
    names = sorted(params)
    manifest = {
        "schema": CKPT_SCHEMA,
        "spec": spec.to_dict(),
        "names": names,
        "shapes": {n: list(params[n].shape) for n in names},
        "extra": extra or {},
    }
    blob = b"".join(np.ascontiguousarray(params[n], dtype="<f8").tobytes()
                    for n in names)
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        fh.write(blob)


def load_params(path):
    """Returns (spec, params, extra); validates shapes and blob length."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw.startswith(CKPT_MAGIC):
        raise CorruptCheckpoint("bad magic header")
    off = len(CKPT_MAGIC)
    if len(raw) < off + 8:
        raise CorruptCheckpoint("truncated manifest length")
    (head_len,) = struct.unpack_from("<Q", raw, off)
    off += 8
    if len(raw) < off + head_len:
        raise CorruptCheckpoint("truncated manifest")
    try:
        manifest = json.loads(raw[off:off + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpoint(f"unreadable manifest: {exc}") from exc
    if manifest.get("schema") != CKPT_SCHEMA:
        raise CorruptCheckpoint(f"unknown schema {manifest.get('schema')!r}")
    off += head_len
    params = {}
    for name in manifest["names"]:
        shape = tuple(manifest["shapes"][name])
        count = int(np.prod(shape)) if shape else 1
        nbytes = 8 * count
        if len(raw) < off + nbytes:
            raise CorruptCheckpoint(f"blob truncated at parameter {name!r}")
        params[name] = np.frombuffer(raw[off:off + nbytes],
                                     dtype="<f8").reshape(shape).copy()
        off += nbytes
    if off != len(raw):
        raise CorruptCheckpoint(f"{len(raw) - off} trailing bytes in blob")
    spec = NetworkSpec(**manifest["spec"])
    return spec, params, manifest.get("extra", {})
