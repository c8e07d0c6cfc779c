"""Two-Flow Encoder: forward pass, reverse-mode parameter gradients, gradient check.

Target flow: ``L_t`` self-attention blocks over the N target memory rows.

Target-reference flow, per target region n with matched reference rows
``U_0`` (K x d) and target row ``V_0`` (1 x d)::

    V_l = select_l(V_{l-1}, U_{l-1})       # query V, keys/values U
    U_l = fuse_l(U_{l-1})                  # self-attention over the K rows

for l = 1..L_fs; the output row is ``V_{L_fs}``. ``U_{L_fs}`` feeds nothing,
so the last fuse layer is never evaluated (its gradient is identically 0).

A block is ``H = LN(x + MH(x, kv, kv)); out = LN(H + FFN(H))`` with a ReLU
FFN. With ``residual_in_fuse_select=False`` fuse layers are bare ``MH`` and
select layers are ``v + MH(v, U, U)``.

The encoder output stacks both flows along the region axis: (2N, d).

Arrays carry a leading batch axis internally: (B, T, d).
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from ._io import atomic_write_bytes, atomic_write_text
from .errors import DimensionError, NumericalError, ParameterError, SchemaError
from .regionmatch import build_tuples, gather_tuples

ATTN = ("wq", "wk", "wv", "wo")
FULL = ATTN + ("ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2",
               "ln1_scale", "ln1_shift", "ln2_scale", "ln2_shift")
OUTPUT_MAGIC = b"RDICOUT1"


@dataclass(frozen=True)
class EncoderConfig:
    d: int = 512
    h: int = 8
    L_t: int = 3
    L_fs: int = 3
    d_ff: int = 2048
    residual_in_fuse_select: bool = True
    ln_eps: float = 1e-12

    def __post_init__(self):
        if self.d % self.h:
            raise ParameterError(f"d={self.d} is not divisible by h={self.h}")
        if self.L_t < 1 or self.L_fs < 1:
            raise ParameterError("L_t and L_fs must be >= 1")

    def block_names(self, flow: str) -> tuple:
        if flow == "target" or self.residual_in_fuse_select:
            return FULL
        return ATTN

    def layers(self):
        """(flow, layer index) pairs in parameter-file order."""
        out = [("target", l) for l in range(self.L_t)]
        out += [(f, l) for l in range(self.L_fs) for f in ("fuse", "select")]
        return out


def layer(params: Mapping[str, np.ndarray], flow: str, index: int) -> dict:
    prefix = f"{flow}.{index}."
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


def init_params(config: EncoderConfig, seed: int = 0, d_in: int | None = None,
                dtype=np.float64) -> dict[str, np.ndarray]:
    """Seeded parameters from ``numpy.random.Generator(PCG64(seed))``.

    Tensors are drawn in ``config.layers()`` order, names in ``FULL`` order
    within a layer: weight matrices Xavier-uniform U(-a, a) with
    a = sqrt(6 / (fan_in + fan_out)); FFN biases and LN shifts U(-0.1, 0.1);
    LN scales U(0.9, 1.1). The optional ``proj.weight``/``proj.bias``
    (memory-space projection for ``d_in``-dim region features) come last.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    d, f = config.d, config.d_ff
    shapes = {"wq": (d, d), "wk": (d, d), "wv": (d, d), "wo": (d, d),
              "ffn_w1": (d, f), "ffn_b1": (f,), "ffn_w2": (f, d), "ffn_b2": (d,),
              "ln1_scale": (d,), "ln1_shift": (d,), "ln2_scale": (d,), "ln2_shift": (d,)}

    def draw(name, shape):
        if len(shape) == 2:
            a = np.sqrt(6.0 / (shape[0] + shape[1]))
            return rng.uniform(-a, a, size=shape)
        if name.endswith("_scale"):
            return rng.uniform(0.9, 1.1, size=shape)
        return rng.uniform(-0.1, 0.1, size=shape)

    params = {}
    for flow, l in config.layers():
        for name in config.block_names(flow):
            params[f"{flow}.{l}.{name}"] = draw(name, shapes[name]).astype(dtype)
    if d_in is not None:
        params["proj.weight"] = draw("proj.weight", (d_in, d)).astype(dtype)
        params["proj.bias"] = np.zeros(d, dtype=dtype)
    return params


def encoder_param_names(params: Mapping[str, np.ndarray]) -> list[str]:
    return [k for k in params if not k.startswith("proj.")]


# ---------------------------------------------------------------------------
# primitives: each *_fwd returns (out, cache); *_bwd returns input grads and
# fills a parameter-gradient dict


def _flat(x):
    return x.reshape(-1, x.shape[-1])


def _split_heads(x, h):
    b, t, d = x.shape
    return x.reshape(b, t, h, d // h).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh)


def softmax(s: np.ndarray) -> np.ndarray:
    z = np.exp(s - s.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def _mha_fwd(xq, xkv, p, h):
    d = xq.shape[-1]
    if p["wq"].shape != (d, d) or xkv.shape[-1] != d:
        raise DimensionError(f"attention: inputs {xq.shape}/{xkv.shape} vs weights {p['wq'].shape}")
    scale = 1.0 / math.sqrt(d // h)  # python float keeps float32 inputs float32
    q = _split_heads(xq @ p["wq"], h)
    k = _split_heads(xkv @ p["wk"], h)
    v = _split_heads(xkv @ p["wv"], h)
    a = softmax(q @ k.transpose(0, 1, 3, 2) * scale)
    c = _merge_heads(a @ v)
    return c @ p["wo"], (xq, xkv, q, k, v, a, c, scale)


def _mha_bwd(dout, cache, p, h, grads):
    xq, xkv, q, k, v, a, c, scale = cache
    grads["wo"] = _flat(c).T @ _flat(dout)
    dc = _split_heads(dout @ p["wo"].T, h)
    da = dc @ v.transpose(0, 1, 3, 2)
    dv = a.transpose(0, 1, 3, 2) @ dc
    ds = a * (da - (da * a).sum(axis=-1, keepdims=True)) * scale
    dq = _merge_heads(ds @ k)
    dk = _merge_heads(ds.transpose(0, 1, 3, 2) @ q)
    dv = _merge_heads(dv)
    grads["wq"] = _flat(xq).T @ _flat(dq)
    grads["wk"] = _flat(xkv).T @ _flat(dk)
    grads["wv"] = _flat(xkv).T @ _flat(dv)
    return dq @ p["wq"].T, dk @ p["wk"].T + dv @ p["wv"].T


def _ln_fwd(x, scale, shift, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    return xhat * scale + shift, (xhat, inv)


def _ln_bwd(dout, cache, scale):
    xhat, inv = cache
    dscale = (_flat(dout) * _flat(xhat)).sum(axis=0)
    dshift = _flat(dout).sum(axis=0)
    g = dout * scale
    dx = inv * (g - g.mean(axis=-1, keepdims=True)
                - xhat * (g * xhat).mean(axis=-1, keepdims=True))
    return dx, dscale, dshift


def _block_fwd(xq, xkv, p, h, eps, full=True, residual=True):
    a, c_mha = _mha_fwd(xq, xkv, p, h)
    if not full:
        return (xq + a if residual else a), (c_mha, None)
    r1 = xq + a
    h1, c_ln1 = _ln_fwd(r1, p["ln1_scale"], p["ln1_shift"], eps)
    z = h1 @ p["ffn_w1"] + p["ffn_b1"]
    f = np.maximum(z, 0.0)
    r2 = h1 + f @ p["ffn_w2"] + p["ffn_b2"]
    out, c_ln2 = _ln_fwd(r2, p["ln2_scale"], p["ln2_shift"], eps)
    return out, (c_mha, (c_ln1, h1, z, f, c_ln2))


def _block_bwd(dout, cache, p, h, full=True, residual=True):
    """Returns (d xq, d xkv, parameter grads)."""
    c_mha, rest = cache
    grads = {}
    if not full:
        dxq_m, dxkv = _mha_bwd(dout, c_mha, p, h, grads)
        return (dout + dxq_m if residual else dxq_m), dxkv, grads
    c_ln1, h1, z, f, c_ln2 = rest
    dr2, grads["ln2_scale"], grads["ln2_shift"] = _ln_bwd(dout, c_ln2, p["ln2_scale"])
    grads["ffn_w2"] = _flat(f).T @ _flat(dr2)
    grads["ffn_b2"] = _flat(dr2).sum(axis=0)
    dz = (dr2 @ p["ffn_w2"].T) * (z > 0)
    grads["ffn_w1"] = _flat(h1).T @ _flat(dz)
    grads["ffn_b1"] = _flat(dz).sum(axis=0)
    dh1 = dr2 + dz @ p["ffn_w1"].T
    dr1, grads["ln1_scale"], grads["ln1_shift"] = _ln_bwd(dh1, c_ln1, p["ln1_scale"])
    dxq_m, dxkv = _mha_bwd(dr1, c_mha, p, h, grads)
    return dr1 + dxq_m, dxkv, grads


# ---------------------------------------------------------------------------
# public forward operations (2-D inputs)


def multi_head_attention(xq, xkv, p, h, return_weights=False):
    out, cache = _mha_fwd(xq[None], xkv[None], p, h)
    return (out[0], cache[5][0]) if return_weights else out[0]


def attention_block(x: np.ndarray, p: Mapping[str, np.ndarray], h: int, eps: float = 1e-12) -> np.ndarray:
    """Self-attention block on an (N, d) matrix."""
    return _block_fwd(x[None], x[None], p, h, eps)[0][0]


def target_flow(m_t: np.ndarray, params, config: EncoderConfig) -> np.ndarray:
    x = m_t[None]
    for l in range(config.L_t):
        x = _block_fwd(x, x, layer(params, "target", l), config.h, config.ln_eps)[0]
    return x[0]


def fuse_layer(u: np.ndarray, p, config: EncoderConfig) -> np.ndarray:
    """Self-attention over the K reference rows of one tuple."""
    full = config.residual_in_fuse_select
    return _block_fwd(u[None], u[None], p, config.h, config.ln_eps, full, full)[0][0]


def select_layer(v: np.ndarray, u: np.ndarray, p, config: EncoderConfig) -> np.ndarray:
    """Cross-attention of the (1, d) target row over the (K, d) reference rows."""
    return _block_fwd(v[None], u[None], p, config.h, config.ln_eps,
                      config.residual_in_fuse_select, True)[0][0]


def _trf_fwd(tgt_rows, ref_rows, params, config):
    """tgt_rows (N, d), ref_rows (N, K, d) -> (N, d) plus cache."""
    full = config.residual_in_fuse_select
    v, u = tgt_rows[:, None, :], ref_rows
    caches = []
    for l in range(config.L_fs):
        v, c_sel = _block_fwd(v, u, layer(params, "select", l), config.h, config.ln_eps, full, True)
        c_fuse = None
        if l < config.L_fs - 1:
            u, c_fuse = _block_fwd(u, u, layer(params, "fuse", l), config.h, config.ln_eps, full, full)
        caches.append((c_sel, c_fuse))
    return v[:, 0, :], caches


def target_reference_flow(tgt_rows: np.ndarray, ref_rows: np.ndarray, params,
                          config: EncoderConfig) -> np.ndarray:
    if ref_rows.ndim != 3 or ref_rows.shape[0] != tgt_rows.shape[0]:
        raise DimensionError(f"tuples: target rows {tgt_rows.shape} vs reference rows {ref_rows.shape}")
    return _trf_fwd(tgt_rows, ref_rows, params, config)[0]


@dataclass
class EncodeResult:
    output: np.ndarray  # (2N, d)
    tuples: list
    grads: dict | None = None


def _prepare(m_t, refs, params, config):
    if not refs:
        raise ValueError("at least one reference image is required")
    dtype = params[next(iter(encoder_param_names(params)))].dtype
    m_t = np.asarray(m_t, dtype=dtype)
    refs = [np.asarray(r, dtype=dtype) for r in refs]
    named = [("m_t", m_t)] + [(f"refs[{i}]", r) for i, r in enumerate(refs)]
    for name, arr in named:
        if arr.ndim != 2 or arr.shape[1] != config.d:
            raise DimensionError(f"{name} has shape {arr.shape}, expected (*, {config.d})")
    tuples = build_tuples(m_t, refs)
    return m_t, gather_tuples(m_t, refs, tuples), tuples


def encode(m_t: np.ndarray, refs: Sequence[np.ndarray], params, config: EncoderConfig,
           with_grads: bool = False) -> EncodeResult:
    """Run both flows and stack them into a (2N, d) memory.

    With ``with_grads`` also returns gradients of ``output.sum()`` with
    respect to every encoder parameter (projection excluded).
    """
    m_t, ref_rows, tuples = _prepare(m_t, refs, params, config)
    x, t_caches = m_t[None], []
    for l in range(config.L_t):
        x, c = _block_fwd(x, x, layer(params, "target", l), config.h, config.ln_eps)
        t_caches.append(c)
    tilde, trf_caches = _trf_fwd(m_t, ref_rows, params, config)
    out = np.concatenate([x[0], tilde], axis=0)
    if not with_grads:
        return EncodeResult(out, tuples)
    return EncodeResult(out, tuples, _backward(np.ones_like(out), t_caches, trf_caches, params, config))


def _backward(dout, t_caches, trf_caches, params, config):
    n = dout.shape[0] // 2
    grads = {k: np.zeros_like(params[k]) for k in encoder_param_names(params)}

    def store(flow, l, g):
        for name, val in g.items():
            grads[f"{flow}.{l}.{name}"] += val

    dx = dout[:n][None]
    for l in reversed(range(config.L_t)):
        dq, dkv, g = _block_bwd(dx, t_caches[l], layer(params, "target", l), config.h)
        dx = dq + dkv
        store("target", l, g)

    full = config.residual_in_fuse_select
    dv = dout[n:][:, None, :]
    du = None  # gradient w.r.t. U_l flowing back from later layers
    for l in reversed(range(config.L_fs)):
        c_sel, c_fuse = trf_caches[l]
        if c_fuse is not None and du is not None:
            dq, dkv, g = _block_bwd(du, c_fuse, layer(params, "fuse", l), config.h, full, full)
            store("fuse", l, g)
            du = dq + dkv
        dv, du_sel, g = _block_bwd(dv, c_sel, layer(params, "select", l), config.h, full, True)
        store("select", l, g)
        du = du_sel if du is None else du + du_sel
    return grads


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckRow:
    name: str
    index: int
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradCheckReport:
    max_rel_error: float
    rows: list

    def to_json(self) -> dict:
        return {"max_rel_error": self.max_rel_error, "samples": [asdict(r) for r in self.rows]}


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(1e-8, abs(numeric))


def check_gradients(fn: Callable[[], float], params: dict[str, np.ndarray],
                    analytic: Mapping[str, np.ndarray], names: Sequence[str],
                    epsilon: float = 1e-5, n_samples: int = 200, seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients of ``fn`` against central differences.

    Samples cycle through ``names`` in order, drawing a flat index per tensor
    from ``default_rng(seed)``. ``params`` is perturbed in place and restored.
    """
    rng = np.random.default_rng(seed)
    rows = []
    for s in range(n_samples):
        name = names[s % len(names)]
        arr = params[name]
        if arr.dtype != np.float64:
            raise ParameterError(f"gradient check needs float64 parameters; {name} is {arr.dtype}")
        idx = int(rng.integers(arr.size))
        flat = arr.reshape(-1)
        orig = flat[idx]
        flat[idx] = orig + epsilon
        f_plus = fn()
        flat[idx] = orig - epsilon
        f_minus = fn()
        flat[idx] = orig
        num = (f_plus - f_minus) / (2 * epsilon)
        ana = float(analytic[name].reshape(-1)[idx])
        if not (np.isfinite(num) and np.isfinite(ana)):
            raise NumericalError(f"non-finite gradient for {name}[{idx}]: analytic={ana}, numeric={num}")
        rows.append(GradCheckRow(name, idx, ana, float(num), relative_error(ana, num)))
    return GradCheckReport(max(r.rel_error for r in rows), rows)


def grad_check(m_t: np.ndarray, refs: Sequence[np.ndarray], params: dict[str, np.ndarray],
               config: EncoderConfig, epsilon: float = 1e-5, n_samples: int = 200,
               seed: int = 0) -> GradCheckReport:
    """Gradient check of ``encode(...).output.sum()`` over encoder parameters."""
    names = encoder_param_names(params)
    bad = [n for n in names if params[n].dtype != np.float64]
    if bad:
        raise ParameterError(f"gradient check needs float64 parameters; {bad[0]} is {params[bad[0]].dtype}")
    res = encode(m_t, refs, params, config, with_grads=True)
    for name, g in res.grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite analytic gradient in {name}")
    return check_gradients(lambda: float(encode(m_t, refs, params, config).output.sum()),
                           params, res.grads, names, epsilon, n_samples, seed)


# ---------------------------------------------------------------------------
# file formats


def save_params(path: str | Path, params: Mapping[str, np.ndarray], config: EncoderConfig,
                seed: int | None = None) -> None:
    """JSON manifest at ``path`` plus a raw little-endian blob next to it (``.bin``)."""
    path = Path(path)
    blob_path = path.with_suffix(".bin")
    dtype = np.dtype(params[next(iter(params))].dtype).newbyteorder("<")
    tensors, chunks, offset = [], [], 0
    for name, arr in params.items():
        data = np.ascontiguousarray(arr, dtype=dtype).tobytes()
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(data)
        offset += len(data)
    manifest = {"config": asdict(config), "seed": seed,
                "dtype": "float64" if dtype.itemsize == 8 else "float32",
                "blob": blob_path.name, "tensors": tensors}
    atomic_write_bytes(blob_path, b"".join(chunks))
    atomic_write_text(path, json.dumps(manifest, indent=1) + "\n")


def load_params(path: str | Path, dtype=None) -> tuple[dict[str, np.ndarray], EncoderConfig]:
    path = Path(path)
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
        config = EncoderConfig(**manifest["config"])
        file_dtype = np.dtype({"float64": "<f8", "float32": "<f4"}[manifest["dtype"]])
        blob = (path.parent / manifest["blob"]).read_bytes()
        params = {}
        for t in manifest["tensors"]:
            count = int(np.prod(t["shape"])) if t["shape"] else 1
            if t["offset"] + count * file_dtype.itemsize > len(blob):
                raise SchemaError(f"parameter blob too short for tensor {t['name']}")
            arr = np.frombuffer(blob, dtype=file_dtype, count=count, offset=t["offset"])
            params[t["name"]] = arr.reshape(t["shape"]).astype(dtype or file_dtype.newbyteorder("="))
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise SchemaError(f"malformed parameter manifest {path}: {exc!r}") from exc
    missing = [f"{f}.{l}.{n}" for f, l in config.layers() for n in config.block_names(f)
               if f"{f}.{l}.{n}" not in params]
    if missing:
        raise SchemaError(f"parameter file lacks tensors: {missing[:5]}")
    return params, config


def write_output(path: str | Path, out: np.ndarray) -> None:
    """Layout: magic, u32 rows, u32 cols, u32 itemsize (4 or 8), row-major LE floats."""
    rows, cols = out.shape
    dtype = "<f8" if out.dtype == np.float64 else "<f4"
    header = OUTPUT_MAGIC + struct.pack("<III", rows, cols, np.dtype(dtype).itemsize)
    atomic_write_bytes(path, header + np.ascontiguousarray(out, dtype=dtype).tobytes())


def read_output(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:8] != OUTPUT_MAGIC:
        raise SchemaError("encoder output: bad magic")
    rows, cols, size = struct.unpack_from("<III", raw, 8)
    dtype = {4: "<f4", 8: "<f8"}.get(size)
    if dtype is None or len(raw) != 20 + rows * cols * size:
        raise SchemaError("encoder output: inconsistent header")
    return np.frombuffer(raw, dtype=dtype, offset=20).reshape(rows, cols)
