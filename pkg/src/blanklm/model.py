"""Single-stack transformer over the two-segment infill layout.

Architecture choices, relative to a vanilla decoder:
  * layer norm is applied before each sublayer inside the residual branch
    (pre-residual norm), with one final norm after the stack;
  * the output head is a single linear projection, tied to the token
    embedding by default;
  * feed-forward activation is the exact Gaussian-CDF GeLU;
  * every token gets two additive positional embeddings: its index in the
    corrupted context, and its intra-span index (0 on the context). The
    second table can be dropped via ``use_pos2=False`` for ablations.

Checkpoints are little-endian: a text header of key=value lines terminated
by a blank line, then per-tensor records of
    u32 name length | name bytes | u32 rank | u32 dims... | f32 payload.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import (
    CheckpointHeaderError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    ContractError,
)
from .layout import Batch
from .rng import Rng
from .tensor import Tensor

CHECKPOINT_FORMAT = "blanklm-ckpt-v1"
INIT_STD = 0.02


@dataclass
class ModelConfig:
    vocab_size: int
    n_layers: int = 4
    hidden_size: int = 128
    n_heads: int = 8
    ffn_size: int = 512
    max_pos1: int = 256
    max_pos2: int = 130
    dropout: float = 0.1
    attn_dropout: float = 0.1
    use_pos2: bool = True
    tie_output: bool = True

    def __post_init__(self):
        if self.hidden_size % self.n_heads != 0:
            raise ContractError("hidden_size must be divisible by n_heads")
        if min(self.vocab_size, self.n_layers, self.max_pos1, self.max_pos2) < 1:
            raise ContractError("config sizes must be positive")

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.n_heads


class Parameters:
    """Named, ordered collection of learnable tensors."""

    def __init__(self, tensors: dict[str, Tensor]):
        self._tensors = dict(tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def tensors(self) -> list[Tensor]:
        return list(self._tensors.values())

    def n_params(self) -> int:
        return sum(t.size for t in self._tensors.values())


def _layer_names(i: int) -> dict[str, str]:
    p = f"layers.{i}."
    return {k: p + k for k in (
        "ln1.gain", "ln1.bias", "attn.wq", "attn.bq", "attn.wk", "attn.bk",
        "attn.wv", "attn.bv", "attn.wo", "attn.bo",
        "ln2.gain", "ln2.bias", "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2",
    )}


def init_params(cfg: ModelConfig, rng: Rng, dtype=np.float32) -> Parameters:
    """Weights ~ N(0, 0.02^2); norm gains 1, all biases 0.

    Draw order is the parameter insertion order, so a seed pins every
    weight bit-exactly.
    """
    h, f, v = cfg.hidden_size, cfg.ffn_size, cfg.vocab_size

    def w(*shape):
        return Tensor((rng.normal(0.0, INIT_STD, shape)).astype(dtype), requires_grad=True)

    def zeros(*shape):
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

    def ones(*shape):
        return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)

    t: dict[str, Tensor] = {}
    t["tok_emb"] = w(v, h)
    t["pos1_emb"] = w(cfg.max_pos1, h)
    if cfg.use_pos2:
        t["pos2_emb"] = w(cfg.max_pos2, h)
    for i in range(cfg.n_layers):
        n = _layer_names(i)
        t[n["ln1.gain"]] = ones(h)
        t[n["ln1.bias"]] = zeros(h)
        for k in ("attn.wq", "attn.wk", "attn.wv", "attn.wo"):
            t[n[k]] = w(h, h)
        for k in ("attn.bq", "attn.bk", "attn.bv", "attn.bo"):
            t[n[k]] = zeros(h)
        t[n["ln2.gain"]] = ones(h)
        t[n["ln2.bias"]] = zeros(h)
        t[n["ffn.w1"]] = w(h, f)
        t[n["ffn.b1"]] = zeros(f)
        t[n["ffn.w2"]] = w(f, h)
        t[n["ffn.b2"]] = zeros(h)
    t["final_ln.gain"] = ones(h)
    t["final_ln.bias"] = zeros(h)
    if not cfg.tie_output:
        t["out_proj"] = w(h, v)
    return Parameters(t)


class Model:
    """Config + parameters, with the forward pass and checkpoint I/O."""

    def __init__(self, cfg: ModelConfig, params: Parameters):
        self.cfg = cfg
        self.params = params

    @classmethod
    def init(cls, cfg: ModelConfig, rng: Rng, dtype=np.float32) -> "Model":
        return cls(cfg, init_params(cfg, rng, dtype=dtype))

    def forward(
        self,
        batch: Batch,
        train: bool = False,
        rng: Rng | None = None,
        probe: dict | None = None,
    ) -> Tensor:
        """Logits [B, S, V] for a collated batch.

        ``probe``, when given, collects {"attn.<layer>": probabilities}
        for inspection. Dropout requires ``rng`` when training.
        """
        cfg, p = self.cfg, self.params
        ids, pos1, pos2 = batch.input_ids, batch.pos1, batch.pos2
        if ids.max(initial=0) >= cfg.vocab_size:
            raise ContractError("token id exceeds vocab_size")
        if pos1.max(initial=0) >= cfg.max_pos1:
            raise ContractError("pos1 exceeds max_pos1")
        if cfg.use_pos2 and pos2.max(initial=0) >= cfg.max_pos2:
            raise ContractError("pos2 exceeds max_pos2")
        if train and (cfg.dropout > 0 or cfg.attn_dropout > 0) and rng is None:
            raise ContractError("training forward with dropout needs an rng")

        b, s = ids.shape
        nh, hd = cfg.n_heads, cfg.head_dim
        dtype = p["tok_emb"].dtype
        bias = batch.attn_bias.astype(dtype, copy=False)

        x = T.add(T.embedding(p["tok_emb"], ids), T.embedding(p["pos1_emb"], pos1))
        if cfg.use_pos2:
            x = T.add(x, T.embedding(p["pos2_emb"], pos2))
        x = T.dropout(x, cfg.dropout, rng, train)

        for i in range(cfg.n_layers):
            n = _layer_names(i)
            h = T.layer_norm(x, p[n["ln1.gain"]], p[n["ln1.bias"]])
            q = T.linear(h, p[n["attn.wq"]], p[n["attn.bq"]])
            k = T.linear(h, p[n["attn.wk"]], p[n["attn.bk"]])
            v = T.linear(h, p[n["attn.wv"]], p[n["attn.bv"]])
            # [B, S, H] -> [B, nh, S, hd]
            q = T.permute(T.reshape(q, (b, s, nh, hd)), (0, 2, 1, 3))
            k = T.permute(T.reshape(k, (b, s, nh, hd)), (0, 2, 1, 3))
            v = T.permute(T.reshape(v, (b, s, nh, hd)), (0, 2, 1, 3))
            scores = T.scale(T.bmm(q, T.permute(k, (0, 1, 3, 2))), 1.0 / math.sqrt(hd))
            scores = T.add(scores, bias)
            probs = T.softmax_rows(scores)
            if probe is not None:
                probe[f"attn.{i}"] = probs.data.copy()
            probs = T.dropout(probs, cfg.attn_dropout, rng, train)
            ctx = T.bmm(probs, v)
            ctx = T.reshape(T.permute(ctx, (0, 2, 1, 3)), (b, s, nh * hd))
            attn_out = T.linear(ctx, p[n["attn.wo"]], p[n["attn.bo"]])
            x = T.add(x, T.dropout(attn_out, cfg.dropout, rng, train))

            h2 = T.layer_norm(x, p[n["ln2.gain"]], p[n["ln2.bias"]])
            f = T.gelu(T.linear(h2, p[n["ffn.w1"]], p[n["ffn.b1"]]))
            f = T.linear(f, p[n["ffn.w2"]], p[n["ffn.b2"]])
            x = T.add(x, T.dropout(f, cfg.dropout, rng, train))

        x = T.layer_norm(x, p["final_ln.gain"], p["final_ln.bias"])
        if cfg.tie_output:
            return T.linear(x, p["tok_emb"], transpose_w=True)
        return T.linear(x, p["out_proj"])

    def zero_grads(self) -> None:
        for t in self.params.tensors():
            t.zero_grad()

    def save(self, path, extra_header: dict | None = None,
             opt_tensors: dict[str, np.ndarray] | None = None) -> None:
        save_checkpoint(self.params, self.cfg, path, extra_header, opt_tensors)


# ---------------------------------------------------------------------------
# checkpoint I/O

_BOOL_FIELDS = {"use_pos2", "tie_output"}
_FLOAT_FIELDS = {"dropout", "attn_dropout"}


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)  # repr round-trips doubles exactly
    return str(v)


def save_checkpoint(
    params: Parameters,
    cfg: ModelConfig,
    path,
    extra_header: dict | None = None,
    opt_tensors: dict[str, np.ndarray] | None = None,
) -> None:
    """Write config header + tensor records; always little-endian float32."""
    buf = io.BytesIO()
    lines = [f"format={CHECKPOINT_FORMAT}"]
    for f in fields(cfg):
        lines.append(f"cfg.{f.name}={_format_value(getattr(cfg, f.name))}")
    for k, v in (extra_header or {}).items():
        lines.append(f"{k}={_format_value(v)}")
    buf.write(("\n".join(lines) + "\n\n").encode("utf-8"))

    def write_record(name: str, arr: np.ndarray):
        data = np.ascontiguousarray(arr, dtype="<f4")
        nb = name.encode("utf-8")
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<I", data.ndim))
        buf.write(struct.pack(f"<{data.ndim}I", *data.shape))
        buf.write(data.tobytes())

    for name, t in params.items():
        write_record(name, t.data)
    for name, arr in (opt_tensors or {}).items():
        write_record("opt." + name, arr)
    Path(path).write_bytes(buf.getvalue())


def _parse_header(raw: bytes) -> tuple[dict[str, str], int]:
    end = raw.find(b"\n\n")
    if end < 0:
        raise CheckpointHeaderError("no blank line terminating the header")
    try:
        text = raw[:end].decode("utf-8")
    except UnicodeDecodeError as e:
        raise CheckpointHeaderError(f"header is not UTF-8: {e}") from e
    pairs: dict[str, str] = {}
    for line in text.split("\n"):
        if "=" not in line:
            raise CheckpointHeaderError(f"malformed header line: {line!r}")
        k, v = line.split("=", 1)
        pairs[k] = v
    if pairs.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointHeaderError(
            f"bad format tag {pairs.get('format')!r}, expected {CHECKPOINT_FORMAT!r}"
        )
    return pairs, end + 2


def _config_from_header(pairs: dict[str, str]) -> ModelConfig:
    kwargs = {}
    for f in fields(ModelConfig):
        key = f"cfg.{f.name}"
        if key not in pairs:
            raise CheckpointHeaderError(f"header missing {key}")
        raw = pairs[key]
        try:
            if f.name in _BOOL_FIELDS:
                if raw not in ("true", "false"):
                    raise ValueError(raw)
                kwargs[f.name] = raw == "true"
            elif f.name in _FLOAT_FIELDS:
                kwargs[f.name] = float(raw)
            else:
                kwargs[f.name] = int(raw)
        except ValueError as e:
            raise CheckpointHeaderError(f"bad value for {key}: {raw!r}") from e
    return ModelConfig(**kwargs)


def load_checkpoint(path) -> tuple[Model, dict[str, str], dict[str, np.ndarray]]:
    """Returns (model, extra header pairs, optimizer tensors)."""
    raw = Path(path).read_bytes()
    pairs, offset = _parse_header(raw)
    cfg = _config_from_header(pairs)
    extras = {
        k: v for k, v in pairs.items() if k != "format" and not k.startswith("cfg.")
    }

    tensors: dict[str, np.ndarray] = {}
    pos = offset
    total = len(raw)

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > total:
            raise CheckpointTruncatedError(
                f"file ends at byte {total}, needed {pos + n}"
            )
        chunk = raw[pos : pos + n]
        pos += n
        return chunk

    while pos < total:
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        payload = take(4 * count)
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()

    opt = {k[len("opt.") :]: v for k, v in tensors.items() if k.startswith("opt.")}
    model_tensors = {k: v for k, v in tensors.items() if not k.startswith("opt.")}

    expected = init_params(cfg, _shape_only_rng(), dtype=np.float32)
    exp_shapes = {name: t.shape for name, t in expected.items()}
    if set(model_tensors) != set(exp_shapes):
        missing = set(exp_shapes) - set(model_tensors)
        extra = set(model_tensors) - set(exp_shapes)
        raise CheckpointShapeError(
            f"parameter set mismatch (missing={sorted(missing)}, extra={sorted(extra)})"
        )
    for name, arr in model_tensors.items():
        if arr.shape != exp_shapes[name]:
            raise CheckpointShapeError(
                f"{name}: shape {arr.shape} != expected {exp_shapes[name]}"
            )

    params = Parameters(
        {name: Tensor(model_tensors[name], requires_grad=True) for name in exp_shapes}
    )
    return Model(cfg, params), extras, opt


class _shape_only_rng:
    """Stand-in rng for shape derivation; draws zeros."""

    def normal(self, loc, scale, shape):
        return np.zeros(shape)
