"""Transformer encoder with dense, task-routed (MoTE) or token-routed feed-forward sublayers.

Block layout (pre-norm attention, expert block inside the feed-forward residual)::

    x = x + Attention(LayerNorm(x))
    x = x + PostNorm(MLP(PreNorm(x)))      # one expert block, chosen per block kind

Embeddings are mean-pooled over every non-padding position (instruction
tokens included) and L2-normalized.
"""

from __future__ import annotations

import tempfile
import zlib
from contextlib import contextmanager
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import numerics as nx
from .data import PAD_ID, LengthError, Vocabulary, tokenize
from .numerics import Tensor
from .payload import read_array, write_arrays
from .routing import TaskRegistry, route_sequence

FF_KINDS = ("dense", "mote", "token_moe")
PLACEMENTS = ("every_block", "every_other_block")
PLACEMENT_ALIASES = {"eb": "every_block", "eob": "every_other_block"}
NORM_EPS = 1e-5
MASK_VALUE = -1e30

EXPERT_PARAMS = (
    ("pre_norm.gain", "d"),
    ("pre_norm.bias", "d"),
    ("mlp.w1", "dm"),
    ("mlp.b1", "m"),
    ("mlp.w2", "md"),
    ("mlp.b2", "d"),
    ("post_norm.gain", "d"),
    ("post_norm.bias", "d"),
)
ATTN_PARAMS = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")


class ConfigError(ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class AlreadyRoutedError(ValueError):
    pass


class ResidencyError(RuntimeError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int = 1024
    max_seq_len: int = 64
    hidden_dim: int = 64
    num_heads: int = 4
    num_layers: int = 4
    mlp_hidden_dim: int = 256
    num_experts: int = 4
    ff_kind: str = "dense"
    placement: str = "every_block"
    seed: int = 0

    def __post_init__(self) -> None:
        placement = PLACEMENT_ALIASES.get(self.placement, self.placement)
        object.__setattr__(self, "placement", placement)
        for name in ("vocab_size", "max_seq_len", "hidden_dim", "num_heads", "num_layers",
                     "mlp_hidden_dim", "num_experts"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value <= 0:
                raise ConfigError(name, f"must be a positive integer, got {value!r}")
        if self.hidden_dim % self.num_heads:
            raise ConfigError("num_heads", f"{self.num_heads} does not divide hidden_dim {self.hidden_dim}")
        if self.ff_kind not in FF_KINDS:
            raise ConfigError("ff_kind", f"expected one of {FF_KINDS}, got {self.ff_kind!r}")
        if self.placement not in PLACEMENTS:
            raise ConfigError("placement", f"expected one of {PLACEMENTS}, got {self.placement!r}")
        if not isinstance(self.seed, (int, np.integer)) or not 0 <= self.seed < 2**64:
            raise ConfigError("seed", "must be an unsigned 64-bit integer")
        if self.ff_kind == "dense":
            object.__setattr__(self, "num_experts", 1)
            object.__setattr__(self, "placement", "every_block")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    def routed_blocks(self) -> list[int]:
        if self.ff_kind == "dense":
            return []
        if self.placement == "every_other_block":
            return list(range(1, self.num_layers, 2))
        return list(range(self.num_layers))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "EncoderConfig":
        known = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for k, v in values.items():
            if k not in known:
                raise ConfigError(k, "unknown config field")
            kwargs[k] = v if known[k] == "str" else int(v)
        return cls(**kwargs)


def expert_prefix(layer: int, expert: int | None) -> str:
    return f"block.{layer}.ff" if expert is None else f"block.{layer}.ff.expert.{expert}"


def _expert_shapes(prefix: str, cfg: EncoderConfig) -> list[tuple[str, tuple[int, ...]]]:
    dims = {"d": cfg.hidden_dim, "m": cfg.mlp_hidden_dim}
    return [(f"{prefix}.{name}", tuple(dims[c] for c in spec)) for name, spec in EXPERT_PARAMS]


def param_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    """Every parameter path the config implies, in canonical storage order."""
    d = cfg.hidden_dim
    shapes: dict[str, tuple[int, ...]] = {
        "embed.token": (cfg.vocab_size, d),
        "embed.position": (cfg.max_seq_len, d),
    }
    routed = set(cfg.routed_blocks())
    for i in range(cfg.num_layers):
        shapes[f"block.{i}.attn_norm.gain"] = (d,)
        shapes[f"block.{i}.attn_norm.bias"] = (d,)
        for name in ATTN_PARAMS:
            shapes[f"block.{i}.attn.{name}"] = (d, d) if name[0] == "w" else (d,)
        if i not in routed:
            shapes.update(_expert_shapes(expert_prefix(i, None), cfg))
            continue
        if cfg.ff_kind == "token_moe":
            shapes[f"block.{i}.ff.gate"] = (d, cfg.num_experts)
        for e in range(cfg.num_experts):
            shapes.update(_expert_shapes(expert_prefix(i, e), cfg))
    return shapes


def _init_param(path: str, shape: tuple[int, ...], seed: int) -> np.ndarray:
    leaf = path.rsplit(".", 1)[-1]
    if leaf == "gain":
        return np.ones(shape)
    if len(shape) == 1:
        return np.zeros(shape)
    bound = np.sqrt(6.0 / (shape[0] + shape[1]))
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, zlib.crc32(path.encode())])))
    # Stored at 32-bit precision from the start so that copy/average round-trips stay exact.
    return rng.uniform(-bound, bound, size=shape).astype(np.float32).astype(np.float64)


class TouchCounter:
    def __init__(self) -> None:
        self.paths: set[str] = set()
        self.count = 0

    def touch(self, path: str, size: int) -> None:
        if path not in self.paths:
            self.paths.add(path)
            self.count += size


@dataclass(frozen=True)
class ResidencyState:
    resident_experts: frozenset
    evicted_bytes: int
    resident_bytes: int


@dataclass(frozen=True)
class _SpillSection:
    payload: Path
    entries: tuple[tuple[str, tuple[int, ...], int], ...]


class ModelCheckpoint:
    """Configuration, named parameters, task registry and vocabulary of one encoder."""

    def __init__(self, config: EncoderConfig, params: dict[str, np.ndarray], registry: TaskRegistry,
                 vocab: Vocabulary):
        expected = param_shapes(config)
        missing = [p for p in expected if p not in params]
        extra = [p for p in params if p not in expected]
        if missing or extra:
            raise ConfigError("params", f"missing {missing[:3]}, unexpected {extra[:3]}")
        for path, shape in expected.items():
            if tuple(np.shape(params[path])) != shape:
                raise ConfigError("params", f"{path} has shape {np.shape(params[path])}, expected {shape}")
        if config.ff_kind != "dense":
            for task_id, entry in registry.entries.items():
                if entry.expert_index >= config.num_experts:
                    raise ConfigError("registry", f"{task_id!r} routes to expert {entry.expert_index} "
                                                  f"but the model has {config.num_experts}")
        self.config = config
        self.registry = registry
        self.vocab = vocab
        self.params: dict[str, Tensor] = {
            p: Tensor(np.array(params[p], dtype=np.float64), name=p) for p in expected
        }
        self._touch: TouchCounter | None = None
        self._evicted: dict[tuple[int, int], _SpillSection] = {}
        self._spill_dir: Path | None = None

    def p(self, path: str) -> Tensor:
        try:
            t = self.params[path]
        except KeyError:
            raise ResidencyError(f"parameter {path} is offloaded; make its expert resident first") from None
        if self._touch is not None:
            self._touch.touch(path, t.size)
        return t

    def arrays(self) -> dict[str, np.ndarray]:
        """All parameters in canonical order, reading offloaded experts back from spill."""
        out = {}
        for path in param_shapes(self.config):
            if path in self.params:
                out[path] = self.params[path].data
        for section in self._evicted.values():
            for path, shape, offset in section.entries:
                out[path] = read_array(section.payload, offset, shape, "f8")
        return {p: out[p] for p in param_shapes(self.config)}

    def copy(self) -> "ModelCheckpoint":
        return ModelCheckpoint(self.config, {k: v.copy() for k, v in self.arrays().items()},
                               self.registry, self.vocab)

    def num_parameters(self) -> int:
        return sum(int(np.prod(s)) for s in param_shapes(self.config).values())

    def expert_for(self, instruction_id: str) -> int | None:
        if self.config.ff_kind == "mote":
            return route_sequence(self.registry, instruction_id)
        self.registry[instruction_id]
        return None


def init_model(config: EncoderConfig, registry: TaskRegistry | None = None,
               vocab: Vocabulary | None = None) -> ModelCheckpoint:
    from .routing import default_registry

    registry = registry or default_registry()
    vocab = vocab or Vocabulary().extend_for(registry)
    if len(vocab) > config.vocab_size:
        raise ConfigError("vocab_size", f"vocabulary has {len(vocab)} tokens, config allows {config.vocab_size}")
    params = {path: _init_param(path, shape, config.seed) for path, shape in param_shapes(config).items()}
    return ModelCheckpoint(config, params, registry, vocab)


# ---------------------------------------------------------------------------
# forward pass


def _attention(model: ModelCheckpoint, i: int, h: Tensor, bias: np.ndarray) -> Tensor:
    cfg = model.config
    B, T, D = h.shape
    H, Dh = cfg.num_heads, cfg.head_dim
    pre = f"block.{i}.attn."

    def heads(w: str, b: str) -> Tensor:
        y = nx.matmul(h, model.p(pre + w)) + model.p(pre + b)
        return nx.transpose(nx.reshape(y, (B, T, H, Dh)), (0, 2, 1, 3))

    q, k, v = heads("wq", "bq"), heads("wk", "bk"), heads("wv", "bv")
    scores = nx.scale(nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(Dh)) + bias
    ctx = nx.matmul(nx.softmax(scores), v)
    ctx = nx.reshape(nx.transpose(ctx, (0, 2, 1, 3)), (B, T, D))
    return nx.matmul(ctx, model.p(pre + "wo")) + model.p(pre + "bo")


def _expert_block(model: ModelCheckpoint, prefix: str, x: Tensor) -> Tensor:
    p = model.p
    h = nx.layer_norm(x, p(prefix + ".pre_norm.gain"), p(prefix + ".pre_norm.bias"), NORM_EPS)
    h = nx.gelu(nx.matmul(h, p(prefix + ".mlp.w1")) + p(prefix + ".mlp.b1"))
    h = nx.matmul(h, p(prefix + ".mlp.w2")) + p(prefix + ".mlp.b2")
    return nx.layer_norm(h, p(prefix + ".post_norm.gain"), p(prefix + ".post_norm.bias"), NORM_EPS)


def _token_routed(model: ModelCheckpoint, i: int, x: Tensor, valid: np.ndarray, aux: list | None) -> Tensor:
    E = model.config.num_experts
    probs = nx.softmax(nx.matmul(x, model.p(f"block.{i}.ff.gate")))
    choice = np.argmax(probs.data, axis=-1)
    out = None
    for e in range(E):
        onehot = (choice == e)[..., None].astype(np.float64)
        weight = nx.tsum(nx.mul(probs, np.eye(E)[e]), axis=-1, keepdims=True)
        y = nx.mul(nx.mul(weight, onehot), _expert_block(model, expert_prefix(i, e), x))
        out = y if out is None else out + y
    if aux is not None:
        n = valid.sum()
        fractions = np.bincount(choice[valid], minlength=E) / n
        mean_probs = nx.scale(nx.tsum(nx.mul(probs, valid[..., None].astype(np.float64)), axis=(0, 1)), 1.0 / n)
        aux.append(nx.scale(nx.tsum(nx.mul(mean_probs, fractions)), float(E)))
    return out


def forward(model: ModelCheckpoint, ids: np.ndarray, lengths: np.ndarray, expert: int | None = None,
            aux: list | None = None) -> Tensor:
    """Pooled, normalized embeddings for a padded (B, T) id batch.

    ``expert`` selects the task expert for MoTE blocks. Token-routed blocks
    append their load-balancing loss to ``aux`` when given.
    """
    cfg = model.config
    B, T = ids.shape
    valid = np.arange(T)[None, :] < lengths[:, None]
    bias = np.where(valid, 0.0, MASK_VALUE)[:, None, None, :]
    x = nx.embedding(model.p("embed.token"), ids) + nx.embedding(model.p("embed.position"), np.arange(T))
    routed = set(cfg.routed_blocks())
    for i in range(cfg.num_layers):
        h = nx.layer_norm(x, model.p(f"block.{i}.attn_norm.gain"), model.p(f"block.{i}.attn_norm.bias"), NORM_EPS)
        x = x + _attention(model, i, h, bias)
        if i not in routed:
            x = x + _expert_block(model, expert_prefix(i, None), x)
        elif cfg.ff_kind == "mote":
            x = x + _expert_block(model, expert_prefix(i, expert), x)
        else:
            x = x + _token_routed(model, i, x, valid, aux)
    pooled = nx.tsum(nx.mul(x, valid[..., None].astype(np.float64)), axis=1)
    pooled = nx.mul(pooled, 1.0 / lengths[:, None].astype(np.float64))
    return nx.l2_normalize(pooled)


def prepare_batch(model: ModelCheckpoint, instruction_id: str,
                  sequences: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    entry = model.registry[instruction_id]
    prefix = tokenize(model.vocab, entry.prefix)
    limit = model.config.max_seq_len
    rows = []
    for seq in sequences:
        row = prefix + list(seq)
        if len(row) > limit:
            raise LengthError(f"prefixed sequence has {len(row)} tokens, limit is {limit}")
        if not row:
            raise LengthError("empty sequence with an empty instruction prefix")
        rows.append(row)
    T = max(len(r) for r in rows)
    ids = np.full((len(rows), T), PAD_ID, dtype=np.int64)
    for b, r in enumerate(rows):
        ids[b, : len(r)] = r
    if ids.max() >= model.config.vocab_size or ids.min() < 0:
        raise ValueError(f"token id out of range for vocab_size {model.config.vocab_size}")
    return ids, np.array([len(r) for r in rows], dtype=np.int64)


def embed_batch(model: ModelCheckpoint, instruction_id: str, sequences: Sequence[Sequence[int]],
                aux: list | None = None) -> Tensor:
    """Differentiable embeddings of several sequences under one instruction."""
    ids, lengths = prepare_batch(model, instruction_id, sequences)
    expert = model.expert_for(instruction_id)
    if expert is not None:
        ensure_resident(model, expert)
    return forward(model, ids, lengths, expert, aux)


def encode(model: ModelCheckpoint, instruction_id: str, token_ids: Sequence[int]) -> np.ndarray:
    return embed_batch(model, instruction_id, [token_ids]).data[0]


def encode_many(model: ModelCheckpoint, instruction_id: str, sequences: Sequence[Sequence[int]],
                chunk: int = 256) -> np.ndarray:
    out = [embed_batch(model, instruction_id, sequences[i: i + chunk]).data for i in range(0, len(sequences), chunk)]
    return np.concatenate(out, axis=0) if out else np.zeros((0, model.config.hidden_dim))


@contextmanager
def count_touches(model: ModelCheckpoint) -> Iterator[TouchCounter]:
    """Record every parameter read during forward passes inside the block."""
    counter = TouchCounter()
    model._touch = counter
    try:
        yield counter
    finally:
        model._touch = None


# ---------------------------------------------------------------------------
# upcycling and expert averaging


def upcycle(dense: ModelCheckpoint, num_experts: int, placement: str = "every_block",
            ff_kind: str = "mote") -> ModelCheckpoint:
    """Turn selected dense blocks into routed blocks whose experts copy the dense expert block.

    ``ff_kind="token_moe"`` additionally creates a learned gate per routed block
    (initialized from the config seed) for the token-routing baseline.
    """
    if dense.config.ff_kind != "dense":
        raise AlreadyRoutedError(f"model is already routed (ff_kind={dense.config.ff_kind})")
    if ff_kind not in ("mote", "token_moe"):
        raise ConfigError("ff_kind", f"cannot upcycle into {ff_kind!r}")
    cfg = replace(dense.config, ff_kind=ff_kind, num_experts=num_experts, placement=placement)
    src = dense.arrays()
    params = {}
    routed = set(cfg.routed_blocks())
    for path, shape in param_shapes(cfg).items():
        parts = path.split(".")
        if path.endswith(".ff.gate"):
            params[path] = _init_param(path, shape, cfg.seed)
        elif len(parts) > 4 and parts[2] == "ff" and parts[3] == "expert" and int(parts[1]) in routed:
            dense_path = ".".join(parts[:3] + parts[5:])
            params[path] = src[dense_path].copy()
        else:
            params[path] = src[path].copy()
    return ModelCheckpoint(cfg, params, dense.registry, dense.vocab)


def expert_average(mote: ModelCheckpoint) -> ModelCheckpoint:
    """Collapse every routed block to one expert block holding the element-wise mean."""
    if mote.config.ff_kind != "mote":
        raise AlreadyRoutedError(f"expert averaging needs a MoTE model, got ff_kind={mote.config.ff_kind}")
    cfg = replace(mote.config, ff_kind="dense")
    src = mote.arrays()
    E = mote.config.num_experts
    params = {}
    routed = set(mote.config.routed_blocks())
    for path in param_shapes(cfg):
        layer = int(path.split(".")[1]) if path.startswith("block.") else None
        if layer in routed and ".ff." in path:
            tail = path.split(".ff.", 1)[1]
            acc = np.zeros_like(src[f"{expert_prefix(layer, 0)}.{tail}"])
            for e in range(E):
                acc = acc + src[f"{expert_prefix(layer, e)}.{tail}"]
            params[path] = acc / E
        else:
            params[path] = src[path].copy()
    return ModelCheckpoint(cfg, params, mote.registry, mote.vocab)


# ---------------------------------------------------------------------------
# expert offloading


def _expert_paths(model: ModelCheckpoint, layer: int, expert: int) -> list[tuple[str, tuple[int, ...]]]:
    return _expert_shapes(expert_prefix(layer, expert), model.config)


def _all_experts(model: ModelCheckpoint) -> list[tuple[int, int]]:
    return [(layer, e) for layer in model.config.routed_blocks() for e in range(model.config.num_experts)]


def _expert_bytes(model: ModelCheckpoint, key: tuple[int, int]) -> int:
    return sum(int(np.prod(s)) * 8 for _, s in _expert_paths(model, *key))


def residency_state(model: ModelCheckpoint) -> ResidencyState:
    resident = frozenset(k for k in _all_experts(model) if k not in model._evicted)
    res_bytes = sum(_expert_bytes(model, k) for k in resident)
    ev_bytes = sum(_expert_bytes(model, k) for k in model._evicted)
    return ResidencyState(resident, ev_bytes, res_bytes)


def _reload(model: ModelCheckpoint, key: tuple[int, int]) -> None:
    section = model._evicted[key]
    try:
        restored = {path: read_array(section.payload, offset, shape, "f8") for path, shape, offset in section.entries}
    except (OSError, EOFError) as exc:
        raise ResidencyError(f"could not reload expert {key} from {section.payload}: {exc}") from exc
    for path, arr in restored.items():
        model.params[path] = Tensor(arr, name=path)
    del model._evicted[key]


def ensure_resident(model: ModelCheckpoint, expert: int) -> None:
    for key in [k for k in model._evicted if k[1] == expert]:
        _reload(model, key)


def load_all(model: ModelCheckpoint) -> None:
    for key in list(model._evicted):
        _reload(model, key)


def set_residency(model: ModelCheckpoint, active_task: str, spill_dir: str | Path | None = None) -> ResidencyState:
    """Keep only the active task's expert chain in memory; spill the rest losslessly.

    Spilled experts are written at 64-bit precision in the payload layout used
    by checkpoints, one manifest section per expert. On any I/O failure every
    expert is made resident again before the error propagates.
    """
    if model.config.ff_kind != "mote":
        raise ResidencyError("offloading applies to MoTE models only")
    active = route_sequence(model.registry, active_task)
    if spill_dir is not None:
        model._spill_dir = Path(spill_dir)
    elif model._spill_dir is None:
        model._spill_dir = Path(tempfile.mkdtemp(prefix="motelab-spill-"))
    ensure_resident(model, active)
    to_spill = [k for k in _all_experts(model) if k[1] != active and k not in model._evicted]
    if not to_spill:
        return residency_state(model)

    n = sum(1 for _ in model._spill_dir.glob("spill-*.bin")) if model._spill_dir.is_dir() else 0
    payload = model._spill_dir / f"spill-{n:04d}.bin"
    manifest = model._spill_dir / f"spill-{n:04d}.manifest"
    sections: dict[tuple[int, int], _SpillSection] = {}
    try:
        model._spill_dir.mkdir(parents=True, exist_ok=True)
        lines = ["motelab-spill 1", "dtype\tf8"]
        with open(payload, "wb") as fh:
            for key in to_spill:
                paths = _expert_paths(model, *key)
                offsets = write_arrays(fh, [model.params[p].data for p, _ in paths], "f8")
                entries = tuple((p, s, o) for (p, s), o in zip(paths, offsets))
                sections[key] = _SpillSection(payload, entries)
                lines.append(f"section\t{key[0]}\t{key[1]}")
                lines += [f"param\t{p}\t{'x'.join(map(str, s))}\t{o}" for p, s, o in entries]
            fh.flush()
        manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as exc:
        try:
            load_all(model)
        finally:
            raise ResidencyError(f"spilling experts to {model._spill_dir} failed: {exc}") from exc
    for key, section in sections.items():
        for path, _, _ in section.entries:
            del model.params[path]
        model._evicted[key] = section
    return residency_state(model)
