"""Checkpoint directories: ``manifest.txt`` (UTF-8, tab-separated) plus ``params.bin``.

Manifest lines, in order::

    motelab-checkpoint <TAB> <version>
    dtype <TAB> f4
    config <TAB> <field> <TAB> <value>            one per EncoderConfig field
    task <TAB> <id> <TAB> <json prefix> <TAB> <expert> <TAB> <batching> <TAB> <temperature>
    pairing <TAB> <task> <TAB> <anchor instruction> <TAB> <positive instruction>
    token <TAB> <json token>                      vocabulary, id order
    param <TAB> <path> <TAB> <d0>x<d1>... <TAB> <byte offset>
    payload_bytes <TAB> <n>

The payload holds little-endian IEEE-754 float32 values in manifest order.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .data import Vocabulary
from .model import ConfigError, EncoderConfig, ModelCheckpoint, param_shapes
from .payload import DTYPES, encode_array
from .routing import RegistryError, TaskEntry, TaskRegistry

FORMAT_NAME = "motelab-checkpoint"
FORMAT_VERSION = 1
MANIFEST = "manifest.txt"
PAYLOAD = "params.bin"


class CheckpointError(Exception):
    pass


class ManifestError(CheckpointError):
    pass


class LengthMismatchError(CheckpointError):
    pass


class FormatVersionError(CheckpointError):
    pass


def _fmt_shape(shape) -> str:
    return "x".join(str(n) for n in shape)


def manifest_text(model: ModelCheckpoint, shapes: dict[str, tuple[int, ...]] | None = None) -> str:
    shapes = shapes or param_shapes(model.config)
    lines = [f"{FORMAT_NAME}\t{FORMAT_VERSION}", "dtype\tf4"]
    for key, value in model.config.to_dict().items():
        lines.append(f"config\t{key}\t{value}")
    for task_id, e in model.registry.entries.items():
        lines.append(f"task\t{task_id}\t{json.dumps(e.prefix)}\t{e.expert_index}\t{e.batching}\t{e.temperature!r}")
    for task, (a, p) in model.registry.pairings.items():
        lines.append(f"pairing\t{task}\t{a}\t{p}")
    for token in model.vocab.id_to_token:
        lines.append(f"token\t{json.dumps(token)}")
    offset = 0
    for path, shape in shapes.items():
        lines.append(f"param\t{path}\t{_fmt_shape(shape)}\t{offset}")
        offset += int(np.prod(shape)) * 4
    lines.append(f"payload_bytes\t{offset}")
    return "\n".join(lines) + "\n"


def save_checkpoint(model: ModelCheckpoint, path: str | Path) -> Path:
    """Write atomically-ish: payload first, manifest last."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    arrays = model.arrays()
    payload = b"".join(encode_array(arrays[p], "f4") for p in param_shapes(model.config))
    tmp_payload = out / (PAYLOAD + ".tmp")
    tmp_manifest = out / (MANIFEST + ".tmp")
    tmp_payload.write_bytes(payload)
    tmp_manifest.write_text(manifest_text(model), encoding="utf-8", newline="\n")
    os.replace(tmp_payload, out / PAYLOAD)
    os.replace(tmp_manifest, out / MANIFEST)
    return out


def _parse_manifest(text: str):
    lines = text.splitlines()
    if not lines:
        raise ManifestError("empty manifest")
    head = lines[0].split("\t")
    if len(head) != 2 or head[0] != FORMAT_NAME:
        raise ManifestError(f"not a {FORMAT_NAME} manifest")
    try:
        version = int(head[1])
    except ValueError:
        raise ManifestError(f"bad format version {head[1]!r}") from None
    if version != FORMAT_VERSION:
        raise FormatVersionError(f"unsupported checkpoint format version {version} (expected {FORMAT_VERSION})")

    config, entries, pairings, tokens, params = {}, {}, {}, [], []
    dtype, payload_bytes = None, None
    for lineno, line in enumerate(lines[1:], start=2):
        f = line.split("\t")
        try:
            kind = f[0]
            if kind == "dtype" and len(f) == 2:
                dtype = f[1]
            elif kind == "config" and len(f) == 3:
                config[f[1]] = f[2]
            elif kind == "task" and len(f) == 6:
                entries[f[1]] = TaskEntry(json.loads(f[2]), int(f[3]), f[4], float(f[5]))
            elif kind == "pairing" and len(f) == 4:
                pairings[f[1]] = (f[2], f[3])
            elif kind == "token" and len(f) == 2:
                tokens.append(json.loads(f[1]))
            elif kind == "param" and len(f) == 4:
                shape = tuple(int(n) for n in f[2].split("x")) if f[2] else ()
                params.append((f[1], shape, int(f[3])))
            elif kind == "payload_bytes" and len(f) == 2:
                payload_bytes = int(f[1])
            else:
                raise ValueError("unrecognized record")
        except (ValueError, json.JSONDecodeError) as exc:
            raise ManifestError(f"manifest line {lineno}: {exc}") from None
    if dtype not in DTYPES:
        raise ManifestError(f"unknown payload dtype {dtype!r}")
    if payload_bytes is None:
        raise ManifestError("manifest lacks payload_bytes")
    try:
        cfg = EncoderConfig.from_dict(config)
        registry = TaskRegistry(entries, pairings)
        vocab = Vocabulary.from_tokens(tokens)
    except (ConfigError, RegistryError, TypeError, ValueError) as exc:
        raise ManifestError(f"invalid manifest contents: {exc}") from None
    return cfg, registry, vocab, dtype, params, payload_bytes


def load_checkpoint(path: str | Path) -> ModelCheckpoint:
    root = Path(path)
    try:
        text = (root / MANIFEST).read_text(encoding="utf-8")
    except UnicodeDecodeError:
        raise ManifestError("manifest is not valid UTF-8") from None
    cfg, registry, vocab, dtype, params, payload_bytes = _parse_manifest(text)

    expected = param_shapes(cfg)
    listed = [p for p, _, _ in params]
    if listed != list(expected):
        missing = sorted(set(expected) - set(listed))
        orphans = sorted(set(listed) - set(expected))
        raise ManifestError(f"parameter paths do not match the config (missing {missing[:3]}, orphan {orphans[:3]})")
    itemsize = DTYPES[dtype].itemsize
    offset = 0
    for p, shape, off in params:
        if shape != expected[p]:
            raise ManifestError(f"{p}: manifest shape {shape} does not match config shape {expected[p]}")
        if off != offset:
            raise ManifestError(f"{p}: byte offset {off}, expected {offset}")
        offset += int(np.prod(shape)) * itemsize
    if offset != payload_bytes:
        raise ManifestError(f"payload_bytes {payload_bytes} disagrees with parameter table ({offset})")

    raw = (root / PAYLOAD).read_bytes()
    if len(raw) != payload_bytes:
        raise LengthMismatchError(f"payload has {len(raw)} bytes, manifest expects {payload_bytes}")
    flat = np.frombuffer(raw, dtype=DTYPES[dtype]).astype(np.float64)
    arrays = {}
    for p, shape, off in params:
        start = off // itemsize
        arrays[p] = flat[start: start + int(np.prod(shape))].reshape(shape).copy()
    return ModelCheckpoint(cfg, arrays, registry, vocab)


def expert_blocks_in_manifest(path: str | Path) -> list[int]:
    """Block indices whose feed-forward holds more than one expert, read from the manifest only."""
    blocks = set()
    for line in (Path(path) / MANIFEST).read_text(encoding="utf-8").splitlines():
        f = line.split("\t")
        if f[0] == "param" and ".ff.expert." in f[1]:
            blocks.add(int(f[1].split(".")[1]))
    return sorted(blocks)
