"""Binary checkpoint files.

Layout (all integers unsigned 32-bit little-endian)::

    b"RFNW" | version | entry count
    per entry: name length | UTF-8 name | rank | dims... | float32 LE data
    trailer:   block length | UTF-8 "key = value" lines

The trailer holds the run configuration plus ``state.*`` lines for the
iteration counter, the optimizer step counts and batch-norm tracking flags.
"""
from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path
from typing import Optional

import numpy as np

from .config import ConfigError, RunConfig
from .training import TrainState

MAGIC = b"RFNW"
VERSION = 1


class CheckpointError(ValueError):
    """A checkpoint file that cannot be read or does not fit the model."""


def _entries(state: TrainState) -> list[tuple[str, np.ndarray]]:
    out = [(p.name, p.data) for p in state.parameters()]
    for i, bn in enumerate(state.descriptor.bn_states, start=1):
        out.append((f"des.bn{i}.running_mean", bn.running_mean))
        out.append((f"des.bn{i}.running_var", bn.running_var))
    for group, opt, params in (
        ("det", state.det_opt, state.detector.parameters()),
        ("des", state.des_opt, state.descriptor.parameters()),
    ):
        for p in params:
            if p.name in opt.m:
                out.append((f"adam.{group}.m.{p.name}", opt.m[p.name]))
                out.append((f"adam.{group}.v.{p.name}", opt.v[p.name]))
    return out


def _trailer(state: TrainState) -> str:
    tracked = ",".join("1" if bn.tracked else "0" for bn in state.descriptor.bn_states)
    return state.config.to_text() + (
        f"state.iteration = {state.iteration}\n"
        f"state.det_adam_t = {state.det_opt.t}\n"
        f"state.des_adam_t = {state.des_opt.t}\n"
        f"state.bn_tracked = {tracked}\n"
    )


def encode_checkpoint(state: TrainState) -> bytes:
    entries = _entries(state)
    parts = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, arr in entries:
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    block = _trailer(state).encode("utf-8")
    parts.append(struct.pack("<I", len(block)) + block)
    return b"".join(parts)


def atomic_write(path, data: bytes) -> None:
    """Write to a sibling temp file, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(state: TrainState, path) -> None:
    atomic_write(path, encode_checkpoint(state))


class _Reader:
    def __init__(self, data: bytes, source: str):
        self.data, self.pos, self.source = data, 0, source

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(
                f"{self.source}: truncated file while reading {what} "
                f"(need {n} bytes at offset {self.pos}, file has {len(self.data)})"
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def decode_checkpoint(data: bytes, source: str = "<checkpoint>") -> tuple[dict[str, np.ndarray], str]:
    """Raw contents: ordered name -> float32 array mapping and the trailer text."""
    r = _Reader(data, source)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise CheckpointError(f"{source}: bad magic {magic!r}, expected {MAGIC!r}")
    version = r.u32("version")
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported checkpoint version {version} (this build reads {VERSION})")
    count = r.u32("entry count")
    entries: dict[str, np.ndarray] = {}
    for i in range(count):
        name_len = r.u32(f"entry {i} name length")
        try:
            name = r.take(name_len, f"entry {i} name").decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError(f"{source}: entry {i} name is not valid UTF-8") from None
        rank = r.u32(f"{name} rank")
        if rank > 8:
            raise CheckpointError(f"{source}: {name} has implausible rank {rank}")
        dims = tuple(r.u32(f"{name} dims") for _ in range(rank))
        n = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(r.take(4 * n, f"{name} data"), dtype="<f4").astype(np.float32).reshape(dims)
        if name in entries:
            raise CheckpointError(f"{source}: duplicate entry {name!r}")
        entries[name] = arr
    block_len = r.u32("config block length")
    text = r.take(block_len, "config block").decode("utf-8")
    if r.pos != len(data):
        raise CheckpointError(f"{source}: {len(data) - r.pos} trailing bytes after the config block")
    return entries, text


def _split_trailer(text: str) -> tuple[str, dict[str, str]]:
    config_lines, extra = [], {}
    for line in text.splitlines():
        if line.startswith("state."):
            key, _, value = line.partition("=")
            extra[key.strip()[len("state.") :]] = value.strip()
        else:
            config_lines.append(line)
    return "\n".join(config_lines) + "\n", extra


def load_checkpoint(path, config: Optional[RunConfig] = None) -> TrainState:
    """Rebuild a TrainState; ``config`` overrides the stored snapshot's architecture."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: {exc.strerror}") from None
    entries, text = decode_checkpoint(data, str(path))
    config_text, extra = _split_trailer(text)
    if config is None:
        try:
            config = RunConfig.from_text(config_text, f"{path} (config block)")
        except ConfigError as exc:
            raise CheckpointError(str(exc)) from None
    state = TrainState.create(config)

    expected = dict(_entries(state))
    params = {p.name: p for p in state.parameters()}
    for name, arr in entries.items():
        if name.startswith("adam."):
            _, group, which, pname = name.split(".", 3)
            if pname not in params:
                raise CheckpointError(f"{path}: unknown parameter name {pname!r} in optimizer entry {name!r}")
            if arr.shape != params[pname].shape:
                raise CheckpointError(
                    f"{path}: tensor {name!r} has shape {arr.shape}, model expects {params[pname].shape}"
                )
            opt = state.det_opt if group == "det" else state.des_opt
            getattr(opt, which)[pname] = arr.copy()
            continue
        if name not in expected:
            raise CheckpointError(f"{path}: unknown parameter name {name!r}")
        if arr.shape != np.shape(expected[name]):
            raise CheckpointError(
                f"{path}: tensor {name!r} has shape {arr.shape}, model expects {np.shape(expected[name])}"
            )
    missing = [n for n in expected if n not in entries]
    if missing:
        raise CheckpointError(f"{path}: checkpoint lacks tensor {missing[0]!r}")

    for name, p in params.items():
        p.data = entries[name].copy()
    for i, bn in enumerate(state.descriptor.bn_states, start=1):
        bn.running_mean = entries[f"des.bn{i}.running_mean"].copy()
        bn.running_var = entries[f"des.bn{i}.running_var"].copy()
    try:
        state.iteration = int(extra.get("iteration", 0))
        state.det_opt.t = int(extra.get("det_adam_t", 0))
        state.des_opt.t = int(extra.get("des_adam_t", 0))
        flags = [f for f in extra.get("bn_tracked", "").split(",") if f]
    except ValueError as exc:
        raise CheckpointError(f"{path}: bad state line: {exc}") from None
    if flags and len(flags) != len(state.descriptor.bn_states):
        raise CheckpointError(f"{path}: {len(flags)} batch-norm flags for {len(state.descriptor.bn_states)} layers")
    for bn, flag in zip(state.descriptor.bn_states, flags):
        bn.tracked = flag == "1"
    return state
