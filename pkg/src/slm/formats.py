"""On-disk formats: the binary ``.slmc`` tensor checkpoint, line-delimited
corpus files, metrics logs and run-directory layout.

Checkpoint layout (all integers little-endian)::

    b"SLMC" | version u16 | fingerprint 32B | record count u32
    per record: name length u32 | name utf-8 | dtype u8 (0=f32, 1=f64)
                | rank u8 | extents u64 * rank | trainable u8 | payload
"""

from __future__ import annotations

import io
import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .params import AdamState, ParameterStore
from .tasks import TaskExample, World, speechify

MAGIC = b"SLMC"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAGS = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class CheckpointError(ValueError):
    pass


@dataclass
class Record:
    name: str
    data: np.ndarray
    trainable: bool = False


def encode_checkpoint(records: Sequence[Record], fingerprint: bytes) -> bytes:
    if len(fingerprint) != 32:
        fingerprint = fingerprint.ljust(32, b"\0")[:32]
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<H", VERSION))
    buf.write(fingerprint)
    buf.write(struct.pack("<I", len(records)))
    for r in records:
        data = np.asarray(r.data)
        if data.dtype not in _TAGS:
            raise CheckpointError(f"{r.name}: unsupported dtype {data.dtype}")
        name = r.name.encode()
        buf.write(struct.pack("<I", len(name)))
        buf.write(name)
        buf.write(struct.pack("<BB", _TAGS[data.dtype], data.ndim))
        buf.write(struct.pack(f"<{data.ndim}Q", *data.shape))
        buf.write(struct.pack("<B", int(bool(r.trainable))))
        buf.write(np.ascontiguousarray(data, dtype=_DTYPES[_TAGS[data.dtype]]).tobytes())
    return buf.getvalue()


def decode_checkpoint(blob: bytes) -> tuple[bytes, list[Record]]:
    view = memoryview(blob)
    if bytes(view[:4]) != MAGIC:
        raise CheckpointError("not an SLMC checkpoint (bad magic)")
    (version,) = struct.unpack_from("<H", view, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    fingerprint = bytes(view[6:38])
    (count,) = struct.unpack_from("<I", view, 38)
    pos = 42
    records = []
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", view, pos)
            pos += 4
            name = bytes(view[pos:pos + n]).decode()
            pos += n
            tag, rank = struct.unpack_from("<BB", view, pos)
            pos += 2
            shape = struct.unpack_from(f"<{rank}Q", view, pos)
            pos += 8 * rank
            (trainable,) = struct.unpack_from("<B", view, pos)
            pos += 1
            dtype = _DTYPES[tag]
            size = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            if pos + size > len(view):
                raise CheckpointError(f"record {name!r} truncated")
            data = np.frombuffer(view[pos:pos + size], dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
            pos += size
            records.append(Record(name, data, bool(trainable)))
    except (struct.error, KeyError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
    if pos != len(view):
        raise CheckpointError("trailing bytes after last record")
    return fingerprint, records


def write_bytes(path: str | Path, blob: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)


def save_checkpoint(path, records: Sequence[Record], fingerprint: bytes) -> None:
    write_bytes(path, encode_checkpoint(records, fingerprint))


def load_checkpoint(path, expected_fingerprint: bytes | None = None) -> tuple[bytes, list[Record]]:
    fingerprint, records = decode_checkpoint(Path(path).read_bytes())
    if expected_fingerprint is not None and fingerprint != expected_fingerprint.ljust(32, b"\0")[:32]:
        raise CheckpointError(f"{path}: config fingerprint mismatch (checkpoint {fingerprint.hex()[:12]}…, "
                              f"config {expected_fingerprint.hex()[:12]}…)")
    return fingerprint, records


# ---------------------------------------------------------------- store <-> records


def store_records(store: ParameterStore) -> list[Record]:
    return [Record(name, t.data, t.requires_grad) for name, t in store.items()]


def optimizer_records(state: AdamState) -> list[Record]:
    out = [Record("optim.step", np.asarray(float(state.step)))]
    for name in state.m:
        out.append(Record(f"optim.m.{name}", state.m[name]))
        out.append(Record(f"optim.v.{name}", state.v[name]))
    return out


def split_records(records: Iterable[Record]) -> tuple[dict[str, Record], AdamState | None, dict[str, np.ndarray]]:
    """Separate parameter records, optimizer state and ``meta.*`` arrays."""
    params, meta = {}, {}
    state = None
    for r in records:
        if r.name == "optim.step":
            state = state or AdamState()
            state.step = int(r.data)
        elif r.name.startswith("optim.m."):
            state = state or AdamState()
            state.m[r.name[8:]] = r.data.copy()
        elif r.name.startswith("optim.v."):
            state = state or AdamState()
            state.v[r.name[8:]] = r.data.copy()
        elif r.name.startswith("meta."):
            meta[r.name[5:]] = r.data
        else:
            params[r.name] = r
    return params, state, meta


def load_into(store: ParameterStore, params: dict[str, Record], prefix: str = "", strict: bool = True) -> None:
    """Copy record values and trainability flags into matching store tensors."""
    wanted = [n for n in store.names() if n.startswith(prefix)]
    missing = [n for n in wanted if n not in params]
    if strict and missing:
        raise CheckpointError(f"checkpoint lacks tensors: {missing[:3]}")
    for name in wanted:
        if name not in params:
            continue
        rec, t = params[name], store[name]
        if rec.data.shape != t.data.shape:
            raise CheckpointError(f"{name}: shape {rec.data.shape} != model {t.data.shape}")
        t.data = rec.data.astype(t.data.dtype, copy=True)
        t.requires_grad = rec.trainable


# ---------------------------------------------------------------- corpus files


def example_to_json(ex: TaskExample, inline: bool = False) -> str:
    rec = {"task": ex.task, "family": ex.family, "instruction": list(ex.instruction)}
    if inline:
        rec["speech"] = {"frames": ex.speech.tolist()}
    else:
        rec["speech"] = {"seed": ex.seed, "tokens": list(ex.spoken)}
    rec["target"] = list(ex.target)
    return json.dumps(rec, separators=(",", ":"))


def example_from_json(line: str, world: World) -> TaskExample:
    rec = json.loads(line)
    speech = rec["speech"]
    if "frames" in speech:
        frames = np.asarray(speech["frames"], dtype=np.float64)
        spoken, seed = (), 0
    else:
        spoken, seed = tuple(speech["tokens"]), int(speech["seed"])
        frames = speechify(spoken, world.speechifier, seed)
    return TaskExample(rec["task"], tuple(rec["instruction"]), frames, tuple(rec["target"]),
                       rec.get("family", ""), spoken, seed)


def write_corpus(path, examples: Sequence[TaskExample], inline: bool = False) -> None:
    text = "".join(example_to_json(ex, inline) + "\n" for ex in examples)
    write_bytes(path, text.encode())


def read_corpus(path, world: World) -> list[TaskExample]:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if line.strip():
            try:
                out.append(example_from_json(line, world))
            except (ValueError, KeyError) as exc:
                raise ValueError(f"{path}:{lineno}: bad corpus record ({exc})") from exc
    return out


def world_to_json(world: World) -> str:
    return json.dumps({
        "seed": world.seed,
        "prototypes": world.speechifier.prototypes.tolist(),
        "min_frames": world.speechifier.min_frames,
        "max_frames": world.speechifier.max_frames,
        "noise_std": world.speechifier.noise_std,
        "cipher": world.cipher.tolist(),
        "facts": [[list(k), v] for k, v in world.facts.items()],
        "carriers": [list(c) for c in world.carriers],
    }, indent=1)


# ---------------------------------------------------------------- metrics log


def format_metrics_line(step: int, loss: float | None = None, **extra) -> str:
    parts = [f"step={step}"]
    if loss is not None:
        parts.append(f"loss={loss!r}")
    parts += [f"{k}={v!r}" if isinstance(v, float) else f"{k}={v}" for k, v in extra.items()]
    return " ".join(parts)


def parse_metrics_line(line: str) -> dict[str, float | int | str]:
    out: dict[str, float | int | str] = {}
    for part in line.split():
        k, v = part.split("=", 1)
        try:
            out[k] = int(v)
        except ValueError:
            try:
                out[k] = float(v)
            except ValueError:
                out[k] = v
    return out
