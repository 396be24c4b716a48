"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"EVLM" | u16 version | u32 n | config JSON (n bytes)
    | u32 m | index JSON (m bytes) | u64 k | k bytes of float64 LE | u32 crc32

The index is a JSON list of ``{"name", "shape", "offset"}`` entries with
offsets relative to the start of the float data. The CRC covers every
preceding byte.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np

from .adaptation import Classifier, ClassifierHead, PromptModel, SoftPrompt
from .errors import IntegrityError
from .model import Encoder, ModelConfig, parameter_shapes
from .tensor import Tensor

MAGIC = b"EVLM"
VERSION = 1
_F64 = np.dtype("<f8")


def atomic_write(path: str | Path, payload: bytes | str) -> None:
    """Write to a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = payload.encode("utf-8") if isinstance(payload, str) else payload
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_checkpoint(tensors: dict[str, np.ndarray], config: dict) -> bytes:
    cfg = json.dumps(config, sort_keys=True).encode("utf-8")
    index, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype=_F64)
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    idx = json.dumps(index).encode("utf-8")
    body = b"".join([MAGIC, struct.pack("<H", VERSION), struct.pack("<I", len(cfg)), cfg,
                     struct.pack("<I", len(idx)), idx, struct.pack("<Q", offset), *chunks])
    return body + struct.pack("<I", zlib.crc32(body))


def checkpoint_size(config_bytes: int, index_bytes: int, n_floats: int) -> int:
    return 4 + 2 + 4 + config_bytes + 4 + index_bytes + 8 + 8 * n_floats + 4


def decode_checkpoint(blob: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    pos = 0

    def take(n: int, field: str) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise IntegrityError(f"truncated checkpoint while reading {field} "
                                 f"(need {n} bytes at offset {pos}, file has {len(blob)})")
        out = blob[pos: pos + n]
        pos += n
        return out

    if take(4, "magic") != MAGIC:
        raise IntegrityError("bad magic: not an EVLM checkpoint")
    (version,) = struct.unpack("<H", take(2, "version"))
    if version != VERSION:
        raise IntegrityError(f"unsupported version {version} (expected {VERSION})")
    (n,) = struct.unpack("<I", take(4, "config length"))
    try:
        config = json.loads(take(n, "config").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"config blob is not valid JSON: {exc}") from exc
    (m,) = struct.unpack("<I", take(4, "index length"))
    try:
        index = json.loads(take(m, "index").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"index blob is not valid JSON: {exc}") from exc
    (k,) = struct.unpack("<Q", take(8, "data length"))
    data = take(k, "data")
    body_end = pos
    (crc,) = struct.unpack("<I", take(4, "crc32"))
    if pos != len(blob):
        raise IntegrityError(f"trailing bytes after crc32 ({len(blob) - pos})")
    if zlib.crc32(blob[:body_end]) != crc:
        raise IntegrityError("crc32 mismatch: checkpoint is corrupt")

    tensors, expect = {}, 0
    for entry in index:
        try:
            name, shape, offset = entry["name"], tuple(entry["shape"]), entry["offset"]
        except (KeyError, TypeError) as exc:
            raise IntegrityError(f"malformed index entry {entry!r}") from exc
        if offset != expect:
            raise IntegrityError(f"index entry {name!r}: offset {offset}, expected {expect}")
        nbytes = int(np.prod(shape, dtype=np.int64)) * 8
        tensors[name] = np.frombuffer(data, dtype=_F64, count=nbytes // 8, offset=offset
                                      ).reshape(shape).astype(np.float64)
        expect += nbytes
    if expect != k:
        raise IntegrityError(f"index covers {expect} bytes but data section has {k}")
    return config, tensors


def save_checkpoint(path: str | Path, tensors: dict[str, np.ndarray], config: dict) -> None:
    atomic_write(path, encode_checkpoint(tensors, config))


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    return decode_checkpoint(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# typed wrappers


def _expect_kind(config: dict, kind: str) -> None:
    if config.get("kind") != kind:
        raise IntegrityError(f"checkpoint kind is {config.get('kind')!r}, expected {kind!r}")


def _build_encoder(model_cfg: dict, tensors: dict[str, np.ndarray]) -> Encoder:
    try:
        cfg = ModelConfig(**model_cfg)
    except TypeError as exc:
        raise IntegrityError(f"model config: {exc}") from exc
    params = {}
    for name, shape in parameter_shapes(cfg):
        if name not in tensors:
            raise IntegrityError(f"missing parameter {name!r}")
        if tensors[name].shape != shape:
            raise IntegrityError(f"parameter {name!r}: shape {tensors[name].shape}, config says {shape}")
        params[name] = Tensor(tensors[name], requires_grad=True)
    return Encoder(cfg, params)


def save_encoder(encoder: Encoder, path: str | Path) -> None:
    save_checkpoint(path, {n: p.data for n, p in encoder.params.items()},
                    {"kind": "encoder", "model": encoder.config.to_dict()})


def load_encoder(path: str | Path) -> Encoder:
    config, tensors = load_checkpoint(path)
    _expect_kind(config, "encoder")
    extra = set(tensors) - {n for n, _ in parameter_shapes(ModelConfig(**config["model"]))}
    if extra:
        raise IntegrityError(f"unexpected tensors {sorted(extra)}")
    return _build_encoder(config["model"], tensors)


def save_classifier(model: Classifier, path: str | Path) -> None:
    tensors = {n: p.data for n, p in model.encoder.params.items()}
    tensors["head.weight"] = model.head.weight.data
    tensors["head.bias"] = model.head.bias.data
    save_checkpoint(path, tensors, {"kind": "classifier", "model": model.encoder.config.to_dict(),
                                    "normalize_embeddings": model.normalize_embeddings})


def load_classifier(path: str | Path) -> Classifier:
    config, tensors = load_checkpoint(path)
    _expect_kind(config, "classifier")
    head = _load_head(tensors)
    return Classifier(_build_encoder(config["model"], tensors), head,
                      bool(config.get("normalize_embeddings", False)))


def _load_head(tensors: dict[str, np.ndarray]) -> ClassifierHead:
    try:
        w, b = tensors.pop("head.weight"), tensors.pop("head.bias")
    except KeyError as exc:
        raise IntegrityError(f"missing head tensor {exc}") from exc
    if w.ndim != 2 or b.shape != (w.shape[1],):
        raise IntegrityError(f"head shapes inconsistent: {w.shape}, {b.shape}")
    return ClassifierHead(Tensor(w, True), Tensor(b, True))


def save_prompt(model: PromptModel, path: str | Path) -> None:
    save_checkpoint(path, {"prompt": model.prompt.vectors.data, "head.weight": model.head.weight.data,
                           "head.bias": model.head.bias.data},
                    {"kind": "prompt", "task_name": model.prompt.task_name})


def load_prompt(path: str | Path) -> PromptModel:
    config, tensors = load_checkpoint(path)
    _expect_kind(config, "prompt")
    if "prompt" not in tensors:
        raise IntegrityError("missing tensor 'prompt'")
    head = _load_head(tensors)
    prompt = tensors["prompt"]
    if prompt.ndim != 2 or prompt.shape[1] != head.weight.shape[0]:
        raise IntegrityError(f"prompt shape {prompt.shape} does not match head {head.weight.shape}")
    return PromptModel(SoftPrompt(Tensor(prompt, True), config.get("task_name", "task")), head)
