"""Binary persistence of the learned experience (prompts and both prototype banks).

Layout, all little-endian::

    "ONER"  u32 version
    chunk*  u32 tag, u64 payload length, payload
    u32     CRC32 of every preceding byte

CONFIG holds the run configuration as UTF-8 JSON plus the task counter.
The numeric chunks store f32 values; backbone weights are not stored, they
are regenerated from the seed in the configuration.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np

from .backbone import ConfigError, FeatureBundle, init_backbone
from .config import RunConfig
from .numerics import Tensor
from .pipeline import EngineState
from .prompt_bank import PromptBank, PromptComponent
from .prototypes import ImagePrototypeBank, PixelPrototypeBank

MAGIC = b"ONER"
VERSION = 1

TAG_CONFIG = 1
TAG_PROMPTS = 2
TAG_IMGBANK = 3
TAG_PIXBANK = 4
TAG_FEATS = 5
TAG_NAMES = {TAG_CONFIG: "CONFIG", TAG_PROMPTS: "PROMPTS", TAG_IMGBANK: "IMGBANK",
             TAG_PIXBANK: "PIXBANK", TAG_FEATS: "FEATS"}
REQUIRED = (TAG_CONFIG, TAG_PROMPTS, TAG_IMGBANK, TAG_PIXBANK)

_CHUNK_HEAD = struct.Struct("<IQ")


class ExperienceFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.reason = message
        self.offset = offset


def task_payload_bytes(n_select: int, dim: int) -> int:
    """Bytes one task adds across IMGBANK and PIXBANK: values plus two u32 task ids."""
    return (1 + n_select) * dim * 4 + 2 * 4


def _f32(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def _encode_config(state: EngineState) -> bytes:
    doc = {"config": state.config.to_dict(), "t": state.t}
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _encode_prompts(bank: PromptBank) -> bytes:
    out = [struct.pack("<IIIII", len(bank.components), bank.prompt_length, bank.dim,
                       bank.per_task, bank.num_tasks)]
    for c in bank.components:
        out.append(struct.pack("<II", c.owner_task, int(c.frozen)))
        out.append(_f32(c.query.data) + _f32(c.key.data) + _f32(c.value.data))
    return b"".join(out)


def _encode_image_bank(bank: ImagePrototypeBank) -> bytes:
    dim = bank.entries[0][1].size if bank.entries else 0
    out = [struct.pack("<II", len(bank), dim)]
    for task, vec in bank.entries:
        out.append(struct.pack("<I", task) + _f32(vec))
    return b"".join(out)


def _encode_pixel_bank(bank: PixelPrototypeBank) -> bytes:
    rows, dim = bank.entries[0][1].shape if bank.entries else (0, 0)
    out = [struct.pack("<III", len(bank), rows, dim)]
    for task, block in bank.entries:
        out.append(struct.pack("<I", task) + _f32(block))
    return b"".join(out)


def _encode_feats(feats: dict) -> bytes:
    items = sorted(feats.items())
    n_p, dim = items[0][1].patches.shape
    out = [struct.pack("<III", len(items), n_p, dim)]
    for sample_id, bundle in items:
        raw = sample_id.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(_f32(bundle.image) + _f32(bundle.patches))
    return b"".join(out)


def dumps_experience(state: EngineState) -> bytes:
    chunks = [(TAG_CONFIG, _encode_config(state)),
              (TAG_PROMPTS, _encode_prompts(state.prompts)),
              (TAG_IMGBANK, _encode_image_bank(state.image_bank)),
              (TAG_PIXBANK, _encode_pixel_bank(state.pixel_bank))]
    if state.imported_features:
        chunks.append((TAG_FEATS, _encode_feats(state.imported_features)))
    body = [MAGIC, struct.pack("<I", VERSION)]
    for tag, payload in chunks:
        body.append(_CHUNK_HEAD.pack(tag, len(payload)))
        body.append(payload)
    data = b"".join(body)
    return data + struct.pack("<I", zlib.crc32(data))


def save_experience(state: EngineState, path) -> Path:
    """Write atomically: a temp file in the target directory, then rename."""
    path = Path(path)
    data = dumps_experience(state)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


class _Reader:
    """Bounds-checked cursor; every failure names the absolute file offset."""

    def __init__(self, buf: bytes, base: int, what: str):
        self.buf, self.base, self.pos, self.what = buf, base, 0, what

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise ExperienceFormatError(f"truncated {self.what} payload", self.base + self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct("<" + fmt)
        return s.unpack(self.take(s.size))

    def floats(self, count: int, shape) -> np.ndarray:
        raw = self.take(4 * count)
        arr = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(shape)
        if not np.isfinite(arr).all():
            raise ExperienceFormatError(f"non-finite value in {self.what}", self.base + self.pos)
        return arr

    def done(self) -> None:
        if self.pos != len(self.buf):
            raise ExperienceFormatError(f"trailing bytes in {self.what} payload",
                                        self.base + self.pos)


def _decode_config(r: _Reader) -> tuple[RunConfig, int]:
    try:
        doc = json.loads(r.take(len(r.buf)).decode("utf-8"))
        cfg = RunConfig.from_dict(doc["config"])
        t = int(doc["t"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ExperienceFormatError(f"unreadable CONFIG chunk: {exc}", r.base) from exc
    if t < 0:
        raise ExperienceFormatError("negative task counter", r.base)
    return cfg, t


def _decode_prompts(r: _Reader, cfg: RunConfig) -> PromptBank:
    m, lp, dim, per_task, num_tasks = r.unpack("IIIII")
    if dim != cfg.backbone.dim or lp != cfg.train.prompt_length or per_task != cfg.train.per_task:
        raise ExperienceFormatError("PROMPTS shape disagrees with CONFIG", r.base)
    comps = []
    for _ in range(m):
        owner, frozen = r.unpack("II")
        q = r.floats(dim, (dim,))
        k = r.floats(dim, (dim,))
        v = r.floats(lp * dim, (lp, dim))
        trainable = not frozen
        comps.append(PromptComponent(query=Tensor(q, requires_grad=trainable),
                                     key=Tensor(k, requires_grad=trainable),
                                     value=Tensor(v, requires_grad=trainable),
                                     owner_task=owner, frozen=bool(frozen)))
    r.done()
    return PromptBank(dim=dim, prompt_length=lp, per_task=per_task,
                      components=comps, num_tasks=num_tasks)


def _decode_image_bank(r: _Reader, cfg: RunConfig) -> ImagePrototypeBank:
    n, dim = r.unpack("II")
    if n and dim != cfg.backbone.dim:
        raise ExperienceFormatError("IMGBANK dimension disagrees with CONFIG", r.base)
    bank = ImagePrototypeBank()
    for _ in range(n):
        at = r.base + r.pos
        (task,) = r.unpack("I")
        vec = r.floats(dim, (dim,))
        try:
            bank.integrate(task, vec, atol=1e-5)
        except ValueError as exc:
            raise ExperienceFormatError(f"invalid image prototype: {exc}", at) from exc
    r.done()
    return bank


def _decode_pixel_bank(r: _Reader, cfg: RunConfig) -> PixelPrototypeBank:
    n, rows, dim = r.unpack("III")
    if n and dim != cfg.backbone.dim:
        raise ExperienceFormatError("PIXBANK dimension disagrees with CONFIG", r.base)
    bank = PixelPrototypeBank()
    for _ in range(n):
        at = r.base + r.pos
        (task,) = r.unpack("I")
        block = r.floats(rows * dim, (rows, dim))
        try:
            bank.integrate(task, block)
        except ValueError as exc:
            raise ExperienceFormatError(f"invalid pixel prototypes: {exc}", at) from exc
    r.done()
    return bank


def _decode_feats(r: _Reader) -> dict:
    n, n_p, dim = r.unpack("III")
    feats = {}
    for _ in range(n):
        at = r.base + r.pos
        (length,) = r.unpack("H")
        try:
            sample_id = r.take(length).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ExperienceFormatError("sample id is not UTF-8", at) from exc
        image = r.floats(dim, (1, dim))
        patches = r.floats(n_p * dim, (n_p, dim))
        feats[sample_id] = FeatureBundle(image=image, patches=patches)
    r.done()
    return feats


def loads_experience(data: bytes) -> EngineState:
    data = bytes(data)
    if len(data) < 8:
        raise ExperienceFormatError("truncated header", len(data))
    if data[:4] != MAGIC:
        raise ExperienceFormatError("bad magic", 0)
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise ExperienceFormatError(f"unsupported version {version}", 4)
    if len(data) < 12:
        raise ExperienceFormatError("missing CRC32 trailer", len(data))
    end = len(data) - 4

    chunks: dict[int, tuple[int, bytes]] = {}
    pos = 8
    while pos < end:
        if pos + _CHUNK_HEAD.size > end:
            raise ExperienceFormatError("truncated chunk header", pos)
        tag, length = _CHUNK_HEAD.unpack_from(data, pos)
        start = pos + _CHUNK_HEAD.size
        if tag not in TAG_NAMES:
            raise ExperienceFormatError(f"unknown chunk tag {tag}", pos)
        if tag in chunks:
            raise ExperienceFormatError(f"duplicate {TAG_NAMES[tag]} chunk", pos)
        if length > end - start:
            raise ExperienceFormatError(f"truncated {TAG_NAMES[tag]} chunk", pos)
        chunks[tag] = (start, data[start:start + length])
        pos = start + length

    (stored,) = struct.unpack_from("<I", data, end)
    if zlib.crc32(data[:end]) != stored:
        raise ExperienceFormatError("CRC32 mismatch", end)
    for tag in REQUIRED:
        if tag not in chunks:
            raise ExperienceFormatError(f"missing {TAG_NAMES[tag]} chunk", end)

    def reader(tag):
        start, payload = chunks[tag]
        return _Reader(payload, start, TAG_NAMES[tag])

    cfg, t = _decode_config(reader(TAG_CONFIG))
    prompts = _decode_prompts(reader(TAG_PROMPTS), cfg)
    image_bank = _decode_image_bank(reader(TAG_IMGBANK), cfg)
    pixel_bank = _decode_pixel_bank(reader(TAG_PIXBANK), cfg)
    feats = _decode_feats(reader(TAG_FEATS)) if TAG_FEATS in chunks else {}
    try:
        backbone = init_backbone(cfg.backbone)
    except ConfigError as exc:
        raise ExperienceFormatError(f"invalid backbone config: {exc}", chunks[TAG_CONFIG][0]) from exc
    state = EngineState(config=cfg, backbone=backbone, prompts=prompts,
                        image_bank=image_bank, pixel_bank=pixel_bank, t=t,
                        imported_features=feats)
    try:
        state.check()
    except ValueError as exc:
        raise ExperienceFormatError(f"inconsistent experience: {exc}", end) from exc
    return state


def load_experience(path) -> EngineState:
    path = Path(path)
    try:
        data = path.read_bytes()
    except FileNotFoundError as exc:
        raise ExperienceFormatError(f"no such file: {path}", 0) from exc
    return loads_experience(data)


def quantize_state(state: EngineState) -> EngineState:
    """Round-trip through the binary format; the f32 view of ``state``."""
    return loads_experience(dumps_experience(state))
