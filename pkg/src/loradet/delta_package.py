"""Binary tensor archives, trainable-delta packages and onboard merging.

Layout (all integers little-endian)::

    "LDET" | version u16 | entry count u32 |
    entries { name_len u16 | name | role u8 | dtype u8 | ndim u8 |
              dims u32 * ndim | float32 payload | entry CRC32 u32 } |
    file CRC32 u32

Each entry CRC covers the entry's bytes from ``name_len`` through the
payload; the file CRC covers everything before it.
"""

from __future__ import annotations

import enum
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .detector import DetectorModel
from .errors import ArgumentError, IntegrityError, MergeError, ShapeError, StateError
from .policy import apply_policy

MAGIC = b"LDET"
VERSION = 1
DTYPE_F32 = 0
_HEADER = struct.Struct("<4sHI")
_CRC = struct.Struct("<I")


class Role(enum.IntEnum):
    BASE = 0
    LORA_A = 1
    LORA_B = 2
    FULL_REPLACE = 3


@dataclass(frozen=True)
class Entry:
    name: str
    role: Role
    data: np.ndarray  # float32

    @property
    def base_name(self) -> str:
        """The tensor an adapter factor modifies; other roles name themselves."""
        if self.role in (Role.LORA_A, Role.LORA_B):
            return self.name.rsplit(".", 1)[0] + ".weight"
        return self.name

    def encode(self) -> bytes:
        raw = self.name.encode("utf-8")
        dims = self.data.shape
        head = struct.pack(f"<H{len(raw)}sBBB{len(dims)}I", len(raw), raw, int(self.role), DTYPE_F32, len(dims), *dims)
        body = head + np.ascontiguousarray(self.data, dtype="<f4").tobytes()
        return body + _CRC.pack(zlib.crc32(body))


@dataclass
class TensorArchive:
    """Ordered named float32 tensors with a role tag each."""

    entries: list[Entry] = field(default_factory=list)

    def __post_init__(self):
        names = [e.name for e in self.entries]
        if len(set(names)) != len(names):
            raise ArgumentError("archive entry names must be unique")

    def add(self, name: str, role: Role, array) -> None:
        if any(e.name == name for e in self.entries):
            raise ArgumentError(f"duplicate archive entry {name!r}")
        self.entries.append(Entry(name, Role(role), np.asarray(array, dtype=np.float32)))

    def names(self) -> list[str]:
        return [e.name for e in self.entries]

    def get(self, name: str) -> Entry:
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(name)

    def __len__(self) -> int:
        return len(self.entries)

    def scalar_count(self) -> int:
        return sum(e.data.size for e in self.entries)

    def to_bytes(self) -> bytes:
        out = bytearray(_HEADER.pack(MAGIC, VERSION, len(self.entries)))
        for e in self.entries:
            out += e.encode()
        out += _CRC.pack(zlib.crc32(out))
        return bytes(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "TensorArchive":
        report = verify_archive(data)
        if not report.ok:
            raise IntegrityError(str(report))
        entries, _ = _parse(data)
        return cls([Entry(name, role, arr) for name, role, arr, _ in entries])

    def write(self, path) -> int:
        """Write atomically (temp file then rename); returns the byte count."""
        path = Path(path)
        blob = self.to_bytes()
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(blob)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
        return len(blob)

    @classmethod
    def read(cls, path) -> "TensorArchive":
        try:
            data = Path(path).read_bytes()
        except OSError as exc:
            raise ArgumentError(f"cannot read archive {path}: {exc.strerror}") from exc
        try:
            return cls.from_bytes(data)
        except IntegrityError as exc:
            raise IntegrityError(f"{path}: {exc}") from exc

    def to_params(self) -> dict[str, np.ndarray]:
        return {e.name: e.data.astype(np.float64) for e in self.entries}


class _Truncated(Exception):
    pass


def _take(data: bytes, pos: int, n: int) -> tuple[bytes, int]:
    if pos + n > len(data):
        raise _Truncated
    return data[pos : pos + n], pos + n


def _parse(data: bytes):
    """Split into entries; raises ``_Truncated`` or ``ValueError`` on structural damage."""
    head, pos = _take(data, 0, _HEADER.size)
    magic, version, count = _HEADER.unpack(head)
    if magic != MAGIC:
        raise ValueError("bad magic")
    if version != VERSION:
        raise ValueError(f"unsupported version {version}")
    entries = []
    for _ in range(count):
        start = pos
        raw, pos = _take(data, pos, 2)
        (name_len,) = struct.unpack("<H", raw)
        raw, pos = _take(data, pos, name_len)
        name = raw.decode("utf-8", errors="replace")
        raw, pos = _take(data, pos, 3)
        role, dtype, ndim = raw
        raw, pos = _take(data, pos, 4 * ndim)
        dims = struct.unpack(f"<{ndim}I", raw)
        size = int(np.prod(dims, dtype=np.int64)) if dims else 1
        payload, pos = _take(data, pos, 4 * size)
        body = data[start:pos]
        raw, pos = _take(data, pos, 4)
        crc_ok = _CRC.unpack(raw)[0] == zlib.crc32(body)
        if crc_ok and dtype != DTYPE_F32:
            raise ValueError(f"entry {name!r}: unsupported dtype {dtype}")
        if crc_ok and role not in Role._value2member_map_:
            raise ValueError(f"entry {name!r}: unknown role {role}")
        arr = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32) if crc_ok else None
        entries.append((name, Role(role) if crc_ok else role, arr, crc_ok))
    return entries, pos


@dataclass(frozen=True)
class VerifyReport:
    ok: bool
    reason: str = ""
    entry: str | None = None

    def __bool__(self) -> bool:
        return self.ok

    def __str__(self) -> str:
        if self.ok:
            return "ok"
        return f"entry {self.entry!r}: {self.reason}" if self.entry is not None else self.reason


def verify_archive(data: bytes) -> VerifyReport:
    """Check magic, version, every entry CRC and the file CRC; report the first failure."""
    try:
        entries, end = _parse(data)
    except _Truncated:
        return VerifyReport(False, "archive truncated")
    except (ValueError, struct.error) as exc:
        return VerifyReport(False, f"malformed archive: {exc}")
    for name, _, _, crc_ok in entries:
        if not crc_ok:
            return VerifyReport(False, "entry CRC mismatch", name)
    if len(data) != end + 4:
        return VerifyReport(False, "archive truncated" if len(data) < end + 4 else "trailing bytes after archive")
    if _CRC.unpack(data[end:])[0] != zlib.crc32(data[:end]):
        return VerifyReport(False, "file CRC mismatch")
    names = [e[0] for e in entries]
    if len(set(names)) != len(names):
        return VerifyReport(False, "duplicate entry names")
    return VerifyReport(True)


def full_archive(model: DetectorModel) -> TensorArchive:
    """Every base (non-adapter) tensor of an unmerged model, role ``base``."""
    if model.merged and model.has_lora:
        raise StateError("full archive of a merged model would bake the adapters into the base weights")
    archive = TensorArchive()
    for name in model.base_names():
        archive.add(name, Role.BASE, model.params[name])
    return archive


def build_package(model: DetectorModel, policy) -> TensorArchive:
    """Exactly the trainable tensors under ``policy``: adapter factors plus replaced tensors."""
    mask = apply_policy(model, policy)
    adapters = [n for n in mask.trainable if n.endswith((".lora_A", ".lora_B"))]
    if adapters and model.merged:
        raise StateError("cannot package adapter factors from a merged model; unmerge first")
    for n in adapters:
        partner = n[:-1] + ("B" if n.endswith("A") else "A")
        if partner not in mask:
            raise StateError(f"adapter factor {n!r} is trainable but {partner!r} is not")
    archive = TensorArchive()
    for name in mask.trainable:
        if name.endswith(".lora_A"):
            role = Role.LORA_A
        elif name.endswith(".lora_B"):
            role = Role.LORA_B
        else:
            role = Role.FULL_REPLACE
        archive.add(name, role, model.params[name])
    return archive


def apply_package(base: TensorArchive, pkg: TensorArchive) -> TensorArchive:
    """Merge a package into base weights; the inputs are left untouched.

    Adapter pairs add ``B @ A`` in float64 before rounding back to float32;
    ``full_replace`` entries overwrite. Adapter pairs are not idempotent:
    apply each package version exactly once.
    """
    weights = {e.name: e.data for e in base.entries}
    by_name = {e.name: e for e in pkg.entries}
    out = dict(weights)
    for e in pkg.entries:
        if e.role == Role.BASE:
            raise MergeError(f"package entry {e.name!r} has role base")
        if e.base_name not in weights:
            raise MergeError(f"package entry {e.name!r} targets missing base tensor {e.base_name!r}")
        if e.role == Role.FULL_REPLACE:
            if e.data.shape != weights[e.name].shape:
                raise ShapeError(f"{e.name}: package shape {e.data.shape} != base shape {weights[e.name].shape}")
            out[e.name] = e.data.copy()
        elif e.role == Role.LORA_B:
            a_name = e.name[: -len("B")] + "A"
            if a_name not in by_name or by_name[a_name].role != Role.LORA_A:
                raise MergeError(f"adapter factor {e.name!r} has no matching lora_A entry")
            b, a = e.data.astype(np.float64), by_name[a_name].data.astype(np.float64)
            if b.ndim != 2 or a.ndim != 2 or b.shape[1] != a.shape[0]:
                raise ShapeError(f"{e.base_name}: inconsistent adapter ranks {b.shape} x {a.shape}")
            w = out[e.base_name]
            if (b.shape[0], a.shape[1]) != w.shape:
                raise ShapeError(f"{e.base_name}: adapter product {(b.shape[0], a.shape[1])} != base shape {w.shape}")
            out[e.base_name] = (w.astype(np.float64) + b @ a).astype(np.float32)
        elif e.name[: -len("A")] + "B" not in by_name:
            raise MergeError(f"adapter factor {e.name!r} has no matching lora_B entry")
    return TensorArchive([Entry(n, Role.BASE, out[n]) for n in weights])


@dataclass(frozen=True)
class UplinkBudget:
    rate: float  # bits per second
    protocol_overhead: float = 1.0

    def __post_init__(self):
        if not self.rate > 0:
            raise ArgumentError(f"uplink rate must be positive, got {self.rate}")
        if not self.protocol_overhead >= 1:
            raise ArgumentError(f"protocol overhead must be at least 1, got {self.protocol_overhead}")


def uplink_time(num_bytes: int, budget: UplinkBudget) -> float:
    """Seconds to send ``num_bytes``: bytes * 8 * overhead / rate."""
    return num_bytes * 8 * budget.protocol_overhead / budget.rate
