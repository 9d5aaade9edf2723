"""Binary calibration-pack format.

Layout, all little-endian::

    header (52 bytes)
        8s   magic "TCCPACK1"
        u32  format version (1)
        u64  configuration fingerprint
        u32  d (feature width)
        i32  window first step (-1 when empty)
        i32  window last step (-1 when empty)
        f64  alpha
        u32  variant code (0 full, 1 scale_shift, 2 shift_only)
        u32  pooling code (0 class, 1 token, 2 mixed)
        u32  operator count
    per operator, in sampling order (step descending, then layer, then module)
        3 x i32  step index, layer, module code (0 attention, 1 mlp)
        d f64    mu_A
        d f64    mu_B
        f64      s
        d*d f64  R, row-major

Every operator takes its alpha from the header.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .calibration import CalibrationOperator, PoolingMode, Variant
from .denoiser import ModuleKind, SiteId
from .trajectory import CalibrationPack, CalibrationWindow, PackMismatchError

MAGIC = b"TCCPACK1"
VERSION = 1
HEADER = struct.Struct("<8sIQIiidIII")
SITE = struct.Struct("<iii")

VARIANT_CODES = {Variant.FULL: 0, Variant.SCALE_SHIFT: 1, Variant.SHIFT_ONLY: 2}
POOLING_CODES = {PoolingMode.CLASS_POOL: 0, PoolingMode.TOKEN_POOL: 1, PoolingMode.MIXED: 2}


class PackFormatError(ValueError):
    """The file is not a well-formed calibration pack."""


class BadMagicError(PackFormatError):
    pass


class VersionMismatchError(PackFormatError):
    pass


class TruncatedPackError(PackFormatError):
    pass


class FingerprintMismatchError(PackMismatchError):
    pass


def record_size(d: int) -> int:
    return SITE.size + 8 * (2 * d + 1 + d * d)


def pack_size(d: int, n_operators: int) -> int:
    return HEADER.size + n_operators * record_size(d)


def encode_pack(pack: CalibrationPack) -> bytes:
    ops = [pack.operators[s] for s in sorted(pack.operators, key=lambda s: (-s.step_index, s.layer, s.module))]
    d = ops[0].dim if ops else 0
    parts = [HEADER.pack(MAGIC, VERSION, pack.fingerprint, d, pack.window.first_step,
                         pack.window.last_step, float(pack.alpha), VARIANT_CODES[Variant(pack.variant)],
                         POOLING_CODES[PoolingMode(pack.pooling)], len(ops))]
    for op in ops:
        if op.dim != d:
            raise ValueError(f"operators of mixed width {d} and {op.dim}")
        if not (op.alpha == pack.alpha and op.variant == pack.variant):
            raise ValueError(f"operator at {op.site} disagrees with the pack alpha or variant")
        parts.append(SITE.pack(op.site.step_index, op.site.layer, int(op.site.module)))
        body = np.concatenate([op.mu_a, op.mu_b, [op.scale], op.rotation.reshape(-1)])
        parts.append(body.astype("<f8").tobytes())
    return b"".join(parts)


def _decode_code(table, code, what):
    for key, value in table.items():
        if value == code:
            return key
    raise PackFormatError(f"unknown {what} code {code}")


def decode_pack(data: bytes, expected_fingerprint: int | None = None) -> CalibrationPack:
    if len(data) < len(MAGIC) or data[:len(MAGIC)] != MAGIC:
        if len(data) < len(MAGIC) and MAGIC.startswith(data):
            raise TruncatedPackError("unexpected end of pack")
        raise BadMagicError("bad magic: not a calibration pack")
    if len(data) < HEADER.size:
        raise TruncatedPackError("unexpected end of pack")
    _, version, fingerprint, d, first, last, alpha, vcode, pcode, count = HEADER.unpack_from(data)
    if version != VERSION:
        raise VersionMismatchError(f"pack version {version}, expected {VERSION}")
    if expected_fingerprint is not None and fingerprint != expected_fingerprint:
        raise FingerprintMismatchError(
            f"fingerprint mismatch: pack {fingerprint:016x}, configuration {expected_fingerprint:016x}")
    variant = _decode_code(VARIANT_CODES, vcode, "variant")
    pooling = _decode_code(POOLING_CODES, pcode, "pooling")
    size = pack_size(d, count)
    if len(data) < size:
        raise TruncatedPackError("unexpected end of pack")
    if len(data) > size:
        raise PackFormatError(f"{len(data) - size} trailing bytes after pack")

    operators = {}
    offset = HEADER.size
    n_floats = 2 * d + 1 + d * d
    for _ in range(count):
        step, layer, mcode = SITE.unpack_from(data, offset)
        offset += SITE.size
        body = np.frombuffer(data, dtype="<f8", count=n_floats, offset=offset).astype(np.float64)
        offset += 8 * n_floats
        try:
            site = SiteId(step, layer, ModuleKind(mcode))
        except ValueError:
            raise PackFormatError(f"unknown module code {mcode}") from None
        if site in operators:
            raise PackFormatError(f"duplicate operator for {site}")
        operators[site] = CalibrationOperator(
            site, body[:d].copy(), body[d:2 * d].copy(), body[2 * d + 1:].reshape(d, d).copy(),
            float(body[2 * d]), alpha, variant)
    return CalibrationPack(operators, CalibrationWindow(first, last), pooling, alpha, variant, fingerprint)


def save_pack(pack: CalibrationPack, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_pack(pack))


def load_pack(path: str | os.PathLike, expected_fingerprint: int | None = None) -> CalibrationPack:
    """Read a pack; with ``expected_fingerprint`` a mismatching pack is rejected."""
    with open(path, "rb") as fh:
        return decode_pack(fh.read(), expected_fingerprint)
