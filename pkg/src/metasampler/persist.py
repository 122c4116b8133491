"""Binary persistence for meta-parameters, sample sets and reference predictives.

All numbers are little-endian float64.  Layouts::

    meta-params   b"MSMP" | u32 version | u32 normalization code | 386 x f64
    sample set    b"MSSS" | u32 version | u64 header length | JSON header | K*d x f64 | D x f64
    reference     b"MSRP" | u32 version | u64 N | u64 C | N*C x f64

Meta-parameters are stored in ``MetaParams.flat()`` order (w1 row-major, b1,
wa, ba, wb, bb); a JSON sidecar restates that order.  A sample set's
``D x f64`` tail holds the optional update-norm trace.  Wall-clock timing is
non-deterministic, so it lives in a ``.timing.json`` sidecar instead of the
binary file.
"""
from __future__ import annotations

import json
import os
import struct

import numpy as np

from .errors import FormatError, VersionError
from .metamodel import EMA_DECAYS, FEATURE_NAMES, HIDDEN, NORMALIZATIONS, MetaParams
from .model import Layout
from .samplers import SampleSet

META_MAGIC = b"MSMP"
SAMPLES_MAGIC = b"MSSS"
REFERENCE_MAGIC = b"MSRP"
FORMAT_VERSION = 1
F64 = np.dtype("<f8")


def _read(path):
    with open(path, "rb") as fh:
        return fh.read()


def _write_atomic(path, data):
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def _check_prefix(buf, magic, what):
    if len(buf) < 8:
        raise FormatError(f"{what} file truncated", offset=len(buf))
    if buf[:4] != magic:
        raise FormatError(f"not a {what} file (bad magic {buf[:4]!r})", offset=0)
    version = struct.unpack_from("<I", buf, 4)[0]
    if version != FORMAT_VERSION:
        raise VersionError(f"{what} format version {version} is not supported (expected "
                           f"{FORMAT_VERSION}); re-export it with a matching release", offset=4)


def _floats(buf, offset, count, what):
    end = offset + 8 * count
    if len(buf) < end:
        raise FormatError(f"{what} truncated: need {end} bytes, have {len(buf)}", offset=len(buf))
    return np.frombuffer(buf, dtype=F64, count=count, offset=offset).astype(float)


# -- meta-parameters --------------------------------------------------------


def meta_sidecar(meta):
    return {
        "format_version": FORMAT_VERSION,
        "size": MetaParams.SIZE,
        "order": [[name, list(shape)] for name, shape in MetaParams.SHAPES],
        "feature_columns": list(FEATURE_NAMES),
        "ema_decays": list(EMA_DECAYS),
        "hidden": HIDDEN,
        "normalization": meta.normalization,
    }


def save_meta(path, meta):
    body = META_MAGIC + struct.pack("<II", FORMAT_VERSION, NORMALIZATIONS.index(meta.normalization))
    _write_atomic(path, body + meta.flat().astype(F64).tobytes())
    _write_atomic(f"{path}.json", (json.dumps(meta_sidecar(meta), indent=2, sort_keys=True) + "\n").encode())


def load_meta(path):
    buf = _read(path)
    _check_prefix(buf, META_MAGIC, "meta-parameter")
    if len(buf) < 12:
        raise FormatError("meta-parameter header truncated", offset=len(buf))
    code = struct.unpack_from("<I", buf, 8)[0]
    if code >= len(NORMALIZATIONS):
        raise FormatError(f"unknown normalization code {code}", offset=8)
    values = _floats(buf, 12, MetaParams.SIZE, "meta-parameters")
    if len(buf) != 12 + 8 * MetaParams.SIZE:
        raise FormatError("trailing bytes after meta-parameters", offset=12 + 8 * MetaParams.SIZE)
    return MetaParams.from_flat(values, NORMALIZATIONS[code])


# -- sample sets ------------------------------------------------------------


def save_samples(path, samples):
    k, d = samples.snapshots.shape
    trace = np.zeros(0) if samples.delta_sq is None else np.asarray(samples.delta_sq, dtype=float)
    header = {
        "K": k,
        "d": d,
        "steps": [int(s) for s in samples.steps],
        "burnin": int(samples.burnin),
        "thin": int(samples.thin),
        "diverged": bool(samples.diverged),
        "divergence_step": samples.divergence_step,
        "layout": samples.layout.to_list() if samples.layout is not None else None,
        "metadata": samples.metadata,
        "trace_length": int(len(trace)) if samples.delta_sq is not None else None,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    body = SAMPLES_MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(hbytes)) + hbytes
    body += np.ascontiguousarray(samples.snapshots, dtype=F64).tobytes() + trace.astype(F64).tobytes()
    _write_atomic(path, body)
    timing = {"wall_clock_per_interval": samples.wall_clock_per_interval}
    _write_atomic(f"{path}.timing.json", (json.dumps(timing, sort_keys=True) + "\n").encode())


def load_samples(path):
    buf = _read(path)
    _check_prefix(buf, SAMPLES_MAGIC, "sample-set")
    if len(buf) < 16:
        raise FormatError("sample-set header truncated", offset=len(buf))
    hlen = struct.unpack_from("<Q", buf, 8)[0]
    if len(buf) < 16 + hlen:
        raise FormatError("sample-set JSON header truncated", offset=len(buf))
    try:
        header = json.loads(buf[16:16 + hlen].decode())
        k, d = int(header["K"]), int(header["d"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"corrupted sample-set header: {exc}", offset=16) from exc
    offset = 16 + hlen
    snaps = _floats(buf, offset, k * d, "snapshots").reshape(k, d)
    offset += 8 * k * d
    n_trace = header.get("trace_length")
    trace = _floats(buf, offset, n_trace, "update trace") if n_trace is not None else None
    end = offset + 8 * (n_trace or 0)
    if len(buf) != end:
        raise FormatError("trailing bytes after sample set", offset=end)
    wall = None
    timing_path = f"{path}.timing.json"
    if os.path.exists(timing_path):
        with open(timing_path) as fh:
            wall = json.load(fh).get("wall_clock_per_interval")
    layout = Layout.from_list(header["layout"]) if header.get("layout") is not None else None
    return SampleSet(snaps, header["steps"], header["burnin"], header["thin"], wall, layout,
                     header["diverged"], header["divergence_step"], header["metadata"], trace)


# -- reference predictives --------------------------------------------------


def save_reference(path, probs):
    probs = np.ascontiguousarray(probs, dtype=F64)
    if probs.ndim != 2:
        raise FormatError("reference predictive must be an (N, C) matrix")
    if str(path).endswith(".json"):
        _write_atomic(path, json.dumps({"probs": probs.tolist()}).encode())
        return
    n, c = probs.shape
    _write_atomic(path, REFERENCE_MAGIC + struct.pack("<IQQ", FORMAT_VERSION, n, c) + probs.tobytes())


def load_reference(path):
    if str(path).endswith(".json"):
        try:
            with open(path) as fh:
                probs = np.asarray(json.load(fh)["probs"], dtype=float)
        except (ValueError, KeyError) as exc:
            raise FormatError(f"bad reference JSON: {exc}") from exc
        if probs.ndim != 2:
            raise FormatError("reference predictive must be an (N, C) matrix")
        return probs
    buf = _read(path)
    _check_prefix(buf, REFERENCE_MAGIC, "reference")
    if len(buf) < 24:
        raise FormatError("reference header truncated", offset=len(buf))
    n, c = struct.unpack_from("<QQ", buf, 8)
    probs = _floats(buf, 24, n * c, "reference").reshape(n, c)
    if len(buf) != 24 + 8 * n * c:
        raise FormatError("trailing bytes after reference", offset=24 + 8 * n * c)
    return probs
