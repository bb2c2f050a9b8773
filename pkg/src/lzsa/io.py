"""Record containers.

Two self-describing formats, chosen by file extension:

``.csv``
    A ``#``-prefixed JSON header line, a column-name line, then one row per
    sample: ``t`` followed by one column per channel. All channels must share
    one sample grid. Values are written with 17 significant digits so that
    float64 data round-trips exactly.

``.lzr``
    ``b"LZSA"``, a little-endian uint32 header length, the UTF-8 JSON header,
    then each channel's samples as little-endian float64 in header order.

The header holds the format version, per-channel rate, start time, length,
valid interval, units and label, and free-form metadata.
"""
from __future__ import annotations

import io as _io
import json
import struct
from pathlib import Path

import numpy as np

from .errors import LZSAError
from .timeseries import TimeSeries

FORMAT_VERSION = 1
MAGIC = b"LZSA"


class RecordFormatError(LZSAError, ValueError):
    """Unreadable or inconsistent record file."""


def _channel_header(name: str, x: TimeSeries, units: str) -> dict:
    if x.is_complex:
        raise RecordFormatError(f"channel {name!r} is complex; store real and imaginary parts separately")
    return {
        "name": name,
        "rate": float(x.rate),
        "t0": float(x.t0),
        "n": len(x),
        "valid": [float(v) for v in x.valid],
        "units": units,
        "label": x.label,
    }


def _from_header(h: dict, samples: np.ndarray) -> TimeSeries:
    return TimeSeries(h["rate"], h["t0"], samples, h.get("label", ""), tuple(h["valid"]))


def write_record(path, channels: dict[str, TimeSeries], meta: dict | None = None, units: dict | None = None) -> Path:
    """Write named channels to ``path``; the extension selects the format."""
    path = Path(path)
    units = units or {}
    if not channels:
        raise RecordFormatError("no channels to write")
    headers = [_channel_header(k, v, units.get(k, "")) for k, v in channels.items()]
    header = {"format": "lzsa-record", "version": FORMAT_VERSION, "channels": headers, "meta": meta or {}}
    if path.suffix == ".csv":
        first = next(iter(channels.values()))
        for k, v in channels.items():
            if len(v) != len(first) or v.rate != first.rate or v.t0 != first.t0:
                raise RecordFormatError(f"channel {k!r} is not on the common CSV grid")
        cols = np.column_stack([first.times] + [v.samples for v in channels.values()])
        buf = _io.StringIO()
        buf.write("# " + json.dumps(header, sort_keys=True) + "\n")
        buf.write(",".join(["t"] + list(channels)) + "\n")
        np.savetxt(buf, cols, delimiter=",", fmt="%.17g")
        path.write_text(buf.getvalue())
    elif path.suffix == ".lzr":
        blob = json.dumps(header, sort_keys=True).encode()
        with open(path, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<I", len(blob)))
            f.write(blob)
            for v in channels.values():
                f.write(np.ascontiguousarray(v.samples, dtype="<f8").tobytes())
    else:
        raise RecordFormatError(f"unknown record extension {path.suffix!r} (use .csv or .lzr)")
    return path


def read_record(path) -> tuple[dict[str, TimeSeries], dict]:
    """Read a record; returns ``(channels, meta)``."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    if path.suffix == ".csv":
        with open(path) as f:
            first = f.readline()
            if not first.startswith("# "):
                raise RecordFormatError(f"{path}: missing JSON header line")
            header = _check_header(json.loads(first[2:]), path)
            names = f.readline().strip().split(",")
            data = np.loadtxt(f, delimiter=",", ndmin=2)
        hs = header["channels"]
        if names[1:] != [h["name"] for h in hs] or data.shape[1] != len(hs) + 1:
            raise RecordFormatError(f"{path}: column names do not match the header")
        out = {h["name"]: _from_header(h, data[:, i + 1].copy()) for i, h in enumerate(hs)}
    elif path.suffix == ".lzr":
        raw = path.read_bytes()
        if raw[:4] != MAGIC:
            raise RecordFormatError(f"{path}: bad magic")
        (hl,) = struct.unpack("<I", raw[4:8])
        header = _check_header(json.loads(raw[8 : 8 + hl].decode()), path)
        pos = 8 + hl
        out = {}
        for h in header["channels"]:
            nbytes = 8 * h["n"]
            if pos + nbytes > len(raw):
                raise RecordFormatError(f"{path}: truncated channel {h['name']!r}")
            out[h["name"]] = _from_header(h, np.frombuffer(raw, "<f8", h["n"], pos).astype(float))
            pos += nbytes
        if pos != len(raw):
            raise RecordFormatError(f"{path}: trailing bytes")
    else:
        raise RecordFormatError(f"unknown record extension {path.suffix!r}")
    for h in header["channels"]:
        if len(out[h["name"]]) != h["n"]:
            raise RecordFormatError(f"{path}: channel {h['name']!r} length mismatch")
    return out, header["meta"]


def _check_header(h: dict, path) -> dict:
    if h.get("format") != "lzsa-record":
        raise RecordFormatError(f"{path}: not an lzsa record")
    if h.get("version") != FORMAT_VERSION:
        raise RecordFormatError(f"{path}: unsupported version {h.get('version')}")
    return h


def write_json(path, obj) -> Path:
    path = Path(path)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_default) + "\n")
    return path


def read_json(path) -> dict:
    return json.loads(Path(path).read_text())


def _default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.bool_):
        return bool(o)
    raise TypeError(type(o))


def write_table(path, columns: dict[str, np.ndarray], comment: str = "") -> Path:
    """Plain CSV table (plot data, overlays), optional ``#`` comment line."""
    path = Path(path)
    cols = np.column_stack([np.asarray(v, dtype=float) for v in columns.values()])
    buf = _io.StringIO()
    if comment:
        buf.write("# " + comment + "\n")
    buf.write(",".join(columns) + "\n")
    np.savetxt(buf, cols, delimiter=",", fmt="%.10g")
    path.write_text(buf.getvalue())
    return path
