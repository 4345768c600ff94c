"""Minimal PLY reader/writer for vertex-only point clouds."""
from __future__ import annotations

import numpy as np

from .errors import ParseError

_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}
_NAMES = {"i1": "char", "u1": "uchar", "i2": "short", "u2": "ushort", "i4": "int",
          "u4": "uint", "f4": "float", "f8": "double"}


def read_ply(path):
    """Return a dict ``property name -> 1-D array`` for the vertex element."""
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"ply"):
        raise ParseError("missing 'ply' magic", line=1)
    end = data.find(b"end_header")
    if end < 0:
        raise ParseError("missing end_header")
    nl = data.find(b"\n", end)
    if nl < 0:
        raise ParseError("truncated header")
    header = data[:nl].decode("ascii", errors="replace").splitlines()
    body = data[nl + 1:]

    fmt = None
    elements = []  # (name, count, [(prop, dtype)])
    for lineno, raw in enumerate(header, start=1):
        tok = raw.split()
        if not tok or tok[0] in ("ply", "comment", "obj_info", "end_header"):
            continue
        if tok[0] == "format":
            if len(tok) != 3 or tok[1] not in ("ascii", "binary_little_endian"):
                raise ParseError(f"unsupported format {raw.strip()!r}", line=lineno)
            fmt = tok[1]
        elif tok[0] == "element":
            if len(tok) != 3 or not tok[2].isdigit():
                raise ParseError(f"bad element declaration {raw.strip()!r}", line=lineno)
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if not elements:
                raise ParseError("property before element", line=lineno)
            if tok[1] == "list":
                raise ParseError("list properties are not supported", line=lineno)
            if len(tok) != 3 or tok[1] not in _TYPES:
                raise ParseError(f"bad property {raw.strip()!r}", line=lineno)
            elements[-1][2].append((tok[2], _TYPES[tok[1]]))
        else:
            raise ParseError(f"unexpected header line {raw.strip()!r}", line=lineno)
    if fmt is None:
        raise ParseError("missing format line")
    if not elements or elements[0][0] != "vertex":
        raise ParseError("first element must be 'vertex'")
    _, count, props = elements[0]

    if fmt == "ascii":
        lines = body.decode("ascii", errors="replace").splitlines()
        rows = [ln for ln in lines[:count]]
        if len(rows) < count:
            raise ParseError(f"expected {count} vertices, found {len(rows)}")
        tokens = " ".join(rows).split()
        if len(tokens) != count * len(props):
            for i, ln in enumerate(rows):
                if len(ln.split()) != len(props):
                    raise ParseError(f"expected {len(props)} values", line=len(header) + 1 + i)
        table = np.array(tokens, dtype=object).reshape(count, len(props))
        out = {}
        for j, (name, dt) in enumerate(props):
            col = table[:, j].astype(str)
            try:
                out[name] = col.astype(np.float64).astype(dt) if dt[0] == "f" else col.astype(np.int64).astype(dt)
            except ValueError as exc:
                raise ParseError(f"bad value in property {name!r}: {exc}") from None
        return out

    dtype = np.dtype([(name, "<" + dt) for name, dt in props])
    need = dtype.itemsize * count
    if len(body) < need:
        raise ParseError(f"expected {count} vertices, found {len(body) // dtype.itemsize}")
    arr = np.frombuffer(body[:need], dtype=dtype, count=count)
    return {name: arr[name].astype(arr[name].dtype.newbyteorder("=")) for name, _ in props}


def write_ply(path, columns, binary=False, comment=None):
    """Write vertex ``columns`` (ordered name -> array) to ``path``."""
    names = list(columns)
    arrays = [np.asarray(columns[n]) for n in names]
    count = len(arrays[0]) if arrays else 0
    head = ["ply", "format " + ("binary_little_endian" if binary else "ascii") + " 1.0"]
    if comment:
        head.append("comment " + comment)
    head.append(f"element vertex {count}")
    for n, a in zip(names, arrays):
        head.append(f"property {_NAMES[a.dtype.str[1:]]} {n}")
    head.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(head) + "\n").encode("ascii"))
        if binary:
            rec = np.empty(count, dtype=[(n, "<" + a.dtype.str[1:]) for n, a in zip(names, arrays)])
            for n, a in zip(names, arrays):
                rec[n] = a
            fh.write(rec.tobytes())
        else:
            fmts = [_fmt(a.dtype) for a in arrays]
            lines = []
            for i in range(count):
                lines.append(" ".join(f % a[i] for f, a in zip(fmts, arrays)))
            fh.write(("\n".join(lines) + ("\n" if lines else "")).encode("ascii"))


def _fmt(dt):
    if dt.kind == "f":
        return "%.9g" if dt.itemsize == 4 else "%.17g"
    return "%d"
