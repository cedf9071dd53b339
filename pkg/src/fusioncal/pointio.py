"""PLY / PCD readers and writers for intensity-bearing point clouds.

Supported: PLY ``ascii`` and ``binary_little_endian`` (vertex element only),
PCD ``ascii``. Required fields are ``x, y, z, intensity``; ``reflectivity``
is accepted as an alias for ``intensity`` and ``timestamp``/``t`` is kept
when present.
"""

from pathlib import Path

import numpy as np

from .errors import CloudFormatError

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}

_INTENSITY_NAMES = ("intensity", "reflectivity", "scalar_intensity")
_TIME_NAMES = ("timestamp", "t", "time")


def _columns_to_cloud(cols, path):
    from .cloudmap import PointCloud

    for axis in "xyz":
        if axis not in cols:
            raise CloudFormatError(f"{path}: missing field '{axis}'")
    name = next((n for n in _INTENSITY_NAMES if n in cols), None)
    if name is None:
        raise CloudFormatError(f"{path}: missing field 'intensity'")
    tname = next((n for n in _TIME_NAMES if n in cols), None)
    pts = np.stack([np.asarray(cols[a], dtype=float) for a in "xyz"], axis=1)
    return PointCloud(
        pts,
        np.asarray(cols[name], dtype=float),
        None if tname is None else np.asarray(cols[tname], dtype=float),
    )


def read_ply(path):
    path = Path(path)
    with open(path, "rb") as f:
        if f.readline().strip() != b"ply":
            raise CloudFormatError(f"{path}: not a PLY file")
        fmt = None
        n_vertex = None
        props = []
        in_vertex = False
        while True:
            line = f.readline()
            if not line:
                raise CloudFormatError(f"{path}: truncated header")
            tok = line.decode("ascii", errors="replace").split()
            if not tok or tok[0] in ("comment", "obj_info"):
                continue
            if tok[0] == "format":
                fmt = tok[1]
            elif tok[0] == "element":
                in_vertex = tok[1] == "vertex"
                if in_vertex:
                    n_vertex = int(tok[2])
                elif n_vertex is None:
                    raise CloudFormatError(f"{path}: vertex element must come first")
            elif tok[0] == "property" and in_vertex:
                if tok[1] == "list":
                    raise CloudFormatError(f"{path}: list properties on vertices are not supported")
                if tok[1] not in _PLY_TYPES:
                    raise CloudFormatError(f"{path}: unknown property type '{tok[1]}'")
                props.append((tok[2], _PLY_TYPES[tok[1]]))
            elif tok[0] == "end_header":
                break
        if n_vertex is None:
            raise CloudFormatError(f"{path}: no vertex element")
        if fmt == "binary_little_endian":
            dtype = np.dtype([(n, "<" + t) for n, t in props])
            buf = f.read(dtype.itemsize * n_vertex)
            if len(buf) < dtype.itemsize * n_vertex:
                raise CloudFormatError(f"{path}: truncated vertex data")
            data = np.frombuffer(buf, dtype=dtype, count=n_vertex)
            cols = {n: data[n] for n, _ in props}
        elif fmt == "ascii":
            rows = []
            for _ in range(n_vertex):
                line = f.readline()
                if not line:
                    raise CloudFormatError(f"{path}: truncated vertex data")
                rows.append(line.split()[: len(props)])
            try:
                arr = np.array(rows, dtype=float).reshape(n_vertex, len(props))
            except ValueError as exc:
                raise CloudFormatError(f"{path}: bad vertex row ({exc})") from None
            cols = {n: arr[:, i] for i, (n, _) in enumerate(props)}
        else:
            raise CloudFormatError(f"{path}: unsupported PLY format '{fmt}'")
    return _columns_to_cloud(cols, path)


def write_ply(cloud, path, binary=True):
    fields = [("x", "f8"), ("y", "f8"), ("z", "f8"), ("intensity", "f4")]
    if cloud.timestamps is not None:
        fields.append(("timestamp", "f8"))
    names = {"f8": "double", "f4": "float"}
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
              f"element vertex {len(cloud)}"]
    header += [f"property {names[t]} {n}" for n, t in fields]
    header.append("end_header")
    data = np.empty(len(cloud), dtype=[(n, "<" + t) for n, t in fields])
    data["x"], data["y"], data["z"] = cloud.points.T
    data["intensity"] = cloud.intensities
    if cloud.timestamps is not None:
        data["timestamp"] = cloud.timestamps
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            f.write(data.tobytes())
        else:
            for row in data:
                f.write((" ".join(repr(float(v)) for v in row) + "\n").encode("ascii"))


def read_pcd(path):
    path = Path(path)
    fields = None
    counts = None
    with open(path, "rb") as f:
        while True:
            line = f.readline()
            if not line:
                raise CloudFormatError(f"{path}: truncated header")
            tok = line.decode("ascii", errors="replace").split()
            if not tok or tok[0].startswith("#"):
                continue
            key = tok[0].upper()
            if key == "FIELDS":
                fields = tok[1:]
            elif key == "COUNT":
                counts = [int(c) for c in tok[1:]]
            elif key == "DATA":
                if tok[1].lower() != "ascii":
                    raise CloudFormatError(f"{path}: only ascii PCD data is supported")
                break
        if fields is None:
            raise CloudFormatError(f"{path}: missing FIELDS line")
        if counts and any(c != 1 for c in counts):
            raise CloudFormatError(f"{path}: multi-count PCD fields are not supported")
        try:
            arr = np.loadtxt(f, dtype=float, ndmin=2)
        except ValueError as exc:
            raise CloudFormatError(f"{path}: bad data row ({exc})") from None
    if arr.size == 0:
        arr = np.zeros((0, len(fields)))
    if arr.shape[1] != len(fields):
        raise CloudFormatError(f"{path}: expected {len(fields)} columns, got {arr.shape[1]}")
    return _columns_to_cloud({n: arr[:, i] for i, n in enumerate(fields)}, path)


def write_pcd(cloud, path):
    fields = ["x", "y", "z", "intensity"]
    cols = [cloud.points[:, 0], cloud.points[:, 1], cloud.points[:, 2], cloud.intensities]
    if cloud.timestamps is not None:
        fields.append("timestamp")
        cols.append(cloud.timestamps)
    n = len(cloud)
    header = [
        "VERSION .7",
        "FIELDS " + " ".join(fields),
        "SIZE " + " ".join("8" for _ in fields),
        "TYPE " + " ".join("F" for _ in fields),
        "COUNT " + " ".join("1" for _ in fields),
        f"WIDTH {n}", "HEIGHT 1", "VIEWPOINT 0 0 0 1 0 0 0", f"POINTS {n}", "DATA ascii",
    ]
    with open(path, "w") as f:
        f.write("\n".join(header) + "\n")
        for row in np.stack(cols, axis=1):
            f.write(" ".join(repr(float(v)) for v in row) + "\n")


def read_cloud(path):
    suffix = Path(path).suffix.lower()
    if suffix == ".ply":
        return read_ply(path)
    if suffix == ".pcd":
        return read_pcd(path)
    raise CloudFormatError(f"{path}: unknown point cloud extension '{suffix}'")


def write_cloud(cloud, path):
    if Path(path).suffix.lower() == ".pcd":
        write_pcd(cloud, path)
    else:
        write_ply(cloud, path)
