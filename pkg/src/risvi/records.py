"""Binary dataset files of channel realizations and training signals.

Layout (little-endian)::

    b"RISVIDAT"                  magic
    uint32                       format version
    uint64 x 5                   M, N, P, Q, seed
    uint64                       length of the JSON header
    JSON                         kind, record count, config echo, array table
    payload                      each array in table order; complex arrays as
                                 interleaved real/imag float64, real arrays as float64
"""

import json
import struct

import numpy as np

from risvi.errors import ContractViolation, MissingArtifactError

DATASET_MAGIC = b"RISVIDAT"
DATASET_VERSION = 1
_DIMS = struct.Struct("<5Q")


def save_dataset(path, arrays, cfg, seed, kind, extra=None):
    """Write ``arrays`` (name to ndarray, first axis = record) with a config echo."""
    table, payload = [], []
    count = None
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        count = len(arr) if count is None else count
        if len(arr) != count:
            raise ContractViolation("all dataset arrays need the same record count")
        dtype = "<c16" if np.iscomplexobj(arr) else "<f8"
        table.append({"name": name, "dtype": dtype, "shape": list(arr.shape)})
        payload.append(np.ascontiguousarray(arr, dtype=dtype).tobytes())
    header = {
        "kind": kind,
        "count": 0 if count is None else count,
        "config": cfg.to_dict(),
        "arrays": table,
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<I", DATASET_VERSION))
        fh.write(_DIMS.pack(cfg.M, cfg.N, cfg.P, cfg.Q, int(seed)))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for chunk in payload:
            fh.write(chunk)


def load_dataset(path):
    """Return ``(arrays, header)``; ``header`` also carries ``M, N, P, Q, seed``."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except FileNotFoundError as exc:
        raise MissingArtifactError(f"dataset not found: {path}") from exc
    if data[:8] != DATASET_MAGIC:
        raise ContractViolation(f"{path} is not a dataset file")
    (version,) = struct.unpack_from("<I", data, 8)
    if version != DATASET_VERSION:
        raise ContractViolation(f"unsupported dataset version {version}")
    M, N, P, Q, seed = _DIMS.unpack_from(data, 12)
    pos = 12 + _DIMS.size
    (length,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    header = json.loads(data[pos : pos + length])
    pos += length
    header.update(M=M, N=N, P=P, Q=Q, seed=seed)
    arrays = {}
    for entry in header["arrays"]:
        dtype = np.dtype(entry["dtype"])
        n = int(np.prod(entry["shape"], dtype=np.int64))
        arrays[entry["name"]] = (
            np.frombuffer(data, dtype=dtype, count=n, offset=pos).reshape(entry["shape"]).copy()
        )
        pos += n * dtype.itemsize
    return arrays, header
