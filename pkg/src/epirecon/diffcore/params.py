"""Named trainable parameters and the EPIS1 binary checkpoint container.

Checkpoint layout: the magic string "EPIS1", then one record per parameter:
u64 name length, name bytes (utf-8), u64 rank, u64 dims, f64 values.
All integers and floats little-endian.
"""

import struct

import numpy as np

from .array import DualArray

MAGIC = b"EPIS1"


class CheckpointError(Exception):
    pass


class CheckpointMismatch(CheckpointError):
    """Checkpoint contents incompatible with the model being loaded."""

    def __init__(self, name, detail):
        self.param_name = name
        super().__init__(f"checkpoint mismatch at parameter '{name}': {detail}")


class ParamStore:
    """Ordered collection of named requires_grad leaves."""

    def __init__(self):
        self._params = {}

    def add(self, name, values):
        if name in self._params:
            raise ValueError(f"duplicate parameter name '{name}'")
        arr = DualArray(np.array(values, dtype=np.float64), requires_grad=True)
        self._params[name] = arr
        return arr

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params.keys())

    def items(self):
        return self._params.items()

    def arrays(self):
        return list(self._params.values())

    def state_dict(self):
        return {k: v.values.copy() for k, v in self._params.items()}

    def load_values(self, values, strict=True):
        """Install values from a name -> ndarray dict, shape-checked."""
        if strict:
            for name in self._params:
                if name not in values:
                    raise CheckpointMismatch(name, "missing from checkpoint")
        for name, arr in values.items():
            if name not in self._params:
                if strict:
                    raise CheckpointMismatch(name, "not a model parameter")
                continue
            target = self._params[name]
            if target.values.shape != arr.shape:
                raise CheckpointMismatch(
                    name, f"shape {arr.shape} != expected {target.values.shape}"
                )
            target.values = arr.astype(np.float64).copy()


def save_checkpoint(path, named_arrays):
    """Write a name -> ndarray mapping in EPIS1 format (insertion order)."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        for name, arr in named_arrays.items():
            arr = np.asarray(arr, dtype=np.float64)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<Q", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<Q", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<Q", dim))
            fh.write(arr.astype("<f8").tobytes(order="C"))


def load_checkpoint(path):
    """Read an EPIS1 file back into an ordered name -> ndarray dict."""
    out = {}
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        while True:
            head = fh.read(8)
            if not head:
                break
            if len(head) != 8:
                raise CheckpointError(f"{path}: truncated record header")
            (name_len,) = struct.unpack("<Q", head)
            name = fh.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<Q", fh.read(8))
            dims = struct.unpack(f"<{rank}Q", fh.read(8 * rank)) if rank else ()
            count = int(np.prod(dims)) if dims else 1
            raw = fh.read(8 * count)
            if len(raw) != 8 * count:
                raise CheckpointError(f"{path}: truncated values for '{name}'")
            out[name] = np.frombuffer(raw, dtype="<f8").reshape(dims).copy()
    return out


def glorot_uniform(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)
