"""Named parameter storage with a binary and a JSON serialization.

Binary layout (all little-endian)::

    b"IPRPARM1"
    uint64  entry count
    per entry:
        uint32  name length, then UTF-8 name
        uint32  rank, then rank x uint64 extents
        float64 values, row-major
"""

from __future__ import annotations

import io
import json
import struct
from collections.abc import MutableMapping
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator

import numpy as np

from .tensor import Tensor, parameter

MAGIC = b"IPRPARM1"
# running statistics: stored and serialised with the weights, never optimised
BUFFER_SUFFIXES = (".bn_mean", ".bn_var")


def is_buffer(name: str) -> bool:
    return name.endswith(BUFFER_SUFFIXES)


class ParameterStore(MutableMapping):
    """Ordered map from parameter name to a gradient-tracking :class:`Tensor`.

    ``training`` selects batch statistics (and running-statistic updates) in
    batch-normalised layers; it is off by default.
    """

    def __init__(self, items=None):
        self._params: dict[str, Tensor] = {}
        self.training = False
        if items:
            for k, v in dict(items).items():
                self[k] = v

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __setitem__(self, name: str, value) -> None:
        if isinstance(value, Tensor):
            value.requires_grad = True
            value.name = name
            self._params[name] = value
        else:
            self._params[name] = parameter(value, name=name)

    def __delitem__(self, name: str) -> None:
        del self._params[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    @contextmanager
    def train_mode(self):
        prev, self.training = self.training, True
        try:
            yield self
        finally:
            self.training = prev

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        """Gradients of the trainable entries (zeros where none was recorded)."""
        return {
            k: (p.grad if p.grad is not None else np.zeros_like(p.data))
            for k, p in self._params.items()
            if not is_buffer(k)
        }

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self._params.items()}

    def copy(self) -> "ParameterStore":
        return ParameterStore({k: p.data.copy() for k, p in self._params.items()})

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self._params.values()))

    def shape_mismatches(self, other: "ParameterStore") -> list[str]:
        """Names whose presence or shape differs between the two stores."""
        bad = []
        for name in sorted(set(self) | set(other)):
            if name not in self or name not in other or self[name].shape != other[name].shape:
                bad.append(name)
        return bad

    # serialization

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<Q", len(self._params)))
        for name, p in self._params.items():
            raw = name.encode("utf-8")
            buf.write(struct.pack("<I", len(raw)))
            buf.write(raw)
            buf.write(struct.pack("<I", p.ndim))
            buf.write(struct.pack(f"<{p.ndim}Q", *p.shape))
            buf.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ParameterStore":
        if blob[:8] != MAGIC:
            raise ValueError("not a parameter file (bad magic header)")
        off = 8
        (count,) = struct.unpack_from("<Q", blob, off)
        off += 8
        store = cls()
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", blob, off)
            off += 4
            name = blob[off : off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<I", blob, off)
            off += 4
            shape = struct.unpack_from(f"<{rank}Q", blob, off)
            off += 8 * rank
            size = int(np.prod(shape)) if rank else 1
            data = np.frombuffer(blob, dtype="<f8", count=size, offset=off).astype(np.float64)
            off += 8 * size
            store[name] = data.reshape(shape)
        if off != len(blob):
            raise ValueError("trailing bytes after parameter entries")
        return store

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "ParameterStore":
        return cls.from_bytes(Path(path).read_bytes())

    def to_json(self) -> str:
        return json.dumps(
            {k: {"shape": list(p.shape), "data": p.data.reshape(-1).tolist()} for k, p in self._params.items()}
        )

    @classmethod
    def from_json(cls, text: str) -> "ParameterStore":
        raw = json.loads(text)
        return cls({k: np.asarray(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in raw.items()})
