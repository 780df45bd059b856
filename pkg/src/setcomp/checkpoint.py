"""Checkpoint container: one-line JSON header plus raw little-endian float32
arrays concatenated in header order.  save -> load -> save is byte-identical.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

FORMAT_NAME = "setcomp-checkpoint"
FORMAT_VERSION = 1


def _jsonify(value):
    return json.loads(json.dumps(value))


@dataclass
class Checkpoint:
    """Named parameter arrays plus the configs and counters needed to resume."""

    arrays: dict[str, np.ndarray]
    configs: dict = field(default_factory=dict)
    step: int = 0
    seed: int = 0

    def __post_init__(self):
        # np.ascontiguousarray would promote 0-d arrays to 1-d; keep shapes as-is
        normalized = {}
        for name, arr in self.arrays.items():
            a = np.asarray(arr, dtype="<f4")
            normalized[name] = a if a.flags["C_CONTIGUOUS"] else a.copy()
        self.arrays = normalized
        self.configs = _jsonify(self.configs)

    def allclose(self, other: "Checkpoint") -> bool:
        return (
            self.step == other.step
            and self.seed == other.seed
            and self.configs == other.configs
            and list(self.arrays) == list(other.arrays)
            and all(np.array_equal(self.arrays[k], other.arrays[k]) for k in self.arrays)
        )


def save_checkpoint(path: str, ckpt: Checkpoint) -> None:
    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "step": ckpt.step,
        "seed": ckpt.seed,
        "configs": ckpt.configs,
        "arrays": [{"name": name, "shape": list(arr.shape)} for name, arr in ckpt.arrays.items()],
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, separators=(",", ":")).encode("utf-8"))
        fh.write(b"\n")
        for arr in ckpt.arrays.values():
            fh.write(arr.tobytes(order="C"))


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        header_line = fh.readline()
        if not header_line.endswith(b"\n"):
            raise ValueError("checkpoint header is truncated (no newline terminator)")
        try:
            header = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ValueError(f"checkpoint header is not valid JSON: {exc}") from exc
        for key in ("format", "version", "step", "seed", "configs", "arrays"):
            if key not in header:
                raise ValueError(f"checkpoint header missing field {key!r}")
        if header["format"] != FORMAT_NAME:
            raise ValueError(f"unrecognized checkpoint format {header['format']!r}")
        arrays: dict[str, np.ndarray] = {}
        for spec in header["arrays"]:
            if "name" not in spec or "shape" not in spec:
                raise ValueError("checkpoint header array entry missing 'name' or 'shape'")
            name, shape = spec["name"], tuple(int(s) for s in spec["shape"])
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            raw = fh.read(4 * count)
            if len(raw) != 4 * count:
                raise ValueError(f"truncated payload for array {name!r}: expected {4 * count} bytes, got {len(raw)}")
            arrays[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
        trailing = fh.read(1)
        if trailing:
            raise ValueError("checkpoint has trailing bytes beyond the declared arrays")
    return Checkpoint(arrays=arrays, configs=header["configs"], step=int(header["step"]), seed=int(header["seed"]))
