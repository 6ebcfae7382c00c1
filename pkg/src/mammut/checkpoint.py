"""Checkpoint persistence: custom binary container with a text header.

Layout (all counts in ASCII header lines, tensor payloads raw bytes):

    MAMMUT1\n
    config <nbytes>\n<config text>
    step <int>\n
    rng <json of the numpy bit-generator state>\n
    params <count>\n
    <name> <dtype> <dim0,dim1,...> <nbytes>\n<raw little-endian data>
    ...
    opt <count>\n
    <same tensor framing>
    end\n

Round-trips are bitwise: save(load(x)) reproduces every array exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor

MAGIC = b"MAMMUT1"


class CheckpointError(RuntimeError):
    """Malformed checkpoint file or incompatible parameter set."""


def _write_tensor(fh, name: str, arr: np.ndarray) -> None:
    data = np.ascontiguousarray(arr)
    if data.dtype.byteorder == ">":
        data = data.astype(data.dtype.newbyteorder("<"))
    dtype = data.dtype.newbyteorder("<")
    shape = ",".join(str(d) for d in data.shape) or "-"
    raw = data.astype(dtype, copy=False).tobytes()
    fh.write(f"{name} {dtype.str} {shape} {len(raw)}\n".encode())
    fh.write(raw)


def _read_line(fh) -> str:
    out = bytearray()
    while True:
        ch = fh.read(1)
        if not ch:
            raise CheckpointError("unexpected end of checkpoint")
        if ch == b"\n":
            return out.decode()
        out.extend(ch)


def _read_tensor(fh) -> tuple[str, np.ndarray]:
    name, dtype_s, shape_s, nbytes_s = _read_line(fh).rsplit(" ", 3)
    raw = fh.read(int(nbytes_s))
    if len(raw) != int(nbytes_s):
        raise CheckpointError(f"truncated tensor payload for {name!r}")
    shape = () if shape_s == "-" else tuple(int(d) for d in shape_s.split(","))
    return name, np.frombuffer(raw, dtype=np.dtype(dtype_s)).reshape(shape).copy()


@dataclass
class Checkpoint:
    config_text: str
    step: int
    rng_state: dict
    params: dict[str, np.ndarray]
    opt_state: dict[str, np.ndarray] = field(default_factory=dict)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(MAGIC + b"\n")
            cfg = self.config_text.encode()
            fh.write(f"config {len(cfg)}\n".encode())
            fh.write(cfg)
            fh.write(f"step {self.step}\n".encode())
            fh.write(("rng " + json.dumps(self.rng_state, sort_keys=True) + "\n").encode())
            fh.write(f"params {len(self.params)}\n".encode())
            for name in sorted(self.params):
                _write_tensor(fh, name, self.params[name])
            fh.write(f"opt {len(self.opt_state)}\n".encode())
            for name in sorted(self.opt_state):
                _write_tensor(fh, name, self.opt_state[name])
            fh.write(b"end\n")

    @classmethod
    def load(cls, path) -> "Checkpoint":
        with open(path, "rb") as fh:
            if fh.read(len(MAGIC) + 1) != MAGIC + b"\n":
                raise CheckpointError(f"{path}: bad magic (expected MAMMUT1)")
            tag, nbytes = _read_line(fh).split(" ")
            if tag != "config":
                raise CheckpointError(f"{path}: expected config section")
            config_text = fh.read(int(nbytes)).decode()
            tag, step_s = _read_line(fh).split(" ")
            if tag != "step":
                raise CheckpointError(f"{path}: expected step")
            rng_line = _read_line(fh)
            if not rng_line.startswith("rng "):
                raise CheckpointError(f"{path}: expected rng state")
            rng_state = json.loads(rng_line[4:])
            tag, count = _read_line(fh).split(" ")
            if tag != "params":
                raise CheckpointError(f"{path}: expected params section")
            params = dict(_read_tensor(fh) for _ in range(int(count)))
            tag, count = _read_line(fh).split(" ")
            if tag != "opt":
                raise CheckpointError(f"{path}: expected opt section")
            opt = dict(_read_tensor(fh) for _ in range(int(count)))
            if _read_line(fh) != "end":
                raise CheckpointError(f"{path}: missing end marker")
        return cls(config_text=config_text, step=int(step_s),
                   rng_state=rng_state, params=params, opt_state=opt)


@dataclass
class LoadReport:
    loaded: list[str]
    missing: list[str]  # in the model but not the file (freshly initialized)
    unused: list[str]  # in the file but not the model

    @property
    def missing_image_pathway(self) -> list[str]:
        return [n for n in self.missing if not n.startswith("video.")]


def apply_params(ckpt: Checkpoint, params: dict[str, Tensor],
                 allow_partial: bool = False) -> LoadReport:
    """Copy checkpoint arrays into live parameter tensors by name.

    Name mismatches in either direction are an error unless allow_partial
    (the video adapter uses it to add fresh tube/gate parameters).
    """
    missing = sorted(set(params) - set(ckpt.params))
    unused = sorted(set(ckpt.params) - set(params))
    if (missing or unused) and not allow_partial:
        raise CheckpointError(
            f"parameter sets differ (missing={missing[:4]}..., "
            f"unused={unused[:4]}...); pass --allow-partial to load anyway")
    loaded = []
    for name in sorted(set(params) & set(ckpt.params)):
        arr = ckpt.params[name]
        tgt = params[name]
        if tuple(arr.shape) != tuple(tgt.data.shape):
            raise CheckpointError(
                f"shape mismatch for {name!r}: file {arr.shape} vs "
                f"model {tgt.data.shape}")
        tgt.data = arr.astype(tgt.data.dtype, copy=True)
        loaded.append(name)
    return LoadReport(loaded=loaded, missing=missing, unused=unused)
