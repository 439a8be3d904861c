"""
Binary checkpoints.

Layout (all integers little-endian):

    offset 0     8 bytes   magic b"RPBTCKPT"
    offset 8     uint32    format version (currently 1)
    offset 12    uint32    header length N in bytes
    offset 16    N bytes   UTF-8 JSON header, sorted keys, no whitespace
    offset 16+N  float64[] parameter sections, concatenated in header order

The header records the network specs, the policy head, tau, the step counter, free-form
`meta` and `sections`, a list of [name, layout] pairs. Every section is stored as a flat
little-endian float64 array whose length is the size of its layout. Encoding is canonical,
so save -> load -> save reproduces the file byte for byte.
"""
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np

from rpbt.const import CHECKPOINT_MAGIC, CHECKPOINT_VERSION
from rpbt.model import RpbtError
from rpbt.nn import Activation, HeadKind, MlpSpec, ParamLayout, ParamVector, PolicyHead

_PREAMBLE = struct.Struct("<8sII")


class CheckpointError(RpbtError):
    """Raised when a checkpoint cannot be decoded. Names the file and the failing field."""

    def __init__(self, path: Union[str, Path], field_name: str, message: str) -> None:
        super().__init__(f"{path}: {field_name}: {message}")
        self.path = str(path)
        self.field = field_name


@dataclass
class Checkpoint:
    policy_spec: MlpSpec
    head: PolicyHead
    tau: float
    step: int
    sections: Dict[str, ParamVector]
    value_spec: Optional[MlpSpec] = None
    meta: Dict[str, Any] = field(default_factory=dict)

    @property
    def policy(self) -> ParamVector:
        return self.sections["policy"]


def _spec_to_json(spec: MlpSpec) -> Dict[str, Any]:
    return {
        "activation": spec.activation.value,
        "hidden_sizes": list(spec.hidden_sizes),
        "input_dim": spec.input_dim,
        "output_dim": spec.output_dim,
    }


def _spec_from_json(data: Dict[str, Any]) -> MlpSpec:
    return MlpSpec(
        input_dim=int(data["input_dim"]),
        output_dim=int(data["output_dim"]),
        hidden_sizes=tuple(int(h) for h in data["hidden_sizes"]),
        activation=Activation(data["activation"]),
    )


def encode_checkpoint(checkpoint: Checkpoint) -> bytes:
    header = {
        "head": {
            "dim": checkpoint.head.dim,
            "high": checkpoint.head.high,
            "kind": checkpoint.head.kind.value,
            "low": checkpoint.head.low,
        },
        "meta": checkpoint.meta,
        "policy_spec": _spec_to_json(checkpoint.policy_spec),
        "sections": [[name, vector.layout.to_json()] for name, vector in checkpoint.sections.items()],
        "step": int(checkpoint.step),
        "tau": float(checkpoint.tau),
        "value_spec": _spec_to_json(checkpoint.value_spec) if checkpoint.value_spec is not None else None,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = b"".join(np.asarray(v.data, dtype="<f8").tobytes() for v in checkpoint.sections.values())
    return _PREAMBLE.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(header_bytes)) + header_bytes + body


def decode_checkpoint(data: bytes, path: Union[str, Path] = "<bytes>") -> Checkpoint:
    if len(data) < _PREAMBLE.size:
        raise CheckpointError(path, "magic", "file too short")
    magic, version, header_length = _PREAMBLE.unpack_from(data)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(path, "magic", f"expected {CHECKPOINT_MAGIC!r}, got {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(path, "version", f"unsupported version {version}")
    start = _PREAMBLE.size
    if len(data) < start + header_length:
        raise CheckpointError(path, "header", "truncated header")
    try:
        header = json.loads(data[start : start + header_length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(path, "header", f"not valid JSON: {e}") from None

    def require(name: str) -> Any:
        if name not in header:
            raise CheckpointError(path, name, "missing")
        return header[name]

    try:
        policy_spec = _spec_from_json(require("policy_spec"))
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(path, "policy_spec", str(e)) from None
    raw_value_spec = require("value_spec")
    try:
        value_spec = _spec_from_json(raw_value_spec) if raw_value_spec is not None else None
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(path, "value_spec", str(e)) from None
    try:
        raw_head = require("head")
        head = PolicyHead(HeadKind(raw_head["kind"]), int(raw_head["dim"]), float(raw_head["low"]), float(raw_head["high"]))
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(path, "head", str(e)) from None
    try:
        tau = float(require("tau"))
        step = int(require("step"))
    except (TypeError, ValueError) as e:
        raise CheckpointError(path, "tau/step", str(e)) from None

    if (len(data) - start - header_length) % 8:
        raise CheckpointError(path, "sections", "parameter block is not a whole number of float64 values")
    body = np.zeros(0)
    if len(data) > start + header_length:
        body = np.frombuffer(data, dtype="<f8", offset=start + header_length)
    sections: Dict[str, ParamVector] = {}
    offset = 0
    for entry in require("sections"):
        try:
            name, layout_json = entry
            layout = ParamLayout.from_json(layout_json)
        except (TypeError, ValueError) as e:
            raise CheckpointError(path, "sections", str(e)) from None
        chunk = body[offset : offset + layout.size]
        if len(chunk) != layout.size:
            raise CheckpointError(path, f"sections.{name}", f"expected {layout.size} values, found {len(chunk)}")
        try:
            sections[name] = ParamVector(chunk.astype(np.float64), layout)
        except ValueError as e:
            raise CheckpointError(path, f"sections.{name}", str(e)) from None
        offset += layout.size
    if offset != len(body):
        raise CheckpointError(path, "sections", f"{len(body) - offset} trailing values")
    if "policy" not in sections:
        raise CheckpointError(path, "sections.policy", "missing")
    return Checkpoint(policy_spec, head, tau, step, sections, value_spec, require("meta"))


def save_checkpoint(checkpoint: Checkpoint, path: Union[str, Path]) -> Path:
    """Write atomically: a temporary file in the target directory replaces `path`."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with tempfile.NamedTemporaryFile(dir=str(path.parent), delete=False, suffix=".tmp") as f:
        f.write(encode_checkpoint(checkpoint))
    os.replace(f.name, path)
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise CheckpointError(path, "file", str(e)) from None
    return decode_checkpoint(data, path)
