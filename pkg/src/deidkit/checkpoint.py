"""Versioned, checksummed plain-text checkpoints.

Layout (one record per line)::

    deidkit-checkpoint <format_version>
    kind <model_kind>
    meta <json object>
    nets <count>
    net <name> <hidden_act> <final_act> <w0,w1,...>
    <parameter values for W0, space separated>
    <parameter values for b0>
    ...
    sha256 <hex digest of every preceding byte>

Floats use Python's shortest round-trip ``repr`` so a load reproduces every
bit of the saved parameters.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from deidkit.errors import CheckpointError, ChecksumError, TruncatedFileError, VersionError
from deidkit.nn import DenseNet

FORMAT_VERSION = 1
MAGIC = "deidkit-checkpoint"


@dataclass
class Checkpoint:
    kind: str
    nets: dict[str, DenseNet]
    meta: dict = field(default_factory=dict)


def _encode_array(a: np.ndarray) -> str:
    return " ".join(repr(v) for v in np.asarray(a, dtype=np.float64).ravel().tolist())


def dumps(kind: str, nets: dict[str, DenseNet], meta: dict | None = None) -> str:
    lines = [
        f"{MAGIC} {FORMAT_VERSION}",
        f"kind {kind}",
        "meta " + json.dumps(meta or {}, sort_keys=True),
        f"nets {len(nets)}",
    ]
    for name, net in nets.items():
        if " " in name:
            raise CheckpointError(f"net name {name!r} contains whitespace")
        sizes = ",".join(str(s) for s in net.layer_sizes)
        lines.append(f"net {name} {net.hidden_activation} {net.final_activation} {sizes}")
        lines.extend(_encode_array(p) for p in net.params())
    body = "\n".join(lines) + "\n"
    digest = hashlib.sha256(body.encode()).hexdigest()
    return body + f"sha256 {digest}\n"


def loads(text: str) -> Checkpoint:
    lines = text.split("\n")
    head = lines[0].split() if lines else []
    if len(head) != 2 or head[0] != MAGIC:
        raise CheckpointError("not a deidkit checkpoint")
    try:
        version = int(head[1])
    except ValueError as exc:
        raise CheckpointError(f"bad format version {head[1]!r}") from exc
    if version != FORMAT_VERSION:
        raise VersionError(f"checkpoint format {version} unsupported (expected {FORMAT_VERSION})")

    if text.endswith("\n"):
        lines = lines[:-1]
    if not lines or not lines[-1].startswith("sha256 "):
        raise TruncatedFileError("checkpoint has no checksum trailer")
    body = "\n".join(lines[:-1]) + "\n"
    expected = lines[-1].split(" ", 1)[1].strip()
    if hashlib.sha256(body.encode()).hexdigest() != expected:
        raise ChecksumError("checkpoint checksum mismatch")

    it = iter(lines[1:-1])
    try:
        kind = next(it).split(" ", 1)[1]
        meta = json.loads(next(it).split(" ", 1)[1])
        count = int(next(it).split()[1])
        nets = {}
        for _ in range(count):
            _, name, hidden, final, sizes = next(it).split()
            layer_sizes = [int(s) for s in sizes.split(",")]
            weights, biases = [], []
            for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
                W = np.array([float(v) for v in next(it).split()], dtype=np.float64)
                b = np.array([float(v) for v in next(it).split()], dtype=np.float64)
                if W.size != fan_in * fan_out or b.size != fan_out:
                    raise TruncatedFileError(f"parameter count mismatch in net {name!r}")
                weights.append(W.reshape(fan_out, fan_in))
                biases.append(b)
            nets[name] = DenseNet(layer_sizes, weights, biases, hidden, final)
    except StopIteration as exc:
        raise TruncatedFileError("checkpoint ended early") from exc
    except (IndexError, ValueError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from exc
    return Checkpoint(kind, nets, meta)


def save_checkpoint(path, nets, kind="densenet", meta=None) -> Path:
    if isinstance(nets, DenseNet):
        nets = {"net": nets}
    path = Path(path)
    path.write_text(dumps(kind, nets, meta))
    return path


def load_checkpoint(path) -> Checkpoint:
    try:
        text = Path(path).read_text()
    except UnicodeDecodeError as exc:
        raise ChecksumError(f"{path}: undecodable bytes") from exc
    return loads(text)


def load_net(path) -> DenseNet:
    ckpt = load_checkpoint(path)
    if len(ckpt.nets) != 1:
        raise CheckpointError(f"{path} holds {len(ckpt.nets)} nets, expected one")
    return next(iter(ckpt.nets.values()))
