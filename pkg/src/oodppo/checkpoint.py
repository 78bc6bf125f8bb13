"""Binary checkpoints: magic, header length, JSON header, raw little-endian float64 payload.

The header records the format version, free-form metadata (run config, agent
config, RNG states) and, for every array, its name, shape and byte offset into
the payload.  Arrays are stored in sorted-name order so identical contents give
identical bytes.
"""
from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .agent import Agent, AgentConfig
from .layers import MaskSet
from .obsnorm import RunningMeanStd

MAGIC = b"OODPPOCK"
FORMAT_VERSION = 1
_LEN = struct.Struct("<Q")


class CheckpointError(OSError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    arrays: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def __eq__(self, other) -> bool:
        if not isinstance(other, Checkpoint):
            return NotImplemented
        if self.version != other.version or self.meta != other.meta or self.arrays.keys() != other.arrays.keys():
            return False
        return all(_bits(self.arrays[k]) == _bits(other.arrays[k]) for k in self.arrays)


def _bits(a: np.ndarray) -> tuple:
    a = np.ascontiguousarray(a, dtype="<f8")
    return a.shape, a.tobytes()


def to_bytes(ckpt: Checkpoint) -> bytes:
    entries, chunks, offset = [], [], 0
    for name in sorted(ckpt.arrays):
        a = np.ascontiguousarray(ckpt.arrays[name], dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        chunks.append(a.tobytes())
        offset += a.nbytes
    header = {"version": ckpt.version, "meta": ckpt.meta, "arrays": entries, "payload_bytes": offset}
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + _LEN.pack(len(blob)) + blob + b"".join(chunks)


def from_bytes(raw: bytes) -> Checkpoint:
    if raw[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    pos = len(MAGIC)
    (hlen,) = _LEN.unpack_from(raw, pos)
    pos += _LEN.size
    header = json.loads(raw[pos:pos + hlen])
    pos += hlen
    if header.get("version") != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint format version {header.get('version')} is not supported (expected {FORMAT_VERSION})")
    payload = raw[pos:]
    if len(payload) != header["payload_bytes"]:
        raise CheckpointError("truncated checkpoint payload")
    arrays = {}
    for e in header["arrays"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        arrays[e["name"]] = np.frombuffer(payload, dtype="<f8", count=n, offset=e["offset"]).reshape(e["shape"]).copy()
    return Checkpoint(arrays, header["meta"], header["version"])


def save(path: str | Path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


def load(path: str | Path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())


# --------------------------------------------------------------------------- agent <-> checkpoint

def agent_arrays(agent: Agent) -> dict[str, np.ndarray]:
    arrays = {f"param.{name}": t.data for name, t in agent.named_parameters().items()}
    for net, prefix in ((agent.policy, "pi"), (agent.value, "vf")):
        for i, ms in enumerate(net.masks):
            arrays[f"mask.{prefix}.{i}"] = ms.masks.astype(np.float64)
    if agent.obs_rms is not None:
        arrays["obs_rms.mean"] = agent.obs_rms.mean
        arrays["obs_rms.var"] = agent.obs_rms.var
        arrays["obs_rms.count"] = np.array([agent.obs_rms.count])
    return arrays


def make_checkpoint(agent: Agent, run_config: dict | None = None, optim: dict[str, np.ndarray] | None = None,
                    rng_states: dict | None = None, extra: dict | None = None) -> Checkpoint:
    arrays = agent_arrays(agent)
    for name, a in (optim or {}).items():
        arrays[f"optim.{name}"] = np.asarray(a, dtype=np.float64)
    mask_meta = {f"{prefix}.{i}": {"k": ms.k, "width": ms.width, "scale": ms.scale, "seed": ms.seed}
                 for net, prefix in ((agent.policy, "pi"), (agent.value, "vf")) for i, ms in enumerate(net.masks)}
    meta = {
        "agent_config": _jsonable(dataclasses.asdict(agent.config)),
        "run_config": run_config or {},
        "rng_states": rng_states or {},
        "masks": mask_meta,
        **(extra or {}),
    }
    return Checkpoint(arrays, meta)


def _jsonable(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def agent_from_checkpoint(ckpt: Checkpoint) -> Agent:
    cfg = dict(ckpt.meta["agent_config"])
    cfg["hidden"] = tuple(cfg["hidden"])
    acfg = AgentConfig(**cfg)
    agent = Agent.build(acfg)
    params = agent.named_parameters()
    expected = {f"param.{n}" for n in params}
    stored = {n for n in ckpt.arrays if n.startswith("param.")}
    if expected != stored:
        raise CheckpointError(f"parameter names differ: missing {sorted(expected - stored)[:3]}, "
                              f"unexpected {sorted(stored - expected)[:3]}")
    for name, t in params.items():
        a = ckpt.arrays[f"param.{name}"]
        if a.shape != t.shape:
            raise CheckpointError(f"shape mismatch for {name}: {a.shape} vs {t.shape}")
        t.data = a.copy()
    for net, prefix in ((agent.policy, "pi"), (agent.value, "vf")):
        for i, ms in enumerate(net.masks):
            stored_masks = ckpt.arrays[f"mask.{prefix}.{i}"].copy()
            net.masks[i] = MaskSet(ms.k, ms.width, ms.scale, ms.seed, stored_masks)
    if agent.obs_rms is not None:
        agent.obs_rms = RunningMeanStd(acfg.obs_dim, ckpt.arrays["obs_rms.mean"].copy(),
                                       ckpt.arrays["obs_rms.var"].copy(), float(ckpt.arrays["obs_rms.count"][0]))
    return agent

