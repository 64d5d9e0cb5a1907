"""Versioned binary checkpoints.

Layout (all integers little-endian)::

    magic      8 bytes  b"GDCKPT\\x00\\x01"
    version    uint32
    length     uint64   byte length of the manifest
    manifest   UTF-8 JSON (sorted keys)
    arrays     raw float64 little-endian C-order blobs, in manifest order
    digest     32 bytes SHA-256 of every preceding byte

The version is checked straight after the fixed header, before the manifest
or any array is decoded.  The ranking network aliases the encoder and is
recorded as a link, never as a second copy.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fileio import atomic_write_bytes
from .networks import GanNetworks
from .optim import AdamState

MAGIC = b"GDCKPT\x00\x01"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sIQ")
_DIGEST = 32


class CheckpointError(IOError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    optimizers: dict[str, AdamState] = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    seed: int = 0
    step: int = 0
    pretrain_step: int = 0
    aliases: dict[str, str] = field(default_factory=lambda: {"ranking": "encoder"})
    meta: dict = field(default_factory=dict)

    def shared_view(self) -> dict[str, np.ndarray]:
        """Parameters including the alias names, which refer to the same arrays."""
        out = dict(self.params)
        for alias, target in self.aliases.items():
            prefix = target + "."
            for k, v in self.params.items():
                if k.startswith(prefix):
                    out[alias + "." + k[len(prefix):]] = v
        return out


def from_networks(nets: GanNetworks, optimizers: dict[str, AdamState] | None = None, config: dict | None = None,
                  seed: int = 0, step: int = 0, pretrain_step: int = 0, meta: dict | None = None) -> Checkpoint:
    params = {k: np.array(v, copy=True) for k, v in nets.state_dict().items()}
    opts = {}
    for name, st in (optimizers or {}).items():
        if st is not None:
            opts[name] = AdamState(st.lr, st.beta1, st.beta2, st.eps, st.step,
                                   {k: v.copy() for k, v in st.m.items()}, {k: v.copy() for k, v in st.v.items()})
    return Checkpoint(params, opts, dict(config or {}), seed, step, pretrain_step, meta=dict(meta or {}))


def _arrays(ckpt: Checkpoint) -> list[tuple[str, np.ndarray]]:
    out = [(f"param/{k}", v) for k, v in sorted(ckpt.params.items())]
    for oname, st in sorted(ckpt.optimizers.items()):
        out += [(f"opt/{oname}/m/{k}", v) for k, v in sorted(st.m.items())]
        out += [(f"opt/{oname}/v/{k}", v) for k, v in sorted(st.v.items())]
    return out


def encode(ckpt: Checkpoint) -> bytes:
    arrays = _arrays(ckpt)
    entries, blobs, offset = [], [], 0
    for name, arr in arrays:
        a = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset, "nbytes": a.nbytes})
        blobs.append(a.tobytes())
        offset += a.nbytes
    manifest = {
        "format_version": FORMAT_VERSION,
        "arrays": entries,
        "aliases": ckpt.aliases,
        "optimizers": {k: {"lr": s.lr, "beta1": s.beta1, "beta2": s.beta2, "eps": s.eps, "step": s.step}
                       for k, s in sorted(ckpt.optimizers.items())},
        "config": ckpt.config,
        "rng": {"seed": ckpt.seed, "step": ckpt.step, "pretrain_step": ckpt.pretrain_step},
        "meta": ckpt.meta,
    }
    mbytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = _HEADER.pack(MAGIC, FORMAT_VERSION, len(mbytes)) + mbytes + b"".join(blobs)
    return body + hashlib.sha256(body).digest()


def decode(data: bytes) -> Checkpoint:
    if len(data) < _HEADER.size:
        raise CorruptCheckpointError("checkpoint truncated inside the header")
    magic, version, mlen = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CorruptCheckpointError("not a checkpoint file (bad magic)")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version}, this build reads {FORMAT_VERSION}")
    if len(data) < _HEADER.size + mlen + _DIGEST:
        raise CorruptCheckpointError("checkpoint truncated")
    body, digest = data[:-_DIGEST], data[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptCheckpointError("checkpoint checksum mismatch")
    try:
        manifest = json.loads(body[_HEADER.size:_HEADER.size + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"unreadable manifest: {exc}") from exc
    base = _HEADER.size + mlen
    arrays: dict[str, np.ndarray] = {}
    for e in manifest["arrays"]:
        start, n = base + e["offset"], e["nbytes"]
        if start + n > len(body):
            raise CorruptCheckpointError(f"array {e['name']} extends past the end of the file")
        arrays[e["name"]] = np.frombuffer(body[start:start + n], dtype="<f8").astype(np.float64).reshape(e["shape"])
    params = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    opts = {}
    for oname, h in manifest["optimizers"].items():
        pre_m, pre_v = f"opt/{oname}/m/", f"opt/{oname}/v/"
        m = {k[len(pre_m):]: v for k, v in arrays.items() if k.startswith(pre_m)}
        v = {k[len(pre_v):]: a for k, a in arrays.items() if k.startswith(pre_v)}
        opts[oname] = AdamState(h["lr"], h["beta1"], h["beta2"], h["eps"], h["step"], m, v)
    rng = manifest["rng"]
    return Checkpoint(params, opts, manifest["config"], rng["seed"], rng["step"], rng["pretrain_step"],
                      manifest["aliases"], manifest["meta"])


def save_checkpoint(path: Path | str, ckpt: Checkpoint) -> Path:
    return atomic_write_bytes(path, encode(ckpt))


def load_checkpoint(path: Path | str) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from exc
    return decode(data)


def restore_networks(ckpt: Checkpoint, nets: GanNetworks) -> GanNetworks:
    nets.load_state_dict(ckpt.params)
    return nets


def detector_checkpoint(det, seed: int = 0) -> Checkpoint:
    """Container for a trained proposal detector (no aliases, no optimiser)."""
    from .config import to_dict
    params = {k: np.array(v, copy=True) for k, v in det.model.state_dict().items()}
    meta = {"kind": "detector", "n_categories": det.n_categories, "patch_size": det.patch_size,
            "channels": int(det.model.conv1.weight.shape[1]),
            "proposals": [list(b.as_tuple()) for b in det.proposals]}
    return Checkpoint(params, {}, to_dict(det.cfg), seed, 0, 0, aliases={}, meta=meta)


def restore_detector(ckpt: Checkpoint):
    from .config import from_dict
    from .detector import Detector, DetectorConfig, ProposalClassifier
    from .geometry import Box

    if ckpt.meta.get("kind") != "detector":
        raise CheckpointError("checkpoint does not hold a detector")
    cfg = from_dict(DetectorConfig, ckpt.config)
    m = ckpt.meta
    model = ProposalClassifier(m["n_categories"], m["channels"], m["patch_size"], cfg, np.random.default_rng(0))
    model.load_state_dict(ckpt.params)
    model.eval()
    props = [Box(*b) for b in m["proposals"]]
    return Detector(model, cfg, props, m["n_categories"], m["patch_size"])
