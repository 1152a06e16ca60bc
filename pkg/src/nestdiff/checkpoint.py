"""Binary container for bundles, encoders and sample traces.

Layout: ``b"NDM1"``, a little-endian uint32 format version, a uint64
header length, the UTF-8 JSON header, zero padding to an 8-byte
boundary, then the raw little-endian array payload.  The header lists
every array by name with dtype, shape, byte offset (relative to the
payload start) and byte length.

Weights and encoder arrays are stored as float32 and come back as
float64, so the precision boundary sits at the file: anything loaded
from a checkpoint saves and reloads bit for bit.  Schedule arrays,
preconditioning priors and trace latents are stored as float64.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .config import NestedConfig
from .denoiser import DenoiserNet, LinearPrior, attach_prior
from .encoder import EncoderModel, ScaleProjection
from .schedule import NoiseSchedule

MAGIC = b"NDM1"
VERSION = 1
_DTYPES = {"f4": "<f4", "f8": "<f8"}


class CheckpointError(ValueError):
    pass


def _atomic_write(path: Path, blob: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def pack(header: dict, arrays: list[tuple[str, str, np.ndarray]]) -> bytes:
    """Serialise a header and (name, dtype tag, array) triples."""
    entries, chunks, offset = [], [], 0
    for name, tag, arr in arrays:
        raw = np.ascontiguousarray(np.asarray(arr), dtype=_DTYPES[tag]).tobytes()
        entries.append({"name": name, "dtype": tag, "shape": list(np.shape(arr)), "offset": offset,
                        "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = dict(header, arrays=entries, payload_bytes=offset)
    text = json.dumps(header, sort_keys=True).encode("utf-8")
    pad = (-(len(MAGIC) + 12 + len(text))) % 8
    return MAGIC + struct.pack("<IQ", VERSION, len(text)) + text + b"\0" * pad + b"".join(chunks)


def unpack(blob: bytes) -> tuple[dict, dict]:
    if blob[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    if len(blob) < 16:
        raise CheckpointError("truncated header")
    version, hlen = struct.unpack("<IQ", blob[4:16])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(blob[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt header: {exc}") from None
    start = 16 + hlen + (-(16 + hlen)) % 8
    payload = blob[start:]
    if len(payload) != header.get("payload_bytes"):
        raise CheckpointError(f"payload is {len(payload)} bytes, header says {header.get('payload_bytes')}")
    arrays = {}
    for e in header["arrays"]:
        dt = np.dtype(_DTYPES[e["dtype"]])
        n = int(np.prod(e["shape"], dtype=np.int64)) * dt.itemsize
        if n != e["nbytes"] or e["offset"] + n > len(payload):
            raise CheckpointError(f"array {e['name']!r}: shape does not match its byte length")
        a = np.frombuffer(payload[e["offset"] : e["offset"] + n], dtype=dt).reshape(e["shape"])
        arrays[e["name"]] = a.astype(np.float64)
    return header, arrays


def read(path) -> tuple[dict, dict]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    return unpack(blob)


def _expect(header: dict, kind: str):
    if header.get("kind") != kind:
        raise CheckpointError(f"expected a {kind} checkpoint, found {header.get('kind')!r}")


# encoder

def _encoder_parts(enc: EncoderModel, prefix: str = "encoder/"):
    meta = {"image_size": enc.image_size, "d": enc.d, "fit_seed": enc.fit_seed, "kind": enc.kind,
            "shape_schedule": enc.shape_schedule,
            "scales": {str(M): enc.projection(M).scale for M in enc.patch_scales}}
    arrays = []
    for M in enc.patch_scales:
        p = enc.projection(M)
        arrays += [(f"{prefix}M{M}/mean", "f4", p.mean), (f"{prefix}M{M}/basis", "f4", p.basis)]
    return meta, arrays


def _encoder_from(meta: dict, arrays: dict, prefix: str = "encoder/") -> EncoderModel:
    projections = {
        int(M): ScaleProjection(arrays[f"{prefix}M{M}/mean"], arrays[f"{prefix}M{M}/basis"], float(s))
        for M, s in meta["scales"].items()
    }
    return EncoderModel(meta["image_size"], meta["d"], projections, meta["fit_seed"], meta["kind"],
                        meta["shape_schedule"])


def save_encoder(enc: EncoderModel, path, seed: int | None = None):
    meta, arrays = _encoder_parts(enc)
    _atomic_write(Path(path), pack({"kind": "encoder", "encoder": meta, "seed": seed}, arrays))


def load_encoder(path) -> EncoderModel:
    header, arrays = read(path)
    if header.get("kind") == "bundle":
        return _encoder_from(header["encoder"], arrays)
    _expect(header, "encoder")
    return _encoder_from(header["encoder"], arrays)


# bundle

def save_bundle(bundle, path, seed: int | None = None):
    cfg = bundle.config
    enc_meta, arrays = _encoder_parts(bundle.encoder)
    s = bundle.schedule
    arrays += [("schedule/alpha", "f8", s.alpha), ("schedule/beta", "f8", s.beta),
               ("schedule/increments", "f8", s.increments)]
    nets = {}
    for l, net in sorted(bundle.nets.items()):
        meta = {"d_in": net.d_in, "c_dim": net.c_dim, "time_dim": net.time_dim, "hidden": net.hidden,
                "cond_scale": net.cond_scale, "prior": None}
        arrays += [(f"net/{l}/{k}", "f4", net.params[k]) for k in net.param_names()]
        p = net.prior
        if p is not None:
            meta["prior"] = {"std": p.std, "cond_std": p.cond_std}
            arrays += [(f"prior/{l}/mean", "f8", p.mean), (f"prior/{l}/cond_mean", "f8", p.cond_mean),
                       (f"prior/{l}/cond_map", "f8", p.cond_map)]
        nets[str(l)] = meta
    metrics = np.asarray(bundle.metrics, dtype=np.float64).reshape(-1, 3)
    arrays.append(("train/metrics", "f8", metrics))
    header = {
        "kind": "bundle",
        "config": cfg.resolved(),
        "level_count": cfg.L,
        "schedule_kind": s.kind,
        "T": s.T,
        "encoder": enc_meta,
        "nets": nets,
        "seed": cfg.seed if seed is None else seed,
    }
    _atomic_write(Path(path), pack(header, arrays))


def load_bundle(path):
    from .trainer import ModelBundle

    header, arrays = read(path)
    _expect(header, "bundle")
    cfg = NestedConfig.from_dict(header["config"])
    schedule = NoiseSchedule(T=header["T"], alpha=arrays["schedule/alpha"], beta=arrays["schedule/beta"],
                             kind=header["schedule_kind"], increments=arrays["schedule/increments"])
    nets = {}
    for key, meta in header["nets"].items():
        l = int(key)
        params = {name.split("/")[-1]: a for name, a in arrays.items() if name.startswith(f"net/{l}/")}
        net = DenoiserNet(l, meta["d_in"], meta["c_dim"], meta["time_dim"], list(meta["hidden"]), params,
                          cond_scale=meta["cond_scale"])
        pm = meta["prior"]
        if pm is not None:
            prior = LinearPrior(arrays[f"prior/{l}/mean"], pm["std"], arrays[f"prior/{l}/cond_mean"],
                                arrays[f"prior/{l}/cond_map"].reshape(net.c_dim, net.d_in), pm["cond_std"])
            try:
                attach_prior(net, prior, schedule)
            except ValueError as exc:
                raise CheckpointError(f"level {l}: {exc}") from None
        if sorted(params) != sorted(net.param_names()):
            raise CheckpointError(f"level {l}: parameter set does not match the layer layout")
        for name, shape in zip(net.param_names(), _param_shapes(net)):
            if params[name].shape != shape:
                raise CheckpointError(f"level {l}: {name} has shape {params[name].shape}, expected {shape}")
        nets[l] = net
    metrics = [(int(a), int(b), float(c)) for a, b, c in arrays["train/metrics"]]
    bundle = ModelBundle(cfg, _encoder_from(header["encoder"], arrays), nets, schedule, metrics)
    bundle.check_complete()
    return bundle


def _param_shapes(net: DenoiserNet):
    shapes = []
    for a, b in net.layer_shapes():
        shapes += [(a, b), (b,)]
    return shapes + [(net.c_dim,)]


# traces

def save_traces(traces, path):
    arrays, items = [], []
    for j, tr in enumerate(traces):
        items.append({
            "L": tr.L,
            "levels": sorted(tr.z),
            "seeds": {str(l): s for l, s in tr.seeds.items()},
            "noise_levels": sorted(tr.cond_noise),
            "weights": {str(l): w for l, w in tr.weights.items()},
            "gamma": "inf" if np.isinf(tr.gamma) else tr.gamma,
            "inherited": list(tr.inherited),
            "image_size": tr.image_size,
        })
        arrays += [(f"trace/{j}/z/{l}", "f8", tr.z[l]) for l in sorted(tr.z)]
        arrays += [(f"trace/{j}/xi/{l}", "f8", tr.cond_noise[l]) for l in sorted(tr.cond_noise)]
    _atomic_write(Path(path), pack({"kind": "traces", "traces": items}, arrays))


def load_traces(path):
    from .sampler import SampleTrace

    header, arrays = read(path)
    _expect(header, "traces")
    out = []
    for j, it in enumerate(header["traces"]):
        out.append(SampleTrace(
            L=it["L"],
            z={l: arrays[f"trace/{j}/z/{l}"] for l in it["levels"]},
            seeds={int(l): int(s) for l, s in it["seeds"].items()},
            cond_noise={l: arrays[f"trace/{j}/xi/{l}"] for l in it["noise_levels"]},
            weights={int(l): float(w) for l, w in it["weights"].items()},
            gamma=float(it["gamma"]),
            inherited=tuple(it["inherited"]),
            image_size=it["image_size"],
        ))
    return out
