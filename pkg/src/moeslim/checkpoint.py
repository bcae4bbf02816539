"""Single-file checkpoint container.

Layout, all little-endian regardless of host:

    magic "SMOE" | version u32 | manifest_len u64 | manifest JSON (UTF-8)
    | raw tensor payloads | sha256 over everything before it

The manifest carries the model config, a tensor directory (name, shape, dtype,
offset, length; offsets relative to the payload start, non-overlapping), and
optional sections (sensitivity report, prune decision, train state, RNG
states). JSON is serialized with sorted keys, so save -> load -> save is
byte-identical.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

from .distill import TrainState
from .model import Model, ModelConfig, model_from_arrays
from .pruning import PruneDecision, SensitivityReport

MAGIC = b"SMOE"
FORMAT_VERSION = 1
_CHECKSUM_LEN = 32
_ALLOWED_DTYPES = {"<f8", "<f4", "<i8", "<i4", "<u4", "<u8"}


class CheckpointError(ValueError):
    pass


def _le(arr: np.ndarray) -> np.ndarray:
    dt = arr.dtype.newbyteorder("<")
    if dt.str not in _ALLOWED_DTYPES:
        raise CheckpointError(f"unsupported tensor dtype {arr.dtype}")
    return np.ascontiguousarray(arr.astype(dt, copy=False))


def _collect_tensors(model: Model, report: SensitivityReport | None,
                     state: TrainState | None) -> list[tuple[str, np.ndarray]]:
    out = [(name, p.tensor.data) for name, p in model.registry.items()]
    if report is not None:
        for name in sorted(report.param_scores):
            out.append((f"__report__/param/{name}", report.param_scores[name]))
        for (i, e) in sorted(report.neuron_scores):
            out.append((f"__report__/neuron/{i}/{e}", report.neuron_scores[(i, e)]))
        for i in sorted(report.ffn_scores):
            out.append((f"__report__/ffn/{i}", report.ffn_scores[i]))
        for i in sorted(report.group_scores):
            out.append((f"__report__/group/{i}", report.group_scores[i]))
        for i in sorted(report.expert_scores):
            out.append((f"__report__/expert/{i}", report.expert_scores[i]))
        for i in sorted(report.freq_counts):
            out.append((f"__report__/freq/{i}", report.freq_counts[i]))
    if state is not None:
        for name in sorted(state.m):
            out.append((f"__state__/m/{name}", state.m[name]))
        for name in sorted(state.v):
            out.append((f"__state__/v/{name}", state.v[name]))
        out.append(("__state__/loss_history", np.asarray(state.loss_history, dtype=np.float64)))
    return out


def save_checkpoint(model: Model, path, *, report: SensitivityReport | None = None,
                    decision: PruneDecision | None = None,
                    state: TrainState | None = None) -> dict:
    """Write the container; returns the manifest dict."""
    tensors = _collect_tensors(model, report, state)
    directory = []
    payloads = []
    offset = 0
    for name, arr in tensors:
        arr = _le(arr)
        blob = arr.tobytes(order="C")
        directory.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str,
                          "offset": offset, "length": len(blob)})
        payloads.append(blob)
        offset += len(blob)

    sections: dict = {}
    if report is not None:
        sections["report"] = {"loss_kind": report.loss_kind, "n_batches": report.n_batches,
                              "expert_score_mode": report.expert_score_mode,
                              "config": report.config.to_dict()}
    if decision is not None:
        sections["decision"] = decision.to_dict()
    if state is not None:
        rng_state = state.rng.bit_generator.state if state.rng is not None else None
        sections["train_state"] = {"step": state.step, "rng": rng_state}

    manifest = {"format_version": FORMAT_VERSION,
                "model_config": model.config.to_dict(),
                "tensors": directory,
                "sections": sections}
    mblob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(mblob)) + mblob + b"".join(payloads)
    digest = hashlib.sha256(body).digest()
    with open(path, "wb") as f:
        f.write(body)
        f.write(digest)
    return manifest


@dataclass
class LoadedCheckpoint:
    model: Model
    manifest: dict
    report: SensitivityReport | None
    decision: PruneDecision | None
    state: TrainState | None


def load_checkpoint(path, expect_arch: str | None = None) -> LoadedCheckpoint:
    blob = open(path, "rb").read()
    if len(blob) < len(MAGIC) + 12 + _CHECKSUM_LEN:
        raise CheckpointError("container too short")
    body, digest = blob[:-_CHECKSUM_LEN], blob[-_CHECKSUM_LEN:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checksum mismatch: container corrupted")
    if body[:4] != MAGIC:
        raise CheckpointError(f"bad magic {body[:4]!r}")
    version, mlen = struct.unpack("<IQ", body[4:16])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format version {version}")
    if 16 + mlen > len(body):
        raise CheckpointError("manifest extends past container")
    manifest = json.loads(body[16:16 + mlen].decode("utf-8"))
    payload = body[16 + mlen:]

    directory = manifest["tensors"]
    last_end = 0
    for entry in sorted(directory, key=lambda d: d["offset"]):
        if entry["offset"] < last_end:
            raise CheckpointError(f"overlapping tensor payloads at {entry['name']}")
        last_end = entry["offset"] + entry["length"]
    if last_end != len(payload):
        raise CheckpointError(
            f"payload length {len(payload)} disagrees with directory ({last_end})")

    arrays: dict[str, np.ndarray] = {}
    for entry in directory:
        dt = np.dtype(entry["dtype"])
        raw = payload[entry["offset"]:entry["offset"] + entry["length"]]
        if len(raw) != int(np.prod(entry["shape"], dtype=np.int64)) * dt.itemsize:
            raise CheckpointError(f"tensor {entry['name']}: length/shape disagreement")
        arrays[entry["name"]] = np.frombuffer(raw, dtype=dt).reshape(entry["shape"]).copy()

    config = ModelConfig.from_dict(manifest["model_config"])
    if expect_arch is not None and config.arch_kind != expect_arch:
        raise CheckpointError(
            f"checkpoint is arch_kind={config.arch_kind!r}, expected {expect_arch!r}")
    model_arrays = {k: v for k, v in arrays.items() if not k.startswith("__")}
    model = model_from_arrays(config, model_arrays)

    sections = manifest.get("sections", {})
    report = None
    if "report" in sections:
        meta = sections["report"]
        rep_cfg = ModelConfig.from_dict(meta["config"])
        report = SensitivityReport(
            param_scores={k.split("/", 2)[2]: v for k, v in arrays.items()
                          if k.startswith("__report__/param/")},
            loss_kind=meta["loss_kind"], config=rep_cfg, n_batches=meta["n_batches"],
            expert_score_mode=meta.get("expert_score_mode"))
        for k, v in arrays.items():
            if k.startswith("__report__/neuron/"):
                _, _, i, e = k.split("/")
                report.neuron_scores[(int(i), int(e))] = v
            elif k.startswith("__report__/ffn/"):
                report.ffn_scores[int(k.rsplit("/", 1)[1])] = v
            elif k.startswith("__report__/group/"):
                report.group_scores[int(k.rsplit("/", 1)[1])] = v
            elif k.startswith("__report__/expert/"):
                report.expert_scores[int(k.rsplit("/", 1)[1])] = v
            elif k.startswith("__report__/freq/"):
                report.freq_counts[int(k.rsplit("/", 1)[1])] = v

    decision = None
    if "decision" in sections:
        decision = PruneDecision.from_dict(sections["decision"])

    state = None
    if "train_state" in sections:
        meta = sections["train_state"]
        m = {k.split("/", 2)[2]: v for k, v in arrays.items() if k.startswith("__state__/m/")}
        v_ = {k.split("/", 2)[2]: v for k, v in arrays.items() if k.startswith("__state__/v/")}
        rng = None
        if meta.get("rng") is not None:
            rng = np.random.default_rng(0)
            rng.bit_generator.state = meta["rng"]
        state = TrainState(meta["step"], m, v_,
                           arrays.get("__state__/loss_history", np.zeros(0)).tolist(), rng)

    return LoadedCheckpoint(model, manifest, report, decision, state)
