"""Binary container format (datasets and checkpoints) plus metrics CSV.

Layout, all integers little-endian:
  magic "CM2N" | u32 version | u32 metadata length | metadata JSON (UTF-8)
  | u32 tensor count | tensors

Each tensor: u32 name length | name UTF-8 | u32 rank | u64 per dim
| raw float64 values (row-major). Writes go to a temp file and are
renamed into place, so readers never see partial files.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct

import numpy as np

from . import models, synthetic, trainer
from .losses import LossWeights
from .models import ContinualState
from .synthetic import LatentActionSpec, ModalityChannel, SyntheticDataset
from .trainer import TrainConfig

MAGIC = b"CM2N"
VERSION = 1

METRICS_HEADER = ("stage,epoch,lr,loss_total,loss_cls,loss_text,"
                  "loss_prompt,val_top1,val_mean1")


class FormatError(ValueError):
    """File is not a valid container or is inconsistent."""


class ConfigMismatchError(ValueError):
    """Checkpoint config hash does not match the requested config."""


def _atomic_write(path, data: bytes):
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def write_container(path, metadata: dict, tensors: dict):
    """Serialize named float64 tensors with a JSON metadata block."""
    parts = [MAGIC, struct.pack("<I", VERSION)]
    meta = json.dumps(metadata, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(meta)))
    parts.append(meta)
    parts.append(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    _atomic_write(path, b"".join(parts))


def read_container(path):
    """Returns (metadata dict, tensors dict)."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic bytes")
    off = 4
    (version,) = struct.unpack_from("<I", buf, off)
    off += 4
    if version != VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    (mlen,) = struct.unpack_from("<I", buf, off)
    off += 4
    metadata = json.loads(buf[off:off + mlen].decode("utf-8"))
    off += mlen
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", buf, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}Q", buf, off)
        off += 8 * rank
        n = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(buf, dtype="<f8", count=n, offset=off)
        off += 8 * n
        tensors[name] = arr.reshape(shape).astype(np.float64)
    if off != len(buf):
        raise FormatError(f"{path}: trailing bytes after tensor block")
    return metadata, tensors


def file_hash(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


# ---------------------------------------------------------------------------
# config round-trip

def config_text(cfg: TrainConfig) -> str:
    return json.dumps(cfg.to_dict(), sort_keys=True)


def config_hash(cfg: TrainConfig) -> str:
    return hashlib.sha256(config_text(cfg).encode("utf-8")).hexdigest()


def config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    if isinstance(d.get("weights"), dict):
        d["weights"] = LossWeights(**d["weights"])
    return TrainConfig(**d)


# ---------------------------------------------------------------------------
# datasets

def save_dataset(data: SyntheticDataset, path):
    spec = data.spec
    metadata = {
        "kind": "dataset",
        "seed": data.seed,
        "num_classes": spec.num_classes,
        "d_latent": spec.d_latent,
        "separation": spec.separation,
        "sigma_x": spec.sigma_x,
        "frames": spec.frames,
        "spec_seed": spec.seed,
        "class_names": data.class_names,
        "channels": [{"modality_id": ch.modality_id, "sigma": ch.sigma,
                      "nonlinear": ch.nonlinear, "rank": ch.rank}
                     for ch in data.channels],
    }
    tensors = {
        "labels": data.labels.astype(np.float64),
        "split": data.split.astype(np.float64),
        "class_means": spec.class_means,
    }
    for ch in data.channels:
        tensors[f"channel/{ch.modality_id}/A"] = ch.matrix
        tensors[f"channel/{ch.modality_id}/b"] = ch.bias
    for mid, obs in data.observations.items():
        for i in range(obs.shape[0]):
            tensors[f"sample/{i}/m{mid}"] = obs[i]
    write_container(path, metadata, tensors)


def load_dataset(path) -> SyntheticDataset:
    meta, tensors = read_container(path)
    if meta.get("kind") != "dataset":
        raise FormatError(f"{path}: not a dataset container")
    spec = LatentActionSpec(num_classes=meta["num_classes"],
                            d_latent=meta["d_latent"],
                            separation=meta["separation"],
                            sigma_x=meta["sigma_x"],
                            frames=meta["frames"],
                            seed=meta["spec_seed"],
                            class_means=tensors["class_means"])
    channels = []
    for ch in meta["channels"]:
        channels.append(ModalityChannel(
            modality_id=ch["modality_id"],
            matrix=tensors[f"channel/{ch['modality_id']}/A"],
            bias=tensors[f"channel/{ch['modality_id']}/b"],
            sigma=ch["sigma"], nonlinear=ch["nonlinear"], rank=ch["rank"]))
    labels = tensors["labels"].astype(np.int64)
    split = tensors["split"].astype(np.int64)
    n = len(labels)
    observations = {}
    for ch in channels:
        mid = ch.modality_id
        observations[mid] = np.stack(
            [tensors[f"sample/{i}/m{mid}"] for i in range(n)])
    return SyntheticDataset(spec=spec, channels=channels,
                            observations=observations, labels=labels,
                            split=split, seed=meta["seed"],
                            class_names=list(meta["class_names"]))


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(state: ContinualState, cfg: TrainConfig, path,
                    d_obs_by_modality: dict):
    metadata = {
        "kind": "checkpoint",
        "modality_order": list(cfg.modality_order),
        "completed_stages": len(state.stages),
        "config_hash": config_hash(cfg),
        "config_text": config_text(cfg),
        "class_names": state.text_embedder.vocab,
        "d_obs": {str(k): int(v) for k, v in d_obs_by_modality.items()},
    }
    tensors = {p.name: p.value for p in state.all_params()}
    write_container(path, metadata, tensors)


def load_checkpoint(path, expect_cfg: TrainConfig = None):
    """Rebuild a ContinualState (all loaded stages frozen). Returns
    (state, cfg, metadata)."""
    meta, tensors = read_container(path)
    if meta.get("kind") != "checkpoint":
        raise FormatError(f"{path}: not a checkpoint container")
    cfg = config_from_dict(json.loads(meta["config_text"]))
    if expect_cfg is not None and config_hash(expect_cfg) != meta["config_hash"]:
        raise ConfigMismatchError(
            "checkpoint was produced with a different configuration "
            f"(hash {meta['config_hash'][:12]}... vs "
            f"{config_hash(expect_cfg)[:12]}...)")

    state = trainer.new_state(cfg, meta["class_names"])
    k = meta["completed_stages"]
    d_obs = {int(m): v for m, v in meta["d_obs"].items()}
    for stage_idx in range(k):
        modality = cfg.modality_order[stage_idx]
        seed = trainer._stage_seed(cfg.seed, stage_idx)
        stage = models.init_stage(modality, d_obs[modality], cfg.d_hidden,
                                  cfg.d_feat, cfg.d_unified, seed,
                                  linear=cfg.linear)
        for i in range(stage_idx):
            mh = models.init_mapping_head(cfg.modality_order[i], modality,
                                          cfg.d_feat, cfg.d_hidden,
                                          cfg.d_feat, seed, linear=cfg.linear)
            state.register_mapping_head(mh)
        state.register_stage(stage)
    if k >= 1:
        models._set_frozen(state.text_head.params())
    for p in state.all_params():
        if p.name not in tensors:
            raise FormatError(f"{path}: missing tensor {p.name!r}")
        if tensors[p.name].shape != p.value.shape:
            raise FormatError(f"{path}: shape mismatch for {p.name!r}")
        p.value[...] = tensors[p.name]
    for mh in state.mapping_heads.values():
        models._set_frozen(mh.params())
    return state, cfg, meta


# ---------------------------------------------------------------------------
# metrics CSV

def format_metrics_row(row) -> str:
    return (f"{row.stage},{row.epoch},{row.lr:.17g},{row.loss_total:.17g},"
            f"{row.loss_cls:.17g},{row.loss_text:.17g},"
            f"{row.loss_prompt:.17g},{row.val_top1:.17g},"
            f"{row.val_mean1:.17g}")


def append_metrics(path, rows):
    new_file = not os.path.exists(path)
    with open(path, "a", encoding="utf-8", newline="\n") as fh:
        if new_file:
            fh.write(METRICS_HEADER + "\n")
        for row in rows:
            fh.write(format_metrics_row(row) + "\n")
