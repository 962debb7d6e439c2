"""Dataset plumbing: clip banks, latent encoding, batch sampling, disk format.

Scenes and motions come from small vocabularies so the text tokens
(scene code + motion code) genuinely describe the identity-irrelevant
content of the target clip. Each identity contributes several clips;
training pairs a target clip with a different reference clip of the same
identity.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import synthgen, tensorio
from .rng import substream

SCENE_VOCAB = 16
MOTION_VOCAB = 16
TEXT_PAD = SCENE_VOCAB + MOTION_VOCAB  # token ids: scenes, then motions, then pad
TEXT_VOCAB = TEXT_PAD + 2
TEXT_LEN = 4


@dataclass
class ClipRecord:
    clip: synthgen.SyntheticClip
    identity_seed: int
    scene_id: int
    motion_id: int
    latents: torch.Tensor         # (C, T, H/8, W/8) float32, scaled
    anchor_latents: torch.Tensor  # (C, 1, H/8, W/8) float32, scaled
    anchor_index: int
    text_ids: torch.Tensor        # (TEXT_LEN,) long


@dataclass
class ClipDataset:
    records: list
    by_identity: dict             # identity_seed -> record indices
    latent_scale: float
    latent_mean: np.ndarray       # (C, 1, H/8, W/8) calibration mean volume
    codec: synthgen.ToyCodec


def text_tokens(scene_id: int, motion_id: int) -> torch.Tensor:
    ids = [scene_id, SCENE_VOCAB + motion_id, TEXT_PAD, TEXT_PAD + 1]
    return torch.tensor(ids, dtype=torch.long)


def make_clip(identity_seed: int, scene_id: int, motion_id: int,
              T: int = 16, H: int = 64, W: int = 64) -> synthgen.SyntheticClip:
    identity = synthgen.gen_identity(identity_seed)
    motion = synthgen.random_motion(np.random.default_rng(10_000 + motion_id), T)
    background = synthgen.render_background(np.random.default_rng(20_000 + scene_id), H, W)
    return synthgen.render_clip(identity, motion, T, H, W, background)


_NORM_CACHE = {}


def codec_norm_stats(codec: synthgen.ToyCodec, T: int, H: int, W: int,
                     n_calib: int = 16):
    """Latent mean volume and across-clip std from fixed calibration clips.

    Raw codec latents are dominated by structure shared across all clips;
    flow matching cares about the part that varies. Centering with a
    calibration mean and scaling by the residual std puts the variable
    content on the same footing as the noise (the latent scale factor in
    any latent diffusion stack plays the same role). The calibration set
    depends only on the codec seed and the clip geometry, so every dataset
    built against the same codec is normalized identically.
    """
    key = (codec.seed, T, H, W, n_calib)
    if key not in _NORM_CACHE:
        zs = []
        for i in range(n_calib):
            seed = int(substream(codec.seed, f"calibration/{i}").integers(1 << 62))
            clip = make_clip(seed, i % SCENE_VOCAB, i % MOTION_VOCAB, T, H, W)
            zs.append(codec.encode(clip.frames))
        stack = np.stack(zs)
        mean = stack.mean(axis=(0, 2), keepdims=True)[0]  # (C, 1, H/8, W/8)
        std = float((stack - mean).std())
        _NORM_CACHE[key] = (mean, max(std, 1e-9))
    return _NORM_CACHE[key]


def build_dataset(root_seed: int, n_identities: int, clips_per_identity: int,
                  T: int = 16, H: int = 64, W: int = 64, codec_seed: int = 0,
                  latent_target_std: float = 1.5, identity_offset: int = 0) -> ClipDataset:
    """Deterministic in-memory dataset; identity seeds derive from the root seed."""
    rng = substream(root_seed, "data")
    codec = synthgen.ToyCodec(codec_seed)
    records = []
    by_identity = {}
    raw = []
    for i in range(n_identities):
        identity_seed = int(substream(root_seed, f"identity/{identity_offset + i}").integers(1 << 62))
        combos = set()
        while len(combos) < clips_per_identity:
            combos.add((int(rng.integers(SCENE_VOCAB)), int(rng.integers(MOTION_VOCAB))))
        for scene_id, motion_id in sorted(combos):
            clip = make_clip(identity_seed, scene_id, motion_id, T, H, W)
            anchor_index = synthgen.select_anchor_frame(clip)
            anchor = synthgen.neutralize_background(clip, anchor_index)
            z = codec.encode(clip.frames)
            z_img = codec.encode(anchor[None])
            raw.append((clip, identity_seed, scene_id, motion_id, z, z_img, anchor_index))
    mean, std = codec_norm_stats(codec, T, H, W)
    scale = latent_target_std / std
    for idx, (clip, identity_seed, scene_id, motion_id, z, z_img, anchor_index) in enumerate(raw):
        records.append(ClipRecord(
            clip=clip, identity_seed=identity_seed, scene_id=scene_id, motion_id=motion_id,
            latents=torch.from_numpy((z - mean) * scale).float(),
            anchor_latents=torch.from_numpy((z_img - mean) * scale).float(),
            anchor_index=anchor_index,
            text_ids=text_tokens(scene_id, motion_id),
        ))
        by_identity.setdefault(identity_seed, []).append(idx)
    return ClipDataset(records, by_identity, scale, mean, codec)


def shuffled_latents(record: ClipRecord, dataset: ClipDataset, n_frames: int,
                     rng: np.random.Generator) -> torch.Tensor:
    """Reference latents from an order-destroyed clip (ablation path)."""
    from .training import shuffle_reference  # local import to avoid a cycle

    clip = shuffle_reference(record.clip, n_frames, rng)
    z = (dataset.codec.encode(clip.frames) - dataset.latent_mean) * dataset.latent_scale
    return torch.from_numpy(z).float()


def reference_latents(record: ClipRecord, dataset: ClipDataset, mode: str,
                      rng: np.random.Generator) -> torch.Tensor:
    if mode == "shuffled":
        return shuffled_latents(record, dataset, len(record.clip.frames), rng)
    return record.latents


@dataclass
class Batch:
    z1: torch.Tensor
    ref_latents: torch.Tensor
    anchor_latents: torch.Tensor
    text_ids: torch.Tensor
    identity: np.ndarray  # (B, d_id) ground truth for probes


def sample_batch(dataset: ClipDataset, batch_size: int, rng: np.random.Generator,
                 reference_mode: str = "ordered") -> Batch:
    """Pair each target clip with a distinct same-identity reference clip."""
    identities = sorted(dataset.by_identity)
    z1, refs, anchors, texts, ids = [], [], [], [], []
    for _ in range(batch_size):
        ident = identities[int(rng.integers(len(identities)))]
        idxs = dataset.by_identity[ident]
        target_i = int(rng.integers(len(idxs)))
        ref_i = int(rng.integers(len(idxs) - 1)) if len(idxs) > 1 else 0
        if len(idxs) > 1 and ref_i >= target_i:
            ref_i += 1
        target = dataset.records[idxs[target_i]]
        ref = dataset.records[idxs[ref_i]]
        z1.append(target.latents)
        refs.append(reference_latents(ref, dataset, reference_mode, rng))
        anchors.append(ref.anchor_latents)
        texts.append(target.text_ids)
        ids.append(target.clip.identity.values)
    return Batch(torch.stack(z1), torch.stack(refs), torch.stack(anchors),
                 torch.stack(texts), np.array(ids))


def write_dataset(dataset: ClipDataset, out_dir) -> None:
    """One tensor file per clip (frames + mask) plus a JSON-lines index."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "index.jsonl", "w") as index:
        for i, rec in enumerate(dataset.records):
            frames_file = f"clip_{i:05d}_frames.slid"
            mask_file = f"clip_{i:05d}_mask.slid"
            tensorio.write_tensor(out_dir / frames_file, rec.clip.frames.astype(np.float32))
            tensorio.write_tensor(out_dir / mask_file,
                                  rec.clip.background_mask.astype(np.float32))
            motion = rec.clip.motion
            index.write(json.dumps({
                "clip_id": i,
                "frames_file": frames_file,
                "mask_file": mask_file,
                "identity_seed": rec.identity_seed,
                "identity": rec.clip.identity.values.tolist(),
                "scene_id": rec.scene_id,
                "motion_id": rec.motion_id,
                "anchor_index": rec.anchor_index,
                "motion_summary": {
                    "canonical_index": motion.canonical_index,
                    "mean_abs_translation": float(np.abs([motion.tx, motion.ty]).mean()),
                    "mean_abs_rotation": float(np.abs(motion.rot).mean()),
                    "scale_range": [float(motion.scale.min()), float(motion.scale.max())],
                },
            }) + "\n")
