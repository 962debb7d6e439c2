"""Procedural identity clips with known ground truth, plus a toy latent codec.

A subject is an ellipse body with two dark "part" blobs. Six identity
components control static appearance (colors, aspect, part layout, size);
the last two control only the motion signature (harmonic mix and
amplitude of the parts' oscillation), so temporal order carries identity
information that no single frame does.

The codec is a fixed seed-deterministic linear map on non-overlapping
8x8 patches with orthonormal projection rows; decode is its transpose.
"""

from dataclasses import dataclass

import numpy as np

D_ID = 8
PATCH = 8

# Index map for IdentityCode components.
ID_COLOR_A = 0
ID_COLOR_B = 1
ID_PART_COLOR = 2
ID_ASPECT = 3
ID_PART_DY = 4
ID_SIZE = 5
ID_MOTION_MIX = 6   # motion-only: harmonic mixture of the oscillation
ID_MOTION_AMP = 7   # motion-only: oscillation amplitude

CANONICAL_POSE = (0.0, 0.0, 0.0, 1.0, 0.0)  # tx, ty, rot, scale, phase

# Fixed color basis mapping (id0, id1) to body RGB. Column norms are kept
# small enough that the clip bounds in subject_params never activate, so
# body color is exactly affine in the identity code.
_BODY_COLOR_BASIS = np.array([[0.16, 0.08], [-0.10, 0.14], [0.06, -0.16]])


@dataclass(frozen=True)
class IdentityCode:
    values: np.ndarray  # (8,) in [-1, 1]

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != (D_ID,):
            raise ValueError(f"identity code must have shape ({D_ID},), got {v.shape}")
        if np.any(np.abs(v) > 1.0):
            raise ValueError("identity components must lie in [-1, 1]")
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class MotionScript:
    tx: np.ndarray      # (T,) in [-0.3, 0.3] of frame width
    ty: np.ndarray      # (T,)
    rot: np.ndarray     # (T,) radians
    scale: np.ndarray   # (T,) in [0.7, 1.3]
    phase: np.ndarray   # (T,) expression phase in [0, 2pi)
    canonical_index: int

    def __post_init__(self):
        n = len(self.tx)
        for name in ("ty", "rot", "scale", "phase"):
            if len(getattr(self, name)) != n:
                raise ValueError("motion script fields must share a length")
        c = self.canonical_index
        pose_c = (self.tx[c], self.ty[c], self.rot[c], self.scale[c], self.phase[c])
        if not np.allclose(pose_c, CANONICAL_POSE):
            raise ValueError("pose at the canonical index must be canonical")

    def __len__(self):
        return len(self.tx)

    def pose(self, t):
        return (self.tx[t], self.ty[t], self.rot[t], self.scale[t], self.phase[t])


@dataclass(frozen=True)
class SyntheticClip:
    frames: np.ndarray           # (T, 3, H, W) float32 in [0, 1]
    identity: IdentityCode
    motion: MotionScript
    background_mask: np.ndarray  # (T, H, W) bool, True on background


def gen_identity(seed: int) -> IdentityCode:
    rng = np.random.default_rng(int(seed) & ((1 << 64) - 1))
    return IdentityCode(rng.uniform(-1.0, 1.0, D_ID))


def subject_params(identity: IdentityCode) -> dict:
    """Derived render parameters; single source of truth for tests too."""
    v = identity.values
    body_rgb = np.clip(0.60 + _BODY_COLOR_BASIS @ v[[ID_COLOR_A, ID_COLOR_B]], 0.36, 0.9)
    part_rgb = np.clip(0.17 + 0.12 * v[ID_PART_COLOR] + 0.03 * v[ID_PART_COLOR] * np.array([1.0, 0.0, -1.0]), 0.02, 0.34)
    return {
        "body_rgb": body_rgb,
        "part_rgb": part_rgb,
        "semi_a": 0.48 * (1.0 + 0.30 * v[ID_ASPECT]),
        "semi_b": 0.60 * (1.0 - 0.30 * v[ID_ASPECT]),
        "part_dy": 0.03 + 0.16 * v[ID_PART_DY],
        "part_dx": 0.22,
        "part_radius": 0.18,
        "size": 1.0 + 0.25 * v[ID_SIZE],
        "osc_mix": 0.5 * (v[ID_MOTION_MIX] + 1.0),     # weight on the 3rd harmonic
        "osc_amp": 0.12 + 0.08 * v[ID_MOTION_AMP],
    }


def oscillation(identity: IdentityCode, phase):
    """Vertical part offset driven by expression phase; periodic in 2pi."""
    p = subject_params(identity)
    u = p["osc_mix"]
    return p["osc_amp"] * ((1.0 - u) * np.sin(phase) + u * np.sin(3.0 * phase))


def random_motion(rng: np.random.Generator, T: int) -> MotionScript:
    """Smooth random pose trajectory re-anchored so one frame is canonical."""
    def smooth(scale):
        steps = rng.normal(0.0, scale, T)
        path = np.cumsum(steps)
        kernel = np.ones(3) / 3.0
        return np.convolve(path, kernel, mode="same")

    c = int(rng.integers(T))
    tx = smooth(0.04)
    ty = smooth(0.04)
    rot = smooth(0.05)
    scale = 1.0 + smooth(0.02)
    omega = rng.uniform(0.25, 0.7)
    phase = rng.uniform(0.0, 2 * np.pi) + omega * np.arange(T)

    tx = np.clip(tx - tx[c], -0.15, 0.15)
    ty = np.clip(ty - ty[c], -0.15, 0.15)
    rot = np.clip(rot - rot[c], -0.25, 0.25)
    scale = np.clip(scale / scale[c], 0.9, 1.1)
    phase = np.mod(phase - phase[c], 2 * np.pi)
    return MotionScript(tx, ty, rot, scale, phase, c)


def static_motion(T: int, canonical_index: int = 0) -> MotionScript:
    zeros = np.zeros(T)
    return MotionScript(zeros, zeros, zeros.copy(), np.ones(T), zeros.copy(), canonical_index)


def render_background(scene_rng: np.random.Generator, H: int, W: int) -> np.ndarray:
    """Pale per-scene gradient, (3, H, W); independent of identity."""
    base = scene_rng.uniform(0.80, 0.86, 3)
    gx = scene_rng.uniform(-0.03, 0.03, 3)
    gy = scene_rng.uniform(-0.03, 0.03, 3)
    y, x = np.meshgrid(np.linspace(-1, 1, H), np.linspace(-1, 1, W), indexing="ij")
    bg = base[:, None, None] + gx[:, None, None] * x + gy[:, None, None] * y
    return np.clip(bg, 0.5, 0.98)


def _render_frame(params, pose, osc, background):
    tx, ty, rot, scale, _ = pose
    _, H, W = background.shape
    y, x = np.meshgrid(np.linspace(-1, 1, H), np.linspace(-1, 1, W), indexing="ij")
    # World -> subject frame.
    xs = x - 2.0 * tx
    ys = y - 2.0 * ty
    cos_r, sin_r = np.cos(-rot), np.sin(-rot)
    xr = (cos_r * xs - sin_r * ys) / scale
    yr = (sin_r * xs + cos_r * ys) / scale

    size = params["size"]
    a = params["semi_a"] * size
    b = params["semi_b"] * size
    edge = 0.08
    body_alpha = np.clip(0.5 + (1.0 - (xr / a) ** 2 - (yr / b) ** 2) / (2 * edge), 0.0, 1.0)

    r_p = params["part_radius"] * size
    dy = (params["part_dy"] + osc) * size
    part_alpha = np.zeros_like(body_alpha)
    for sx in (-1.0, 1.0):
        d = np.hypot(xr - sx * params["part_dx"] * size, yr - dy)
        part_alpha = np.maximum(part_alpha, np.clip(0.5 + (r_p - d) / (2 * 0.03), 0.0, 1.0))

    img = background.copy()
    img = img * (1 - body_alpha) + params["body_rgb"][:, None, None] * body_alpha
    img = img * (1 - part_alpha) + params["part_rgb"][:, None, None] * part_alpha
    subject = (body_alpha > 0.5) | (part_alpha > 0.5)
    return img, ~subject


def render_clip(identity: IdentityCode, motion: MotionScript, T: int, H: int, W: int,
                background: np.ndarray | None = None) -> SyntheticClip:
    """Render the subject over a background; deterministic per (inputs)."""
    if T < 2 or H < 8 or W < 8:
        raise ValueError(f"invalid clip dims T={T}, H={H}, W={W}")
    if len(motion) != T:
        raise ValueError(f"motion length {len(motion)} != T={T}")
    if background is None:
        background = np.full((3, H, W), 0.85)
    params = subject_params(identity)
    osc = oscillation(identity, motion.phase)
    frames = np.empty((T, 3, H, W), dtype=np.float32)
    masks = np.empty((T, H, W), dtype=bool)
    for t in range(T):
        img, bg_mask = _render_frame(params, motion.pose(t), osc[t], background)
        frames[t] = np.clip(img, 0.0, 1.0)
        masks[t] = bg_mask
    return SyntheticClip(frames, identity, motion, masks)


def pose_distance(motion: MotionScript) -> np.ndarray:
    """Per-frame L2 distance of the pose to the canonical pose."""
    dphase = np.minimum(motion.phase % (2 * np.pi), 2 * np.pi - motion.phase % (2 * np.pi))
    return np.sqrt(motion.tx ** 2 + motion.ty ** 2 + motion.rot ** 2
                   + (motion.scale - 1.0) ** 2 + dphase ** 2)


def select_anchor_frame(clip: SyntheticClip) -> int:
    """Frame nearest to the canonical pose; ties broken by smallest index."""
    return int(np.argmin(pose_distance(clip.motion)))


def neutralize_background(clip: SyntheticClip, idx: int) -> np.ndarray:
    if not 0 <= idx < len(clip.frames):
        raise ValueError(f"frame index {idx} out of range")
    frame = clip.frames[idx].copy()
    frame[:, clip.background_mask[idx]] = 1.0
    return frame


class ToyCodec:
    """Frozen linear stand-in for the latent codec.

    Non-overlapping 8x8 spatial patches are projected to `channels` values
    by a fixed matrix with orthonormal rows; decode uses the transpose, so
    encode . decode . encode == encode exactly up to roundoff.
    """

    def __init__(self, seed: int = 0, channels: int = 4):
        self.seed = seed
        self.channels = channels
        rng = np.random.default_rng(seed)
        g = rng.normal(size=(3 * PATCH * PATCH, channels))
        q, _ = np.linalg.qr(g)
        self.proj = q.T  # (channels, 192), orthonormal rows

    def encode(self, frames: np.ndarray) -> np.ndarray:
        """(T, 3, H, W) -> (channels, T, H/8, W/8)."""
        T, C, H, W = frames.shape
        if C != 3 or H % PATCH or W % PATCH:
            raise ValueError(f"frames must be (T, 3, 8k, 8k), got {frames.shape}")
        hp, wp = H // PATCH, W // PATCH
        x = frames.reshape(T, 3, hp, PATCH, wp, PATCH)
        x = x.transpose(0, 2, 4, 1, 3, 5).reshape(T, hp, wp, 3 * PATCH * PATCH)
        z = x @ self.proj.T
        return z.transpose(3, 0, 1, 2).astype(np.float64)

    def decode(self, latents: np.ndarray) -> np.ndarray:
        """(channels, T, H/8, W/8) -> (T, 3, H, W)."""
        c, T, hp, wp = latents.shape
        if c != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {c}")
        z = latents.transpose(1, 2, 3, 0)
        x = z @ self.proj
        x = x.reshape(T, hp, wp, 3, PATCH, PATCH).transpose(0, 3, 1, 4, 2, 5)
        return x.reshape(T, 3, hp * PATCH, wp * PATCH)


def clip_statistics(clip: SyntheticClip) -> np.ndarray:
    """Hand-computed per-clip statistics that expose every identity axis.

    Used by the identity-separability check; mixes static appearance
    stats with pose-corrected part-trajectory stats.
    """
    frames = clip.frames.astype(np.float64)
    subject = ~clip.background_mask
    T = len(frames)

    sub_px = np.concatenate([frames[t][:, subject[t]].T for t in range(T)])
    color_mean = sub_px.mean(axis=0)
    color_std = sub_px.std(axis=0)
    area = subject.mean()

    lum = frames.mean(axis=1)
    dark = subject & (lum < 0.32)
    dark_px = np.concatenate([frames[t][:, dark[t]].T for t in range(T)]) if dark.any() else np.zeros((1, 3))
    dark_mean = dark_px.mean(axis=0)

    H, W = subject.shape[1:]
    yy, xx = np.meshgrid(np.linspace(-1, 1, H), np.linspace(-1, 1, W), indexing="ij")
    size_est = np.sqrt(subject[0].mean() * 2.0 / (np.pi * 0.12) + 1e-9)

    # Pose-derotated mask variances recover the body axes with sign.
    var_x = np.zeros(T)
    var_y = np.zeros(T)
    for t in range(T):
        m = subject[t]
        if not m.any():
            continue
        tx, ty, rot, scale, _ = clip.motion.pose(t)
        dx, dy_ = xx[m] - xx[m].mean(), yy[m] - yy[m].mean()
        cos_r, sin_r = np.cos(-rot), np.sin(-rot)
        xr = (cos_r * dx - sin_r * dy_) / scale
        yr = (sin_r * dx + cos_r * dy_) / scale
        var_x[t] = (xr ** 2).mean()
        var_y[t] = (yr ** 2).mean()
    ax_x, ax_y = var_x.mean(), var_y.mean()

    # Pose-corrected dark-part offset trajectory.
    rel = np.zeros((T, 2))
    for t in range(T):
        if not dark[t].any() or not subject[t].any():
            continue
        dcx, dcy = xx[dark[t]].mean(), yy[dark[t]].mean()
        scx, scy = xx[subject[t]].mean(), yy[subject[t]].mean()
        tx, ty, rot, scale, _ = clip.motion.pose(t)
        dxw, dyw = dcx - scx, dcy - scy
        cos_r, sin_r = np.cos(-rot), np.sin(-rot)
        rel[t, 0] = (cos_r * dxw - sin_r * dyw) / (scale * size_est)
        rel[t, 1] = (sin_r * dxw + cos_r * dyw) / (scale * size_est)

    dy = rel[:, 1] - rel[:, 1].mean()
    phi = clip.motion.phase
    s1, s3 = np.sin(phi) - np.sin(phi).mean(), np.sin(3 * phi) - np.sin(3 * phi).mean()
    a1 = dy @ s1 / max(s1 @ s1, 1e-9)
    a3 = dy @ s3 / max(s3 @ s3, 1e-9)
    mix_est = abs(a3) / (abs(a1) + abs(a3) + 1e-9)
    amp_est = np.hypot(a1, a3)

    return np.concatenate([
        color_mean, color_std, dark_mean,
        [area, size_est, ax_x, ax_y, ax_y / max(ax_x, 1e-9)],
        [rel[:, 1].mean(), dy.std(), a1, a3, mix_est, amp_est],
    ])
