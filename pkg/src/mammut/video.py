"""Video pathway: sparse 3-D tubes plus sparse-temporal-stride 2-D patches,
gated fixed+learned positional embeddings, one forward pass of the image
encoder over the concatenated tokens.

The adapter reuses a trained image model unchanged: the 2-D patch pathway
shares the image patch projection, the learned positional component is the
image grid sampled at token centers, and the gates start at zero so a fresh
adaptation reproduces image behavior exactly. Only tube projections and
gates are new parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import (ConfigError, SceneConfig, SceneObject, _cell_center,
                   patchify, render_objects_at, scene_objects)
from .model import Mammut
from .tensor import Tensor

_MOTION_SALT = 0x30F1

DIRECTIONS = {"left": (0.0, -1.0), "right": (0.0, 1.0),
              "up": (-1.0, 0.0), "down": (1.0, 0.0), "still": (0.0, 0.0)}


@dataclass(frozen=True)
class TubeSpec:
    kernel: tuple[int, int, int]  # (t, h, w)
    stride: tuple[int, int, int]
    offset: tuple[int, int, int] = (0, 0, 0)

    def __post_init__(self):
        if any(k < 1 for k in self.kernel) or any(s < 1 for s in self.stride):
            raise ConfigError(f"kernel and stride must be positive: {self}")
        if any(o < 0 for o in self.offset):
            raise ConfigError(f"offsets must be nonnegative: {self}")

    def counts(self, extent) -> tuple[int, int, int]:
        out = []
        for e, k, s, o in zip(extent, self.kernel, self.stride, self.offset):
            span = e - k - o
            if span < 0:
                raise ConfigError(
                    f"kernel+offset {k}+{o} exceeds extent {e} in {self}")
            out.append(span // s + 1)
        return tuple(out)

    def token_count(self, extent) -> int:
        a, b, c = self.counts(extent)
        return a * b * c


@dataclass(frozen=True)
class VideoConfig:
    frames: int = 8
    frame_stride: int = 4  # sparse temporal stride for the 2-D patch pathway
    use_tubes: bool = True
    tube_specs: tuple[TubeSpec, ...] = ()  # empty -> scaled defaults
    max_tokens: int = 256
    max_objects: int = 2
    speed_frac: float = 0.5  # fraction of a grid cell traversed per clip
    per_channel_gate: bool = False

    def resolved_tubes(self, scene: SceneConfig) -> tuple[TubeSpec, ...]:
        """Default пair of tube shapes: one long-thin, one short-fat."""
        if not self.use_tubes:
            return ()
        if self.tube_specs:
            return self.tube_specs
        size = scene.image_size
        t = self.frames
        return (
            TubeSpec(kernel=(t, size // 4, size // 4),
                     stride=(t, size // 2, size // 2)),
            TubeSpec(kernel=(max(2, t // 4), size // 2, size // 2),
                     stride=(max(2, t // 2), size // 2, size // 2),
                     offset=(0, size // 4, size // 4)),
        )


# ---------------------------------------------------------------------------
# synthetic motion corpus


@dataclass
class SyntheticVideo:
    frames: np.ndarray  # T x H x W x 3
    objects: tuple[SceneObject, ...]
    motions: tuple[str, ...]  # direction word per object, cell order
    positions: np.ndarray  # T x n_objects x 2 (row, col) centers
    caption: str


def motion_caption(objects, motions) -> str:
    parts = []
    for o, m in zip(objects, motions):
        base = f"a {o.color} {o.shape}"
        parts.append(f"{base} holding still" if m == "still"
                     else f"{base} moving {m}")
    return " and ".join(parts)


def synthesize_video(seed: int, scene_cfg: SceneConfig,
                     video_cfg: VideoConfig) -> SyntheticVideo:
    """Scene objects under per-object linear motion; pure in (seed, configs)."""
    objects = scene_objects(seed, scene_cfg)[:video_cfg.max_objects]
    rng = np.random.default_rng([seed, _MOTION_SALT])
    names = sorted(DIRECTIONS)
    motions = tuple(names[int(rng.integers(len(names)))] for _ in objects)
    span = scene_cfg.canvas_size * (1 - 2 * scene_cfg.margin_frac)
    travel = video_cfg.speed_frac * span / scene_cfg.grid_size
    frames, centers = [], []
    tdur = max(video_cfg.frames - 1, 1)
    for t in range(video_cfg.frames):
        offs = []
        for o, m in zip(objects, motions):
            dy, dx = DIRECTIONS[m]
            base = _cell_center(o.cell, scene_cfg)
            offs.append((base[0] + dy * travel * t / tdur,
                         base[1] + dx * travel * t / tdur))
        frames.append(render_objects_at(objects, offs, scene_cfg))
        centers.append(offs)
    return SyntheticVideo(frames=np.stack(frames), objects=objects,
                          motions=motions,
                          positions=np.asarray(centers, dtype=np.float64),
                          caption=motion_caption(objects, motions))


def write_video_manifest(path, scene_cfg: SceneConfig, video_cfg: VideoConfig,
                         seeds) -> None:
    """Image manifest schema extended with motion words and per-frame object
    centers: seed, shape:color:cell:motion list, caption, y:x pairs per frame."""
    with open(path, "w") as fh:
        for seed in seeds:
            vid = synthesize_video(seed, scene_cfg, video_cfg)
            desc = ";".join(f"{o.shape}:{o.color}:{o.cell}:{m}"
                            for o, m in zip(vid.objects, vid.motions))
            pos = "|".join(",".join(f"{y:.2f}:{x:.2f}" for y, x in frame)
                           for frame in vid.positions)
            fh.write(f"{seed}\t{desc}\t{vid.caption}\t{pos}\n")


# ---------------------------------------------------------------------------
# tokenization


def extract_tubes(video: np.ndarray, spec: TubeSpec) -> np.ndarray:
    """[n_tubes, t*h*w*3] rows in row-major (t, y, x) tube order, each tube
    flattened in (t, y, x, channel) order."""
    nt, ny, nx = spec.counts(video.shape[:3])
    kt, kh, kw = spec.kernel
    st, sh, sw = spec.stride
    ot, oh, ow = spec.offset
    rows = np.empty((nt * ny * nx, kt * kh * kw * 3), dtype=video.dtype)
    i = 0
    for a in range(nt):
        for b in range(ny):
            for c in range(nx):
                block = video[ot + a * st:ot + a * st + kt,
                              oh + b * sh:oh + b * sh + kh,
                              ow + c * sw:ow + c * sw + kw]
                rows[i] = block.reshape(-1)
                i += 1
    return rows


def tube_centers(video_shape, spec: TubeSpec) -> np.ndarray:
    """[n_tubes, 3] (t, y, x) center coordinates, in tube order."""
    nt, ny, nx = spec.counts(video_shape[:3])
    kt, kh, kw = spec.kernel
    st, sh, sw = spec.stride
    ot, oh, ow = spec.offset
    out = [(ot + a * st + (kt - 1) / 2,
            oh + b * sh + (kh - 1) / 2,
            ow + c * sw + (kw - 1) / 2)
           for a in range(nt) for b in range(ny) for c in range(nx)]
    return np.asarray(out, dtype=np.float64)


def sparse_frame_patches(video: np.ndarray, patch: int,
                         temporal_stride: int) -> tuple[np.ndarray, np.ndarray]:
    """2-D patch tokens from frames 0, s, 2s, ...; returns (tokens, centers).

    Tokens use the image patchifier layout, so the image patch projection
    applies unchanged; centers are (t, y, x) per token.
    """
    if temporal_stride < 1:
        raise ConfigError(f"temporal stride must be >= 1, got {temporal_stride}")
    tt, h, w, _ = video.shape
    toks, centers = [], []
    for t in range(0, tt, temporal_stride):
        toks.append(patchify(video[t], patch))
        for r in range(h // patch):
            for c in range(w // patch):
                centers.append((float(t), (r + 0.5) * patch, (c + 0.5) * patch))
    return np.concatenate(toks, axis=0), np.asarray(centers, dtype=np.float64)


# ---------------------------------------------------------------------------
# positional embeddings


def sinusoidal_embedding(centers: np.ndarray, dim: int, extents) -> np.ndarray:
    """Fixed embedding of (t, y, x) centers: the feature dim splits in three,
    one sin/cos chunk per coordinate. Pure function of its arguments."""
    chunk = dim // 3
    sizes = (chunk, chunk, dim - 2 * chunk)
    parts = []
    for axis in range(3):
        d = sizes[axis]
        half = (d + 1) // 2
        pos = centers[:, axis] / max(float(extents[axis]), 1e-9)
        freqs = np.exp(np.arange(half) * (-np.log(10000.0) / max(half, 1)))
        ang = pos[:, None] * freqs[None, :] * 100.0
        emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)[:, :d]
        parts.append(emb)
    return np.concatenate(parts, axis=1)


def interpolate_grid(grid: Tensor, centers_yx: np.ndarray,
                     image_size: int) -> Tensor:
    """Bilinear sample of the learned G x G x d grid at pixel centers,
    differentiable w.r.t. the grid (reuses image positional embeddings)."""
    g = grid.shape[0]
    src = centers_yx / image_size * g - 0.5  # half-pixel convention
    i0 = np.floor(src).astype(np.int64)
    frac = src - i0
    i0 = np.clip(i0, 0, g - 1)
    i1 = np.clip(i0 + 1, 0, g - 1)
    flat = T.reshape(grid, (g * g, grid.shape[2]))
    w00 = (1 - frac[:, 0]) * (1 - frac[:, 1])
    w01 = (1 - frac[:, 0]) * frac[:, 1]
    w10 = frac[:, 0] * (1 - frac[:, 1])
    w11 = frac[:, 0] * frac[:, 1]
    out = None
    for wv, iy, ix in ((w00, i0[:, 0], i0[:, 1]), (w01, i0[:, 0], i1[:, 1]),
                       (w10, i1[:, 0], i0[:, 1]), (w11, i1[:, 0], i1[:, 1])):
        part = T.mul(T.embedding(flat, iy * g + ix),
                     Tensor(wv[:, None].astype(T.dtype())))
        out = part if out is None else T.add(out, part)
    return out


class VideoMammut:
    """Image model plus tube projections and per-token-group gates."""

    def __init__(self, model: Mammut, scene_cfg: SceneConfig,
                 video_cfg: VideoConfig, init_seed: int = 0):
        self.model = model
        self.scene_cfg = scene_cfg
        self.video_cfg = video_cfg
        self.specs = video_cfg.resolved_tubes(scene_cfg)
        rng = np.random.default_rng([init_seed, 0x7B3])
        dv = model.config.vision_dim
        gate_shape = (dv,) if video_cfg.per_channel_gate else ()
        self.params: dict[str, Tensor] = {}
        for i, spec in enumerate(self.specs):
            kt, kh, kw = spec.kernel
            w = rng.normal(0.0, 0.02, size=(kt * kh * kw * 3, dv))
            self.params[f"video.tube{i}.w"] = Tensor(w, requires_grad=True)
            self.params[f"video.tube{i}.b"] = Tensor(np.zeros(dv),
                                                     requires_grad=True)
            self.params[f"video.tube{i}.gate"] = Tensor(np.zeros(gate_shape),
                                                        requires_grad=True)
        self.params["video.patches.gate"] = Tensor(np.zeros(gate_shape),
                                                   requires_grad=True)

    def parameters(self) -> dict[str, Tensor]:
        merged = dict(self.model.params)
        merged.update(self.params)
        return merged

    def token_count(self) -> int:
        """Closed-form count: strided frames times patches, plus tubes."""
        scene, vid = self.scene_cfg, self.video_cfg
        n_frames = (vid.frames + vid.frame_stride - 1) // vid.frame_stride
        n = n_frames * (scene.image_size // scene.patch_size) ** 2
        ext = (vid.frames, scene.image_size, scene.image_size)
        return n + sum(spec.token_count(ext) for spec in self.specs)

    def tokenize_video(self, videos: np.ndarray) -> Tensor:
        """[B, T, H, W, 3] -> embedded tokens [B, n, dv] with gated positional
        embeddings attached; tube groups follow the patch group."""
        scene, vid = self.scene_cfg, self.video_cfg
        B = videos.shape[0]
        ext = (videos.shape[1], videos.shape[2], videos.shape[3])
        size = scene.image_size
        extents = (float(vid.frames), float(size), float(size))

        rows0, patch_centers = sparse_frame_patches(videos[0], scene.patch_size,
                                                    vid.frame_stride)
        patch_rows = [rows0] + [sparse_frame_patches(videos[b], scene.patch_size,
                                                     vid.frame_stride)[0]
                                for b in range(1, B)]
        patches = np.stack(patch_rows).astype(T.dtype())
        x = T.linear(Tensor(patches), self.model.params["enc.patch_embed.w"],
                     self.model.params["enc.patch_embed.b"])
        tokens = [T.add(x, self._gated_pos(patch_centers, "video.patches.gate",
                                           extents))]
        for i, spec in enumerate(self.specs):
            rows = np.stack([extract_tubes(videos[b], spec)
                             for b in range(B)]).astype(T.dtype())
            tx = T.linear(Tensor(rows), self.params[f"video.tube{i}.w"],
                          self.params[f"video.tube{i}.b"])
            pos = self._gated_pos(tube_centers(ext, spec),
                                  f"video.tube{i}.gate", extents)
            tokens.append(T.add(tx, pos))

        out = tokens[0] if len(tokens) == 1 else T.concat(tokens, axis=1)
        if out.shape[1] > vid.max_tokens:
            raise ConfigError(f"{out.shape[1]} video tokens exceed the "
                              f"configured maximum {vid.max_tokens}")
        return out

    def _gated_pos(self, centers: np.ndarray, gate_name: str, extents) -> Tensor:
        """learned component + gate * fixed sinusoidal component; at gate 0
        the fixed contribution is exactly zero."""
        dv = self.model.config.vision_dim
        learned = interpolate_grid(self.model.params["enc.pos_grid"],
                                   centers[:, 1:], self.scene_cfg.image_size)
        fixed = Tensor(sinusoidal_embedding(centers, dv, extents))
        return T.add(learned, T.mul(fixed, self.params[gate_name]))

    def video_forward(self, videos: np.ndarray) -> tuple[Tensor, Tensor]:
        """Concatenated tokens through the unchanged encoder, pooled once:
        (projected visual tokens [B, n, d], unit embedding [B, d])."""
        cfg = self.model.config
        x = self.tokenize_video(videos)
        for i in range(cfg.vision_layers):
            x = self.model._encoder_block(f"enc.l{i}", x)
        enc = self.model._ln(x, "enc.ln_f")
        return self.model.project_visual(enc), self.model._pool_visual(enc)
