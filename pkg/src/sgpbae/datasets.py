"""Synthetic data generators and CSV ingestion with missingness masks."""

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DataError, NoAuxColumns, ParseError

MISSING_TOKENS = ("", "NaN", "nan")


@dataclass
class Dataset:
    """Auxiliary inputs ``X``, observations ``Y`` and an observed-mask.

    Masked entries of ``Y`` are stored as zero.  ``groups`` assigns each
    row to an independent GP instance (e.g. one per video).
    """

    X: np.ndarray
    Y: np.ndarray
    mask: np.ndarray = None
    names: list = None
    groups: np.ndarray = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        if self.X.ndim == 1:
            self.X = self.X[:, None]
        self.Y = np.array(self.Y, dtype=np.float64)
        if self.Y.ndim == 1:
            self.Y = self.Y[:, None]
        if self.mask is None:
            self.mask = np.ones(self.Y.shape, dtype=bool)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.shape != self.Y.shape:
            raise DataError(f"mask shape {self.mask.shape} != Y shape {self.Y.shape}")
        if self.X.shape[0] != self.Y.shape[0]:
            raise DataError(f"X has {self.X.shape[0]} rows, Y has {self.Y.shape[0]}")
        if not self.mask.any():
            raise DataError("dataset has no observed entries")
        self.Y[~self.mask] = 0.0
        if self.groups is None:
            self.groups = np.zeros(self.N, dtype=int)
        self.groups = np.asarray(self.groups, dtype=int)

    @property
    def N(self):
        return self.Y.shape[0]

    @property
    def P(self):
        return self.Y.shape[1]

    @property
    def D(self):
        return self.X.shape[1]

    @property
    def n_groups(self):
        return int(self.groups.max()) + 1 if self.N else 1

    @property
    def Y_filled(self):
        return self.Y

    def subset(self, idx):
        idx = np.asarray(idx)
        return Dataset(self.X[idx], self.Y[idx], self.mask[idx], self.names, self.groups[idx])


# ---------------------------------------------------------------------------
# moving ball


@dataclass(frozen=True)
class MovingBallConfig:
    n_videos: int = 10
    frames_per_video: int = 30
    frame_size: int = 32
    gp_lengthscale: float = 2.0
    ball_radius_px: float = 3.0
    seed: int = 0
    gp_variance: float = 1.0

    def __post_init__(self):
        if self.frame_size < 2 * self.ball_radius_px + 2:
            raise ValueError("frame_size must be at least 2 * ball_radius_px + 2")
        if self.n_videos < 1 or self.frames_per_video < 1:
            raise ValueError("n_videos and frames_per_video must be positive")
        if not self.gp_lengthscale > 0:
            raise ValueError("gp_lengthscale must be positive")


def rbf_gram(t, lengthscale, variance=1.0):
    d = t[:, None] - t[None, :]
    return variance * np.exp(-0.5 * (d / lengthscale) ** 2)


def sample_gp_paths(t, lengthscale, variance, n, rng):
    """``n`` draws of a zero-mean RBF GP on the grid ``t``, shape (n, len(t)).

    Uses a symmetric square root so near-singular Gram matrices are fine.
    """
    w, V = np.linalg.eigh(rbf_gram(t, lengthscale, variance))
    root = V * np.sqrt(np.clip(w, 0.0, None))
    return rng.standard_normal((n, len(t))) @ root.T


def sample_trajectories(cfg, rng):
    """Raw GP trajectories, shape (n_videos, frames, 2)."""
    t = np.arange(1, cfg.frames_per_video + 1, dtype=np.float64)
    paths = sample_gp_paths(t, cfg.gp_lengthscale, cfg.gp_variance, 2 * cfg.n_videos, rng)
    return paths.reshape(cfg.n_videos, 2, -1).transpose(0, 2, 1)


def map_to_frame(raw, cfg):
    """Affine map of all trajectories onto ``[r + 1, size - r - 1]``."""
    r = cfg.ball_radius_px
    lo, hi = r + 1.0, cfg.frame_size - r - 1.0
    center = 0.5 * (raw.max() + raw.min())
    # keep nearly-flat samples near the middle instead of stretching noise
    span = max(raw.max() - raw.min(), 6.0 * math.sqrt(cfg.gp_variance))
    return 0.5 * (lo + hi) + (raw - center) * (hi - lo) / span


def render_disc(centers, size, radius, supersample=4):
    """Anti-aliased discs; ``centers`` is (n, 2) as (column, row) pixel coords."""
    s = supersample
    sub = (np.arange(size * s) + 0.5) / s
    frames = np.empty((len(centers), size, size))
    for i, (cx, cy) in enumerate(centers):
        inside = ((sub[None, :] - cx) ** 2 + (sub[:, None] - cy) ** 2) <= radius**2
        frames[i] = inside.reshape(size, s, size, s).mean(axis=(1, 3))
    return frames


def generate_moving_ball(cfg):
    """Videos of a ball moving along GP trajectories.

    Returns the dataset (X = frame time 1..T within each video, Y =
    flattened frames, groups = video index) and the true pixel
    trajectories of shape (n_videos, T, 2).
    """
    rng = np.random.default_rng(cfg.seed)
    traj = map_to_frame(sample_trajectories(cfg, rng), cfg)
    T = cfg.frames_per_video
    frames = render_disc(traj.reshape(-1, 2), cfg.frame_size, cfg.ball_radius_px)
    X = np.tile(np.arange(1, T + 1, dtype=np.float64), cfg.n_videos)[:, None]
    groups = np.repeat(np.arange(cfg.n_videos), T)
    Y = frames.reshape(len(frames), -1)
    return Dataset(X, Y, groups=groups), traj


def write_pgm(frame, path):
    """Binary greyscale dump of one frame with values in [0, 1]."""
    img = np.clip(np.round(np.asarray(frame) * 255), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


# ---------------------------------------------------------------------------
# rotated glyphs


def glyph_strokes(shape_seed):
    """Line segments (x0, y0, x1, y1, half_width) of an asymmetric glyph in [-1, 1]^2."""
    rng = np.random.default_rng(shape_seed)
    # a fixed "F"-like skeleton keeps the glyph free of rotational symmetry
    base = np.array([
        [-0.45, -0.7, -0.45, 0.7],
        [-0.45, 0.7, 0.45, 0.7],
        [-0.45, 0.05, 0.2, 0.05],
    ])
    jitter = rng.uniform(-0.12, 0.12, base.shape)
    widths = rng.uniform(0.1, 0.16, (len(base), 1))
    return np.hstack([base + jitter, widths])


def _segment_distance(px, py, seg):
    x0, y0, x1, y1 = seg[:4]
    dx, dy = x1 - x0, y1 - y0
    t = np.clip(((px - x0) * dx + (py - y0) * dy) / (dx * dx + dy * dy), 0.0, 1.0)
    return np.hypot(px - (x0 + t * dx), py - (y0 + t * dy))


def render_glyph(angle, shape_seed=0, size=32, supersample=4):
    """Glyph rotated counter-clockwise by ``angle`` radians about the image centre."""
    strokes = glyph_strokes(shape_seed)
    s = supersample
    sub = ((np.arange(size * s) + 0.5) / s - size / 2) / (0.4 * size)
    gx, gy = np.meshgrid(sub, -sub)
    c, sn = math.cos(angle), math.sin(angle)
    px, py = c * gx + sn * gy, -sn * gx + c * gy
    ink = np.zeros_like(px, dtype=bool)
    for seg in strokes:
        ink |= _segment_distance(px, py, seg) <= seg[4]
    return ink.reshape(size, s, size, s).mean(axis=(1, 3))


def rotate_image(img, angle):
    """Rotate a square image counter-clockwise about its centre (bilinear)."""
    n = img.shape[0]
    c0 = (n - 1) / 2.0
    rows, cols = np.mgrid[0:n, 0:n].astype(np.float64)
    x, y = cols - c0, c0 - rows
    c, s = math.cos(angle), math.sin(angle)
    xs, ys = c * x + s * y, -s * x + c * y
    return ndimage.map_coordinates(img, [c0 - ys, xs + c0], order=1, mode="constant")


def glyph_angles(n_angles):
    return 2.0 * math.pi * np.arange(n_angles) / n_angles


def generate_rotated_glyphs(n_angles, shape_seed=0, holdout=(), size=32):
    """One glyph at ``n_angles`` evenly spaced angles; ``holdout`` indices dropped."""
    if n_angles < 4:
        raise ValueError("n_angles must be at least 4")
    keep = [i for i in range(n_angles) if i not in set(holdout)]
    angles = glyph_angles(n_angles)[keep]
    Y = np.stack([render_glyph(a, shape_seed, size).ravel() for a in angles])
    return Dataset(angles[:, None], Y, names=["angle"] + [f"p{j}" for j in range(size * size)])


# ---------------------------------------------------------------------------
# correlated multi-output GP with missing entries


def generate_correlated_gp(n=200, missing_frac=0.3, lengthscale=1.0, correlation=0.8,
                           noise_std=0.05, seed=0):
    """Two outputs sharing latent GP structure, with entries masked at random.

    Returns ``(dataset, truth)``; ``truth`` is the complete noisy ``Y``.
    """
    rng = np.random.default_rng(seed)
    x = np.sort(rng.uniform(0.0, 10.0, n))
    h = sample_gp_paths(x, lengthscale, 1.0, 2, rng)
    mix = np.array([[1.0, 0.0], [correlation, math.sqrt(1.0 - correlation**2)]])
    truth = (mix @ h).T + noise_std * rng.standard_normal((n, 2))
    mask = rng.uniform(size=truth.shape) >= missing_frac
    # keep at least one observed value per row
    empty = ~mask.any(axis=1)
    mask[empty, rng.integers(0, 2, empty.sum())] = True
    return Dataset(x[:, None], truth, mask, names=["x", "y0", "y1"]), truth


# ---------------------------------------------------------------------------
# CSV


def _column_index(header, col):
    if isinstance(col, (int, np.integer)):
        if not 0 <= col < len(header):
            raise NoAuxColumns(f"auxiliary column index {col} out of range")
        return int(col)
    if col not in header:
        raise NoAuxColumns(f"auxiliary column {col!r} not in header")
    return header.index(col)


def load_csv(path, aux_columns, missing_tokens=MISSING_TOKENS, group_column=None):
    """Read a headed CSV; ``aux_columns`` (names or indices) become ``X``.

    Every other column becomes an output; missing tokens clear the mask.
    Auxiliary columns may not be missing.  An optional integer
    ``group_column`` is split off into ``groups``.
    """
    if isinstance(aux_columns, (str, int)):
        aux_columns = [aux_columns]
    if not aux_columns:
        raise NoAuxColumns("at least one auxiliary column is required")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError("empty file: header row missing", 0, 0)
    header = [h.strip() for h in rows[0]]
    aux = [_column_index(header, c) for c in aux_columns]
    grp = None if group_column is None else _column_index(header, group_column)
    out = [j for j in range(len(header)) if j not in aux and j != grp]
    if not out:
        raise DataError("no output columns")
    body = rows[1:]
    X = np.empty((len(body), len(aux)))
    Y = np.zeros((len(body), len(out)))
    mask = np.ones(Y.shape, dtype=bool)
    groups = np.zeros(len(body), dtype=int)
    for i, row in enumerate(body, start=1):
        if len(row) != len(header):
            raise ParseError(f"expected {len(header)} cells, got {len(row)}", i, len(row))
        if grp is not None:
            try:
                groups[i - 1] = int(row[grp])
            except ValueError:
                raise ParseError(f"bad group label {row[grp]!r}", i, grp) from None
        for k, j in enumerate(aux):
            try:
                X[i - 1, k] = float(row[j])
            except ValueError:
                raise ParseError(f"bad auxiliary value {row[j]!r}", i, j) from None
        for k, j in enumerate(out):
            cell = row[j].strip()
            if cell in missing_tokens:
                mask[i - 1, k] = False
                continue
            try:
                Y[i - 1, k] = float(cell)
            except ValueError:
                raise ParseError(f"non-numeric cell {cell!r}", i, j) from None
    names = [header[j] for j in aux] + [header[j] for j in out]
    return Dataset(X, Y, mask, names=names, groups=groups)


def save_csv(dataset, path, missing_token="NaN", group_column=None):
    """Write ``X`` then ``Y`` columns; masked cells become ``missing_token``.

    With ``group_column`` set, the group labels are appended under that name.
    """
    D, P = dataset.D, dataset.P
    names = dataset.names
    if names is None or len(names) != D + P:
        names = [f"x{j}" for j in range(D)] + [f"y{j}" for j in range(P)]
    names = list(names) + ([group_column] if group_column else [])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        for x, y, m, grp in zip(dataset.X, dataset.Y, dataset.mask, dataset.groups):
            w.writerow([repr(float(v)) for v in x]
                       + [repr(float(v)) if o else missing_token for v, o in zip(y, m)]
                       + ([int(grp)] if group_column else []))
