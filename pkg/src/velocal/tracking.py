"""Feature-track handling and RANSAC frame-to-frame rotation estimation.

Relative rotations come from depth-aided 3D-3D Procrustes alignment of the
features two consecutive frames share. Only the rotation is kept; it feeds
the hand-eye alignment in :mod:`velocal.initializer`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import exp_so3, hat
from .sensors import CameraIntrinsics, FeatureObservation, back_project, three_point_weights


class DegenerateGeometryError(ValueError):
    pass


class ConsensusError(RuntimeError):
    pass


@dataclass(frozen=True)
class FeatureTrack:
    """One landmark observed over consecutive frames."""

    track_id: int
    frame_index: np.ndarray
    t: np.ndarray
    uv: np.ndarray
    depth: np.ndarray

    def __post_init__(self):
        if np.any(np.diff(self.t) <= 0):
            raise ValueError(f"track {self.track_id}: timestamps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.t)

    def observations(self) -> list[FeatureObservation]:
        return [FeatureObservation(float(t), float(uv[0]), float(uv[1]), float(z))
                for t, uv, z in zip(self.t, self.uv, self.depth)]


@dataclass
class ObservationTable:
    """All observations flattened and sorted by (track, frame)."""

    track_id: np.ndarray
    frame_index: np.ndarray
    t: np.ndarray
    uv: np.ndarray
    depth: np.ndarray

    @classmethod
    def from_tracks(cls, tracks: list[FeatureTrack]) -> "ObservationTable":
        if not tracks:
            return cls(np.zeros(0, int), np.zeros(0, int), np.zeros(0), np.zeros((0, 2)),
                       np.zeros(0))
        ids = np.concatenate([np.full(len(tr), tr.track_id) for tr in tracks])
        fr = np.concatenate([tr.frame_index for tr in tracks]).astype(int)
        order = np.lexsort((fr, ids))
        return cls(ids[order], fr[order],
                   np.concatenate([tr.t for tr in tracks])[order],
                   np.concatenate([tr.uv for tr in tracks]).reshape(-1, 2)[order],
                   np.concatenate([tr.depth for tr in tracks])[order])

    def __len__(self) -> int:
        return len(self.t)

    def next_row(self) -> np.ndarray:
        """Row of the same track in the following frame, or -1."""
        nxt = np.full(len(self), -1)
        if len(self) > 1:
            link = ((self.track_id[1:] == self.track_id[:-1])
                    & (self.frame_index[1:] == self.frame_index[:-1] + 1))
            nxt[:-1][link] = np.arange(1, len(self))[link]
        return nxt

    def frame_times(self) -> dict[int, float]:
        frames, first = np.unique(self.frame_index, return_index=True)
        return {int(f): float(self.t[i]) for f, i in zip(frames, first)}


def frame_view(tracks: list[FeatureTrack], t: float) -> list[tuple[int, FeatureObservation]]:
    """All observations taken at frame time ``t``."""
    out = []
    known = False
    for tr in tracks:
        hit = np.nonzero(tr.t == t)[0]
        if len(hit):
            known = True
            j = hit[0]
            out.append((tr.track_id, FeatureObservation(float(tr.t[j]), float(tr.uv[j, 0]),
                                                        float(tr.uv[j, 1]), float(tr.depth[j]))))
    if tracks and not known:
        raise KeyError(f"no frame at t={t!r}")
    return out


def gate_tracks(tracks: list[FeatureTrack], min_depth: float = 0.2, max_depth: float = 10.0,
                min_length: int = 3) -> list[FeatureTrack]:
    """Drop out-of-range depths, split at frame gaps, drop short pieces."""
    out = []
    for tr in tracks:
        ok = (tr.depth >= min_depth) & (tr.depth <= max_depth) & np.isfinite(tr.depth)
        idx = np.nonzero(ok)[0]
        if len(idx) == 0:
            continue
        fr = tr.frame_index[idx]
        breaks = np.nonzero(np.diff(fr) != 1)[0] + 1
        for piece in np.split(idx, breaks):
            if len(piece) >= min_length:
                out.append(FeatureTrack(tr.track_id, tr.frame_index[piece], tr.t[piece],
                                        tr.uv[piece], tr.depth[piece]))
    return out


def _kabsch(p: np.ndarray, q: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """R, t minimizing sum |p - (R q + t)|^2; also returns singular values."""
    cp = p.mean(axis=0)
    cq = q.mean(axis=0)
    H = (q - cq).T @ (p - cp)
    U, S, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    D = np.diag([1.0, 1.0, d if d != 0 else 1.0])
    R = Vt.T @ D @ U.T
    return R, cp - R @ cq, S


def relative_rotation_kabsch(p_n: np.ndarray, p_n1: np.ndarray) -> np.ndarray:
    """Rotation mapping frame-(n+1) coordinates into frame n.

    Translation is solved along the way and discarded.
    """
    p_n = np.asarray(p_n, dtype=float)
    p_n1 = np.asarray(p_n1, dtype=float)
    if len(p_n) < 3 or p_n.shape != p_n1.shape:
        raise DegenerateGeometryError("need at least 3 matched point pairs")
    R, _, S = _kabsch(p_n, p_n1)
    if S[1] < 1e-9 * max(S[0], 1e-300):
        raise DegenerateGeometryError("point configuration is (nearly) collinear")
    return R


def refine_pose_bearing(p_n: np.ndarray, p_n1: np.ndarray, R: np.ndarray, t: np.ndarray,
                        iterations: int = 5) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Newton on normalized-plane reprojection of ``R p_n1 + t`` onto the
    rays of ``p_n``.

    Depth noise is mostly along the viewing ray and barely moves the
    projection; point-transfer (Procrustes) errors are dominated by it.
    """
    target = p_n[:, :2] / p_n[:, 2:3]
    for _ in range(iterations):
        q = p_n1 @ R.T + t
        if np.any(q[:, 2] <= 0):
            break
        iz = 1.0 / q[:, 2]
        r = q[:, :2] * iz[:, None] - target
        P = np.zeros((len(q), 2, 3))
        P[:, 0, 0] = iz
        P[:, 1, 1] = iz
        P[:, :, 2] = -q[:, :2] * (iz * iz)[:, None]
        J = np.concatenate([-P @ R @ hat(p_n1), P], axis=2).reshape(-1, 6)
        dx, *_ = np.linalg.lstsq(J, -r.ravel(), rcond=None)
        R = R @ exp_so3(dx[:3])
        t = t + dx[3:]
        if np.abs(dx).max() < 1e-12:
            break
    return R, t


@dataclass(frozen=True)
class RansacParams:
    threshold_sigmas: float = 3.0
    min_threshold: float = 0.01
    sigma_depth_rel: float = 0.01
    sigma_pixel: float = 1.0
    confidence: float = 0.99
    max_iterations: int = 200
    min_inlier_ratio: float = 0.5
    seed: int = 0
    refine_bearing: bool = True


@dataclass
class RelativeRotation:
    t_n: float
    t_n1: float
    R: np.ndarray
    inlier_count: int
    frame_n: int = -1
    inliers: np.ndarray = field(default=None, repr=False)


def _iterations_needed(inlier_ratio: float, confidence: float, cap: int) -> int:
    w3 = inlier_ratio**3
    if w3 >= 1.0:
        return 1
    if w3 <= 0.0:
        return cap
    return min(cap, max(1, math.ceil(math.log(1 - confidence) / math.log(1 - w3))))


def ransac_relative_rotation(p_n: np.ndarray, p_n1: np.ndarray, params: RansacParams,
                             rng: np.random.Generator | None = None,
                             t_n: float = 0.0, t_n1: float = 1.0,
                             focal: float = 500.0) -> RelativeRotation:
    """Robust relative rotation from matched 3D points of frames n and n+1."""
    p_n = np.asarray(p_n, dtype=float)
    p_n1 = np.asarray(p_n1, dtype=float)
    m = len(p_n)
    if m < 3:
        raise ConsensusError(f"only {m} matches")
    rng = np.random.default_rng(params.seed) if rng is None else rng
    # depth noise acts along the viewing ray, pixel noise across it
    scale = params.threshold_sigmas * math.sqrt(2.0) * p_n[:, 2]
    thr_along = np.maximum(params.min_threshold, scale * params.sigma_depth_rel)
    thr_across = np.maximum(params.min_threshold, scale * params.sigma_pixel / focal)
    ray = p_n / np.linalg.norm(p_n, axis=1, keepdims=True)

    def consistent(R, t):
        e = p_n - (p_n1 @ R.T + t)
        along = np.einsum("ij,ij->i", e, ray)
        across = np.linalg.norm(e - along[:, None] * ray, axis=1)
        return (np.abs(along) < thr_along) & (across < thr_across)

    best = np.zeros(m, dtype=bool)
    needed = params.max_iterations
    it = 0
    while it < needed:
        it += 1
        pick = rng.choice(m, size=3, replace=False)
        R, t, S = _kabsch(p_n[pick], p_n1[pick])
        if S[1] < 1e-9 * max(S[0], 1e-300):
            continue
        inl = consistent(R, t)
        if inl.sum() > best.sum():
            best = inl
            needed = min(needed, _iterations_needed(best.mean(), params.confidence,
                                                    params.max_iterations))

    if best.sum() < max(3, params.min_inlier_ratio * m):
        raise ConsensusError(f"consensus {best.sum()}/{m} below required ratio "
                             f"{params.min_inlier_ratio}")
    R, t, _ = _kabsch(p_n[best], p_n1[best])
    inl = consistent(R, t)
    if inl.sum() >= best.sum():
        R, t, _ = _kabsch(p_n[inl], p_n1[inl])
        best = inl
    if params.refine_bearing:
        R, _ = refine_pose_bearing(p_n[best], p_n1[best], R, t)
    return RelativeRotation(t_n, t_n1, R, int(best.sum()), inliers=best)


@dataclass
class TrackingResult:
    relative_rotations: list[RelativeRotation]
    link_ok: np.ndarray
    rejected_pairs: int


def estimate_relative_rotations(table: ObservationTable, intr: CameraIntrinsics,
                                params: RansacParams) -> TrackingResult:
    """RANSAC relative rotation for every consecutive frame pair.

    ``link_ok[r]`` marks whether the correspondence between row ``r`` and
    the same track's next observation survived outlier rejection.
    """
    nxt = table.next_row()
    rows = np.nonzero(nxt >= 0)[0]
    link_ok = np.zeros(len(table), dtype=bool)
    if len(rows) == 0:
        return TrackingResult([], link_ok, 0)
    pts = back_project(table.uv, table.depth, intr)
    frames = table.frame_index[rows]
    order = np.argsort(frames, kind="stable")
    rows = rows[order]
    frames = frames[order]
    starts = np.r_[0, np.nonzero(np.diff(frames))[0] + 1, len(frames)]
    out = []
    rejected = 0
    for a, b in zip(starts[:-1], starts[1:]):
        r = rows[a:b]
        f = int(frames[a])
        rng = np.random.default_rng([params.seed, f])
        try:
            rel = ransac_relative_rotation(pts[r], pts[nxt[r]], params, rng,
                                           float(table.t[r[0]]), float(table.t[nxt[r[0]]]),
                                           focal=intr.fx)
        except (ConsensusError, DegenerateGeometryError):
            rejected += 1
            continue
        rel.frame_n = f
        link_ok[r[rel.inliers]] = True
        out.append(rel)
    return TrackingResult(out, link_ok, rejected)


@dataclass
class FlowFeatures:
    """Pixel velocities at middle observations of 3-frame windows."""

    frame_index: np.ndarray
    t: np.ndarray
    track_id: np.ndarray
    uv: np.ndarray
    depth: np.ndarray
    flow: np.ndarray

    def __len__(self) -> int:
        return len(self.t)

    def select(self, mask) -> "FlowFeatures":
        return FlowFeatures(self.frame_index[mask], self.t[mask], self.track_id[mask],
                            self.uv[mask], self.depth[mask], self.flow[mask])

    def frames(self) -> tuple[np.ndarray, np.ndarray]:
        """Unique frames and the start offsets of their rows (sorted by frame)."""
        f, start = np.unique(self.frame_index, return_index=True)
        return f, np.r_[start, len(self)]


def pixel_velocities(table: ObservationTable, link_ok: np.ndarray | None = None) -> FlowFeatures:
    """Three-point Lagrange pixel velocity for every interior observation."""
    nxt = table.next_row()
    prev = np.full(len(table), -1)
    prev[nxt[nxt >= 0]] = np.nonzero(nxt >= 0)[0]
    mid = np.nonzero((prev >= 0) & (nxt >= 0))[0]
    if link_ok is not None:
        mid = mid[link_ok[prev[mid]] & link_ok[mid]]
    p, q = prev[mid], nxt[mid]
    w = three_point_weights(table.t[p], table.t[mid], table.t[q])
    flow = (w[:, 0, None] * table.uv[p] + w[:, 1, None] * table.uv[mid]
            + w[:, 2, None] * table.uv[q])
    order = np.lexsort((table.track_id[mid], table.frame_index[mid]))
    mid = mid[order]
    return FlowFeatures(table.frame_index[mid], table.t[mid], table.track_id[mid],
                        table.uv[mid], table.depth[mid], flow[order])
