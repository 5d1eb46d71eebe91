"""Box refinement: cluster per-sensor views and re-anchor boxes per view.

A superframe of a moving object contains one partial view per sensor,
displaced along the heading because each sensor sampled the object at a
different time. Refinement collects the points near an annotated box,
splits them into per-view clusters, collapses the clusters onto the
reference time using the estimated speed, anchors the box against the
densest face of the merged cloud, and finally emits one pseudo box per
cluster by shifting the anchored box back onto that cluster's sampling
time.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import AlignmentError, ConfigError, DataError
from .estimators import StateEstimate
from .geometry import Superframe
from .tracks import AnnotatedBox, AnnotatedTrack

_log = logging.getLogger(__name__)

_TIME_TOL = 1e-6
_TIE_TOL = 1e-9


@dataclass(frozen=True)
class RefineParams:
    """Knobs for the refinement stage.

    gap_threshold      consecutive projections further apart than this
                       start a new cluster (metres)
    min_cluster_points clusters smaller than this are discarded
    roi_margin         lateral and vertical slack around the box; also
                       added to the speed-dependent longitudinal reach
    kde_bandwidth      "auto" for the Silverman rule, or a fixed width
    anchor_margin      offset between the anchored face and the extreme
                       point projection
    min_refine_speed   below this estimated speed the original box is
                       passed through untouched
    """

    gap_threshold: float = 0.3
    min_cluster_points: int = 5
    roi_margin: float = 0.5
    kde_bandwidth: float | str = "auto"
    anchor_margin: float = 0.05
    min_refine_speed: float = 1.0

    def __post_init__(self) -> None:
        if self.gap_threshold <= 0.0:
            raise ConfigError("gap_threshold must be positive")
        if self.min_cluster_points < 1:
            raise ConfigError("min_cluster_points must be at least 1")
        if self.roi_margin < 0.0 or self.anchor_margin < 0.0:
            raise ConfigError("margins must be non-negative")
        if self.min_refine_speed < 0.0:
            raise ConfigError("min_refine_speed must be non-negative")
        if isinstance(self.kde_bandwidth, str):
            if self.kde_bandwidth != "auto":
                raise ConfigError(
                    "kde_bandwidth must be 'auto' or a positive number")
        elif not self.kde_bandwidth > 0.0:
            raise ConfigError("kde_bandwidth must be positive")


@dataclass(frozen=True)
class ViewCluster:
    """One per-sensor view: indices into the superframe it came from."""

    indices: np.ndarray
    dominant_sensor: str
    mean_tau: float
    span: tuple[float, float]

    def __post_init__(self) -> None:
        idx = np.asarray(self.indices, dtype=int)
        if idx.ndim != 1 or idx.size == 0:
            raise DataError("cluster needs a flat, non-empty index array")
        object.__setattr__(self, "indices", idx)

    def __len__(self) -> int:
        return int(self.indices.size)


@dataclass(frozen=True)
class PseudoBox:
    """A refined box tied to the cluster it was regenerated for.

    source_cluster is -1 when refinement was skipped and the original
    annotation passed through unchanged.
    """

    box: AnnotatedBox
    source_cluster: int
    applied_shift: np.ndarray = field(
        default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        shift = np.asarray(self.applied_shift, dtype=float)
        if shift.shape != (3,):
            raise DataError("applied_shift must be a 3-vector")
        object.__setattr__(self, "applied_shift", shift)

    @property
    def anchored(self) -> bool:
        return self.source_cluster >= 0


def _heading_axis(heading: float) -> np.ndarray:
    return np.array([np.cos(heading), np.sin(heading), 0.0])


def collect_roi_points(superframe: Superframe, box: AnnotatedBox,
                       s_star: float, params: RefineParams) -> np.ndarray:
    """Indices of superframe points inside the speed-expanded box region.

    The box is grown along its heading by the distance the object covers
    in half the accumulation window, plus the margin; laterally and
    vertically only the margin is added.
    """
    if len(superframe) == 0:
        return np.empty(0, dtype=int)
    rel = superframe.positions - box.center
    c, s = np.cos(box.heading), np.sin(box.heading)
    lon = c * rel[:, 0] + s * rel[:, 1]
    lat = -s * rel[:, 0] + c * rel[:, 1]
    ver = rel[:, 2]
    half = box.dims / 2.0
    reach_lon = half[0] + abs(s_star) * superframe.delta_t / 2.0 + params.roi_margin
    reach_lat = half[1] + params.roi_margin
    reach_ver = half[2] + params.roi_margin
    mask = (np.abs(lon) <= reach_lon) \
        & (np.abs(lat) <= reach_lat) \
        & (np.abs(ver) <= reach_ver)
    return np.flatnonzero(mask)


def cluster_along_heading(superframe: Superframe, indices: np.ndarray,
                          heading: float,
                          params: RefineParams) -> list[ViewCluster]:
    """Split the selected points into clusters along the heading axis.

    Points are sorted by their projection onto the heading; a jump
    larger than gap_threshold between neighbours starts a new cluster.
    Clusters come back ordered rear to front, undersized ones dropped.
    """
    indices = np.asarray(indices, dtype=int)
    if indices.size == 0:
        return []
    axis = _heading_axis(heading)
    proj = superframe.positions[indices] @ axis
    order = np.argsort(proj, kind="stable")
    sorted_idx = indices[order]
    sorted_proj = proj[order]
    breaks = np.flatnonzero(np.diff(sorted_proj) > params.gap_threshold)
    clusters: list[ViewCluster] = []
    for seg in np.split(np.arange(sorted_idx.size), breaks + 1):
        if seg.size < params.min_cluster_points:
            continue
        members = sorted_idx[seg]
        labels, counts = np.unique(
            superframe.sensor_ids[members].astype(str), return_counts=True)
        clusters.append(ViewCluster(
            indices=members,
            dominant_sensor=str(labels[np.argmax(counts)]),
            mean_tau=float(superframe.timestamps[members].mean()),
            span=(float(sorted_proj[seg[0]]), float(sorted_proj[seg[-1]])),
        ))
    return clusters


def speed_compensate(positions: np.ndarray, timestamps: np.ndarray,
                     t_star: float, s_star: float,
                     heading: float) -> np.ndarray:
    """Collapse object points sampled at different times onto t_star.

    A point sampled at tau sits (tau - t_star) * s_star further along
    the heading than it would at the reference time, so that offset is
    subtracted.
    """
    positions = np.asarray(positions, dtype=float)
    timestamps = np.asarray(timestamps, dtype=float)
    shift = np.outer((timestamps - t_star) * s_star, _heading_axis(heading))
    return positions - shift


def _silverman_bandwidth(coords: np.ndarray) -> float:
    n = coords.size
    sd = float(coords.std(ddof=1))
    q75, q25 = np.percentile(coords, [75.0, 25.0])
    iqr = float(q75 - q25)
    scale = min(sd, iqr / 1.34) if iqr > 0.0 else sd
    return 0.9 * scale * n ** (-0.2)


def find_orientation_anchor(positions: np.ndarray, heading: float,
                            params: RefineParams) -> str:
    """Decide which face of the view cloud is trustworthy.

    The densest part of the merged cloud marks the face the sensors saw
    most of. When the density mode sits at or below the mean projection
    the rear face is anchored, otherwise the front. Degenerate clouds
    (too few points, zero spread) fall back to "rear".
    """
    positions = np.asarray(positions, dtype=float)
    if positions.ndim != 2 or positions.shape[0] == 0:
        raise DataError("anchor decision needs a non-empty (N, 3) cloud")
    coords = positions @ _heading_axis(heading)
    lo, hi = float(coords.min()), float(coords.max())
    if coords.size < 2 or hi - lo <= _TIE_TOL:
        return "rear"
    if params.kde_bandwidth == "auto":
        h = _silverman_bandwidth(coords)
    else:
        h = float(params.kde_bandwidth)
    if not np.isfinite(h) or h <= 0.0:
        return "rear"
    grid = np.linspace(lo, hi, 512)
    dens = np.exp(
        -0.5 * ((grid[:, None] - coords[None, :]) / h) ** 2).sum(axis=1)
    mode = float(grid[int(np.argmax(dens))])
    return "rear" if mode <= float(coords.mean()) + _TIE_TOL else "front"


def anchor_box(box: AnnotatedBox, anchor: str, coords: np.ndarray,
               params: RefineParams) -> AnnotatedBox:
    """Slide the box along its heading so the chosen face hugs the cloud.

    coords are point projections onto the heading axis. Dimensions,
    heading and the lateral/vertical centre stay untouched.
    """
    if anchor not in ("rear", "front"):
        raise ConfigError("anchor must be 'rear' or 'front'")
    coords = np.asarray(coords, dtype=float)
    if coords.size == 0:
        raise DataError("anchoring needs at least one projection")
    axis = _heading_axis(box.heading)
    length = float(box.dims[0])
    if anchor == "rear":
        target = float(coords.min()) - params.anchor_margin + length / 2.0
    else:
        target = float(coords.max()) + params.anchor_margin - length / 2.0
    delta = target - float(box.center @ axis)
    return replace(box, center=box.center + delta * axis)


def generate_pseudo_boxes(superframe: Superframe, box: AnnotatedBox,
                          clusters: Sequence[ViewCluster], s_star: float,
                          params: RefineParams) -> list[PseudoBox]:
    """One box per cluster, true to each cluster's own sampling time.

    All cluster points are first collapsed onto the reference time and
    the box is anchored against the merged cloud once; each pseudo box
    is then that anchored box translated by (mean_tau - t_star) * s_star
    along the heading, undoing the collapse for its cluster.
    """
    if not clusters:
        return []
    union = np.concatenate([c.indices for c in clusters])
    comp = speed_compensate(
        superframe.positions[union], superframe.timestamps[union],
        superframe.t_star, s_star, box.heading)
    axis = _heading_axis(box.heading)
    anchor = find_orientation_anchor(comp, box.heading, params)
    anchored = anchor_box(box, anchor, comp @ axis, params)
    out: list[PseudoBox] = []
    for j, cluster in enumerate(clusters):
        shift = (cluster.mean_tau - superframe.t_star) * s_star * axis
        out.append(PseudoBox(
            box=replace(anchored, center=anchored.center + shift),
            source_cluster=j,
            applied_shift=shift,
        ))
    return out


def _passthrough(box: AnnotatedBox) -> PseudoBox:
    return PseudoBox(box=box, source_cluster=-1, applied_shift=np.zeros(3))


def refine_track(track: AnnotatedTrack, superframes: Sequence[Superframe],
                 estimate: StateEstimate,
                 params: RefineParams | None = None) -> list[PseudoBox]:
    """Refine every annotation of a track using its speed estimates.

    superframes and estimate states must line up one-to-one with the
    track's boxes. Frames where the object is near-stationary, or where
    no cluster survives, emit the original annotation with
    source_cluster -1.
    """
    if params is None:
        params = RefineParams()
    frames = list(superframes)
    if len(frames) != len(track):
        raise AlignmentError(
            f"track has {len(track)} boxes but {len(frames)} superframes given")
    if len(estimate.states) != len(track):
        raise DataError(
            f"estimate carries {len(estimate.states)} states for "
            f"{len(track)} boxes")
    out: list[PseudoBox] = []
    for box, frame, state in zip(track.boxes, frames, estimate.states):
        if abs(frame.t_star - box.t_star) > _TIME_TOL:
            raise AlignmentError(
                f"superframe at t={frame.t_star} does not match box at "
                f"t={box.t_star}")
        if abs(state.s) < params.min_refine_speed:
            out.append(_passthrough(box))
            continue
        roi = collect_roi_points(frame, box, state.s, params)
        clusters = cluster_along_heading(frame, roi, box.heading, params)
        if not clusters:
            _log.warning(
                "track %r frame %d: no view cluster survived; passing the "
                "original box through", track.track_id, frame.frame_id)
            out.append(_passthrough(box))
            continue
        out.extend(generate_pseudo_boxes(frame, box, clusters, state.s, params))
    return out
