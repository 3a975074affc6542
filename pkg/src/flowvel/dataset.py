"""Dataset container: flow/depth plane files, IMU + truth CSVs, manifest.

A recorded run lives in one directory:

    run/
      manifest.txt       key=value metadata
      flow/000000.flvr   one file per flow window (2 float32 planes: u, w)
      depth/000000.flvr  optional truth depth snapshots (1 plane)
      imu.csv            t_s,accel_mps2,gyro_yaw_rps   (sensor rate)
      truth.csv          t_s,v_mps,a_mps2              (per frame, optional)

The plane container is deliberately dumb: a 16 byte header (magic, version,
width, height; little endian uint32) followed by row-major float32 planes.
The plane count is inferred from the payload size.
"""

from __future__ import annotations

import io
import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .frontend import FlowField

PLANE_MAGIC = b"FLVR"
PLANE_VERSION = 1
MANIFEST_NAME = "manifest.txt"
FLOW_UNITS = "rad_per_s"


class DatasetError(Exception):
    """Raised when a recorded run is malformed or incomplete."""


# ---------------------------------------------------------------------------
# plane container


def write_planes(path: str, planes: np.ndarray) -> None:
    """Write a (k, h, w) or (h, w) float array to a plane file atomically."""
    arr = np.asarray(planes, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValueError(f"expected 2-d or 3-d array, got shape {arr.shape}")
    _, h, w = arr.shape
    header = PLANE_MAGIC + struct.pack("<III", PLANE_VERSION, w, h)
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(header)
        f.write(arr.tobytes(order="C"))
    os.replace(tmp, path)


def read_planes(path: str) -> np.ndarray:
    """Read a plane file, returning a (k, h, w) float32 array."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 16 or raw[:4] != PLANE_MAGIC:
        raise DatasetError(f"{path}: not a plane file (bad magic)")
    version, w, h = struct.unpack("<III", raw[4:16])
    if version != PLANE_VERSION:
        raise DatasetError(f"{path}: unsupported version {version}")
    payload = len(raw) - 16
    plane_bytes = w * h * 4
    if plane_bytes == 0 or payload % plane_bytes != 0:
        raise DatasetError(
            f"{path}: payload {payload} B is not a multiple of {w}x{h} float32 planes"
        )
    k = payload // plane_bytes
    arr = np.frombuffer(raw, dtype="<f4", offset=16).reshape(k, h, w)
    return arr.astype(np.float32)


# ---------------------------------------------------------------------------
# manifest


def write_manifest(path: str, entries: dict) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        for key, val in entries.items():
            f.write(f"{key}={val}\n")
    os.replace(tmp, path)


def read_manifest(path: str) -> dict:
    entries = {}
    try:
        with open(path) as f:
            for lineno, line in enumerate(f, 1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise DatasetError(f"{path}:{lineno}: expected key=value")
                key, _, val = line.partition("=")
                entries[key.strip()] = val.strip()
    except FileNotFoundError:
        raise DatasetError(f"missing manifest: {path}") from None
    return entries


# ---------------------------------------------------------------------------
# IMU resampling


def resample_imu(t_samples, accel, gyro, fps: float, n_frames: int):
    """Block-average sensor-rate IMU samples onto the frame clock.

    Sample at time t lands in frame i when (i-1)/fps < t <= i/fps, with
    t = 0 going to frame 0.  Returns per-frame mean accel, mean gyro, and
    a boolean gap flag marking frames whose bin contained no samples (such
    frames hold the previous frame's value, or 0.0 at the start).
    """
    t_samples = np.asarray(t_samples, dtype=float)
    accel = np.asarray(accel, dtype=float)
    gyro = np.asarray(gyro, dtype=float)
    if t_samples.shape != accel.shape or t_samples.shape != gyro.shape:
        raise ValueError("t_samples, accel, gyro must have identical shapes")
    if n_frames <= 0:
        raise ValueError("n_frames must be positive")

    idx = np.ceil(t_samples * fps - 1e-9).astype(int)
    idx[idx < 0] = 0
    keep = idx < n_frames
    idx = idx[keep]

    acc_sum = np.bincount(idx, weights=accel[keep], minlength=n_frames)
    gyr_sum = np.bincount(idx, weights=gyro[keep], minlength=n_frames)
    counts = np.bincount(idx, minlength=n_frames)

    accel_frames = np.zeros(n_frames)
    gyro_frames = np.zeros(n_frames)
    gaps = counts == 0
    nz = counts > 0
    accel_frames[nz] = acc_sum[nz] / counts[nz]
    gyro_frames[nz] = gyr_sum[nz] / counts[nz]
    # forward-fill gaps so downstream code sees a continuous signal
    prev_a = 0.0
    prev_g = 0.0
    for i in range(n_frames):
        if gaps[i]:
            accel_frames[i] = prev_a
            gyro_frames[i] = prev_g
        else:
            prev_a = accel_frames[i]
            prev_g = gyro_frames[i]
    return accel_frames, gyro_frames, gaps


# ---------------------------------------------------------------------------
# writing a run


def _write_csv(path: str, header: str, rows) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        f.write(header + "\n")
        for row in rows:
            f.write(",".join(repr(float(v)) for v in row) + "\n")
    os.replace(tmp, path)


def write_dataset(
    frames,
    outdir: str,
    *,
    width_px: int,
    height_px: int,
    hfov_rad: float,
    vfov_rad: float,
    fps: float,
    flow_type: str = "instantaneous",
    imu_rate_hz: float | None = None,
    imu_t=None,
    imu_accel=None,
    imu_gyro=None,
    truth_depth_every: int = 0,
) -> str:
    """Serialize an iterable of frames into a run directory.

    ``frames`` yields objects with attributes t, flow (2,h,w), accel_meas,
    gyro_meas, truth_v, truth_a and optionally truth_depth.  Works with any
    duck-typed source, not just the simulator.  When high-rate IMU arrays are
    given they are written verbatim; otherwise the per-frame values are
    written at the frame rate.
    """
    flow_dir = os.path.join(outdir, "flow")
    depth_dir = os.path.join(outdir, "depth")
    os.makedirs(flow_dir, exist_ok=True)

    frame_rows = []
    imu_rows = []
    n_frames = 0
    wrote_depth = False
    for i, fr in enumerate(frames):
        fl = fr.flow
        if hasattr(fl, "u"):  # FlowField or anything shaped like one
            flow = np.stack([fl.u, fl.w]).astype(np.float32)
        else:
            flow = np.asarray(fl, dtype=np.float32)
        if flow.shape != (2, height_px, width_px):
            raise ValueError(
                f"frame {i}: flow shape {flow.shape} != (2, {height_px}, {width_px})"
            )
        write_planes(os.path.join(flow_dir, f"{i:06d}.flvr"), flow)
        frame_rows.append((fr.t, fr.truth_v, fr.truth_a))
        if imu_t is None:
            imu_rows.append((fr.t, fr.accel_meas, fr.gyro_meas))
        depth = getattr(fr, "truth_depth", None)
        if truth_depth_every > 0 and depth is not None and i % truth_depth_every == 0:
            os.makedirs(depth_dir, exist_ok=True)
            write_planes(os.path.join(depth_dir, f"{i:06d}.flvr"), np.asarray(depth))
            wrote_depth = True
        n_frames = i + 1

    if imu_t is not None:
        imu_rows = list(zip(np.asarray(imu_t), np.asarray(imu_accel), np.asarray(imu_gyro)))

    _write_csv(os.path.join(outdir, "imu.csv"), "t_s,accel_mps2,gyro_yaw_rps", imu_rows)
    _write_csv(os.path.join(outdir, "truth.csv"), "t_s,v_mps,a_mps2", frame_rows)

    manifest = {
        "format_version": 1,
        "width_px": width_px,
        "height_px": height_px,
        "hfov_rad": repr(float(hfov_rad)),
        "vfov_rad": repr(float(vfov_rad)),
        "fps": repr(float(fps)),
        "n_frames": n_frames,
        "flow_units": FLOW_UNITS,
        "flow_type": flow_type,
        "imu_rate_hz": repr(float(imu_rate_hz if imu_rate_hz is not None else fps)),
        "truth_depth_every": truth_depth_every if wrote_depth else 0,
    }
    write_manifest(os.path.join(outdir, MANIFEST_NAME), manifest)
    return outdir


# ---------------------------------------------------------------------------
# reading a run


def _read_csv(path: str, expect_header: str) -> np.ndarray:
    try:
        with open(path) as f:
            header = f.readline().strip()
            if header != expect_header:
                raise DatasetError(
                    f"{path}: header {header!r}, expected {expect_header!r}"
                )
            body = f.read()
            if not body.strip():  # loadtxt warns on empty input
                return np.zeros((0, len(expect_header.split(","))))
            data = np.loadtxt(io.StringIO(body), delimiter=",", ndmin=2)
    except FileNotFoundError:
        raise DatasetError(f"missing file: {path}") from None
    except ValueError as e:
        raise DatasetError(f"{path}: {e}") from None
    return data


@dataclass
class ReplayFrame:
    """One frame read back from disk, shaped like a live simulator frame."""

    t: float
    flow: FlowField
    accel_meas: float
    gyro_meas: float
    truth_v: float = math.nan
    truth_a: float = math.nan
    truth_depth: np.ndarray | None = None


@dataclass
class ReplayDataset:
    """Reader for a recorded run directory.

    Validates the manifest against the files on disk at construction and
    exposes the same per-frame quantities the simulator produces, with the
    sensor-rate IMU block-averaged onto the frame clock.
    """

    root: str
    manifest: dict = field(init=False)
    width_px: int = field(init=False)
    height_px: int = field(init=False)
    hfov_rad: float = field(init=False)
    vfov_rad: float = field(init=False)
    fps: float = field(init=False)
    n_frames: int = field(init=False)
    flow_type: str = field(init=False)
    accel_frames: np.ndarray = field(init=False)
    gyro_frames: np.ndarray = field(init=False)
    imu_gaps: np.ndarray = field(init=False)
    truth_t: np.ndarray = field(init=False)
    truth_v: np.ndarray = field(init=False)
    truth_a: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        man = read_manifest(os.path.join(self.root, MANIFEST_NAME))
        try:
            self.width_px = int(man["width_px"])
            self.height_px = int(man["height_px"])
            self.hfov_rad = float(man["hfov_rad"])
            self.vfov_rad = float(man["vfov_rad"])
            self.fps = float(man["fps"])
            self.n_frames = int(man["n_frames"])
            self.flow_type = man.get("flow_type", "instantaneous")
        except KeyError as e:
            raise DatasetError(f"manifest missing key {e.args[0]}") from None
        if man.get("flow_units", FLOW_UNITS) != FLOW_UNITS:
            raise DatasetError(f"unsupported flow_units {man.get('flow_units')!r}")
        self.manifest = man

        flow_dir = os.path.join(self.root, "flow")
        for i in range(self.n_frames):
            p = os.path.join(flow_dir, f"{i:06d}.flvr")
            if not os.path.exists(p):
                raise DatasetError(
                    f"manifest says {self.n_frames} frames but {p} is missing"
                )

        imu = _read_csv(os.path.join(self.root, "imu.csv"), "t_s,accel_mps2,gyro_yaw_rps")
        if imu.shape[0] == 0:
            raise DatasetError(f"{self.root}/imu.csv: no samples")
        t = imu[:, 0]
        if np.any(np.diff(t) <= 0):
            raise DatasetError(f"{self.root}/imu.csv: timestamps not strictly increasing")
        self.accel_frames, self.gyro_frames, self.imu_gaps = resample_imu(
            t, imu[:, 1], imu[:, 2], self.fps, self.n_frames
        )

        truth_path = os.path.join(self.root, "truth.csv")
        if os.path.exists(truth_path):
            tr = _read_csv(truth_path, "t_s,v_mps,a_mps2")
            self.truth_t = tr[:, 0]
            self.truth_v = tr[:, 1]
            self.truth_a = tr[:, 2]
        else:
            self.truth_t = np.array([])
            self.truth_v = np.array([])
            self.truth_a = np.array([])

    def flow_at(self, i: int) -> np.ndarray:
        if not 0 <= i < self.n_frames:
            raise IndexError(f"frame {i} out of range [0, {self.n_frames})")
        path = os.path.join(self.root, "flow", f"{i:06d}.flvr")
        planes = read_planes(path)
        if planes.shape != (2, self.height_px, self.width_px):
            raise DatasetError(
                f"{path}: expected 2 planes of {self.height_px}x{self.width_px}, "
                f"got shape {planes.shape}"
            )
        return planes

    def depth_at(self, i: int) -> np.ndarray | None:
        p = os.path.join(self.root, "depth", f"{i:06d}.flvr")
        if not os.path.exists(p):
            return None
        return read_planes(p)[0]

    def iter_frames(self):
        """Yield ReplayFrame objects in time order."""
        have_truth = self.truth_v.size == self.n_frames
        for i in range(self.n_frames):
            t = i / self.fps
            planes = self.flow_at(i)
            yield ReplayFrame(
                t=t,
                flow=FlowField(u=planes[0], w=planes[1], t=t),
                accel_meas=float(self.accel_frames[i]),
                gyro_meas=float(self.gyro_frames[i]),
                truth_v=float(self.truth_v[i]) if have_truth else math.nan,
                truth_a=float(self.truth_a[i]) if have_truth else math.nan,
                truth_depth=self.depth_at(i),
            )


def read_dataset(root: str) -> ReplayDataset:
    """Open a recorded run directory for replay."""
    return ReplayDataset(root)
