"""
On-disk formats: dataset manifests, PFM/PNG images and training checkpoints.

Checkpoint layout (all integers little-endian)::

    bytes 0..7     magic b"EXBLCKP1"
    bytes 8..15    uint64 header length L
    bytes 16..16+L UTF-8 JSON header (sorted keys)
    payload        arrays back to back, in the order listed in header["arrays"]:
                   density f4, sh f4, occupancy u1, controls f4, adam_m f4,
                   adam_v f4, rms_density f4, rms_sh f4, perm u4

Each header["arrays"] entry records name, dtype, shape and byte offset
relative to the payload start.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .camera import Intrinsics
from .se3 import BezierTrajectory, Pose
from .synth import BlurObservation, Dataset, TestView
from .training import Adam, RMSProp, TrainConfig, TrainState
from .voxel import VoxelGrid

MANIFEST_VERSION = "exblurf-dataset/1"
MANIFEST_NAME = "manifest.json"
CHECKPOINT_MAGIC = b"EXBLCKP1"
CHECKPOINT_VERSION = 1


# -- images -------------------------------------------------------------------

def write_pfm(path, image: np.ndarray) -> None:
    """Little-endian color PFM; rows stored bottom to top."""
    image = np.asarray(image, dtype="<f4")
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError("PFM writer expects an (H, W, 3) image")
    h, w, _ = image.shape
    with open(path, "wb") as f:
        f.write(f"PF\n{w} {h}\n-1.0\n".encode("ascii"))
        f.write(np.ascontiguousarray(image[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        kind = f.readline().strip()
        if kind not in (b"PF", b"Pf"):
            raise ValueError(f"{path}: not a PFM file")
        w, h = (int(v) for v in f.readline().split())
        scale = float(f.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        channels = 3 if kind == b"PF" else 1
        data = np.frombuffer(f.read(), dtype=dtype, count=w * h * channels)
    img = data.reshape(h, w, channels)[::-1].astype(np.float32)
    return img if channels == 3 else np.repeat(img, 3, axis=2)


def write_png(path, image: np.ndarray) -> None:
    img8 = np.round(np.clip(np.asarray(image, float), 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(img8, mode="RGB").save(path, format="PNG")


def write_image_pair(stem: Path, image: np.ndarray) -> str:
    """Write <stem>.pfm and <stem>.png; returns the PFM file name."""
    write_pfm(stem.with_suffix(".pfm"), image)
    write_png(stem.with_suffix(".png"), image)
    return stem.with_suffix(".pfm").name


# -- JSON helpers -------------------------------------------------------------

def pose_to_dict(pose: Pose) -> dict:
    return {"rotation": pose.rotation.tolist(), "translation": pose.translation.tolist()}


def pose_from_dict(d: dict) -> Pose:
    return Pose(np.array(d["rotation"], float), np.array(d["translation"], float))


def trajectory_to_dict(traj: BezierTrajectory) -> dict:
    return {"order": traj.order, "controls": traj.controls.tolist()}


def trajectory_from_dict(d: dict) -> BezierTrajectory:
    traj = BezierTrajectory.from_array(np.array(d["controls"], float))
    if traj.order != int(d["order"]):
        raise ValueError("trajectory order does not match its control count")
    return traj


def dump_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def load_json(path) -> dict:
    with open(path, encoding="utf-8") as f:
        return json.load(f)


# -- datasets -----------------------------------------------------------------

def dataset_manifest(ds: Dataset, names: dict) -> dict:
    views = []
    for i, obs in enumerate(ds.observations):
        views.append({
            "blurry": names[("blurry", i)],
            "sharp": names.get(("sharp", i)),
            "intrinsics": obs.intrinsics.to_dict(),
            "initial_pose": pose_to_dict(obs.initial_pose),
            "gt_trajectory": (trajectory_to_dict(obs.gt_trajectory)
                              if obs.gt_trajectory is not None else None),
        })
    tests = [{"sharp": names[("test", i)], "pose": pose_to_dict(tv.pose),
              "intrinsics": tv.intrinsics.to_dict()} for i, tv in enumerate(ds.test_views)]
    return {"version": MANIFEST_VERSION, "bounds_min": np.asarray(ds.bounds_min).tolist(),
            "bounds_max": np.asarray(ds.bounds_max).tolist(), "views": views,
            "test_views": tests, "meta": ds.meta}


def save_dataset(ds: Dataset, out_dir) -> Path:
    out = Path(out_dir)
    (out / "train").mkdir(parents=True, exist_ok=True)
    (out / "test").mkdir(parents=True, exist_ok=True)
    names = {}
    for i, obs in enumerate(ds.observations):
        names[("blurry", i)] = "train/" + write_image_pair(out / "train" / f"{i:03d}_blurry",
                                                           obs.blurry)
        if obs.sharp is not None:
            names[("sharp", i)] = "train/" + write_image_pair(out / "train" / f"{i:03d}_sharp",
                                                              obs.sharp)
    for i, tv in enumerate(ds.test_views):
        names[("test", i)] = "test/" + write_image_pair(out / "test" / f"{i:03d}", tv.image)
    dump_json(out / MANIFEST_NAME, dataset_manifest(ds, names))
    return out


def parse_manifest(manifest: dict, root) -> Dataset:
    root = Path(root)
    if manifest.get("version") != MANIFEST_VERSION:
        raise ValueError(f"unrecognized manifest version {manifest.get('version')!r}")
    observations = []
    for rec in manifest["views"]:
        k = Intrinsics.from_dict(rec["intrinsics"])
        blurry = read_pfm(root / rec["blurry"])
        sharp = read_pfm(root / rec["sharp"]) if rec.get("sharp") else None
        if blurry.shape != (k.height, k.width, 3):
            raise ValueError(f"{rec['blurry']}: size does not match intrinsics")
        gt = rec.get("gt_trajectory")
        observations.append(BlurObservation(blurry, sharp, k, pose_from_dict(rec["initial_pose"]),
                                            trajectory_from_dict(gt) if gt else None))
    tests = [TestView(read_pfm(root / rec["sharp"]), pose_from_dict(rec["pose"]),
                      Intrinsics.from_dict(rec["intrinsics"]))
             for rec in manifest.get("test_views", [])]
    return Dataset(observations, tests, np.array(manifest["bounds_min"], float),
                   np.array(manifest["bounds_max"], float), manifest.get("meta", {}))


def load_dataset(path) -> Dataset:
    root = Path(path)
    return parse_manifest(load_json(root / MANIFEST_NAME), root)


# -- checkpoints --------------------------------------------------------------

def _checkpoint_arrays(state: TrainState) -> list[tuple[str, np.ndarray]]:
    return [
        ("density", state.grid.density.astype("<f4")),
        ("sh", state.grid.sh.astype("<f4")),
        ("occupancy", state.grid.occupancy.astype("u1")),
        ("controls", state.controls.astype("<f4")),
        ("adam_m", state.adam.m.astype("<f4")),
        ("adam_v", state.adam.v.astype("<f4")),
        ("rms_density", state.rms_density.sq.astype("<f4")),
        ("rms_sh", state.rms_sh.sq.astype("<f4")),
        ("perm", state.perm.astype("<u4")),
    ]


def checkpoint_bytes(state: TrainState, cfg: TrainConfig) -> bytes:
    arrays = _checkpoint_arrays(state)
    entries, offset = [], 0
    for name, arr in arrays:
        entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                        "offset": offset})
        offset += arr.nbytes
    header = {
        "version": CHECKPOINT_VERSION,
        "iteration": state.iteration,
        "config": cfg.to_dict(),
        "dims": list(state.grid.dims),
        "bounds_min": state.grid.bounds_min.tolist(),
        "bounds_max": state.grid.bounds_max.tolist(),
        "adam_t": state.adam.t,
        "cursor": state.cursor,
        "n_upsamples": state.n_upsamples,
        "rng_state": state.rng.bit_generator.state,
        "arrays": entries,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<Q", len(head)), head]
    parts += [np.ascontiguousarray(arr).tobytes() for _, arr in arrays]
    return b"".join(parts)


def save_checkpoint(path, state: TrainState, cfg: TrainConfig) -> None:
    data = checkpoint_bytes(state, cfg)
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[TrainState, TrainConfig]:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (n_head,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + n_head].decode("utf-8"))
    payload = raw[16 + n_head:]
    arrays = {}
    for e in header["arrays"]:
        dtype = np.dtype(e["dtype"])
        count = int(np.prod(e["shape"]))
        arr = np.frombuffer(payload, dtype=dtype, count=count, offset=e["offset"])
        arrays[e["name"]] = arr.reshape(e["shape"]).copy()
    cfg = TrainConfig.from_dict(header["config"])
    f32 = lambda name: arrays[name].astype(np.float32)
    grid = VoxelGrid(tuple(header["dims"]), header["bounds_min"], header["bounds_max"],
                     f32("density"), f32("sh"), arrays["occupancy"].astype(bool))
    controls = f32("controls")
    adam = Adam(controls.shape, cfg.lr_traj)
    adam.m[...] = arrays["adam_m"]
    adam.v[...] = arrays["adam_v"]
    adam.t = int(header["adam_t"])
    rms_d = RMSProp(grid.density.shape, cfg.lr_density)
    rms_d.sq[...] = arrays["rms_density"]
    rms_s = RMSProp(grid.sh.shape, cfg.lr_sh)
    rms_s.sq[...] = arrays["rms_sh"]
    rng = np.random.default_rng()
    rng.bit_generator.state = header["rng_state"]
    state = TrainState(int(header["iteration"]), grid, controls, adam, rms_d, rms_s, rng,
                       arrays["perm"].astype(np.int64), int(header["cursor"]),
                       int(header["n_upsamples"]))
    return state, cfg
