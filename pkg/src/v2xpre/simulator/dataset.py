"""On-disk scenario datasets: JSON manifests plus little-endian binary frame records.

Layout::

    <root>/dataset.json               format, version, config echo, splits
    <root>/<scenario>/manifest.json   seed, full scenario (agents, objects), frame list
    <root>/<scenario>/frame_NNNN.bin  one Frame, see ``docs/FORMATS.md``
"""
from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from v2xpre.boxes import CLASSES, Box3D
from v2xpre.geometry import Pose, PointCloud
from v2xpre.simulator.lidar import Frame, render_frame
from v2xpre.simulator.scene import Scenario

FORMAT_VERSION = 1
FRAME_MAGIC = b"V2XF"
KIND_CODES = {"vehicle": 0, "infrastructure": 1}
KIND_NAMES = {v: k for k, v in KIND_CODES.items()}


class FormatError(ValueError):
    pass


def dump_json(obj, path: Path):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def encode_frame(f: Frame) -> bytes:
    buf = io.BytesIO()
    buf.write(FRAME_MAGIC)
    buf.write(struct.pack("<IdII", FORMAT_VERSION, f.time, f.ego_index, f.n_agents))
    kinds = f.agent_kinds or ("vehicle",) * f.n_agents
    for cloud, pose, kind in zip(f.per_agent_clouds, f.per_agent_poses, kinds):
        buf.write(struct.pack("<BI", KIND_CODES[kind], len(cloud)))
        buf.write(cloud.points.astype("<f8").tobytes())
        buf.write(cloud.provenance.astype("<u2").tobytes())
        buf.write(pose.to_array().astype("<f8").tobytes())
    buf.write(struct.pack("<I", len(f.gt_boxes)))
    for b in f.gt_boxes:
        buf.write(b.to_array().astype("<f8").tobytes())
        buf.write(struct.pack("<BBi", CLASSES.index(b.cls), int(b.unobserved), b.obj_id))
    return buf.getvalue()


def decode_frame(data: bytes) -> Frame:
    if data[:4] != FRAME_MAGIC:
        raise FormatError("not a frame record (bad magic)")
    version, time, ego, n_agents = struct.unpack_from("<IdII", data, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"frame format version {version}, expected {FORMAT_VERSION}")
    off = 4 + struct.calcsize("<IdII")
    clouds, poses, kinds = [], [], []
    for _ in range(n_agents):
        kind, n = struct.unpack_from("<BI", data, off)
        off += struct.calcsize("<BI")
        pts = np.frombuffer(data, "<f8", n * 3, off).reshape(n, 3)
        off += 24 * n
        prov = np.frombuffer(data, "<u2", n, off)
        off += 2 * n
        pose = np.frombuffer(data, "<f8", 12, off)
        off += 96
        clouds.append(PointCloud(pts.astype(np.float64), prov.astype(np.int64)))
        poses.append(Pose.from_array(pose))
        kinds.append(KIND_NAMES[kind])
    (n_boxes,) = struct.unpack_from("<I", data, off)
    off += 4
    boxes = []
    for _ in range(n_boxes):
        v = np.frombuffer(data, "<f8", 7, off)
        off += 56
        cls, flags, oid = struct.unpack_from("<BBi", data, off)
        off += struct.calcsize("<BBi")
        boxes.append(Box3D(v[:3].copy(), tuple(v[3:6]), float(v[6]), CLASSES[cls],
                           bool(flags & 1), oid))
    if off != len(data):
        raise FormatError(f"{len(data) - off} trailing bytes in frame record")
    return Frame(time, ego, tuple(clouds), tuple(poses), tuple(boxes), tuple(kinds))


def write_scenario(scenario: Scenario, out_dir: Path) -> list:
    """Render every frame of ``scenario`` into ``out_dir``; returns the frames."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    frames, entries = [], []
    for k, t in enumerate(scenario.config.frame_times()):
        f = render_frame(scenario, float(t))
        name = f"frame_{k:04d}.bin"
        (out_dir / name).write_bytes(encode_frame(f))
        frames.append(f)
        entries.append({"file": name, "time": float(t)})
    dump_json({"format_version": FORMAT_VERSION, "seed": scenario.config.seed,
               "scenario": scenario.to_dict(), "frames": entries}, out_dir / "manifest.json")
    return frames


def read_manifest(scenario_dir: Path) -> dict:
    m = json.loads((Path(scenario_dir) / "manifest.json").read_text())
    if m.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"{scenario_dir}: manifest version {m.get('format_version')}, "
                          f"expected {FORMAT_VERSION}")
    return m


class ScenarioRecord:
    """A scenario directory: the reconstructed Scenario plus lazily loaded frames."""

    def __init__(self, path):
        self.path = Path(path)
        self.manifest = read_manifest(self.path)
        self.scenario = Scenario.from_dict(self.manifest["scenario"])
        self.times = [e["time"] for e in self.manifest["frames"]]

    def __len__(self):
        return len(self.manifest["frames"])

    def frame(self, k: int) -> Frame:
        return decode_frame((self.path / self.manifest["frames"][k]["file"]).read_bytes())

    def frames(self):
        return [self.frame(k) for k in range(len(self))]


def write_dataset(root, scenarios: dict, config_echo: dict) -> dict:
    """``scenarios`` maps split name to a list of Scenario. Returns counts."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    splits, counts = {}, {"frames": 0, "points": 0}
    idx = 0
    for split, items in scenarios.items():
        names = []
        for sc in items:
            name = f"scenario_{idx:04d}"
            idx += 1
            frames = write_scenario(sc, root / name)
            counts["frames"] += len(frames)
            counts["points"] += sum(len(c) for f in frames for c in f.per_agent_clouds)
            names.append(name)
        splits[split] = names
    dump_json({"format": "v2xpre-dataset", "format_version": FORMAT_VERSION,
               "config": config_echo, "splits": splits}, root / "dataset.json")
    return counts


class Dataset:
    """Read access to a dataset root written by ``write_dataset``."""

    def __init__(self, root):
        self.root = Path(root)
        meta_path = self.root / "dataset.json"
        if not meta_path.exists():
            raise FormatError(f"{self.root} has no dataset.json")
        self.meta = json.loads(meta_path.read_text())
        if self.meta.get("format_version") != FORMAT_VERSION:
            raise FormatError(f"dataset version {self.meta.get('format_version')}, "
                              f"expected {FORMAT_VERSION}")
        self._records = {}

    @property
    def splits(self) -> dict:
        return self.meta["splits"]

    def record(self, name) -> ScenarioRecord:
        if name not in self._records:
            self._records[name] = ScenarioRecord(self.root / name)
        return self._records[name]

    def frames(self, split: str) -> list:
        return [f for name in self.splits.get(split, []) for f in self.record(name).frames()]

    def indexed_frames(self, split: str):
        """(scenario record, frame index) pairs in deterministic order."""
        return [(self.record(n), k) for n in self.splits.get(split, [])
                for k in range(len(self.record(n)))]
