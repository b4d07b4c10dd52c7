"""On-disk dataset format.

A dataset directory holds one JSON-lines index (``index.jsonl``) and one
little-endian float32 point blob per sequence (``seq_NNNN.bin``, packed
x, y, z triples).

Index lines:
    {"type": "meta", ...}                 -- first line: generation settings
    {"type": "sequence", "seq_id": k, "blob": "seq_0000.bin",
     "frames": [ {"timestamp": s,
                  "segments": [{"obj": id or -1, "offset": o, "count": c}],
                  "gt":        [{"id": i, "box": [7], "speed": [2]}],
                  "proposals": [{"box": [7], "score": s, "speed": [2]}]} ]}

Offsets count points (not bytes) from the start of the sequence blob.

Trajectory files (``trajectories.jsonl`` + ``traj_points.bin``) use the same
blob convention:
    {"type": "trajectory", "seq_id": k, "traj_id": j, "boxes": [[7] * T],
     "scores": [T], "valid_mask": [T], "speeds": [[2] * T],
     "pooled": [{"offset": o, "count": c}], "gt_box": [7] or null}
"""

from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .geom import Box7
from .synth import Frame, NoisyProposal, TrackedObject
from .trajseq import PooledPoints, ProposalTrajectory

__all__ = [
    "write_sequences",
    "read_sequences",
    "write_trajectories",
    "read_trajectories",
    "DatasetError",
]


class DatasetError(IOError):
    pass


def _blob_name(seq_id: int) -> str:
    return f"seq_{seq_id:04d}.bin"


def write_sequences(out_dir, sequences, meta: dict | None = None):
    """Write (frames, objects, proposals) sequences to ``out_dir``.

    ``sequences`` is a list of tuples (frames, objects, per_frame_proposals).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    index_path = out_dir / "index.jsonl"
    with open(index_path, "w") as idx:
        idx.write(json.dumps({"type": "meta", **(meta or {})}, sort_keys=True) + "\n")
        for seq_id, (frames, objects, proposals) in enumerate(sequences):
            blob = _blob_name(seq_id)
            frame_records = []
            offset = 0
            with open(out_dir / blob, "wb") as bf:
                for t, frame in enumerate(frames):
                    segments = []
                    order = []
                    obj_ids = sorted(set(frame.labels.tolist()))
                    for oid in obj_ids:
                        pts = frame.points[frame.labels == oid]
                        segments.append({"obj": int(oid), "offset": offset, "count": len(pts)})
                        order.append(pts)
                        offset += len(pts)
                    if order:
                        bf.write(np.concatenate(order).astype("<f4").tobytes())
                    frame_records.append({
                        "timestamp": frame.timestamp,
                        "segments": segments,
                        "gt": [{"id": obj.id,
                                "box": obj.trajectory[t].to_array().tolist(),
                                "speed": obj.speeds[t].tolist()}
                               for obj in objects],
                        "proposals": [{"box": p.box.to_array().tolist(),
                                       "score": p.score,
                                       "speed": p.predicted_speed.tolist()}
                                      for p in proposals[t]],
                    })
            idx.write(json.dumps({"type": "sequence", "seq_id": seq_id,
                                  "blob": blob, "frames": frame_records},
                                 sort_keys=True) + "\n")
    return index_path


def read_sequences(dataset_dir):
    """Yield (seq_id, frames, objects, per_frame_proposals) tuples."""
    dataset_dir = Path(dataset_dir)
    index_path = dataset_dir / "index.jsonl"
    if not index_path.exists():
        raise DatasetError(f"no index.jsonl in {dataset_dir}")
    with open(index_path) as idx:
        header = json.loads(idx.readline())
        if header.get("type") != "meta":
            raise DatasetError("index.jsonl must start with a meta line")
        for line in idx:
            rec = json.loads(line)
            if rec.get("type") != "sequence":
                continue
            blob = np.fromfile(dataset_dir / rec["blob"], dtype="<f4").reshape(-1, 3)
            frames = []
            proposals = []
            objects_by_id: dict[int, dict] = {}
            T = len(rec["frames"])
            for t, fr in enumerate(rec["frames"]):
                pts_parts, label_parts = [], []
                for seg in fr["segments"]:
                    pts = blob[seg["offset"]: seg["offset"] + seg["count"]].astype(np.float64)
                    pts_parts.append(pts)
                    label_parts.append(np.full(len(pts), seg["obj"], dtype=np.int64))
                points = np.concatenate(pts_parts) if pts_parts else np.zeros((0, 3))
                labels = np.concatenate(label_parts) if label_parts else np.zeros(0, dtype=np.int64)
                frames.append(Frame(fr["timestamp"], points, labels))
                proposals.append([NoisyProposal(Box7.from_array(p["box"]), p["score"],
                                                np.asarray(p["speed"]))
                                  for p in fr["proposals"]])
                for g in fr["gt"]:
                    entry = objects_by_id.setdefault(
                        g["id"], {"boxes": [None] * T, "speeds": np.zeros((T, 2))})
                    entry["boxes"][t] = Box7.from_array(g["box"])
                    entry["speeds"][t] = g["speed"]
            objects = [TrackedObject(oid, entry["boxes"], entry["speeds"])
                       for oid, entry in sorted(objects_by_id.items())]
            yield rec["seq_id"], frames, objects, proposals


def read_meta(dataset_dir) -> dict:
    with open(Path(dataset_dir) / "index.jsonl") as idx:
        return json.loads(idx.readline())


def write_trajectories(out_dir, records):
    """Write trajectory records to ``trajectories.jsonl`` + ``traj_points.bin``.

    ``records`` is a list of (seq_id, trajectory, gt_box_or_None).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jsonl_path = out_dir / "trajectories.jsonl"
    offset = 0
    with open(jsonl_path, "w") as jf, open(out_dir / "traj_points.bin", "wb") as bf:
        jf.write(json.dumps({"type": "meta", "format": "trajectories", "version": 1},
                            sort_keys=True) + "\n")
        for traj_id, (seq_id, traj, gt_box) in enumerate(records):
            pooled_recs = []
            for pooled in (traj.pooled or []):
                bf.write(pooled.points.astype("<f4").tobytes())
                pooled_recs.append({"offset": offset, "count": pooled.count,
                                    "stored": len(pooled.points)})
                offset += len(pooled.points)
            jf.write(json.dumps({
                "type": "trajectory", "seq_id": seq_id, "traj_id": traj_id,
                "boxes": [b.to_array().tolist() for b in traj.boxes],
                "scores": traj.scores.tolist(),
                "valid_mask": traj.valid_mask.astype(int).tolist(),
                "speeds": traj.speeds.tolist(),
                "pooled": pooled_recs,
                "gt_box": gt_box.to_array().tolist() if gt_box is not None else None,
            }, sort_keys=True) + "\n")
    return jsonl_path


def read_trajectories(dataset_dir):
    """Yield (seq_id, ProposalTrajectory, gt_box_or_None) tuples."""
    dataset_dir = Path(dataset_dir)
    jsonl_path = dataset_dir / "trajectories.jsonl"
    if not jsonl_path.exists():
        raise DatasetError(f"no trajectories.jsonl in {dataset_dir}")
    blob = np.fromfile(dataset_dir / "traj_points.bin", dtype="<f4").reshape(-1, 3)
    with open(jsonl_path) as jf:
        for line in jf:
            rec = json.loads(line)
            if rec.get("type") != "trajectory":
                continue
            pooled = [PooledPoints(
                blob[p["offset"]: p["offset"] + p["stored"]].astype(np.float64),
                p["count"]) for p in rec["pooled"]]
            traj = ProposalTrajectory(
                boxes=[Box7.from_array(b) for b in rec["boxes"]],
                scores=np.asarray(rec["scores"]),
                valid_mask=np.asarray(rec["valid_mask"], dtype=bool),
                speeds=np.asarray(rec["speeds"]),
                pooled=pooled or None,
            )
            gt = Box7.from_array(rec["gt_box"]) if rec["gt_box"] is not None else None
            yield rec["seq_id"], traj, gt
