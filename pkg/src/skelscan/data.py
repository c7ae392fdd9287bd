"""Skeleton ingestion, preprocessing, stream derivation and a synthetic action set."""

from __future__ import annotations

import enum
import hashlib
import json
import queue
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import tensor_io
from .attention import SkeletonTopology
from .errors import ConfigError, DataError, ParseError

NTU_JOINTS = 25
NTU_JOINT_FIELDS = 12
MAX_PERSONS = 2


class StreamKind(str, enum.Enum):
    joint = "joint"
    bone = "bone"
    joint_motion = "joint_motion"
    bone_motion = "bone_motion"


@dataclass
class SkeletonSequence:
    """``frames`` has shape (T_raw, n_persons, n_joints, 3)."""

    frames: np.ndarray
    label: int = -1
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3:
            raise DataError(f"frames must be (T, persons, joints, 3), got {self.frames.shape}")
        if self.frames.shape[0] < 1:
            raise DataError("a skeleton sequence needs at least one frame")
        if self.frames.shape[1] not in (1, 2):
            raise DataError(f"n_persons must be 1 or 2, got {self.frames.shape[1]}")
        if not np.all(np.isfinite(self.frames)):
            raise DataError("skeleton coordinates must be finite")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


# -- NTU text format -------------------------------------------------------------------


class _Lines:
    def __init__(self, text: str):
        self.lines = text.splitlines()
        self.pos = 0

    def next(self, what: str) -> list[str]:
        while self.pos < len(self.lines) and not self.lines[self.pos].strip():
            self.pos += 1
        if self.pos >= len(self.lines):
            raise ParseError(f"unexpected end of file while reading {what}", self.pos + 1)
        self.pos += 1
        return self.lines[self.pos - 1].split()

    def count(self, what: str) -> int:
        fields = self.next(what)
        if len(fields) != 1:
            raise ParseError(f"expected a single {what}, got {len(fields)} fields", self.pos)
        try:
            value = int(fields[0])
        except ValueError:
            raise ParseError(f"{what} is not an integer: {fields[0]!r}", self.pos) from None
        if value < 0:
            raise ParseError(f"negative {what}: {value}", self.pos)
        return value


def motion_energy(track: np.ndarray, present: np.ndarray) -> float:
    """Sum over consecutive present frames of the joint-summed displacement norm."""
    both = present[1:] & present[:-1]
    if not np.any(both):
        return 0.0
    step = np.linalg.norm(track[1:] - track[:-1], axis=-1).sum(axis=-1)
    return float(step[both].sum())


def parse_ntu_skeleton(text: str, label: int = -1, meta: dict | None = None) -> SkeletonSequence:
    """Parse the NTU ``.skeleton`` text layout.

    Layout: frame count; per frame a body count; per body an info line whose
    first field is the tracking id, a joint-count line, then one line per
    joint whose first three fields are x y z.  Bodies are tracked by id across
    frames; when more than two appear the two with the largest motion energy
    are kept (most active first).
    """
    src = _Lines(text)
    n_frames = src.count("frame count")
    tracks: dict[str, np.ndarray] = {}
    present: dict[str, np.ndarray] = {}
    order: list[str] = []
    for t in range(n_frames):
        n_bodies = src.count(f"body count of frame {t}")
        for _ in range(n_bodies):
            info = src.next("body info line")
            if not info:
                raise ParseError("empty body info line", src.pos)
            if len(info) == 1:
                raise ParseError("body info line has a single field; expected the tracking id and flags", src.pos)
            body_id = info[0]
            n_joints = src.count("joint count")
            if n_joints != NTU_JOINTS:
                raise ParseError(f"expected {NTU_JOINTS} joints, got {n_joints}", src.pos)
            if body_id not in tracks:
                tracks[body_id] = np.zeros((n_frames, NTU_JOINTS, 3))
                present[body_id] = np.zeros(n_frames, dtype=bool)
                order.append(body_id)
            for j in range(n_joints):
                fields = src.next(f"joint {j}")
                if len(fields) < 3:
                    raise ParseError(f"joint line needs at least 3 fields, got {len(fields)}", src.pos)
                try:
                    tracks[body_id][t, j] = [float(v) for v in fields[:3]]
                except ValueError:
                    raise ParseError(f"non-numeric joint coordinate in {fields[:3]}", src.pos) from None
            present[body_id][t] = True
    if n_frames == 0:
        raise ParseError("file declares zero frames", 1)
    ranked = sorted(order, key=lambda b: -motion_energy(tracks[b], present[b]))[:MAX_PERSONS]
    if not ranked:
        frames = np.zeros((n_frames, 1, NTU_JOINTS, 3))
    else:
        frames = np.stack([tracks[b] for b in ranked], axis=1)
    info = dict(meta or {})
    info["body_ids"] = ranked
    return SkeletonSequence(frames, label, info)


def format_ntu_skeleton(frames: np.ndarray, body_ids: Sequence[str] | None = None) -> str:
    """Inverse of :func:`parse_ntu_skeleton` for (T, P, 25, 3) arrays; unused fields are zero."""
    T, P = frames.shape[:2]
    ids = list(body_ids or [str(72057594037900000 + p) for p in range(P)])
    out = [str(T)]
    for t in range(T):
        out.append(str(P))
        for p in range(P):
            out.append(f"{ids[p]} 0 1 1 1 1 0 0 0 2")
            out.append(str(frames.shape[2]))
            for x, y, z in frames[t, p]:
                out.append(f"{float(x)!r} {float(y)!r} {float(z)!r} 0 0 0 0 0 0 0 0 2")
    return "\n".join(out) + "\n"


# -- preprocessing ---------------------------------------------------------------------


def _interp_time(x: np.ndarray, positions: np.ndarray) -> np.ndarray:
    T = x.shape[0]
    i0 = np.clip(np.floor(positions).astype(np.int64), 0, T - 1)
    i1 = np.minimum(i0 + 1, T - 1)
    w = (positions - i0).reshape((-1,) + (1,) * (x.ndim - 1))
    return x[i0] * (1.0 - w) + x[i1] * w


def resample_frames(seq, T_out: int = 64, mode: str = "eval_full", rng: np.random.Generator | None = None,
                    crop_range: tuple[float, float] = (0.5, 1.0)) -> np.ndarray:
    """Linear interpolation of a (T_raw, ...) sequence to ``T_out`` frames.

    ``train_random_crop`` first picks a window of ``ratio * T_raw`` frames at a
    random offset, ``ratio`` uniform in ``crop_range``.
    """
    x = seq.frames if isinstance(seq, SkeletonSequence) else np.asarray(seq, dtype=np.float64)
    if T_out < 2:
        raise ConfigError(f"T_out must be at least 2, got {T_out}")
    T = x.shape[0]
    if T == 0:
        raise DataError("cannot resample an empty sequence")
    if mode == "eval_full":
        start, length = 0.0, T
    elif mode == "train_random_crop":
        rng = rng if rng is not None else np.random.default_rng()
        ratio = rng.uniform(*crop_range)
        length = int(np.clip(round(ratio * T), min(2, T), T))
        start = float(rng.integers(0, T - length + 1))
    else:
        raise ConfigError(f"unknown resample mode {mode!r}")
    positions = np.linspace(start, start + length - 1, T_out)
    return _interp_time(x, positions)


def derive_stream(x: np.ndarray, kind: StreamKind | str, topology: SkeletonTopology | None = None,
                  time_axis: int = 0, joint_axis: int = -2) -> np.ndarray:
    """Joint / bone / motion views of a coordinate array (time and joint axes configurable)."""
    kind = StreamKind(kind)
    x = np.asarray(x, dtype=np.float64)
    if kind in (StreamKind.bone, StreamKind.bone_motion):
        if topology is None:
            raise ConfigError("bone streams need a topology")
        x = x - np.take(x, topology.parent, axis=joint_axis)
    if kind in (StreamKind.joint_motion, StreamKind.bone_motion):
        moved = np.zeros_like(x)
        T = x.shape[time_axis]
        if T > 1:
            head = [slice(None)] * x.ndim
            head[time_axis] = slice(0, T - 1)
            nxt = [slice(None)] * x.ndim
            nxt[time_axis] = slice(1, T)
            moved[tuple(head)] = x[tuple(nxt)] - x[tuple(head)]
        x = moved
    return x


def center_sequence(frames: np.ndarray, center_joint: int) -> np.ndarray:
    """Subtract person 0's ``center_joint`` at frame 0 from every present person."""
    origin = frames[0, 0, center_joint]
    present = np.any(frames != 0, axis=(0, 2, 3))
    out = frames.copy()
    out[:, present] -= origin
    return out


def prepare_sample(seq: SkeletonSequence, T_out: int, mode: str, stream: StreamKind | str,
                   topology: SkeletonTopology, center_joint: int, rng: np.random.Generator | None = None,
                   n_persons: int | None = None) -> np.ndarray:
    """Model-ready (P, 3, T_out, V) array: center, resample, derive, zero-fill persons."""
    frames = center_sequence(seq.frames, center_joint)
    x = resample_frames(frames, T_out, mode, rng)
    x = derive_stream(x, stream, topology)
    P = n_persons or x.shape[1]
    if x.shape[1] < P:
        x = np.concatenate([x, np.zeros((x.shape[0], P - x.shape[1]) + x.shape[2:])], axis=1)
    return np.ascontiguousarray(x[:, :P].transpose(1, 3, 0, 2))


# -- synthetic actions -----------------------------------------------------------------


def rest_pose(topology: SkeletonTopology, bone_length: float = 0.15) -> np.ndarray:
    """A fixed, deterministic tree embedding of the skeleton."""
    rng = np.random.default_rng(1234)
    pose = np.zeros((topology.n_joints, 3))
    order = np.argsort(topology.hop[topology.root], kind="stable")
    for j in order:
        p = topology.parent[j]
        if j == topology.root:
            continue
        d = rng.normal(size=3)
        d[1] = abs(d[1]) + 0.5
        pose[j] = pose[p] + bone_length * d / np.linalg.norm(d)
    return pose


@dataclass(frozen=True)
class ActionTemplate:
    frequency: int
    amplitude: np.ndarray  # (V,)
    phase: np.ndarray      # (V,)
    direction: np.ndarray  # (V, 3) unit vectors
    global_freq: int
    global_dir: np.ndarray  # (3,)
    global_phase: float


def action_templates(n_classes: int, topology: SkeletonTopology, seed: int) -> list[ActionTemplate]:
    """Class motion patterns: a frequency, an active joint region with per-joint
    phases and directions, and a zero-mean global trajectory."""
    rng = np.random.default_rng([seed, 7919])
    V = topology.n_joints
    depth = topology.hop[topology.root]
    leaves = [j for j in range(V) if depth[j] >= 2]
    templates = []
    for k in range(n_classes):
        centre = leaves[rng.integers(len(leaves))]
        near = topology.hop[centre] <= 2
        amplitude = np.where(near, 0.25, 0.03)
        direction = rng.normal(size=(V, 3))
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
        g = rng.normal(size=3)
        templates.append(ActionTemplate(
            frequency=int(1 + k % 3),
            amplitude=amplitude,
            phase=rng.uniform(0, 2 * np.pi, V),
            direction=direction,
            global_freq=int(1 + (k // 3) % 2),
            global_dir=g / np.linalg.norm(g),
            global_phase=float(rng.uniform(0, 2 * np.pi)),
        ))
    return templates


def render_action(tpl: ActionTemplate, base: np.ndarray, T_raw: int, phase: float = 0.0, scale: float = 1.0,
                  shift=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Noise-free (T_raw, V, 3) motion of one template under the given jitter."""
    t = np.arange(T_raw) / T_raw
    arg = 2 * np.pi * tpl.frequency * t[:, None] + tpl.phase[None, :] + phase          # T, V
    local = (scale * tpl.amplitude * np.sin(arg))[..., None] * tpl.direction[None]    # T, V, 3
    glob = 0.2 * np.sin(2 * np.pi * tpl.global_freq * t + tpl.global_phase + phase)
    return base[None] + local + glob[:, None, None] * tpl.global_dir + np.asarray(shift)


def synth_dataset(n_classes: int, n_per_class: int, T_raw: int, topology: SkeletonTopology, seed: int,
                  noise: float = 0.02, phase_jitter: float = 0.4, translation: float = 0.5,
                  verify: bool = True) -> list[SkeletonSequence]:
    """Single-person synthetic actions, class-balanced, in class-interleaved order.

    Every motion component completes a whole number of cycles over the clip,
    so the time-average of each joint carries no class information.  Samples
    vary by a phase offset, amplitude scale, body translation and Gaussian
    noise.  With ``verify`` the frame-mean nearest-centroid baseline is run and
    must stay below 60%.
    """
    if not 1 <= n_classes <= 16:
        raise ConfigError(f"n_classes must lie in [1, 16], got {n_classes}")
    if T_raw < 2:
        raise ConfigError("T_raw must be at least 2")
    templates = action_templates(n_classes, topology, seed)
    base = rest_pose(topology)
    rng = np.random.default_rng([seed, 104729])
    out = []
    for i in range(n_per_class):
        for k, tpl in enumerate(templates):
            theta = float(rng.uniform(-phase_jitter, phase_jitter))
            scale = float(rng.uniform(0.8, 1.2))
            shift = rng.uniform(-translation, translation, 3)
            frames = render_action(tpl, base, T_raw, theta, scale, shift)
            if noise:
                frames = frames + rng.normal(0.0, noise, frames.shape)
            meta = {"index": i, "synthetic": True, "phase": theta, "scale": scale, "shift": shift.tolist()}
            out.append(SkeletonSequence(frames[:, None], k, meta))
    if verify and n_classes >= 2:
        acc = frame_mean_centroid_accuracy(out)
        if acc >= 0.6:
            raise DataError(f"synthetic classes are separable from frame means ({acc:.2%}); "
                            "increase translation or noise")
    return out


def frame_mean_centroid_accuracy(train: Sequence[SkeletonSequence],
                                 test: Sequence[SkeletonSequence] | None = None) -> float:
    """Nearest class centroid on time-averaged coordinates.

    Without ``test`` the samples are split alternately into fit and score halves.
    """
    if test is None:
        train, test = list(train)[0::2], list(train)[1::2]

    def feats(seqs):
        return np.stack([s.frames.mean(axis=0).ravel() for s in seqs]), np.array([s.label for s in seqs])

    Xtr, ytr = feats(train)
    Xte, yte = feats(test)
    classes = np.unique(ytr)
    cents = np.stack([Xtr[ytr == c].mean(axis=0) for c in classes])
    d = ((Xte[:, None, :] - cents[None]) ** 2).sum(-1)
    return float(np.mean(classes[d.argmin(1)] == yte))


# -- datasets ---------------------------------------------------------------------------


@dataclass
class ArrayDataset:
    """Prepared samples ``x`` (n, P, 3, T, V) with integer labels."""

    x: np.ndarray
    y: np.ndarray

    def __len__(self):
        return len(self.y)

    def batches(self, batch_size: int, shuffle: bool = False, rng: np.random.Generator | None = None,
                prefetch: int = 0) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        order = np.arange(len(self))
        if shuffle:
            (rng or np.random.default_rng()).shuffle(order)
        chunks = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
        gen = ((self.x[c], self.y[c]) for c in chunks)
        return _prefetched(gen, prefetch) if prefetch > 0 else gen


def _prefetched(gen, depth: int):
    q: queue.Queue = queue.Queue(maxsize=depth)
    done = object()

    def worker():
        try:
            for item in gen:
                q.put(item)
        finally:
            q.put(done)

    threading.Thread(target=worker, daemon=True).start()
    while True:
        item = q.get()
        if item is done:
            return
        yield item


def build_arrays(seqs: Sequence[SkeletonSequence], T_out: int, topology: SkeletonTopology,
                 stream: StreamKind | str = "joint", center_joint: int = 0, mode: str = "eval_full",
                 seed: int = 0, epoch: int = 0, n_persons: int | None = None) -> ArrayDataset:
    """Prepare every sequence; crop randomness is seeded per (seed, epoch, sample)."""
    P = n_persons or max(s.frames.shape[1] for s in seqs)
    xs = []
    for i, s in enumerate(seqs):
        rng = np.random.default_rng([seed, epoch, i]) if mode == "train_random_crop" else None
        xs.append(prepare_sample(s, T_out, mode, stream, topology, center_joint, rng, P))
    return ArrayDataset(np.stack(xs), np.array([s.label for s in seqs], dtype=np.int64))


def split_dataset(seqs: Sequence, test_fraction: float, seed: int):
    """Deterministic stratified split; returns (train, test)."""
    labels = np.array([s.label for s in seqs])
    rng = np.random.default_rng([seed, 15485863])
    test_idx = []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        rng.shuffle(idx)
        test_idx.extend(idx[:int(round(test_fraction * len(idx)))].tolist())
    test_set = set(test_idx)
    train = [s for i, s in enumerate(seqs) if i not in test_set]
    test = [seqs[i] for i in sorted(test_set)]
    return train, test


def split_hash(train: Sequence[SkeletonSequence], test: Sequence[SkeletonSequence]) -> str:
    h = hashlib.sha256()
    for part in (train, test):
        h.update(b"|")
        for s in part:
            h.update(np.int64(s.label).tobytes())
            h.update(np.ascontiguousarray(s.frames).tobytes())
    return h.hexdigest()


def synthetic_split(n_classes: int = 6, n_train: int = 300, n_test: int = 120, T_raw: int = 48,
                    topology: SkeletonTopology | None = None, seed: int = 0, noise: float = 0.02):
    """Class-balanced train/test sets drawn from one generator run."""
    topology = topology or SkeletonTopology.load("ntu25")
    if n_train % n_classes or n_test % n_classes:
        raise ConfigError("n_train and n_test must be multiples of n_classes")
    per = (n_train + n_test) // n_classes
    seqs = synth_dataset(n_classes, per, T_raw, topology, seed, noise=noise)
    n_tr = n_train // n_classes
    train = [s for s in seqs if s.meta["index"] < n_tr]
    test = [s for s in seqs if s.meta["index"] >= n_tr]
    return train, test


# -- manifest and cache ----------------------------------------------------------------

MANIFEST_KEYS = ("path", "label", "subject", "camera", "setup")


def read_manifest(path) -> list[dict]:
    try:
        entries = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise DataError(f"manifest not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"manifest is not valid JSON: {exc}") from None
    if not isinstance(entries, list):
        raise DataError("manifest must be a JSON array")
    for i, e in enumerate(entries):
        missing = [k for k in MANIFEST_KEYS if k not in e]
        if missing:
            raise DataError(f"manifest entry {i} missing keys {missing}")
    return entries


def load_manifest_dataset(path, cache_dir=None) -> list[SkeletonSequence]:
    """Parse every file in a manifest, reading/writing a per-sample TDMT cache."""
    root = Path(path).parent
    cache = Path(cache_dir) if cache_dir else None
    if cache:
        cache.mkdir(parents=True, exist_ok=True)
    out = []
    for e in read_manifest(path):
        src = Path(e["path"]) if Path(e["path"]).is_absolute() else root / e["path"]
        meta = {k: e[k] for k in ("subject", "camera", "setup")}
        cached = cache / (hashlib.sha1(str(src).encode()).hexdigest() + ".tdmt") if cache else None
        if cached is not None and cached.exists():
            frames = tensor_io.load(cached).astype(np.float64)
        else:
            try:
                text = src.read_text()
            except OSError as exc:
                raise DataError(f"cannot read {src}: {exc}") from None
            frames = parse_ntu_skeleton(text).frames
            if cached is not None:
                tensor_io.save(cached, frames)
        out.append(SkeletonSequence(frames, int(e["label"]), meta))
    return out


# -- score fusion -----------------------------------------------------------------------


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def fuse_scores(per_stream_logits: Sequence[np.ndarray], streams: Sequence[str] | None = None) -> np.ndarray:
    """Sum of per-stream softmax probabilities, shape (B, n_classes)."""
    if not per_stream_logits:
        raise ConfigError("fuse_scores needs at least one stream")
    if streams is not None and len(streams) != len(per_stream_logits):
        raise ConfigError(f"{len(streams)} stream names for {len(per_stream_logits)} score arrays")
    arrays = [np.asarray(getattr(a, "data", a), dtype=np.float64) for a in per_stream_logits]
    K = {a.shape[-1] for a in arrays}
    if len(K) != 1:
        raise ConfigError(f"streams disagree on class count: {sorted(K)}")
    return sum(_softmax(a) for a in arrays)
