"""Synthetic procedure data, sliding-window curation, splitting and storage.

On-disk layout of a dataset directory::

    manifest.json     format_version, dims {T, A, C, O}, counts, generator settings echo, seed
    records.jsonl     one window per line:
                      {"video", "split", "task", "actions", "o_s", "o_g"}
    embeddings.json   A x D_e action embedding table (raw values)

Floats are written with Python's shortest round-trip repr, so a save/load
cycle reproduces every float64 bit-exactly.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .layout import ProblemDims
from .noise import ActionEmbeddingTable, align_to_actions

FORMAT_VERSION = 1
STRUCTURES = ("linear", "scattered")


class DatasetError(ValueError):
    """Invalid dataset content; ``record`` is the offending line index when known."""

    def __init__(self, message: str, record: int | None = None, path=None):
        where = ""
        if path is not None:
            where = f"{path}"
            if record is not None:
                where += f": record {record}"
            where += ": "
        elif record is not None:
            where = f"record {record}: "
        super().__init__(where + message)
        self.record = record


@dataclass(frozen=True)
class SyntheticSpec:
    num_tasks: int = 5
    num_actions: int = 20
    observation_dim: int = 32
    embedding_dim: int | None = None
    videos_per_task: int = 60
    actions_per_video: tuple[int, int] = (4, 8)
    structure: str = "linear"
    # linear: length of each task's action chain (default: max actions per video)
    chain_length: int | None = None
    # scattered: actions available to each task (default: 2 * A / C)
    task_pool_size: int | None = None
    embedding_mean: float = -0.3
    embedding_std: float = 1.0
    observation_noise_std: float = 0.1
    seed: int = 0

    def __post_init__(self):
        for name in ("num_tasks", "num_actions", "observation_dim", "videos_per_task"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        lo, hi = self.actions_per_video
        if not 1 <= lo <= hi:
            raise ValueError(f"actions_per_video range {self.actions_per_video} invalid")
        if self.structure not in STRUCTURES:
            raise ValueError(f"structure must be one of {STRUCTURES}, got {self.structure!r}")
        if self.embedding_dim is not None and self.embedding_dim < 1:
            raise ValueError("embedding_dim must be positive")
        if self.embedding_std < 0 or self.observation_noise_std < 0:
            raise ValueError("standard deviations must be non-negative")

    @property
    def D_e(self) -> int:
        return self.embedding_dim or self.num_actions

    def to_dict(self) -> dict:
        d = asdict(self)
        d["actions_per_video"] = list(self.actions_per_video)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        d = dict(d)
        if "actions_per_video" in d:
            d["actions_per_video"] = tuple(d["actions_per_video"])
        return cls(**d)


PRESETS = {
    "linear": SyntheticSpec(),
    "scattered": SyntheticSpec(num_tasks=8, num_actions=40, structure="scattered", videos_per_task=40),
}


def preset(name: str, **overrides) -> SyntheticSpec:
    try:
        base = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; known: {sorted(PRESETS)}") from None
    return replace(base, **overrides)


@dataclass
class VideoRecord:
    video: int
    task: int
    actions: tuple[int, ...]
    clip_features: np.ndarray  # (m + 1, O) boundary features


@dataclass
class CurationWindow:
    video: int
    task: int
    actions: tuple[int, ...]
    o_s: np.ndarray
    o_g: np.ndarray


# --------------------------------------------------------------------------
# generation


def _linear_chains(spec: SyntheticSpec) -> tuple[int, list[np.ndarray]]:
    A, C = spec.num_actions, spec.num_tasks
    length = spec.chain_length or spec.actions_per_video[1]
    if length > A:
        raise ValueError(f"linear chains of length {length} need at least {length} actions, have A={A}")
    if spec.actions_per_video[0] > length:
        raise ValueError(f"videos need >= {spec.actions_per_video[0]} actions but chains have {length}")
    if C == 1:
        starts = [0]
    else:
        starts = [int(round(k * (A - length) / (C - 1))) for k in range(C)]
    return length, [s + np.arange(length) for s in starts]


def _scattered_tables(spec: SyntheticSpec, rng: np.random.Generator):
    A, C = spec.num_actions, spec.num_tasks
    pool_size = spec.task_pool_size or int(min(A, max(3, round(2 * A / C))))
    pool_size = min(pool_size, A)
    tables = []
    for _ in range(C):
        pool = rng.choice(A, size=pool_size, replace=False)
        start = rng.dirichlet(np.full(pool_size, 0.5))
        trans = rng.dirichlet(np.full(pool_size, 0.2), size=pool_size)
        if pool_size > 1:
            np.fill_diagonal(trans, 0.0)
            trans /= trans.sum(axis=1, keepdims=True)
        tables.append((pool, start, trans))
    return tables


def generate_synthetic(spec: SyntheticSpec) -> tuple[list[VideoRecord], ActionEmbeddingTable]:
    """Generate videos and a raw action-embedding table from ``spec``.

    Linear structure: task k owns a chain of consecutive action labels and
    every video replays a contiguous piece of it. Scattered structure: each
    task walks its own random transition table over a shared action pool.
    Boundary feature j (before action j, after action j-1) is
    ``P_task onehot(task) + P_prev e(a_{j-1}) + P_next e(a_j) + noise``.
    """
    A, C, O, D = spec.num_actions, spec.num_tasks, spec.observation_dim, spec.D_e
    ss = np.random.SeedSequence(spec.seed)
    emb_rng, proj_rng, struct_rng, video_rng = (np.random.default_rng(s) for s in ss.spawn(4))

    emb = spec.embedding_mean + spec.embedding_std * emb_rng.standard_normal((A, D))
    p_task = proj_rng.standard_normal((C, O))
    p_prev = proj_rng.standard_normal((D, O)) / np.sqrt(D)
    p_next = proj_rng.standard_normal((D, O)) / np.sqrt(D)

    lo, hi = spec.actions_per_video
    if spec.structure == "linear":
        chain_len, chains = _linear_chains(spec)
        hi = min(hi, chain_len)
    else:
        tables = _scattered_tables(spec, struct_rng)

    records = []
    vid = 0
    for task in range(C):
        for _ in range(spec.videos_per_task):
            m = int(video_rng.integers(lo, hi + 1))
            if spec.structure == "linear":
                offset = int(video_rng.integers(0, chain_len - m + 1))
                actions = chains[task][offset:offset + m]
            else:
                pool, start, trans = tables[task]
                idx = [int(video_rng.choice(len(pool), p=start))]
                for _ in range(m - 1):
                    idx.append(int(video_rng.choice(len(pool), p=trans[idx[-1]])))
                actions = pool[idx]
            actions = tuple(int(a) for a in actions)
            feats = np.tile(p_task[task], (m + 1, 1))
            seq = emb[list(actions)] if m else np.zeros((0, D))
            feats[1:] += seq @ p_prev
            feats[:-1] += seq @ p_next
            feats += spec.observation_noise_std * video_rng.standard_normal(feats.shape)
            records.append(VideoRecord(video=vid, task=task, actions=actions, clip_features=feats))
            vid += 1
    return records, ActionEmbeddingTable(rows=emb)


def curate_windows(records, T: int) -> list[CurationWindow]:
    """Every contiguous length-T action run of every record, in order."""
    if T < 2:
        raise ValueError(f"horizon must be >= 2, got {T}")
    windows = []
    for rec in records:
        m = len(rec.actions)
        for i in range(m - T + 1):
            windows.append(CurationWindow(
                video=rec.video,
                task=rec.task,
                actions=tuple(rec.actions[i:i + T]),
                o_s=np.asarray(rec.clip_features[i]),
                o_g=np.asarray(rec.clip_features[i + T]),
            ))
    return windows


# --------------------------------------------------------------------------
# dataset container


@dataclass
class ProcedureDataset:
    dims: ProblemDims
    tasks: np.ndarray  # (M,)
    actions: np.ndarray  # (M, T)
    o_s: np.ndarray  # (M, O)
    o_g: np.ndarray  # (M, O)
    videos: np.ndarray  # (M,)
    splits: np.ndarray  # (M,) of "train" / "test" / ""
    embeddings: ActionEmbeddingTable
    manifest: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return int(self.tasks.shape[0])

    @classmethod
    def from_windows(cls, windows, dims: ProblemDims, embeddings: ActionEmbeddingTable,
                     manifest: dict | None = None, splits=None) -> "ProcedureDataset":
        M = len(windows)
        ds = cls(
            dims=dims,
            tasks=np.array([w.task for w in windows], dtype=np.int64).reshape(M),
            actions=np.array([w.actions for w in windows], dtype=np.int64).reshape(M, dims.T),
            o_s=np.array([w.o_s for w in windows], dtype=np.float64).reshape(M, dims.O),
            o_g=np.array([w.o_g for w in windows], dtype=np.float64).reshape(M, dims.O),
            videos=np.array([w.video for w in windows], dtype=np.int64).reshape(M),
            splits=np.array(splits if splits is not None else [""] * M, dtype=object).reshape(M),
            embeddings=embeddings,
            manifest=dict(manifest or {}),
        )
        ds.validate()
        return ds

    def windows(self) -> list[CurationWindow]:
        return [CurationWindow(int(v), int(c), tuple(int(a) for a in acts), s, g)
                for v, c, acts, s, g in zip(self.videos, self.tasks, self.actions, self.o_s, self.o_g)]

    def subset(self, index) -> "ProcedureDataset":
        index = np.asarray(index)
        return replace(self, tasks=self.tasks[index], actions=self.actions[index], o_s=self.o_s[index],
                       o_g=self.o_g[index], videos=self.videos[index], splits=self.splits[index],
                       manifest=dict(self.manifest))

    def split_part(self, name: str) -> "ProcedureDataset":
        return self.subset(np.flatnonzero(self.splits == name))

    def mask_table(self) -> ActionEmbeddingTable:
        """Normalized embeddings aligned with the A action coordinates."""
        seed = int(self.manifest.get("embedding_projection_seed", 0))
        return align_to_actions(self.embeddings, self.dims.A, seed)

    def validate(self) -> None:
        d = self.dims
        for i in range(len(self)):
            if not 0 <= self.tasks[i] < d.C:
                raise DatasetError(f"task label {self.tasks[i]} outside [0, {d.C})", record=i)
            bad = (self.actions[i] < 0) | (self.actions[i] >= d.A)
            if bad.any():
                raise DatasetError(f"action label {self.actions[i][bad][0]} outside [0, {d.A})", record=i)
            if self.splits[i] not in ("", "train", "test"):
                raise DatasetError(f"split tag {self.splits[i]!r} not in train/test", record=i)
        if self.embeddings.num_actions != d.A:
            raise DatasetError(f"embedding table has {self.embeddings.num_actions} rows, expected A={d.A}")
        if not (np.all(np.isfinite(self.o_s)) and np.all(np.isfinite(self.o_g))):
            raise DatasetError("non-finite observation features")


def build_dataset(spec: SyntheticSpec, T: int) -> ProcedureDataset:
    """Generate, curate and wrap a synthetic dataset (unsplit)."""
    if spec.structure == "linear" and spec.num_actions < T:
        raise ValueError(f"linear chains need A >= T, have A={spec.num_actions} and T={T}")
    records, table = generate_synthetic(spec)
    dims = ProblemDims(T=T, A=spec.num_actions, C=spec.num_tasks, O=spec.observation_dim)
    manifest = {"spec": spec.to_dict(), "seed": spec.seed, "num_videos": len(records)}
    return ProcedureDataset.from_windows(curate_windows(records, T), dims, table, manifest)


def split(dataset: ProcedureDataset, train_fraction: float = 0.7, seed: int = 0):
    """Video-level random split; returns (train, test) with split tags set."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    videos = np.unique(dataset.videos)
    order = np.random.default_rng(seed).permutation(videos)
    n_train = int(round(train_fraction * len(videos)))
    train_videos = set(order[:n_train].tolist())
    is_train = np.array([v in train_videos for v in dataset.videos.tolist()], dtype=bool)
    tagged = replace(dataset, splits=np.where(is_train, "train", "test").astype(object))
    tagged.manifest = dict(dataset.manifest, split_seed=seed, train_fraction=train_fraction)
    return tagged.subset(np.flatnonzero(is_train)), tagged.subset(np.flatnonzero(~is_train))


def merge(train: ProcedureDataset, test: ProcedureDataset) -> ProcedureDataset:
    """Concatenate two parts of one dataset (e.g. for saving both splits)."""
    if train.dims != test.dims:
        raise ValueError("cannot merge datasets with different dims")
    cat = lambda a, b: np.concatenate([a, b], axis=0)  # noqa: E731
    return replace(train, tasks=cat(train.tasks, test.tasks), actions=cat(train.actions, test.actions),
                   o_s=cat(train.o_s, test.o_s), o_g=cat(train.o_g, test.o_g),
                   videos=cat(train.videos, test.videos), splits=cat(train.splits, test.splits),
                   manifest=dict(train.manifest))


# --------------------------------------------------------------------------
# storage


def save(dataset: ProcedureDataset, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    counts = {
        "windows": len(dataset),
        "train": int(np.sum(dataset.splits == "train")),
        "test": int(np.sum(dataset.splits == "test")),
        "videos": int(len(np.unique(dataset.videos))),
    }
    manifest = dict(dataset.manifest)
    manifest.update({
        "format_version": FORMAT_VERSION,
        "dims": dataset.dims.to_dict(),
        "embedding_dim": dataset.embeddings.dim,
        "counts": counts,
        "records_file": "records.jsonl",
        "embeddings_file": "embeddings.json",
    })
    with open(path / "records.jsonl", "w") as f:
        for i in range(len(dataset)):
            rec = {
                "video": int(dataset.videos[i]),
                "split": dataset.splits[i] or None,
                "task": int(dataset.tasks[i]),
                "actions": [int(a) for a in dataset.actions[i]],
                "o_s": dataset.o_s[i].tolist(),
                "o_g": dataset.o_g[i].tolist(),
            }
            f.write(json.dumps(rec) + "\n")
    with open(path / "embeddings.json", "w") as f:
        json.dump(dataset.embeddings.rows.tolist(), f)
    with open(path / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return path


def _require(cond: bool, message: str, record=None, path=None) -> None:
    if not cond:
        raise DatasetError(message, record=record, path=path)


def load(path) -> ProcedureDataset:
    """Read a dataset directory, validating every record against the manifest."""
    path = Path(path)
    mpath = path / "manifest.json"
    try:
        with open(mpath) as f:
            manifest = json.load(f)
    except FileNotFoundError:
        raise DatasetError("manifest not found", path=mpath) from None
    except json.JSONDecodeError as e:
        raise DatasetError(f"manifest is not valid JSON ({e})", path=mpath) from None
    version = manifest.get("format_version")
    _require(version == FORMAT_VERSION, f"format version {version!r} != {FORMAT_VERSION}", path=mpath)
    try:
        dims = ProblemDims(**{k: int(v) for k, v in manifest["dims"].items()})
    except (KeyError, TypeError, ValueError) as e:
        raise DatasetError(f"invalid dims ({e})", path=mpath) from None

    epath = path / manifest.get("embeddings_file", "embeddings.json")
    try:
        with open(epath) as f:
            rows = np.array(json.load(f), dtype=np.float64)
    except (OSError, json.JSONDecodeError, ValueError) as e:
        raise DatasetError(f"unreadable embedding table ({e})", path=epath) from None
    _require(rows.ndim == 2 and rows.shape[0] == dims.A,
             f"embedding table shape {rows.shape} does not have A={dims.A} rows", path=epath)
    _require(rows.shape[1] == manifest.get("embedding_dim", rows.shape[1]),
             f"embedding dim {rows.shape[1]} != manifest {manifest.get('embedding_dim')}", path=epath)
    _require(bool(np.all(np.isfinite(rows))), "non-finite embedding entries", path=epath)

    rpath = path / manifest.get("records_file", "records.jsonl")
    windows, splits = [], []
    try:
        lines = open(rpath).read().splitlines()
    except OSError as e:
        raise DatasetError(f"unreadable records ({e})", path=rpath) from None
    for i, line in enumerate(lines):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            task, actions = int(rec["task"]), [int(a) for a in rec["actions"]]
            o_s = np.array(rec["o_s"], dtype=np.float64)
            o_g = np.array(rec["o_g"], dtype=np.float64)
            video, tag = int(rec.get("video", i)), rec.get("split") or ""
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise DatasetError(f"malformed record ({e})", record=i, path=rpath) from None
        _require(0 <= task < dims.C, f"task label {task} outside [0, {dims.C})", i, rpath)
        _require(len(actions) == dims.T, f"{len(actions)} actions, expected T={dims.T}", i, rpath)
        for a in actions:
            _require(0 <= a < dims.A, f"action label {a} outside [0, {dims.A})", i, rpath)
        _require(o_s.shape == (dims.O,) and o_g.shape == (dims.O,),
                 f"observation dims {o_s.shape}/{o_g.shape} != ({dims.O},)", i, rpath)
        _require(bool(np.all(np.isfinite(o_s)) and np.all(np.isfinite(o_g))), "non-finite features", i, rpath)
        _require(tag in ("", "train", "test"), f"split tag {tag!r} not in train/test", i, rpath)
        windows.append(CurationWindow(video, task, tuple(actions), o_s, o_g))
        splits.append(tag)

    counts = manifest.get("counts", {})
    if "windows" in counts:
        _require(counts["windows"] == len(windows),
                 f"manifest declares {counts['windows']} windows, found {len(windows)}", path=mpath)
    ds = ProcedureDataset.from_windows(windows, dims, ActionEmbeddingTable(rows=rows), manifest, splits)
    for name in ("train", "test"):
        if name in counts:
            found = int(np.sum(ds.splits == name))
            _require(counts[name] == found, f"manifest declares {counts[name]} {name} windows, found {found}",
                     path=mpath)
    return ds
