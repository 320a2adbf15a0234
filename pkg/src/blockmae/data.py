"""Synthetic drifting-grating clips, frame-folder loading, and dataset assembly.

Single gratings are full-field sinusoidal luminance patterns parameterized by
orientation, spatial frequency (cycles per frame width), temporal frequency
(cycles per clip), and contrast, each drawn from a small categorical grid.
Double gratings render two independently parameterized gratings in the left
and right hemifields and additionally carry relational labels (per-parameter
match flags and signed grid-index differences).

Phase is randomized per clip and recorded in clip metadata, but it is not a
probe target: without it, a probe could match raw pixels instead of reading
out the representation.
"""

from __future__ import annotations

import itertools
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .util import file_id, spawn_rng

PARAM_NAMES = ("orientation", "spatial_frequency", "temporal_frequency", "contrast")

DEFAULT_GRIDS = {
    "orientation": (0.0, 45.0, 90.0, 135.0),
    "spatial_frequency": (2.0, 4.0, 8.0),
    "temporal_frequency": (1.0, 2.0, 4.0),
    "contrast": (0.25, 0.5, 1.0),
}

_IMAGE_EXTS = {".png", ".jpg", ".jpeg", ".bmp"}


@dataclass
class GratingParams:
    """One grating's stimulus parameters. Phase is in radians."""

    orientation: float
    spatial_frequency: float
    temporal_frequency: float
    contrast: float
    phase: float = 0.0

    @classmethod
    def from_indices(cls, grids, indices, phase=0.0):
        vals = {name: grids[name][i] for name, i in zip(PARAM_NAMES, indices)}
        return cls(phase=phase, **vals)


@dataclass
class Clip:
    frames: np.ndarray  # (T, H, W, C) float32, values in [0, 1]
    labels: dict
    source_id: str
    meta: dict = field(default_factory=dict)


@dataclass
class DoubleGratingLabels:
    left: GratingParams
    right: GratingParams
    match_flags: dict
    signed_diffs: dict

    @classmethod
    def from_params(cls, left, right, grids):
        flags, diffs = {}, {}
        for name in PARAM_NAMES:
            lv, rv = getattr(left, name), getattr(right, name)
            flags[name] = lv == rv
            diffs[name] = grid_index(grids, name, lv) - grid_index(grids, name, rv)
        return cls(left, right, flags, diffs)

    def as_labels(self):
        out = {}
        for name in PARAM_NAMES:
            out["left_" + name] = getattr(self.left, name)
            out["right_" + name] = getattr(self.right, name)
            out["match_" + name] = self.match_flags[name]
            out["diff_" + name] = self.signed_diffs[name]
        return out


def grid_index(grids, name, value):
    grid = grids[name]
    for i, v in enumerate(grid):
        if v == value:
            return i
    raise ValueError(f"value {value!r} not in grid for {name!r}: {grid}")


def _render(params, T, H, cols, norm_w):
    """Evaluate the grating formula on columns `cols` of an H-row frame.

    pixel(x, y, t) = 0.5 + 0.5*c*sin(2*pi*(f_s*(x*cos(th) + y*sin(th))/W
                                           - f_t*t/T) + phase)

    Spatial frequency is cycles per full frame width (norm_w); a hemifield is
    rendered with its global column coordinates, so it is bit-identical to
    the matching columns of a full-field rendering.
    """
    theta = math.radians(params.orientation)
    x = np.asarray(cols, dtype=np.float64)
    y = np.arange(H, dtype=np.float64)
    t = np.arange(T, dtype=np.float64)
    spatial = (x[None, :] * math.cos(theta) + y[:, None] * math.sin(theta))
    arg = (2.0 * np.pi
           * (params.spatial_frequency * spatial[None, :, :] / float(norm_w)
              - params.temporal_frequency * t[:, None, None] / float(T))
           + params.phase)
    vals = 0.5 + 0.5 * params.contrast * np.sin(arg)
    return np.clip(vals, 0.0, 1.0).astype(np.float32)


def synth_grating(params, T, H, W, channels=1):
    """Render a full-field drifting grating as a (T, H, W, C) clip."""
    if not 0.0 <= params.contrast <= 1.0:
        raise ValueError(f"contrast must lie in [0, 1], got {params.contrast}")
    if H <= 0 or W <= 0:
        raise ValueError("H and W must be positive")
    frames = _render(params, T, H, np.arange(W), norm_w=W)
    frames = np.repeat(frames[..., None], channels, axis=-1)
    labels = {name: getattr(params, name) for name in PARAM_NAMES}
    return Clip(frames=frames, labels=labels, source_id="grating",
                meta={"phase": params.phase})


def synth_double_grating(left, right, T, H, W, channels=1, grids=None):
    """Left/right hemifield gratings with relational labels.

    Columns [0, W/2) come from `left`, columns [W/2, W) from `right`; both
    hemifields use global pixel coordinates and the full-field normalization
    by W, so a hemifield is bit-identical to the matching half of the
    corresponding full-field clip.
    """
    if W % 2 != 0:
        raise ValueError(f"double gratings need an even frame width, got W={W}")
    for p in (left, right):
        if not 0.0 <= p.contrast <= 1.0:
            raise ValueError(f"contrast must lie in [0, 1], got {p.contrast}")
    if grids is None:
        grids = DEFAULT_GRIDS
    half = W // 2
    lhalf = _render(left, T, H, np.arange(half), norm_w=W)
    rhalf = _render(right, T, H, np.arange(half, W), norm_w=W)
    frames = np.concatenate([lhalf, rhalf], axis=2)
    frames = np.repeat(frames[..., None], channels, axis=-1)
    rel = DoubleGratingLabels.from_params(left, right, grids)
    return Clip(frames=frames, labels=rel.as_labels(), source_id="double-grating",
                meta={"phase_left": left.phase, "phase_right": right.phase})


_UCF_NAME = re.compile(r"^v_(.+)_g\d+_c\d+$")


def _class_from_dirname(name):
    m = _UCF_NAME.match(name)
    return m.group(1) if m else name


def load_clip_frames(dir_path, T, stride, offset=None, rng=None, channels=3):
    """Load a clip from a directory of ordered frame images.

    Picks frames offset + i*stride for i in [0, T). Directories holding fewer
    than T*stride frames are skipped (returns None) rather than erroring, per
    the short-video exclusion rule. An unreadable image is an error naming
    the file.
    """
    from PIL import Image

    dir_path = Path(dir_path)
    files = sorted(p for p in dir_path.iterdir()
                   if p.is_file() and p.suffix.lower() in _IMAGE_EXTS)
    n = len(files)
    if n < T * stride:
        return None
    max_offset = n - (T - 1) * stride - 1
    if offset is None:
        offset = int(rng.integers(0, max_offset + 1)) if rng is not None else 0
    if offset < 0 or offset > max_offset:
        raise ValueError(f"offset {offset} out of range [0, {max_offset}] "
                         f"for {n} frames (T={T}, stride={stride})")
    mode = "L" if channels == 1 else "RGB"
    frames = []
    for i in range(T):
        path = files[offset + i * stride]
        try:
            with Image.open(path) as img:
                arr = np.asarray(img.convert(mode), dtype=np.float32) / 255.0
        except Exception as exc:
            raise RuntimeError(f"failed to read frame image {path}: {exc}") from exc
        if arr.ndim == 2:
            arr = arr[..., None]
        frames.append(arr)
    stack = np.stack(frames, axis=0)
    name = dir_path.name
    return Clip(frames=stack, labels={"class": _class_from_dirname(name)},
                source_id=name, meta={"offset": offset, "stride": stride})


def augment(clip, target_size, flip_prob=0.5, mode="train", rng=None):
    """Spatial crop (+ optional horizontal flip) applied identically to all frames.

    train mode: random crop offsets and a Bernoulli(flip_prob) flip, both drawn
    from `rng` in the order (row offset, col offset, flip). eval mode: center
    crop, never flips.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"augment mode must be 'train' or 'eval', got {mode!r}")
    th, tw = (target_size, target_size) if np.isscalar(target_size) else target_size
    T, H, W, C = clip.frames.shape
    if th > H or tw > W:
        raise ValueError(f"crop target ({th}, {tw}) exceeds source ({H}, {W})")
    if mode == "train":
        if rng is None:
            raise ValueError("train-mode augmentation needs an rng")
        oy = int(rng.integers(0, H - th + 1))
        ox = int(rng.integers(0, W - tw + 1))
        flip = bool(rng.random() < flip_prob)
    else:
        oy, ox = (H - th) // 2, (W - tw) // 2
        flip = False
    frames = clip.frames[:, oy:oy + th, ox:ox + tw, :]
    if flip:
        frames = frames[:, :, ::-1, :]
    return Clip(frames=np.ascontiguousarray(frames), labels=dict(clip.labels),
                source_id=clip.source_id,
                meta={**clip.meta, "crop": (oy, ox), "flip": flip})


# ---------------------------------------------------------------------------
# dataset assembly


@dataclass
class Dataset:
    clips: list
    folds: dict  # label name -> (N,) int array of fold assignments
    spec: dict

    def __len__(self):
        return len(self.clips)

    def labels_array(self, name):
        return np.array([c.labels[name] for c in self.clips])

    def frames_array(self):
        return np.stack([c.frames for c in self.clips], axis=0)


_SPEC_KEYS = {
    "generator", "count", "T", "H", "W", "seed",
    "grids", "folds", "channels", "external_dir", "stride", "offset",
}
_SPEC_REQUIRED = {"generator", "T", "H", "W", "seed"}


def _validate_spec(spec):
    unknown = set(spec) - _SPEC_KEYS
    if unknown:
        raise ValueError(f"unknown dataset spec key(s): {sorted(unknown)}")
    missing = _SPEC_REQUIRED - set(spec)
    if missing:
        raise ValueError(f"dataset spec missing key(s): {sorted(missing)}")
    gen = spec["generator"]
    if gen not in ("single", "double", "external"):
        raise ValueError(f"unknown generator {gen!r}")
    if gen != "external" and "count" not in spec:
        raise ValueError("dataset spec missing key(s): ['count']")
    grids = spec.get("grids", DEFAULT_GRIDS)
    grids = {name: tuple(grids[name]) for name in PARAM_NAMES} if gen != "external" else {}
    for name, grid in grids.items():
        if len(grid) == 0:
            raise ValueError(f"empty grid for {name!r}")
    return gen, grids


def build_dataset(spec):
    """Materialize a dataset from a spec dict; deterministic in spec['seed'].

    Synthetic generators cycle the cartesian product of the grids so strata
    stay as balanced as the clip count allows; each clip additionally draws
    its phase (and, for doubles, the right hemifield's parameters) from a
    per-clip counter-based stream, so clip i is reproducible in isolation.
    """
    gen, grids = _validate_spec(spec)
    seed = int(spec["seed"])
    T, H, W = int(spec["T"]), int(spec["H"]), int(spec["W"])
    channels = int(spec.get("channels", 1))
    n_folds = int(spec.get("folds", 5))

    clips = []
    if gen in ("single", "double"):
        count = int(spec["count"])
        combos = list(itertools.product(*(range(len(grids[n])) for n in PARAM_NAMES)))
        for i in range(count):
            rng = spawn_rng(seed, "data", "clip", i)
            if gen == "single":
                phase = rng.uniform(0.0, 2.0 * np.pi)
                params = GratingParams.from_indices(grids, combos[i % len(combos)],
                                                    phase=phase)
                clip = synth_grating(params, T, H, W, channels=channels)
            else:
                phase_l = rng.uniform(0.0, 2.0 * np.pi)
                phase_r = rng.uniform(0.0, 2.0 * np.pi)
                right_idx = tuple(int(rng.integers(0, len(grids[n])))
                                  for n in PARAM_NAMES)
                left = GratingParams.from_indices(grids, combos[i % len(combos)],
                                                  phase=phase_l)
                right = GratingParams.from_indices(grids, right_idx, phase=phase_r)
                clip = synth_double_grating(left, right, T, H, W,
                                            channels=channels, grids=grids)
            clip.source_id = f"{clip.source_id}-{i:05d}"
            clips.append(clip)
    else:
        root = Path(spec["external_dir"])
        stride = int(spec.get("stride", 4))
        offset = spec.get("offset")
        limit = spec.get("count")
        for j, sub in enumerate(sorted(p for p in root.iterdir() if p.is_dir())):
            if limit is not None and len(clips) >= int(limit):
                break
            rng = spawn_rng(seed, "data", "external", j)
            clip = load_clip_frames(sub, T, stride, offset=offset, rng=rng,
                                    channels=channels)
            if clip is not None:
                clips.append(clip)

    if not clips:
        raise ValueError("dataset spec produced no clips")

    folds = {}
    for name in clips[0].labels:
        values = [c.labels[name] for c in clips]
        folds[name] = _stratified_folds(values, n_folds, spawn_rng(seed, "folds", name))

    echo = dict(spec)
    echo["grids"] = {k: list(v) for k, v in grids.items()} if grids else {}
    return Dataset(clips=clips, folds=folds, spec=echo)


def _stratified_folds(values, n_folds, rng):
    """Round-robin fold ids within each label stratum (shuffled), so per-stratum
    fold sizes differ by at most one."""
    values = list(values)
    folds = np.zeros(len(values), dtype=np.int64)
    strata = {}
    for i, v in enumerate(values):
        strata.setdefault(v, []).append(i)
    for v in sorted(strata, key=repr):
        idx = np.array(strata[v])
        rng.shuffle(idx)
        folds[idx] = np.arange(len(idx)) % n_folds
    return folds


# ---------------------------------------------------------------------------
# on-disk layout: clips.npy + labels/folds/spec/manifest JSON


def _jsonify(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonify(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonify(v) for v in obj]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    return obj


def save_dataset(ds, out_dir, force=False):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest_path = out / "manifest.json"
    if manifest_path.exists() and not force:
        raise FileExistsError(f"{manifest_path} exists; pass force to overwrite")
    np.save(out / "clips.npy", ds.frames_array())
    records = [{"labels": _jsonify(c.labels), "source_id": c.source_id,
                "meta": _jsonify(c.meta)} for c in ds.clips]
    (out / "labels.json").write_text(json.dumps(records, indent=1, sort_keys=True))
    (out / "folds.json").write_text(json.dumps(
        {k: v.tolist() for k, v in ds.folds.items()}, indent=1, sort_keys=True))
    (out / "spec.json").write_text(json.dumps(_jsonify(ds.spec), indent=1,
                                              sort_keys=True))
    counts = {}
    for name in ds.clips[0].labels:
        per = {}
        for c in ds.clips:
            key = str(c.labels[name])
            per[key] = per.get(key, 0) + 1
        counts[name] = dict(sorted(per.items()))
    manifest = {
        "n_clips": len(ds.clips),
        "dims": list(ds.clips[0].frames.shape),
        "counts": counts,
        "clips_checksum": file_id(out / "clips.npy"),
    }
    manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def load_dataset(in_dir):
    src = Path(in_dir)
    frames = np.load(src / "clips.npy")
    records = json.loads((src / "labels.json").read_text())
    folds = {k: np.asarray(v, dtype=np.int64)
             for k, v in json.loads((src / "folds.json").read_text()).items()}
    spec = json.loads((src / "spec.json").read_text())
    clips = [Clip(frames=frames[i], labels=r["labels"], source_id=r["source_id"],
                  meta=r.get("meta", {}))
             for i, r in enumerate(records)]
    return Dataset(clips=clips, folds=folds, spec=spec)
