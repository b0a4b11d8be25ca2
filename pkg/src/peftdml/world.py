"""Deterministic synthetic driving scenes with multi-modal candidate features.

Scenes are ego-centric: the ego vehicle sits at the origin of a square area and
objects move with constant velocity between the two frames of a pair. Each
frame gets a fixed number of candidate anchors (one jittered anchor per object,
the rest background), and each modality renders a feature vector per candidate.
The sensor models are coarse surrogates chosen to be class- and geometry-
informative, not physically faithful.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import EGO_MODALITIES, FEATURE_DIMS, MODALITIES, WEATHERS, RunConfig, WorldConfig, config_hash
from .errors import ConfigError, GenerationError, ManifestError
from .params import decode_array, encode_array

MANIFEST_VERSION = 1

# mean (w, l, h), max speed, probability of moving, lidar reflectivity, radar cross-section
CLASS_PRIORS: tuple[dict, ...] = (
    {"name": "car", "size": (1.9, 4.6, 1.6), "vmax": 10.0, "p_move": 0.6, "refl": 0.6, "rcs": 2.0},
    {"name": "truck", "size": (2.6, 8.5, 3.3), "vmax": 8.0, "p_move": 0.5, "refl": 0.5, "rcs": 3.5},
    {"name": "pedestrian", "size": (0.7, 0.7, 1.8), "vmax": 1.8, "p_move": 0.7, "refl": 0.3, "rcs": 0.4},
    {"name": "bicycle", "size": (0.7, 1.8, 1.3), "vmax": 6.0, "p_move": 0.6, "refl": 0.4, "rcs": 0.8},
    {"name": "barrier", "size": (2.4, 0.6, 1.0), "vmax": 0.0, "p_move": 0.0, "refl": 0.8, "rcs": 1.2},
    {"name": "van", "size": (2.1, 5.6, 2.4), "vmax": 9.0, "p_move": 0.6, "refl": 0.55, "rcs": 2.7},
)

SENSE_RADIUS = 2.5
LIDAR_BASE_POINTS = 160.0
LIDAR_FALLOFF = 12.0
LIDAR_CLUTTER = 40
RADAR_CLUTTER = 6
CAMERA_PATTERN_NORM = 2.0
MOVING_SPEED = 0.5


def wrap_angle(a):
    """Wrap into [-pi, pi)."""
    return (np.asarray(a) + math.pi) % (2.0 * math.pi) - math.pi


def _rng(seed: int, index: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), int(index), int(stream)])))


@dataclass(frozen=True)
class Box3D:
    x: float
    y: float
    z: float
    w: float
    l: float  # noqa: E741
    h: float
    yaw: float
    vx: float = 0.0
    vy: float = 0.0

    def __post_init__(self):
        if min(self.w, self.l, self.h) <= 0:
            raise ValueError(f"box sizes must be positive, got {(self.w, self.l, self.h)}")
        if not -math.pi <= self.yaw < math.pi:
            raise ValueError(f"yaw {self.yaw} outside [-pi, pi)")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.w, self.l, self.h, self.yaw, self.vx, self.vy])

    @classmethod
    def from_array(cls, a) -> "Box3D":
        return cls(*(float(v) for v in a))


@dataclass(frozen=True)
class ObjectInstance:
    instance_id: int
    class_id: int
    box: Box3D
    attribute: bool  # moving

    def __post_init__(self):
        if self.attribute != (math.hypot(self.box.vx, self.box.vy) > MOVING_SPEED):
            raise ValueError("attribute must equal speed > 0.5 m/s")


@dataclass(frozen=True)
class EgoState:
    x: float
    y: float
    yaw: float
    ax: float
    ay: float
    yaw_rate: float
    altitude: float


@dataclass
class ScenePair:
    scene_id: int
    weather: str
    ego: EgoState
    frame_t: list[ObjectInstance]
    frame_t1: list[ObjectInstance]


@dataclass(frozen=True)
class CandidateAnchor:
    box: Box3D
    instance_id: int | None
    frame: str


@dataclass
class ModalityFeatures:
    modality: str
    features: np.ndarray  # (n_candidates, dim)
    available: np.ndarray  # (n_candidates,) bool


# ------------------------------------------------------------------ scenes


def _spawn_object(rng: np.random.Generator, instance_id: int, x: float, y: float, n_classes: int) -> ObjectInstance:
    cls = int(rng.integers(n_classes))
    prior = CLASS_PRIORS[cls % len(CLASS_PRIORS)]
    w, l, h = (s * rng.uniform(0.9, 1.1) for s in prior["size"])
    yaw = float(wrap_angle(rng.uniform(-math.pi, math.pi)))
    speed = rng.uniform(0.0, prior["vmax"]) if rng.random() < prior["p_move"] else 0.0
    box = Box3D(x, y, h / 2.0, w, l, h, yaw, speed * math.cos(yaw), speed * math.sin(yaw))
    return ObjectInstance(instance_id, cls, box, math.hypot(box.vx, box.vy) > MOVING_SPEED)


def propagate(obj: ObjectInstance, dt: float) -> ObjectInstance:
    b = obj.box
    box = Box3D(b.x + b.vx * dt, b.y + b.vy * dt, b.z, b.w, b.l, b.h, b.yaw, b.vx, b.vy)
    return ObjectInstance(obj.instance_id, obj.class_id, box, obj.attribute)


def generate_scene(global_seed: int, scene_index: int, cfg: WorldConfig) -> ScenePair:
    """Sample one scene pair; a pure function of ``(global_seed, scene_index, cfg)``."""
    if cfg.area <= 0 or cfg.min_objects < 0 or cfg.max_objects < cfg.min_objects:
        raise ConfigError("invalid world config")
    rng = _rng(global_seed, scene_index, 0)
    n_obj = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    weather = WEATHERS[int(rng.integers(len(WEATHERS)))]
    ego = EgoState(
        x=float(rng.uniform(-500, 500)),
        y=float(rng.uniform(-500, 500)),
        yaw=float(wrap_angle(rng.uniform(-math.pi, math.pi))),
        ax=float(rng.normal(0, 1.0)),
        ay=float(rng.normal(0, 0.5)),
        yaw_rate=float(rng.normal(0, 0.2)),
        altitude=float(rng.uniform(0, 50)),
    )
    half = cfg.area / 2.0
    centers: list[tuple[float, float]] = []
    objects: list[ObjectInstance] = []
    attempts = 0
    while len(objects) < n_obj:
        attempts += 1
        if attempts > cfg.max_attempts:
            raise GenerationError(f"could not place {n_obj} objects after {cfg.max_attempts} attempts")
        x, y = rng.uniform(-half, half, size=2)
        if any(math.hypot(x - cx, y - cy) < cfg.min_separation for cx, cy in centers):
            continue
        centers.append((float(x), float(y)))
        objects.append(_spawn_object(rng, len(objects), float(x), float(y), cfg.n_classes))
    return ScenePair(scene_index, weather, ego, objects, [propagate(o, cfg.dt) for o in objects])


# ------------------------------------------------------------------ candidates


def _bev_dist(box: Box3D, x: float, y: float) -> float:
    return math.hypot(box.x - x, box.y - y)


def make_candidates(frame: list[ObjectInstance], seed, cfg: WorldConfig, tag: str = "t") -> list[CandidateAnchor]:
    """One jittered positive anchor per object plus background anchors up to ``n_candidates``."""
    rng = seed if isinstance(seed, np.random.Generator) else _rng(int(seed), 0, 1)
    out: list[CandidateAnchor] = []
    lo, hi = cfg.size_jitter
    for obj in frame:
        b = obj.box
        while True:
            dx, dy, dz = rng.normal(0.0, cfg.center_jitter, size=3) if cfg.center_jitter > 0 else (0.0, 0.0, 0.0)
            if math.hypot(dx, dy) <= cfg.assign_radius:
                break
        sw, sl, sh = rng.uniform(lo, hi, size=3) if hi > lo else (lo, lo, lo)
        dyaw = rng.normal(0.0, cfg.yaw_jitter) if cfg.yaw_jitter > 0 else 0.0
        anchor = Box3D(b.x + dx, b.y + dy, b.z + dz, b.w * sw, b.l * sl, b.h * sh, float(wrap_angle(b.yaw + dyaw)))
        out.append(CandidateAnchor(anchor, obj.instance_id, tag))
    half = cfg.area / 2.0
    attempts = 0
    while len(out) < cfg.n_candidates:
        attempts += 1
        if attempts > 100 * cfg.max_attempts:
            raise GenerationError("could not place background anchors")
        x, y = rng.uniform(-half, half, size=2)
        if any(_bev_dist(o.box, x, y) <= cfg.assign_radius for o in frame):
            continue
        prior = CLASS_PRIORS[int(rng.integers(len(CLASS_PRIORS)))]
        w, l, h = (s * rng.uniform(0.8, 1.2) for s in prior["size"])
        yaw = float(wrap_angle(rng.uniform(-math.pi, math.pi)))
        out.append(CandidateAnchor(Box3D(float(x), float(y), h / 2.0, w, l, h, yaw), None, tag))
    order = rng.permutation(len(out))
    return [out[i] for i in order]


# ------------------------------------------------------------------ rendering


def camera_patterns(n_classes: int = 6, dim: int = 12) -> np.ndarray:
    """Fixed mutually orthogonal class codes, one row per class."""
    g = np.random.Generator(np.random.PCG64(20240607)).normal(size=(dim, dim))
    q, _ = np.linalg.qr(g)
    return q[:n_classes] * CAMERA_PATTERN_NORM


def noise_scale(cfg: WorldConfig, modality: str, weather: str) -> float:
    return cfg.base_noise[modality] * cfg.noise_mult[weather].get(modality, 1.0)


def _anchor_array(candidates: list[CandidateAnchor]) -> np.ndarray:
    return np.array([[c.box.x, c.box.y, c.box.z, c.box.w, c.box.l, c.box.h, c.box.yaw] for c in candidates]).reshape(
        -1, 7
    )


def lidar_points(frame: list[ObjectInstance], rng: np.random.Generator, area: float) -> tuple[np.ndarray, np.ndarray]:
    """Simulated returns: (points (n, 3), intensity (n,)). Density falls with range."""
    pts, inten = [], []
    for obj in frame:
        b = obj.box
        r = math.hypot(b.x, b.y)
        lam = LIDAR_BASE_POINTS * (b.w * b.l * b.h) ** (1 / 3) / 2.0 / (1.0 + (r / LIDAR_FALLOFF) ** 2)
        n = int(rng.poisson(lam))
        if n == 0:
            continue
        local = rng.uniform(-0.5, 0.5, size=(n, 3)) * np.array([b.l, b.w, b.h])
        c, s = math.cos(b.yaw), math.sin(b.yaw)
        world = np.empty_like(local)
        world[:, 0] = b.x + c * local[:, 0] - s * local[:, 1]
        world[:, 1] = b.y + s * local[:, 0] + c * local[:, 1]
        world[:, 2] = b.z + local[:, 2]
        pts.append(world + rng.normal(0, 0.03, size=world.shape))
        inten.append(CLASS_PRIORS[obj.class_id % len(CLASS_PRIORS)]["refl"] + rng.normal(0, 0.05, size=n))
    half = area / 2.0
    clutter = np.column_stack(
        [rng.uniform(-half, half, LIDAR_CLUTTER), rng.uniform(-half, half, LIDAR_CLUTTER), rng.uniform(0, 0.3, LIDAR_CLUTTER)]
    )
    pts.append(clutter)
    inten.append(rng.uniform(0.0, 0.2, LIDAR_CLUTTER))
    return np.concatenate(pts), np.concatenate(inten)


def _render_lidar(frame, anchors, rng, area) -> np.ndarray:
    pts, inten = lidar_points(frame, rng, area)
    feats = np.zeros((len(anchors), FEATURE_DIMS["lidar"]))
    edges = np.linspace(0.0, SENSE_RADIUS, 9)
    for i, a in enumerate(anchors):
        off = pts - a[:3]
        d = np.hypot(off[:, 0], off[:, 1])
        sel = d < SENSE_RADIUS
        n = int(sel.sum())
        f = feats[i]
        f[23] = math.hypot(a[0], a[1]) / 20.0
        f[14] = math.log1p(n) / 5.0
        if n == 0:
            continue
        o = off[sel]
        f[0:8] = np.histogram(d[sel], bins=edges)[0] / n
        f[8:11] = o.mean(axis=0)
        c, s = math.cos(a[6]), math.sin(a[6])
        along = c * o[:, 0] + s * o[:, 1]
        across = -s * o[:, 0] + c * o[:, 1]
        f[11] = np.ptp(along)
        f[12] = np.ptp(across)
        f[13] = np.ptp(o[:, 2])
        f[15:18] = along.std(), across.std(), o[:, 2].std()
        f[18] = inten[sel].mean()
        if n >= 3:
            cxx, cyy = np.var(along), np.var(across)
            cxy = np.mean((along - along.mean()) * (across - across.mean()))
            theta2 = math.atan2(2 * cxy, cxx - cyy)
            f[19], f[20] = math.sin(theta2), math.cos(theta2)
        f[21] = pts[sel, 2].max()
        f[22] = pts[sel, 2].min()
    return feats


def _render_radar(frame, anchors, rng, area) -> np.ndarray:
    ret_xy, ret_v, ret_i = [], [], []
    for obj in frame:
        b = obj.box
        prior = CLASS_PRIORS[obj.class_id % len(CLASS_PRIORS)]
        n = min(int(rng.poisson(prior["rcs"])), 4)
        for _ in range(n):
            x = b.x + rng.uniform(-0.4, 0.4) * b.l * math.cos(b.yaw) + rng.normal(0, 0.2)
            y = b.y + rng.uniform(-0.4, 0.4) * b.l * math.sin(b.yaw) + rng.normal(0, 0.2)
            r = math.hypot(x, y) or 1e-6
            ret_xy.append((x, y))
            ret_v.append((b.vx * x + b.vy * y) / r)
            ret_i.append(prior["rcs"] + rng.normal(0, 0.2))
    half = area / 2.0
    for _ in range(RADAR_CLUTTER):
        ret_xy.append(tuple(rng.uniform(-half, half, 2)))
        ret_v.append(0.0)
        ret_i.append(float(rng.uniform(0, 0.5)))
    xy = np.array(ret_xy).reshape(-1, 2)
    v = np.array(ret_v)
    inten = np.array(ret_i)
    feats = np.zeros((len(anchors), FEATURE_DIMS["radar"]))
    for i, a in enumerate(anchors):
        f = feats[i]
        f[4] = math.hypot(a[0], a[1]) / 20.0
        f[5] = math.atan2(a[1], a[0]) / math.pi
        off = xy - a[:2]
        sel = np.hypot(off[:, 0], off[:, 1]) < SENSE_RADIUS
        n = int(sel.sum())
        f[0] = n / 3.0
        if n == 0:
            continue
        f[1] = 1.0
        f[2:4] = off[sel].mean(axis=0)
        f[6] = v[sel].mean() / 5.0
        f[7] = inten[sel].mean()
    return feats


def _render_camera(frame, anchors, patterns) -> tuple[np.ndarray, np.ndarray]:
    """Returns features and the class of the object each candidate sees (-1 for none)."""
    feats = np.zeros((len(anchors), FEATURE_DIMS["camera"]))
    seen = np.full(len(anchors), -1, dtype=np.int64)
    if not frame:
        return feats, seen
    centers = np.array([[o.box.x, o.box.y] for o in frame])
    for i, a in enumerate(anchors):
        d = np.hypot(centers[:, 0] - a[0], centers[:, 1] - a[1])
        j = int(np.argmin(d))
        if d[j] >= SENSE_RADIUS:
            continue
        obj = frame[j]
        b = obj.box
        r = max(math.hypot(b.x, b.y), 1.0)
        bearing = math.atan2(b.y, b.x)
        phi = b.yaw - bearing
        apparent_w = abs(b.w * math.cos(phi)) + abs(b.l * math.sin(phi))
        f = feats[i]
        f[0] = float(wrap_angle(bearing - math.atan2(a[1], a[0]))) * r
        f[1] = 10.0 * b.h / r
        f[2] = 10.0 * apparent_w / r
        f[3] = 10.0 / r
        f[4:16] = patterns[obj.class_id]
        seen[i] = obj.class_id
    return feats, seen


def render_modality(
    frame: list[ObjectInstance],
    candidates: list[CandidateAnchor],
    modality: str,
    weather: str,
    seed,
    cfg: WorldConfig | None = None,
    ego: EgoState | None = None,
) -> ModalityFeatures:
    """Render one modality's per-candidate feature matrix with weather-scaled noise."""
    cfg = cfg or WorldConfig()
    if modality not in FEATURE_DIMS:
        raise ConfigError(f"unknown modality {modality!r}")
    if weather not in cfg.noise_mult:
        raise ConfigError(f"unknown weather {weather!r}")
    rng = seed if isinstance(seed, np.random.Generator) else _rng(int(seed), 0, 2)
    feats, _ = _render_clean(frame, candidates, modality, rng, cfg, ego)
    sigma = noise_scale(cfg, modality, weather)
    feats = _add_noise(feats, modality, sigma, rng)
    return ModalityFeatures(modality, feats, np.ones(len(candidates), dtype=bool))


def _render_clean(frame, candidates, modality, rng, cfg, ego):
    anchors = _anchor_array(candidates)
    n = len(candidates)
    seen = np.full(n, -1, dtype=np.int64)
    if modality == "lidar":
        feats = _render_lidar(frame, anchors, rng, cfg.area)
    elif modality == "radar":
        feats = _render_radar(frame, anchors, rng, cfg.area)
    elif modality == "camera":
        feats, seen = _render_camera(frame, anchors, camera_patterns(max(cfg.n_classes, 6)))
    elif modality == "imu":
        e = ego or EgoState(0, 0, 0, 0, 0, 0, 0)
        feats = np.tile([e.ax, e.ay, e.yaw_rate, e.ax, e.ay, e.yaw_rate], (n, 1)).astype(np.float64)
    else:
        e = ego or EgoState(0, 0, 0, 0, 0, 0, 0)
        feats = np.tile([e.x / 100.0, e.y / 100.0, e.altitude / 10.0], (n, 1)).astype(np.float64)
    return feats, seen


def _add_noise(feats: np.ndarray, modality: str, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if sigma <= 0 or feats.shape[0] == 0:
        return feats
    if modality in EGO_MODALITIES:
        # one ego measurement per frame, broadcast to every candidate
        if modality == "imu":
            row = rng.normal(0, sigma, size=3)
            row = np.concatenate([row, row])
        else:
            row = rng.normal(0, sigma, size=FEATURE_DIMS[modality])
        return feats + row
    return feats + rng.normal(0, sigma, size=feats.shape)


def sample_dropout_mask(seed, probs) -> np.ndarray:
    """Independent per-modality survival draws, resampled until one modality survives.

    ``probs`` is a dict or a sequence in ``MODALITIES`` order. Returns a bool
    array in ``MODALITIES`` order.
    """
    p = np.array([probs.get(m, 0.0) for m in MODALITIES] if isinstance(probs, dict) else list(probs), dtype=float)
    if p.shape != (len(MODALITIES),) or np.any(p < 0) or np.any(p > 1):
        raise ConfigError("dropout probabilities must be 5 values in [0, 1]")
    if np.all(p >= 1.0):
        raise ConfigError("all modalities always drop")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.Generator(np.random.PCG64(int(seed)))
    while True:
        mask = rng.random(len(MODALITIES)) >= p
        if mask.any():
            return mask


# ------------------------------------------------------------------ dataset records


@dataclass
class FrameRecord:
    tag: str
    objects: list[ObjectInstance]
    anchors: np.ndarray  # (n, 7)
    assigned: np.ndarray  # (n,) instance id or -1
    labels: np.ndarray  # (n,) class id, n_classes for background
    features: dict[str, np.ndarray]
    available: dict[str, np.ndarray]

    def gt_boxes(self) -> np.ndarray:
        """(n, 9) ground-truth box per candidate (zeros for background)."""
        out = np.zeros((len(self.assigned), 9))
        by_id = {o.instance_id: o.box.as_array() for o in self.objects}
        for i, iid in enumerate(self.assigned):
            if iid >= 0:
                out[i] = by_id[int(iid)]
        return out

    def attributes(self) -> np.ndarray:
        by_id = {o.instance_id: o.attribute for o in self.objects}
        return np.array([bool(by_id.get(int(i), False)) for i in self.assigned])


@dataclass
class SceneRecord:
    scene_id: int
    weather: str
    ego: EgoState
    frames: list[FrameRecord]


@dataclass
class DatasetManifest:
    split: str
    records: list[SceneRecord]
    holdout: list[tuple[str, int]]
    seed: int
    config_hash: str
    world: WorldConfig = field(default_factory=WorldConfig)


def build_frame(
    scene: ScenePair, tag: str, seed: int, cfg: WorldConfig, apply_holdout: bool
) -> FrameRecord:
    objects = scene.frame_t if tag == "t" else scene.frame_t1
    stream = 1 if tag == "t" else 2
    rng = _rng(seed, scene.scene_id, 10 + stream)
    cands = make_candidates(objects, rng, cfg, tag)
    anchors = _anchor_array(cands)
    assigned = np.array([-1 if c.instance_id is None else c.instance_id for c in cands], dtype=np.int64)
    by_id = {o.instance_id: o.class_id for o in objects}
    labels = np.array([cfg.n_classes if i < 0 else by_id[int(i)] for i in assigned], dtype=np.int64)
    features: dict[str, np.ndarray] = {}
    available: dict[str, np.ndarray] = {}
    outage = _rng(seed, scene.scene_id, 20 + stream)
    for k, m in enumerate(MODALITIES):
        mrng = _rng(seed, scene.scene_id, 100 + 10 * stream + k)
        feats, seen = _render_clean(objects, cands, m, mrng, cfg, scene.ego)
        feats = _add_noise(feats, m, noise_scale(cfg, m, scene.weather), mrng)
        avail = np.ones(len(cands), dtype=bool)
        if outage.random() < cfg.dropout_add.get(scene.weather, {}).get(m, 0.0):
            avail[:] = False
        if apply_holdout:
            for hm, hc in cfg.holdout:
                if hm == m:
                    avail &= ~((labels == hc) | (seen == hc))
        feats[~avail] = 0.0
        features[m] = feats
        available[m] = avail
    return FrameRecord(tag, objects, anchors, assigned, labels, features, available)


SPLIT_OFFSETS = {"train": 0, "val": 1_000_000, "test": 2_000_000}


def build_split(cfg: RunConfig, split: str) -> DatasetManifest:
    w = cfg.world
    records = []
    for i in range(w.splits[split]):
        scene = generate_scene(cfg.seed, SPLIT_OFFSETS[split] + i, w)
        frames = [build_frame(scene, tag, cfg.seed, w, apply_holdout=(split == "train")) for tag in ("t", "t1")]
        records.append(SceneRecord(scene.scene_id, scene.weather, scene.ego, frames))
    return DatasetManifest(split, records, list(w.holdout), cfg.seed, cfg.dataset_hash(), w)


def build_dataset(cfg: RunConfig, out_dir: str | Path | None = None) -> dict[str, DatasetManifest]:
    """Generate every split; write ``<split>.jsonl`` manifests when ``out_dir`` is given."""
    manifests = {split: build_split(cfg, split) for split in cfg.world.splits}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for split, man in manifests.items():
            write_manifest(man, out / f"{split}.jsonl")
    return manifests


# ------------------------------------------------------------------ serialization


def _obj_to_json(o: ObjectInstance) -> dict:
    return {"id": o.instance_id, "cls": o.class_id, "box": o.box.as_array().tolist(), "moving": o.attribute}


def _obj_from_json(d: dict) -> ObjectInstance:
    return ObjectInstance(int(d["id"]), int(d["cls"]), Box3D.from_array(d["box"]), bool(d["moving"]))


def record_to_json(rec: SceneRecord) -> dict:
    return {
        "scene_id": rec.scene_id,
        "weather": rec.weather,
        "ego": [rec.ego.x, rec.ego.y, rec.ego.yaw, rec.ego.ax, rec.ego.ay, rec.ego.yaw_rate, rec.ego.altitude],
        "frames": [
            {
                "tag": f.tag,
                "objects": [_obj_to_json(o) for o in f.objects],
                "anchors": encode_array(f.anchors),
                "assigned": f.assigned.tolist(),
                "labels": f.labels.tolist(),
                "features": {m: encode_array(f.features[m]) for m in MODALITIES},
                "available": {m: f.available[m].astype(int).tolist() for m in MODALITIES},
            }
            for f in rec.frames
        ],
    }


def record_from_json(d: dict) -> SceneRecord:
    frames = []
    for f in d["frames"]:
        n = len(f["assigned"])
        frames.append(
            FrameRecord(
                f["tag"],
                [_obj_from_json(o) for o in f["objects"]],
                decode_array(f["anchors"], (n, 7)),
                np.array(f["assigned"], dtype=np.int64),
                np.array(f["labels"], dtype=np.int64),
                {m: decode_array(f["features"][m], (n, FEATURE_DIMS[m])) for m in MODALITIES},
                {m: np.array(f["available"][m], dtype=bool) for m in MODALITIES},
            )
        )
    return SceneRecord(int(d["scene_id"]), d["weather"], EgoState(*d["ego"]), frames)


def manifest_lines(man: DatasetManifest) -> list[str]:
    header = {
        "version": MANIFEST_VERSION,
        "split": man.split,
        "config_hash": man.config_hash,
        "seed": man.seed,
        "holdout": [list(h) for h in man.holdout],
    }
    lines = [json.dumps(header, sort_keys=True)]
    lines.extend(json.dumps(record_to_json(r), sort_keys=True) for r in man.records)
    return lines


def write_manifest(man: DatasetManifest, path: str | Path) -> None:
    try:
        Path(path).write_text("\n".join(manifest_lines(man)) + "\n")
    except OSError as exc:
        raise ManifestError(f"cannot write manifest {path}: {exc}") from exc


def read_manifest(path: str | Path, expected_hash: str | None = None, world: WorldConfig | None = None) -> DatasetManifest:
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    if not lines:
        raise ManifestError(f"empty manifest {path}")
    header = json.loads(lines[0])
    if header.get("version") != MANIFEST_VERSION:
        raise ManifestError(f"unsupported manifest version {header.get('version')!r}")
    if expected_hash is not None and header["config_hash"] != expected_hash:
        raise ManifestError(
            f"config hash mismatch: manifest {header['config_hash']} vs expected {expected_hash}"
        )
    records = [record_from_json(json.loads(line)) for line in lines[1:] if line.strip()]
    return DatasetManifest(
        header["split"],
        records,
        [tuple(h) for h in header["holdout"]],
        int(header["seed"]),
        header["config_hash"],
        world or WorldConfig(),
    )


def world_hash(world: WorldConfig) -> str:
    return config_hash(world)
