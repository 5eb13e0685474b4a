"""Tiny convolutional BEV encoder + query-based multi-stage decoder.

Teacher and student share this architecture and differ only in which scene
modality they consume; matching grid and channel width between them is what
makes dense feature imitation possible without adapters.

Decoder stages refine detached reference points: each query samples the
encoder map at its reference point, mixes in a learned query embedding,
and predicts class scores (foreground classes plus a trailing background
entry), box parameters and velocity. The penultimate activations are the
embeddings the contrastive critic consumes.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DiffValue
from .contrastive_critic import bilinear_sample_many
from .core_types import BevBox, BevGrid, ClassDistribution, FeatureMap, PredictionSet
from .scenes import Scene

SIZE_LOG_CLAMP = 2.5     # sizes = exp(clamp(raw, -c, c)) stays in (0.08, 12.2)
YAW_NORM_FLOOR = 1e-8
# center offsets are tanh-bounded per stage so queries stay regional and the
# set matching cannot drag them across the map chasing class labels
OFFSET_BOUNDS = (10.0, 5.0)
# encoder features are read on a sparse 3x3 tap pattern around the reference
# point; the spread shrinks stage over stage as references refine
TAP_SPACINGS = (6.0, 2.0)
_TAP_PATTERN = np.array([(dx, dy) for dy in (-1.0, 0.0, 1.0)
                         for dx in (-1.0, 0.0, 1.0)])
# the raw modality input is read as a dense 8x8 window so no object inside
# the query's patch can slip between samples; also feeds the centroid prior
WINDOW_SIDE = 8
WINDOW_SPACINGS = (2.5, 1.0)
_WINDOW_PATTERN = np.array([(dx, dy)
                            for dy in np.arange(WINDOW_SIDE) - (WINDOW_SIDE - 1) / 2.0
                            for dx in np.arange(WINDOW_SIDE) - (WINDOW_SIDE - 1) / 2.0])


def _stage_scale(values: tuple[float, ...], stage: int, extent: float) -> float:
    return values[min(stage, len(values) - 1)] * (extent / 64.0)


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 2
    channels: int = 16
    num_classes: int = 4
    num_queries: int = 16
    stages: int = 2
    embed_dim: int = 32


@dataclass
class StageDiff:
    """Differentiable per-stage tensors backing a PredictionSet."""

    class_probs: DiffValue   # (N, num_classes + 1), softmax rows
    box8: DiffValue          # (N, 8) normalized box vector
    velocity: DiffValue      # (N, 2) m/s
    embeddings: DiffValue    # (N, D) penultimate activations


def _initial_reference_points(grid: BevGrid, n_queries: int) -> np.ndarray:
    """A fixed near-square lattice of world points covering the grid."""
    side = max(1, math.ceil(math.sqrt(n_queries)))
    xs = np.linspace(grid.x_min, grid.x_max, side + 2)[1:-1]
    ys = np.linspace(grid.y_min, grid.y_max, side + 2)[1:-1]
    pts = [(x, y) for y in ys for x in xs]
    return np.array(pts[:n_queries], dtype=np.float64)


class Detector:
    """One BEV detector; `modality` picks the scene input it consumes."""

    def __init__(self, grid: BevGrid, config: ModelConfig, modality: str,
                 seed: int = 0):
        if modality not in ("lidar", "camera"):
            raise ValueError("modality must be 'lidar' or 'camera'")
        self.grid = grid
        self.config = config
        self.modality = modality
        self.frozen = False
        self._cache: dict[str, tuple[FeatureMap, list[PredictionSet]]] = {}
        self.params: dict[str, DiffValue] = {}
        self._init_params(np.random.default_rng(seed))
        self._ref0 = _initial_reference_points(grid, config.num_queries)

    # -- parameters -------------------------------------------------------
    def _linear(self, rng, name: str, d_in: int, d_out: int,
                w_std: float | None = None, bias: np.ndarray | None = None):
        std = w_std if w_std is not None else math.sqrt(2.0 / d_in)
        self.params[f"{name}.w"] = ad.parameter(rng.normal(0.0, std, (d_in, d_out)))
        self.params[f"{name}.b"] = ad.parameter(
            np.zeros(d_out) if bias is None else bias.astype(np.float64))

    def _init_params(self, rng: np.random.Generator):
        cfg = self.config
        c = cfg.channels
        self._linear(rng, "enc.conv1", 9 * cfg.in_channels, c)
        self._linear(rng, "enc.conv2", 9 * c, c)
        self._linear(rng, "enc.conv3", 9 * c, c)
        k = cfg.num_classes
        # the decoder is shared across queries and reads only egocentric
        # evidence; per-query identity would let classification detach from
        # geometry and destabilize the set matching
        tap_dim = (len(_TAP_PATTERN) * c
                   + len(_WINDOW_PATTERN) * cfg.in_channels)
        hidden = 2 * cfg.embed_dim
        for s in range(cfg.stages):
            self._linear(rng, f"dec{s}.fc1", tap_dim, hidden)
            self._linear(rng, f"dec{s}.fc2", hidden, cfg.embed_dim)
            cls_bias = np.zeros(k + 1)
            cls_bias[k] = 2.0  # start with a background prior
            self._linear(rng, f"dec{s}.cls", cfg.embed_dim, k + 1,
                         w_std=0.01, bias=cls_bias)
            self._linear(rng, f"dec{s}.xy", cfg.embed_dim, 2, w_std=0.01)
            self._linear(rng, f"dec{s}.z", cfg.embed_dim, 1, w_std=0.01,
                         bias=np.array([0.8]))
            self._linear(rng, f"dec{s}.size", cfg.embed_dim, 3, w_std=0.01,
                         bias=np.log(np.array([2.0, 3.0, 1.5])))
            self._linear(rng, f"dec{s}.yaw", cfg.embed_dim, 2, w_std=0.01,
                         bias=np.array([0.0, 1.0]))
            self._linear(rng, f"dec{s}.vel", cfg.embed_dim, 2, w_std=0.01)

    def freeze(self):
        for p in self.params.values():
            p.requires_grad = False
        self.frozen = True
        self._cache.clear()

    def weights_hash(self) -> str:
        digest = hashlib.sha256()
        for name in sorted(self.params):
            digest.update(name.encode())
            digest.update(self.params[name].value.tobytes())
        return digest.hexdigest()

    # -- forward ------------------------------------------------------------
    def scene_input(self, scene: Scene) -> np.ndarray:
        return scene.lidar_like_input if self.modality == "lidar" else scene.camera_like_input

    def encode(self, inputs: np.ndarray) -> FeatureMap:
        x = ad.constant(inputs)
        p = self.params
        x = ad.relu(ad.conv3x3(x, p["enc.conv1.w"], p["enc.conv1.b"]))
        x = ad.relu(ad.conv3x3(x, p["enc.conv2.w"], p["enc.conv2.b"]))
        x = ad.conv3x3(x, p["enc.conv3.w"], p["enc.conv3.b"])
        return FeatureMap(self.grid, x)

    def _decode_stage(self, fmap: FeatureMap, raw_map: FeatureMap,
                      refs: np.ndarray, stage: int
                      ) -> tuple[PredictionSet, np.ndarray]:
        cfg = self.config
        p = self.params
        extent = self.grid.extent
        spacing = _stage_scale(TAP_SPACINGS, stage, extent)
        taps = (refs[:, None, :] + spacing * _TAP_PATTERN[None, :, :]).reshape(-1, 2)
        feats = bilinear_sample_many(fmap, taps)
        feats = ad.reshape(feats, (cfg.num_queries, len(_TAP_PATTERN) * cfg.channels))

        win_spacing = _stage_scale(WINDOW_SPACINGS, stage, extent)
        win_offsets = win_spacing * _WINDOW_PATTERN
        win_taps = (refs[:, None, :] + win_offsets[None, :, :]).reshape(-1, 2)
        window = bilinear_sample_many(raw_map, win_taps)
        # occupancy-weighted window centroid: a data-driven first guess of
        # the local object center that the offset head then refines
        mass = np.maximum(window.value[:, 0], 0.0).reshape(
            cfg.num_queries, len(_WINDOW_PATTERN))
        centroid = (mass[:, :, None] * win_offsets[None, :, :]).sum(axis=1) \
            / (mass.sum(axis=1, keepdims=True) + 1e-6)
        window = ad.reshape(window, (cfg.num_queries,
                                     len(_WINDOW_PATTERN) * cfg.in_channels))
        mixed = ad.concat([feats, window], axis=1)
        hid = ad.relu(mixed @ p[f"dec{stage}.fc1.w"] + p[f"dec{stage}.fc1.b"])
        emb = ad.relu(hid @ p[f"dec{stage}.fc2.w"] + p[f"dec{stage}.fc2.b"])
        probs = ad.softmax(emb @ p[f"dec{stage}.cls.w"] + p[f"dec{stage}.cls.b"], axis=1)
        bound = _stage_scale(OFFSET_BOUNDS, stage, extent)
        shift = ad.tanh(emb @ p[f"dec{stage}.xy.w"] + p[f"dec{stage}.xy.b"]) * bound
        centers = shift + ad.constant(refs + centroid)
        z = emb @ p[f"dec{stage}.z.w"] + p[f"dec{stage}.z.b"]
        raw_size = emb @ p[f"dec{stage}.size.w"] + p[f"dec{stage}.size.b"]
        sizes = ad.exp(ad.minimum(ad.maximum(raw_size, -SIZE_LOG_CLAMP), SIZE_LOG_CLAMP))
        raw_yaw = emb @ p[f"dec{stage}.yaw.w"] + p[f"dec{stage}.yaw.b"]
        yaw_norm = ad.maximum(ad.l2norm(raw_yaw, axis=1, keepdims=True), YAW_NORM_FLOOR)
        sincos = raw_yaw / yaw_norm
        vel = emb @ p[f"dec{stage}.vel.w"] + p[f"dec{stage}.vel.b"]
        box8 = ad.concat([centers * (1.0 / extent), z * (1.0 / extent),
                          sizes * (1.0 / extent), sincos], axis=1)

        diff = StageDiff(class_probs=probs, box8=box8, velocity=vel, embeddings=emb)
        boxes = []
        for i in range(cfg.num_queries):
            cx, cy = centers.value[i]
            sw, sl, sh = sizes.value[i]
            yaw = math.atan2(sincos.value[i, 0], sincos.value[i, 1])
            boxes.append(BevBox(float(cx), float(cy), float(z.value[i, 0]),
                                float(sw), float(sl), float(sh), yaw,
                                float(vel.value[i, 0]), float(vel.value[i, 1]),
                                int(np.argmax(probs.value[i, :cfg.num_classes]))))
        dists = [ClassDistribution(probs.value[i]) for i in range(cfg.num_queries)]
        embeddings = [emb.value[i] for i in range(cfg.num_queries)]
        preds = PredictionSet(boxes, dists, embeddings,
                              [tuple(r) for r in refs], stage, diff)
        next_refs = centers.value.copy()
        return preds, next_refs

    def forward(self, scene: Scene) -> tuple[FeatureMap, list[PredictionSet]]:
        """Encode the scene and run every decoder stage.

        Frozen detectors memoize per scene id: their outputs are constants
        and identical on every call by the freezing contract.
        """
        if self.frozen and scene.scene_id in self._cache:
            return self._cache[scene.scene_id]
        inputs = self.scene_input(scene)
        fmap = self.encode(inputs)
        raw_map = FeatureMap(self.grid, inputs)
        refs = self._ref0
        stage_preds = []
        for s in range(self.config.stages):
            preds, refs = self._decode_stage(fmap, raw_map, refs, s)
            stage_preds.append(preds)
        result = (fmap, stage_preds)
        if self.frozen:
            self._cache[scene.scene_id] = result
        return result

    # -- serialization ------------------------------------------------------
    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self.params.items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]):
        for name, p in self.params.items():
            incoming = np.asarray(arrays[name], dtype=np.float64)
            if incoming.shape != p.value.shape:
                raise ValueError(f"shape mismatch for {name}")
            p.value = incoming.copy()
        self._cache.clear()


class ToyTeacher(Detector):
    """Lidar-side detector; frozen after training."""

    def __init__(self, grid: BevGrid, config: ModelConfig, seed: int = 0):
        super().__init__(grid, config, "lidar", seed)


class ToyStudent(Detector):
    """Camera-side detector; the distillation target."""

    def __init__(self, grid: BevGrid, config: ModelConfig, seed: int = 0):
        super().__init__(grid, config, "camera", seed)
