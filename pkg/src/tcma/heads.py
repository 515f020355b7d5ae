"""Trainable alignment heads.

Everything the optimizer touches lives here: the dynamic-temperature map,
the word/patch saliency scorers, the patch-frame fusion projection, and the
contrastive logit scale. The encoders themselves are frozen precomputed
embeddings and never appear.

Initialization is chosen so the untrained model reduces to interpretable
mean-like behavior: temperature starts at ~1.001, saliency scores start all
tied (selection falls back to lowest indices), and the patch projection
passes the raw patch through while ignoring the frame half.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, CorpusFormatError
from .store import FORMAT_F64, read_embeddings, write_embeddings

EPSILON_TEMP = 0.001          # additive temperature floor; fixed constant
LOGIT_SCALE_INIT = math.log(100.0)
LOGIT_SCALE_MIN = 0.0          # exp bounds [1, 1000]
LOGIT_SCALE_MAX = math.log(1000.0)

PARAM_NAMES = (
    "temp_w", "temp_b",
    "word_w", "word_b",
    "patch_proj_w", "patch_proj_b",
    "patch_score_w", "patch_score_b",
    "logit_scale",
)


@dataclass
class HeadParameters:
    dim: int
    k_w: int = 8
    k_p: int = 3
    epsilon: float = EPSILON_TEMP
    temp_w: np.ndarray = field(default=None)         # (D,)
    temp_b: np.ndarray = field(default=None)         # ()
    word_w: np.ndarray = field(default=None)         # (2D,) over concat(word, sentence)
    word_b: np.ndarray = field(default=None)         # ()
    patch_proj_w: np.ndarray = field(default=None)   # (2D, D) over concat(patch, frame)
    patch_proj_b: np.ndarray = field(default=None)   # (D,)
    patch_score_w: np.ndarray = field(default=None)  # (2D,) over concat(proj patch, video)
    patch_score_b: np.ndarray = field(default=None)  # ()
    logit_scale: np.ndarray = field(default=None)    # (), log domain

    @classmethod
    def init_default(cls, dim: int, k_w: int = 8, k_p: int = 3) -> "HeadParameters":
        if dim <= 0:
            raise ConfigError(f"head dim must be positive, got {dim}")
        if k_w <= 0 or k_p <= 0:
            raise ConfigError(f"selection counts must be positive, got k_w={k_w} k_p={k_p}")
        proj = np.zeros((2 * dim, dim))
        proj[:dim] = np.eye(dim)  # pass the raw patch through, ignore the frame half
        return cls(
            dim=dim, k_w=k_w, k_p=k_p,
            temp_w=np.zeros(dim),
            temp_b=np.asarray(math.log(math.e - 1.0)),  # softplus -> 1, temperature ~1.001
            word_w=np.zeros(2 * dim),
            word_b=np.asarray(0.0),
            patch_proj_w=proj,
            patch_proj_b=np.zeros(dim),
            patch_score_w=np.zeros(2 * dim),
            patch_score_b=np.asarray(0.0),
            logit_scale=np.asarray(LOGIT_SCALE_INIT),
        )

    def param_items(self) -> list[tuple[str, np.ndarray]]:
        """Trainable arrays in the fixed optimizer order."""
        return [(name, getattr(self, name)) for name in PARAM_NAMES]

    def copy(self) -> "HeadParameters":
        return HeadParameters(
            dim=self.dim, k_w=self.k_w, k_p=self.k_p, epsilon=self.epsilon,
            **{name: np.array(getattr(self, name), dtype=np.float64) for name in PARAM_NAMES},
        )

    def clamp_logit_scale(self) -> None:
        self.logit_scale = np.asarray(
            min(max(float(self.logit_scale), LOGIT_SCALE_MIN), LOGIT_SCALE_MAX)
        )

    def scale(self) -> float:
        return math.exp(float(self.logit_scale))

    def validate(self) -> None:
        if self.epsilon != EPSILON_TEMP:
            raise ConfigError(f"temperature epsilon is fixed at {EPSILON_TEMP}")
        shapes = {
            "temp_w": (self.dim,), "temp_b": (),
            "word_w": (2 * self.dim,), "word_b": (),
            "patch_proj_w": (2 * self.dim, self.dim), "patch_proj_b": (self.dim,),
            "patch_score_w": (2 * self.dim,), "patch_score_b": (),
            "logit_scale": (),
        }
        for name, expect in shapes.items():
            arr = getattr(self, name)
            if tuple(np.shape(arr)) != expect:
                raise ConfigError(f"head parameter {name} has shape {np.shape(arr)}, expected {expect}")
            if not np.all(np.isfinite(arr)):
                raise ConfigError(f"head parameter {name} contains non-finite values")

    # -- persistence (64-bit container files + JSON sidecar) -----------------

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name, arr in self.param_items():
            write_embeddings(np.atleast_1d(arr), directory / f"{name}.tcma",
                             format_version=FORMAT_F64)
        meta = {"dim": self.dim, "k_w": self.k_w, "k_p": self.k_p, "epsilon": self.epsilon}
        (directory / "heads.json").write_text(json.dumps(meta, sort_keys=True), encoding="utf-8")

    @classmethod
    def load(cls, directory) -> "HeadParameters":
        directory = Path(directory)
        meta_path = directory / "heads.json"
        try:
            meta = json.loads(meta_path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise CorpusFormatError(f"{meta_path}: cannot read head metadata ({exc})") from exc
        heads = cls.init_default(int(meta["dim"]), int(meta["k_w"]), int(meta["k_p"]))
        for name in PARAM_NAMES:
            arr = read_embeddings(directory / f"{name}.tcma")
            ref = getattr(heads, name)
            setattr(heads, name, arr.reshape(np.shape(ref)))
        heads.validate()
        return heads
