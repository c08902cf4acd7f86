"""Named trainable weights: construction, initialization, and checkpoints."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Dict, List, Tuple

import numpy as np

from . import ops
from .datamodel import ConfigError, ContractError, DataError


@dataclass(frozen=True)
class ModelDims:
    """Feature dimensions; defaults match the synthetic benchmark."""

    d_s: int = 128
    d_h: int = 256
    d_g: int = 256
    d_f: int = 256
    word_dim: int = 300
    mask_size: int = 64
    encoder_cell: str = "gru"

    def __post_init__(self):
        if self.d_h % 2 != 0:
            raise ConfigError(f"d_h must be even for the bidirectional encoder, got {self.d_h}")
        if self.encoder_cell not in ("gru", "tanh"):
            raise ConfigError(f"encoder_cell must be 'gru' or 'tanh', got {self.encoder_cell!r}")


@dataclass(frozen=True)
class ModelSwitches:
    """Which computation paths exist (ablation reachability)."""

    sge: bool = True
    passing: bool = True
    relation_aware: bool = True
    cov: bool = False


def parameter_shapes(
    dims: ModelDims, num_interactions: int, switches: ModelSwitches
) -> List[Tuple[str, Tuple[int, ...]]]:
    """Declared (name, shape) pairs for every reachable weight, in init order."""
    shapes: List[Tuple[str, Tuple[int, ...]]] = []
    half = dims.d_h // 2
    if switches.sge:
        shapes.append(("spatial.proj", (dims.d_s, 8)))
        shapes.append(("context.input_proj", (dims.d_h, dims.d_s + dims.word_dim)))
        for direction in ("fwd", "bwd"):
            if dims.encoder_cell == "gru":
                for gate in ("update", "reset", "cand"):
                    shapes.append((f"context.{direction}.{gate}_in", (half, dims.d_h)))
                    shapes.append((f"context.{direction}.{gate}_rec", (half, half)))
                    shapes.append((f"context.{direction}.{gate}_bias", (half,)))
            else:
                shapes.append((f"context.{direction}.in", (half, dims.d_h)))
                shapes.append((f"context.{direction}.rec", (half, half)))
                shapes.append((f"context.{direction}.bias", (half,)))
        shapes.append(("relation.proj", (dims.d_h, 2 * dims.d_h + dims.word_dim)))
        shapes.append(("attention.weights", (dims.d_h,)))
        shapes.append(("graph.proj", (dims.d_g, dims.d_h)))
    if switches.passing:
        if switches.relation_aware:
            shapes.append(("msg.alpha_proj", (dims.d_f, dims.word_dim)))
        for path in ("o2h", "h2h", "h2o", "o2o"):
            shapes.append((f"msg.{path}.src", (dims.d_f, dims.d_f)))
            shapes.append((f"msg.{path}.out", (dims.d_f, dims.d_f)))
    if switches.cov:
        shapes.append(("cov.proj", (dims.d_g, dims.d_f)))
    grid = 2 * dims.mask_size * dims.mask_size
    # input-major layout: applied as flat_masks @ weight
    shapes.append(("mask.proj.weight", (grid, 2 * dims.d_f)))
    shapes.append(("mask.proj.bias", (2 * dims.d_f,)))
    shapes.append(("head.visual.weight", (num_interactions, 2 * dims.d_f)))
    shapes.append(("head.visual.bias", (num_interactions,)))
    shapes.append(("head.message.weight", (num_interactions, dims.d_g + 2 * dims.d_f)))
    shapes.append(("head.message.bias", (num_interactions,)))
    return shapes


class ParameterStore:
    """Mapping from weight name to float64 array, with checkpoint support.

    Single-writer: only the trainer mutates arrays, between batches.
    """

    def __init__(self, arrays: Dict[str, np.ndarray], meta: dict):
        self.arrays = arrays
        self.meta = meta
        self._scratch: Dict[str, np.ndarray] = {}

    @classmethod
    def build(
        cls,
        dims: ModelDims,
        num_interactions: int,
        switches: ModelSwitches,
        seed: int,
    ) -> "ParameterStore":
        rng = np.random.default_rng([int(seed), 0x5EED])
        arrays: Dict[str, np.ndarray] = {}
        for name, shape in parameter_shapes(dims, num_interactions, switches):
            if name.endswith("bias"):
                arrays[name] = np.zeros(shape, dtype=np.float64)
            elif name == "attention.weights":
                arrays[name] = np.ones(shape, dtype=np.float64)
            elif name == "msg.alpha_proj":
                # consumes unit-norm word vectors: fan-in scaling would
                # shrink the gates by ~1/sqrt(word_dim)
                arrays[name] = rng.normal(0.0, 1.0, size=shape)
            else:
                fan_in = shape[0] if name == "mask.proj.weight" else shape[-1]
                arrays[name] = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape)
        meta = {
            "dims": {
                "d_s": dims.d_s,
                "d_h": dims.d_h,
                "d_g": dims.d_g,
                "d_f": dims.d_f,
                "word_dim": dims.word_dim,
                "mask_size": dims.mask_size,
                "encoder_cell": dims.encoder_cell,
            },
            "num_interactions": num_interactions,
            "switches": {
                "sge": switches.sge,
                "passing": switches.passing,
                "relation_aware": switches.relation_aware,
                "cov": switches.cov,
            },
            "seed": int(seed),
        }
        return cls(arrays, meta)

    @property
    def dims(self) -> ModelDims:
        return ModelDims(**self.meta["dims"])

    @property
    def switches(self) -> ModelSwitches:
        return ModelSwitches(**self.meta["switches"])

    @property
    def num_interactions(self) -> int:
        return int(self.meta["num_interactions"])

    def __contains__(self, name: str) -> bool:
        return name in self.arrays

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def names(self) -> List[str]:
        return list(self.arrays.keys())

    def leaves(self) -> Dict[str, ops.Var]:
        """Fresh graph leaves for one traced forward/backward pass."""
        return {name: ops.Var(array) for name, array in self.arrays.items()}

    def apply_sgd(self, grads: Dict[str, np.ndarray], lr: float) -> None:
        for name, grad in grads.items():
            if grad is None:
                continue
            scratch = self._scratch.get(name)
            if scratch is None or scratch.shape != grad.shape:
                scratch = np.empty_like(self.arrays[name])
                self._scratch[name] = scratch
            np.multiply(grad, lr, out=scratch)
            self.arrays[name] -= scratch

    def copy(self) -> "ParameterStore":
        return ParameterStore(
            {name: array.copy() for name, array in self.arrays.items()},
            json.loads(json.dumps(self.meta)),
        )

    def save(self, path: str) -> None:
        manifest = dict(self.meta)
        manifest["names"] = self.names()
        manifest["shapes"] = {name: list(a.shape) for name, a in self.arrays.items()}
        payload = dict(self.arrays)
        payload["__manifest__"] = np.frombuffer(
            json.dumps(manifest, sort_keys=True).encode("utf-8"), dtype=np.uint8
        )
        with open(path, "wb") as handle:
            np.savez(handle, **payload)

    @classmethod
    def load(cls, path: str) -> "ParameterStore":
        try:
            with np.load(path) as data:
                if "__manifest__" not in data:
                    raise DataError(f"checkpoint {path} lacks a manifest")
                manifest = json.loads(bytes(data["__manifest__"]).decode("utf-8"))
                arrays = {
                    name: np.asarray(data[name], dtype=np.float64)
                    for name in manifest["names"]
                }
        except FileNotFoundError:
            raise DataError(f"checkpoint not found: {path}")
        for name, shape in manifest.get("shapes", {}).items():
            if list(arrays[name].shape) != shape:
                raise DataError(f"checkpoint {path}: tensor {name} has shape {arrays[name].shape}, manifest says {shape}")
        meta = {k: v for k, v in manifest.items() if k not in ("names", "shapes")}
        return cls(arrays, meta)

    def check_vocab(self, num_objects: int, num_predicates: int, num_interactions: int) -> None:
        vocab_meta = self.meta.get("vocab_sizes")
        if vocab_meta is None:
            return
        expected = (vocab_meta["objects"], vocab_meta["predicates"], vocab_meta["interactions"])
        actual = (num_objects, num_predicates, num_interactions)
        if expected != actual:
            raise ContractError(
                f"checkpoint was trained with vocabulary sizes {expected}, data has {actual}"
            )
