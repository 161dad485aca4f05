"""Frozen binary weight masks for the clean and adversarial expert paths.

Every conditional convolution owns two masks over its weight tensor: one for
the clean path and one for the adversarial path. A :class:`MaskPlan` fixes,
per layer, the density of each mask and of their intersection; dense-tagged
layers keep every weight in both paths.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

from smartnet import ops
from smartnet.errors import DimensionError, InfeasiblePlanError, InvalidPlanError
from smartnet.rng import substream
from smartnet.tensor import Tensor


def round_half_up(x: float | Fraction) -> int:
    frac = Fraction(x).limit_denominator(10**9) if isinstance(x, float) else Fraction(x)
    return math.floor(frac + Fraction(1, 2))


def target_counts(n: int, c_clean: float, c_adv: float, c_shared: float) -> tuple[int, int, int]:
    """Rounded support sizes ``(|M_C|, |M_A|, |M_C & M_A|)`` for ``n`` elements.

    Raises:
        InvalidPlanError: densities outside [0, 1] or ``c_shared > min(c_clean, c_adv)``.
        InfeasiblePlanError: ``c_clean + c_adv - c_shared > 1``.
    """
    check_densities(c_clean, c_adv, c_shared)
    n_shared = round_half_up(Fraction(c_shared).limit_denominator(10**9) * n)
    n_clean = round_half_up(Fraction(c_clean).limit_denominator(10**9) * n)
    n_adv = round_half_up(Fraction(c_adv).limit_denominator(10**9) * n)
    if n_clean + n_adv - n_shared > n:
        raise InfeasiblePlanError(
            f"union of masks needs {n_clean + n_adv - n_shared} slots, tensor has {n}"
        )
    return n_clean, n_adv, n_shared


def check_densities(c_clean: float, c_adv: float, c_shared: float) -> None:
    for name, c in (("c_clean", c_clean), ("c_adv", c_adv), ("c_shared", c_shared)):
        if not 0.0 <= c <= 1.0:
            raise InvalidPlanError(f"{name}={c} outside [0, 1]")
    if c_shared > min(c_clean, c_adv) + 1e-12:
        raise InvalidPlanError(
            f"c_shared={c_shared} exceeds min(c_clean, c_adv)={min(c_clean, c_adv)}"
        )
    if c_clean + c_adv - c_shared > 1.0 + 1e-12:
        raise InfeasiblePlanError(
            f"c_clean + c_adv - c_shared = {c_clean + c_adv - c_shared:.6g} > 1"
        )


class SparsityMask:
    """Immutable binary mask stored as a little-endian bitset of 64-bit words.

    Element ``i`` of the flattened mask is bit ``i % 64`` of word ``i // 64``.
    """

    __slots__ = ("shape", "_words", "_dense", "_cache")

    def __init__(self, shape: Sequence[int], words: np.ndarray):
        self.shape = tuple(int(s) for s in shape)
        words = np.array(words, dtype="<u8", copy=True)
        if words.size != -(-self.size // 64):
            raise DimensionError(f"{words.size} words cannot hold a mask of {self.size} elements")
        words.setflags(write=False)
        self._words = words
        dense = np.unpackbits(
            words.view(np.uint8), count=self.size, bitorder="little"
        ).astype(bool).reshape(self.shape)
        dense.setflags(write=False)
        self._dense = dense
        self._cache: dict = {}

    @classmethod
    def from_array(cls, bits) -> "SparsityMask":
        bits = np.asarray(bits).astype(bool)
        flat = bits.reshape(-1)
        nwords = -(-flat.size // 64)
        padded = np.zeros(nwords * 64, dtype=bool)
        padded[: flat.size] = flat
        words = np.packbits(padded, bitorder="little").view("<u8")
        return cls(bits.shape, words)

    @classmethod
    def ones(cls, shape: Sequence[int]) -> "SparsityMask":
        return cls.from_array(np.ones(tuple(shape), dtype=bool))

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))

    @property
    def words(self) -> np.ndarray:
        return self._words

    @property
    def bits(self) -> np.ndarray:
        """Read-only boolean view with the owning weight's shape."""
        return self._dense

    def popcount(self) -> int:
        return int(np.count_nonzero(self._dense))

    @property
    def density(self) -> Fraction:
        return Fraction(self.popcount(), self.size) if self.size else Fraction(0)

    def array(self, dtype=np.float32) -> np.ndarray:
        dtype = np.dtype(dtype)
        arr = self._cache.get(dtype)
        if arr is None:
            arr = self._dense.astype(dtype)
            arr.setflags(write=False)
            self._cache[dtype] = arr
        return arr

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.asarray(self.shape, dtype="<i8").tobytes())
        h.update(self._words.tobytes())
        return h.hexdigest()

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, SparsityMask)
            and self.shape == other.shape
            and np.array_equal(self._words, other._words)
        )

    def __hash__(self) -> int:
        return hash(self.digest())

    def __repr__(self) -> str:
        return f"SparsityMask(shape={self.shape}, density={float(self.density):.4f})"


def density(mask: SparsityMask) -> float:
    """Fraction of non-zero elements."""
    return float(mask.density)


def intersection_density(m1: SparsityMask, m2: SparsityMask) -> float:
    """Fraction of elements non-zero in both masks."""
    if m1.shape != m2.shape:
        raise DimensionError(f"mask shapes differ: {m1.shape} vs {m2.shape}")
    if not m1.size:
        return 0.0
    return np.count_nonzero(m1.bits & m2.bits) / m1.size


def generate_mask_pair(
    shape: int | Sequence[int],
    c_clean: float,
    c_adv: float,
    c_shared: float,
    seed: int | np.random.Generator,
) -> tuple[SparsityMask, SparsityMask]:
    """Random clean/adversarial masks with exact support sizes.

    Support positions are drawn uniformly: one random permutation is split
    into the shared region, the clean-only region and the adversarial-only
    region, in that order.
    """
    shape = (int(shape),) if np.isscalar(shape) else tuple(int(s) for s in shape)
    n = int(np.prod(shape, dtype=np.int64))
    n_clean, n_adv, n_shared = target_counts(n, c_clean, c_adv, c_shared)
    rng = seed if isinstance(seed, np.random.Generator) else substream(seed, "mask")
    order = rng.permutation(n)
    clean = np.zeros(n, dtype=bool)
    adv = np.zeros(n, dtype=bool)
    shared = order[:n_shared]
    only_clean = order[n_shared:n_clean]
    only_adv = order[n_clean : n_clean + n_adv - n_shared]
    clean[shared] = True
    adv[shared] = True
    clean[only_clean] = True
    adv[only_adv] = True
    return SparsityMask.from_array(clean.reshape(shape)), SparsityMask.from_array(adv.reshape(shape))


def apply_mask(weights: Tensor, mask: SparsityMask) -> Tensor:
    """Elementwise ``weights * mask``; masked positions get zero gradient."""
    if tuple(weights.shape) != mask.shape:
        raise DimensionError(f"weights {weights.shape} vs mask {mask.shape}")
    return ops.mul(weights, mask.array(weights.dtype))


@dataclass(frozen=True)
class LayerPlan:
    c_clean: float = 1.0
    c_adv: float = 1.0
    c_shared: float = 1.0
    block_tag: str = "D"

    def __post_init__(self):
        if self.block_tag not in ("D", "S"):
            raise InvalidPlanError(f"block_tag must be 'D' or 'S', got {self.block_tag!r}")
        check_densities(self.c_clean, self.c_adv, self.c_shared)
        if self.block_tag == "D" and not (self.c_clean == self.c_adv == self.c_shared == 1.0):
            raise InvalidPlanError("dense-tagged layers must have all densities equal to 1.0")

    def density(self, path: str) -> float:
        return self.c_clean if path == "clean" else self.c_adv


DENSE = LayerPlan()


@dataclass
class MaskPlan:
    """Per-layer mask densities plus the generation seed.

    ``layers`` maps conv layer names to their :class:`LayerPlan`; names absent
    from the mapping are dense.
    """

    layers: dict[str, LayerPlan] = field(default_factory=dict)
    seed: int = 0

    def get(self, name: str) -> LayerPlan:
        return self.layers.get(name, DENSE)

    @classmethod
    def from_pattern(
        cls,
        layer_stages: Iterable[tuple[str, int | None]],
        pattern: str = "DDSS",
        c_clean: float = 0.5,
        c_adv: float = 0.5,
        c_shared: float = 0.25,
        seed: int = 0,
    ) -> "MaskPlan":
        """Build a plan from a stage pattern such as ``"DDSS"``.

        ``layer_stages`` yields ``(layer_name, stage_index)``; a stage index of
        ``None`` (the stem) is always dense.
        """
        pattern = pattern.replace(" ", "").upper()
        sparse = LayerPlan(c_clean, c_adv, c_shared, "S")
        layers = {}
        for name, stage in layer_stages:
            if stage is None:
                continue
            if stage >= len(pattern):
                raise InvalidPlanError(f"pattern {pattern!r} has no entry for stage {stage}")
            tag = pattern[stage]
            if tag not in "DS":
                raise InvalidPlanError(f"unknown block tag {tag!r} in pattern {pattern!r}")
            if tag == "S":
                layers[name] = sparse
        return cls(layers, seed)

    @classmethod
    def dense(cls, seed: int = 0) -> "MaskPlan":
        return cls({}, seed)

    def masks_for(self, name: str, shape: Sequence[int], index: int) -> tuple[SparsityMask, SparsityMask]:
        lp = self.get(name)
        if lp.block_tag == "D":
            return SparsityMask.ones(shape), SparsityMask.ones(shape)
        return generate_mask_pair(shape, lp.c_clean, lp.c_adv, lp.c_shared, substream(self.seed, "mask", index))

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "layers": {
                k: [v.c_clean, v.c_adv, v.c_shared, v.block_tag] for k, v in self.layers.items()
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MaskPlan":
        return cls({k: LayerPlan(*v) for k, v in d.get("layers", {}).items()}, int(d.get("seed", 0)))
