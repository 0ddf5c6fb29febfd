"""Triangle descriptors over key instances and their hash keys."""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .instances import Instance, KeyInstanceSet


@dataclass(frozen=True)
class DescriptorConfig:
    side_min: float = 2.0
    side_max: float = 120.0
    resolution: float = 0.2
    degenerate_eps: float = 0.01

    def __post_init__(self):
        if not 0 < self.side_min < self.side_max:
            raise ValueError("need 0 < side_min < side_max")
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")
        if self.degenerate_eps < 0:
            raise ValueError("degenerate_eps must be non-negative")


@dataclass(frozen=True)
class Descriptor:
    """One triangle. Vertices are ordered so that I1-I2 is the shortest side,
    I2-I3 the middle one and I1-I3 the longest."""

    vertices: tuple[Instance, Instance, Instance]
    sides: tuple[float, float, float]
    centroid: tuple[float, float, float]
    frame: int
    vertex_index: tuple[int, int, int] = (0, 1, 2)

    @property
    def labels(self) -> tuple[int, int, int]:
        return tuple(v.label for v in self.vertices)

    @property
    def sizes(self) -> tuple[int, int, int]:
        return tuple(v.size for v in self.vertices)


def _dist(u: np.ndarray, v: np.ndarray) -> float:
    return float(np.sqrt(np.sum((u - v) ** 2)))


# vertex orders (a, b, c) -> (I1, I2, I3), lexicographic in selection order
_PERMS = np.array(list(itertools.permutations(range(3))), dtype=np.int64)


def canonicalize_triangle(
    a: Instance, b: Instance, c: Instance, cfg: DescriptorConfig | None = None,
    frame: int = 0, order: tuple[int, int, int] = (0, 1, 2),
) -> Descriptor | None:
    """Relabel three instances into canonical vertex order, or ``None`` when rejected.

    ``order`` gives the selection-order index of each input and breaks ties
    between equal sides: among all valid labellings the one whose index triple
    is lexicographically smallest wins.
    """
    cfg = cfg or DescriptorConfig()
    inst = (a, b, c)
    if len(set(order)) < 3 or a == b or b == c or a == c:
        return None
    pos = [np.asarray(i.centroid, dtype=np.float64) for i in inst]
    best = None
    for p in itertools.permutations(range(3)):
        i1, i2, i3 = p
        l12 = _dist(pos[i1], pos[i2])
        l23 = _dist(pos[i2], pos[i3])
        l13 = _dist(pos[i1], pos[i3])
        if not (l12 <= l23 <= l13):
            continue
        key = tuple(order[j] for j in p)
        if best is None or key < best[0]:
            best = (key, p, (l12, l23, l13))
    key, p, sides = best
    l12, l23, l13 = sides
    if l12 < cfg.side_min or l13 > cfg.side_max or l12 + l23 - l13 < cfg.degenerate_eps:
        return None
    q = (pos[p[0]] + pos[p[1]] + pos[p[2]]) / 3.0
    return Descriptor(
        vertices=tuple(inst[j] for j in p),
        sides=sides,
        centroid=tuple(float(v) for v in q),
        frame=frame,
        vertex_index=key,
    )


class DescriptorArray:
    """A column-oriented batch of descriptors.

    Columns: ``sides`` (n, 3), ``labels`` (n, 3), ``sizes`` (n, 3),
    ``vertex_index`` (n, 3) selection-order indices into the frame's key set,
    ``vertices`` (n, 3, 3) vertex centroids and ``frame`` (n,). Indexing with an
    integer yields a :class:`Descriptor`; with a slice/array, a sub-batch.
    """

    __slots__ = ("sides", "labels", "sizes", "vertex_index", "vertices", "frame", "first_index")

    def __init__(self, sides, labels, sizes, vertex_index, vertices, frame, first_index=None):
        self.sides = np.asarray(sides, dtype=np.float64).reshape(-1, 3)
        n = len(self.sides)
        self.labels = np.asarray(labels, dtype=np.int8).reshape(n, 3)
        self.sizes = np.asarray(sizes, dtype=np.int64).reshape(n, 3)
        self.vertex_index = np.asarray(vertex_index, dtype=np.int64).reshape(n, 3)
        self.vertices = np.asarray(vertices, dtype=np.float64).reshape(n, 3, 3)
        self.frame = np.broadcast_to(np.asarray(frame, dtype=np.int64), (n,)).copy()
        if first_index is None:
            first_index = np.zeros((n, 3), dtype=np.int64)
        self.first_index = np.asarray(first_index, dtype=np.int64).reshape(n, 3)

    @classmethod
    def empty(cls) -> "DescriptorArray":
        return cls(np.empty((0, 3)), np.empty((0, 3)), np.empty((0, 3)), np.empty((0, 3)), np.empty((0, 3, 3)), np.empty(0))

    @classmethod
    def from_descriptors(cls, descs) -> "DescriptorArray":
        descs = list(descs)
        if not descs:
            return cls.empty()
        return cls(
            [d.sides for d in descs],
            [d.labels for d in descs],
            [d.sizes for d in descs],
            [d.vertex_index for d in descs],
            [[v.centroid for v in d.vertices] for d in descs],
            [d.frame for d in descs],
            [[v.first_index for v in d.vertices] for d in descs],
        )

    @classmethod
    def concatenate(cls, parts) -> "DescriptorArray":
        parts = list(parts)
        if not parts:
            return cls.empty()
        return cls(*(np.concatenate([getattr(p, f) for p in parts]) for f in cls.__slots__))

    def __len__(self) -> int:
        return len(self.sides)

    @property
    def centroids(self) -> np.ndarray:
        return self.vertices.mean(axis=1) if len(self) else np.empty((0, 3))

    def __getitem__(self, item):
        if isinstance(item, (int, np.integer)):
            i = int(item)
            verts = tuple(
                Instance(tuple(float(v) for v in self.vertices[i, j]), int(self.labels[i, j]),
                         int(self.sizes[i, j]), int(self.first_index[i, j]))
                for j in range(3)
            )
            q = self.vertices[i].sum(axis=0) / 3.0
            return Descriptor(
                vertices=verts,
                sides=tuple(float(s) for s in self.sides[i]),
                centroid=tuple(float(v) for v in q),
                frame=int(self.frame[i]),
                vertex_index=tuple(int(v) for v in self.vertex_index[i]),
            )
        return DescriptorArray(*(getattr(self, f)[item] for f in self.__slots__))

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]


@lru_cache(maxsize=64)
def _triples(n: int) -> np.ndarray:
    if n < 3:
        return np.empty((0, 3), dtype=np.int64)
    t = np.array(list(itertools.combinations(range(n), 3)), dtype=np.int64)
    t.setflags(write=False)
    return t


def build_descriptors(key_set: KeyInstanceSet, cfg: DescriptorConfig | None = None) -> DescriptorArray:
    """All accepted triangles over the key set, in lexicographic triple order."""
    cfg = cfg or DescriptorConfig()
    n = len(key_set)
    tri = _triples(n)
    if len(tri) == 0:
        return DescriptorArray.empty()
    cen = key_set.centroids
    pos = cen[tri]  # (m, 3 inputs, 3)
    # candidate labellings; tri rows are ascending so _PERMS order is lexicographic in selection index
    p1, p2, p3 = _PERMS[:, 0], _PERMS[:, 1], _PERMS[:, 2]
    d = lambda u, v: np.sqrt(np.sum((pos[:, u] - pos[:, v]) ** 2, axis=-1))  # noqa: E731
    l12, l23, l13 = d(p1, p2), d(p2, p3), d(p1, p3)  # (m, 6)
    valid = (l12 <= l23) & (l23 <= l13)
    choice = np.argmax(valid, axis=1)
    rows = np.arange(len(tri))
    sides = np.stack([l12[rows, choice], l23[rows, choice], l13[rows, choice]], axis=1)
    keep = (
        (sides[:, 0] >= cfg.side_min)
        & (sides[:, 2] <= cfg.side_max)
        & (sides[:, 0] + sides[:, 1] - sides[:, 2] >= cfg.degenerate_eps)
    )
    rows, choice, sides = rows[keep], choice[keep], sides[keep]
    vidx = tri[rows[:, None], _PERMS[choice]]
    first = np.array([i.first_index for i in key_set.instances], dtype=np.int64)
    return DescriptorArray(
        sides=sides,
        labels=key_set.labels[vidx],
        sizes=key_set.sizes[vidx],
        vertex_index=vidx,
        vertices=cen[vidx],
        frame=key_set.frame_id,
        first_index=first[vidx],
    )


def hash_key(d, resolution: float) -> tuple[int, int, int]:
    """Floor of each sorted side over the quantization step."""
    sides = d.sides if isinstance(d, Descriptor) else d
    return tuple(int(np.floor(s / resolution)) for s in sides)


def hash_keys(sides: np.ndarray, resolution: float) -> np.ndarray:
    return np.floor(np.asarray(sides) / resolution).astype(np.int64)
