"""Fixed equiangular-tight-frame prototypes with an activation mask.

The bank holds d-dimensional unit prototypes whose pairwise cosines are all
-1/(K-1). Columns start inactive and are bound to classes in first-appearance
order as tasks arrive; the matrix itself never changes. Virtual-class
prototypes are separate learnable vectors keyed by class label.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

BANK_FORMAT = "etf-bank/1"


class EtfConstructionError(ValueError):
    pass


class CapacityError(RuntimeError):
    pass


def etf_matrix(d: int, K: int, seed: int) -> np.ndarray:
    """Build the d x K prototype matrix sqrt(K/(K-1)) * U (I - 11^T/K).

    U is the Q factor of a seeded Gaussian matrix, sign-normalized so the
    factorization (hence the bank) is unique per seed. Requires 1 < K <= d
    for column-orthonormal U.
    """
    if K <= 1:
        raise EtfConstructionError(f"K={K}: an equiangular frame needs at least 2 prototypes")
    if K > d:
        raise EtfConstructionError(f"K={K} exceeds feature dimension d={d}; orthonormal U needs K <= d")
    rng = np.random.default_rng(seed)
    gauss = rng.standard_normal((d, K))
    q, r = np.linalg.qr(gauss)
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    u = q * signs
    center = np.eye(K) - np.full((K, K), 1.0 / K)
    m = np.sqrt(K / (K - 1)) * (u @ center)
    m.setflags(write=False)
    return m


def check_geometry(matrix: np.ndarray, atol: float = 1e-8) -> list[str]:
    """Return human-readable violations of the frame identity, empty if clean."""
    problems = []
    K = matrix.shape[1]
    norms = np.linalg.norm(matrix, axis=0)
    for k in np.flatnonzero(np.abs(norms - 1.0) > atol):
        problems.append(f"column {int(k)}: norm {norms[k]:.12f} != 1")
    gram = matrix.T @ matrix
    target = -1.0 / (K - 1)
    off = gram - np.eye(K) * (1.0 - target) - target
    bad = np.argwhere(np.abs(off) > atol)
    for i, j in bad[:8]:
        if i != j:
            problems.append(f"columns ({int(i)},{int(j)}): cosine {gram[i, j]:.12f} != {target:.12f}")
    return problems


@dataclass
class PrototypeBank:
    """Fixed prototypes, their activation state, and virtual-class vectors.

    ``assignment`` maps class label -> column index, append-only and
    injective; it covers exactly the active columns. ``virtual`` maps class
    label -> learnable d-vector (stored raw; consumers normalize on read).
    """

    matrix: np.ndarray
    d: int
    K: int
    seed: int
    active: np.ndarray
    assignment: dict[int, int] = field(default_factory=dict)
    virtual: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def active_count(self) -> int:
        return int(self.active.sum())

    def active_labels(self) -> list[int]:
        return sorted(self.assignment, key=self.assignment.__getitem__)

    def column_of(self, label: int) -> int:
        if label not in self.assignment:
            raise KeyError(f"class {label} is not bound to any prototype")
        return self.assignment[label]

    def checksum(self) -> str:
        return hashlib.sha256(self.matrix.tobytes()).hexdigest()


def build_bank(d: int, K: int, seed: int) -> PrototypeBank:
    m = etf_matrix(d, K, seed)
    return PrototypeBank(matrix=m, d=d, K=K, seed=seed, active=np.zeros(K, dtype=bool))


def activate(bank: PrototypeBank, labels) -> dict[int, int]:
    """Bind each new label to the next unused column; returns the new bindings."""
    labels = list(labels)
    for lbl in labels:
        if lbl in bank.assignment:
            raise ValueError(f"class {lbl} is already active")
    free = bank.K - len(bank.assignment)
    if len(labels) > free:
        raise CapacityError(
            f"cannot activate {len(labels)} classes: only {free} of {bank.K} prototypes remain"
        )
    new = {}
    for lbl in labels:
        col = len(bank.assignment)
        bank.assignment[lbl] = col
        bank.active[col] = True
        new[lbl] = col
    return new


def init_virtual_prototypes(bank: PrototypeBank, labels, seed: int) -> None:
    """Give each listed class a fresh unit vector drawn from the seeded rng.

    Virtual prototypes persist once created (they survive across epochs and
    tasks), so re-initialization is an error.
    """
    rng = np.random.default_rng(seed)
    for lbl in labels:
        if lbl not in bank.assignment:
            raise KeyError(f"class {lbl} is inactive; activate it before adding a virtual prototype")
        if lbl in bank.virtual:
            raise ValueError(f"class {lbl} already has a virtual prototype")
        v = rng.standard_normal(bank.d)
        bank.virtual[lbl] = v / np.linalg.norm(v)


def save_bank(bank: PrototypeBank, path) -> None:
    payload = {
        "format": BANK_FORMAT,
        "d": bank.d,
        "K": bank.K,
        "seed": bank.seed,
        "active": bank.active.tolist(),
        "assignment": {str(k): v for k, v in bank.assignment.items()},
        "virtual": {str(k): v.tolist() for k, v in bank.virtual.items()},
    }
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_bank(path) -> PrototypeBank:
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("format") != BANK_FORMAT:
        raise ValueError(f"unsupported bank format {payload.get('format')!r}")
    bank = build_bank(payload["d"], payload["K"], payload["seed"])
    bank.active = np.asarray(payload["active"], dtype=bool)
    bank.assignment = {int(k): int(v) for k, v in payload["assignment"].items()}
    bank.virtual = {int(k): np.asarray(v, dtype=np.float64) for k, v in payload["virtual"].items()}
    return bank
