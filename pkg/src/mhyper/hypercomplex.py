"""Complex, quaternion and biquaternion arithmetic over coefficient blocks.

A biquaternion point of width ``d`` is four complex coefficients (basis
``1, i, j, k``), each a pair of real length-``d`` blocks.  The flat layout is
``[a_re; a_im; b_re; b_im; c_re; c_im; d_re; d_im]`` (length ``8d``), which is
also how entity and relation embeddings are stored.  Every function works on
tensors with arbitrary leading batch dimensions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor

BASIS = ("1", "i", "j", "k")


class DimensionError(ValueError):
    pass


def _check_same(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape[-1] != b.shape[-1]:
        raise DimensionError(f"{what}: block lengths differ ({a.shape[-1]} vs {b.shape[-1]})")


@dataclass(frozen=True)
class ComplexBlock:
    re: Tensor
    im: Tensor

    def __post_init__(self):
        if self.re.shape != self.im.shape:
            raise DimensionError(f"re/im shapes differ: {tuple(self.re.shape)} vs {tuple(self.im.shape)}")
        if self.re.ndim == 0 or self.re.shape[-1] < 1:
            raise DimensionError("complex block needs length d >= 1")

    @property
    def d(self) -> int:
        return self.re.shape[-1]

    def __add__(self, other: ComplexBlock) -> ComplexBlock:
        _check_same(self.re, other.re, "complex add")
        return ComplexBlock(self.re + other.re, self.im + other.im)

    def __sub__(self, other: ComplexBlock) -> ComplexBlock:
        _check_same(self.re, other.re, "complex sub")
        return ComplexBlock(self.re - other.re, self.im - other.im)

    def __neg__(self) -> ComplexBlock:
        return ComplexBlock(-self.re, -self.im)

    def scale(self, s: float) -> ComplexBlock:
        return ComplexBlock(s * self.re, s * self.im)

    def flat(self) -> Tensor:
        return torch.cat([self.re, self.im], dim=-1)

    @classmethod
    def from_flat(cls, x: Tensor) -> ComplexBlock:
        if x.shape[-1] % 2:
            raise DimensionError(f"complex flat vector must have even length, got {x.shape[-1]}")
        d = x.shape[-1] // 2
        return cls(x[..., :d], x[..., d:])


def complex_mul(a: ComplexBlock, b: ComplexBlock) -> ComplexBlock:
    """Element-wise product in the complex field."""
    _check_same(a.re, b.re, "complex_mul")
    return ComplexBlock(a.re * b.re - a.im * b.im, a.re * b.im + a.im * b.re)


def complex_dot(a: ComplexBlock, b: ComplexBlock) -> Tensor:
    """Real inner product of the flattened blocks (sum over the last axis)."""
    _check_same(a.re, b.re, "complex_dot")
    return (a.re * b.re).sum(-1) + (a.im * b.im).sum(-1)


@dataclass(frozen=True)
class Biquat8d:
    coeff: tuple[ComplexBlock, ComplexBlock, ComplexBlock, ComplexBlock]

    def __post_init__(self):
        if len(self.coeff) != 4:
            raise DimensionError(f"biquaternion needs 4 coefficients, got {len(self.coeff)}")
        d = self.coeff[0].d
        for c in self.coeff[1:]:
            if c.d != d:
                raise DimensionError(f"coefficient blocks disagree on d ({c.d} vs {d})")

    @property
    def d(self) -> int:
        return self.coeff[0].d

    def __getitem__(self, i: int) -> ComplexBlock:
        return self.coeff[i]

    def flat(self) -> Tensor:
        return torch.cat([t for c in self.coeff for t in (c.re, c.im)], dim=-1)

    @classmethod
    def from_flat(cls, x: Tensor) -> Biquat8d:
        n = x.shape[-1]
        if n == 0 or n % 8:
            raise DimensionError(f"flat biquaternion length must be a positive multiple of 8, got {n}")
        d = n // 8
        blocks = [x[..., p * d:(p + 1) * d] for p in range(8)]
        return cls(tuple(ComplexBlock(blocks[2 * c], blocks[2 * c + 1]) for c in range(4)))

    @classmethod
    def from_real(cls, a: Tensor, b: Tensor, c: Tensor, d: Tensor) -> Biquat8d:
        """Quaternion with zero imaginary complex parts."""
        return cls(tuple(ComplexBlock(x, torch.zeros_like(x)) for x in (a, b, c, d)))

    @classmethod
    def zeros(cls, d: int, *batch: int, dtype=torch.float64) -> Biquat8d:
        return cls.from_flat(torch.zeros(*batch, 8 * d, dtype=dtype))

    @classmethod
    def one(cls, d: int, *batch: int, dtype=torch.float64) -> Biquat8d:
        return cls.from_flat(identity_flat(d, *batch, dtype=dtype))

    def __add__(self, other: Biquat8d) -> Biquat8d:
        return biquat_add(self, other)

    def __neg__(self) -> Biquat8d:
        return Biquat8d(tuple(-c for c in self.coeff))


def identity_flat(d: int, *batch: int, dtype=torch.float64) -> Tensor:
    """Flat multiplicative identity: real part of the ``1`` coefficient set to one."""
    x = torch.zeros(*batch, 8 * d, dtype=dtype)
    x[..., :d] = 1.0
    return x


def _quaternion_table() -> dict[tuple[int, int], tuple[int, int]]:
    # (left basis, right basis) -> (sign, result basis); 0 = 1, 1 = i, 2 = j, 3 = k
    table = {}
    for b in range(4):
        table[(0, b)] = (1, b)
        table[(b, 0)] = (1, b)
    for b in (1, 2, 3):
        table[(b, b)] = (-1, 0)
    for x, y, z in ((1, 2, 3), (2, 3, 1), (3, 1, 2)):  # ij = k, jk = i, ki = j
        table[(x, y)] = (1, z)
        table[(y, x)] = (-1, z)
    return table


def structure_constants() -> np.ndarray:
    """H[i, k, m]: sign with which ``u_i * u_k`` contributes to basis ``u_m``."""
    H = np.zeros((4, 4, 4), dtype=np.int8)
    for (i, k), (sign, m) in _quaternion_table().items():
        H[i, k, m] = sign
    return H


STRUCTURE_CONSTANTS = structure_constants()
STRUCTURE_CONSTANTS.setflags(write=False)


def hamilton_product(q1: Biquat8d, q2: Biquat8d, table: np.ndarray | None = None) -> Biquat8d:
    """Biquaternion Hamilton product driven by the structure-constant table.

    ``table`` defaults to the quaternion constants; passing another table is
    only meant for mutation tests.
    """
    if q1.d != q2.d:
        raise DimensionError(f"hamilton_product: d differs ({q1.d} vs {q2.d})")
    H = STRUCTURE_CONSTANTS if table is None else np.asarray(table)
    out = []
    for m in range(4):
        acc = None
        for i in range(4):
            for k in range(4):
                s = int(H[i, k, m])
                if s == 0:
                    continue
                term = complex_mul(q1[i], q2[k])
                if s != 1:
                    term = term.scale(s)
                acc = term if acc is None else acc + term
        if acc is None:
            z = torch.zeros_like(q1[0].re)
            acc = ComplexBlock(z, z.clone())
        out.append(acc)
    return Biquat8d(tuple(out))


def hamilton_product_unrolled(q1: Biquat8d, q2: Biquat8d) -> Biquat8d:
    """Hand-expanded Hamilton product; kept for differential testing."""
    if q1.d != q2.d:
        raise DimensionError(f"hamilton_product: d differs ({q1.d} vs {q2.d})")
    a1, b1, c1, d1 = q1.coeff
    a2, b2, c2, d2 = q2.coeff
    m = complex_mul
    return Biquat8d((
        m(a1, a2) - m(b1, b2) - m(c1, c2) - m(d1, d2),
        m(a1, b2) + m(b1, a2) + m(c1, d2) - m(d1, c2),
        m(a1, c2) - m(b1, d2) + m(c1, a2) + m(d1, b2),
        m(a1, d2) + m(b1, c2) - m(c1, b2) + m(d1, a2),
    ))


def biquat_add(q1: Biquat8d, q2: Biquat8d) -> Biquat8d:
    if q1.d != q2.d:
        raise DimensionError(f"biquat_add: d differs ({q1.d} vs {q2.d})")
    return Biquat8d(tuple(a + b for a, b in zip(q1.coeff, q2.coeff)))


def biquat_dot(q1: Biquat8d, q2: Biquat8d) -> Tensor:
    """Inner product of the flat ``8d`` vectors."""
    if q1.d != q2.d:
        raise DimensionError(f"biquat_dot: d differs ({q1.d} vs {q2.d})")
    return sum(complex_dot(a, b) for a, b in zip(q1.coeff, q2.coeff))


def hamilton_flat(x: Tensor, y: Tensor, table: np.ndarray | None = None) -> Tensor:
    return hamilton_product(Biquat8d.from_flat(x), Biquat8d.from_flat(y), table).flat()


def expansion_terms(Qh: Biquat8d, QrT: Biquat8d, QrR: Biquat8d, Qt: Biquat8d) -> dict[tuple[str, str], Tensor]:
    """The sixteen (head basis, tail basis) terms of the translated-rotated score.

    Written out term by term, independent of the structure-constant table.
    Keys use basis names ``1, i, j, k`` (head coefficient, tail coefficient).
    """
    for q in (QrT, QrR, Qt):
        if q.d != Qh.d:
            raise DimensionError(f"score_expansion_oracle: d differs ({q.d} vs {Qh.d})")
    A, B, C, D = (Qh[n] + QrT[n] for n in range(4))
    R1, R2, R3, R4 = QrR.coeff
    t1, ti, tj, tk = Qt.coeff

    def term(x, r, t):
        return complex_dot(complex_mul(x, r), t)

    return {
        # onto the 1 coefficient of the tail
        ("1", "1"): term(A, R1, t1),
        ("i", "1"): -term(B, R2, t1),
        ("j", "1"): -term(C, R3, t1),
        ("k", "1"): -term(D, R4, t1),
        # onto i
        ("1", "i"): term(A, R2, ti),
        ("i", "i"): term(B, R1, ti),
        ("j", "i"): term(C, R4, ti),
        ("k", "i"): -term(D, R3, ti),
        # onto j
        ("1", "j"): term(A, R3, tj),
        ("i", "j"): -term(B, R4, tj),
        ("j", "j"): term(C, R1, tj),
        ("k", "j"): term(D, R2, tj),
        # onto k
        ("1", "k"): term(A, R4, tk),
        ("i", "k"): term(B, R3, tk),
        ("j", "k"): -term(C, R2, tk),
        ("k", "k"): term(D, R1, tk),
    }


def score_expansion_oracle(Qh: Biquat8d, QrT: Biquat8d, QrR: Biquat8d, Qt: Biquat8d) -> Tensor:
    """Score as the sum of all pairwise head/tail modality terms (test oracle)."""
    return sum(expansion_terms(Qh, QrT, QrR, Qt).values())
