"""Comparison attacks: box-constrained gradient optimization and averaging.

The optimization baseline models abs(B) = C * abs(A) + residual and drives
the squared residual down by projected subgradient descent with step
halving.  It inherits the known defect that abs does not commute with the
mix, so signed private data leaves an irreducible residual.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, DimensionError
from .instahide import shared_label_class
from .restoration import reweight


@dataclass
class CarliniProblem:
    """abs-preprocessed encryptions (rows of abs_b), mixing coefficients and
    the image geometry needed to fold rows back into pictures."""

    abs_b: np.ndarray
    coeffs: np.ndarray
    height: int
    width: int

    def __post_init__(self):
        self.abs_b = np.asarray(self.abs_b, dtype=np.float64)
        self.coeffs = np.asarray(self.coeffs, dtype=np.float64)
        if self.abs_b.ndim != 2 or self.coeffs.ndim != 2:
            raise DimensionError("abs_b and coeffs must be matrices")
        if self.abs_b.shape[0] != self.coeffs.shape[0]:
            raise DimensionError("abs_b and coeffs disagree on the encryption count")
        if self.abs_b.shape[1] != 3 * self.height * self.width:
            raise DimensionError("abs_b row length must be 3*H*W")
        if np.any(self.coeffs < 0) or np.any(self.abs_b < 0):
            raise DataError("coefficients and abs_b must be nonnegative")


@dataclass
class CoefficientSource:
    """How the mixing matrix is obtained: ground truth or label read-off."""

    mode: str = "oracle"

    def __post_init__(self):
        if self.mode not in ("oracle", "label_inferred"):
            raise DataError(f"unknown coefficient mode '{self.mode}'")


def build_carlini_problem(encryptions, clusters, source=None):
    """Assemble the joint problem over the union of the given clusters.

    Column j corresponds to cluster j's target image.  In oracle mode the
    row of an encryption carries its true lambda1 at its own column and
    lambda2 at the partner's column when the partner is another cluster
    target; in label mode the two label entries are matched against the
    clusters' shared classes and unmatched mass is dropped (absorbed by the
    residual, like the public images always are).
    """
    source = source or CoefficientSource()
    rows = sorted({m for cl in clusters for m in cl.member_ids})
    row_of = {m: r for r, m in enumerate(rows)}
    h, w = encryptions[rows[0]].image.shape[1:]
    abs_b = np.stack([np.abs(encryptions[m].image).reshape(-1) for m in rows])
    coeffs = np.zeros((len(rows), len(clusters)))
    if source.mode == "oracle":
        col_of_source = {}
        for ci, cl in enumerate(clusters):
            orc = encryptions[cl.member_ids[0]].oracle
            if orc is None:
                raise DataError("oracle coefficient mode needs oracle blocks")
            col_of_source[orc.target.source_id] = ci
        for ci, cl in enumerate(clusters):
            for m in cl.member_ids:
                orc = encryptions[m].oracle
                coeffs[row_of[m], ci] = orc.lambdas[0]
                pcol = col_of_source.get(orc.partner.source_id)
                if pcol is not None:
                    coeffs[row_of[m], pcol] = orc.lambdas[1]
    else:
        cluster_class = [
            shared_label_class([encryptions[m].label for m in cl.member_ids]) for cl in clusters
        ]
        col_of_class = {}
        for ci, cls in enumerate(cluster_class):
            col_of_class.setdefault(cls, ci)
        for ci, cl in enumerate(clusters):
            for m in cl.member_ids:
                label = encryptions[m].label
                for cls in np.flatnonzero(label):
                    col = col_of_class.get(int(cls))
                    if col is not None:
                        coeffs[row_of[m], col] = label[cls]
    return CarliniProblem(abs_b=abs_b, coeffs=coeffs, height=h, width=w)


def carlini_attack(problem, iterations=300, step_size=0.05):
    """Minimise ||abs_b - C * abs(A)||^2 over A in [-1, 1] by projected
    subgradient descent; the step is halved until the objective decreases,
    so the recorded objective is monotone non-increasing.

    Returns (restored images, objective history).  The restorations are
    abs(A): the objective only identifies absolute pixel values, and sign
    recovery would need the separate coloring phase this attack lacks.
    """
    c = problem.coeffs
    b = problem.abs_b
    n_img = c.shape[1]
    d = b.shape[1]
    # zero is a stationary point of abs (subgradient 0), so start mid-box
    a = np.full((n_img, d), 0.5)

    def objective(mat):
        r = b - c @ np.abs(mat)
        return float(np.sum(r * r))

    history = [objective(a)]
    if not np.isfinite(history[0]):
        raise DataError("non-finite objective at initialisation")
    for _ in range(iterations):
        residual = b - c @ np.abs(a)
        grad = -2.0 * (c.T @ residual) * np.sign(a)
        step = step_size
        improved = False
        for _ in range(40):
            cand = np.clip(a - step * grad, -1.0, 1.0)
            val = objective(cand)
            if val <= history[-1]:
                a, improved = cand, True
                history.append(val)
                break
            step *= 0.5
        if not improved:
            break
        if not np.isfinite(history[-1]):
            raise DataError("objective became non-finite")
    images = [np.abs(a[i]).reshape(3, problem.height, problem.width) for i in range(n_img)]
    return images, np.asarray(history)


def averaging_attack(abs_images, lambdas):
    """Mean of the re-weighted abs members, clamped into the display range."""
    if not abs_images:
        raise DataError("averaging_attack on an empty cluster")
    weighted = reweight(abs_images, lambdas)
    stacked = np.sort(np.stack(weighted, axis=0), axis=0)  # order-free sum
    mean = stacked.sum(axis=0) / len(weighted)
    return np.clip(mean, 0.0, 1.0)
