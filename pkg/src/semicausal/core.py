"""Datasets, finite discrete distributions and the expectation operators.

Functions of an observation ``Z = (L, A, Y)`` are plain vectorised callables
``f(L, A, Y) -> array`` where ``L`` is an ``(n, d)`` covariate matrix and
``A``, ``Y`` are length-``n`` vectors.  The same callable can therefore be
averaged over a sample (:func:`empirical_mean`) or integrated exactly against
a :class:`DiscreteDistribution` (:func:`exact_mean`).
"""

import csv
import json
import math
from dataclasses import dataclass

import numpy as np

from .exceptions import DomainError, EvaluationError, ParseError, PositivityError

DEFAULT_DELTA = 0.01
_RENORMALIZE_TOL = 1e-9


def _readonly(arr):
    arr = np.array(arr, dtype=float, copy=True)
    arr.setflags(write=False)
    return arr


def _as_matrix(covariates):
    arr = np.asarray(covariates, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise DomainError(f"covariates must be a 2-d array, got shape {arr.shape}")
    return arr


def evaluate(f, covariates, treatment, outcome):
    """Evaluate ``f`` row-wise and return a float vector of length ``n``."""
    n = len(treatment)
    values = np.asarray(f(covariates, treatment, outcome), dtype=float)
    if values.ndim == 0:
        values = np.full(n, float(values))
    if values.shape != (n,):
        raise EvaluationError(f"function returned shape {values.shape}, expected ({n},)")
    return values


@dataclass(frozen=True, eq=False)
class Dataset:
    """``n`` observations of covariates ``L``, binary treatment ``A`` and outcome ``Y``."""

    covariates: np.ndarray
    treatment: np.ndarray
    outcome: np.ndarray

    def __post_init__(self):
        L = _as_matrix(self.covariates)
        A = np.asarray(self.treatment, dtype=float).ravel()
        Y = np.asarray(self.outcome, dtype=float).ravel()
        n = L.shape[0]
        if n < 1:
            raise DomainError("a dataset needs at least one row")
        if A.shape[0] != n or Y.shape[0] != n:
            raise DomainError(
                f"row counts differ: covariates {n}, treatment {A.shape[0]}, outcome {Y.shape[0]}"
            )
        bad = np.flatnonzero((A != 0) & (A != 1))
        if bad.size:
            raise DomainError(f"treatment must be 0 or 1; row {bad[0]} has {A[bad[0]]!r}")
        if not np.all(np.isfinite(L)):
            raise DomainError("covariates contain non-finite values")
        if not np.all(np.isfinite(Y)):
            raise DomainError("outcomes contain non-finite values")
        object.__setattr__(self, "covariates", _readonly(L))
        object.__setattr__(self, "treatment", _readonly(A))
        object.__setattr__(self, "outcome", _readonly(Y))

    @property
    def n(self):
        return self.covariates.shape[0]

    @property
    def d(self):
        return self.covariates.shape[1]

    def __len__(self):
        return self.n

    def subset(self, index):
        index = np.asarray(index)
        return Dataset(self.covariates[index], self.treatment[index], self.outcome[index])

    def to_csv(self, path):
        """Write the dataset as CSV with columns ``l1..ld, a, y``."""
        header = [f"l{j + 1}" for j in range(self.d)] + ["a", "y"]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for row, a, y in zip(self.covariates, self.treatment, self.outcome):
                writer.writerow([repr(float(v)) for v in row] + [int(a), repr(float(y))])

    @classmethod
    def from_csv(cls, path):
        """Read a dataset written in the ``l1..ld, a, y`` CSV layout.

        Raises
        ------
        ParseError
            With the offending line number and column name.
        """
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            try:
                header = [h.strip() for h in next(reader)]
            except StopIteration:
                raise ParseError(f"{path}: empty file") from None
            if "a" not in header or "y" not in header:
                raise ParseError(f"{path}: line 1: header must contain columns 'a' and 'y'")
            lcols = [h for h in header if h not in ("a", "y")]
            expected = [f"l{j + 1}" for j in range(len(lcols))]
            if lcols != expected:
                raise ParseError(f"{path}: line 1: covariate columns must be {expected}, got {lcols}")
            pos = {h: i for i, h in enumerate(header)}
            L, A, Y = [], [], []
            for lineno, row in enumerate(reader, start=2):
                if not row or all(not c.strip() for c in row):
                    continue
                if len(row) != len(header):
                    raise ParseError(
                        f"{path}: line {lineno}: expected {len(header)} fields, got {len(row)}"
                    )
                values = {}
                for name in header:
                    raw = row[pos[name]].strip()
                    try:
                        v = float(raw)
                    except ValueError:
                        raise ParseError(f"{path}: line {lineno}: field '{name}' is not a number: {raw!r}") from None
                    if not math.isfinite(v):
                        raise ParseError(f"{path}: line {lineno}: field '{name}' is not finite")
                    values[name] = v
                if values["a"] not in (0.0, 1.0):
                    raise ParseError(f"{path}: line {lineno}: field 'a' must be 0 or 1")
                L.append([values[c] for c in lcols])
                A.append(values["a"])
                Y.append(values["y"])
        if not A:
            raise ParseError(f"{path}: no data rows")
        return cls(np.array(L, dtype=float).reshape(len(A), len(lcols)), A, Y)


class DiscreteDistribution:
    """Finite distribution over atoms ``(l, a, y)`` with exact masses.

    Parameters
    ----------
    covariates : array_like, shape (k, d)
    treatment : array_like, shape (k,)
        Entries in {0, 1}.
    outcome : array_like, shape (k,)
    mass : array_like, shape (k,)
        Nonnegative; renormalised when the sum is within 1e-9 of one.
    delta : float or None
        Positivity level: every covariate level with positive mass must have
        ``P(A=1 | l)`` in ``[delta, 1 - delta]``.  ``None`` skips the check.
    """

    def __init__(self, covariates, treatment, outcome, mass, delta=DEFAULT_DELTA):
        L = _as_matrix(covariates)
        A = np.asarray(treatment, dtype=float).ravel()
        Y = np.asarray(outcome, dtype=float).ravel()
        p = np.asarray(mass, dtype=float).ravel()
        k = L.shape[0]
        if k < 1 or not (A.shape[0] == Y.shape[0] == p.shape[0] == k):
            raise DomainError("support arrays must be nonempty and of equal length")
        if np.any((A != 0) & (A != 1)):
            raise DomainError("treatment values must be 0 or 1")
        if not (np.all(np.isfinite(L)) and np.all(np.isfinite(Y)) and np.all(np.isfinite(p))):
            raise DomainError("support and masses must be finite")
        if np.any(p < 0):
            raise DomainError(f"negative mass at atom {int(np.flatnonzero(p < 0)[0])}")
        total = math.fsum(p)
        if abs(total - 1.0) > _RENORMALIZE_TOL:
            raise DomainError(f"masses sum to {total!r}, not 1")
        p = p / total
        atoms = np.column_stack([L, A, Y])
        if np.unique(atoms, axis=0).shape[0] != k:
            raise DomainError("atoms must be unique")
        if delta is not None and not 0 < delta < 0.5:
            raise DomainError(f"delta must lie in (0, 0.5), got {delta}")

        self.covariates = _readonly(L)
        self.treatment = _readonly(A)
        self.outcome = _readonly(Y)
        self.mass = _readonly(p)
        self.delta = delta

        levels, level_index = np.unique(L, axis=0, return_inverse=True)
        self.levels = _readonly(levels)
        self.level_index = np.asarray(level_index).ravel()
        self._lookup = {tuple(row): i for i, row in enumerate(levels.tolist())}
        m = levels.shape[0]
        self.level_mass = _readonly(np.bincount(self.level_index, weights=p, minlength=m))
        arm_mass = np.zeros((m, 2))
        arm_sum = np.zeros((m, 2))
        np.add.at(arm_mass, (self.level_index, A.astype(int)), p)
        np.add.at(arm_sum, (self.level_index, A.astype(int)), p * Y)
        self.arm_mass = _readonly(arm_mass)
        with np.errstate(invalid="ignore", divide="ignore"):
            self.level_propensity = _readonly(arm_mass[:, 1] / self.level_mass)
            self.level_outcome_mean = _readonly(arm_sum / arm_mass)
        if delta is not None:
            self.check_positivity(delta)

    def __len__(self):
        return self.mass.shape[0]

    def __repr__(self):
        return f"DiscreteDistribution(atoms={len(self)}, levels={self.levels.shape[0]}, delta={self.delta})"

    @property
    def d(self):
        return self.covariates.shape[1]

    def check_positivity(self, delta):
        live = self.level_mass > 0
        prop = self.level_propensity[live]
        bad = np.flatnonzero((prop < delta) | (prop > 1 - delta))
        if bad.size:
            level = self.levels[live][bad[0]]
            raise PositivityError(
                f"P(A=1 | l={level.tolist()}) = {prop[bad[0]]!r} outside [{delta}, {1 - delta}]"
            )

    def level_of(self, covariates):
        """Map covariate rows to level indices by exact equality."""
        L = _as_matrix(covariates)
        uniq, inv = np.unique(L, axis=0, return_inverse=True)
        idx = np.empty(uniq.shape[0], dtype=int)
        for i, row in enumerate(uniq.tolist()):
            try:
                idx[i] = self._lookup[tuple(row)]
            except KeyError:
                raise EvaluationError(f"covariate level {row} is not in the support") from None
        return idx[np.asarray(inv).ravel()]

    def propensity(self, covariates):
        """True propensity score ``P(A=1 | L=l)`` at each row."""
        return self.level_propensity[self.level_of(covariates)]

    def outcome_regression(self, covariates, a):
        """True outcome regression ``E(Y | L=l, A=a)`` at each row."""
        idx = self.level_of(covariates)
        a = np.broadcast_to(np.asarray(a, dtype=int), idx.shape)
        return self.level_outcome_mean[idx, a]

    def with_mass(self, mass, delta="inherit"):
        """Same support, new masses."""
        delta = self.delta if delta == "inherit" else delta
        return DiscreteDistribution(self.covariates, self.treatment, self.outcome, mass, delta=delta)

    def to_dict(self):
        atoms = [
            {"l": [float(v) for v in l], "a": int(a), "y": float(y), "p": float(p)}
            for l, a, y, p in zip(self.covariates, self.treatment, self.outcome, self.mass)
        ]
        out = {"atoms": atoms}
        if self.delta is not None:
            out["delta"] = self.delta
        return out

    @classmethod
    def from_dict(cls, spec, source="<dict>"):
        try:
            atoms = spec["atoms"]
        except (KeyError, TypeError):
            raise ParseError(f"{source}: missing field 'atoms'") from None
        if not isinstance(atoms, list) or not atoms:
            raise ParseError(f"{source}: field 'atoms' must be a nonempty list")
        L, A, Y, P = [], [], [], []
        for i, atom in enumerate(atoms):
            for key in ("l", "a", "y", "p"):
                if not isinstance(atom, dict) or key not in atom:
                    raise ParseError(f"{source}: atoms[{i}] missing field '{key}'")
            l = atom["l"]
            if not isinstance(l, list):
                l = [l]
            try:
                L.append([float(v) for v in l])
                A.append(float(atom["a"]))
                Y.append(float(atom["y"]))
                P.append(float(atom["p"]))
            except (TypeError, ValueError):
                raise ParseError(f"{source}: atoms[{i}] has a non-numeric field") from None
        if len({len(row) for row in L}) != 1:
            raise ParseError(f"{source}: atoms have covariate vectors of different lengths")
        delta = spec.get("delta", DEFAULT_DELTA)
        return cls(np.array(L), A, Y, P, delta=delta)

    @classmethod
    def from_json(cls, path):
        with open(path, encoding="utf-8") as fh:
            try:
                spec = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}: line {exc.lineno}: {exc.msg}") from None
        return cls.from_dict(spec, source=str(path))


def empirical_mean(f, data):
    """Sample average ``n^-1 sum_i f(Z_i)``.

    Raises
    ------
    EvaluationError
        If ``f`` is non-finite at some row; the first such row is named.
    """
    values = evaluate(f, data.covariates, data.treatment, data.outcome)
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        raise EvaluationError(f"non-finite value {values[bad[0]]!r} at row {bad[0]}")
    return math.fsum(values) / values.shape[0]


def exact_mean(f, dist):
    """Exact expectation ``sum_atoms mass * f(atom)``.

    Atoms of zero mass are allowed to evaluate to anything.
    """
    values = evaluate(f, dist.covariates, dist.treatment, dist.outcome)
    live = dist.mass > 0
    bad = np.flatnonzero(live & ~np.isfinite(values))
    if bad.size:
        raise EvaluationError(f"non-finite value {values[bad[0]]!r} at atom {bad[0]}")
    return math.fsum(dist.mass[live] * values[live])


def true_ate(dist):
    """Identified average treatment effect of a discrete distribution.

    ``sum_l P(l) [E(Y | l, 1) - E(Y | l, 0)]`` with every conditional mean
    obtained by exact summation over the atoms.
    """
    live = dist.level_mass > 0
    empty = live & ((dist.arm_mass[:, 0] <= 0) | (dist.arm_mass[:, 1] <= 0))
    if np.any(empty):
        level = dist.levels[np.flatnonzero(empty)[0]]
        raise PositivityError(f"covariate level {level.tolist()} has zero mass on one treatment arm")
    contrast = dist.level_outcome_mean[live, 1] - dist.level_outcome_mean[live, 0]
    return math.fsum(dist.level_mass[live] * contrast)


def sample(dist, n, seed):
    """Draw ``n`` i.i.d. observations from ``dist``; deterministic given ``seed``."""
    if int(n) != n or n < 1:
        raise DomainError(f"sample size must be a positive integer, got {n!r}")
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(dist), size=int(n), p=dist.mass)
    return Dataset(dist.covariates[idx], dist.treatment[idx], dist.outcome[idx])
