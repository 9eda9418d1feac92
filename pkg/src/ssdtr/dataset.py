"""Trajectory records, stage-wise feature construction, CSV ingestion and folds.

A two-stage trajectory is ``(O1, A1, W1, O2, A2, W2, Y2, Y3)``. Rows with both
outcomes observed form the labeled partition and rows with neither form the
unlabeled partition. Feature blocks are described declaratively by a
:class:`BasisConfig` whose terms are column names or ``*``-joined products of
column names, e.g. ``"o1_1*a1"``.
"""

from __future__ import annotations

import csv
import json
import math
import re
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

BLOCKS = ("h10", "h11", "h20", "h21")
# columns each block may reference
_ALLOWED = {
    "h10": ("o1",),
    "h11": ("o1",),
    "h20": ("o1", "a1", "o2"),
    "h21": ("o1", "a1", "o2"),
}
_BINARY = ("a1", "a2")
_COL_RE = re.compile(r"^(o1|w1|o2|w2)_(\d+)$")


class SchemaError(ValueError):
    """Raised when data or a basis configuration does not match the schema."""


class RowError(SchemaError):
    """Raised for a malformed CSV row; carries the 1-based file line number."""

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class Schema:
    """Number of columns in each vector-valued variable group."""

    p_o1: int
    p_w1: int
    p_o2: int
    p_w2: int

    def names(self, group: str) -> tuple[str, ...]:
        p = getattr(self, f"p_{group}")
        return tuple(f"{group}_{j + 1}" for j in range(p))

    @property
    def imputer_columns(self) -> tuple[str, ...]:
        return (
            self.names("o1") + ("a1",) + self.names("w1")
            + self.names("o2") + ("a2",) + self.names("w2")
        )


def canonical_term(term: str) -> str:
    """Normalise a product term so that equal functions get equal names.

    Factors are sorted, ``1`` factors are dropped and repeated binary
    treatment factors collapse (``a1*a1 == a1``).
    """
    factors = [f.strip() for f in term.split("*") if f.strip()]
    if not factors:
        raise SchemaError(f"empty term {term!r}")
    kept = [f for f in factors if f != "1"]
    if not kept:
        return "1"
    out = []
    for f in sorted(kept):
        if f in _BINARY and f in out:
            continue
        out.append(f)
    return "*".join(out)


def unique_terms(*blocks: Sequence[str]) -> tuple[list[str], list[tuple[int, int]]]:
    """Union of several named blocks with duplicate functions removed.

    Returns the kept canonical names and, for each, the ``(block, column)``
    position of its first occurrence.
    """
    names: list[str] = []
    where: list[tuple[int, int]] = []
    seen = set()
    for b, block in enumerate(blocks):
        for j, t in enumerate(block):
            c = canonical_term(t)
            if c not in seen:
                seen.add(c)
                names.append(c)
                where.append((b, j))
    return names, where


@dataclass(frozen=True)
class BasisConfig:
    """Declarative description of the four feature blocks.

    ``log1p`` and ``center`` list raw columns to transform before the blocks
    are assembled. Centering offsets are filled in by :meth:`resolve` from a
    pooled sample.
    """

    h10: tuple[str, ...]
    h11: tuple[str, ...]
    h20: tuple[str, ...]
    h21: tuple[str, ...]
    intercept: Mapping[str, bool] = field(
        default_factory=lambda: {b: True for b in BLOCKS}
    )
    log1p: tuple[str, ...] = ()
    center: tuple[str, ...] = ()
    offsets: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        for b in BLOCKS:
            object.__setattr__(self, b, tuple(getattr(self, b)))
        object.__setattr__(self, "log1p", tuple(self.log1p))
        object.__setattr__(self, "center", tuple(self.center))
        icpt = {b: True for b in BLOCKS}
        icpt.update(dict(self.intercept))
        object.__setattr__(self, "intercept", icpt)
        object.__setattr__(self, "offsets", dict(self.offsets))

    def terms(self, block: str) -> tuple[str, ...]:
        body = getattr(self, block)
        return (("1",) if self.intercept[block] else ()) + body

    def names(self) -> dict[str, list[str]]:
        """Column names of h10, h11, h20, h21, x1 and x2."""
        out = {b: [canonical_term(t) for t in self.terms(b)] for b in BLOCKS}
        out["x1"] = out["h10"] + [canonical_term(f"a1*{t}") for t in out["h11"]]
        out["x2"] = out["h20"] + [canonical_term(f"a2*{t}") for t in out["h21"]]
        return out

    def validate(self, schema: Schema) -> None:
        known = set(schema.imputer_columns)
        for b in BLOCKS:
            if not self.terms(b):
                raise SchemaError(f"block {b} is empty")
            for t in getattr(self, b):
                for f in t.split("*"):
                    f = f.strip()
                    if f == "1":
                        continue
                    if f not in known:
                        raise SchemaError(f"block {b}: unknown column {f!r}")
                    group = f.split("_")[0]
                    if group not in _ALLOWED[b]:
                        raise SchemaError(f"block {b} may not use {f!r}")
        for c in self.log1p + self.center:
            if c not in known:
                raise SchemaError(f"transform of unknown column {c!r}")

    def resolve(self, columns: Mapping[str, np.ndarray]) -> "BasisConfig":
        """Return a copy with centering offsets computed from ``columns``."""
        offsets = dict(self.offsets)
        for c in self.center:
            x = np.asarray(columns[c], dtype=float)
            if c in self.log1p:
                x = np.log1p(x)
            offsets[c] = float(np.mean(x))
        return replace(self, offsets=offsets)

    def to_json(self) -> dict:
        return {
            "h10": list(self.h10), "h11": list(self.h11),
            "h20": list(self.h20), "h21": list(self.h21),
            "intercept": dict(self.intercept),
            "log1p": list(self.log1p), "center": list(self.center),
        }

    @classmethod
    def from_json(cls, doc: Mapping) -> "BasisConfig":
        missing = [b for b in BLOCKS if b not in doc]
        if missing:
            raise SchemaError(f"basis config lacks blocks {missing}")
        icpt = doc.get("intercept", True)
        if isinstance(icpt, bool):
            icpt = {b: icpt for b in BLOCKS}
        return cls(
            h10=tuple(doc["h10"]), h11=tuple(doc["h11"]),
            h20=tuple(doc["h20"]), h21=tuple(doc["h21"]),
            intercept=icpt,
            log1p=tuple(doc.get("log1p", ())),
            center=tuple(doc.get("center", ())),
        )

    @classmethod
    def load(cls, path) -> "BasisConfig":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


@dataclass(frozen=True)
class ObservationRecord:
    o1: np.ndarray
    a1: int
    w1: np.ndarray
    o2: np.ndarray
    a2: int
    w2: np.ndarray
    y2: float | None = None
    y3: float | None = None

    def __post_init__(self):
        for name in ("o1", "w1", "o2", "w2"):
            object.__setattr__(
                self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=float))
            )
        if self.a1 not in (0, 1) or self.a2 not in (0, 1):
            raise SchemaError("treatments must be 0 or 1")
        if (self.y2 is None) != (self.y3 is None):
            raise SchemaError("y2 and y3 must be both present or both absent")

    @property
    def labeled(self) -> bool:
        return self.y2 is not None

    def columns(self) -> dict[str, np.ndarray]:
        cols = {"a1": np.array([float(self.a1)]), "a2": np.array([float(self.a2)])}
        for g in ("o1", "w1", "o2", "w2"):
            v = getattr(self, g)
            for j in range(v.size):
                cols[f"{g}_{j + 1}"] = v[j:j + 1]
        return cols


@dataclass(frozen=True)
class StageFeatures:
    h10: np.ndarray
    h11: np.ndarray
    h20: np.ndarray
    h21: np.ndarray
    x1: np.ndarray
    x2: np.ndarray


def _transform(columns: Mapping[str, np.ndarray], config: BasisConfig) -> dict:
    cols = {k: np.asarray(v, dtype=float) for k, v in columns.items()}
    for c in config.log1p:
        if np.any(cols[c] <= -1):
            raise SchemaError(f"log1p of {c} needs values > -1")
        cols[c] = np.log1p(cols[c])
    for c in config.center:
        if c not in config.offsets:
            raise SchemaError(f"centering offset for {c} not resolved")
        cols[c] = cols[c] - config.offsets[c]
    return cols


def _eval_block(cols: Mapping[str, np.ndarray], terms: Sequence[str], m: int) -> np.ndarray:
    out = np.empty((m, len(terms)))
    for j, t in enumerate(terms):
        v = np.ones(m)
        for f in t.split("*"):
            f = f.strip()
            if f != "1":
                v = v * cols[f]
        out[:, j] = v
    return out


def assemble(columns: Mapping[str, np.ndarray], config: BasisConfig) -> dict[str, np.ndarray]:
    """Vectorised feature assembly for ``m`` rows of raw columns."""
    cols = _transform(columns, config)
    m = len(cols["a1"])
    blocks = {b: _eval_block(cols, config.terms(b), m) for b in BLOCKS}
    a1 = np.asarray(columns["a1"], dtype=float)[:, None]
    a2 = np.asarray(columns["a2"], dtype=float)[:, None]
    blocks["x1"] = np.hstack([blocks["h10"], a1 * blocks["h11"]])
    blocks["x2"] = np.hstack([blocks["h20"], a2 * blocks["h21"]])
    return blocks


def build_stage_features(
    record: ObservationRecord, config: BasisConfig, schema: Schema | None = None
) -> StageFeatures:
    """Feature blocks of a single record."""
    if schema is not None:
        sizes = (record.o1.size, record.w1.size, record.o2.size, record.w2.size)
        if sizes != (schema.p_o1, schema.p_w1, schema.p_o2, schema.p_w2):
            raise SchemaError(f"record sizes {sizes} do not match schema {schema}")
    try:
        b = assemble(record.columns(), config)
    except KeyError as e:
        raise SchemaError(f"record lacks column {e.args[0]!r}") from None
    return StageFeatures(**{k: b[k][0] for k in ("h10", "h11", "h20", "h21", "x1", "x2")})


@dataclass(frozen=True)
class Sample:
    """Column arrays and feature matrices for one partition of a cohort."""

    o1: np.ndarray
    a1: np.ndarray
    w1: np.ndarray
    o2: np.ndarray
    a2: np.ndarray
    w2: np.ndarray
    y2: np.ndarray | None
    y3: np.ndarray | None
    h10: np.ndarray
    h11: np.ndarray
    h20: np.ndarray
    h21: np.ndarray
    x1: np.ndarray
    x2: np.ndarray

    @property
    def size(self) -> int:
        return self.a1.shape[0]

    @property
    def labeled(self) -> bool:
        return self.y2 is not None

    @property
    def u(self) -> np.ndarray:
        """Imputer features (O1, A1, W1, O2, A2, W2)."""
        return np.hstack(
            [self.o1, self.a1[:, None], self.w1, self.o2, self.a2[:, None], self.w2]
        )

    @property
    def x2check(self) -> np.ndarray:
        if self.y2 is None:
            raise SchemaError("x2check needs observed y2")
        return np.hstack([self.y2[:, None], self.x2])

    def subset(self, idx) -> "Sample":
        idx = np.asarray(idx)
        kw = {}
        for k in self.__dataclass_fields__:
            v = getattr(self, k)
            kw[k] = None if v is None else v[idx]
        return Sample(**kw)

    def records(self) -> Iterator[ObservationRecord]:
        for i in range(self.size):
            yield ObservationRecord(
                o1=self.o1[i], a1=int(self.a1[i]), w1=self.w1[i],
                o2=self.o2[i], a2=int(self.a2[i]), w2=self.w2[i],
                y2=None if self.y2 is None else float(self.y2[i]),
                y3=None if self.y3 is None else float(self.y3[i]),
            )


def _columns_of(o1, a1, w1, o2, a2, w2) -> dict[str, np.ndarray]:
    cols = {"a1": a1, "a2": a2}
    for g, arr in (("o1", o1), ("w1", w1), ("o2", o2), ("w2", w2)):
        for j in range(arr.shape[1]):
            cols[f"{g}_{j + 1}"] = arr[:, j]
    return cols


def make_sample(o1, a1, w1, o2, a2, w2, y2, y3, config: BasisConfig) -> Sample:
    m = len(a1)

    def mat(x):
        x = np.asarray(x, dtype=float)
        if x.ndim == 2 and x.shape[0] == m:
            return x
        return x.reshape(m, -1) if x.size else np.zeros((m, 0))

    o1, w1, o2, w2 = mat(o1), mat(w1), mat(o2), mat(w2)
    a1 = np.asarray(a1, dtype=float)
    a2 = np.asarray(a2, dtype=float)
    for name, a in (("a1", a1), ("a2", a2)):
        if not np.all((a == 0) | (a == 1)):
            raise SchemaError(f"{name} must be binary")
    if (y2 is None) != (y3 is None):
        raise SchemaError("y2 and y3 must be both present or both absent")
    blocks = assemble(_columns_of(o1, a1, w1, o2, a2, w2), config)
    return Sample(
        o1=o1, a1=a1, w1=w1, o2=o2, a2=a2, w2=w2,
        y2=None if y2 is None else np.asarray(y2, dtype=float),
        y3=None if y3 is None else np.asarray(y3, dtype=float),
        **blocks,
    )


@dataclass(frozen=True)
class Cohort:
    """Labeled and unlabeled samples sharing one schema and basis."""

    labeled: Sample
    unlabeled: Sample
    schema: Schema
    basis: BasisConfig

    def __post_init__(self):
        if self.labeled.size < 1:
            raise SchemaError("cohort needs at least one labeled row")
        if not self.labeled.labeled or self.unlabeled.labeled:
            raise SchemaError("partition labels are inconsistent")

    @property
    def n(self) -> int:
        return self.labeled.size

    @property
    def N(self) -> int:
        return self.unlabeled.size

    @property
    def names(self) -> dict[str, list[str]]:
        return self.basis.names()

    def with_unlabeled(self, sample: Sample) -> "Cohort":
        return replace(self, unlabeled=sample)

    def labeled_as_unlabeled(self) -> "Cohort":
        """Copy whose unlabeled partition is the labeled rows with outcomes hidden."""
        return self.with_unlabeled(replace(self.labeled, y2=None, y3=None))


def make_cohort(raw_labeled: Mapping, raw_unlabeled: Mapping | None,
                schema: Schema, basis: BasisConfig) -> Cohort:
    """Build a cohort from raw arrays keyed o1, a1, w1, o2, a2, w2 (and y2, y3).

    Centering statistics are computed on the pooled sample.
    """
    basis.validate(schema)
    parts = [raw_labeled] + ([raw_unlabeled] if raw_unlabeled is not None else [])
    pooled = {}
    for p in parts:
        cols = _columns_of(*(np.asarray(p[g], dtype=float).reshape(len(p["a1"]), -1)
                             if g in ("o1", "w1", "o2", "w2") else np.asarray(p[g], dtype=float)
                             for g in ("o1", "a1", "w1", "o2", "a2", "w2")))
        for k, v in cols.items():
            pooled.setdefault(k, []).append(v)
    pooled = {k: np.concatenate(v) for k, v in pooled.items()}
    basis = basis.resolve(pooled)

    def build(p, labeled):
        return make_sample(
            p["o1"], p["a1"], p["w1"], p["o2"], p["a2"], p["w2"],
            p["y2"] if labeled else None, p["y3"] if labeled else None, basis,
        )

    lab = build(raw_labeled, True)
    if raw_unlabeled is None:
        empty = {g: np.zeros((0, getattr(schema, f"p_{g}"))) for g in ("o1", "w1", "o2", "w2")}
        empty.update(a1=np.zeros(0), a2=np.zeros(0))
        unl = build(empty, False)
    else:
        unl = build(raw_unlabeled, False)
    if 0 < unl.size < lab.size:
        warnings.warn(f"unlabeled size N={unl.size} is smaller than n={lab.size}")
    return Cohort(labeled=lab, unlabeled=unl, schema=schema, basis=basis)


def schema_from_header(header: Sequence[str]) -> Schema:
    counts = {g: 0 for g in ("o1", "w1", "o2", "w2")}
    seen = set()
    for h in header:
        h = h.strip()
        if h in seen:
            raise SchemaError(f"duplicate column {h!r}")
        seen.add(h)
        m = _COL_RE.match(h)
        if m:
            counts[m.group(1)] = max(counts[m.group(1)], int(m.group(2)))
        elif h not in ("a1", "a2", "y2", "y3"):
            raise SchemaError(f"unrecognised column {h!r}")
    for g, p in counts.items():
        for j in range(1, p + 1):
            if f"{g}_{j}" not in seen:
                raise SchemaError(f"missing column {g}_{j}")
    for req in ("a1", "a2", "y2", "y3"):
        if req not in seen:
            raise SchemaError(f"missing column {req}")
    if counts["o1"] == 0:
        raise SchemaError("at least one o1_* column is required")
    return Schema(counts["o1"], counts["w1"], counts["o2"], counts["w2"])


def _parse_float(text: str, line: int, col: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise RowError(line, f"column {col}: not a number: {text!r}") from None
    if not math.isfinite(v):
        raise RowError(line, f"column {col}: non-finite value")
    return v


def read_csv_rows(path, schema: Schema | None = None) -> tuple[Schema, dict | None, dict | None]:
    """Parse a cohort CSV into raw labeled and unlabeled arrays (either may be ``None``)."""
    with open(Path(path), newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        found = schema_from_header(header)
        if schema is not None and schema != found:
            raise SchemaError(f"header schema {found} differs from expected {schema}")
        schema = found
        pos = {h: i for i, h in enumerate(header)}
        groups = {g: schema.names(g) for g in ("o1", "w1", "o2", "w2")}
        rows = {True: [], False: []}
        for line, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise RowError(line, f"expected {len(header)} fields, got {len(row)}")
            cell = {h: row[i].strip() for h, i in pos.items()}
            rec = {}
            for g, names in groups.items():
                rec[g] = [_parse_float(cell[c], line, c) for c in names]
            for a in ("a1", "a2"):
                if cell[a] not in ("0", "1", "0.0", "1.0"):
                    raise RowError(line, f"column {a}: treatment must be 0 or 1, got {cell[a]!r}")
                rec[a] = float(cell[a])
            has2, has3 = cell["y2"] != "", cell["y3"] != ""
            if has2 != has3:
                raise RowError(line, "exactly one of y2/y3 is present")
            if has2:
                rec["y2"] = _parse_float(cell["y2"], line, "y2")
                rec["y3"] = _parse_float(cell["y3"], line, "y3")
            rows[has2].append(rec)

    def stack(recs, labeled):
        out = {}
        for g in ("o1", "w1", "o2", "w2"):
            p = getattr(schema, f"p_{g}")
            out[g] = np.array([r[g] for r in recs], dtype=float).reshape(len(recs), p)
        for k in ("a1", "a2") + (("y2", "y3") if labeled else ()):
            out[k] = np.array([r[k] for r in recs], dtype=float)
        return out

    lab = stack(rows[True], True) if rows[True] else None
    unl = stack(rows[False], False) if rows[False] else None
    return schema, lab, unl


def concat_raw(parts: Sequence[Mapping]) -> dict:
    parts = [p for p in parts if p is not None]
    return {k: np.concatenate([np.asarray(p[k]) for p in parts]) for k in parts[0]}


def load_csv(path, basis: BasisConfig, schema: Schema | None = None,
             unlabeled_path=None) -> Cohort:
    """Read a cohort CSV; empty outcome cells mark unlabeled rows.

    Rows of ``unlabeled_path``, if given, join the unlabeled partition and any
    outcomes they carry are ignored.
    """
    schema, lab, unl = read_csv_rows(path, schema)
    if lab is None:
        raise SchemaError(f"{path}: no labeled rows")
    if unlabeled_path is not None:
        _, l2, u2 = read_csv_rows(unlabeled_path, schema)
        extra = [{k: v for k, v in p.items() if k not in ("y2", "y3")}
                 for p in (l2, u2) if p is not None]
        unl = concat_raw(([unl] if unl is not None else []) + extra)
    return make_cohort(lab, unl, schema, basis)


def write_csv(path, cohort: Cohort) -> None:
    """Write a cohort in the CSV layout read by :func:`load_csv`."""
    s = cohort.schema
    header = (list(s.names("o1")) + ["a1"] + list(s.names("w1")) + list(s.names("o2"))
              + ["a2"] + list(s.names("w2")) + ["y2", "y3"])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for smp in (cohort.labeled, cohort.unlabeled):
            for i in range(smp.size):
                vals = (list(smp.o1[i]) + [int(smp.a1[i])] + list(smp.w1[i]) + list(smp.o2[i])
                        + [int(smp.a2[i])] + list(smp.w2[i]))
                vals = [repr(float(v)) if not isinstance(v, int) else v for v in vals]
                if smp.labeled:
                    vals += [repr(float(smp.y2[i])), repr(float(smp.y3[i]))]
                else:
                    vals += ["", ""]
                w.writerow(vals)


@dataclass(frozen=True)
class FoldAssignment:
    k_folds: int
    assignment: np.ndarray
    seed: int | None

    def indices(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == k)

    def complement(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.assignment != k)


def partition_folds(n: int, k: int, seed=None) -> FoldAssignment:
    """Random balanced assignment of ``n`` indices to ``k`` folds."""
    if not isinstance(k, (int, np.integer)) or k < 2 or k > n:
        raise ValueError(f"need 2 <= k <= n, got k={k}, n={n}")
    rng = np.random.default_rng(seed)
    base = np.arange(n) % k
    assignment = base[rng.permutation(n)]
    return FoldAssignment(k_folds=int(k), assignment=assignment, seed=seed)


def continuous_basis() -> BasisConfig:
    """Feature blocks of the continuous simulation setting."""
    return BasisConfig(
        h10=("o1_1",), h11=("o1_1",),
        h20=("o1_1", "a1", "o1_1*a1", "o2_1"), h21=("a1", "o2_1"),
    )


def ehr_basis() -> BasisConfig:
    """Feature blocks of the EHR-like simulation setting."""
    o1 = tuple(f"o1_{j}" for j in range(1, 7))
    return BasisConfig(
        h10=o1, h11=o1[1:],
        h20=o1 + ("a1", "o2_1", "o2_2"),
        h21=o1[:4] + ("a1", "o2_1", "o2_2"),
    )


def default_basis(schema: Schema) -> BasisConfig:
    """Main-effects blocks: baseline covariates at stage 1, plus ``a1`` and ``o2`` at stage 2."""
    o1, o2 = schema.names("o1"), schema.names("o2")
    return BasisConfig(h10=o1, h11=o1, h20=o1 + ("a1",) + o2, h21=o1 + ("a1",) + o2)
