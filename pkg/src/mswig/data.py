"""Tabular datasets with declared column roles."""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

__all__ = ["DataError", "Roles", "Dataset", "read_csv", "write_csv", "write_text_atomic", "dumps_json"]

NA_VALUES = ["NA", ""]


class DataError(ValueError):
    """A dataset violates its declared roles."""


@dataclass(frozen=True)
class Roles:
    treatment: str
    selection: str | None = None
    outcome: str | None = None  # the proxy column, missing where selection == 0
    covariates: tuple[str, ...] = ()
    strata: tuple[str, ...] = ()
    heterogeneity: tuple[str, ...] = ()
    propensity: float | None = None  # known constant P(D=1) in randomized designs

    def __post_init__(self):
        for name in ("covariates", "strata", "heterogeneity"):
            object.__setattr__(self, name, tuple(getattr(self, name)))

    @classmethod
    def from_dict(cls, data: dict) -> "Roles":
        aliases = {"outcomeProxy": "outcome", "outcome_proxy": "outcome"}
        known = {"treatment", "selection", "outcome", "covariates", "strata", "heterogeneity", "propensity"}
        kwargs = {}
        for k, v in data.items():
            k = aliases.get(k, k)
            if k not in known:
                raise DataError(f"unknown role {k!r}")
            kwargs[k] = v
        if "treatment" not in kwargs:
            raise DataError("roles must name a treatment column")
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return {
            "treatment": self.treatment,
            "selection": self.selection,
            "outcome": self.outcome,
            "covariates": list(self.covariates),
            "strata": list(self.strata),
            "heterogeneity": list(self.heterogeneity),
            "propensity": self.propensity,
        }


@dataclass
class Dataset:
    """A validated frame plus roles.

    When no selection column is declared every row counts as selected.
    """

    frame: pd.DataFrame
    roles: Roles
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self):
        df, r = self.frame, self.roles
        cols = [r.treatment, r.selection, r.outcome, *r.covariates, *r.strata, *r.heterogeneity]
        absent = [c for c in cols if c is not None and c not in df.columns]
        if absent:
            raise DataError(f"declared columns missing from data: {absent}")
        for c in [r.treatment, *r.covariates, *r.strata, *r.heterogeneity]:
            if df[c].isna().any():
                raise DataError(f"column {c} has missing values")
        d = df[r.treatment]
        if not d.isin([0, 1]).all():
            raise DataError(f"treatment {r.treatment} must be binary 0/1")
        if r.selection is not None:
            s = df[r.selection]
            if s.isna().any() or not s.isin([0, 1]).all():
                raise DataError(f"selection {r.selection} must be binary 0/1 without missing values")
            if r.outcome is not None:
                y = df[r.outcome]
                bad_missing = int(((s == 1) & y.isna()).sum())
                bad_present = int(((s == 0) & y.notna()).sum())
                if bad_missing or bad_present:
                    raise DataError(
                        f"outcome {r.outcome} must be missing exactly where {r.selection}=0 "
                        f"({bad_missing} selected rows missing, {bad_present} unselected rows present)"
                    )
        elif r.outcome is not None and df[r.outcome].isna().any():
            raise DataError(f"outcome {r.outcome} has missing values but no selection column is declared")
        if r.propensity is not None and not 0 < r.propensity < 1:
            raise DataError("known propensity must lie strictly between 0 and 1")

    def __len__(self):
        return len(self.frame)

    @property
    def d(self) -> np.ndarray:
        return self.frame[self.roles.treatment].to_numpy(dtype=float)

    @property
    def s(self) -> np.ndarray:
        if self.roles.selection is None:
            return np.ones(len(self.frame))
        return self.frame[self.roles.selection].to_numpy(dtype=float)

    @property
    def y(self) -> np.ndarray:
        """Outcome with missing entries set to 0 (always multiplied by S downstream)."""
        if self.roles.outcome is None:
            raise DataError("no outcome column declared")
        return self.frame[self.roles.outcome].fillna(0.0).to_numpy(dtype=float)

    @property
    def x(self) -> np.ndarray:
        cols = list(self.roles.covariates)
        if not cols:
            return np.zeros((len(self.frame), 0))
        return self.frame[cols].to_numpy(dtype=float)

    def columns(self, names) -> np.ndarray:
        names = list(names)
        if not names:
            return np.zeros((len(self.frame), 0))
        return self.frame[names].to_numpy(dtype=float)


def read_csv(path, roles: Roles | dict | None = None):
    df = pd.read_csv(path, na_values=NA_VALUES, keep_default_na=False)
    if roles is None:
        return df
    if isinstance(roles, dict):
        roles = Roles.from_dict(roles)
    return Dataset(df, roles)


def write_text_atomic(path, text: str):
    """Write via a temp file in the target directory, then rename."""
    path = os.fspath(path)
    folder = os.path.dirname(os.path.abspath(path))
    os.makedirs(folder, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=folder, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_csv(path, frame: pd.DataFrame):
    write_text_atomic(path, frame.to_csv(index=False, na_rep="NA", float_format="%.17g", lineterminator="\n"))


def dumps_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False, default=_json_default) + "\n"


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o).__name__}")
