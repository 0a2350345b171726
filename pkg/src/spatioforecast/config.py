"""Declarative experiment configuration (INI sections, plain key/value).

The config hash covers every semantically meaningful field: anything that
changes what gets computed. Output location and runtime knobs (jobs) stay
outside the hash. ``SPATIO_OUT`` overrides the output directory.
"""
from __future__ import annotations

import configparser
import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path

from .model import VARIANTS

# window/horizon pairs the pipeline accepts: either the non-seasonal group
# (12 in) or the seasonal group (14 in, multiples of a week)
VALID_HORIZONS = {12: (3, 6, 12, 24, 36), 14: (2, 7, 14)}


class ConfigError(ValueError):
    """Bad or inconsistent experiment configuration."""


@dataclass(frozen=True)
class ExperimentConfig:
    region_table: Path
    channel_paths: dict[str, Path]          # channel letter -> csv path
    channels: str                           # e.g. "IMH", canonical order, includes I
    T: int
    horizons: tuple[int, ...]
    variants: tuple[str, ...]
    seeds: tuple[int, ...]
    output_dir: Path
    # model
    D: int = 8
    heads: int = 4
    L: int = 2
    K: int = 2
    # training
    peak_lr: float = 0.001
    warmup_steps: int = 20000
    max_steps: int = 20000
    batch_size: int = 32
    eval_every: int = 100
    patience: int | None = None
    loss_kind: str = "MSE"
    # adjacency
    geo_sigma: float | None = None          # None = std of pairwise distances
    geo_kappa: float | None = None          # None = mean pairwise distance
    set_diag: bool = True
    undirected: bool = True
    truncate: bool = True
    threshold: float | None = None          # None = 1/N
    # folds
    n_folds: int = 5
    final_frac: float = 0.1
    folds: tuple = (1, 2, 3, 4, 5, "final")
    # analysis
    lockdown_windows: Path | None = None
    pre_days: int = 24
    post_days: int = 24

    def validate(self) -> None:
        if "I" not in self.channels:
            raise ConfigError("channels must include incidence (I)")
        for c in self.channels:
            if c not in self.channel_paths:
                raise ConfigError(f"no csv path configured for channel {c}")
            if not self.channel_paths[c].exists():
                raise ConfigError(f"channel {c} csv not found: {self.channel_paths[c]}")
        if not self.region_table.exists():
            raise ConfigError(f"region table not found: {self.region_table}")
        if self.T not in VALID_HORIZONS:
            raise ConfigError(f"window size T={self.T}; supported: {sorted(VALID_HORIZONS)}")
        bad = [f for f in self.horizons if f not in VALID_HORIZONS[self.T]]
        if bad:
            raise ConfigError(f"horizons {bad} invalid for T={self.T}; allowed: {VALID_HORIZONS[self.T]}")
        for v in self.variants:
            if v not in VARIANTS:
                raise ConfigError(f"unknown variant {v!r}")
        if self.lockdown_windows is not None and not self.lockdown_windows.exists():
            raise ConfigError(f"lockdown windows csv not found: {self.lockdown_windows}")

    def hash(self) -> str:
        """Digest of the semantically meaningful fields."""
        skip = {"output_dir"}
        items = []
        for name in sorted(self.__dataclass_fields__):
            if name in skip:
                continue
            value = getattr(self, name)
            if isinstance(value, dict):
                value = sorted((k, str(v)) for k, v in value.items())
            items.append(f"{name}={value}")
        return hashlib.sha256("\n".join(items).encode("utf-8")).hexdigest()[:16]


def _get(parser: configparser.ConfigParser, section: str, key: str, default=None):
    if parser.has_option(section, key):
        return parser.get(section, key)
    return default


def _get_bool(parser, section, key, default):
    raw = _get(parser, section, key)
    if raw is None:
        return default
    return raw.strip().lower() in ("1", "true", "yes", "on")


def _int_list(raw: str) -> tuple[int, ...]:
    return tuple(int(x) for x in raw.replace(";", ",").split(",") if x.strip())


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    parser.read(path, encoding="utf-8")
    base = path.parent

    def respath(raw: str) -> Path:
        p = Path(raw)
        return p if p.is_absolute() else base / p

    try:
        channels = (_get(parser, "data", "channels", "I") or "I").replace(",", "").strip()
        channel_paths = {}
        for c in channels:
            raw = _get(parser, "data", f"channel_{c}")
            if raw is None:
                raise ConfigError(f"[data] channel_{c} path missing")
            channel_paths[c] = respath(raw)
        region_raw = _get(parser, "data", "region_table")
        if region_raw is None:
            raise ConfigError("[data] region_table missing")
        out_raw = os.environ.get("SPATIO_OUT") or _get(parser, "output", "dir", "out")
        patience_raw = _get(parser, "training", "patience")
        thr_raw = _get(parser, "adjacency", "threshold")
        sigma_raw = _get(parser, "adjacency", "sigma")
        kappa_raw = _get(parser, "adjacency", "kappa")
        lock_raw = _get(parser, "analysis", "lockdown_windows")
        folds_raw = _get(parser, "folds", "use", "1,2,3,4,5,final")
        folds = tuple("final" if tok.strip() == "final" else int(tok)
                      for tok in folds_raw.split(",") if tok.strip())
        cfg = ExperimentConfig(
            region_table=respath(region_raw),
            channel_paths=channel_paths,
            channels=channels,
            T=int(_get(parser, "windows", "T", "12")),
            horizons=_int_list(_get(parser, "windows", "horizons", "3")),
            variants=tuple(v.strip() for v in _get(parser, "model", "variants", "Trans").split(",") if v.strip()),
            seeds=_int_list(_get(parser, "training", "seeds", "0")),
            output_dir=Path(out_raw),
            D=int(_get(parser, "model", "D", "8")),
            heads=int(_get(parser, "model", "heads", "4")),
            L=int(_get(parser, "model", "L", "2")),
            K=int(_get(parser, "model", "K", "2")),
            peak_lr=float(_get(parser, "training", "peak_lr", "0.001")),
            warmup_steps=int(_get(parser, "training", "warmup_steps", "20000")),
            max_steps=int(_get(parser, "training", "max_steps", "20000")),
            batch_size=int(_get(parser, "training", "batch_size", "32")),
            eval_every=int(_get(parser, "training", "eval_every", "100")),
            patience=None if patience_raw is None else int(patience_raw),
            loss_kind=_get(parser, "training", "loss", "MSE"),
            geo_sigma=None if sigma_raw in (None, "auto") else float(sigma_raw),
            geo_kappa=None if kappa_raw in (None, "auto") else float(kappa_raw),
            set_diag=_get_bool(parser, "adjacency", "set_diag", True),
            undirected=_get_bool(parser, "adjacency", "undirected", True),
            truncate=_get_bool(parser, "adjacency", "truncate", True),
            threshold=None if thr_raw in (None, "auto") else float(thr_raw),
            n_folds=int(_get(parser, "folds", "K", "5")),
            final_frac=float(_get(parser, "folds", "final_frac", "0.1")),
            folds=folds,
            lockdown_windows=None if lock_raw is None else respath(lock_raw),
            pre_days=int(_get(parser, "analysis", "pre_days", "24")),
            post_days=int(_get(parser, "analysis", "post_days", "24")),
        )
    except ConfigError:
        raise
    except Exception as exc:  # malformed numbers etc. are config errors too
        raise ConfigError(f"{path}: {exc}") from exc
    return cfg
