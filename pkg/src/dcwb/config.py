"""Run configuration and the default learner set."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .basis import BaseLearnerSpec
from .errors import InputError
from .host import HostSettings


@dataclass
class LearnerDefaults:
    """Settings for the automatically generated learner set.

    Every numeric feature gets a shared P-spline and a site-specific twin,
    every categorical feature a shared ridge-penalized dummy learner and a
    site-specific twin, and the site column a random intercept.
    """

    df: float = 2.2
    df_random_intercept: float = 3.0
    n_basis: int = 10
    degree: int = 3
    diff_order: int = 2
    site_effects: bool = True
    random_intercept: bool = True


@dataclass
class FitConfig:
    loss: str = "binomial"
    learning_rate: float = 0.1
    max_iters: int = 1000
    patience: int | None = 5
    validation_fraction: float = 0.2
    seed: int = 0
    stratify: bool | None = None
    privacy_level: int = 5
    df_definition: str = "trace"
    ridge_jitter: float = 0.0
    audit: bool = False
    # data description for CSV inputs
    schema: dict = field(default_factory=dict)
    response: str = "y"
    site_column: str | None = "site"
    features: list | None = None
    # explicit learner list (BaseLearnerSpec dicts); generated when empty
    learners: list = field(default_factory=list)
    defaults: LearnerDefaults = field(default_factory=LearnerDefaults)

    def __post_init__(self):
        if isinstance(self.defaults, dict):
            self.defaults = LearnerDefaults(**self.defaults)
        if not 0.0 < self.learning_rate <= 1.0:
            raise InputError(f"learning_rate must lie in (0, 1], got {self.learning_rate}")
        if self.max_iters < 1:
            raise InputError(f"max_iters must be >= 1, got {self.max_iters}")
        if self.patience is not None and self.patience < 1:
            raise InputError("patience must be >= 1 or null")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise InputError("validation_fraction must lie in [0, 1)")
        if self.patience is not None and self.validation_fraction == 0.0 and not self.audit:
            raise InputError("early stopping needs validation_fraction > 0")
        if self.privacy_level < 1:
            raise InputError("privacy_level must be >= 1")

    @property
    def effective_patience(self) -> int | None:
        # audit runs do all iterations so the cost formulas hold exactly
        return None if self.audit else self.patience

    @property
    def effective_stratify(self) -> bool:
        return self.loss == "binomial" if self.stratify is None else bool(self.stratify)

    def host_settings(self) -> HostSettings:
        return HostSettings(
            loss=self.loss,
            learning_rate=self.learning_rate,
            max_iters=self.max_iters,
            patience=self.effective_patience,
            privacy_level=self.privacy_level,
            validation_fraction=self.validation_fraction,
            seed=self.seed,
            stratify=self.effective_stratify,
            df_definition=self.df_definition,
            ridge_jitter=self.ridge_jitter,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FitConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise InputError(f"unknown config keys: {unknown}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise InputError(f"bad config: {exc}") from None

    @classmethod
    def load(cls, path) -> "FitConfig":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"cannot read config {path}: {exc}") from None
        return cls.from_dict(doc)


def default_learners(schema: dict, features, defaults: LearnerDefaults, level_counts: dict | None = None, n_sites: int | None = None):
    """Shared learners first (feature order), then their site twins, then the random intercept.

    ``level_counts`` caps the df of categorical learners at the number of
    levels and ``n_sites`` caps the random intercept at the number of sites,
    the most a dummy basis can attain.
    """
    level_counts = level_counts or {}
    shared = []
    for f in features:
        kind = schema.get(f)
        if kind == "numeric":
            shared.append(
                dict(kind="pspline", features=(f,), degree=defaults.degree, n_basis=defaults.n_basis,
                     diff_order=defaults.diff_order, df_target=defaults.df)
            )
        elif kind == "categorical":
            df = defaults.df
            if f in level_counts:
                df = min(df, float(level_counts[f]))
            shared.append(dict(kind="categorical", features=(f,), df_target=df))
        else:
            raise InputError(f"feature {f!r} not in schema")
    rows = list(shared)
    if defaults.site_effects:
        rows += [dict(r, site_specific=True) for r in shared]
    if defaults.random_intercept:
        df = defaults.df_random_intercept
        if n_sites is not None:
            df = min(df, float(n_sites))
        rows.append(dict(kind="linear", features=(), intercept=True, df_target=df, site_specific=True))
    return [BaseLearnerSpec(id=i, **r) for i, r in enumerate(rows)]


def build_specs(config: FitConfig, schema: dict, level_counts: dict | None = None, n_sites: int | None = None):
    if config.learners:
        return [BaseLearnerSpec.from_dict(d) for d in config.learners]
    features = config.features
    if not features:
        skip = {config.response, config.site_column}
        features = [c for c in schema if c not in skip]
    return default_learners(schema, features, config.defaults, level_counts, n_sites)


def specs_for_data(config: FitConfig, data, n_sites: int):
    """Learner list for a loaded dataset, with dummy df caps from its level counts."""
    levels = {c: len({v for v in data.columns[c] if v is not None}) for c, k in data.schema.items() if k == "categorical"}
    return build_specs(config, dict(data.schema), levels, n_sites=n_sites)


def heart_config(config: FitConfig) -> FitConfig:
    """Point ``config`` at the cleaned heart-disease columns."""
    from .dataio import heart_schema

    hs = heart_schema()
    d = config.to_dict()
    d["response"] = hs["response"]
    d["site_column"] = "site"
    if not config.features and not config.learners:
        d["features"] = list(hs["retained"])
    return FitConfig.from_dict(d)
