"""Run configuration: a flat ``key = value`` text file with typed, validated keys."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .controlpath import SCHEMES
from .data import GeneratorConfig
from .errors import ConfigError
from .model import ModelConfig, TrainConfig, config_digest
from .ncde import SolverConfig

ABLATIONS = {
    "none": {},
    "a1": {"use_time_mask": False},
    "a2": {"use_tacl": False},
    "a3": {"use_tacl": False, "use_ranking_loss": False},
}

# keys that only affect post-training analysis; they do not enter the config hash
_ANALYSIS_KEYS = {"n_field_samples", "n_clusters", "cluster_restarts", "knn", "calibration_bins"}


@dataclass
class RunConfig:
    # data
    data_source: str = "synthetic"          # synthetic | csv
    csv_dir: str = ""
    features: str = ""                      # csv feature schema; empty: names found in the file
    min_observed: int = 20
    n_patients: int = 2000
    d_features: int = 12
    window_h: int = 36
    obs_rate: float = 0.086
    missing_frac: float = 0.55
    n_families: int = 0
    signal_features: int = -1               # -1: every feature carries signal
    duplicate_features: str = ""            # "a:b,c:d" pairs sharing a mixing row
    beta_scale: float = 3.5
    data_seed: int = -1                     # -1: use seed
    split_fracs: str = "0.7,0.1,0.2"
    split_seed: int = -1                    # -1: use the data seed
    # model
    latent_dim: int = 64
    g_hidden: str = "64"
    f_hidden: str = "64,64"
    head_hidden: str = "64"
    field_scale: float = 1.0
    path_scheme: str = "cubic_hermite_backward"
    solver: str = "rk4"
    steps_per_hour: int = 2
    # loss
    alpha: float = 1.0
    kappa1: float = 2.0
    kappa2: float = 30.0
    delta: float = 20.0
    use_tacl: bool = True
    use_time_mask: bool = True
    use_ranking_loss: bool = True
    # optimisation (learning rate and batch size are not fixed by the method; these are chosen defaults)
    epochs: int = 100
    patience: int = 5
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 1e-4
    seed: int = 0
    # analysis
    n_field_samples: int = 2048
    n_clusters: int = 4
    cluster_restarts: int = 10
    knn: int = 50
    calibration_bins: int = 10

    def __post_init__(self):
        self.validate()

    # -- validation ---------------------------------------------------------

    def validate(self) -> None:
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.data_source in ("synthetic", "csv"), f"data_source must be synthetic or csv, got {self.data_source!r}")
        need(self.data_source != "csv" or self.csv_dir, "data_source=csv needs csv_dir")
        need(self.min_observed >= 0, "min_observed must be >= 0")
        need(self.latent_dim >= 1, "latent_dim must be >= 1")
        need(self.path_scheme in SCHEMES, f"path_scheme must be one of {SCHEMES}")
        need(self.solver in ("rk4", "euler"), "solver must be rk4 or euler")
        need(self.steps_per_hour >= 1, "steps_per_hour must be >= 1")
        need(self.alpha >= 0, "alpha must be >= 0")
        need(self.kappa1 > 0 and self.kappa2 > 0, "kappa1 and kappa2 must be positive")
        need(self.delta >= 0, "delta must be >= 0")
        need(self.epochs >= 1 and self.patience >= 1, "epochs and patience must be >= 1")
        need(self.batch_size >= 2, "batch_size must be >= 2")
        need(self.lr > 0 and self.weight_decay >= 0, "lr must be positive and weight_decay >= 0")
        need(self.n_clusters >= 1 and self.knn >= 1 and self.n_field_samples >= 1, "analysis counts must be >= 1")
        need(self.calibration_bins >= 1, "calibration_bins must be >= 1")
        self.hidden_sizes("g_hidden")
        self.hidden_sizes("f_hidden")
        self.hidden_sizes("head_hidden")
        self.split()
        self.duplicate_pairs()
        self.generator()

    def hidden_sizes(self, key: str) -> tuple[int, ...]:
        text = getattr(self, key).strip()
        try:
            sizes = tuple(int(s) for s in text.split(",") if s.strip())
        except ValueError as exc:
            raise ConfigError(f"{key}: expected comma-separated integers, got {text!r}") from exc
        if any(s < 1 for s in sizes):
            raise ConfigError(f"{key}: layer widths must be positive")
        return sizes

    def split(self) -> tuple[float, float, float]:
        try:
            fr = tuple(float(s) for s in self.split_fracs.split(","))
        except ValueError as exc:
            raise ConfigError(f"split_fracs: cannot parse {self.split_fracs!r}") from exc
        if len(fr) != 3 or min(fr) < 0 or abs(sum(fr) - 1.0) > 1e-9:
            raise ConfigError(f"split_fracs must be three non-negative numbers summing to 1, got {self.split_fracs!r}")
        return fr  # type: ignore[return-value]

    def duplicate_pairs(self) -> tuple[tuple[int, int], ...]:
        pairs = []
        for item in filter(None, (s.strip() for s in self.duplicate_features.split(","))):
            try:
                a, b = (int(x) for x in item.split(":"))
            except ValueError as exc:
                raise ConfigError(f"duplicate_features: bad pair {item!r}") from exc
            pairs.append((a, b))
        return tuple(pairs)

    # -- derived configs ----------------------------------------------------

    def feature_list(self) -> list[str]:
        return [s.strip() for s in self.features.split(",") if s.strip()]

    @property
    def effective_split_seed(self) -> int:
        return self.effective_data_seed if self.split_seed < 0 else self.split_seed

    @property
    def effective_data_seed(self) -> int:
        return self.seed if self.data_seed < 0 else self.data_seed

    def generator(self) -> GeneratorConfig:
        return GeneratorConfig(
            n_patients=self.n_patients,
            d_features=self.d_features,
            window_h=self.window_h,
            obs_rate=self.obs_rate,
            missing_frac=self.missing_frac,
            seed=self.effective_data_seed,
            n_families=self.n_families,
            signal_features=None if self.signal_features < 0 else self.signal_features,
            duplicate_features=self.duplicate_pairs(),
            beta_scale=self.beta_scale,
        )

    def model(self, n_features: int) -> ModelConfig:
        return ModelConfig(
            n_features=n_features,
            latent_dim=self.latent_dim,
            g_hidden=self.hidden_sizes("g_hidden"),
            f_hidden=self.hidden_sizes("f_hidden"),
            head_hidden=self.hidden_sizes("head_hidden"),
            field_scale=self.field_scale,
            solver=SolverConfig(method=self.solver, steps_per_hour=self.steps_per_hour),
        )

    def training(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs, patience=self.patience, batch_size=self.batch_size,
            lr=self.lr, weight_decay=self.weight_decay, alpha=self.alpha,
            kappa1=self.kappa1, kappa2=self.kappa2, delta=self.delta,
            use_tacl=self.use_tacl, use_time_mask=self.use_time_mask,
            use_ranking_loss=self.use_ranking_loss, seed=self.seed,
        )

    # -- text form ----------------------------------------------------------

    def with_ablation(self, name: str) -> "RunConfig":
        if name not in ABLATIONS:
            raise ConfigError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}")
        return dataclasses.replace(self, **ABLATIONS[name])

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_fmt(getattr(self, f.name))}\n" for f in fields(self))

    def digest(self) -> str:
        """Hash of every setting that influences the trained parameters."""
        text = "".join(
            f"{f.name}={_fmt(getattr(self, f.name))}\n" for f in fields(self) if f.name not in _ANALYSIS_KEYS
        )
        return config_digest(text)

    @classmethod
    def from_text(cls, text: str, base: "RunConfig | None" = None) -> "RunConfig":
        types = {f.name: f.type for f in fields(cls)}
        values = dataclasses.asdict(base) if base is not None else {}
        for n, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {n}: expected key = value, got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"line {n}: unknown key {key!r}")
            values[key] = _parse(key, value, types[key])
        return cls(**values)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_text(text)

    def override(self, **kv) -> "RunConfig":
        return dataclasses.replace(self, **kv)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(key: str, value: str, typ: str):
    try:
        if typ == "bool":
            low = value.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(value)
        if typ == "int":
            return int(value)
        if typ == "float":
            return float(value)
        return value
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {value!r} as {typ}") from exc
