"""Run configuration: built-in defaults < JSON config file < command-line flags."""
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .errors import ValidationError
from .propagation import HeadConfig
from .solver import SolverConfig

PATH_KEYS = ("graph", "features", "labels", "split", "train_labels", "structure", "predictions", "out", "out_dir")


@dataclass
class RunConfig:
    # data
    graph: str = None
    features: str = None
    labels: str = None
    split: str = None
    train_labels: str = None
    self_loop_policy: str = "reject"
    normalize_features: bool = True
    # split
    seed: int = 0
    per_class: float = 20
    n_val: float = None
    n_test: float = None
    seeds: int = 10
    # proximity and groups
    alpha: float = 0.1
    metric: str = "lps"
    n_groups: int = 7
    min_group_size: int = 10
    outlier_quantile: float = 0.99
    drop_above: bool = False
    # structure learning
    mode: str = "dense"
    lam: float = 10.0
    c: float = 1.0
    rho: float = 0.01
    gamma: float = 0.01
    beta: float = 1e-5
    block_size: int = 64
    inner_steps: int = 10
    outer_tol: float = 1e-3
    max_outer: int = 500
    deterministic: bool = True
    max_density: float = 1.0
    dense_cap: int = 5000
    # propagation and heads
    operator: str = "learned"
    structure: str = None
    ppr_steps: int = 0
    task: str = "lp"
    arch: str = "appnp"
    head: str = "mlp2"
    hidden: int = 64
    lr: float = 0.01
    weight_decay: float = 5e-4
    dropout: float = 0.5
    max_epochs: int = 1000
    patience: int = 100
    # outputs
    predictions: str = None
    out: str = None
    out_dir: str = "."

    def solver_config(self):
        return SolverConfig(
            lam=self.lam, c=self.c, rho=self.rho, gamma=self.gamma,
            beta=self.beta if self.mode == "sparse" else 0.0,
            block_size=self.block_size, inner_steps=self.inner_steps,
            outer_tol=self.outer_tol, max_outer=self.max_outer,
            deterministic=self.deterministic, max_density=self.max_density,
            dense_cap=self.dense_cap,
        )

    def head_config(self, seed=None):
        return HeadConfig(
            kind=self.head, hidden=self.hidden, lr=self.lr, weight_decay=self.weight_decay,
            dropout=self.dropout, max_epochs=self.max_epochs, patience=self.patience,
            seed=self.seed if seed is None else seed,
        )

    def to_json(self):
        return asdict(self)


FIELD_NAMES = {f.name for f in fields(RunConfig)}


def read_config_file(path):
    """Load a JSON config; unknown keys are rejected, paths resolve against its folder."""
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ValidationError(f"{path}: config must be a JSON object")
    unknown = sorted(set(doc) - FIELD_NAMES)
    if unknown:
        raise ValidationError(f"{path}: unknown config keys {unknown}")
    base = Path(path).resolve().parent
    for key in PATH_KEYS:
        if doc.get(key) is not None:
            doc[key] = str(base / doc[key])
    return doc


def build_config(file_values=None, flag_values=None):
    """Merge layers; ``None`` flag values mean "not given"."""
    merged = dict(file_values or {})
    merged.update({k: v for k, v in (flag_values or {}).items() if v is not None})
    unknown = sorted(set(merged) - FIELD_NAMES)
    if unknown:
        raise ValidationError(f"unknown config keys {unknown}")
    cfg = RunConfig(**merged)
    for key in PATH_KEYS:
        value = getattr(cfg, key)
        if value is not None:
            setattr(cfg, key, str(Path(value).resolve()))
    return cfg
