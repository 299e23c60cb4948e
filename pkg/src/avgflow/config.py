"""Experiment configuration: nested dataclasses loaded from YAML with strict key checking."""

import dataclasses
import typing
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import yaml

from .drift_model import PenaltyConfig, default_penalty
from .errors import ConfigError
from .evaluate import EvalGrid
from .kernels import SolventGaussianForce, kernel_from_config
from .mle_train import OptimizerConfig
from .nn import FlowSpec, MlpSpec
from .sde_sim import (MultiscaleModel, sample_gibbs_solvent, sample_von_mises_fast, solvent_fast_drift,
                      von_mises_fast_drift)
from .rng import stream
from .var_infer import VIConfig

TRAIN_MODES = ("mle", "vi", "baseline")
FAST_KINDS = ("gibbs_langevin", "von_mises", "ou")


@dataclass
class FastConfig:
    """Fast dynamics. ``gibbs_langevin``: gradient flow of the solvent potential;
    ``von_mises``: angular Langevin with a product von Mises invariant law;
    ``ou``: dY = -(Y - mean) dt + sqrt(2) scale dW, invariant law N(mean, scale^2)."""

    kind: str = "gibbs_langevin"
    concentration: List[float] = field(default_factory=lambda: [1.0, 1.0, 1.0, 1.0])
    locations: List[float] = field(default_factory=lambda: [0.0, 0.0, 0.0, 0.0])
    mean: float = 0.0
    scale: float = 1.0


@dataclass
class ModelConfig:
    kernel: dict = field(default_factory=lambda: {"variant": "solvent", "N": 10, "d": 1, "a": 1.0,
                                                  "kappa": 1.0, "gamma": 0.1, "zeta": 1.0})
    sigma: float = 0.1
    n_scale: float = 1000.0
    fast: FastConfig = field(default_factory=FastConfig)


@dataclass
class DataConfig:
    x0: List[float] = field(default_factory=lambda: [2.0])
    y0: str = "stationary"
    horizon: float = 5.0
    dt: float = 1e-4
    delta: float = 0.01
    M0: Optional[int] = None


@dataclass
class LatentFlowConfig:
    n_layers: int = 2
    hidden: int = 5
    activation: str = "tanh"


@dataclass
class OptimizerSection:
    lr: float = 1e-3
    clip: float = 5.0
    iterations: int = 100
    batch_size: int = 500
    betas: List[float] = field(default_factory=lambda: [0.9, 0.999])
    eps: float = 1e-8


@dataclass
class PenaltySection:
    lam: Optional[float] = None
    p: Optional[float] = None


@dataclass
class VISection:
    K: int = 100
    L: int = 100
    prior_scale: float = 1.0
    posterior_layers: int = 6
    posterior_hidden: int = 256
    activation: str = "tanh"
    param_batch: int = 20
    latent_batch: int = 25
    init_scale: float = 0.05


@dataclass
class BaselineSection:
    hidden: List[int] = field(default_factory=lambda: [32, 32])
    activation: str = "tanh"


@dataclass
class TrainConfig:
    mode: str = "vi"
    latent_flow: LatentFlowConfig = field(default_factory=LatentFlowConfig)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    penalty: PenaltySection = field(default_factory=PenaltySection)
    L: int = 100
    vi: VISection = field(default_factory=VISection)
    baseline: BaselineSection = field(default_factory=BaselineSection)


@dataclass
class GridSection:
    lower: List[float] = field(default_factory=lambda: [-2.0])
    upper: List[float] = field(default_factory=lambda: [2.0])
    points: List[int] = field(default_factory=lambda: [200])


@dataclass
class LawSection:
    times: List[float] = field(default_factory=lambda: [1.0, 1.5])
    L_paths: int = 1000
    dt: float = 0.01
    x0: Optional[List[float]] = None


@dataclass
class EvalConfig:
    grid: GridSection = field(default_factory=GridSection)
    oracle_samples: int = 1_000_000
    K_eval: int = 500
    L_eval: int = 1000
    param_batch: int = 20
    latent_batch: int = 100
    quantiles: List[float] = field(default_factory=lambda: [0.05, 0.95])
    split_time: float = 5.0
    path_horizon: float = 10.0
    path_dt: float = 0.01
    law: LawSection = field(default_factory=LawSection)
    baseline: bool = True


@dataclass
class Table1Section:
    """Scale separations swept by the table reproduction; every other setting comes from the config."""

    n_values: List[float] = field(default_factory=lambda: [100.0, 1000.0])


@dataclass
class SeedsConfig:
    master: int = 0


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    table1: Table1Section = field(default_factory=Table1Section)
    seeds: SeedsConfig = field(default_factory=SeedsConfig)

    # construction ---------------------------------------------------------

    @classmethod
    def from_dict(cls, data):
        cfg = _build(cls, data or {}, "")
        cfg.validate()
        return cfg

    def to_dict(self):
        return _dump(self)

    def dump_yaml(self):
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=None)

    # derived objects --------------------------------------------------------

    def kernel(self):
        return kernel_from_config(self.model.kernel)

    @property
    def d(self):
        return self.kernel().d

    @property
    def subsample(self):
        return int(round(self.data.delta / self.data.dt))

    @property
    def n_transitions(self):
        return int(round(self.data.horizon / self.data.delta))

    def fast_drift(self, kernel=None):
        kernel = kernel or self.kernel()
        fast = self.model.fast
        if fast.kind == "gibbs_langevin":
            return solvent_fast_drift(kernel.params)
        if fast.kind == "von_mises":
            return von_mises_fast_drift(fast.concentration, fast.locations)
        mean = fast.mean
        return lambda y: -(np.asarray(y, float) - mean)

    def multiscale_model(self):
        kernel = self.kernel()
        fast = self.model.fast
        alpha = np.sqrt(2.0) * (fast.scale if fast.kind == "ou" else 1.0)
        return MultiscaleModel(kernel, self.model.sigma, self.fast_drift(kernel), alpha,
                               self.model.n_scale, fast_wrap=fast.kind == "von_mises")

    def sample_invariant(self, count, seed):
        kernel = self.kernel()
        fast = self.model.fast
        if fast.kind == "gibbs_langevin":
            return sample_gibbs_solvent(kernel.params, count, seed)
        if fast.kind == "von_mises":
            return sample_von_mises_fast(fast.concentration, fast.locations, count, seed)
        g = stream(seed, "ou-invariant").standard_normal((int(count), kernel.d_fast))
        return fast.mean + fast.scale * g

    def latent_spec(self):
        lf = self.train.latent_flow
        return FlowSpec(self.kernel().d_fast, lf.n_layers, lf.hidden, lf.activation)

    def baseline_spec(self):
        b = self.train.baseline
        d = self.d
        return MlpSpec((d, *b.hidden, d), b.activation)

    def optimizer(self, seed):
        o = self.train.optimizer
        return OptimizerConfig(o.lr, o.clip, o.iterations, o.batch_size, tuple(o.betas), o.eps, seed)

    def penalty(self):
        base = default_penalty(self.kernel())
        pen = self.train.penalty
        return PenaltyConfig(base.lam if pen.lam is None else pen.lam, base.p if pen.p is None else pen.p)

    def vi_config(self):
        v = self.train.vi
        return VIConfig(v.K, v.L, v.prior_scale, v.posterior_layers, v.posterior_hidden, v.activation,
                        v.param_batch, v.latent_batch, v.init_scale)

    def eval_grid(self):
        g = self.eval.grid
        return EvalGrid(tuple(g.lower), tuple(g.upper), tuple(g.points))

    # validation -----------------------------------------------------------

    def validate(self):
        errors = []

        def check(cond, msg):
            if not cond:
                errors.append(msg)

        try:
            kernel = self.kernel()
        except ConfigError as exc:
            raise ConfigError(f"model.kernel: {exc}") from None
        m, dcfg, t, e = self.model, self.data, self.train, self.eval
        check(m.fast.kind in FAST_KINDS, f"model.fast.kind must be one of {FAST_KINDS}, got {m.fast.kind!r}")
        if m.fast.kind == "gibbs_langevin":
            check(isinstance(kernel, SolventGaussianForce), "model.fast.kind 'gibbs_langevin' needs the solvent kernel")
        if m.fast.kind == "von_mises":
            check(len(m.fast.concentration) == kernel.d_fast and len(m.fast.locations) == kernel.d_fast,
                  f"model.fast.concentration/locations need {kernel.d_fast} entries")
            check(all(c >= 0 for c in m.fast.concentration), "model.fast.concentration must be >= 0")
        if m.fast.kind == "ou":
            check(m.fast.scale > 0, "model.fast.scale must be positive")
        check(m.sigma > 0, f"model.sigma must be positive, got {m.sigma}")
        check(m.n_scale >= 1, f"model.n_scale must be >= 1, got {m.n_scale}")
        check(len(dcfg.x0) == kernel.d, f"data.x0 needs {kernel.d} entries, got {len(dcfg.x0)}")
        check(dcfg.y0 in ("stationary", "zeros"), f"data.y0 must be 'stationary' or 'zeros', got {dcfg.y0!r}")
        check(dcfg.dt > 0 and dcfg.delta > 0 and dcfg.horizon > 0, "data.dt, data.delta and data.horizon must be positive")
        if dcfg.dt > 0 and dcfg.delta > 0:
            ratio = dcfg.delta / dcfg.dt
            check(abs(ratio - round(ratio)) < 1e-9 * ratio and round(ratio) >= 1,
                  f"data.delta={dcfg.delta} must be an integer multiple of data.dt={dcfg.dt}")
        if dcfg.delta > 0 and dcfg.horizon > 0:
            steps = dcfg.horizon / dcfg.delta
            check(abs(steps - round(steps)) < 1e-9 * steps, f"data.horizon={dcfg.horizon} must be a multiple of data.delta={dcfg.delta}")
            M0 = int(round(steps))
            check(dcfg.M0 is None or dcfg.M0 == M0, f"data.M0={dcfg.M0} disagrees with horizon/delta = {M0}")
            check(t.optimizer.batch_size <= M0,
                  f"train.optimizer.batch_size B={t.optimizer.batch_size} exceeds M0={M0} observed transitions")
        check(dcfg.dt * m.n_scale <= 0.1,
              f"data.dt * model.n_scale = {dcfg.dt * m.n_scale:g} exceeds the stability limit 0.1")
        check(t.mode in TRAIN_MODES, f"train.mode must be one of {TRAIN_MODES}, got {t.mode!r}")
        check(t.L >= 1, "train.L must be >= 1")
        check(t.optimizer.iterations >= 0, "train.optimizer.iterations must be >= 0")
        check(len(t.optimizer.betas) == 2, "train.optimizer.betas needs two entries")
        check(len(e.quantiles) == 2 and all(0 < q < 1 for q in e.quantiles), "eval.quantiles must be two numbers in (0, 1)")
        check(len(e.grid.lower) == kernel.d, f"eval.grid needs {kernel.d} axes")
        check(e.oracle_samples >= 1 and e.K_eval >= 1 and e.L_eval >= 1, "eval sample counts must be >= 1")
        check(0 < e.split_time < e.path_horizon, "eval.split_time must lie inside (0, eval.path_horizon)")
        check(e.law.L_paths >= 1 and e.law.dt > 0 and len(e.law.times) >= 1, "eval.law needs L_paths >= 1, dt > 0, times")
        check(len(self.table1.n_values) >= 1 and all(v >= 1 for v in self.table1.n_values),
              "table1.n_values needs at least one scale separation >= 1")
        check(all(dcfg.dt * v <= 0.1 for v in self.table1.n_values),
              f"table1.n_values: data.dt * n exceeds the stability limit 0.1 for some n")
        check(self.seeds.master >= 0, "seeds.master must be a non-negative integer")
        if errors:
            raise ConfigError("invalid configuration:\n  " + "\n  ".join(errors))
        # delegate to the component constructors for their own checks
        for build in (self.optimizer, self.vi_config, self.eval_grid, self.latent_spec, self.baseline_spec):
            try:
                build(self.seeds.master) if build == self.optimizer else build()
            except ConfigError as exc:
                raise ConfigError(f"invalid configuration: {exc}") from None
        try:
            self.penalty()
        except ConfigError as exc:
            raise ConfigError(f"train.penalty: {exc}") from None


def _is_dataclass_type(tp):
    return isinstance(tp, type) and dataclasses.is_dataclass(tp)


def _coerce(value, tp, path):
    origin = typing.get_origin(tp)
    if tp is typing.Any or tp is dict:
        if tp is dict and not isinstance(value, dict):
            raise ConfigError(f"{path}: expected a mapping")
        return value
    if origin is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _coerce(value, args[0], path)
    if origin in (list, List):
        (inner,) = typing.get_args(tp)
        if not isinstance(value, (list, tuple)):
            value = [value]
        return [_coerce(v, inner, f"{path}[{i}]") for i, v in enumerate(value)]
    if _is_dataclass_type(tp):
        return _build(tp, value, path)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not (isinstance(value, int) or (isinstance(value, float) and value.is_integer())):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return int(value)
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            try:
                return float(value)
            except (TypeError, ValueError):
                raise ConfigError(f"{path}: expected a number, got {value!r}") from None
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    return value


def _build(cls, data, path):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        where = path or "top level"
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}; allowed: {', '.join(sorted(names))}")
    kwargs = {}
    for name in names:
        if name in data:
            kwargs[name] = _coerce(data[name], hints[name], f"{path}.{name}" if path else name)
    return cls(**kwargs)


def _dump(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _dump(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, dict):
        return {k: _dump(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_dump(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def load_config(path):
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from None
    return ExperimentConfig.from_dict(data)


def parse_config_text(text):
    return ExperimentConfig.from_dict(yaml.safe_load(text))


def schema(cls=ExperimentConfig):
    """Nested description of every key: type name and default."""
    hints = typing.get_type_hints(cls)
    out = {}
    for f in dataclasses.fields(cls):
        tp = hints[f.name]
        if _is_dataclass_type(tp):
            out[f.name] = schema(tp)
            continue
        if f.default is not dataclasses.MISSING:
            default = f.default
        elif f.default_factory is not dataclasses.MISSING:
            default = _dump(f.default_factory())
        else:
            default = None
        out[f.name] = {"type": _type_name(tp), "default": default}
    return out


def _type_name(tp):
    origin = typing.get_origin(tp)
    if origin is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        return f"{_type_name(args[0])} or null"
    if origin in (list, List):
        return f"list of {_type_name(typing.get_args(tp)[0])}"
    return getattr(tp, "__name__", str(tp))
