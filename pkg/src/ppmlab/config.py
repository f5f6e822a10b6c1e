"""Experiment configuration: YAML schema, validation with line numbers, and object builders.

A config file has these top-level blocks (all but ``prior``, ``operator`` and
``method`` optional)::

    schedule:    {beta_min, beta_max, t_min, t_max}
    prior:       {weights, means, covs}            # covs: scalar, list of scalars or matrices
    operator:    {kind: dense, matrix} | {kind: mask|dft_mask, input_dim, indices}
    sigma_y:     0.5
    observation: {y} | {n_observations, x_true?}   # simulated from the prior when y is absent
    method:      {name, ...knobs}                  # ppm-vi, ppm-ai, reddiff, rlsd, dps, ikl, ikl-ai
    compare:     {<method name>: {...knobs}, ...}  # per-method knobs for the compare command
    evaluation:  {radius_multiplier, n_ref, n_train, n_test, samples_per_test}
    seeds:       [0, 1, 2]
    output:      runs/example

Unknown keys anywhere raise :class:`ConfigError` carrying the line of the key.
"""

from __future__ import annotations

import dataclasses
import re
from dataclasses import dataclass, field

import numpy as np
import yaml

from ppmlab.baselines import BaselineConfig, snr_weight
from ppmlab.diffusion import TimeWeight, VpSchedule
from ppmlab.ppm import MetricFn, PpmConfig
from ppmlab.problems import GaussianMixture, LinearOperator

METHOD_NAMES = ("ppm-vi", "ppm-ai", "reddiff", "rlsd", "dps", "ikl", "ikl-ai")

_SCHEDULE_KEYS = ("beta_min", "beta_max", "t_min", "t_max")
_PRIOR_KEYS = ("weights", "means", "covs")
_OPERATOR_KEYS = ("kind", "matrix", "input_dim", "indices")
_OBSERVATION_KEYS = ("y", "n_observations", "x_true")
_EVAL_KEYS = ("radius_multiplier", "n_ref", "n_train", "n_test", "samples_per_test")
_TOP_KEYS = ("schedule", "prior", "operator", "sigma_y", "observation", "method", "compare", "evaluation",
             "seeds", "output")
_WEIGHT_KEYS = ("kind", "value", "lo", "hi", "at")
_METRIC_KEYS = ("name", "scale", "delta")
_HIDDEN = ("_schedule",)


class ConfigError(ValueError):
    """Schema violation; ``line`` is 1-based, or ``None`` when no position is known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class _Loader(yaml.SafeLoader):
    """Safe loader that also reads exponent floats without a sign or dot (``1e-3``, ``1.0e7``)."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"^[-+]?(?:[0-9][0-9_]*)?(?:\.[0-9_]*)?[eE][-+]?[0-9]+$"),
    list("-+0123456789."),
)


def _line(node) -> int | None:
    return None if node is None else node.start_mark.line + 1


def _to_python(node):
    return yaml.load(yaml.serialize(node), Loader=_Loader) if node is not None else None


def _mapping(node, where: str, allowed) -> dict:
    """``{key: (value_node, key_node)}`` after rejecting unknown and duplicate keys."""
    if not isinstance(node, yaml.MappingNode):
        raise ConfigError(f"{where} must be a mapping", _line(node))
    out = {}
    for k, v in node.value:
        key = k.value
        if allowed is not None and key not in allowed:
            raise ConfigError(f"unknown key '{key}' in {where} (allowed: {', '.join(allowed)})", _line(k))
        if key in out:
            raise ConfigError(f"duplicate key '{key}' in {where}", _line(k))
        out[key] = (v, k)
    return out


def _number(node, where, positive=False, nonneg=False, integer=False):
    val = _to_python(node)
    ok = isinstance(val, (int, float)) and not isinstance(val, bool)
    if integer:
        ok = ok and float(val).is_integer()
    if not ok:
        raise ConfigError(f"{where} must be {'an integer' if integer else 'a number'}, got {val!r}", _line(node))
    if positive and val <= 0:
        raise ConfigError(f"{where} must be positive, got {val}", _line(node))
    if nonneg and val < 0:
        raise ConfigError(f"{where} must be nonnegative, got {val}", _line(node))
    return int(val) if integer else float(val)


def _array(node, where, ndim=None):
    val = _to_python(node)
    try:
        arr = np.asarray(val, dtype=float)
    except (TypeError, ValueError):
        raise ConfigError(f"{where} must be numeric, got {val!r}", _line(node)) from None
    if ndim is not None and arr.ndim != ndim:
        raise ConfigError(f"{where} must have {ndim} dimension(s), got shape {arr.shape}", _line(node))
    return arr


@dataclass
class MethodSpec:
    name: str
    knobs: dict = field(default_factory=dict)
    line: int | None = None


@dataclass
class ExperimentConfig:
    schedule: VpSchedule
    prior: GaussianMixture
    operator: LinearOperator
    sigma_y: float
    method: MethodSpec
    y: np.ndarray | None = None
    x_true: np.ndarray | None = None
    n_observations: int = 8
    compare: dict = field(default_factory=dict)
    radius_multiplier: float = 3.0
    n_ref: int = 2000
    n_train: int = 256
    n_test: int = 32
    samples_per_test: int = 64
    seeds: list = field(default_factory=lambda: [0])
    output: str | None = None
    raw: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.prior.dim


# ---------------------------------------------------------------------------
# method knobs


def _knob_fields(name: str) -> dict:
    cls = PpmConfig if name.startswith("ppm") else BaselineConfig
    return {f.name: f for f in dataclasses.fields(cls) if f.name not in _HIDDEN + ("method", "seed", "mode")}


def _time_weight(node, where):
    if isinstance(node, yaml.ScalarNode) and node.value == "snr":
        return "snr"
    m = _mapping(node, where, _WEIGHT_KEYS)
    kw = {}
    for k, (v, _) in m.items():
        kw[k] = _to_python(v) if k == "kind" else _number(v, f"{where}.{k}", nonneg=True)
    try:
        return TimeWeight(**kw)
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}", _line(node)) from None


def _knobs(name: str, node, where: str) -> dict:
    fields = _knob_fields(name)
    out = {}
    if node is None:
        return out
    for key, (v, k) in _mapping(node, where, tuple(fields)).items():
        if key in ("time_weight", "omega"):
            out[key] = _time_weight(v, f"{where}.{key}")
        elif key == "metric":
            m = _mapping(v, f"{where}.metric", _METRIC_KEYS)
            kw = {mk: (_to_python(mv) if mk == "name" else _number(mv, f"{where}.metric.{mk}", positive=True))
                  for mk, (mv, _) in m.items()}
            try:
                out[key] = MetricFn(**kw)
            except ValueError as exc:
                raise ConfigError(f"{where}.metric: {exc}", _line(v)) from None
        elif key in ("aux_hidden", "gen_hidden"):
            arr = _to_python(v)
            if not (isinstance(arr, list) and arr and all(isinstance(a, int) and a > 0 for a in arr)):
                raise ConfigError(f"{where}.{key} must be a list of positive integers", _line(v))
            out[key] = tuple(arr)
        else:
            val = _to_python(v)
            default = fields[key].default
            if isinstance(default, bool):
                if not isinstance(val, bool):
                    raise ConfigError(f"{where}.{key} must be true or false", _line(v))
            elif isinstance(default, int):
                val = _number(v, f"{where}.{key}", nonneg=True, integer=True)
            elif isinstance(default, float) or default is None:
                val = None if val is None else _number(v, f"{where}.{key}")
            elif isinstance(default, str):
                if not isinstance(val, str):
                    raise ConfigError(f"{where}.{key} must be a string", _line(v))
            out[key] = val
    return out


def method_config(spec: MethodSpec, seed: int, schedule: VpSchedule):
    """Instantiate the solver configuration for one method and integer seed."""
    knobs = dict(spec.knobs)
    for key in ("time_weight", "omega"):
        if knobs.get(key) == "snr":
            knobs[key] = snr_weight(schedule)
    try:
        if spec.name in ("ppm-vi", "ppm-ai"):
            return PpmConfig(seed=seed, **knobs)
        base = spec.name.removesuffix("-ai")
        mode = "amortized" if spec.name.endswith("-ai") else "particle"
        return BaselineConfig(method=base, seed=seed, mode=mode, **knobs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"method {spec.name}: {exc}", spec.line) from None


# ---------------------------------------------------------------------------
# top level


def _build_prior(node) -> GaussianMixture:
    m = _mapping(node, "prior", _PRIOR_KEYS)
    for k in _PRIOR_KEYS:
        if k not in m:
            raise ConfigError(f"prior is missing '{k}'", _line(node))
    w = _array(m["weights"][0], "prior.weights", 1)
    means = _array(m["means"][0], "prior.means", 2)
    covs = _array(m["covs"][0], "prior.covs")
    try:
        return GaussianMixture(w, means, covs)
    except (ValueError, np.linalg.LinAlgError) as exc:
        raise ConfigError(f"prior: {exc}", _line(node)) from None


def _build_operator(node, dim: int) -> LinearOperator:
    m = _mapping(node, "operator", _OPERATOR_KEYS)
    kind = _to_python(m["kind"][0]) if "kind" in m else "dense"
    try:
        if kind == "dense":
            if "matrix" not in m:
                raise ConfigError("dense operator needs 'matrix'", _line(node))
            op = LinearOperator.dense(_array(m["matrix"][0], "operator.matrix", 2))
        elif kind in ("mask", "dft_mask"):
            if "indices" not in m:
                raise ConfigError(f"{kind} operator needs 'indices'", _line(node))
            n_in = _number(m["input_dim"][0], "operator.input_dim", positive=True, integer=True) \
                if "input_dim" in m else dim
            idx = _to_python(m["indices"][0])
            op = LinearOperator(kind, n_in, indices=idx)
        else:
            raise ConfigError(f"unknown operator kind {kind!r}", _line(m["kind"][0]))
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"operator: {exc}", _line(node)) from None
    if op.input_dim != dim:
        raise ConfigError(f"operator input dimension {op.input_dim} does not match prior dimension {dim}",
                          _line(node))
    return op


def _method_spec(node, where) -> MethodSpec:
    m = _mapping(node, where, None)
    if "name" not in m:
        raise ConfigError(f"{where} needs a 'name'", _line(node))
    name = _to_python(m["name"][0])
    if name not in METHOD_NAMES:
        raise ConfigError(f"unknown method {name!r} (expected one of {', '.join(METHOD_NAMES)})",
                          _line(m["name"][0]))
    rest = yaml.MappingNode(node.tag, [(k, v) for k, v in node.value if k.value != "name"],
                            node.start_mark, node.end_mark)
    return MethodSpec(name, _knobs(name, rest, where), _line(node))


def parse_config(text: str) -> ExperimentConfig:
    try:
        root = yaml.compose(text, Loader=_Loader)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"invalid YAML: {getattr(exc, 'problem', exc)}",
                          None if mark is None else mark.line + 1) from None
    if root is None:
        raise ConfigError("empty config")
    top = _mapping(root, "config", _TOP_KEYS)
    for k in ("prior", "operator", "method"):
        if k not in top:
            raise ConfigError(f"missing required block '{k}'", _line(root))

    sched_kw = {}
    if "schedule" in top:
        for k, (v, _) in _mapping(top["schedule"][0], "schedule", _SCHEDULE_KEYS).items():
            sched_kw[k] = _number(v, f"schedule.{k}", nonneg=True)
    try:
        schedule = VpSchedule(**sched_kw)
    except ValueError as exc:
        raise ConfigError(f"schedule: {exc}", _line(top.get("schedule", (root,))[0])) from None

    prior = _build_prior(top["prior"][0])
    op = _build_operator(top["operator"][0], prior.dim)
    sigma_y = _number(top["sigma_y"][0], "sigma_y", positive=True) if "sigma_y" in top else 1.0
    method = _method_spec(top["method"][0], "method")
    cfg = ExperimentConfig(schedule, prior, op, sigma_y, method, raw=_to_python(root))

    if "observation" in top:
        obs = _mapping(top["observation"][0], "observation", _OBSERVATION_KEYS)
        if "y" in obs:
            cfg.y = _array(obs["y"][0], "observation.y", 1)
            if cfg.y.size != op.output_dim:
                raise ConfigError(f"observation.y has {cfg.y.size} entries, operator outputs {op.output_dim}",
                                  _line(obs["y"][0]))
        if "x_true" in obs:
            cfg.x_true = _array(obs["x_true"][0], "observation.x_true", 1)
        if "n_observations" in obs:
            cfg.n_observations = _number(obs["n_observations"][0], "observation.n_observations",
                                         positive=True, integer=True)

    if "compare" in top:
        for name, (v, k) in _mapping(top["compare"][0], "compare", METHOD_NAMES).items():
            knobs = None if isinstance(v, yaml.ScalarNode) and v.value in ("", "null", "~") else v
            cfg.compare[name] = MethodSpec(name, _knobs(name, knobs, f"compare.{name}"), _line(k))

    if "evaluation" in top:
        for k, (v, _) in _mapping(top["evaluation"][0], "evaluation", _EVAL_KEYS).items():
            if k == "radius_multiplier":
                cfg.radius_multiplier = _number(v, "evaluation.radius_multiplier", positive=True)
            else:
                setattr(cfg, k, _number(v, f"evaluation.{k}", positive=True, integer=True))

    if "seeds" in top:
        node = top["seeds"][0]
        seeds = _to_python(node)
        seeds = [seeds] if isinstance(seeds, int) and not isinstance(seeds, bool) else seeds
        if not (isinstance(seeds, list) and seeds and all(isinstance(x, int) and x >= 0 for x in seeds)):
            raise ConfigError("seeds must be a nonnegative integer or a nonempty list of them", _line(node))
        cfg.seeds = seeds
    if "output" in top:
        out = _to_python(top["output"][0])
        if not isinstance(out, str):
            raise ConfigError("output must be a path string", _line(top["output"][0]))
        cfg.output = out

    # instantiate once so knob-level errors surface at load time
    method_config(cfg.method, 0, schedule)
    for spec in cfg.compare.values():
        method_config(spec, 0, schedule)
    return cfg


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


__all__ = ["ConfigError", "ExperimentConfig", "METHOD_NAMES", "MethodSpec", "load_config", "method_config",
           "parse_config"]
