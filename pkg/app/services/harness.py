"""实验编排：配置解析校验、估计器分派、报告写出与开销扫描

流程：
1. 解析：JSON → ExperimentConfig，所有数值在模拟开始前按目标类型的不变量校验，
   出错时抛出带字段路径的 ConfigError
2. 运行：每个重复实验 r 使用 seed + r，对 eps 列表逐个调用估计器
3. 写出：report_<r>.json、levels.csv、summary.csv
4. 扫描：按 eps 平均总开销，拟合 log cost 关于 log eps 的斜率
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timezone

import numpy as np

from app.services.importance import (
    METHODS,
    RmConfig,
    ThetaSchedule,
    build_rm_schedule,
    build_saa_schedule,
    run_adaptive_is_mlmc,
    run_is_mlmc,
)
from app.services.mlmc import MlmcEstimate, PricingLevelSampler, fit_rates, profile_levels, run_mlmc
from app.services.risk import (
    PROBLEM_BUILDERS,
    AdaptiveConfig,
    AdaptiveNestedSampler,
    NestedConfig,
    RiskEstimate,
    UniformNestedSampler,
    build_problem,
    nested_mc,
    nested_mc_iterative,
    nested_mlmc_adaptive,
    nested_mlmc_uniform,
    profile_risk_levels,
    var_cvar,
)
from app.services.sde import MODEL_BUILDERS, PAYOFF_BUILDERS, MlmcConfig, build_model, build_payoff
from app.utils.errors import ConfigError, InvalidArgumentError, MlmcError
from app.utils.oracles import black_scholes_price

logger = logging.getLogger(__name__)

# ---------------------------------------------------------------------------
# 常量
# ---------------------------------------------------------------------------
EXPERIMENT_KINDS = ("price", "price_is", "price_is_adaptive", "risk_eta", "risk_var_cvar", "rates_sweep")
RISK_METHODS = ("uniform", "adaptive", "nested_mc", "nested_mc_iterative")
RATES_TARGETS = ("pricing", "risk_uniform", "risk_adaptive")
CSV_SCHEMA_VERSION = 1
LEVELS_COLUMNS = ["experiment", "replicate", "level", "N", "mean", "var", "cost", "kurtosis", "theta_norm", "eps"]
SUMMARY_COLUMNS = [
    "experiment", "replicate", "eps", "estimate", "std_error", "total_cost",
    "alpha", "beta", "gamma", "oracle", "abs_error",
]
TOP_LEVEL_KEYS = {
    "experiment", "model", "payoff", "eps", "mlmc", "importance", "risk", "rates",
    "seed", "output_dir", "replicates", "threads",
}
MLMC_KEYS = {"refine_factor", "base_steps", "max_level", "pilot_samples", "initial_levels"}
IMPORTANCE_KEYS = {"method", "pilot_size", "tol", "max_iter", "levels", "baseline_samples", "rm"}
RM_KEYS = {"radius", "gamma0", "n0", "iterations", "averaging", "normalize"}
RISK_KEYS = {
    "problem", "params", "method", "threshold", "quantile", "n0_inner", "pilot_outer",
    "pilot_scenarios", "pilot_inner", "initial_levels", "max_level", "outer_const", "inner_const", "adaptive",
}
ADAPTIVE_KEYS = {"confidence_const", "exponent_r", "moment_q", "eps_cap_const", "n0_inner", "mode"}
RATES_KEYS = {"target", "levels", "samples"}


# ---------------------------------------------------------------------------
# 配置
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class ImportanceSettings:
    method: str = "saa"
    pilot_size: int = 10_000
    tol: float = 1e-6
    max_iter: int = 50
    levels: tuple[int, ...] = ()
    baseline_samples: int = 0
    rm: RmConfig = field(default_factory=RmConfig)


@dataclass(frozen=True)
class RiskSettings:
    problem: str = "gaussian"
    params: dict = field(default_factory=dict)
    method: str = "adaptive"
    threshold: float = 1.0
    quantile: float = 0.05
    outer_const: float = 1.0
    inner_const: float = 1.0
    nested: NestedConfig = field(default_factory=NestedConfig)
    adaptive: AdaptiveConfig = field(default_factory=AdaptiveConfig)


@dataclass(frozen=True)
class RatesSettings:
    target: str = "pricing"
    levels: tuple[int, ...] = (1, 2, 3, 4, 5, 6)
    samples: int = 100_000


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    model_name: str = "gbm"
    model_params: dict = field(default_factory=dict)
    payoff_name: str = "call"
    payoff_params: dict = field(default_factory=dict)
    eps: tuple[float, ...] = (0.01,)
    mlmc: MlmcConfig = field(default_factory=MlmcConfig)
    importance: ImportanceSettings = field(default_factory=ImportanceSettings)
    risk: RiskSettings = field(default_factory=RiskSettings)
    rates: RatesSettings = field(default_factory=RatesSettings)
    seed: int = 0
    output_dir: str = "output"
    replicates: int = 1
    threads: int = 1

    def to_dict(self) -> dict:
        """规范形式（填充默认值），parse_config(to_dict()) 与原配置等价"""
        mlmc = asdict(self.mlmc)
        for key in ("seed", "workers"):
            mlmc.pop(key)
        importance = asdict(self.importance)
        importance["levels"] = list(self.importance.levels)
        risk = {
            "problem": self.risk.problem,
            "params": _canonical(self.risk.params),
            "method": self.risk.method,
            "threshold": self.risk.threshold,
            "quantile": self.risk.quantile,
            "outer_const": self.risk.outer_const,
            "inner_const": self.risk.inner_const,
            **{key: value for key, value in asdict(self.risk.nested).items() if key not in ("seed", "workers")},
            "adaptive": asdict(self.risk.adaptive),
        }
        return {
            "experiment": self.experiment,
            "model": {"name": self.model_name, "params": _canonical(self.model_params)},
            "payoff": {"name": self.payoff_name, "params": _canonical(self.payoff_params)},
            "eps": list(self.eps),
            "mlmc": mlmc,
            "importance": importance,
            "risk": risk,
            "rates": {"target": self.rates.target, "levels": list(self.rates.levels), "samples": self.rates.samples},
            "seed": self.seed,
            "output_dir": self.output_dir,
            "replicates": self.replicates,
            "threads": self.threads,
        }

    def config_hash(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _canonical(value):
    return json.loads(json.dumps(value, sort_keys=True))


def _section(data: dict, key: str, allowed: set[str], path: str = "") -> dict:
    value = data.get(key, {})
    field_path = f"{path}{key}"
    if value is None:
        return {}
    if not isinstance(value, dict):
        raise ConfigError(field_path, "必须为对象")
    unknown = set(value) - allowed
    if unknown:
        raise ConfigError(f"{field_path}.{sorted(unknown)[0]}", "未知字段")
    return value


def _number(section: dict, key: str, path: str, default, kind=float, minimum=None, strict=False):
    value = section.get(key, default)
    field_path = f"{path}.{key}" if path else key
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(field_path, f"必须为数值，实际为 {value!r}")
    if kind is int:
        if isinstance(value, float) and not value.is_integer():
            raise ConfigError(field_path, f"必须为整数: {value}")
        value = int(value)
    else:
        value = float(value)
        if not math.isfinite(value):
            raise ConfigError(field_path, "必须为有限值")
    if minimum is not None and (value <= minimum if strict else value < minimum):
        raise ConfigError(field_path, f"必须{'大于' if strict else '不小于'} {minimum}: {value}")
    return value


def _flag(section: dict, key: str, path: str, default: bool) -> bool:
    value = section.get(key, default)
    if not isinstance(value, bool):
        raise ConfigError(f"{path}.{key}", f"必须为布尔值，实际为 {value!r}")
    return value


def _choice(section: dict, key: str, path: str, default: str, choices) -> str:
    value = section.get(key, default)
    if value not in choices:
        field_path = f"{path}.{key}" if path else key
        raise ConfigError(field_path, f"必须为 {', '.join(choices)} 之一，实际为 {value!r}")
    return value


def _int_list(section: dict, key: str, path: str, default, minimum: int) -> tuple[int, ...]:
    value = section.get(key, list(default))
    if not isinstance(value, list):
        raise ConfigError(f"{path}.{key}", "必须为整数数组")
    items = []
    for i, item in enumerate(value):
        if isinstance(item, bool) or not isinstance(item, int) or item < minimum:
            raise ConfigError(f"{path}.{key}[{i}]", f"必须为 ≥ {minimum} 的整数: {item!r}")
        items.append(item)
    return tuple(items)


def _params(section: dict, path: str) -> dict:
    value = section.get("params", {})
    if not isinstance(value, dict):
        raise ConfigError(f"{path}.params", "必须为对象")
    return value


def _build(field_path: str, factory, *args, **kwargs):
    """调用类型构造函数，把不变量校验失败转换为带字段路径的 ConfigError"""
    try:
        return factory(*args, **kwargs)
    except ConfigError:
        raise
    except (InvalidArgumentError, TypeError, ValueError) as exc:
        raise ConfigError(field_path, str(exc)) from exc


def parse_config(data, overrides: dict | None = None) -> ExperimentConfig:
    """JSON 文本或 dict → ExperimentConfig；overrides 覆盖顶层字段（seed/output_dir/threads）"""
    if isinstance(data, (str, bytes)):
        try:
            data = json.loads(data)
        except json.JSONDecodeError as exc:
            raise ConfigError("<root>", f"JSON 解析失败: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("<root>", "配置必须为 JSON 对象")
    data = {**data, **{key: value for key, value in (overrides or {}).items() if value is not None}}
    unknown = set(data) - TOP_LEVEL_KEYS
    if unknown:
        raise ConfigError(sorted(unknown)[0], "未知字段")

    experiment = _choice(data, "experiment", "", None, EXPERIMENT_KINDS)
    seed = _number(data, "seed", "", 0, int, minimum=0)
    replicates = _number(data, "replicates", "", 1, int, minimum=1)
    threads = _number(data, "threads", "", 1, int, minimum=1)
    output_dir = data.get("output_dir", "output")
    if not isinstance(output_dir, str) or not output_dir:
        raise ConfigError("output_dir", "必须为非空字符串")

    eps_raw = data.get("eps", [0.01])
    if isinstance(eps_raw, (int, float)) and not isinstance(eps_raw, bool):
        eps_raw = [eps_raw]
    if not isinstance(eps_raw, list) or not eps_raw:
        raise ConfigError("eps", "必须为非空数值数组")
    eps = tuple(_number({"eps": v}, "eps", "", None, minimum=0.0, strict=True) for v in eps_raw)

    model_section = _section(data, "model", {"name", "params"})
    model_name = _choice(model_section, "name", "model", "gbm", tuple(MODEL_BUILDERS))
    model_params = _params(model_section, "model")
    model = _build("model.params", build_model, model_name, model_params)
    payoff_section = _section(data, "payoff", {"name", "params"})
    payoff_name = _choice(payoff_section, "name", "payoff", "call", tuple(PAYOFF_BUILDERS))
    payoff_params = _params(payoff_section, "payoff")
    _build("payoff.params", build_payoff, payoff_name, payoff_params, model)

    mlmc_section = _section(data, "mlmc", MLMC_KEYS)
    mlmc = _build(
        "mlmc",
        MlmcConfig,
        refine_factor=_number(mlmc_section, "refine_factor", "mlmc", 2, int, minimum=2),
        base_steps=_number(mlmc_section, "base_steps", "mlmc", 1, int, minimum=1),
        max_level=_number(mlmc_section, "max_level", "mlmc", 10, int, minimum=1),
        pilot_samples=_number(mlmc_section, "pilot_samples", "mlmc", 10_000, int, minimum=2),
        initial_levels=_number(mlmc_section, "initial_levels", "mlmc", 3, int, minimum=1),
        seed=seed,
        workers=threads,
    )

    imp_section = _section(data, "importance", IMPORTANCE_KEYS)
    rm_section = _section(imp_section, "rm", RM_KEYS, "importance.")
    rm = _build(
        "importance.rm",
        RmConfig,
        radius=_number(rm_section, "radius", "importance.rm", 5.0, minimum=0.0, strict=True),
        gamma0=_number(rm_section, "gamma0", "importance.rm", 1.0, minimum=0.0),
        n0=_number(rm_section, "n0", "importance.rm", 100.0, minimum=0.0, strict=True),
        iterations=_number(rm_section, "iterations", "importance.rm", 10_000, int, minimum=1),
        averaging=_flag(rm_section, "averaging", "importance.rm", False),
        normalize=_flag(rm_section, "normalize", "importance.rm", True),
    )
    default_levels = tuple(range(1, mlmc.initial_levels + 1))
    importance = ImportanceSettings(
        method=_choice(imp_section, "method", "importance", "saa", METHODS),
        pilot_size=_number(imp_section, "pilot_size", "importance", 10_000, int, minimum=2),
        tol=_number(imp_section, "tol", "importance", 1e-6, minimum=0.0, strict=True),
        max_iter=_number(imp_section, "max_iter", "importance", 50, int, minimum=1),
        levels=_int_list(imp_section, "levels", "importance", default_levels, 1),
        baseline_samples=_number(imp_section, "baseline_samples", "importance", 0, int, minimum=0),
        rm=rm,
    )
    for i, level in enumerate(importance.levels):
        if level > mlmc.max_level:
            raise ConfigError(f"importance.levels[{i}]", f"超过 mlmc.max_level={mlmc.max_level}")

    risk_section = _section(data, "risk", RISK_KEYS)
    adaptive_section = _section(risk_section, "adaptive", ADAPTIVE_KEYS, "risk.")
    adaptive = _build(
        "risk.adaptive",
        AdaptiveConfig,
        confidence_const=_number(adaptive_section, "confidence_const", "risk.adaptive", 3.0, minimum=0.0, strict=True),
        exponent_r=_number(adaptive_section, "exponent_r", "risk.adaptive", 1.25),
        moment_q=_number(adaptive_section, "moment_q", "risk.adaptive", 6.0),
        eps_cap_const=_number(adaptive_section, "eps_cap_const", "risk.adaptive", 1.0, minimum=0.0, strict=True),
        n0_inner=_number(adaptive_section, "n0_inner", "risk.adaptive", 16, int, minimum=2),
        mode=_choice(adaptive_section, "mode", "risk.adaptive", "estimated", ("estimated", "perfect")),
    )
    nested = _build(
        "risk",
        NestedConfig,
        n0_inner=_number(risk_section, "n0_inner", "risk", 16, int, minimum=2),
        pilot_outer=_number(risk_section, "pilot_outer", "risk", 2000, int, minimum=2),
        pilot_scenarios=_number(risk_section, "pilot_scenarios", "risk", 2000, int, minimum=2),
        pilot_inner=_number(risk_section, "pilot_inner", "risk", 256, int, minimum=2),
        initial_levels=_number(risk_section, "initial_levels", "risk", 3, int, minimum=1),
        max_level=_number(risk_section, "max_level", "risk", 12, int, minimum=0),
        seed=seed,
        workers=threads,
    )
    risk_problem = _choice(risk_section, "problem", "risk", "gaussian", tuple(PROBLEM_BUILDERS))
    risk_params = _params(risk_section, "risk")
    threshold = _number(risk_section, "threshold", "risk", 1.0)
    problem = _build("risk.params", build_problem, risk_problem, threshold, risk_params)
    risk = RiskSettings(
        problem=risk_problem,
        params=risk_params,
        method=_choice(risk_section, "method", "risk", "adaptive", RISK_METHODS),
        threshold=threshold,
        quantile=_number(risk_section, "quantile", "risk", 0.05, minimum=0.0, strict=True),
        outer_const=_number(risk_section, "outer_const", "risk", 1.0, minimum=0.0, strict=True),
        inner_const=_number(risk_section, "inner_const", "risk", 1.0, minimum=0.0, strict=True),
        nested=nested,
        adaptive=adaptive,
    )
    if not risk.quantile < 1.0:
        raise ConfigError("risk.quantile", f"必须在 (0, 1) 内: {risk.quantile}")
    if adaptive.mode == "perfect" and problem.oracle is None:
        raise ConfigError("risk.adaptive.mode", "perfect 模式需要带解析 oracle 的问题")

    rates_section = _section(data, "rates", RATES_KEYS)
    rates = RatesSettings(
        target=_choice(rates_section, "target", "rates", "pricing", RATES_TARGETS),
        levels=_int_list(rates_section, "levels", "rates", (1, 2, 3, 4, 5, 6), 0),
        samples=_number(rates_section, "samples", "rates", 100_000, int, minimum=2),
    )
    if len(rates.levels) < 3:
        raise ConfigError("rates.levels", "速率拟合至少需要 3 层")
    if rates.target == "pricing" and (min(rates.levels) < 1 or max(rates.levels) > mlmc.max_level):
        raise ConfigError("rates.levels", f"定价层号必须在 1~{mlmc.max_level} 之间")

    return ExperimentConfig(
        experiment=experiment,
        model_name=model_name,
        model_params=model_params,
        payoff_name=payoff_name,
        payoff_params=payoff_params,
        eps=eps,
        mlmc=mlmc,
        importance=importance,
        risk=risk,
        rates=rates,
        seed=seed,
        output_dir=output_dir,
        replicates=replicates,
        threads=threads,
    )


def load_config(path: str, overrides: dict | None = None) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError("<file>", f"无法读取配置文件 {path}: {exc}") from exc
    return parse_config(text, overrides)


# ---------------------------------------------------------------------------
# 报告
# ---------------------------------------------------------------------------
@dataclass
class ReportRecord:
    experiment: str
    replicate: int
    seed: int
    config_hash: str
    started_at: str
    finished_at: str
    results: list[dict]
    config: dict

    def to_dict(self) -> dict:
        return _json_safe(asdict(self))


def _json_safe(value):
    if isinstance(value, dict):
        return {str(key): _json_safe(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(item) for item in value]
    if isinstance(value, np.ndarray):
        return _json_safe(value.tolist())
    if isinstance(value, (np.floating, float)):
        value = float(value)
        return value if math.isfinite(value) else None
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.bool_):
        return bool(value)
    return value


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


# ---------------------------------------------------------------------------
# 分派
# ---------------------------------------------------------------------------
def pricing_oracle(config: ExperimentConfig) -> float | None:
    """GBM 上看涨/看跌/数字期权的 Black–Scholes 价格（贴现率取 μ）"""
    if config.model_name != "gbm" or config.payoff_name not in ("call", "put", "digital"):
        return None
    params, payoff = config.model_params, config.payoff_params
    sigma = float(params.get("sigma", 0.2))
    if sigma <= 0 or not payoff.get("discounted", True):
        return None
    price = black_scholes_price(
        float(params.get("x0", 1.0)),
        float(payoff.get("strike", 1.0)),
        float(params.get("mu", 0.05)),
        sigma,
        float(params.get("T", 1.0)),
        config.payoff_name,
    )
    if config.payoff_name == "digital":
        price *= float(payoff.get("payout", 1.0))
    return price


def _pricing_block(estimate: MlmcEstimate, oracle: float | None) -> dict:
    rates = estimate.rates.to_dict() if estimate.rates is not None else {}
    return {
        "eps": estimate.eps,
        "estimate": estimate.value,
        "std_error": estimate.std_error,
        "total_cost": estimate.total_cost,
        "bias_estimate": estimate.bias_estimate,
        "alpha_used": estimate.alpha_used,
        "rates": rates,
        "levels": estimate.level_table(),
        "oracle": oracle,
        "abs_error": None if oracle is None else abs(estimate.value - oracle),
        "diagnostics": estimate.diagnostics,
    }


def _risk_block(estimate: RiskEstimate, eps: float, oracle: float | None) -> dict:
    rates = estimate.estimate.rates.to_dict() if estimate.estimate and estimate.estimate.rates else {}
    return {
        "eps": eps,
        "estimate": estimate.eta,
        "std_error": estimate.std_error,
        "total_cost": estimate.total_cost,
        "method": estimate.method,
        "threshold": estimate.threshold,
        "variance_slope": estimate.variance_slope,
        "rates": rates,
        "levels": estimate.level_table(),
        "cost_breakdown": {
            "inner_samples": estimate.total_inner_samples,
            "outer_samples": estimate.total_outer_samples,
        },
        "oracle": oracle,
        "abs_error": None if oracle is None else abs(estimate.eta - oracle),
    }


def _theta_schedule(config: ExperimentConfig, model, payoff, cfg: MlmcConfig) -> ThetaSchedule:
    settings = config.importance
    levels = list(settings.levels)
    if settings.method == "saa":
        return build_saa_schedule(model, payoff, cfg, levels, settings.pilot_size, settings.tol, settings.max_iter)
    if settings.method == "robbins_monro":
        return build_rm_schedule(model, payoff, cfg, levels, settings.rm)
    return ThetaSchedule.zero(model.dim_noise)


def _run_rates(config: ExperimentConfig, seed: int) -> dict:
    settings = config.rates
    levels = list(settings.levels)
    if settings.target == "pricing":
        model = build_model(config.model_name, config.model_params)
        payoff = build_payoff(config.payoff_name, config.payoff_params, model)
        sampler = PricingLevelSampler(model, payoff, replace(config.mlmc, seed=seed))
        stats = profile_levels(sampler, levels, settings.samples)
    else:
        problem = build_problem(config.risk.problem, config.risk.threshold, config.risk.params)
        nested = replace(config.risk.nested, seed=seed, max_level=max(config.risk.nested.max_level, max(levels)))
        if settings.target == "risk_uniform":
            sampler = UniformNestedSampler(problem, nested)
        else:
            sampler = AdaptiveNestedSampler(problem, nested, config.risk.adaptive, config.eps[0])
        stats = profile_risk_levels(sampler, levels, settings.samples)
    rates = fit_rates(stats)
    return {
        "eps": None,
        "target": settings.target,
        "rates": rates.to_dict(),
        "variance_slope": -rates.beta if math.isfinite(rates.beta) else None,
        "levels": [
            {
                "level": s.level,
                "N": s.count,
                "mean": s.mean(),
                "var": s.variance(),
                "cost": s.mean_cost(),
                "kurtosis": s.kurtosis(),
                "theta_norm": None,
            }
            for s in stats
        ],
        "total_cost": float(sum(s.cost_total for s in stats)),
    }


def _run_replicate(config: ExperimentConfig, replicate: int) -> ReportRecord:
    seed = config.seed + replicate
    started = _now()
    cfg = replace(config.mlmc, seed=seed, workers=config.threads)
    results: list[dict] = []
    kind = config.experiment

    if kind == "rates_sweep":
        results.append(_run_rates(config, seed))
    elif kind in ("price", "price_is", "price_is_adaptive"):
        model = build_model(config.model_name, config.model_params)
        payoff = build_payoff(config.payoff_name, config.payoff_params, model)
        oracle = pricing_oracle(config)
        schedule = _theta_schedule(config, model, payoff, cfg) if kind == "price_is" else None
        for eps in config.eps:
            if kind == "price":
                estimate = run_mlmc(model, payoff, cfg, eps)
            elif kind == "price_is":
                estimate = run_is_mlmc(model, payoff, cfg, eps, schedule, config.importance.baseline_samples)
            else:
                estimate = run_adaptive_is_mlmc(model, payoff, cfg, eps, config.importance.rm)
            results.append(_pricing_block(estimate, oracle))
    else:
        settings = config.risk
        problem = build_problem(settings.problem, settings.threshold, settings.params)
        nested = replace(settings.nested, seed=seed, workers=config.threads)
        for eps in config.eps:
            if kind == "risk_var_cvar":
                result = var_cvar(problem, settings.quantile, eps, settings.adaptive, nested)
                oracle_pair = None
                if problem.oracle is not None and problem.oracle.var_cvar is not None:
                    oracle_pair = problem.oracle.var_cvar(settings.quantile)
                results.append(
                    {
                        "eps": eps,
                        "estimate": result.value_at_risk,
                        "std_error": None,
                        "total_cost": result.total_cost,
                        "var_cvar": result.to_dict(),
                        "levels": [],
                        "oracle": None if oracle_pair is None else {"var": oracle_pair[0], "cvar": oracle_pair[1]},
                        "abs_error": None if oracle_pair is None else {
                            "var": abs(result.value_at_risk - oracle_pair[0]),
                            "cvar": abs(result.cvar - oracle_pair[1]),
                        },
                    }
                )
                continue
            if settings.method == "nested_mc":
                outer = math.ceil(settings.outer_const * eps**-2)
                inner = max(2, math.ceil(settings.inner_const / eps))
                estimate = nested_mc(problem, outer, inner, seed=seed, workers=config.threads)
            elif settings.method == "nested_mc_iterative":
                estimate = nested_mc_iterative(
                    problem,
                    eps,
                    outer_const=settings.outer_const,
                    inner_const=settings.inner_const,
                    n0_inner=nested.n0_inner,
                    seed=seed,
                    workers=config.threads,
                )
            elif settings.method == "uniform":
                estimate = nested_mlmc_uniform(problem, eps, nested)
            else:
                estimate = nested_mlmc_adaptive(problem, eps, settings.adaptive, nested)
            oracle = problem.oracle.eta(problem.threshold) if problem.oracle is not None else None
            results.append(_risk_block(estimate, eps, oracle))

    return ReportRecord(
        experiment=kind,
        replicate=replicate,
        seed=seed,
        config_hash=config.config_hash(),
        started_at=started,
        finished_at=_now(),
        results=_json_safe(results),
        config=config.to_dict(),
    )


def run_experiment(config: ExperimentConfig) -> list[ReportRecord]:
    """逐个重复实验运行估计器（并发），返回按 replicate 排序的报告"""
    logger.info(
        "实验开始: kind=%s replicates=%d eps=%s seed=%d threads=%d",
        config.experiment,
        config.replicates,
        list(config.eps),
        config.seed,
        config.threads,
    )

    def run_one(replicate: int) -> ReportRecord:
        try:
            return _run_replicate(config, replicate)
        except MlmcError as exc:
            exc.add_note(f"experiment={config.experiment} replicate={replicate} seed={config.seed + replicate}")
            logger.error("实验失败: kind=%s replicate=%d: %s", config.experiment, replicate, exc)
            raise

    workers = min(config.threads, config.replicates)
    if workers <= 1:
        records = [run_one(r) for r in range(config.replicates)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            records = list(executor.map(run_one, range(config.replicates)))
    logger.info("实验完成: kind=%s replicates=%d", config.experiment, len(records))
    return records


def _csv_value(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return value


def write_reports(records: list[ReportRecord], output_dir: str) -> dict[str, str]:
    """写出 report_<r>.json、levels.csv（长表）与 summary.csv，返回各文件路径"""
    os.makedirs(output_dir, exist_ok=True)
    paths = {}
    for record in records:
        path = os.path.join(output_dir, f"report_{record.replicate}.json")
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(record.to_dict(), fh, ensure_ascii=False, indent=2, sort_keys=True)
        paths[f"report_{record.replicate}"] = path

    levels_path = os.path.join(output_dir, "levels.csv")
    summary_path = os.path.join(output_dir, "summary.csv")
    with open(levels_path, "w", encoding="utf-8", newline="") as levels_fh, open(
        summary_path, "w", encoding="utf-8", newline=""
    ) as summary_fh:
        levels_fh.write(f"# mlmc-levels schema v{CSV_SCHEMA_VERSION}: {','.join(LEVELS_COLUMNS)}\n")
        summary_fh.write(f"# mlmc-summary schema v{CSV_SCHEMA_VERSION}: {','.join(SUMMARY_COLUMNS)}\n")
        levels_writer = csv.DictWriter(levels_fh, fieldnames=LEVELS_COLUMNS, extrasaction="ignore")
        summary_writer = csv.DictWriter(summary_fh, fieldnames=SUMMARY_COLUMNS, extrasaction="ignore")
        levels_writer.writeheader()
        summary_writer.writeheader()
        for record in records:
            for block in record.results:
                for row in block.get("levels", []):
                    levels_writer.writerow(
                        {
                            key: _csv_value(value)
                            for key, value in {
                                **row,
                                "experiment": record.experiment,
                                "replicate": record.replicate,
                                "eps": block.get("eps"),
                            }.items()
                        }
                    )
                rates = block.get("rates") or {}
                oracle = block.get("oracle")
                abs_error = block.get("abs_error")
                summary_writer.writerow(
                    {
                        "experiment": record.experiment,
                        "replicate": record.replicate,
                        "eps": _csv_value(block.get("eps")),
                        "estimate": _csv_value(block.get("estimate")),
                        "std_error": _csv_value(block.get("std_error")),
                        "total_cost": _csv_value(block.get("total_cost")),
                        "alpha": _csv_value(rates.get("alpha")),
                        "beta": _csv_value(rates.get("beta")),
                        "gamma": _csv_value(rates.get("gamma")),
                        "oracle": _csv_value(oracle if not isinstance(oracle, dict) else oracle.get("var")),
                        "abs_error": _csv_value(abs_error if not isinstance(abs_error, dict) else abs_error.get("var")),
                    }
                )
    paths["levels"] = levels_path
    paths["summary"] = summary_path
    logger.info("报告已写出: %s", output_dir)
    return paths


# ---------------------------------------------------------------------------
# 开销扫描
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class SweepResult:
    slope: float
    intercept: float
    eps: list[float]
    costs: list[float]

    def to_dict(self) -> dict:
        return asdict(self)


def fit_cost_slope(eps_values, costs) -> tuple[float, float]:
    """log cost = slope·log eps + intercept 的最小二乘拟合"""
    eps_values = np.asarray(eps_values, dtype=float)
    costs = np.asarray(costs, dtype=float)
    if eps_values.size < 3:
        raise InvalidArgumentError(f"开销扫描至少需要 3 个 eps，当前 {eps_values.size} 个")
    if np.any(eps_values <= 0) or np.any(costs <= 0):
        raise InvalidArgumentError("eps 与 cost 必须为正数")
    if eps_values.max() / eps_values.min() < 4.0:
        raise InvalidArgumentError("eps 扫描范围必须至少跨越 4 倍")
    slope, intercept = np.polyfit(np.log(eps_values), np.log(costs), 1)
    return float(slope), float(intercept)


def check_sweep(config: ExperimentConfig) -> None:
    eps_values = list(config.eps)
    if len(eps_values) < 3 or max(eps_values) / min(eps_values) < 4.0:
        raise InvalidArgumentError("开销扫描需要至少 3 个 eps 且跨越 ≥ 4 倍")
    if config.experiment == "rates_sweep":
        raise InvalidArgumentError("rates_sweep 实验不支持开销扫描")


def sweep_and_fit(config: ExperimentConfig, records: list[ReportRecord] | None = None) -> SweepResult:
    """按 eps 对各重复实验的总开销取平均后拟合斜率；records 为空时先运行实验"""
    check_sweep(config)
    eps_values = list(config.eps)
    records = run_experiment(config) if records is None else records
    costs = []
    for eps in eps_values:
        per_replicate = [
            block["total_cost"] for record in records for block in record.results if block.get("eps") == eps
        ]
        costs.append(float(np.mean(per_replicate)))
    slope, intercept = fit_cost_slope(eps_values, costs)
    logger.info("开销扫描: slope=%.4f eps=%s", slope, eps_values)
    return SweepResult(slope=slope, intercept=intercept, eps=eps_values, costs=costs)
