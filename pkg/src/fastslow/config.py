"""Experiment configuration: YAML loading, validation, and object builders.

Configs are nested key-value documents.  Validation is eager and names the
offending key; builders turn blocks into driver factories, mode bases,
velocity fields and coupling specs.  Everything random derives from the
single experiment seed, so (config, seed) fully determines every output.
"""

from __future__ import annotations

import math
from dataclasses import replace

import numpy as np
import yaml

from .drivers import (
    DoublingMap,
    FastDriver,
    FirstZeroCrossing,
    FixedLag,
    Lorenz63,
    ObservableChannel,
    OuSurrogate,
    channel_statistics,
    default_truncation,
)
from .errors import ConfigError
from .modes import ModeBasis, TrigMode, random_low_wavenumber_basis
from .multiscale import CouplingSpec
from .seeding import ROLE_CALIBRATION, substream
from .velocity import make_velocity_field

__all__ = [
    "EXPERIMENT_KINDS",
    "load_config",
    "dump_config",
    "validate_config",
    "build_basis",
    "build_velocity",
    "build_channels",
    "build_driver_factory",
    "build_coupling",
    "build_truncation",
    "probe_axes",
]

EXPERIMENT_KINDS = (
    "simulate-multiscale",
    "estimate-coefficients",
    "simulate-sde",
    "converge",
    "eof",
    "centering-check",
)

_REQUIRED_BLOCKS = {
    "simulate-multiscale": ("driver", "modes", "velocity", "integration", "ensemble"),
    "estimate-coefficients": ("driver", "modes", "velocity", "estimation"),
    "simulate-sde": ("sde",),
    "converge": (
        "driver",
        "modes",
        "velocity",
        "integration",
        "ensemble",
        "estimation",
        "converge",
        "sde",
    ),
    "eof": ("driver", "modes", "velocity", "integration", "ensemble", "eof"),
    "centering-check": ("driver", "modes", "centering"),
}


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            cfg = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file {path} is not valid YAML: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"config root must be a mapping, got {type(cfg).__name__}")
    return cfg


def dump_config(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=True)


def _require(cfg: dict, key: str, context: str = "config"):
    if key not in cfg or cfg[key] is None:
        raise ConfigError(f"{context} is missing required key '{key}'")
    return cfg[key]


def validate_config(cfg: dict, kind: str) -> None:
    """Check the blocks the chosen experiment kind needs are present."""
    if kind not in EXPERIMENT_KINDS:
        raise ConfigError(
            f"unknown experiment kind '{kind}'; choose one of {EXPERIMENT_KINDS}"
        )
    declared = cfg.get("experiment")
    if declared is not None and declared != kind:
        raise ConfigError(
            f"config declares experiment '{declared}' but '{kind}' was requested"
        )
    for block in _REQUIRED_BLOCKS[kind]:
        _require(cfg, block)
    if kind == "converge":
        eps_list = _require(cfg["converge"], "eps_list", "converge block")
        if len(eps_list) < 3:
            raise ConfigError("converge.eps_list needs at least 3 entries")
        arr = [float(e) for e in eps_list]
        if any(e <= 0 for e in arr):
            raise ConfigError("converge.eps_list entries must be positive")
        if not all(a > b for a, b in zip(arr, arr[1:])):
            raise ConfigError("converge.eps_list must be strictly decreasing")
    if "seed" in cfg and not isinstance(cfg["seed"], int):
        raise ConfigError("seed must be an integer")


def build_basis(cfg: dict) -> ModeBasis:
    block = _require(cfg, "modes")
    domain = tuple(float(v) for v in _require(block, "domain", "modes block"))
    if "auto" in block and block["auto"]:
        auto = block["auto"]
        return random_low_wavenumber_basis(
            dim=len(domain),
            n_modes=int(_require(auto, "n_modes", "modes.auto")),
            lengths=domain,
            amplitude=float(auto.get("amplitude", 0.5)),
            max_wavenumber=int(auto.get("max_wavenumber", 2)),
            seed=int(auto.get("seed", cfg.get("seed", 0))),
        )
    entries = _require(block, "entries", "modes block")
    modes = []
    for i, e in enumerate(entries):
        modes.append(
            TrigMode(
                wavevector=tuple(int(v) for v in _require(e, "wavevector", f"mode {i}")),
                amplitude=float(e.get("amplitude", 1.0)),
                phase=float(e.get("phase", 0.0)),
                direction=tuple(float(v) for v in _require(e, "direction", f"mode {i}")),
            )
        )
    return ModeBasis(lengths=domain, modes=tuple(modes))


def build_velocity(cfg: dict, dim: int):
    block = cfg.get("velocity") or {"kind": "zero"}
    params = {k: v for k, v in block.items() if k != "kind"}
    for key in ("velocity", "center"):
        if key in params and isinstance(params[key], list):
            params[key] = tuple(float(v) for v in params[key])
    if "matrix" in params:
        params["matrix"] = tuple(tuple(float(v) for v in row) for row in params["matrix"])
    return make_velocity_field(_require(block, "kind", "velocity block"), dim, **params)


def _channel_from_entry(entry: dict) -> ObservableChannel:
    return ObservableChannel(
        coord=int(entry.get("coord", 0)),
        degree=int(entry.get("degree", 1)),
        center=float(entry.get("center", 0.0)),
        scale=float(entry.get("scale", 1.0)),
        bias=float(entry.get("bias", 0.0)),
        bound=(None if entry.get("bound") is None else float(entry["bound"])),
    )


def _analytic_bound(kind: str, ch: ObservableChannel, driver_params: dict) -> float | None:
    """Channel magnitude bound where it is known in closed form."""
    if kind == "doubling_map" and ch.degree == 1:
        hi = max(abs(0.0 - ch.center), abs(1.0 - ch.center))
        return hi / abs(ch.scale)
    if kind == "ou_surrogate" and ch.degree == 1:
        gamma = float(driver_params.get("gamma", 1.0))
        amp = float(driver_params.get("amplitude", 1.0))
        std = amp / math.sqrt(2.0 * gamma)
        # soft bound: 5 stationary standard deviations
        return (5.0 * std + abs(ch.center)) / abs(ch.scale)
    return None


def _make_raw_driver(block: dict, channels, rng, n: int | None) -> FastDriver:
    kind = _require(block, "kind", "driver block")
    if kind == "lorenz63":
        base = np.asarray(block.get("state", (1.0, 1.0, 25.0)), dtype=float)
        shape = (3,) if n is None else (n, 3)
        state = base + (0.0 if rng is None else rng.uniform(-0.5, 0.5, shape))
        return Lorenz63(
            state,
            channels,
            sigma=float(block.get("sigma", 10.0)),
            rho=float(block.get("rho", 28.0)),
            beta=float(block.get("beta", 8.0 / 3.0)),
            dt_fast=float(block.get("dt_fast", 0.005)),
        )
    if kind == "ou_surrogate":
        state = np.zeros(1) if n is None else np.zeros((n, 1))
        return OuSurrogate(
            gamma=float(block.get("gamma", 1.0)),
            amplitude=float(block.get("amplitude", 1.0)),
            state=state,
            channels=channels,
            rng=rng if rng is not None else np.random.default_rng(0),
            dt_fast=float(block.get("dt_fast", 0.05)),
        )
    if kind == "doubling_map":
        if n is None:
            y0 = block.get("state", 0.3)
            state = float(y0[0] if isinstance(y0, (list, tuple)) else y0)
            if rng is not None:
                state = float(rng.uniform(0.0, 1.0))
        else:
            state = rng.uniform(0.0, 1.0, n)
        return DoublingMap(state, channels)
    raise ConfigError(f"unknown driver kind '{kind}'")


def _build_channel_set(
    driver_block: dict, obs_block: dict, seed: int, cal_seed_salt: int = 0
) -> tuple[ObservableChannel, ...]:
    """Build one channel set, filling auto centers/scales/bounds.

    ``center: auto`` / ``scale: auto`` / missing bounds come from a
    deterministic calibration run (sub-seeded from the experiment seed);
    closed-form bounds are used where the driver admits them.
    """
    entries = _require(obs_block, "channels", "observable block")
    channels = tuple(_channel_from_entry(e) for e in entries)
    need_center = obs_block.get("center") == "auto"
    need_scale = obs_block.get("scale") == "auto"

    if not (need_center or need_scale):
        channels = tuple(
            ch
            if ch.bound is not None
            else replace(ch, bound=_analytic_bound(driver_block["kind"], ch, driver_block))
            for ch in channels
        )
    if not (need_center or need_scale or any(ch.bound is None for ch in channels)):
        return channels

    cal = obs_block.get("calibration") or driver_block.get("calibration") or {}
    probe = _make_raw_driver(
        driver_block, channels, substream(seed, ROLE_CALIBRATION, cal_seed_salt), None
    )
    mean, std, maxdev = channel_statistics(
        probe,
        channels,
        n_samples=int(cal.get("n_samples", 200_000)),
        burn_in=int(cal.get("burn_in", 2_000)),
    )
    out = []
    for i, ch in enumerate(channels):
        center = float(mean[i]) if need_center else ch.center
        scale = float(std[i]) if need_scale else ch.scale
        if scale == 0:
            raise ConfigError(f"channel {i} has zero variance; cannot normalize")
        bound = ch.bound
        if bound is None:
            bound = 1.15 * (float(maxdev[i]) + abs(float(mean[i]) - center)) / abs(scale)
        out.append(replace(ch, center=center, scale=scale, bound=bound))
    return tuple(out)


def build_channels(cfg: dict, seed: int) -> tuple[ObservableChannel, ...]:
    """Observable channels (the lambda map) for the configured driver."""
    driver_block = _require(cfg, "driver")
    obs = _require(driver_block, "observable", "driver block")
    return _build_channel_set(driver_block, obs, seed)


def build_driver_factory(cfg: dict, channels: tuple[ObservableChannel, ...]):
    """Factory (rng, n) -> burnt-in driver, for ensembles and estimation."""
    block = _require(cfg, "driver")
    burn = int(block.get("burn_in", 0))

    def factory(rng, n):
        drv = _make_raw_driver(block, channels, rng, n)
        dt = drv.natural_dt
        for _ in range(burn):
            drv.step(dt)
        return drv

    return factory


def build_coupling(cfg: dict, seed: int, basis: ModeBasis) -> CouplingSpec:
    """Displacement-coefficient evolution; coupled configs are validated
    against the diffeomorphism guard immediately."""
    block = cfg.get("coupling") or {"kind": "frozen"}
    kind = block.get("kind", "frozen")
    if kind == "frozen":
        return CouplingSpec(kind="frozen")
    if "channels" not in block:
        raise ConfigError(
            "coupling block is missing required key 'channels' (the coefficient observables)"
        )
    channels = _build_channel_set(_require(cfg, "driver"), block, seed, cal_seed_salt=1)
    caps = block.get("caps")
    spec = CouplingSpec(
        kind="coupled",
        channels=channels,
        caps=None if caps is None else np.asarray([float(v) for v in caps]),
    )
    spec.validate_against(basis)
    return spec


def build_truncation(block: dict):
    rule = block.get("rule", "efolds")
    if rule == "fixed_lag":
        return FixedLag(int(_require(block, "lag", "truncation block")))
    if rule == "first_zero":
        return FirstZeroCrossing()
    if rule == "efolds":
        efolds = int(block.get("efolds", 8))
        return ("efolds", efolds)
    raise ConfigError(f"unknown truncation rule '{rule}'")


def resolve_truncation(rule, acf):
    """Turn a config truncation into a concrete rule (efolds needs the acf)."""
    if isinstance(rule, tuple) and rule[0] == "efolds":
        return default_truncation(acf, efolds=rule[1])
    return rule


def probe_axes(block: dict, dim: int) -> list[np.ndarray]:
    """Probe lattice axes from {start: [..], stop: [..], num: [..]}."""
    start = [float(v) for v in _require(block, "start", "probes block")]
    stop = [float(v) for v in _require(block, "stop", "probes block")]
    num = [int(v) for v in _require(block, "num", "probes block")]
    if not (len(start) == len(stop) == len(num) == dim):
        raise ConfigError(f"probes start/stop/num must each have {dim} entries")
    return [np.linspace(a, b, n) for a, b, n in zip(start, stop, num)]
