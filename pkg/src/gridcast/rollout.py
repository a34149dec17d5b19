"""Greedy mixed-horizon latent rollout.

A forecast of dt hours is decomposed greedily: as many six-hour processor
applications as fit, then one-hour applications for the remainder, run
back to back in latent space.  No decoding or re-encoding happens between
steps; the only grid-space work is one encode at the start and one decode
at the end.

Each step is a checkpointed segment, so long rollouts keep a constant
number of live intermediates; pass an OffloadEngine to spill segment inputs
to host storage as well.
"""

from __future__ import annotations

from . import autodiff as ad
from .errors import ConfigError
from .model import (
    DecodedFields,
    LatentState,
    ModelConfig,
    PRIMARY_SOURCE,
    WeatherState,
    decode,
    encode,
    process,
)
from .offload import OffloadEngine

__all__ = ["greedy_plan", "plan_hours", "rollout", "forecast"]


def greedy_plan(dt: int, max_dt: int = 336) -> tuple[int, ...]:
    """Horizon sequence for a dt-hour forecast: sixes first, then ones."""
    if not isinstance(dt, (int,)) or isinstance(dt, bool):
        raise ConfigError(f"dt must be an integer hour count, got {dt!r}")
    if dt < 0:
        raise ConfigError(f"dt must be nonnegative, got {dt}")
    if dt > max_dt:
        raise ConfigError(f"dt {dt} exceeds the configured cap {max_dt}")
    return (6,) * (dt // 6) + (1,) * (dt % 6)


def plan_hours(plan) -> int:
    return sum(plan)


def _check_plan(plan, params: dict, cfg: ModelConfig) -> None:
    for h in plan:
        if h not in cfg.horizons:
            raise ConfigError(f"plan step {h} h not among configured horizons {cfg.horizons}")
        if f"proc{h}.blk0.ln1.gain" not in params:
            raise ConfigError(f"parameters carry no {h} h processor, required by the plan")


def rollout(lat: LatentState, plan, params: dict, cfg: ModelConfig,
            engine: OffloadEngine | None = None) -> LatentState:
    """Apply the plan's processors in sequence, entirely in latent space.

    The empty plan returns the input state unchanged.  Every step is a
    checkpoint segment; the composition is bitwise identical to calling the
    processors back to back without checkpointing.
    """
    plan = tuple(plan)
    _check_plan(plan, params, cfg)
    if not plan:
        return lat
    ext = lat.extents

    def make_step(h):
        def step(tokens):
            return process(LatentState(tokens, 0, ext), params, cfg, h).tokens
        return step

    if engine is not None:
        tokens = engine.run_segments([make_step(h) for h in plan], lat.tokens)
    else:
        tokens = lat.tokens
        for h in plan:
            tokens = ad.checkpoint_segment(make_step(h), tokens)
    return LatentState(tokens, lat.valid_time + plan_hours(plan), ext)


def forecast(state: WeatherState, dt: int, params: dict, cfg: ModelConfig,
             source: str = PRIMARY_SOURCE,
             engine: OffloadEngine | None = None) -> DecodedFields:
    """encode -> greedy latent rollout -> decode."""
    plan = greedy_plan(dt, cfg.max_dt)
    lat = encode(state, params, cfg, source=source)
    lat = rollout(lat, plan, params, cfg, engine=engine)
    return decode(lat, params, cfg)
