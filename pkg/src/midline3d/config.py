"""Run configuration: TOML keys, documented ranges, and assembly helpers.

Keys use the catalogued parameter names spelled out (sigma_min, omega_sm,
lambda_p, ...). Every value must sit inside its documented range or equal its
documented fixed value; setting ``allow_out_of_range = true`` (or the
matching CLI flag) lifts the check for explicitly experimental runs.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .curvemodel import CentreShiftConfig, CurveConstraints
from .losses import LossWeights
from .optimizer import AblationToggles, OptimizerConfig, PipelineSettings
from .renderer import RenderLimits


class ConfigRangeError(ValueError):
    """A configured value violates its documented range."""


@dataclass
class RunConfig:
    """Flat bag of every knob a run needs; see module docstring for ranges."""

    # geometry / imaging
    w: int = 200
    n: int = 128
    l_min: float = 0.7
    l_max: float = 1.4
    k_max: float = 3.0
    sigma_min: float = 2.5
    iota_min: float = 0.2
    # masking / centre-shift
    theta: float = 0.1
    alpha: int = 4
    beta: float = 0.075
    gamma: int = 2
    # loss weights
    omega_px: float = 0.1
    omega_sc: float = 0.01
    omega_sm: float = 10.0
    omega_t: float = 10.0
    omega_i: float = 0.5
    # learning rates
    lambda_p: float = 1e-3
    lambda_r: float = 1e-4
    lambda_eta: float = 1e-5
    lambda_min: float = 1e-6
    # step budgets / schedule
    max_steps_first: int = 2000
    max_steps_frame: int = 500
    length_growth_steps: int = 300
    # first-frame bootstrap rates (optional; hierarchy still enforced)
    lambda_p_first: float | None = None
    lambda_r_first: float | None = None
    lambda_eta_first: float | None = None
    # optional first-frame refinement anneal
    refine_steps_first: int = 0
    lambda_p_refine: float = 8e-3
    lambda_r_refine: float = 3e-3
    lambda_eta_refine: float = 2e-3
    # render initialization
    sigma_init: float = 5.0
    iota_init: float = 0.65
    rho_init: float = 1.2
    sigma_cap: float = 12.0
    # run behaviour
    seed: int = 0
    invert: bool = True
    unlock_cameras_first_frame: bool = False
    ablate: str = ""
    allow_out_of_range: bool = False

    def __post_init__(self) -> None:
        if not self.allow_out_of_range:
            self.validate_ranges()

    def validate_ranges(self) -> None:
        """Enforce the documented parameter ranges / fixed values."""
        checks = [
            ("w", self.w, 200, 350),
            ("l_min", self.l_min, 0.5, 1.0),
            ("l_max", self.l_max, 1.0, 2.0),
            ("sigma_min", self.sigma_min, 2.0, 4.0),
            ("iota_min", self.iota_min, 0.15, 0.3),
            ("alpha", self.alpha, 3, 6),
            ("gamma", self.gamma, 1, 2),
            ("omega_sm", self.omega_sm, 10.0, 100.0),
            ("omega_t", self.omega_t, 10.0, 100.0),
            ("omega_i", self.omega_i, 0.1, 1.0),
        ]
        for name, value, lo, hi in checks:
            if not (lo <= value <= hi):
                raise ConfigRangeError(
                    f"{name}={value} outside documented range [{lo}, {hi}] "
                    f"(set allow_out_of_range to override)"
                )
        if not (0.05 < self.beta < 0.1):
            raise ConfigRangeError(
                f"beta={self.beta} outside documented range (0.05, 0.1)"
            )
        fixed = [
            ("n", self.n, 128),
            ("k_max", self.k_max, 3.0),
            ("theta", self.theta, 0.1),
            ("omega_px", self.omega_px, 0.1),
            ("omega_sc", self.omega_sc, 0.01),
            ("lambda_p", self.lambda_p, 1e-3),
            ("lambda_r", self.lambda_r, 1e-4),
            ("lambda_eta", self.lambda_eta, 1e-5),
            ("lambda_min", self.lambda_min, 1e-6),
        ]
        for name, value, expect in fixed:
            if value != expect:
                raise ConfigRangeError(
                    f"{name}={value} differs from the documented value {expect} "
                    f"(set allow_out_of_range to override)"
                )

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def settings(self) -> PipelineSettings:
        """Assemble optimizer-facing settings from the flat config."""
        first_rates = None
        if self.lambda_p_first is not None:
            first_rates = (
                self.lambda_p_first,
                self.lambda_r_first if self.lambda_r_first is not None else self.lambda_r,
                self.lambda_eta_first if self.lambda_eta_first is not None else self.lambda_eta,
            )
        return PipelineSettings(
            constraints=CurveConstraints(
                n_vertices=self.n, l_min=self.l_min, l_max=self.l_max, k_max=self.k_max
            ),
            limits=RenderLimits(
                sigma_min=self.sigma_min, iota_min=self.iota_min, image_size=self.w
            ),
            weights=LossWeights(
                w_px=self.omega_px,
                w_sc=self.omega_sc,
                w_sm=self.omega_sm,
                w_t=self.omega_t,
                w_i=self.omega_i,
            ),
            shift_cfg=CentreShiftConfig(alpha=self.alpha, beta=self.beta, gamma=self.gamma),
            opt=OptimizerConfig(
                lambda_p=self.lambda_p,
                lambda_r=self.lambda_r,
                lambda_eta=self.lambda_eta,
                lambda_min=self.lambda_min,
                max_steps_first=self.max_steps_first,
                max_steps_frame=self.max_steps_frame,
                length_growth_steps=self.length_growth_steps,
                first_frame_rates=first_rates,
                sigma_cap=self.sigma_cap,
                refine_steps_first=self.refine_steps_first,
                refine_rates=(
                    self.lambda_p_refine,
                    self.lambda_r_refine,
                    self.lambda_eta_refine,
                ),
            ),
            toggles=AblationToggles.from_letters(self.ablate),
            mask_threshold=self.theta,
            render_init=(self.sigma_init, self.iota_init, self.rho_init),
        )


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """RunConfig from a TOML file (optional) plus explicit overrides."""
    values: dict = {}
    if path is not None:
        with open(path, "rb") as fh:
            values.update(tomllib.load(fh))
    if overrides:
        values.update({k: v for k, v in overrides.items() if v is not None})
    known = {f.name for f in fields(RunConfig)}
    unknown = set(values) - known
    if unknown:
        raise ConfigRangeError(f"unknown config keys: {sorted(unknown)}")
    return RunConfig(**values)
