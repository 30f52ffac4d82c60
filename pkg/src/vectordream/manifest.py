"""Plain-text ``key = value`` run manifests.

Every configurable field has a key with a default; unknown keys are
rejected.  Per-region settings use ``region.<label>.<field>`` keys.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field
from typing import Optional

from .model import ContractError, Style
from .optim import AdamConfig, LrSchedule
from .raster import RenderOptions
from .vpsd import ReFLConfig, ReinitPolicy, RunConfig


class ManifestError(ValueError):
    pass


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _style(text: str) -> str:
    return Style(text.strip()).value


# key -> (parser, default)
FIELDS = {
    "style": (_style, "iconography"),
    "k": (int, 6),
    "total_iters": (int, 700),
    "cfg_scale": (float, 7.5),
    "t_min": (float, 0.05),
    "t_max": (float, 0.95),
    "n_paths": (int, 16),
    "width": (int, 64),
    "height": (int, 64),
    "seed": (int, 0),
    "condition": (str, "prompt"),
    "mode": (str, "vpsd"),
    "weighting": (str, "constant"),
    "augment": (_bool, False),
    "estimator_lr": (float, 1.0),
    "estimator_samples": (int, 4),
    "oracle": (str, ""),
    "reward": (str, "none"),
    "checkpoint_every": (int, 100),
    "warmup_start": (float, 0.01),
    "warmup_end": (float, 0.9),
    "warmup_iters": (int, 50),
    "decay_start": (float, 0.8),
    "decay_end": (float, 0.4),
    "decay_iters": (int, 650),
    "color_lr": (float, 0.1),
    "width_lr": (float, 0.01),
    "adam_beta1": (float, 0.9),
    "adam_beta2": (float, 0.9),
    "adam_eps": (float, 1e-6),
    "reinit_opacity_floor": (float, 0.05),
    "reinit_area_floor_frac": (float, 1e-4),
    "reinit_period": (int, 50),
    "reinit_radius_min": (float, 0.01),
    "reinit_radius_max": (float, 0.05),
    "refl_lambda": (float, 1e-3),
    "refl_lambda_r": (float, 1.0),
    "refl_samples": (int, 0),
    "refl_keep_fraction": (float, 0.5),
    "refl_ddim_steps": (int, 20),
    "refl_margin": (float, 0.0),
    "refl_active_until": (int, 350),
    "refl_period": (int, 1),
    "soft_band": (float, 1.0),
    "supersample": (int, 2),
    "sive_iters": (int, 500),
    "sive_temperature": (float, 0.5),
    "sive_radius_frac": (float, 0.05),
    "sive_routing": (str, "joint"),
    "sive_clamp_points": (_bool, True),
    "region_paths": (int, 8),
}

REGION_FIELDS = {
    "kind": (str, None),
    "n_paths": (int, None),
    "m_points": (int, 0),
    "tau": (float, 0.5),
}

_REGION_KEY = re.compile(r"^region\.([A-Za-z0-9_\-]+)\.([a-z_]+)$")


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class Manifest:
    values: dict = field(default_factory=lambda: {k: d for k, (_, d) in FIELDS.items()})
    regions: dict = field(default_factory=dict)
    base_dir: str = "."

    def __getitem__(self, key):
        return self.values[key]

    def set(self, key: str, raw: str, where: str = "") -> None:
        prefix = f"{where}: " if where else ""
        m = _REGION_KEY.match(key)
        if m:
            label, name = m.groups()
            if name not in REGION_FIELDS:
                raise ManifestError(f"{prefix}unknown region field {name!r} in {key!r}")
            parser = REGION_FIELDS[name][0]
            try:
                self.regions.setdefault(label, {})[name] = parser(raw)
            except ValueError as exc:
                raise ManifestError(f"{prefix}bad value for {key}: {exc}") from None
            return
        if key not in FIELDS:
            raise ManifestError(f"{prefix}unknown key {key!r}")
        parser = FIELDS[key][0]
        try:
            self.values[key] = parser(raw)
        except ValueError as exc:
            raise ManifestError(f"{prefix}bad value for {key}: {exc}") from None

    def override(self, key: str, value) -> None:
        if value is not None:
            self.set(key, str(value))

    def text(self) -> str:
        lines = [f"{k} = {_format(self.values[k])}" for k in FIELDS]
        for label in sorted(self.regions):
            for name in REGION_FIELDS:
                if name in self.regions[label]:
                    lines.append(f"region.{label}.{name} = {_format(self.regions[label][name])}")
        return "\n".join(lines) + "\n"

    # -- config builders -------------------------------------------------

    def schedule(self) -> LrSchedule:
        v = self.values
        return LrSchedule(
            v["warmup_start"], v["warmup_end"], v["warmup_iters"],
            v["decay_start"], v["decay_end"], v["decay_iters"],
            v["color_lr"], v["width_lr"],
        )

    def adam(self) -> AdamConfig:
        return AdamConfig(self["adam_beta1"], self["adam_beta2"], self["adam_eps"])

    def render_options(self) -> RenderOptions:
        return RenderOptions(soft_band=self["soft_band"], supersample=self["supersample"])

    def run_config(self) -> RunConfig:
        v = self.values
        try:
            return RunConfig(
                k=v["k"],
                total_iters=v["total_iters"],
                cfg_scale=v["cfg_scale"],
                t_range=(v["t_min"], v["t_max"]),
                style=v["style"],
                n_paths=v["n_paths"],
                width=v["width"],
                height=v["height"],
                seed=v["seed"],
                condition=v["condition"],
                mode=v["mode"],
                weighting=v["weighting"],
                augment=v["augment"],
                estimator_lr=v["estimator_lr"],
                estimator_samples=v["estimator_samples"],
                schedule=self.schedule(),
                adam=self.adam(),
                reinit=ReinitPolicy(
                    v["reinit_opacity_floor"], v["reinit_area_floor_frac"], v["reinit_period"],
                    (v["reinit_radius_min"], v["reinit_radius_max"]),
                ),
                refl=ReFLConfig(
                    lambda_inner=v["refl_lambda"],
                    lambda_r=v["refl_lambda_r"],
                    samples_w=v["refl_samples"] or None,
                    keep_fraction=v["refl_keep_fraction"],
                    ddim_steps=v["refl_ddim_steps"],
                    margin=v["refl_margin"],
                    active_until_iter=v["refl_active_until"],
                    period=v["refl_period"],
                ),
                render=self.render_options(),
                checkpoint_every=v["checkpoint_every"],
            )
        except ContractError as exc:
            raise ManifestError(str(exc)) from None

    def sive_config(self):
        from .sive import SiveConfig

        v = self.values
        try:
            return SiveConfig(
                iters=v["sive_iters"],
                temperature=v["sive_temperature"],
                radius_frac=v["sive_radius_frac"],
                schedule=self.schedule(),
                adam=self.adam(),
                render=self.render_options(),
                routing=v["sive_routing"],
                clamp_points=v["sive_clamp_points"],
                seed=v["seed"],
            )
        except ContractError as exc:
            raise ManifestError(str(exc)) from None


def parse_manifest(text: str, base_dir: str = ".", source: str = "<manifest>") -> Manifest:
    man = Manifest(base_dir=base_dir)
    seen = set()
    for n, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ManifestError(f"{source}:{n}: expected key = value")
        key, raw = (s.strip() for s in body.split("=", 1))
        if key in seen:
            raise ManifestError(f"{source}:{n}: duplicate key {key!r}")
        seen.add(key)
        man.set(key, raw, f"{source}:{n}")
    return man


def load_manifest(path: Optional[str]) -> Manifest:
    if path is None:
        return Manifest()
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path, encoding="utf-8") as fh:
        return parse_manifest(fh.read(), os.path.dirname(os.path.abspath(path)), path)
