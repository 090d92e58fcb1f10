"""Catalogue of analytic initial/fidelity fields.

A field is named by a descriptor such as ``smoothed_disc(radius=0.3, width=0.1)``.
Points are arrays of shape ``(k, dim)``; ``dim`` is 1 or 2. Centers are given
per coordinate as ``cx``/``cy`` (``cy`` ignored in 1D).
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

__all__ = ["Field", "parse_field", "FIELD_NAMES"]

_DEFAULTS = {
    "zero": {},
    "hat": {"cx": 0.5, "cy": 0.5, "radius": 0.5, "height": 1.0},
    "bump": {"cx": 0.5, "cy": 0.5, "radius": 0.4, "height": 1.0},
    "disc_indicator": {"cx": 0.5, "cy": 0.5, "radius": 0.3, "height": 1.0},
    "smoothed_disc": {"cx": 0.5, "cy": 0.5, "radius": 0.3, "width": 0.1, "height": 1.0},
    "sine_product": {"k": 1.0, "amplitude": 1.0, "lo": 0.0, "hi": 1.0},
    "sine_series": {"cx": 0.5, "cy": 0.5, "radius": 0.3, "height": 1.0, "modes": 8.0},
}
FIELD_NAMES = tuple(_DEFAULTS)


def _radial(x, p):
    c = np.array([p["cx"], p["cy"]][: x.shape[1]])
    d = x - c
    rho = np.sqrt(np.einsum("kd,kd->k", d, d))
    return d, rho


def _unit(d, rho):
    out = np.zeros_like(d)
    nz = rho > 0
    out[nz] = d[nz] / rho[nz, None]
    return out


@dataclass(frozen=True)
class Field:
    name: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.name not in _DEFAULTS:
            raise ValueError(f"unknown field {self.name!r}; choose from {', '.join(FIELD_NAMES)}")
        unknown = set(self.params) - set(_DEFAULTS[self.name])
        if unknown:
            raise ValueError(f"field {self.name!r} has no parameter(s) {sorted(unknown)}")
        merged = {**_DEFAULTS[self.name], **{k: float(v) for k, v in self.params.items()}}
        object.__setattr__(self, "params", merged)
        for key in ("radius", "width"):
            if key in merged and merged[key] <= 0:
                raise ValueError(f"field {self.name!r}: {key} must be positive")
        if self.name == "smoothed_disc" and merged["width"] > 2 * merged["radius"]:
            raise ValueError("smoothed_disc: width must not exceed the diameter")

    @property
    def descriptor(self) -> str:
        if not self.params:
            return self.name
        inner = ", ".join(f"{k}={v!r}" for k, v in self.params.items())
        return f"{self.name}({inner})"

    def __call__(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        p = self.params
        n = self.name
        if n == "zero":
            return np.zeros(len(x))
        if n == "sine_product":
            s = np.sin(p["k"] * np.pi * (x - p["lo"]) / (p["hi"] - p["lo"]))
            return p["amplitude"] * np.prod(s, axis=1)
        if n == "sine_series":
            return p["height"] * _sine_series_eval(x, p)
        _, rho = _radial(x, p)
        r, h = p["radius"], p["height"]
        if n == "hat":
            return h * np.maximum(0.0, 1.0 - rho / r)
        if n == "bump":
            out = np.zeros(len(x))
            inside = rho < r
            out[inside] = h * np.exp(1.0 - 1.0 / (1.0 - (rho[inside] / r) ** 2))
            return out
        if n == "disc_indicator":
            return h * (rho <= r).astype(float)
        # smoothed_disc: cosine ramp over [r - w/2, r + w/2]
        w = p["width"]
        s = np.clip((rho - (r - 0.5 * w)) / w, 0.0, 1.0)
        return h * 0.5 * (1.0 + np.cos(np.pi * s))

    def grad(self, x) -> np.ndarray:
        """Gradient (a.e. for the Lipschitz fields); indicators have none."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        p = self.params
        n = self.name
        if n == "zero":
            return np.zeros_like(x)
        if n == "sine_product":
            a = p["k"] * np.pi / (p["hi"] - p["lo"])
            ph = a * (x - p["lo"])
            s, c = np.sin(ph), np.cos(ph)
            out = np.empty_like(x)
            for i in range(x.shape[1]):
                others = np.prod(np.delete(s, i, axis=1), axis=1)
                out[:, i] = p["amplitude"] * a * c[:, i] * others
            return out
        if n in ("disc_indicator", "sine_series"):
            raise ValueError(f"field {n!r} has no analytic gradient available")
        d, rho = _radial(x, p)
        e = _unit(d, rho)
        r, h = p["radius"], p["height"]
        if n == "hat":
            dr = np.where(rho < r, -h / r, 0.0)
        elif n == "bump":
            dr = np.zeros(len(x))
            inside = rho < r
            q = (rho[inside] / r) ** 2
            dr[inside] = h * np.exp(1.0 - 1.0 / (1.0 - q)) * (-2.0 * rho[inside] / r**2) / (1.0 - q) ** 2
        else:
            w = p["width"]
            t = (rho - (r - 0.5 * w)) / w
            ramp = (t > 0) & (t < 1)
            dr = np.where(ramp, -h * 0.5 * np.pi / w * np.sin(np.pi * np.clip(t, 0, 1)), 0.0)
        return dr[:, None] * e


def _sine_series_eval(x, p):
    """Truncated sine expansion on the unit box of the disc (interval) indicator."""
    m = int(p["modes"])
    j = np.arange(1, m + 1)
    r = p["radius"]
    if x.shape[1] == 1:
        cx = p["cx"]
        coef = 2.0 * (np.cos(j * np.pi * (cx - r)) - np.cos(j * np.pi * (cx + r))) / (j * np.pi)
        return np.sin(np.pi * np.outer(x[:, 0], j)) @ coef
    cx, cy = p["cx"], p["cy"]
    th, wt = np.polynomial.legendre.leggauss(200)
    th = 0.5 * np.pi * th
    wt = 0.5 * np.pi * wt
    xs = cx + r * np.sin(th)
    half = r * np.cos(th)
    # inner y-integral of sin(k pi y) over the chord, done exactly
    inner = 2.0 * np.sin(np.outer(j, np.pi * cy)) * np.sin(np.pi * np.outer(j, half)) / (j[:, None] * np.pi)
    outer = np.sin(np.pi * np.outer(j, xs)) * (r * np.cos(th) * wt)
    coef = 4.0 * outer @ inner.T  # coef[j, k]
    sx = np.sin(np.pi * np.outer(x[:, 0], j))
    sy = np.sin(np.pi * np.outer(x[:, 1], j))
    return np.einsum("pj,jk,pk->p", sx, coef, sy)


_DESC = re.compile(r"^\s*([A-Za-z_]\w*)\s*(?:\((.*)\))?\s*$")


def parse_field(text: str) -> Field:
    """Parse ``name`` or ``name(key=value, ...)``."""
    m = _DESC.match(text)
    if not m:
        raise ValueError(f"cannot parse field descriptor {text!r}")
    name, inner = m.group(1), m.group(2)
    params = {}
    if inner and inner.strip():
        for item in inner.split(","):
            if "=" not in item:
                raise ValueError(f"field parameter {item.strip()!r} is not key=value")
            k, v = item.split("=", 1)
            try:
                params[k.strip()] = float(v)
            except ValueError:
                raise ValueError(f"field parameter {k.strip()!r}: {v.strip()!r} is not a number") from None
    return Field(name, params)
