"""Initial data used by the oracles, the bundled configs and the tests."""
from __future__ import annotations

import numpy as np

from .grid import Domain, Field, derivative_array, norm
from .kernels import leray_project

__all__ = [
    "taylor_green",
    "taylor_green_pressure",
    "random_divfree",
    "decaying_vortex",
    "make_initial",
]


def taylor_green(domain: Domain, nu: float = 0.0, t: float = 0.0, amplitude: float = 1.0) -> Field:
    """2-D Taylor-Green vortex ``(cos x sin y, -sin x cos y) exp(-2 nu t)``."""
    if domain.kind != "torus" or domain.n != 2:
        raise ValueError("Taylor-Green lives on the 2-torus")
    x, y = domain.coords()
    f = amplitude * np.exp(-2 * nu * t)
    return Field(domain, np.stack([f * np.cos(x) * np.sin(y), -f * np.sin(x) * np.cos(y)]))


def taylor_green_pressure(domain: Domain, nu: float = 0.0, t: float = 0.0, amplitude: float = 1.0) -> Field:
    """Mean-zero pressure ``-(cos 2x + cos 2y) exp(-4 nu t) / 4`` of the vortex."""
    x, y = domain.coords()
    f = amplitude**2 * np.exp(-4 * nu * t)
    return Field(domain, (-0.25 * f * (np.cos(2 * x) + np.cos(2 * y)))[None])


def random_divfree(domain: Domain, seed: int = 0, kmax: int = 3, h2: float = 3.0) -> Field:
    """Random band-limited divergence-free torus field scaled to ``|v|_(H^2) = h2``."""
    if domain.kind != "torus":
        raise ValueError("random_divfree builds torus data")
    rng = np.random.default_rng(seed)
    n = domain.n
    vh = np.zeros((n, *domain.shape), complex)
    for idx in np.ndindex(*(2 * kmax + 1,) * n):
        k = tuple(i - kmax for i in idx)
        if any(k):
            pos = tuple(kk % s for kk, s in zip(k, domain.shape))
            vh[(slice(None), *pos)] = rng.normal(size=n) + 1j * rng.normal(size=n)
    v = np.fft.ifftn(vh, axes=tuple(range(1, n + 1))).real
    f = leray_project(Field(domain, v))
    return f * (h2 / norm(f, "Hm", m=2))


def decaying_vortex(domain: Domain, q: float = 6.0, amplitude: float = 1.0, symmetry: int = 6, eps: float = 0.5, core: float = 1.0) -> Field:
    """Divergence-free 2-D box data with ``|D^a v| ~ |x|^(-q)``.

    ``v`` is the perpendicular gradient of ``psi = (1 + r^2)^((1-q)/2) (1 + eps
    g(r) cos(symmetry theta))`` with ``g(r) = r^s / (1 + r^s)`` and ``r``
    measured in units of ``core``.  The
    rotational symmetry of order ``symmetry`` removes the low multipoles of the
    pressure source; without it the Leray term of generic data decays only
    like ``|x|^(-(n+1))``.
    """
    if domain.kind != "box" or domain.n != 2:
        raise ValueError("decaying_vortex builds 2-D box data")
    x, y = (c / core for c in domain.coords())
    r2 = x**2 + y**2
    theta = np.arctan2(y, x)
    rs = r2 ** (symmetry / 2)
    psi = (1.0 + r2) ** ((1.0 - q) / 2) * (1.0 + eps * rs / (1.0 + rs) * np.cos(symmetry * theta))
    # grid derivatives commute, so the discrete divergence vanishes exactly
    v = np.stack([-derivative_array(psi, domain, 1), derivative_array(psi, domain, 0)])
    return Field(domain, amplitude * v)


def make_initial(spec: dict, domain: Domain) -> Field:
    """Build initial data from a config entry ``{"kind": ..., ...}``."""
    spec = dict(spec)
    kind = spec.pop("kind")
    if kind == "zero":
        return Field.zeros(domain, domain.n)
    if kind == "taylor_green":
        return taylor_green(domain, amplitude=spec.pop("amplitude", 1.0))
    if kind == "random_divfree":
        return random_divfree(domain, seed=spec.pop("seed", 0), kmax=spec.pop("kmax", 3), h2=spec.pop("h2", 3.0))
    if kind == "decaying_vortex":
        return decaying_vortex(domain, q=spec.pop("q", 6.0), amplitude=spec.pop("amplitude", 1.0), symmetry=spec.pop("symmetry", 6), eps=spec.pop("eps", 0.5), core=spec.pop("core", 1.0))
    raise ValueError(f"unknown initial data kind {kind!r}")
