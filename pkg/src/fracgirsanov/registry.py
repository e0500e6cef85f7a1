"""Named functionals, step processes and drifts for configs and the CLI.

Grammar (whitespace ignored):

    functional   const:<c> | [<amp>*]<fn>@<t1>[,<t2>...]
    process      zero | const:<c> | [<amp>*]<fn>@<t1>[,...][:<profile>]
    drift        zero | sin | lin:<a> | sincos@<t>

``fn`` is applied to the sum of the anchor coordinates, so "cos@1.0" is
cos(omega_1) and "tanh@0.25,0.75" is tanh(omega_0.25 + omega_0.75).
Profiles multiply the process by a deterministic function of time.
"""

import math

import numpy as np

from .malliavin import (CylindricalFunctional, StepProcess, constant_functional,
                        zero_process)


def _sech2(x):
    return 1.0 / np.cosh(x) ** 2


# name -> (f, f', sup|f|, sup|f'|)
UNARY = {
    "cos": (np.cos, lambda x: -np.sin(x), 1.0, 1.0),
    "sin": (np.sin, np.cos, 1.0, 1.0),
    "tanh": (np.tanh, _sech2, 1.0, 1.0),
    "gauss": (lambda x: np.exp(-0.5 * x * x), lambda x: -x * np.exp(-0.5 * x * x),
              1.0, math.exp(-0.5)),
    "atan": (np.arctan, lambda x: 1.0 / (1.0 + x * x), 0.5 * math.pi, 1.0),
    "id": (lambda x: x, np.ones_like, math.inf, 1.0),
}

# name -> (p, p')
PROFILES = {
    "flat": (np.ones_like, np.zeros_like),
    "ramp": (lambda t: t, np.ones_like),
    "decay": (lambda t: np.exp(-t), lambda t: -np.exp(-t)),
}


class RegistryError(KeyError):
    """Unknown or malformed registry key."""

    def __str__(self):
        return str(self.args[0])


def _split_amp(key):
    if "*" in key:
        amp, rest = key.split("*", 1)
        try:
            return float(amp), rest
        except ValueError:
            raise RegistryError(f"bad amplitude in {key!r}") from None
    return 1.0, key


def _anchors(text, key):
    try:
        return tuple(float(a) for a in text.split(","))
    except ValueError:
        raise RegistryError(f"bad anchor list in {key!r}") from None


def functional(key):
    """Cylindrical functional from a registry key."""
    key = key.replace(" ", "")
    if key.startswith("const:"):
        try:
            return constant_functional(float(key[6:]))
        except ValueError:
            raise RegistryError(f"bad constant in {key!r}") from None
    amp, rest = _split_amp(key)
    if "@" not in rest:
        raise RegistryError(f"functional {key!r} needs '@anchors'")
    fn, anchors = rest.split("@", 1)
    if fn not in UNARY:
        raise RegistryError(f"unknown function {fn!r} in {key!r}; known: {sorted(UNARY)}")
    f, df, fb, dfb = UNARY[fn]
    anchors = _anchors(anchors, key)
    k = len(anchors)

    def g(x):
        return amp * f(np.sum(x, axis=-1))

    def grad(x):
        return np.repeat((amp * df(np.sum(x, axis=-1)))[..., None], k, axis=-1)

    return CylindricalFunctional(anchors, g, grad, abs(amp) * fb, abs(amp) * dfb * k, key)


def step_process(key):
    """Step process from a registry key; the optional ':profile' suffix scales in time."""
    key = key.replace(" ", "")
    if key == "zero":
        return zero_process()
    profile = None
    if key.count(":") and not key.startswith("const:"):
        key_body, profile = key.rsplit(":", 1)
        if profile not in PROFILES:
            raise RegistryError(f"unknown profile {profile!r} in {key!r}; known: {sorted(PROFILES)}")
    else:
        key_body = key
    F = functional(key_body)
    if profile is None:
        return StepProcess.from_functional(F, name=key)
    p, dp = PROFILES[profile]
    return StepProcess.from_functional(F, p, dp, name=key)


# Suites used by the acceptance experiments.  Amplitudes are kept moderate so
# that the O(dt) gap between the closed-form determinant and the exact grid
# determinant stays small at desk-scale grids.
SIGMA_SUITE = ("const:0.5", "0.5*sin@0.5", "0.4*cos@1.0", "0.3*tanh@0.25,0.75",
               "0.4*sin@0.5:ramp")
FUNCTIONAL_SUITE = ("cos@1.0", "sin@0.5", "gauss@0.75", "atan@0.25,1.0", "0.5*cos@0.5,1.0")
# (G, u) pairs for duality checks and (G, sigma) pairs for the Girsanov identity
DUALITY_SUITE = (("cos@1.0", "sin@0.5"), ("sin@0.5", "0.5*cos@1.0"),
                 ("gauss@0.75", "tanh@0.25,0.75"), ("atan@0.25,1.0", "const:0.7"),
                 ("cos@0.5,1.0", "0.8*sin@0.75:decay"))
GIRSANOV_SUITE = (("cos@1.0", "0.5*sin@0.5"), ("sin@0.5", "0.4*cos@1.0"),
                  ("gauss@0.75", "0.3*tanh@0.25,0.75"), ("atan@0.25,1.0", "0.4*sin@0.5:ramp"),
                  ("cos@0.5,1.0", "const:0.5"))


class Drift:
    """Drift b(t, x, y) with Lipschitz profile gamma(t) and bound M.

    ``y`` holds the path values at ``anchors`` (shape (..., len(anchors)));
    drifts without anchors ignore it.  Instances are normally produced by
    :func:`fracgirsanov.sde.validate_drift`.
    """

    def __init__(self, b, gamma, M, anchors=(), name=""):
        self.b = b
        self.gamma = gamma
        self.M = float(M)
        self.anchors = tuple(float(a) for a in anchors)
        self.name = name

    def __call__(self, t, x, y=None):
        return np.asarray(self.b(t, x, y), dtype=float)

    def __repr__(self):
        return f"Drift({self.name!r}, M={self.M})"


def drift_spec(key):
    """Unvalidated (b, gamma, M, anchors, name) for a drift key."""
    key = key.replace(" ", "")
    if key == "zero":
        return (lambda t, x, y: np.zeros(np.shape(x)), lambda t: np.zeros_like(t), 0.0, (), key)
    if key == "sin":
        return (lambda t, x, y: np.sin(x), np.ones_like, 1.0, (), key)
    if key.startswith("lin:"):
        try:
            a = float(key[4:])
        except ValueError:
            raise RegistryError(f"bad slope in {key!r}") from None
        return (lambda t, x, y: a * np.asarray(x), lambda t: np.full_like(t, abs(a)),
                abs(a), (), key)
    if key.startswith("sincos@"):
        anchors = _anchors(key[7:], key)
        if len(anchors) != 1:
            raise RegistryError(f"{key!r} takes exactly one anchor")
        return (lambda t, x, y: np.sin(x) * np.cos(y[..., 0]), np.ones_like, 1.0, anchors, key)
    raise RegistryError(f"unknown drift {key!r}")
