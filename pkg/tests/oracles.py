"""Independent reference solutions, written without the package's discretisation."""

import numpy as np
from scipy.integrate import quad


def kappa_ref(x):
    return 1 + 0.5 * np.sin(2 * np.pi * x)


def _K(s):
    # antiderivative of kappa_ref with K(0) = 0
    return s + 0.25 / np.pi * (1 - np.cos(2 * np.pi * s))


def stationary_1d(x, v0=0.5, c=0.3, m00=1.0):
    """Exact stationary pair for -u'' + kappa u'^2 = 0 and -m'' - 2 (m kappa u')' = 0.

    With v = u' the first equation is v' = kappa v^2, so v = v0 / (1 - v0 K).
    The second integrates once to m' + 2 kappa v m = c, solved with the
    integrating factor r = (v / v0)^2 (since r' = 2 kappa v r).
    """
    v = lambda s: v0 / (1 - v0 * _K(s))
    r = lambda s: (v(s) / v0) ** 2
    opts = dict(epsabs=1e-13, epsrel=1e-13, limit=200)
    u = np.array([quad(v, 0, xi, **opts)[0] for xi in x])
    I = np.array([quad(r, 0, xi, **opts)[0] for xi in x])
    m = (m00 + c * I) / r(np.asarray(x))
    return u, m

