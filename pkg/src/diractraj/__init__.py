"""Trajectory construction of free Dirac evolution in an Euler-angle representation.

Submodules: ``angular`` (basis functions and operators on SU(2)), ``spinor``
(gamma matrices and the Majorana split), ``reference`` (spectral oracle),
``trajectory`` (label congruences and reconstruction), ``covariance``
(first-order boost checks), ``observables`` (density flows and polar
diagnostics), plus ``io``, ``config``, ``pipelines`` and ``cli``.
"""
__version__ = "0.1.0"
