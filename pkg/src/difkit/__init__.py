"""Learning environment-invariant derivative functions from multi-environment trajectories.

Submodules: ``dyn`` (integration, NRMSE), ``systems`` (simulated datasets),
``grad`` (reverse-mode autodiff), ``hyper`` (batched derivative networks),
``nets`` (hypernetwork model), ``train``, ``evaluate`` and ``cli``.
"""

__version__ = "0.1.0"
