"""
opwalk Defaults
---------------
Centralized numeric tokens shared by the services and the runner.

Tolerances:
- EXACT: dynamic-programming identities (mass, Chapman-Kolmogorov, convolution)
- PREFACTOR: prefactor recursions and harmonicity residuals
- DRIFT: exact-slice mass drift above which a slice is reported as defective
- HYBRID: unit mass of hybrid measures

Window sizing:
- a walk of n steps from y at time m covers y +/- (n + 1 + spatial margin)
- the horizon sits n + max(50, 20 * ceil(log2(slab volume))) above m unless overridden
"""

import math

# ============================================================================
# TOLERANCES
# ============================================================================

class Tolerance:
    """Numerical tolerances."""

    EXACT = 1e-12
    PREFACTOR = 1e-10
    HYBRID = 1e-10
    DRIFT = 1e-9


# ============================================================================
# WINDOW TOKENS
# ============================================================================

class Window:
    """Window and horizon defaults."""

    MIN_HORIZON_MARGIN = 50
    HORIZON_PER_LOG2_VOLUME = 20
    SPATIAL_MARGIN = 16
    EXACT_MAX_SITES = 24      # full-environment enumeration limit
    BATCH_SITE_BUDGET = 2**24  # sites per vectorised Monte Carlo batch

    @staticmethod
    def horizon_margin(slab_volume: int) -> int:
        """Default distance from the walk's last time to the backbone horizon."""
        log_volume = math.ceil(math.log2(max(slab_volume, 2)))
        return max(Window.MIN_HORIZON_MARGIN, Window.HORIZON_PER_LOG2_VOLUME * log_volume)


# ============================================================================
# DIAGNOSTIC CONSTANTS
# ============================================================================

class Bounds:
    """
    Constants for bound-shaped diagnostics.

    The theory only asserts that such constants exist; these are
    artifact-chosen defaults and every one can be overridden in the config.
    """

    GOOD_ESCAPE_C = 1.0
    GOOD_ESCAPE_c = 0.01
    LADDER_C = 1.0
    LADDER_ALPHA = 0.1
    SOCIAL_C = 4.0
    INTERSECTION_C = 4.0
    SURVIVAL_DEEP_MARGIN = 100
    CRITICAL_RATIO = 0.9

