"""
Frozen numerical constants that carry a derivation.

Gronwall constant of the payoff second-moment estimate
------------------------------------------------------
For dP = b dt + sigma dw with |b|^2 + |sigma|^2 <= L2^2 (1 + P^2), Ito's formula
gives d E[P^2] = E[2 P b + sigma^2] dt. Using 2 P b <= P^2 + b^2,

    d E[P^2] / dt <= E[P^2] + L2^2 (1 + E[P^2]) = L2^2 + (1 + L2^2) E[P^2],

so by Gronwall, for s <= t <= T,

    E[P(t)^2] <= (P_s^2 + L2^2 T) exp((1 + L2^2) T).

Choosing K = 1 + L2^2 * max(1, T) gives both K >= 1 + L2^2 (so the exponential
is dominated by exp(K T)) and K (1 + P_s^2) >= P_s^2 + K >= P_s^2 + L2^2 T, hence

    E[P(t)^2] <= K (1 + P_s^2) exp(K T).

That K is the one used by the cost bound. It only depends on the growth
constant L2 and the horizon T.
"""

import math

# Tail bound of a semimartingale: levels must exceed this multiple of
# max(|x|, kappa T).
TAIL_LEVEL_FACTOR = 3.0

# Largest exponent accepted before the cost bound is reported as overflowing.
MAX_EXPONENT = math.log(1.7976931348623157e308)


def gronwall_constant(growth_constant: float, horizon: float) -> float:
    """K = 1 + L2^2 * max(1, T); see module docstring."""
    return 1.0 + growth_constant ** 2 * max(1.0, horizon)
