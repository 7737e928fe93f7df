"""Cycle-decomposed random walks in random environments on a periodic lattice.

Environment sampling, corrector computation, walk simulation and numerical
checks of the analytic inequalities behind the quenched invariance principle.
"""

__version__ = "0.1.0"

from cyclewalk.errors import CycleWalkError  # noqa: E402,F401
