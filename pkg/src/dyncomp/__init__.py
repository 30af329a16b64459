"""dyncomp: LOOP programs compiled into four dynamical backends and cross-verified.

The pipeline lowers LOOP programs (primitive recursive functions) through a
threshold-affine normal form into a recurrent ReLU network, a coded
bounded-activation network, a polynomial ODE, and a step-size-controlled
Euler map, then checks all of them against the exact reference interpreter.
"""

__version__ = "0.1.0"
