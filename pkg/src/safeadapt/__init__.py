"""Adaptive safe control toolkit.

Learns latent-conditioned control-affine dynamics in simulation, infers
the environment latent from state-action history at deployment, fine-tunes
on few-shot data from the target system, and filters actions through a
robust discrete-time control-barrier-function QP.
"""

__version__ = "0.1.0"
