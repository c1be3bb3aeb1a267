"""swayid: identify posture-control parameters from body sway recordings.

The toolkit simulates a single-inverted-pendulum stander balancing on a
tilting support surface under a disturbance-compensating servo controller,
builds labeled datasets of sway responses, trains a small convolutional
network to regress the seven controller parameters from a two-channel
spectrogram of the sway, and cross-checks identifications with a
derivative-free fitting routine plus re-simulation.
"""

__version__ = "0.1.0"

from .dynamics import BodyParams, DecParams, SimConfig, simulate
from .stimulus import PrtsConfig, generate_prts

__all__ = [
    "__version__",
    "BodyParams",
    "DecParams",
    "SimConfig",
    "simulate",
    "PrtsConfig",
    "generate_prts",
]
