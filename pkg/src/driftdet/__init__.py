"""driftdet: a tiny, fully deterministic detector for degraded scenes.

Layers: a 4-D tensor substrate with taped reverse-mode gradients, a
dual-branch attention block, a parameter-free four-direction shift fusion
module, a slide-weighted truncated GIoU loss, a synthetic scene generator,
a toy anchor-free detector with SGD training, and a CLI tying it together.
"""

__version__ = "0.1.0"
