"""Non-invasive adversarial mesh attacks on a multi-camera BEV detector.

Modules: ``autodiff`` (reverse-mode tensors), ``geometry`` (boxes, cameras),
``mesh`` (primitives, placement, OBJ), ``renderer`` (soft and z-buffer
rasterization), ``occlusion``, ``detector``, ``attack``, ``scene``,
``evaluation`` and ``cli``.
"""

__version__ = "0.1.0"
