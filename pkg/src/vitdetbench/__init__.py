"""Desk-scale ViT-detector benchmark harness.

Submodules: tensor (autodiff engine), backbone (windowed/global ViT), fpn
(adapter + pyramid), heads (detector stacks + toy loss), data (shapes dataset
and augmentation), optim/train (AdamW, schedules, loops), hpo (tuning
protocol), complexity (counting + benchmarking), checkpoint (serialization
and transfer rules), cli.
"""

__version__ = "0.1.0"
