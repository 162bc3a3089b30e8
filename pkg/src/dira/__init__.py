"""Self-supervised pretraining that couples discriminative, restorative, and
adversarial learning, plus the tooling around it: synthetic phantom datasets,
transfer fine-tuning, weakly-supervised localization, and report building.
"""

__version__ = "0.1.0"
