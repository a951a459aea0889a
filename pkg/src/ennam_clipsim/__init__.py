"""
ennam-django-clipsim - clipping-bias entropy simulator for tabular policies

Clipped surrogate objectives, idealized policy-gradient dynamics under random
rewards and first-order entropy-change predictions, packaged as a Django app
with a ``clipsim`` management command.
"""

__version__ = "0.1.0"
__author__ = "Ennam"

default_app_config = "ennam_clipsim.apps.ClipsimConfig"
