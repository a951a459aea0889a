"""Django app configuration for ennam-django-clipsim."""

from django.apps import AppConfig


class ClipsimConfig(AppConfig):
    """Configuration for the clipsim Django app."""

    name = "ennam_clipsim"
    verbose_name = "Clipping-Bias Entropy Simulator"
    default_auto_field = "django.db.models.BigAutoField"
