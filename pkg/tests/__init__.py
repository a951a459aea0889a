# Tests for ennam-django-clipsim
