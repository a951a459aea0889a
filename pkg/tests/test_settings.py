"""
Tests for settings module.
"""


import pytest


class TestClipsimSettings:
    """Tests for ClipsimSettings class."""

    def test_default_settings(self):
        """Test that default settings are loaded."""
        from ennam_clipsim.settings import clipsim_settings

        clipsim_settings.reload()
        assert clipsim_settings.EXACT_STATE_BUDGET == 200_000
        assert clipsim_settings.WORKERS == 1
        assert clipsim_settings.IDEALIZED_ETA == {"pg": 100.0, "npg": 8.0}
        assert clipsim_settings.IDEALIZED_REFRESH_PERIOD == 1
        assert clipsim_settings.RUN_DEFAULTS["tree"]["vocab_size"] == 6

    def test_user_settings_override(self, mock_clipsim_settings):
        """Test that user settings override defaults."""
        from ennam_clipsim.settings import clipsim_settings

        assert clipsim_settings.WORKERS == 2
        assert clipsim_settings.RUN_DEFAULTS["steps"] == 16

    def test_environment_variable_override(self, monkeypatch):
        """Test that environment variables override defaults, converted to the setting type."""
        from ennam_clipsim.settings import clipsim_settings

        monkeypatch.setenv("CLIPSIM_EXACT_STATE_BUDGET", "1234")
        clipsim_settings.reload()
        try:
            assert clipsim_settings.EXACT_STATE_BUDGET == 1234
        finally:
            monkeypatch.delenv("CLIPSIM_EXACT_STATE_BUDGET")
            clipsim_settings.reload()

    def test_user_settings_win_over_environment(self, monkeypatch, mock_clipsim_settings):
        """Test that Django settings take precedence over environment variables."""
        from ennam_clipsim.settings import clipsim_settings

        monkeypatch.setenv("CLIPSIM_WORKERS", "7")
        clipsim_settings.reload()
        assert clipsim_settings.WORKERS == 2

    def test_nested_defaults_are_copies(self):
        """Test that mutating a nested default does not leak into DEFAULTS."""
        from ennam_clipsim.settings import DEFAULTS, clipsim_settings

        clipsim_settings.reload()
        clipsim_settings.RUN_DEFAULTS["steps"] = -1
        clipsim_settings.reload()
        assert DEFAULTS["RUN_DEFAULTS"]["steps"] == 500
        assert clipsim_settings.RUN_DEFAULTS["steps"] == 500

    def test_get_output_dir(self, mock_clipsim_settings, temp_output_dir):
        """Test get_output_dir method."""
        from ennam_clipsim.settings import clipsim_settings

        assert clipsim_settings.get_output_dir() == temp_output_dir
        assert clipsim_settings.get_output_dir("/tmp/override") == "/tmp/override"

    def test_invalid_setting_raises_error(self):
        """Test that accessing invalid setting raises AttributeError."""
        from ennam_clipsim.settings import clipsim_settings

        with pytest.raises(AttributeError):
            _ = clipsim_settings.INVALID_SETTING

    def test_reload_clears_cache(self, mock_clipsim_settings):
        """Test that reload clears cached values."""
        from ennam_clipsim.settings import clipsim_settings

        # Access a setting to cache it
        _ = clipsim_settings.WORKERS
        assert "WORKERS" in clipsim_settings._cached_attrs

        # Reload
        clipsim_settings.reload()
        assert len(clipsim_settings._cached_attrs) == 0
