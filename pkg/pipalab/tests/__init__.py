"""Tests for the PIPA laboratory."""
