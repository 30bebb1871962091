"""Tests for lesion-bench."""
