"""Tests for ragcoder."""
