"""Tests for crossgap."""
