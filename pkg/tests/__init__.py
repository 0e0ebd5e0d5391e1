"""Tests for the irsr package."""
