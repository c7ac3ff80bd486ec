"""Tests for the workflow-predictor package."""
