"""Tests for dxs-unet."""
