"""Unit tests for dxs-unet."""
