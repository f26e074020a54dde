"""Integration tests for dxs-unet."""
