"""
dxs core - numerical library.

Modules:
- autodiff: tensors, reverse-mode ops, Adam, gradient checking
- gradcheck: gradient self-test suite
- signal_model: multi-peak water/fat signal model and echo subsets
- phantom: synthetic multi-echo abdominal phantoms
- reference: field-map resolving water/fat separation
- unet: U-Net parameters and forward pass
- training: k-fold cross-validated training
- evaluation: Otsu foreground, liver FF metrics, image exports
- dataset, tensorfile, export: on-disk formats
- run_config: TOML run configuration
"""
