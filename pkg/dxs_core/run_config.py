"""
Run configuration loaded from TOML.

    [acquisition]   b0, te1, delta_te, n_echoes
    [spectrum]      preset = "six_peak" | "three_peak" | "single_peak", or amplitudes/shifts_ppm
    [phantom]       geometry, tissue FF ranges, field, noise
    [reference]     reference separation
    [network]       depth, base_features (in_channels follows the echo subset)
    [training]      schedule, echoes, folds
    [evaluation]    cutoff, histogram bins, PNG export

Unknown keys anywhere are rejected.
"""

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Any, Dict, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from dxs_core.evaluation import EvaluationConfig
from dxs_core.phantom import PhantomConfig
from dxs_core.reference import ReferenceConfig
from dxs_core.signal_model import AcquisitionConfig, FatSpectrum
from dxs_core.training import TrainConfig
from dxs_core.unet import UNetSpec
from dxs_graph.errors import ConfigError


class SpectrumSection(BaseModel):
    """Either a named preset or explicit peaks."""

    model_config = ConfigDict(extra="forbid")

    preset: Optional[str] = "six_peak"
    amplitudes: Optional[list[float]] = None
    shifts_ppm: Optional[list[float]] = None

    def build(self) -> FatSpectrum:
        if self.amplitudes is not None or self.shifts_ppm is not None:
            if self.amplitudes is None or self.shifts_ppm is None:
                raise ConfigError("spectrum: amplitudes and shifts_ppm must be given together")
            return FatSpectrum(amplitudes=self.amplitudes, shifts_ppm=self.shifts_ppm)
        return FatSpectrum.preset(self.preset or "six_peak")


class NetworkSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    depth: int = Field(3, ge=1, le=8)
    base_features: int = Field(16, ge=1)

    def spec(self, n_channels_echoes: int) -> UNetSpec:
        return UNetSpec(depth=self.depth, base_features=self.base_features, in_channels=2 * n_channels_echoes)


class RunConfig(BaseModel):
    """All run parameters; defaults reproduce the published protocol."""

    model_config = ConfigDict(extra="forbid")

    acquisition: AcquisitionConfig = Field(default_factory=AcquisitionConfig)
    spectrum: SpectrumSection = Field(default_factory=SpectrumSection)
    phantom: Dict[str, Any] = Field(default_factory=dict)
    reference: ReferenceConfig = Field(default_factory=ReferenceConfig)
    network: NetworkSection = Field(default_factory=NetworkSection)
    training: TrainConfig = Field(default_factory=TrainConfig)
    evaluation: EvaluationConfig = Field(default_factory=EvaluationConfig)

    @property
    def fat_spectrum(self) -> FatSpectrum:
        return self.spectrum.build()

    def phantom_config(self) -> PhantomConfig:
        """Phantom settings with the run's acquisition and spectrum injected."""
        return PhantomConfig.model_validate({
            **self.phantom,
            "acquisition": self.acquisition.model_dump(),
            "spectrum": self.fat_spectrum.model_dump(),
        })

    def network_spec(self, echoes: Optional[str] = None) -> UNetSpec:
        """U-Net spec for an echo subset (defaults to the training echoes)."""
        subset_cfg = self.training if echoes is None else self.training.model_copy(update={"echoes": echoes})
        subset = subset_cfg.echo_subset(self.acquisition.n_echoes)
        return self.network.spec(len(subset.indices))


def _describe(error: ValidationError, prefix: str = "") -> str:
    parts = []
    for item in error.errors():
        location = ".".join(str(p) for p in item.get("loc", ()))
        parts.append(f"{prefix}{location}: {item.get('msg', 'invalid')}")
    return "; ".join(parts)


def parse_run_config(payload: Dict[str, Any], source: str = "<config>") -> RunConfig:
    """
    Validate a configuration mapping.

    Raises:
        ConfigError: naming every offending key
    """
    phantom = payload.get("phantom", {})
    if isinstance(phantom, dict):
        for key in ("acquisition", "spectrum"):
            if key in phantom:
                raise ConfigError(f"{source}: phantom.{key}: set it in the [{key}] section")
    try:
        cfg = RunConfig.model_validate(payload)
    except ValidationError as e:
        raise ConfigError(f"{source}: {_describe(e)}") from None

    try:
        cfg.fat_spectrum
    except (ValueError, ValidationError) as e:
        raise ConfigError(f"{source}: spectrum: {e}") from None
    try:
        cfg.phantom_config()
    except ValidationError as e:
        raise ConfigError(f"{source}: {_describe(e, 'phantom.')}") from None
    return cfg


def load_run_config(path: Optional[Union[str, Path]] = None) -> RunConfig:
    """Load a TOML run configuration; defaults when `path` is None."""
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        with path.open("rb") as f:
            payload = tomllib.load(f)
    except FileNotFoundError:
        raise ConfigError(f"Config file not found: {path}") from None
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: invalid TOML: {e}") from None
    return parse_run_config(payload, str(path))
