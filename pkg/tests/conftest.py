"""Shared builders for integration tests.

Most integration tests need the same pile of config artifacts: two hook
configs, an SLO config, an alias map and the two carbon CSV datasets.
`platform` writes them once per test into a tmp directory and hands back
a small factory for scenario dicts on top of them.
"""

import json
import math
from dataclasses import dataclass
from pathlib import Path

import pytest

EPOCH_MS = 1751328000000

SOURCE_ROWS = {
    "coal": 820.0, "gas": 490.0, "oil": 650.0, "nuclear": 12.0, "hydro": 24.0,
    "wind": 11.0, "solar": 41.0, "biomass": 230.0, "geothermal": 38.0,
}

SLO_CONFIG = {
    "slos": [
        {"id": "FPS", "description": "Mean delivered frame rate",
         "query": "mean(fps.value, 60s)", "unit": "frames/s", "min": 24, "max": 30},
        {"id": "power_w", "description": "Mean apparent power draw",
         "query": "mean(power.apparent_w, 60s)", "unit": "W", "min": 0, "max": 18},
    ],
    "settings": [
        {"id": "EncodingThreadCount", "description": "Number of encoder worker threads",
         "type": "integer", "min": 0, "max": 16},
    ],
}

ALIAS_CONFIG = {
    "FPS": {"id": "ServiceSLO", "description": "Primary service objective"},
    "EncodingThreadCount": {"id": "ServiceParam",
                            "description": "Primary service parameter"},
}

HOOK_FPS = {
    "topic": "fps/+",
    "interpreter": "json",
    "measurement": "fps",
    "fields": {"/fps": "value"},
    "tags": {"client": {"topic_segment": 1}},
    "timestamp": "envelope",
}

HOOK_POWER = {
    "topic": "power/#",
    "interpreter": "json",
    "measurement": "power",
    "fields": {"/ENERGY/ApparentPower": "apparent_w"},
}

NOISELESS_MODEL = {"f_max": 40.0, "kappa": 6.5, "p_idle": 13.0, "p_per_thread": 0.55}


def intensity_at(hour: int) -> float:
    """The generated AT grid curve; tests use this as their lookup oracle."""
    return round(165.0 + 85.0 * math.sin(2 * math.pi * ((hour % 24) - 3.0) / 24.0), 1)


def write_location_csv(path: Path, hours: int = 96) -> None:
    lines = ["country,timestamp_ms,granularity,intensity_gco2eq_kwh"]
    for h in range(hours + 1):
        lines.append(f"AT,{EPOCH_MS + h * 3600_000},hourly,{intensity_at(h)}")
    path.write_text("\n".join(lines) + "\n")


@dataclass
class Platform:
    root: Path
    hooks: list
    slos: str
    aliases: str
    sources: str
    locations: str

    def scenario(self, **overrides) -> dict:
        raw = {
            "seed": 0,
            "mode": "sim",
            "duration_s": 600.0,
            "epoch_ms": EPOCH_MS,
            "model": dict(NOISELESS_MODEL),
            "hooks": list(self.hooks),
            "slos": self.slos,
            "emma": {"sources": self.sources, "locations": self.locations},
            "warmup_steps": 0,
            "initial_threads": 16,
        }
        for key, value in overrides.items():
            if key in ("model", "emma") and isinstance(value, dict):
                raw[key] = {**raw[key], **value}
            else:
                raw[key] = value
        return raw

    def write_scenario(self, name: str, **overrides) -> str:
        path = self.root / name
        path.write_text(json.dumps(self.scenario(**overrides), indent=2))
        return str(path)


def build_platform(root: Path, location_hours: int = 96) -> Platform:
    root.mkdir(parents=True, exist_ok=True)
    (root / "hook_fps.json").write_text(json.dumps(HOOK_FPS, indent=2))
    (root / "hook_power.json").write_text(json.dumps(HOOK_POWER, indent=2))
    (root / "slos.json").write_text(json.dumps(SLO_CONFIG, indent=2))
    (root / "aliases.json").write_text(json.dumps(ALIAS_CONFIG, indent=2))
    source_lines = ["source,intensity_gco2eq_kwh"]
    source_lines += [f"{s},{v}" for s, v in SOURCE_ROWS.items()]
    (root / "sources.csv").write_text("\n".join(source_lines) + "\n")
    write_location_csv(root / "locations.csv", hours=location_hours)
    return Platform(
        root=root,
        hooks=[str(root / "hook_fps.json"), str(root / "hook_power.json")],
        slos=str(root / "slos.json"),
        aliases=str(root / "aliases.json"),
        sources=str(root / "sources.csv"),
        locations=str(root / "locations.csv"),
    )


@pytest.fixture()
def platform(tmp_path):
    return build_platform(tmp_path / "platform")
