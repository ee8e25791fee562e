"""Bundled example programs."""
from importlib import resources


def traffic_light_source() -> str:
    return resources.files(__package__).joinpath("traffic_light.casm").read_text()
