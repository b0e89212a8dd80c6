"""Plot rendering for simcache experiment outputs."""

from simcache_plots.render import PlotSpec, SpecError, render

__version__ = "0.1.0"

__all__ = ["PlotSpec", "SpecError", "render"]
