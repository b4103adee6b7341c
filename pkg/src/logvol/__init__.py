"""Cluster-driven log-volatility factor model with memory filtration."""

from .dbht import Clustering, build_planar_graph, cluster_correlation, dbht_cluster
from .factor_pipeline import (decompose, log_abs_transform, log_returns, memory_filtration,
                              select_cluster_factors, sector_enrichment)
from .memory_metrics import MemoryProfile, memory_profile
from .panel_io import PricePanel, clean_panel, load_prices
from .stats_core import CorrelationMatrix, correlation
from .synth import SynthSpec, generate_panel

__version__ = "0.1.0"
